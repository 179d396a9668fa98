"""SpikingEDN: spiking stems (or SSAM), genotype-built encoder cells, spiking ASPP and decoder.

All traffic between spiking layers is binary. The only real-valued tensors
are the network input, the SSAM augmented input, membrane currents inside a
layer and the final class scores.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .autograd import functional as F
from .autograd import Conv2d, ConvBN, Module, Tensor
from .autograd.nn import StateError
from .genotype import Genotype, GenotypeError, default_genotype
from .neuron import PLACEMENTS, NeuronConfig, NeuronState, SpikingNeuron, Surrogate


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    num_classes: int = 6
    in_channels: int = 5
    stem_channels: int = 64
    node_width: int = 16
    aspp_channels: int = 32
    aspp_rates: tuple[int, ...] = (6, 12, 18)
    decoder_channels: int = 64
    placement: str = "first"
    u_th: float = 0.5
    tau: float = 0.2
    beta: float = 0.07
    tau_a: float = 0.3
    tau_a_range: tuple[float, float] = (0.2, 0.4)
    surrogate: str = "triangle"
    surrogate_temp: float = 1.0
    ssam: str | None = None
    ssam_multiplicative: bool = False
    aug_channels: int = 1
    num_layers: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.placement not in PLACEMENTS:
            raise ConfigError(f"placement must be one of {PLACEMENTS}")
        if self.ssam not in (None, "S1", "S2", "S3"):
            raise ConfigError(f"unknown SSAM variant {self.ssam!r}")
        if self.ssam and self.stem_channels % 4:
            raise ConfigError("SSAM needs stem_channels divisible by 4 (four dilated branches)")
        self.aspp_rates = tuple(self.aspp_rates)
        self.tau_a_range = tuple(self.tau_a_range)

    def lif(self) -> NeuronConfig:
        return NeuronConfig.lif(self.u_th, tau=self.tau, surrogate=Surrogate(self.surrogate, self.surrogate_temp))

    def ailif(self) -> NeuronConfig:
        return NeuronConfig.ailif(self.u_th, self.beta, self.tau_a, tau=self.tau, tau_a_range=self.tau_a_range,
                                  surrogate=Surrogate(self.surrogate, self.surrogate_temp))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class StepContext:
    """Per-time-step bookkeeping: neuron states in/out, firing rates, optional op counting."""

    def __init__(self, states: dict[str, NeuronState] | None = None, record_spikes: bool = False, counter=None):
        self.states = states or {}
        self.new_states: dict[str, NeuronState] = {}
        self.rates: dict[str, float] = {}
        self.spikes: dict[str, np.ndarray] | None = {} if record_spikes else None
        self.counter = counter

    def get_state(self, path: str) -> NeuronState | None:
        return self.states.get(path)

    def put_state(self, path: str, state: NeuronState, y: Tensor) -> None:
        self.new_states[path] = state
        self.rates[path] = float(y.data.mean())
        if self.spikes is not None:
            self.spikes[path] = y.data

    def record_conv(self, conv, x: Tensor, bn_folded: bool | None = None, out_hw=None) -> None:
        if self.counter is not None:
            self.counter.record_conv(conv, x, bn_folded, out_hw)

    def record_mult(self, path: str, count: int) -> None:
        if self.counter is not None:
            self.counter.record_mult(path, count)


@dataclass
class Unrolled:
    scores: list[Tensor]
    states: dict[str, NeuronState]
    rates: list[dict[str, float]]
    spikes: list[dict[str, np.ndarray]] | None = None


class _NeuronFactory:
    """Hands out neuron configs in construction order according to the placement policy."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.index = 0

    def __call__(self, first: bool = False) -> NeuronConfig:
        p = self.cfg.placement
        adaptive = p == "all" or (p == "first" and first)
        self.index += 1
        return self.cfg.ailif() if adaptive else self.cfg.lif()


class SpikingConv(Module):
    """conv + BN as input current to a spiking neuron."""

    def __init__(self, cin: int, cout: int, k: int, ncfg: NeuronConfig, stride: int = 1, dilation: int = 1,
                 padding: int | None = None, rng=None):
        super().__init__()
        self.cb = ConvBN(cin, cout, k, stride, dilation, padding, rng=rng)
        self.neuron = SpikingNeuron(ncfg)

    def forward(self, x: Tensor, ctx: StepContext) -> Tensor:
        return self.neuron(self.cb(x, ctx), ctx)


def _down_kernel(factor: int) -> int:
    return factor + 1 if factor > 1 else 3


class Stem(Module):
    def __init__(self, cin: int, cout: int, factor: int, ncfg: NeuronConfig, rng):
        super().__init__()
        self.factor = factor
        k = _down_kernel(factor) if factor > 1 else 3
        self.layer = SpikingConv(cin, cout, k, ncfg, stride=factor, padding=k // 2, rng=rng)

    def forward(self, x: Tensor, ctx: StepContext) -> Tensor:
        return self.layer(x, ctx)


class TapAdapter(Module):
    """Brings a previous layer's spikes to the cell's resolution and width."""

    def __init__(self, cin: int, cout: int, src_factor: int, dst_factor: int, ncfg: NeuronConfig, rng):
        super().__init__()
        if dst_factor >= src_factor:
            self.down = dst_factor // src_factor
            self.up = 1
            k = _down_kernel(self.down) if self.down > 1 else 1
            self.layer = SpikingConv(cin, cout, k, ncfg, stride=self.down, padding=k // 2, rng=rng)
        else:
            self.down = 1
            self.up = src_factor // dst_factor
            self.layer = SpikingConv(cin, cout, 1, ncfg, rng=rng)

    def forward(self, x: Tensor, ctx: StepContext) -> Tensor:
        y = self.layer(x, ctx)
        return F.upsample_nearest(y, self.up) if self.up > 1 else y


def make_op(name: str, width: int, rng) -> Module | None:
    if name == "skip":
        return None
    if name == "conv3x3":
        return ConvBN(width, width, 3, rng=rng)
    if name == "conv5x5":
        return ConvBN(width, width, 5, rng=rng)
    raise GenotypeError(f"unknown op {name!r}")


class Cell(Module):
    """Nodes sum their edge outputs into a spiking neuron; the cell emits the concatenated node spikes."""

    def __init__(self, node_ops: list[list[str]], taps: tuple[tuple[int, int], tuple[int, int]],
                 dst_factor: int, width: int, nf: _NeuronFactory, rng):
        super().__init__()
        self.node_ops = [list(n) for n in node_ops]
        self.pre0 = TapAdapter(taps[0][0], width, taps[0][1], dst_factor, nf(), rng)
        self.pre1 = TapAdapter(taps[1][0], width, taps[1][1], dst_factor, nf(), rng)
        self.ops: list[Module] = []
        self._op_index: list[list[int | None]] = []
        for node in self.node_ops:
            idx = []
            for op in node:
                m = make_op(op, width, rng)
                if m is None:
                    idx.append(None)
                else:
                    idx.append(len(self.ops))
                    self.ops.append(m)
            self._op_index.append(idx)
        self.neurons = [SpikingNeuron(nf()) for _ in self.node_ops]
        self.out_channels = width * len(self.node_ops)

    def forward(self, s0: Tensor, s1: Tensor, ctx: StepContext) -> Tensor:
        states = [self.pre0(s0, ctx), self.pre1(s1, ctx)]
        for j, idx in enumerate(self._op_index):
            current = None
            for i, k in enumerate(idx):
                term = states[i] if k is None else self.ops[k](states[i], ctx)
                current = term if current is None else current + term
            states.append(self.neurons[j](current, ctx))
        return F.concat(states[2:], axis=1)


class SSAM(Module):
    """Dual-path spatially-adaptive modulation replacing the first stem.

    Lower path: 1x1 conv + BN on the event frames. Upper path (variant):
      S1: one conv on the augmented input;
      S2: parallel dilated convs + BN -> spike -> conv;
      S3: conv + BN -> spike -> parallel dilated convs (concatenated).
    The upper path output is added to the normalised lower path before the
    final spiking neuron. ``multiplicative`` additionally scales the lower
    path by a map generated from the upper path.
    """

    RATES = (1, 2, 3, 4)

    def __init__(self, cin: int, aug_ch: int, cout: int, variant: str, multiplicative: bool,
                 final_cfg: NeuronConfig, nf: _NeuronFactory, rng):
        super().__init__()
        self.variant = variant
        self.multiplicative = multiplicative
        self.lower = ConvBN(cin, cout, 1, rng=rng)
        q = cout // 4
        self.upper_in = None
        self.par: list[Module] = []
        self.upper_out = None
        if variant == "S1":
            self.upper_out = Conv2d(aug_ch, cout, 3, bias=True, rng=rng)
            gamma_src = aug_ch
        elif variant == "S2":
            self.par = [ConvBN(aug_ch, q, 3, dilation=d, rng=rng) for d in self.RATES]
            self.par_neuron = SpikingNeuron(nf())
            self.upper_out = Conv2d(cout, cout, 3, bias=True, rng=rng)
            gamma_src = cout
        else:
            self.upper_in = ConvBN(aug_ch, cout, 3, rng=rng)
            self.upper_neuron = SpikingNeuron(nf())
            self.par = [Conv2d(cout, q, 3, dilation=d, bias=True, rng=rng) for d in self.RATES]
            gamma_src = cout
        self.gamma_conv = Conv2d(gamma_src, cout, 3, bias=True, rng=rng) if multiplicative else None
        if self.gamma_conv is not None:
            self.gamma_conv.bias.data[:] = 1.0
        self.neuron = SpikingNeuron(final_cfg)

    def modulation(self, aug: Tensor, ctx: StepContext) -> tuple[Tensor, Tensor]:
        """Additive modulation map and the tensor the multiplicative gate is generated from."""
        if self.variant == "S1":
            return self.upper_out(aug, ctx), aug
        if self.variant == "S2":
            s = self.par_neuron(F.concat([c(aug, ctx) for c in self.par], axis=1), ctx)
            return self.upper_out(s, ctx), s
        s = self.upper_neuron(self.upper_in(aug, ctx), ctx)
        return F.concat([c(s, ctx) for c in self.par], axis=1), s

    def forward(self, x: Tensor, aug: Tensor, ctx: StepContext) -> Tensor:
        h = self.lower(x, ctx)
        f, src = self.modulation(aug, ctx)
        if self.gamma_conv is not None:
            gamma = self.gamma_conv(src, ctx)
            ctx.record_mult(self.gamma_conv.path + ".gate", h.size)
            h = h * gamma
        return self.neuron(h + f, ctx)


class SpikingASPP(Module):
    def __init__(self, cin: int, cout: int, rates: tuple[int, ...], nf: _NeuronFactory, rng):
        super().__init__()
        self.branches = [SpikingConv(cin, cout, 1, nf(), rng=rng)]
        self.branches += [SpikingConv(cin, cout, 3, nf(), dilation=r, rng=rng) for r in rates]
        self.pool = ConvBN(cin, cout, 1, rng=rng)
        self.pool_neuron = SpikingNeuron(nf())
        self.out_channels = cout * (len(rates) + 2)

    def _pool_branch(self, x: Tensor, ctx: StepContext) -> Tensor:
        B, _, H, W = x.shape
        if self.pool.folded:
            # conv is linear, so conv(mean(x)) == mean(conv(x)); the latter keeps binary inputs
            ctx.record_conv(self.pool.conv, x, True)
            y = F.global_avg_pool(F.conv2d(x, self.pool._fw, None, 1, 1, 0))
            y = y + self.pool._fb.reshape(1, -1, 1, 1)
        else:
            y = self.pool(F.global_avg_pool(x), ctx)
        s = self.pool_neuron(y, ctx)
        return F.broadcast_to(s, (B, s.shape[1], H, W))

    def forward(self, x: Tensor, ctx: StepContext) -> Tensor:
        outs = [b(x, ctx) for b in self.branches]
        outs.append(self._pool_branch(x, ctx))
        return F.concat(outs, axis=1)


class Decoder(Module):
    def __init__(self, cin: int, low_ch: int, width: int, num_classes: int, up_factor: int, out_factor: int,
                 nf: _NeuronFactory, rng):
        super().__init__()
        self.up_factor = up_factor
        self.out_factor = out_factor
        self.dec1 = SpikingConv(cin, width, 3, nf(), rng=rng)
        self.dec2 = SpikingConv(width + low_ch, width, 3, nf(), rng=rng)
        self.dec3 = SpikingConv(width, width, 3, nf(), rng=rng)
        self.classifier = Conv2d(width, num_classes, 1, bias=True, rng=rng)

    def forward(self, x: Tensor, low: Tensor, ctx: StepContext) -> Tensor:
        y = self.dec1(x, ctx)
        if self.up_factor > 1:
            y = F.upsample_nearest(y, self.up_factor)
        y = self.dec2(F.concat([y, low], axis=1), ctx)
        y = self.dec3(y, ctx)
        scores = self.classifier(y, ctx)
        if self.out_factor > 1:
            scores = F.upsample_average(scores, self.out_factor)
            ctx.record_mult("decoder.upsample", 4 * scores.size)
        return scores


class SpikingEDN(Module):
    def __init__(self, genotype: Genotype, cfg: ModelConfig):
        super().__init__()
        genotype.validate()
        if cfg.num_layers is not None and cfg.num_layers != genotype.num_layers:
            raise GenotypeError(f"config expects {cfg.num_layers} layers, genotype has {genotype.num_layers}")
        self.genotype = genotype
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        nf = _NeuronFactory(cfg)
        stem_f = genotype.plan[0]
        C = cfg.stem_channels
        if cfg.ssam:
            self.ssam = SSAM(cfg.in_channels, cfg.aug_channels, C, cfg.ssam, cfg.ssam_multiplicative,
                             nf(first=True), nf, rng)
            self.stem1 = None
        else:
            self.ssam = None
            self.stem1 = Stem(cfg.in_channels, C, 1, nf(first=True), rng)
        self.stem2 = Stem(C, C, stem_f, nf(), rng)
        taps = [(C, 1), (C, stem_f)]  # (channels, factor) of the two most recent outputs
        self.cells: list[Cell] = []
        for li, lv in enumerate(genotype.levels):
            dst = genotype.factor(lv)
            cell = Cell(genotype.cells[li], (taps[-2], taps[-1]), dst, cfg.node_width, nf, rng)
            self.cells.append(cell)
            taps.append((cell.out_channels, dst))
        last_ch, last_f = taps[-1]
        self.aspp = SpikingASPP(last_ch, cfg.aspp_channels, cfg.aspp_rates, nf, rng)
        self.decoder = Decoder(self.aspp.out_channels, C, cfg.decoder_channels, cfg.num_classes,
                               last_f // stem_f, stem_f, nf, rng)
        self._assign_paths()

    def _assign_paths(self) -> None:
        for path, m in self.named_modules():
            if isinstance(m, (SpikingNeuron, Conv2d)):
                m.path = path

    def neurons(self) -> list[tuple[str, SpikingNeuron]]:
        return [(p, m) for p, m in self.named_modules() if isinstance(m, SpikingNeuron)]

    def first_neuron_path(self) -> str:
        return "ssam.neuron" if self.ssam is not None else "stem1.layer.neuron"

    @property
    def expects_aug(self) -> bool:
        return self.ssam is not None

    def forward_step(self, x, aug=None, states: dict | None = None, ctx: StepContext | None = None):
        """One time step; returns ``(scores[B, classes, H, W], new_states)``."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ConfigError(f"input must be (B, {self.cfg.in_channels}, H, W), got {x.shape}")
        total = self.genotype.factor(len(self.genotype.plan) - 1)
        deepest = self.genotype.factor(max(self.genotype.levels))
        if x.shape[2] % deepest or x.shape[3] % deepest:
            raise ConfigError(f"input size {x.shape[2:]} must be divisible by {deepest} (full plan {total})")
        if ctx is None:
            ctx = StepContext(states)
        elif states is not None:
            ctx.states = states
        if self.ssam is not None:
            if aug is None:
                raise ConfigError("SSAM model needs an augmented input channel")
            aug = aug if isinstance(aug, Tensor) else Tensor(aug)
            s1 = self.ssam(x, aug, ctx)
        else:
            s1 = self.stem1(x, ctx)
        s2 = self.stem2(s1, ctx)
        prev2, prev1 = s1, s2
        for cell in self.cells:
            out = cell(prev2, prev1, ctx)
            prev2, prev1 = prev1, out
        y = self.aspp(prev1, ctx)
        scores = self.decoder(y, s2, ctx)
        return scores, ctx.new_states

    def unroll(self, frames, aug=None, warmup: int = 0, states: dict | None = None, counter=None,
               record_spikes: bool = False) -> "Unrolled":
        """Run a batch of sequences step by step.

        ``frames`` is ``(B, L, C, H, W)`` and ``aug`` ``(B, L, A, H, W)``. Scores are
        kept only for steps at or after ``warmup``; the op counter, when given,
        is active on those steps only.
        """
        frames = frames.data if isinstance(frames, Tensor) else np.asarray(frames)
        if frames.ndim != 5:
            raise ConfigError(f"frames must be (B, L, C, H, W), got shape {frames.shape}")
        if self.expects_aug and aug is None:
            raise ConfigError("SSAM model needs an augmented input channel")
        out = Unrolled([], dict(states or {}), [], [] if record_spikes else None)
        for t in range(frames.shape[1]):
            active = t >= warmup
            ctx = StepContext(out.states, record_spikes, counter if active else None)
            a = None if aug is None or not self.expects_aug else aug[:, t]
            scores, out.states = self.forward_step(frames[:, t], a, ctx=ctx)
            out.rates.append(ctx.rates)
            if record_spikes:
                out.spikes.append(ctx.spikes)
            if active:
                out.scores.append(scores)
        return out

    # -- inference-time folding ----------------------------------------------

    def conv_bns(self) -> list[tuple[str, ConvBN]]:
        return [(p, m) for p, m in self.named_modules() if isinstance(m, ConvBN)]

    def fold(self) -> "SpikingEDN":
        if self.training:
            raise StateError("switch to eval() before folding batch norm")
        for _, m in self.conv_bns():
            m.fold()
        return self

    @property
    def folded(self) -> bool:
        cbs = self.conv_bns()
        return bool(cbs) and all(m.folded for _, m in cbs)

    def parameter_report(self) -> dict[str, int]:
        groups: dict[str, int] = {}
        for name, p in self.named_parameters():
            key = name.split(".")[0]
            groups[key] = groups.get(key, 0) + p.size
        groups["total"] = self.num_parameters()
        return groups


def build_from_genotype(genotype: Genotype | None, cfg: ModelConfig) -> SpikingEDN:
    return SpikingEDN(genotype if genotype is not None else default_genotype(), cfg)


def detach_states(states: dict[str, NeuronState]) -> dict[str, NeuronState]:
    return {k: v.detach() for k, v in states.items()}
