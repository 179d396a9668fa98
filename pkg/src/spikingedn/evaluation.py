"""Segmentation metrics, streaming inference, firing-rate statistics and op/energy accounting."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .autograd import Tensor, no_grad
from .autograd.functional import conv_output_size
from .autograd.nn import StateError
from .events import IGNORE_LABEL, StackSequence, batches
from .network import ConfigError, SpikingEDN, StepContext
from .neuron import NeuronState

# -- confusion matrix / MIoU ----------------------------------------------------


class ConfusionAccumulator:
    """``matrix[truth, pred]`` pixel counts; ignored pixels are never counted."""

    def __init__(self, num_classes: int, ignore_index: int = IGNORE_LABEL):
        if num_classes < 1:
            raise ValueError("num_classes must be positive")
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.matrix = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, truth: np.ndarray, pred: np.ndarray) -> "ConfusionAccumulator":
        truth = np.asarray(truth)
        pred = np.asarray(pred)
        if truth.shape != pred.shape:
            raise ValueError(f"truth {truth.shape} and prediction {pred.shape} differ in shape")
        keep = truth != self.ignore_index
        t = truth[keep].astype(np.int64)
        p = pred[keep].astype(np.int64)
        C = self.num_classes
        if t.size and (t.max() >= C or p.min() < 0 or p.max() >= C or t.min() < 0):
            raise ValueError(f"labels outside [0, {C})")
        self.matrix += np.bincount(t * C + p, minlength=C * C).reshape(C, C)
        return self

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge accumulators with different class counts")
        out = ConfusionAccumulator(self.num_classes, self.ignore_index)
        out.matrix = self.matrix + other.matrix
        return out

    @property
    def total(self) -> int:
        return int(self.matrix.sum())

    def reset(self) -> None:
        self.matrix[:] = 0


def miou(acc: ConfusionAccumulator) -> tuple[float, list[float]]:
    """Mean IoU and per-class IoU with ``TP / max(1, TP + FP + FN)``."""
    if acc.total == 0:
        raise ValueError("no evaluated pixels in the accumulator")
    m = acc.matrix
    tp = np.diag(m).astype(np.float64)
    fp = m.sum(axis=0) - tp
    fn = m.sum(axis=1) - tp
    iou = tp / np.maximum(1.0, tp + fp + fn)
    return float(iou.mean()), [float(v) for v in iou]


def predictions(scores: Tensor | np.ndarray) -> np.ndarray:
    s = scores.data if isinstance(scores, Tensor) else scores
    return s.argmax(axis=1).astype(np.uint8)


def evaluate(model: SpikingEDN, sequences: Sequence[StackSequence], batch_size: int = 8) -> ConfusionAccumulator:
    """Confusion matrix over every supervised step of every sequence (fresh state per sequence)."""
    acc = ConfusionAccumulator(model.cfg.num_classes)
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            for b in batches(sequences, batch_size):
                run = model.unroll(b.frames, b.aug, b.warmup)
                for k, sc in enumerate(run.scores):
                    acc.update(b.labels[:, k], predictions(sc))
    finally:
        model.train(was_training)
    return acc


# -- operation counting ----------------------------------------------------------


def conv_macs(k: int, h_out: int, w_out: int, cin: int, cout: int) -> int:
    """Dense multiply-accumulates of one convolution: ``k^2 * H_out * W_out * C_in * C_out``."""
    return k * k * h_out * w_out * cin * cout


@dataclass
class LayerOps:
    name: str
    macs: int  # dense MACs per sample and step
    binary_input: bool
    sample_steps: int = 0
    active: float = 0.0  # sum over samples and steps of the input firing rate
    extra_mults: int = 0  # element-wise multiplications outside convolutions (totals over the batch)

    @property
    def rate(self) -> float:
        return self.active / self.sample_steps if self.sample_steps else 0.0


@dataclass
class LedgerRow:
    name: str
    macs: int
    rate: float
    steps: float
    adds: float
    mults: float

    @property
    def dense_macs(self) -> float:
        return self.steps * self.macs


@dataclass
class OpLedger:
    rows: list[LedgerRow]
    samples: int
    steps: float

    @property
    def adds(self) -> float:
        return float(sum(r.adds for r in self.rows))

    @property
    def mults(self) -> float:
        return float(sum(r.mults for r in self.rows))

    @property
    def dense_macs(self) -> float:
        """Dense MACs of the same graph evaluated as an ANN over the same steps."""
        return float(sum(r.dense_macs for r in self.rows))

    @property
    def spiking_rows(self) -> list[LedgerRow]:
        return [r for r in self.rows if r.macs and r.mults == 0]

    @property
    def mean_rate(self) -> float:
        """MAC-weighted mean input firing rate over layers fed by spikes."""
        rows = self.spiking_rows
        den = sum(r.macs for r in rows)
        return sum(r.rate * r.macs for r in rows) / den if den else 0.0

    def multiplying_layers(self) -> list[str]:
        return [r.name for r in self.rows if r.mults > 0]

    def to_text(self, energy: "EnergyModel | None" = None) -> str:
        energy = energy or EnergyModel()
        out = io.StringIO()
        out.write(f"{'layer':48s} {'A':>12s} {'rate':>8s} {'adds':>14s} {'mults':>14s}\n")
        for r in self.rows:
            out.write(f"{r.name:48s} {r.macs:12d} {r.rate:8.4f} {r.adds:14.1f} {r.mults:14.1f}\n")
        out.write(f"{'total':48s} {'':12s} {self.mean_rate:8.4f} {self.adds:14.1f} {self.mults:14.1f}\n")
        out.write(f"steps per sample: {self.steps:g}\n")
        out.write(f"dense MACs: {self.dense_macs:.1f}\n")
        out.write(f"energy_pJ: {energy.total_pj(self):.3f}\n")
        out.write(f"dense_energy_pJ: {energy.dense_pj(self):.3f}\n")
        return out.getvalue()


class OpCounter:
    """Collects per-layer op statistics through the step-context hooks.

    Convolutions fed by binary spikes cost one addition per non-zero input
    tap, estimated as ``rate * A``; convolutions fed by real values cost
    ``A`` multiplications.
    """

    def __init__(self, allow_unfolded: bool = False):
        self.layers: dict[str, LayerOps] = {}
        self.allow_unfolded = allow_unfolded

    def _layer(self, name: str, macs: int, binary: bool) -> LayerOps:
        lo = self.layers.get(name)
        if lo is None:
            lo = self.layers[name] = LayerOps(name, macs, binary)
        elif lo.macs != macs:
            raise ValueError(f"layer {name}: MAC count changed from {lo.macs} to {macs}")
        return lo

    def record_conv(self, conv, x: Tensor, bn_folded: bool | None = None, out_hw=None) -> None:
        if bn_folded is False and not self.allow_unfolded:
            raise StateError(f"layer {conv.path}: batch norm is not folded; op counts would be wrong")
        xd = x.data
        B, _, H, W = xd.shape
        if out_hw is None:
            out_hw = (conv_output_size(H, conv.k, conv.stride, conv.dilation, conv.padding),
                      conv_output_size(W, conv.k, conv.stride, conv.dilation, conv.padding))
        macs = conv_macs(conv.k, out_hw[0], out_hw[1], conv.cin, conv.cout)
        binary = bool(np.all((xd == 0) | (xd == 1)))
        lo = self._layer(conv.path, macs, binary)
        lo.binary_input = lo.binary_input and binary
        lo.sample_steps += B
        lo.active += float(np.count_nonzero(xd)) / xd[0].size

    def record_mult(self, path: str, count: int) -> None:
        lo = self._layer(path, 0, False)
        lo.extra_mults += int(count)

    def ledger(self, samples: int) -> OpLedger:
        if samples < 1:
            raise ValueError("ledger needs at least one sample")
        rows = []
        steps = 0.0
        for lo in self.layers.values():
            t = lo.sample_steps / samples
            steps = max(steps, t)
            if lo.macs and lo.binary_input:
                adds, mults = lo.rate * t * lo.macs, 0.0
            else:
                adds, mults = 0.0, t * lo.macs
            mults += lo.extra_mults / samples
            rows.append(LedgerRow(lo.name, lo.macs, lo.rate, t, adds, mults))
        return OpLedger(rows, samples, steps)


@dataclass(frozen=True)
class EnergyModel:
    add_pj: float = 0.9
    mult_pj: float = 4.6

    def total_pj(self, ledger: OpLedger) -> float:
        return self.add_pj * ledger.adds + self.mult_pj * ledger.mults

    def dense_pj(self, ledger: OpLedger) -> float:
        return self.mult_pj * ledger.dense_macs


def count_ops(model: SpikingEDN, sequences: Sequence[StackSequence], batch_size: int = 8) -> OpLedger:
    """Per-inference op ledger over the supervised steps of ``sequences``; model must be folded."""
    if not model.folded:
        raise StateError("count_ops needs a folded model (call eval() and fold() first)")
    if not sequences:
        raise ValueError("count_ops needs at least one sequence")
    counter = OpCounter()
    with no_grad():
        for b in batches(sequences, batch_size):
            model.unroll(b.frames, b.aug, b.warmup, counter=counter)
    return counter.ledger(len(sequences))


# -- streaming ---------------------------------------------------------------------


@dataclass
class StreamSession:
    """Continuous inference over one unbounded stream, carrying neuron state between steps."""

    model: SpikingEDN
    reset_every: int | None = None
    states: dict[str, NeuronState] = field(default_factory=dict)
    step_count: int = 0
    acc: ConfusionAccumulator | None = None
    resolution: tuple[int, int] | None = None

    def __post_init__(self):
        if self.reset_every is not None and self.reset_every < 1:
            raise ValueError("reset_every must be a positive number of steps")
        if self.acc is None:
            self.acc = ConfusionAccumulator(self.model.cfg.num_classes)

    def reset(self) -> None:
        self.states = {}

    def export_state(self) -> dict:
        return {
            "states": {k: (v.u.data.copy(), v.a.data.copy(), v.y_prev.data.copy()) for k, v in self.states.items()},
            "step_count": self.step_count,
            "resolution": self.resolution,
        }

    def import_state(self, snap: dict) -> None:
        self.states = {k: NeuronState(Tensor(u, dtype=u.dtype), Tensor(a, dtype=a.dtype), Tensor(y, dtype=y.dtype))
                       for k, (u, a, y) in snap["states"].items()}
        self.step_count = snap["step_count"]
        self.resolution = snap["resolution"]

    def step(self, frames: np.ndarray, aug: np.ndarray | None = None, label: np.ndarray | None = None) -> np.ndarray:
        x = np.asarray(frames, dtype=np.float32)
        if x.ndim == 3:
            x = x[None]
        if aug is not None:
            aug = np.asarray(aug, dtype=np.float32)
            aug = aug.reshape((1,) * (4 - aug.ndim) + aug.shape)
        hw = x.shape[-2:]
        if self.resolution is None:
            self.resolution = hw
        elif hw != self.resolution:
            raise ConfigError(f"stream resolution changed from {self.resolution} to {hw} at step {self.step_count}")
        if self.reset_every and self.step_count % self.reset_every == 0:
            self.reset()
        with no_grad():
            scores, self.states = self.model.forward_step(x, aug, ctx=StepContext(self.states))
        pred = predictions(scores)[0]
        if label is not None:
            self.acc.update(label, pred)
        self.step_count += 1
        return pred


def stream_infer(session: StreamSession, next_stack: np.ndarray, aug=None, label=None) -> tuple[np.ndarray, float | None]:
    """Advance ``session`` by one stack; returns the prediction and the running MIoU (if labels seen)."""
    pred = session.step(next_stack, aug, label)
    m = miou(session.acc)[0] if session.acc.total else None
    return pred, m


def stream_sequences(sequences: Sequence[StackSequence]) -> Iterable[tuple[np.ndarray, np.ndarray | None, np.ndarray | None]]:
    """Flatten sequences into a continuous ``(frames, aug, label)`` stream; warm-up stacks carry no label."""
    for seq in sequences:
        for i, st in enumerate(seq.stacks):
            lab = seq.labels[i - seq.warmup] if i >= seq.warmup else None
            aug = seq.aug[i] if seq.aug is not None else None
            yield st.frames.astype(np.float32), aug, lab


# -- firing-rate statistics ------------------------------------------------------------

DEFAULT_RATE_EDGES = tuple([0.0] + [10.0 ** (e / 2) for e in range(-8, 1)])


@dataclass
class RateHistogram:
    layer: str
    mean: float
    edges: tuple[float, ...]
    counts: list[int]
    neurons: int


def log_histogram(rates: np.ndarray, edges: Sequence[float] = DEFAULT_RATE_EDGES) -> list[int]:
    """Counts per bucket: bucket 0 holds exactly-silent neurons, bucket i holds ``(edges[i-1], edges[i]]``."""
    r = np.asarray(rates, dtype=np.float64).ravel()
    counts = [int(np.count_nonzero(r <= edges[0]))]
    for lo, hi in zip(edges[:-1], edges[1:]):
        counts.append(int(np.count_nonzero((r > lo) & (r <= hi))))
    return counts


def firing_rate_report(model: SpikingEDN, sequences: Sequence[StackSequence], batch_size: int = 8,
                       edges: Sequence[float] = DEFAULT_RATE_EDGES) -> list[RateHistogram]:
    """Per-layer mean firing rate and histogram of per-neuron rates over all executed steps."""
    sums: dict[str, np.ndarray] = {}
    count = 0
    with no_grad():
        for b in batches(sequences, batch_size):
            run = model.unroll(b.frames, b.aug, b.warmup, record_spikes=True)
            for step in run.spikes:
                for path, y in step.items():
                    s = y.sum(axis=0)
                    sums[path] = s if path not in sums else sums[path] + s
            count += len(b) * len(run.spikes)
    out = []
    for path, s in sums.items():
        rates = s / max(count, 1)
        out.append(RateHistogram(path, float(rates.mean()), tuple(edges), log_histogram(rates, edges), rates.size))
    return out


def histograms_csv(report: Sequence[RateHistogram]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["layer", "mean_rate", "neurons", "bucket_lo", "bucket_hi", "count"])
    for h in report:
        w.writerow([h.layer, f"{h.mean:.6g}", h.neurons, 0, 0, h.counts[0]])
        for (lo, hi), c in zip(zip(h.edges[:-1], h.edges[1:]), h.counts[1:]):
            w.writerow([h.layer, f"{h.mean:.6g}", h.neurons, f"{lo:.6g}", f"{hi:.6g}", c])
    return buf.getvalue()


def miou_table(acc: ConfusionAccumulator, class_names: Sequence[str] | None = None) -> str:
    m, per = miou(acc)
    names = class_names or [f"class{c}" for c in range(acc.num_classes)]
    lines = [f"{n:16s} {v:.4f}" for n, v in zip(names, per)]
    lines.append(f"{'miou':16s} {m:.4f}")
    lines.append(f"{'pixels':16s} {acc.total}")
    return "\n".join(lines) + "\n"
