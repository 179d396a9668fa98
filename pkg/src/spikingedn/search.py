"""Differentiable search over cell operations and the layer resolution path.

Cell level: every edge mixes its candidate ops with ``softmax(alpha)``; one set
of ``alpha`` is shared by all cells. Layer level: the input of the cell at
(layer ``l``, level ``j``) mixes the resampled outputs of layer ``l - 1`` at
levels ``j - 1``, ``j`` and ``j + 1`` with a softmax over the valid
transitions (one weight vector per ``(l, j)``). After search, edges are
decoded by argmax and the path by max-product dynamic programming.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .autograd import Adam, Conv2d, Module, Parameter, Tensor
from .autograd import functional as F
from .autograd.nn import ConvBN
from .events import Batch, batches
from .genotype import NODES, OPS, Genotype
from .network import Decoder, ModelConfig, Stem, StepContext, TapAdapter, _NeuronFactory
from .neuron import SpikingNeuron

# transition index: 0 = from the finer level above (halve), 1 = keep, 2 = from the coarser level (double)
TRANSITIONS = ("halve", "keep", "double")


class GenotypeTieWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SearchSpace:
    ops: tuple[str, ...] = OPS
    nodes: int = NODES
    layers: int = 6
    plan: tuple[int, ...] = (4, 2, 2, 2)

    @property
    def levels(self) -> int:
        return len(self.plan)

    def valid_levels(self, layer: int) -> list[int]:
        """Levels reachable at ``layer`` by a path that starts at level 0."""
        return list(range(min(layer + 1, self.levels)))

    def sources(self, layer: int, level: int) -> list[tuple[int, int]]:
        """``(transition index, source level)`` pairs feeding (layer, level)."""
        if layer == 0:
            return [(1, 0)] if level == 0 else []
        prev = self.valid_levels(layer - 1)
        out = []
        for t, src in enumerate((level - 1, level, level + 1)):
            if src in prev:
                out.append((t, src))
        return out


def _op_module(name: str, width: int, rng) -> Module | None:
    if name == "skip":
        return None
    k = {"conv3x3": 3, "conv5x5": 5}.get(name)
    if k is None:
        raise ValueError(f"unknown op {name!r}")
    return ConvBN(width, width, k, rng=rng)


def mixed_edge_forward(y: Tensor, alphas: Tensor, ops: Sequence[Callable | None], weights: Tensor | None = None) -> Tensor:
    """``sum_o softmax(alphas)_o * o(y)``; ``None`` in ``ops`` is the identity."""
    if alphas.shape[-1] != len(ops):
        raise ValueError(f"{alphas.shape[-1]} alphas for {len(ops)} ops")
    w = F.softmax(alphas, axis=-1) if weights is None else weights
    out = None
    for o, op in enumerate(ops):
        term = (y if op is None else op(y)) * w[o]
        out = term if out is None else out + term
    return out


class MixedEdge(Module):
    def __init__(self, ops: Sequence[str], width: int, rng):
        super().__init__()
        self.names = tuple(ops)
        self.ops = [_op_module(n, width, rng) for n in ops]
        # keep only real modules in the child list for parameter discovery
        self.modules = [m for m in self.ops if m is not None]

    def forward(self, x: Tensor, weights: Tensor, ctx: StepContext) -> Tensor:
        fns = [None if m is None else (lambda z, m=m: m(z, ctx)) for m in self.ops]
        return mixed_edge_forward(x, weights, fns, weights=weights)


class SearchCell(Module):
    """Cell whose edges are mixtures; nodes sum their edges into a spiking neuron."""

    def __init__(self, ops: Sequence[str], nodes: int, width: int, nf: _NeuronFactory, rng):
        super().__init__()
        self.edges = [[MixedEdge(ops, width, rng) for _ in range(2 + j)] for j in range(nodes)]
        self.edge_list = [e for row in self.edges for e in row]
        self.neurons = [SpikingNeuron(nf()) for _ in range(nodes)]
        self.out_channels = width * nodes

    def forward(self, s0: Tensor, s1: Tensor, weights: list[Tensor], ctx: StepContext) -> Tensor:
        states = [s0, s1]
        for j, row in enumerate(self.edges):
            current = None
            for i, edge in enumerate(row):
                term = edge(states[i], weights[j][i], ctx)
                current = term if current is None else current + term
            states.append(self.neurons[j](current, ctx))
        return F.concat(states[2:], axis=1)


class ArchParams(Module):
    """Cell alphas (one ``(2 + j, n_ops)`` matrix per node) and per-(layer, level) transition logits."""

    def __init__(self, space: SearchSpace, rng, scale: float = 1e-3):
        super().__init__()
        n = len(space.ops)
        self.space = space
        self.alphas = [Parameter(scale * rng.standard_normal((2 + j, n))) for j in range(space.nodes)]
        self.betas = [Parameter(scale * rng.standard_normal((space.levels, 3))) for _ in range(space.layers)]
        self.masks = []
        for li in range(space.layers):
            m = np.full((space.levels, 3), -1e9)
            for lv in space.valid_levels(li):
                for t, _ in space.sources(li, lv):
                    m[lv, t] = 0.0
            self.masks.append(m)

    def edge_weights(self) -> list[Tensor]:
        return [F.softmax(a, axis=-1) for a in self.alphas]

    def transition_weights(self, layer: int) -> Tensor:
        return F.softmax(self.betas[layer] + self.masks[layer], axis=-1)

    def alpha_arrays(self) -> list[np.ndarray]:
        return [a.data.copy() for a in self.alphas]

    def transition_arrays(self) -> np.ndarray:
        """``(layers, levels, 3)`` softmax weights; invalid transitions are exactly zero."""
        out = np.zeros((self.space.layers, self.space.levels, 3))
        for li in range(self.space.layers):
            w = self.transition_weights(li).data
            out[li] = np.where(self.masks[li] < 0, 0.0, w)
        return out


class Supernet(Module):
    """Over-parameterised network covering every cell op and every trellis path.

    Stems and decoder follow the discrete network. Each cell's first tap is
    the second stem resampled to the cell's level; its second tap is the
    transition mixture of the previous layer. The last layer's levels are
    brought to level 0 and summed before the decoder.
    """

    def __init__(self, space: SearchSpace, cfg: ModelConfig):
        super().__init__()
        self.space = space
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        nf = _NeuronFactory(cfg)
        C, w = cfg.stem_channels, cfg.node_width
        f0 = space.plan[0]
        self.stem1 = Stem(cfg.in_channels, C, 1, nf(first=True), rng)
        self.stem2 = Stem(C, C, f0, nf(), rng)
        self.arch = ArchParams(space, rng)
        factor = [int(np.prod(space.plan[:lv + 1])) for lv in range(space.levels)]
        self.factor = factor
        self.stem_taps = [TapAdapter(C, w, f0, factor[lv], nf(), rng) for lv in range(space.levels)]
        cout = w * space.nodes
        self.cells: dict[tuple[int, int], SearchCell] = {}
        self.adapters: dict[tuple[int, int, int], TapAdapter] = {}
        for li in range(space.layers):
            for lv in space.valid_levels(li):
                self.cells[(li, lv)] = SearchCell(space.ops, space.nodes, w, nf, rng)
                for _, src in space.sources(li, lv):
                    cin = C if li == 0 else cout
                    src_f = f0 if li == 0 else factor[src]
                    self.adapters[(li, src, lv)] = TapAdapter(cin, w, src_f, factor[lv], nf(), rng)
        last = space.layers - 1
        self.heads = {lv: TapAdapter(cout, cfg.aspp_channels, factor[lv], f0, nf(), rng)
                      for lv in space.valid_levels(last)}
        self.cell_list = list(self.cells.values())
        self.adapter_list = list(self.adapters.values())
        self.head_list = list(self.heads.values())
        self.decoder = Decoder(cfg.aspp_channels, C, cfg.decoder_channels, cfg.num_classes, 1, f0, nf, rng)
        for path, m in self.named_modules():
            if hasattr(m, "path"):
                m.path = path

    def arch_parameters(self) -> list[Parameter]:
        return self.arch.parameters()

    def weight_parameters(self) -> list[Parameter]:
        arch = {id(p) for p in self.arch_parameters()}
        return [p for p in self.parameters() if id(p) not in arch]

    def forward_step(self, x, ctx: StepContext) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        s1 = self.stem1(x, ctx)
        s2 = self.stem2(s1, ctx)
        edge_w = self.arch.edge_weights()
        taps0 = [a(s2, ctx) for a in self.stem_taps]
        prev = {0: s2}
        for li in range(self.space.layers):
            tw = self.arch.transition_weights(li)
            cur = {}
            for lv in self.space.valid_levels(li):
                mix = None
                for t, src in self.space.sources(li, lv):
                    term = self.adapters[(li, src, lv)](prev[src], ctx) * tw[lv, t]
                    mix = term if mix is None else mix + term
                cur[lv] = self.cells[(li, lv)](taps0[lv], mix, edge_w, ctx)
            prev = cur
        top = None
        for lv, head in self.heads.items():
            h = head(prev[lv], ctx)
            top = h if top is None else top + h
        return self.decoder(top, s2, ctx)

    def batch_loss(self, batch: Batch) -> Tensor:
        if len(batch) == 0:
            raise ValueError("empty batch")
        states: dict = {}
        total = None
        steps = 0
        for t in range(batch.frames.shape[1]):
            ctx = StepContext(states)
            scores = self.forward_step(batch.frames[:, t], ctx)
            states = ctx.new_states
            if t >= batch.warmup:
                term = F.cross_entropy(scores, batch.labels[:, t - batch.warmup])
                total = term if total is None else total + term
                steps += 1
        return total * (1.0 / steps)


class EdgeProbe(Module):
    """A single searchable cell on a one-step task; isolates the edge-level search.

    Tap 0 carries the (binary) input tiled to the cell width, tap 1 is silent.
    A 1x1 readout on the cell output produces the class scores.
    """

    def __init__(self, space: SearchSpace, width: int = 4, num_classes: int = 2, seed: int = 0):
        super().__init__()
        if space.layers != 1:
            raise ValueError("EdgeProbe searches a single layer")
        rng = np.random.default_rng(seed)
        self.space = space
        self.width = width
        cfg = ModelConfig(num_classes=num_classes, placement="none")
        nf = _NeuronFactory(cfg)
        self.arch = ArchParams(space, rng)
        self.cell = SearchCell(space.ops, space.nodes, width, nf, rng)
        self.readout = Conv2d(width * space.nodes, num_classes, 1, bias=True, rng=rng)
        for path, m in self.named_modules():
            if hasattr(m, "path"):
                m.path = path

    def arch_parameters(self) -> list[Parameter]:
        return self.arch.parameters()

    def weight_parameters(self) -> list[Parameter]:
        arch = {id(p) for p in self.arch_parameters()}
        return [p for p in self.parameters() if id(p) not in arch]

    def batch_loss(self, batch) -> Tensor:
        x, labels = batch
        if len(x) == 0:
            raise ValueError("empty batch")
        ctx = StepContext()
        xt = Tensor(np.repeat(x, self.width, axis=1))
        zero = Tensor(np.zeros_like(xt.data))
        y = self.cell(xt, zero, self.arch.edge_weights(), ctx)
        return F.cross_entropy(self.readout(y, ctx), labels)


def shift_task(n: int, size: int = 12, shift: int = 1, seed: int = 0, density: float = 0.5) -> list[tuple[np.ndarray, np.ndarray]]:
    """Binary maps whose label is the map shifted by ``shift`` columns.

    A pointwise (skip) edge sees only an independent pixel and is at chance;
    a 3x3 convolution can reproduce the shift exactly.
    """
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        x = (rng.random((1, size, size)) < density).astype(np.float64)
        lab = np.zeros((size, size), dtype=np.int64)
        lab[:, :size - shift] = x[0, :, shift:]
        lab[:, size - shift:] = 255
        out.append((x, lab))
    return out


def probe_batches(items, batch_size: int, rng=None):
    order = np.arange(len(items)) if rng is None else rng.permutation(len(items))
    for lo in range(0, len(order), batch_size):
        sel = [items[i] for i in order[lo:lo + batch_size]]
        yield np.stack([s[0] for s in sel]), np.stack([s[1] for s in sel])


# -- optimisation ----------------------------------------------------------------------


def bilevel_step(model, train_batch, val_batch, w_opt: Adam, a_opt: Adam | None) -> tuple[float, float | None]:
    """One first-order alternation: weights on ``train_batch``, then alphas on ``val_batch``.

    With ``a_opt=None`` the architecture is frozen and this is a plain training step.
    """
    if train_batch is None or len(train_batch) == 0:
        raise ValueError("empty training split batch")
    w_opt.zero_grad()
    if a_opt is not None:
        a_opt.zero_grad()
    loss = model.batch_loss(train_batch)
    loss.backward()
    w_opt.step()
    model.project()
    for p in model.arch_parameters():
        p.grad = None
    if a_opt is None:
        return float(loss.data), None
    if val_batch is None or len(val_batch) == 0:
        raise ValueError("empty validation split batch")
    w_opt.zero_grad()
    a_opt.zero_grad()
    vloss = model.batch_loss(val_batch)
    vloss.backward()
    a_opt.step()
    for p in model.weight_parameters():
        p.grad = None
    return float(loss.data), float(vloss.data)


@dataclass
class SearchConfig:
    epochs: int = 20
    warmup_epochs: int = 5
    batch_size: int = 4
    w_lr: float = 1e-3
    a_lr: float = 3e-3
    a_betas: tuple[float, float] = (0.5, 0.999)
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError("need epochs >= 1 and 0 <= warmup_epochs <= epochs")
        self.a_betas = tuple(self.a_betas)


@dataclass
class SearchResult:
    genotype: Genotype
    history: list[dict] = field(default_factory=list)
    alphas: list[np.ndarray] = field(default_factory=list)
    transitions: np.ndarray | None = None


def split_half(items: Sequence) -> tuple[list, list]:
    """Disjoint halves for the weight and architecture updates."""
    items = list(items)
    if len(items) < 2:
        raise ValueError("need at least two items to form both search splits")
    mid = len(items) // 2
    return items[:mid], items[mid:]


def run_search(
    model,
    train_items: Sequence,
    val_items: Sequence,
    cfg: SearchConfig,
    batch_fn: Callable[..., Iterable] = batches,
    log: Callable[[dict], None] | None = None,
) -> SearchResult:
    """Warm up the weights, then alternate weight and alpha updates each batch."""
    if not train_items or not val_items:
        raise ValueError("both search splits must be non-empty")
    rng = np.random.default_rng(cfg.seed)
    w_opt = Adam(model.weight_parameters(), cfg.w_lr)
    a_opt = Adam(model.arch_parameters(), cfg.a_lr, cfg.a_betas)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        arch = epoch > cfg.warmup_epochs
        val_iter = itertools.cycle(list(batch_fn(val_items, cfg.batch_size, rng)))
        tl, vl = [], []
        for tb in batch_fn(train_items, cfg.batch_size, rng):
            a, b = bilevel_step(model, tb, next(val_iter) if arch else None, w_opt, a_opt if arch else None)
            tl.append(a)
            if b is not None:
                vl.append(b)
        rec = {"epoch": epoch, "arch": arch, "train_loss": float(np.mean(tl)),
               "val_loss": float(np.mean(vl)) if vl else None,
               "edge_weights": [w.data.tolist() for w in model.arch.edge_weights()]}
        history.append(rec)
        if log is not None:
            log(rec)
    geno = extract_genotype(model.arch.alpha_arrays(), model.arch.transition_arrays(), model.space,
                            meta={"seed": str(cfg.seed), "epoch": str(cfg.epochs)})
    return SearchResult(geno, history, model.arch.alpha_arrays(), model.arch.transition_arrays())


# -- decoding ----------------------------------------------------------------------------


def argmax_ops(alphas: Sequence[np.ndarray], ops: Sequence[str]) -> tuple[list[list[str]], list[tuple[int, int]]]:
    """Per-edge argmax with ties going to the lowest op index; returns the ops and the tied edges."""
    cell, ties = [], []
    for j, a in enumerate(alphas):
        a = np.asarray(a)
        if a.shape != (2 + j, len(ops)):
            raise ValueError(f"node {j}: alpha shape {a.shape}, expected {(2 + j, len(ops))}")
        row = []
        for i in range(a.shape[0]):
            best = int(np.argmax(a[i]))  # numpy returns the first maximum
            if np.count_nonzero(a[i] == a[i, best]) > 1:
                ties.append((j, i))
            row.append(ops[best])
        cell.append(row)
    return cell, ties


def decode_path(transitions: np.ndarray, space: SearchSpace) -> tuple[list[int], float]:
    """Max-product path through the trellis; returns the levels and the path's log-weight.

    Ties prefer the lower previous level and, at the end, the lower final level.
    """
    L = space.layers
    neg = -math.inf
    score = np.full((L, space.levels), neg)
    back = np.zeros((L, space.levels), dtype=np.int64)
    score[0, 0] = 0.0
    for li in range(1, L):
        for lv in space.valid_levels(li):
            for t, src in space.sources(li, lv):
                w = transitions[li, lv, t]
                cand = score[li - 1, src] + (math.log(w) if w > 0 else neg)
                if cand > score[li, lv] or (cand == score[li, lv] and src < back[li, lv]):
                    score[li, lv] = cand
                    back[li, lv] = src
    last = int(np.argmax(score[L - 1]))
    path = [last]
    for li in range(L - 1, 0, -1):
        path.append(int(back[li, path[-1]]))
    return path[::-1], float(score[L - 1, last])


def path_log_weight(levels: Sequence[int], transitions: np.ndarray, space: SearchSpace) -> float:
    total = 0.0
    for li in range(1, len(levels)):
        d = levels[li] - levels[li - 1]
        t = {1: 0, 0: 1, -1: 2}[d]
        w = transitions[li, levels[li], t]
        total += math.log(w) if w > 0 else -math.inf
    return total


def enumerate_paths(space: SearchSpace) -> list[list[int]]:
    """Every valid path: starts at level 0, moves by at most one level per layer, stays in bounds."""
    out = []
    for moves in itertools.product((-1, 0, 1), repeat=space.layers - 1):
        lv = [0]
        ok = True
        for m in moves:
            nxt = lv[-1] + m
            if not 0 <= nxt < space.levels:
                ok = False
                break
            lv.append(nxt)
        if ok:
            out.append(lv)
    return out


def extract_genotype(alphas: Sequence[np.ndarray], transitions: np.ndarray, space: SearchSpace,
                     meta: dict[str, str] | None = None) -> Genotype:
    """Discrete genotype: argmax op per edge (shared by every layer) and the max-product path."""
    cell, ties = argmax_ops(alphas, space.ops)
    if ties:
        warnings.warn(f"alpha ties on edges {ties}; chose the lowest op index", GenotypeTieWarning, stacklevel=2)
    levels, _ = decode_path(transitions, space) if space.layers > 1 else ([0], 0.0)
    g = Genotype([[list(n) for n in cell] for _ in levels], levels, tuple(space.plan), dict(meta or {}))
    if ties:
        g.meta["ties"] = ";".join(f"{j}/{i}" for j, i in ties)
    g.validate()
    return g
