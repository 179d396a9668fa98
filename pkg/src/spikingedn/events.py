"""Event streams, time-based stacking (SBT), sequence assembly and a moving-shapes simulator."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

IGNORE_LABEL = 255


class EventError(ValueError):
    """Invalid event; ``index`` is the offending record."""

    def __init__(self, message: str, index: int):
        super().__init__(message)
        self.index = index


@dataclass
class EventStream:
    """Polarity events sorted by timestamp (microseconds)."""

    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    p: np.ndarray
    width: int
    height: int
    duration_us: int | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.uint16)
        self.y = np.asarray(self.y, dtype=np.uint16)
        self.t = np.asarray(self.t, dtype=np.int64)
        self.p = np.asarray(self.p, dtype=np.int8)
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise ValueError("event field arrays differ in length")

    def __len__(self) -> int:
        return len(self.t)

    @classmethod
    def empty(cls, width: int, height: int, duration_us: int | None = None) -> "EventStream":
        z = np.zeros(0)
        return cls(z, z, z, z, width, height, duration_us)

    @property
    def span_us(self) -> int:
        if self.duration_us is not None:
            return int(self.duration_us)
        return int(self.t[-1]) + 1 if len(self.t) else 0

    def validate(self) -> None:
        if len(self.t) and np.any(np.diff(self.t) < 0):
            bad = int(np.argmax(np.diff(self.t) < 0)) + 1
            raise EventError(f"event stream is not sorted by time (first offender at index {bad})", bad)
        out = (self.x >= self.width) | (self.y >= self.height)
        if np.any(out):
            bad = int(np.argmax(out))
            raise EventError(
                f"event {bad} at ({self.x[bad]}, {self.y[bad]}) lies outside the "
                f"{self.width}x{self.height} sensor", bad)
        if len(self.p) and not np.all(np.abs(self.p) == 1):
            bad = int(np.argmax(np.abs(self.p) != 1))
            raise EventError(f"event {bad} has polarity {self.p[bad]}, expected +1 or -1", bad)


@dataclass
class SbtStack:
    frames: np.ndarray  # (n, H, W) signed integer sums
    window: tuple[int, int]

    @property
    def n(self) -> int:
        return self.frames.shape[0]


def stack_events(
    stream: EventStream,
    delta_t_us: int = 50_000,
    n: int = 5,
    t_start: int = 0,
    num_stacks: int | None = None,
) -> list[SbtStack]:
    """Accumulate event polarities into ``n`` frames per ``delta_t_us`` window.

    Windows are half-open: an event exactly on a boundary goes to the later
    frame. Frame ``i`` of a stack sums events with ``t`` in
    ``[start + i*T, start + (i+1)*T)`` where ``T = delta_t_us / n``.
    """
    if n < 1 or delta_t_us < 1 or delta_t_us % n:
        raise ValueError(f"delta_t_us ({delta_t_us}) must be a positive multiple of n ({n})")
    stream.validate()
    sub = delta_t_us // n
    if num_stacks is None:
        span = stream.span_us - t_start
        num_stacks = max(0, math.ceil(span / delta_t_us))
    H, W = stream.height, stream.width
    frames = np.zeros((num_stacks, n, H, W), dtype=np.int32)
    if len(stream) and num_stacks:
        rel = stream.t - t_start
        keep = (rel >= 0) & (rel < num_stacks * delta_t_us)
        rel = rel[keep]
        s = rel // delta_t_us
        f = (rel % delta_t_us) // sub
        flat = ((s * n + f) * H + stream.y[keep].astype(np.int64)) * W + stream.x[keep].astype(np.int64)
        sums = np.bincount(flat, weights=stream.p[keep].astype(np.float64), minlength=frames.size)
        frames = np.rint(sums).astype(np.int32).reshape(frames.shape)
    return [SbtStack(frames[i], (t_start + i * delta_t_us, t_start + (i + 1) * delta_t_us))
            for i in range(num_stacks)]


@dataclass
class StackSequence:
    """A run of consecutive stacks; ``labels[k]`` belongs to ``stacks[warmup + k]``."""

    stacks: list[SbtStack]
    labels: list[np.ndarray]
    warmup: int = 1
    aug: list[np.ndarray] | None = None

    def __post_init__(self):
        if len(self.labels) != len(self.stacks) - self.warmup:
            raise ValueError(f"{len(self.labels)} labels for {len(self.stacks)} stacks with warmup {self.warmup}")
        shapes = {s.frames.shape[1:] for s in self.stacks} | {lab.shape for lab in self.labels}
        if len(shapes) > 1:
            raise ValueError(f"inconsistent spatial sizes in sequence: {shapes}")

    def __len__(self) -> int:
        return len(self.stacks)

    @property
    def supervised_steps(self) -> int:
        return len(self.stacks) - self.warmup

    def frames(self) -> np.ndarray:
        return np.stack([s.frames for s in self.stacks]).astype(np.float32)

    def label_array(self) -> np.ndarray:
        return np.stack(self.labels).astype(np.uint8)

    def aug_array(self) -> np.ndarray | None:
        if self.aug is None:
            return None
        return np.stack(self.aug).astype(np.float32)[:, None]


@dataclass
class Batch:
    frames: np.ndarray  # (B, L, n, H, W)
    labels: np.ndarray  # (B, L - warmup, H, W)
    aug: np.ndarray | None  # (B, L, A, H, W)
    warmup: int

    def __len__(self) -> int:
        return self.frames.shape[0]


def collate(seqs: Sequence[StackSequence]) -> Batch:
    """Stack equally shaped sequences into one batch."""
    if not seqs:
        raise ValueError("cannot collate an empty list of sequences")
    warm = {s.warmup for s in seqs}
    lens = {len(s) for s in seqs}
    if len(warm) > 1 or len(lens) > 1:
        raise ValueError(f"sequences differ in length {lens} or warmup {warm}")
    augs = [s.aug_array() for s in seqs]
    aug = None if any(a is None for a in augs) else np.stack(augs)
    return Batch(np.stack([s.frames() for s in seqs]), np.stack([s.label_array() for s in seqs]), aug, warm.pop())


def batches(seqs: Sequence[StackSequence], batch_size: int, rng: np.random.Generator | None = None):
    """Yield collated batches; shuffled when ``rng`` is given."""
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    order = np.arange(len(seqs)) if rng is None else rng.permutation(len(seqs))
    for lo in range(0, len(order), batch_size):
        yield collate([seqs[i] for i in order[lo:lo + batch_size]])


def make_sequences(
    stacks: Sequence[SbtStack],
    labels: Sequence[np.ndarray],
    seq_len: int = 4,
    warmup: int = 1,
    images: Sequence[np.ndarray] | None = None,
) -> list[StackSequence]:
    """Cut consecutive, non-overlapping sequences of ``seq_len`` stacks.

    ``labels`` (and ``images``) hold one entry per stack; the first ``warmup``
    labels of every sequence are dropped. Leftover stacks are discarded.
    """
    if seq_len <= warmup or warmup < 0:
        raise ValueError(f"need seq_len > warmup >= 0, got {seq_len}, {warmup}")
    if len(labels) != len(stacks):
        raise ValueError("one label grid per stack is required")
    if images is not None and len(images) != len(stacks):
        raise ValueError("one image per stack is required")
    count = len(stacks) // seq_len
    if count == 0:
        warnings.warn(f"only {len(stacks)} stacks, fewer than seq_len={seq_len}; no sequences produced")
        return []
    out = []
    for k in range(count):
        lo, hi = k * seq_len, (k + 1) * seq_len
        aug = list(images[lo:hi]) if images is not None else None
        out.append(StackSequence(list(stacks[lo:hi]), list(labels[lo + warmup:hi]), warmup, aug))
    return out


def fuse_image_channel(seq: StackSequence, images: Sequence[np.ndarray] | None) -> StackSequence:
    """Attach one intensity image per stack as the augmented channel."""
    if images is None:
        return seq
    if len(images) != len(seq.stacks):
        raise ValueError(f"{len(images)} images for {len(seq.stacks)} stacks")
    hw = seq.stacks[0].frames.shape[1:]
    for i, img in enumerate(images):
        if np.shape(img) != hw:
            raise ValueError(f"image {i} has shape {np.shape(img)}, expected {hw}")
    return replace(seq, aug=[np.asarray(img, dtype=np.float32) for img in images])


def event_frame_images(seq: StackSequence) -> list[np.ndarray]:
    """Single whole-window event frame per stack (sum over its sub-frames)."""
    return [s.frames.sum(axis=0).astype(np.float32) for s in seq.stacks]


# -- moving-shapes simulator ----------------------------------------------------


@dataclass
class ShapeSpec:
    kind: str  # "rect", "disk" or "triangle"
    label: int
    center: tuple[float, float]
    size: float  # half-width for rect/triangle, radius for disk
    velocity: tuple[float, float] = (0.0, 0.0)  # px / s
    intensity: float = 0.8
    texture: float = 0.0
    texture_cell: int = 3


@dataclass
class SceneSpec:
    shapes: list[ShapeSpec]
    width: int = 64
    height: int = 64
    duration_us: int = 400_000
    contrast_threshold: float = 0.15
    background: float = 0.3
    background_texture: float = 0.0
    micro_dt_us: int = 1_000
    delta_t_us: int = 50_000
    noise_rate_hz: float = 0.0


def _position(shape: ShapeSpec, t_s: float, width: int, height: int) -> tuple[float, float]:
    """Centre at time ``t_s``, reflecting off the sensor borders."""
    out = []
    for c, v, extent in ((shape.center[0], shape.velocity[0], width), (shape.center[1], shape.velocity[1], height)):
        lo, hi = shape.size, extent - 1 - shape.size
        if hi <= lo:
            out.append(c)
            continue
        span = hi - lo
        z = (c - lo + v * t_s) % (2 * span)
        out.append(lo + (z if z <= span else 2 * span - z))
    return out[0], out[1]


def _mask(shape: ShapeSpec, cx: float, cy: float, xx: np.ndarray, yy: np.ndarray) -> np.ndarray:
    dx, dy = xx - cx, yy - cy
    if shape.kind == "rect":
        return (np.abs(dx) <= shape.size) & (np.abs(dy) <= shape.size)
    if shape.kind == "disk":
        return dx * dx + dy * dy <= shape.size * shape.size
    if shape.kind == "triangle":
        return (dy <= shape.size) & (dy >= -shape.size) & (np.abs(dx) <= (dy + shape.size) / 2)
    raise ValueError(f"unknown shape kind {shape.kind!r}")


class _Renderer:
    def __init__(self, spec: SceneSpec, rng: np.random.Generator):
        self.spec = spec
        self.yy, self.xx = np.mgrid[0:spec.height, 0:spec.width].astype(np.float64)
        bg = np.full((spec.height, spec.width), spec.background)
        if spec.background_texture:
            bg = bg + spec.background_texture * rng.uniform(-1, 1, size=bg.shape)
        self.background = bg
        self.textures = [rng.uniform(-1, 1, size=(64, 64)) for _ in spec.shapes]

    def render(self, t_us: float) -> tuple[np.ndarray, np.ndarray]:
        spec = self.spec
        img = self.background.copy()
        lab = np.zeros((spec.height, spec.width), dtype=np.uint8)
        t_s = t_us * 1e-6
        for shape, tex in zip(spec.shapes, self.textures):
            cx, cy = _position(shape, t_s, spec.width, spec.height)
            m = _mask(shape, cx, cy, self.xx, self.yy)
            value = np.full(m.sum(), shape.intensity)
            if shape.texture:
                ix = np.floor((self.xx[m] - cx) / shape.texture_cell).astype(int) % tex.shape[1]
                iy = np.floor((self.yy[m] - cy) / shape.texture_cell).astype(int) % tex.shape[0]
                value = value + shape.texture * tex[iy, ix]
            img[m] = value
            lab[m] = shape.label
        return np.clip(img, 0.01, 1.0), lab


def synthesize_scene(spec: SceneSpec, seed: int = 0) -> tuple[EventStream, np.ndarray, np.ndarray]:
    """Simulate an event camera watching moving shapes.

    Events fire wherever the log intensity has moved by at least the
    contrast threshold since the pixel's last event; several thresholds
    crossed in one micro-frame yield several events spread over that
    interval. Labels and images are rendered at the end of every
    ``delta_t_us`` window.

    Returns ``(stream, labels[S, H, W] uint8, images[S, H, W] float32)``.
    """
    if spec.duration_us <= 0:
        raise ValueError("scene duration must be positive")
    if not spec.shapes:
        raise ValueError("scene needs at least one shape")
    if spec.width <= 0 or spec.height <= 0:
        raise ValueError("sensor size must be positive")
    if spec.duration_us % spec.micro_dt_us or spec.delta_t_us % spec.micro_dt_us:
        raise ValueError("duration and stack window must be multiples of the micro-frame step")
    rng = np.random.default_rng(seed)
    r = _Renderer(spec, rng)
    C = spec.contrast_threshold
    img0, _ = r.render(0)
    ref = np.log(img0)
    xs, ys, ts, ps = [], [], [], []
    dt = spec.micro_dt_us
    steps = spec.duration_us // dt
    for k in range(1, steps + 1):
        t_k = k * dt
        img, _ = r.render(t_k)
        d = np.log(img) - ref
        count = np.floor(np.abs(d) / C).astype(np.int64)
        hit = count > 0
        if np.any(hit):
            yy, xx = np.nonzero(hit)
            cnt = count[hit]
            pol = np.sign(d[hit]).astype(np.int8)
            rep = np.repeat(np.arange(len(cnt)), cnt)
            j = np.arange(len(rep)) - np.repeat(np.cumsum(cnt) - cnt, cnt)
            ts.append(t_k - dt + (j * dt) // np.repeat(cnt, cnt))
            xs.append(xx[rep])
            ys.append(yy[rep])
            ps.append(pol[rep])
            ref[hit] += pol.astype(np.float64) * cnt * C
        if spec.noise_rate_hz > 0:
            lam = spec.noise_rate_hz * dt * 1e-6
            noisy = rng.random((spec.height, spec.width)) < lam
            if np.any(noisy):
                yy, xx = np.nonzero(noisy)
                xs.append(xx)
                ys.append(yy)
                ts.append(np.full(len(xx), t_k - dt) + rng.integers(0, dt, len(xx)))
                ps.append(rng.choice(np.array([-1, 1], dtype=np.int8), len(xx)))
    if ts:
        t = np.concatenate(ts)
        order = np.argsort(t, kind="stable")
        stream = EventStream(np.concatenate(xs)[order], np.concatenate(ys)[order], t[order],
                             np.concatenate(ps)[order], spec.width, spec.height, spec.duration_us)
    else:
        stream = EventStream.empty(spec.width, spec.height, spec.duration_us)
    n_stacks = spec.duration_us // spec.delta_t_us
    labels, images = [], []
    for s in range(n_stacks):
        img, lab = r.render((s + 1) * spec.delta_t_us)
        labels.append(lab)
        images.append(img.astype(np.float32))
    return stream, np.array(labels, dtype=np.uint8).reshape(n_stacks, spec.height, spec.width), \
        np.array(images, dtype=np.float32).reshape(n_stacks, spec.height, spec.width)


SHAPE_KINDS = ("disk", "triangle", "rect", "disk", "triangle")
CLASS_INTENSITY = ((0.6, 0.9), (0.04, 0.1))
CLASS_TEXTURE_CELL = (2, 5)


def random_scene(
    rng: np.random.Generator,
    num_classes: int = 3,
    width: int = 64,
    height: int = 64,
    num_stacks: int = 16,
    delta_t_us: int = 50_000,
    max_shapes: int = 2,
    size_range: tuple[float, float] | None = None,
    speed_range: tuple[float, float] = (80.0, 200.0),
) -> SceneSpec:
    """Random moving-shapes scene; class ``c >= 1`` is drawn with shape ``SHAPE_KINDS[c - 1]``.

    Shape sizes default to 7-12 px on a 64 px sensor and scale with it.
    Odd classes are brighter than the background with a fine texture, even
    classes darker with a coarse one, so neighbouring classes also differ in
    event polarity and interior texture, not only in outline.
    """
    if num_classes < 2:
        raise ValueError("need background plus at least one object class")
    if max_shapes < 1:
        raise ValueError("scene needs at least one shape")
    if size_range is None:
        k = min(width, height) / 64
        size_range = (7.0 * k, 12.0 * k)
    shapes = []
    for _ in range(int(rng.integers(1, max_shapes + 1))):
        label = int(rng.integers(1, num_classes))
        size = float(rng.uniform(*size_range))
        angle = rng.uniform(0, 2 * np.pi)
        speed = rng.uniform(*speed_range)
        shapes.append(ShapeSpec(
            kind=SHAPE_KINDS[(label - 1) % len(SHAPE_KINDS)],
            label=label,
            center=(float(rng.uniform(size, width - 1 - size)), float(rng.uniform(size, height - 1 - size))),
            size=size,
            velocity=(float(speed * np.cos(angle)), float(speed * np.sin(angle))),
            intensity=float(rng.uniform(*CLASS_INTENSITY[(label - 1) % 2])),
            texture=0.25,
            texture_cell=CLASS_TEXTURE_CELL[(label - 1) % 2],
        ))
    return SceneSpec(shapes, width, height, num_stacks * delta_t_us, background_texture=0.0,
                     delta_t_us=delta_t_us)


@dataclass
class SyntheticDataset:
    train: list[StackSequence] = field(default_factory=list)
    test: list[StackSequence] = field(default_factory=list)
    num_classes: int = 3
    streams: list[EventStream] = field(default_factory=list)


def synthetic_scenes(
    num_scenes: int,
    seed: int = 0,
    num_classes: int = 3,
    size: int = 64,
    stacks_per_scene: int = 16,
    delta_t_us: int = 50_000,
    **scene_kw,
) -> list[tuple[EventStream, np.ndarray, np.ndarray]]:
    """Independently seeded random scenes as ``(stream, labels, images)`` triples."""
    if num_scenes < 1 or size < 1 or stacks_per_scene < 1:
        raise ValueError("need at least one scene, a positive size and at least one stack per scene")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(num_scenes):
        spec = random_scene(rng, num_classes, size, size, stacks_per_scene, delta_t_us, **scene_kw)
        out.append(synthesize_scene(spec, seed=int(rng.integers(0, 2**31))))
    return out


def dataset_from_scenes(
    scenes: Sequence[tuple[EventStream, np.ndarray, np.ndarray | None]],
    num_classes: int = 3,
    seq_len: int = 4,
    warmup: int = 1,
    n_frames: int = 5,
    delta_t_us: int = 50_000,
    test_fraction: float = 0.2,
) -> SyntheticDataset:
    """Stack every scene and split by scene: the last ``test_fraction`` of scenes are held out."""
    ds = SyntheticDataset(num_classes=num_classes, streams=[s[0] for s in scenes])
    n = len(scenes)
    n_test = max(1, int(round(n * test_fraction))) if n > 1 and test_fraction > 0 else 0
    for i, (stream, labels, images) in enumerate(scenes):
        stacks = stack_events(stream, delta_t_us, n_frames, num_stacks=len(labels))
        imgs = list(images) if images is not None else None
        seqs = make_sequences(stacks, list(labels), seq_len, warmup, imgs)
        (ds.test if i >= n - n_test else ds.train).extend(seqs)
    return ds


def synthetic_dataset(
    num_scenes: int,
    seed: int = 0,
    num_classes: int = 3,
    size: int = 64,
    stacks_per_scene: int = 16,
    seq_len: int = 4,
    warmup: int = 1,
    n_frames: int = 5,
    delta_t_us: int = 50_000,
    test_fraction: float = 0.2,
    **scene_kw,
) -> SyntheticDataset:
    """Build train / held-out sequences from independently seeded scenes (split by scene)."""
    scenes = synthetic_scenes(num_scenes, seed, num_classes, size, stacks_per_scene, delta_t_us, **scene_kw)
    return dataset_from_scenes(scenes, num_classes, seq_len, warmup, n_frames, delta_t_us, test_fraction)


def with_aug_source(seqs: Sequence[StackSequence], source: str) -> list[StackSequence]:
    """Choose the augmented channel: ``image`` (rendered intensity), ``events`` (whole-window
    event frame) or ``none``."""
    if source == "image":
        return list(seqs)
    if source == "events":
        return [replace(s, aug=event_frame_images(s)) for s in seqs]
    if source == "none":
        return [replace(s, aug=None) for s in seqs]
    raise ValueError(f"unknown augmentation source {source!r}")
