import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spikingedn.events import (
    EventError,
    EventStream,
    SceneSpec,
    ShapeSpec,
    StackSequence,
    batches,
    collate,
    dataset_from_scenes,
    fuse_image_channel,
    make_sequences,
    stack_events,
    synthesize_scene,
    synthetic_scenes,
    with_aug_source,
)
from spikingedn.formats import (
    FormatError,
    decode_events,
    decode_images,
    decode_labels,
    encode_events,
    encode_images,
    encode_labels,
    read_events,
    write_events,
)


def random_stream(rng, count, width=17, height=11, duration=200_000):
    t = np.sort(rng.integers(0, duration, count))
    return EventStream(rng.integers(0, width, count), rng.integers(0, height, count), t,
                       rng.choice([-1, 1], count), width, height, duration)


def brute_force_stacks(stream, delta_t, n, num_stacks):
    out = np.zeros((num_stacks, n, stream.height, stream.width), dtype=np.int64)
    sub = delta_t // n
    for x, y, t, p in zip(stream.x, stream.y, stream.t, stream.p):
        s, f = int(t) // delta_t, (int(t) % delta_t) // sub
        if s < num_stacks:
            out[s, f, y, x] += p
    return out


def test_empty_stream_gives_zero_stacks():
    stacks = stack_events(EventStream.empty(8, 6, 100_000))
    assert len(stacks) == 2
    assert all(s.frames.shape == (5, 6, 8) and not s.frames.any() for s in stacks)


def test_single_event_hand_placement():
    ev = EventStream([2], [3], [12_000], [1], 8, 8, 50_000)
    (stack,) = stack_events(ev, 50_000, 5)
    assert stack.frames[1, 3, 2] == 1
    assert np.abs(stack.frames).sum() == 1
    assert stack.window == (0, 50_000)


def test_boundary_event_goes_to_later_window():
    ev = EventStream([0, 0], [0, 0], [10_000, 50_000], [1, -1], 2, 2, 100_000)
    a, b = stack_events(ev, 50_000, 5)
    assert a.frames[1, 0, 0] == 1 and a.frames[0, 0, 0] == 0
    assert b.frames[0, 0, 0] == -1


def test_random_stream_matches_brute_force(rng):
    ev = random_stream(rng, 10_000)
    got = np.stack([s.frames for s in stack_events(ev, 50_000, 5)])
    np.testing.assert_array_equal(got, brute_force_stacks(ev, 50_000, 5, 4))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.sampled_from([1, 2, 5, 10]), count=st.integers(0, 300))
def test_partition_property(seed, n, count):
    r = np.random.default_rng(seed)
    ev = EventStream(r.integers(0, 5, count), r.integers(0, 4, count), np.sort(r.integers(0, 100_000, count)),
                     np.ones(count), 5, 4, 100_000)
    frames = np.stack([s.frames for s in stack_events(ev, 50_000, n)])
    # all polarities positive, so the frame total counts every event exactly once
    assert frames.sum() == count
    np.testing.assert_array_equal(frames, brute_force_stacks(ev, 50_000, n, 2))


def test_stack_errors():
    with pytest.raises(ValueError, match="multiple"):
        stack_events(EventStream.empty(2, 2, 10), 50_000, 3)
    unsorted = EventStream([0, 0], [0, 0], [5, 1], [1, 1], 2, 2)
    with pytest.raises(EventError) as info:
        stack_events(unsorted)
    assert info.value.index == 1
    outside = EventStream([0, 4], [0, 0], [1, 2], [1, 1], 4, 2)
    with pytest.raises(EventError) as info:
        stack_events(outside)
    assert info.value.index == 1


def grids(k, size=4):
    return [np.full((size, size), i % 3, dtype=np.uint8) for i in range(k)]


def stacks(k, size=4):
    return [s for s in stack_events(EventStream.empty(size, size, k * 50_000), num_stacks=k)]


def test_make_sequences_protocol():
    seqs = make_sequences(stacks(8), grids(8), 4, 1)
    assert len(seqs) == 2 and all(len(s.labels) == 3 for s in seqs)
    assert seqs[1].labels[0][0, 0] == 5 % 3


def test_make_sequences_minimal_and_leftover():
    assert all(len(s.labels) == 1 for s in make_sequences(stacks(4), grids(4), 2, 1))
    assert len(make_sequences(stacks(7), grids(7), 4, 1)) == 1


def test_make_sequences_too_short_warns():
    with pytest.warns(UserWarning):
        assert make_sequences(stacks(3), grids(3), 4, 1) == []
    with pytest.raises(ValueError):
        make_sequences(stacks(4), grids(4), 1, 1)


def test_sequence_invariants():
    with pytest.raises(ValueError):
        StackSequence(stacks(4), grids(4), warmup=1)
    with pytest.raises(ValueError):
        StackSequence(stacks(2), grids(1, size=5), warmup=1)


def test_fuse_image_channel():
    seq = make_sequences(stacks(4), grids(4), 4, 1)[0]
    assert fuse_image_channel(seq, None) is seq
    fused = fuse_image_channel(seq, [np.full((4, 4), 0.5)] * 4)
    assert fused.aug_array().shape == (4, 1, 4, 4)
    assert np.all(fused.aug_array() == 0.5)
    with pytest.raises(ValueError):
        fuse_image_channel(seq, [np.zeros((5, 4))] * 4)
    with pytest.raises(ValueError):
        fuse_image_channel(seq, [np.zeros((4, 4))] * 3)


def test_collate_and_batches(rng):
    seqs = [fuse_image_channel(s, [np.zeros((4, 4))] * 4) for s in make_sequences(stacks(20), grids(20), 4, 1)]
    b = collate(seqs[:3])
    assert b.frames.shape == (3, 4, 5, 4, 4)
    assert b.labels.shape == (3, 3, 4, 4)
    assert b.aug.shape == (3, 4, 1, 4, 4)
    sizes = [len(x) for x in batches(seqs, 2, rng)]
    assert sizes == [2, 2, 1]
    with pytest.raises(ValueError):
        collate([])


def moving_rect(vx=100.0, **kw):
    shape = ShapeSpec("rect", 1, (20.0, 16.0), 5.0, (vx, 0.0), intensity=0.9)
    return SceneSpec([shape], 48, 32, 200_000, **kw)


def test_static_scene_is_silent():
    stream, labels, images = synthesize_scene(moving_rect(vx=0.0))
    assert len(stream) == 0
    assert all(np.array_equal(labels[0], lab) for lab in labels)
    assert labels.shape == (4, 32, 48) and images.shape == (4, 32, 48)


def test_moving_rect_edges_have_opposite_polarity():
    stream, _, _ = synthesize_scene(moving_rect())
    stream.validate()
    rows = (stream.y >= 12) & (stream.y <= 20)
    x, p, t = stream.x[rows].astype(float), stream.p[rows], stream.t[rows]
    # centre position at each event time (no bounce within 0.2 s at 100 px/s)
    cx = 20.0 + 100.0 * t * 1e-6
    leading = x > cx
    assert leading.sum() > 50 and (~leading).sum() > 50
    # a bright object moving right brightens its leading edge, darkens its trailing edge
    assert np.mean(p[leading] == 1) > 0.99
    assert np.mean(p[~leading] == -1) > 0.99
    # events sit on the vertical edges, not inside the uniform body
    near_edge = np.abs(np.abs(x - cx) - 5.0) <= 2.0
    assert near_edge.mean() > 0.95
    assert not np.any((stream.y < 10) | (stream.y > 22))


def test_synthesis_is_deterministic():
    spec = moving_rect(noise_rate_hz=5.0)
    a, b = synthesize_scene(spec, seed=3)[0], synthesize_scene(spec, seed=3)[0]
    assert encode_events(a) == encode_events(b)
    assert encode_events(a) != encode_events(synthesize_scene(spec, seed=4)[0])


def test_synthesis_rejects_bad_specs():
    with pytest.raises(ValueError):
        synthesize_scene(SceneSpec([], 8, 8))
    with pytest.raises(ValueError):
        synthesize_scene(SceneSpec([ShapeSpec("disk", 1, (4, 4), 2)], 8, 8, duration_us=0))


def test_dataset_splits_by_scene():
    scenes = synthetic_scenes(5, seed=1, size=16, stacks_per_scene=8)
    ds = dataset_from_scenes(scenes, test_fraction=0.4)
    assert len(ds.train) == 6 and len(ds.test) == 4
    assert ds.train[0].aug is not None
    for seq in ds.train:
        assert set(np.unique(seq.label_array())) <= {0, 1, 2}
    events_only = with_aug_source(ds.train, "events")
    np.testing.assert_array_equal(events_only[0].aug[0], ds.train[0].stacks[0].frames.sum(axis=0))
    assert with_aug_source(ds.train, "none")[0].aug is None


def test_events_file_round_trip(tmp_path, rng):
    ev = random_stream(rng, 500)
    path = tmp_path / "a.evs"
    write_events(path, ev)
    back = read_events(path)
    for f in "xytp":
        np.testing.assert_array_equal(getattr(back, f), getattr(ev, f))
    assert (back.width, back.height) == (ev.width, ev.height)


def test_events_file_errors(rng):
    buf = encode_events(random_stream(rng, 10))
    with pytest.raises(FormatError) as info:
        decode_events(b"XXXX" + buf[4:])
    assert info.value.offset == 0
    with pytest.raises(FormatError) as info:
        decode_events(buf[:-3])
    assert info.value.offset == 16 + 9 * 9
    with pytest.raises(FormatError, match="trailing"):
        decode_events(buf + b"\0")
    # break the time order of record 4
    bad = bytearray(buf)
    bad[16 + 4 * 9 + 4:16 + 4 * 9 + 8] = (0).to_bytes(4, "little")
    bad[16 + 3 * 9 + 4:16 + 3 * 9 + 8] = (10**6).to_bytes(4, "little")
    with pytest.raises(FormatError) as info:
        decode_events(bytes(bad))
    assert info.value.offset == 16 + 4 * 9


def test_grid_files(rng):
    labels = rng.integers(0, 3, (3, 5, 7)).astype(np.uint8)
    np.testing.assert_array_equal(decode_labels(encode_labels(labels)), labels)
    images = rng.random((2, 5, 7)).astype(np.float32)
    np.testing.assert_array_equal(decode_images(encode_images(images)), images)
    buf = encode_labels(labels)
    with pytest.raises(FormatError, match="trailing"):
        decode_labels(buf + b"ab")
    with pytest.raises(FormatError):
        decode_labels(buf[:-1])
    with pytest.raises(FormatError):
        decode_images(buf)
