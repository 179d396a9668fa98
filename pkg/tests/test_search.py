import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spikingedn.autograd import Adam, Conv2d, Parameter, Tensor
from spikingedn.autograd import functional as F
from spikingedn.events import synthetic_dataset
from spikingedn.network import ModelConfig
from spikingedn.search import (
    ArchParams,
    EdgeProbe,
    GenotypeTieWarning,
    SearchConfig,
    SearchSpace,
    Supernet,
    bilevel_step,
    decode_path,
    enumerate_paths,
    extract_genotype,
    mixed_edge_forward,
    path_log_weight,
    probe_batches,
    run_search,
    shift_task,
    split_half,
)


def test_single_op_edge_is_that_op(rng):
    conv = Conv2d(2, 2, 3, rng=rng)
    x = Tensor(rng.normal(size=(1, 2, 5, 5)))
    out = mixed_edge_forward(x, Tensor(np.array([0.7])), [conv])
    np.testing.assert_array_equal(out.data, conv(x).data)


def test_equal_alpha_with_zero_conv_halves_input(rng):
    conv = Conv2d(2, 2, 3, rng=rng)
    conv.weight.data[:] = 0
    x = Tensor(rng.normal(size=(2, 2, 4, 4)))
    out = mixed_edge_forward(x, Tensor(np.zeros(2)), [None, conv])
    np.testing.assert_allclose(out.data, 0.5 * x.data)


def test_saturated_skip_alpha(rng):
    conv = Conv2d(2, 2, 3, rng=rng)
    x = Tensor(rng.normal(size=(1, 2, 4, 4)))
    out = mixed_edge_forward(x, Tensor(np.array([60.0, 0.0])), [None, conv])
    np.testing.assert_allclose(out.data, x.data, atol=1e-20)


def test_alpha_count_mismatch():
    with pytest.raises(ValueError):
        mixed_edge_forward(Tensor(np.zeros(3)), Tensor(np.zeros(3)), [None, None])


def test_mixture_weights_sum_to_one(rng):
    arch = ArchParams(SearchSpace(), rng, scale=3.0)
    for w in arch.edge_weights():
        np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-6)
        assert np.all(w.data > 0)
    t = arch.transition_arrays()
    for li in range(6):
        for lv in SearchSpace().valid_levels(li):
            assert t[li, lv].sum() == pytest.approx(1.0)


def test_frozen_weights_better_op_weight_rises_monotonically(rng):
    # target is produced by the conv op itself, so every alpha step should favour it
    conv = Conv2d(1, 1, 3, rng=rng)
    x = Tensor(rng.normal(size=(4, 1, 8, 8)))
    target = conv(x).data
    alpha = Parameter(np.zeros(2))
    opt = Adam([alpha], 0.05)
    weights = []
    for _ in range(40):
        opt.zero_grad()
        out = mixed_edge_forward(x, alpha, [None, conv])
        loss = ((out - Tensor(target)) * (out - Tensor(target))).mean()
        loss.backward()
        conv.weight.grad = None
        opt.step()
        weights.append(float(F.softmax(alpha, axis=-1).data[1]))
    assert all(b > a for a, b in zip(weights, weights[1:]))


def tiny_supernet():
    space = SearchSpace(ops=("skip", "conv3x3"), nodes=1, layers=2, plan=(4, 2))
    cfg = ModelConfig(num_classes=3, stem_channels=4, node_width=4, aspp_channels=4, decoder_channels=4, seed=1)
    return Supernet(space, cfg)


def tiny_data():
    ds = synthetic_dataset(4, seed=2, size=16, stacks_per_scene=4, seq_len=2, test_fraction=0)
    return split_half(ds.train)


def test_frozen_alpha_is_plain_training():
    net = tiny_supernet()
    tr, _ = tiny_data()
    before = [a.copy() for a in net.arch.alpha_arrays()]
    from spikingedn.events import collate
    loss, vloss = bilevel_step(net, collate(tr[:2]), None, Adam(net.weight_parameters(), 1e-2), None)
    assert vloss is None and math.isfinite(loss)
    for a, b in zip(before, net.arch.alpha_arrays()):
        np.testing.assert_array_equal(a, b)


def test_empty_split_rejected():
    net = tiny_supernet()
    with pytest.raises(ValueError):
        bilevel_step(net, None, None, Adam(net.weight_parameters(), 1e-2), None)
    with pytest.raises(ValueError):
        split_half([1])
    with pytest.raises(ValueError):
        run_search(net, [], [1], SearchConfig(epochs=1, warmup_epochs=0))


def test_alternation_lowers_loss():
    net = tiny_supernet()
    tr, va = tiny_data()
    res = run_search(net, tr, va, SearchConfig(epochs=5, warmup_epochs=1, batch_size=2, w_lr=1e-2, a_lr=1e-2))
    losses = [h["train_loss"] for h in res.history]
    assert losses[-1] < losses[0]
    assert res.genotype.num_layers == 2 and res.genotype.meta["epoch"] == "5"
    assert [h["arch"] for h in res.history] == [False, True, True, True, True]


def test_probe_search_is_deterministic():
    def once():
        space = SearchSpace(ops=("skip", "conv3x3"), nodes=1, layers=1, plan=(1,))
        tr, va = split_half(shift_task(8, seed=5))
        res = run_search(EdgeProbe(space, seed=5), tr, va,
                         SearchConfig(epochs=3, warmup_epochs=1, batch_size=4, w_lr=3e-3, a_lr=0.3, seed=5),
                         batch_fn=probe_batches)
        return res.history, res.genotype.to_text()
    assert once() == once()


def test_shift_task_labels():
    ((x, lab),) = shift_task(1, size=6, shift=2, seed=0)
    np.testing.assert_array_equal(lab[:, :4], x[0, :, 2:])
    assert np.all(lab[:, 4:] == 255)


def conv_alphas(space, best="conv3x3", noise=None):
    out = []
    for j in range(space.nodes):
        a = np.zeros((2 + j, len(space.ops)))
        a[:, space.ops.index(best)] = 1.0
        if noise is not None:
            a += noise.uniform(0, 0.1, a.shape)
        out.append(a)
    return out


def uniform_transitions(space):
    t = np.zeros((space.layers, space.levels, 3))
    for li in range(space.layers):
        for lv in space.valid_levels(li):
            srcs = space.sources(li, lv)
            for k, _ in srcs:
                t[li, lv, k] = 1.0 / len(srcs)
    return t


def test_hand_set_alphas_give_all_conv3x3(rng):
    space = SearchSpace()
    g = extract_genotype(conv_alphas(space, noise=rng), uniform_transitions(space), space)
    assert all(op == "conv3x3" for cell in g.cells for node in cell for op in node)
    assert g.num_layers == 6 and g.plan == (4, 2, 2, 2)


def test_tied_alphas_pick_lowest_index_and_warn():
    space = SearchSpace()
    alphas = [np.zeros((2 + j, 3)) for j in range(3)]
    alphas[0][1] = [0.0, 2.0, 1.0]
    with pytest.warns(GenotypeTieWarning):
        g = extract_genotype(alphas, uniform_transitions(space), space)
    assert g.cells[0][0] == ["skip", "conv3x3"]
    assert g.cells[0][2] == ["skip"] * 4
    assert "0/0" in g.meta["ties"] and "0/1" not in g.meta["ties"].split(";")


def random_transitions(space, r):
    arch = ArchParams(space, r, scale=2.0)
    return arch.transition_arrays()


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_decoded_path_is_optimal(seed):
    space = SearchSpace()
    t = random_transitions(space, np.random.default_rng(seed))
    levels, score = decode_path(t, space)
    best = max(path_log_weight(p, t, space) for p in enumerate_paths(space))
    assert score == pytest.approx(best, abs=1e-12)
    assert path_log_weight(levels, t, space) == pytest.approx(best, abs=1e-12)
    assert levels in enumerate_paths(space)


def test_path_enumeration_count():
    # walks of 5 moves in {-1, 0, +1} from level 0 staying within 4 levels
    space = SearchSpace()
    paths = enumerate_paths(space)
    assert len(paths) == len({tuple(p) for p in paths})
    assert all(p[0] == 0 and all(abs(a - b) <= 1 for a, b in zip(p, p[1:])) for p in paths)
    count = {0: 1}
    for _ in range(5):
        nxt = {}
        for lv, c in count.items():
            for m in (-1, 0, 1):
                if 0 <= lv + m < 4:
                    nxt[lv + m] = nxt.get(lv + m, 0) + c
        count = nxt
    assert len(paths) == sum(count.values())


def test_path_ties_go_to_lower_level():
    space = SearchSpace(layers=3)
    t = uniform_transitions(space)
    t[1, 0] = [0, 0.5, 0.5]
    t[1, 1] = [0.5, 0, 0]
    t[2] = 0
    t[2, 0, 1] = 1.0
    t[2, 1] = [0.5, 0.5, 0]
    levels, _ = decode_path(t, space)
    assert levels == [0, 0, 0]


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.1, 10.0), shift=st.floats(-5, 5))
def test_argmax_invariance(seed, scale, shift):
    r = np.random.default_rng(seed)
    space = SearchSpace()
    alphas = [r.normal(size=(2 + j, 3)) for j in range(3)]
    t = random_transitions(space, r)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", GenotypeTieWarning)
        a = extract_genotype(alphas, t, space)
        b = extract_genotype([scale * x + shift for x in alphas], t, space)
    assert a.to_text() == b.to_text()
