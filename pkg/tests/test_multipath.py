import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rsmamba import tensor as T
from rsmamba.mixer import MixerConfig, mixer_forward
from rsmamba.multipath import (
    BlockConfig,
    PathKind,
    Permutation,
    apply_path,
    block_forward,
    count_block_params,
    eval_shuffle,
    gate_weights,
    init_block,
    path_permutation,
    revert_path,
)
from rsmamba.selftest import block_grad_error
from rsmamba.tensor import ShapeError, Tensor

MCFG = MixerConfig(hidden_size=8, intermediate_size=16, time_step_rank=2, state_size=4)


def _block(cfg=None, seed=0):
    cfg = cfg or BlockConfig(MCFG)
    return cfg, init_block(cfg, np.random.default_rng(seed), np.float64)


def test_path_kind_order_and_parse():
    assert [int(k) for k in PathKind] == [0, 1, 2]
    assert PathKind.parse("Reverse") is PathKind.REVERSE
    with pytest.raises(KeyError):
        PathKind.parse("sideways")


def test_identity_and_reverse_paths():
    x = Tensor(np.array([[1.0], [2.0], [3.0]]))
    assert apply_path(x, Permutation.identity(3)).data.tobytes() == x.data.tobytes()
    np.testing.assert_array_equal(apply_path(x, Permutation.reversed(3)).data[:, 0], [3, 2, 1])


def test_apply_path_row_semantics():
    order = [2, 0, 1]
    x = Tensor(np.arange(6.0).reshape(3, 2))
    np.testing.assert_array_equal(apply_path(x, Permutation.from_order(order)).data, x.data[order])


def test_permutation_validation_and_inverse():
    p = Permutation.from_order([3, 1, 0, 2])
    np.testing.assert_array_equal(p.inverse[p.order], np.arange(4))
    with pytest.raises(ValueError):
        Permutation.from_order([0, 0, 1])


def test_length_mismatch_rejected():
    x = Tensor(np.zeros((4, 2)))
    with pytest.raises(ShapeError):
        apply_path(x, Permutation.identity(3))
    with pytest.raises(ShapeError):
        revert_path(x, Permutation.identity(5))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 256), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_round_trip_all_path_kinds(L, d, seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(2, L, d)))
    shuffle = Permutation.shuffled(L, rng)
    for kind in PathKind:
        p = path_permutation(kind, L, shuffle)
        assert revert_path(apply_path(x, p), p).data.tobytes() == x.data.tobytes()


def test_shuffle_determinism():
    a, b = eval_shuffle(7, 3, 50), eval_shuffle(7, 3, 50)
    assert a.order.tobytes() == b.order.tobytes()
    assert not np.array_equal(eval_shuffle(7, 4, 50).order, a.order)


def test_gate_uniform_with_zero_params():
    seqs = [Tensor(np.random.default_rng(i).normal(size=(5, 4))) for i in range(3)]
    g = gate_weights(seqs, Tensor(np.zeros((12, 3))), Tensor(np.zeros(3)))
    np.testing.assert_allclose(g.data, [1 / 3] * 3, atol=1e-15)


def test_gate_bias_ten():
    seqs = [Tensor(np.ones((5, 4))) for _ in range(3)]
    g = gate_weights(seqs, Tensor(np.zeros((12, 3))), Tensor([10.0, 0.0, 0.0])).data
    # the quoted (0.99990, 0.00005, 0.00005) is a 5-decimal rounding of 0.9999092, 4.54e-5
    np.testing.assert_allclose(g, [0.99990, 0.00005, 0.00005], atol=1e-5)
    assert g[0] == pytest.approx(1 / (1 + 2 * np.exp(-10)), rel=1e-14)


def test_gate_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        gate_weights([Tensor(np.ones((5, 4))), Tensor(np.ones((4, 4))), Tensor(np.ones((5, 4)))],
                     Tensor(np.zeros((12, 3))), Tensor(np.zeros(3)))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 40), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_gate_simplex_and_row_order_invariance(L, d, seed):
    rng = np.random.default_rng(seed)
    seqs = [rng.normal(size=(L, d)) for _ in range(3)]
    w, b = Tensor(rng.normal(size=(3 * d, 3)) * 3), Tensor(rng.normal(size=3))
    g = gate_weights([Tensor(s) for s in seqs], w, b).data
    assert np.all((g > 0) & (g < 1)) and abs(g.sum() - 1) <= 1e-12
    shuffled = [Tensor(s[rng.permutation(L)]) for s in seqs]
    np.testing.assert_allclose(gate_weights(shuffled, w, b).data, g, atol=1e-12)


def test_forced_gate_equals_plain_mixer():
    cfg, p = _block(BlockConfig(MCFG, pre_norm=False))
    p.gate_w.data[:] = 0
    p.gate_b.data = np.array([1e3, 0.0, 0.0])
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(2, 9, 8)))
    out = block_forward(x, p, cfg, Permutation.shuffled(9, rng))
    np.testing.assert_allclose(out.data, mixer_forward(x, p.mixer, MCFG).data, atol=1e-12)


def test_zero_gate_is_mean_of_paths():
    cfg, p = _block(BlockConfig(MCFG, pre_norm=False))
    p.gate_w.data[:] = 0
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(1, 7, 8)))
    sh = Permutation.shuffled(7, rng)
    outs = []
    for perm in (Permutation.identity(7), Permutation.reversed(7), sh):
        outs.append(revert_path(mixer_forward(apply_path(x, perm), p.mixer, MCFG), perm).data)
    np.testing.assert_allclose(block_forward(x, p, cfg, sh).data, np.mean(outs, axis=0), atol=1e-13)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["gate", "mean"]))
def test_single_token_collapses_to_mixer(seed, fusion):
    cfg, p = _block(BlockConfig(MCFG, pre_norm=False, fusion=fusion), seed=seed % 100)
    rng = np.random.default_rng(seed)
    if p.gate_w is not None:
        p.gate_w.data = rng.normal(size=p.gate_w.shape)
        p.gate_b.data = rng.normal(size=3)
    x = Tensor(rng.normal(size=(3, 1, 8)))
    np.testing.assert_allclose(block_forward(x, p, cfg, Permutation.identity(1)).data,
                               mixer_forward(x, p.mixer, MCFG).data, atol=1e-12)


def test_pre_norm_applied_before_paths():
    cfg, p = _block()
    x = Tensor(np.random.default_rng(3).normal(size=(1, 4, 8)))
    scaled = Tensor(x.data * 5.0 + 2.0)  # layer norm removes per-token affine changes
    sh = Permutation.shuffled(4, np.random.default_rng(0))
    np.testing.assert_allclose(block_forward(x, p, cfg, sh).data, block_forward(scaled, p, cfg, sh).data,
                               atol=1e-4)


def test_paths_share_one_mixer_storage():
    cfg, p = _block()
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(1, 6, 8)))
    with T.Tape() as tape:
        loss = T.sum_(block_forward(x, p, cfg, Permutation.shuffled(6, rng)))
    names = dict(p.named_parameters())
    # one storage object per mixer tensor, and the tape saw each exactly as a single leaf
    assert len({id(t) for t in names.values()}) == len(names)
    leaf_ids = set(tape.leaves)
    for n, t in p.mixer.named_parameters():
        assert id(t) in leaf_ids
    assert T.backward(tape, loss)[p.mixer.in_proj].shape == p.mixer.in_proj.shape


def test_block_gradient():
    assert block_grad_error(seed=1) <= 1e-4


def test_block_config_validation_and_counts():
    with pytest.raises(ValueError):
        BlockConfig(MCFG, paths=("forward", "forward"))
    with pytest.raises(ValueError):
        BlockConfig(MCFG, fusion="max")
    full = BlockConfig(MCFG)
    _, p = _block(full)
    assert count_block_params(full) == sum(t.size for _, t in p.named_parameters())
    single = BlockConfig(MCFG, paths=("forward",))
    assert count_block_params(full) - count_block_params(single) == 24 * 3 + 3
