import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rsmamba import tensor as T
from rsmamba.selftest import lti_duality_error, random_diagonal_lti, selective_reduction_error
from rsmamba.ssm import (
    DiscretizedSystem,
    LtiSystem,
    conv_apply,
    conv_kernel,
    recurrent_scan,
    selective_scan,
    zoh_discretize,
)
from rsmamba.tensor import ShapeError


def test_zoh_scalar_closed_form():
    disc = zoh_discretize(LtiSystem(A=[-1.0], B=[1.0], C=[1.0], delta=math.log(2)))
    assert abs(disc.A_bar[0] - 0.5) <= 1e-12
    assert abs(disc.B_bar[0] - 0.5) <= 1e-12


def test_zoh_diagonal_closed_form():
    disc = zoh_discretize(LtiSystem(A=[-1.0, -2.0], B=[1.0, 1.0], C=[1.0, 1.0], delta=1.0))
    np.testing.assert_allclose(disc.A_bar, [np.exp(-1), np.exp(-2)], rtol=1e-15)
    np.testing.assert_allclose(disc.B_bar, [1 - np.exp(-1), (1 - np.exp(-2)) / 2], rtol=1e-15)


def test_zoh_small_delta_limit():
    d = 1e-8
    disc = zoh_discretize(LtiSystem(A=[-1.5, -0.3], B=[2.0, -1.0], C=[1.0, 1.0], delta=d))
    np.testing.assert_allclose(disc.A_bar, 1.0, atol=10 * d)
    np.testing.assert_allclose(disc.B_bar / d, [2.0, -1.0], atol=10 * d)


def test_zoh_full_matrix_matches_diagonal():
    A = np.array([-0.5, -1.25, -3.0])
    sysd = LtiSystem(A=A, B=[1.0, 2.0, 3.0], C=[1.0, 1.0, 1.0], delta=0.3)
    sysf = LtiSystem(A=np.diag(A), B=[1.0, 2.0, 3.0], C=[1.0, 1.0, 1.0], delta=0.3)
    dd, df = zoh_discretize(sysd), zoh_discretize(sysf)
    np.testing.assert_allclose(np.diag(df.A_bar), dd.A_bar, rtol=1e-13)
    np.testing.assert_allclose(df.B_bar, dd.B_bar, rtol=1e-13)


def test_zoh_full_matrix_against_augmented_exponential():
    # Van Loan: expm([[A, B], [0, 0]] * dt) holds (A_bar, B_bar) in its first block row.
    import scipy.linalg

    rng = np.random.default_rng(4)
    A = rng.normal(size=(3, 3)) - 2 * np.eye(3)
    B = rng.normal(size=3)
    dt = 0.4
    M = np.zeros((4, 4))
    M[:3, :3], M[:3, 3] = A, B
    E = scipy.linalg.expm(M * dt)
    disc = zoh_discretize(LtiSystem(A=A, B=B, C=np.ones(3), delta=dt))
    np.testing.assert_allclose(disc.A_bar, E[:3, :3], atol=1e-13)
    np.testing.assert_allclose(disc.B_bar, E[:3, 3], atol=1e-13)


def test_zoh_rejects_singular_and_bad_delta():
    with pytest.raises(ValueError, match="singular"):
        zoh_discretize(LtiSystem(A=[-1.0, 0.0], B=[1.0, 1.0], C=[1.0, 1.0], delta=1.0))
    with pytest.raises(ValueError):
        LtiSystem(A=[-1.0], B=[1.0], C=[1.0], delta=0.0)
    with pytest.raises(ShapeError):
        LtiSystem(A=[-1.0, -2.0], B=[1.0], C=[1.0, 1.0], delta=1.0)


def test_discrete_diagonal_entries_in_unit_interval():
    rng = np.random.default_rng(0)
    for _ in range(20):
        disc = zoh_discretize(random_diagonal_lti(rng, 8))
        assert np.all((disc.A_bar > 0) & (disc.A_bar < 1))


def test_conv_kernel_geometric():
    disc = DiscretizedSystem(np.array([0.5]), np.array([1.0]))
    np.testing.assert_array_equal(conv_kernel(disc, [1.0], 4), [1, 0.5, 0.25, 0.125])


def test_conv_kernel_degenerate_cases():
    disc = DiscretizedSystem(np.array([0.5, 0.2]), np.array([1.0, 3.0]))
    np.testing.assert_array_equal(conv_kernel(disc, [0.0, 0.0], 5), np.zeros(5))
    np.testing.assert_array_equal(conv_kernel(disc, [2.0, 1.0], 1), [5.0])
    with pytest.raises(ValueError):
        conv_kernel(disc, [1.0, 1.0], 0)


def test_impulse_response_is_kernel():
    sys = random_diagonal_lti(np.random.default_rng(2), 5)
    disc = zoh_discretize(sys)
    x = np.zeros(12)
    x[0] = 1
    K = conv_kernel(disc, sys.C, 12)
    np.testing.assert_allclose(recurrent_scan(disc, sys.C, x), K, atol=1e-15)
    np.testing.assert_allclose(conv_apply(x, K), K, atol=0)


def test_memoryless_when_a_bar_zero():
    disc = DiscretizedSystem(np.zeros(2), np.array([1.0, 2.0]))
    x = np.array([1.0, -2.0, 3.0])
    np.testing.assert_allclose(recurrent_scan(disc, [1.0, 1.0], x), 3.0 * x)


def test_identity_kernel():
    x = np.random.default_rng(0).normal(size=7)
    K = np.zeros(7)
    K[0] = 1
    np.testing.assert_array_equal(conv_apply(x, K), x)


def test_scan_and_conv_reject_bad_lengths():
    disc = DiscretizedSystem(np.array([0.5]), np.array([1.0]))
    with pytest.raises(ValueError):
        recurrent_scan(disc, [1.0], [])
    with pytest.raises(ShapeError):
        conv_apply(np.ones(4), np.ones(3))


def test_duality_oracle_hundred_systems():
    assert lti_duality_error(num_systems=100, seed=5) <= 1e-10


def test_full_matrix_duality():
    rng = np.random.default_rng(8)
    for _ in range(10):
        n = int(rng.integers(1, 6))
        Q = np.linalg.qr(rng.normal(size=(n, n)))[0]
        A = Q @ np.diag(-rng.uniform(0.1, 2, n)) @ Q.T
        sys = LtiSystem(A=A, B=rng.normal(size=n), C=rng.normal(size=n), delta=0.2)
        disc = zoh_discretize(sys)
        x = rng.normal(size=30)
        np.testing.assert_allclose(recurrent_scan(disc, sys.C, x), conv_apply(x, conv_kernel(disc, sys.C, 30)),
                                   atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 64), st.integers(0, 10_000))
def test_causality_of_lti_realisations(L, seed):
    rng = np.random.default_rng(seed)
    sys = random_diagonal_lti(rng, int(rng.integers(1, 9)))
    disc = zoh_discretize(sys)
    x = rng.normal(size=L)
    t = int(rng.integers(0, L))
    x2 = x.copy()
    x2[t] += 1.0
    K = conv_kernel(disc, sys.C, L)
    for f in (lambda v: recurrent_scan(disc, sys.C, v), lambda v: conv_apply(v, K)):
        assert f(x)[:t].tobytes() == f(x2)[:t].tobytes()


# ---------------------------------------------------------------- selective scan


def _scan_inputs(rng, b=2, L=6, d=3, n=4):
    return dict(
        u=rng.normal(size=(b, L, d)),
        delta=rng.uniform(0.01, 0.5, size=(b, L, d)),
        A=-rng.uniform(0.1, 2.0, size=(d, n)),
        B=rng.normal(size=(b, L, n)),
        C=rng.normal(size=(b, L, n)),
        D=rng.normal(size=d),
    )


def _scan_reference(u, delta, A, B, C, D, simplified_b=False):
    b, L, d = u.shape
    y = np.zeros_like(u)
    for i in range(b):
        h = np.zeros_like(A)
        for t in range(L):
            dA = delta[i, t][:, None] * A
            Bbar = (delta[i, t][:, None] if simplified_b else np.expm1(dA) / A) * B[i, t]
            h = np.exp(dA) * h + Bbar * u[i, t][:, None]
            y[i, t] = h @ C[i, t] + D * u[i, t]
    return y


@pytest.mark.parametrize("simplified", [False, True])
def test_selective_scan_matches_naive_loop(simplified):
    inp = _scan_inputs(np.random.default_rng(0))
    y = selective_scan(**inp, simplified_b=simplified).data
    np.testing.assert_allclose(y, _scan_reference(**inp, simplified_b=simplified), atol=1e-12)


def test_selective_scan_reduces_to_lti():
    assert selective_reduction_error(num_cases=50, seed=3) <= 1e-10


def test_selective_scan_zero_input():
    inp = _scan_inputs(np.random.default_rng(1))
    inp["u"] = np.zeros_like(inp["u"])
    assert np.all(selective_scan(**inp).data == 0)


def test_selective_scan_single_step():
    inp = _scan_inputs(np.random.default_rng(2), b=1, L=1, d=2, n=3)
    u, dl, A, B, C, D = (inp[k][0] if inp[k].ndim == 3 else inp[k] for k in "u delta A B C D".split())
    bbar = np.expm1(dl[0][:, None] * A) / A * B[0]
    expected = (bbar * u[0][:, None]) @ C[0] + D * u[0]
    np.testing.assert_allclose(selective_scan(u, dl, A, B, C, D).data[0], expected, atol=1e-14)


def test_selective_scan_unbatched_matches_batched():
    inp = _scan_inputs(np.random.default_rng(3), b=1)
    y = selective_scan(**inp).data
    unb = {k: (v[0] if k in ("u", "delta", "B", "C") else v) for k, v in inp.items()}
    np.testing.assert_array_equal(selective_scan(**unb).data, y[0])


def test_selective_scan_rejects_nonpositive_delta_and_bad_shapes():
    inp = _scan_inputs(np.random.default_rng(4))
    bad = dict(inp, delta=inp["delta"].copy())
    bad["delta"][0, 2, 1] = 0.0
    with pytest.raises(ValueError, match="positive"):
        selective_scan(**bad)
    with pytest.raises(ShapeError):
        selective_scan(**dict(inp, B=inp["B"][:, :, :2]))


def test_selective_scan_stability_long_sequence():
    rng = np.random.default_rng(5)
    inp = _scan_inputs(rng, b=1, L=4096, d=4, n=8)
    inp["u"] = rng.uniform(-1, 1, size=inp["u"].shape)
    inp["delta"] = rng.uniform(1e-3, 1.0, size=inp["delta"].shape)
    y = selective_scan(**inp).data
    assert np.all(np.isfinite(y)) and np.max(np.abs(y)) < 1e4


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 24), st.integers(0, 10_000))
def test_selective_scan_is_causal(L, seed):
    rng = np.random.default_rng(seed)
    inp = _scan_inputs(rng, b=1, L=L)
    t = int(rng.integers(0, L))
    y = selective_scan(**inp).data
    for key in ("u", "delta", "B", "C"):
        pert = dict(inp)
        pert[key] = inp[key].copy()
        pert[key][0, t] += 0.25
        assert selective_scan(**pert).data[0, :t].tobytes() == y[0, :t].tobytes()


@pytest.mark.parametrize("simplified", [False, True])
def test_selective_scan_gradients(simplified):
    rng = np.random.default_rng(6)
    inp = _scan_inputs(rng, b=1, L=8, d=4, n=4)
    w = rng.normal(size=inp["u"].shape)

    def f(u, dl, a, b, c, d):
        return T.sum_(T.mul(selective_scan(u, dl, a, b, c, d, simplified_b=simplified), w))

    errs = T.check_gradients(f, [inp[k] for k in ("u", "delta", "A", "B", "C", "D")])
    assert max(errs) <= 1e-4
