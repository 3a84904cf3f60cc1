"""Zero-order-hold SSMs: discretisation, recurrence, convolution, selective scan.

The LTI helpers operate on plain float64 numpy arrays and exist mainly as
reference realisations. ``selective_scan`` is the differentiable, batched,
time-varying scan used inside the mixer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
import scipy.linalg

from .tensor import ShapeError, Tensor, primitive_forward, register_primitive


@dataclass(frozen=True)
class LtiSystem:
    """Continuous single-input single-output system ``h' = A h + B x``, ``y = C h``.

    ``A`` is either an ``n`` vector (diagonal) or an ``n x n`` matrix.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    delta: float

    def __post_init__(self):
        A = np.asarray(self.A, dtype=np.float64)
        B = np.asarray(self.B, dtype=np.float64).reshape(-1)
        C = np.asarray(self.C, dtype=np.float64).reshape(-1)
        if A.ndim == 0:
            A = A.reshape(1)
        n = A.shape[0]
        if A.ndim not in (1, 2) or (A.ndim == 2 and A.shape != (n, n)):
            raise ShapeError(f"A must be (n,) or (n, n), got {A.shape}")
        if B.shape != (n,) or C.shape != (n,):
            raise ShapeError(f"B {B.shape} and C {C.shape} must both be ({n},)")
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)

    @property
    def diagonal(self) -> bool:
        return self.A.ndim == 1

    @property
    def state_size(self) -> int:
        return self.A.shape[0]


@dataclass(frozen=True)
class DiscretizedSystem:
    A_bar: np.ndarray
    B_bar: np.ndarray

    @property
    def diagonal(self) -> bool:
        return self.A_bar.ndim == 1


def zoh_discretize(sys: LtiSystem) -> DiscretizedSystem:
    """``A_bar = exp(dA)``, ``B_bar = (dA)^-1 (exp(dA) - I) dB``."""
    dt = sys.delta
    if sys.diagonal:
        if np.any(sys.A == 0):
            raise ValueError("A has a zero diagonal entry; delta*A is singular")
        A_bar = np.exp(dt * sys.A)
        # (dA)^-1 (e^{dA} - 1) dB collapses to expm1(dA)/A * B per element
        B_bar = np.expm1(dt * sys.A) / sys.A * sys.B
        return DiscretizedSystem(A_bar, B_bar)
    dA = dt * sys.A
    if np.linalg.matrix_rank(dA) < dA.shape[0]:
        raise ValueError("delta*A is singular")
    A_bar = scipy.linalg.expm(dA)
    B_bar = np.linalg.solve(dA, (A_bar - np.eye(dA.shape[0])) @ (dt * sys.B))
    return DiscretizedSystem(A_bar, B_bar)


def _step(disc: DiscretizedSystem, h: np.ndarray) -> np.ndarray:
    return disc.A_bar * h if disc.diagonal else disc.A_bar @ h


def recurrent_scan(disc: DiscretizedSystem, C: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Run ``h_k = A_bar h_{k-1} + B_bar x_k``, ``y_k = C h_k`` from ``h_0 = 0``."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("empty input sequence")
    C = np.asarray(C, dtype=np.float64).reshape(-1)
    h = np.zeros_like(disc.B_bar)
    y = np.empty_like(x)
    for k, xk in enumerate(x):
        h = _step(disc, h) + disc.B_bar * xk
        y[k] = C @ h
    return y


def conv_kernel(disc: DiscretizedSystem, C: np.ndarray, L: int) -> np.ndarray:
    """``(C B_bar, C A_bar B_bar, ..., C A_bar^{L-1} B_bar)`` by forward state iteration."""
    if L < 1:
        raise ValueError("kernel length must be >= 1")
    C = np.asarray(C, dtype=np.float64).reshape(-1)
    K = np.empty(L)
    state = disc.B_bar.copy()
    for k in range(L):
        K[k] = C @ state
        state = _step(disc, state)
    return K


def conv_apply(x: np.ndarray, K: np.ndarray) -> np.ndarray:
    """Causal convolution ``y_k = sum_{j<=k} K_j x_{k-j}``."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    K = np.asarray(K, dtype=np.float64).reshape(-1)
    if K.size != x.size:
        raise ShapeError(f"kernel length {K.size} != sequence length {x.size}")
    return np.convolve(x, K)[: x.size]


# ---------------------------------------------------------------- selective scan


@numba.njit(cache=True)
def _recur_fwd(a, bfac, u, B, C):
    # h_t = a_t * h_{t-1} + bfac_t * B_t * u_t ;  y_t = sum_n C_t h_t
    b, L, d, n = a.shape
    hs = np.empty_like(a)
    y = np.zeros((b, L, d), dtype=a.dtype)
    h = np.zeros((d, n), dtype=a.dtype)
    for i in range(b):
        h[:] = 0.0
        for t in range(L):
            for c in range(d):
                ut = u[i, t, c]
                acc = 0.0
                for k in range(n):
                    hv = a[i, t, c, k] * h[c, k] + bfac[i, t, c, k] * B[i, t, k] * ut
                    h[c, k] = hv
                    hs[i, t, c, k] = hv
                    acc += C[i, t, k] * hv
                y[i, t, c] = acc
    return y, hs


@numba.njit(cache=True)
def _recur_bwd(a, bfac, hs, u, delta, A, B, C, gy, simplified_b):
    b, L, d, n = a.shape
    gu = np.zeros((b, L, d), dtype=a.dtype)
    gdelta = np.zeros((b, L, d), dtype=a.dtype)
    gA = np.zeros((d, n), dtype=a.dtype)
    gB = np.zeros((b, L, n), dtype=a.dtype)
    gC = np.zeros((b, L, n), dtype=a.dtype)
    carry = np.zeros((d, n), dtype=a.dtype)
    for i in range(b):
        carry[:] = 0.0
        for t in range(L - 1, -1, -1):
            for c in range(d):
                g = gy[i, t, c]
                ut = u[i, t, c]
                dt = delta[i, t, c]
                gu_acc = 0.0
                gd_acc = 0.0
                for k in range(n):
                    at = a[i, t, c, k]
                    bf = bfac[i, t, c, k]
                    bt = B[i, t, k]
                    ak = A[c, k]
                    gh = g * C[i, t, k] + carry[c, k]
                    gC[i, t, k] += g * hs[i, t, c, k]
                    h_prev = hs[i, t - 1, c, k] if t > 0 else 0.0
                    # a = exp(delta * A)
                    g_dA = gh * h_prev * at
                    gd_acc += g_dA * ak
                    gA[c, k] += g_dA * dt
                    # h gets bfac * B * u
                    gcoef = gh * ut
                    gu_acc += gh * bf * bt
                    gB[i, t, k] += gcoef * bf
                    gfac = gcoef * bt
                    if simplified_b:
                        gd_acc += gfac
                    else:
                        # bfac = expm1(delta A)/A: d/d delta = a, d/dA = (delta a - bfac)/A
                        gd_acc += gfac * at
                        gA[c, k] += gfac * (dt * at - bf) / ak
                    carry[c, k] = gh * at
                gu[i, t, c] = gu_acc
                gdelta[i, t, c] = gd_acc
    return gu, gdelta, gA, gB, gC


def _scan_fwd(u, delta, A, B, C, D, simplified_b=False):
    # u, delta: (b, L, d); A: (d, n); B, C: (b, L, n); D: (d,)
    b, L, d = u.shape
    n = A.shape[1]
    if delta.shape != u.shape or A.shape != (d, n) or B.shape != (b, L, n) or C.shape != (b, L, n) or D.shape != (d,):
        raise ShapeError(
            f"selective_scan: u={u.shape} delta={delta.shape} A={A.shape} B={B.shape} C={C.shape} D={D.shape}"
        )
    if L < 1:
        raise ShapeError("selective_scan: empty sequence")
    if not np.all(delta > 0):
        raise ValueError("selective_scan: delta must be strictly positive")
    dA = delta[..., None] * A
    a = np.exp(dA)
    # B_bar per unit B: exact ZOH expm1(dA)/A, or the Euler-style delta
    if simplified_b:
        bfac = np.ascontiguousarray(np.broadcast_to(delta[..., None], dA.shape))
    else:
        bfac = np.expm1(dA) / A
    y, hs = _recur_fwd(a, bfac, u, B, C)
    return y + u * D, (u, delta, A, B, C, D, a, bfac, hs, bool(simplified_b))


def _scan_bwd(ctx, gy):
    u, delta, A, B, C, D, a, bfac, hs, simplified_b = ctx
    gy = np.ascontiguousarray(gy)
    gu, gdelta, gA, gB, gC = _recur_bwd(a, bfac, hs, u, delta, A, B, C, gy, simplified_b)
    gu += gy * D
    gD = (gy * u).sum(axis=(0, 1))
    return gu, gdelta, gA, gB, gC, gD


register_primitive("selective_scan", _scan_fwd, _scan_bwd)


def selective_scan(u, delta, A, B, C, D, simplified_b: bool = False) -> Tensor:
    """Time-varying diagonal SSM scan.

    Per channel and step: ``A_bar = exp(delta A)``, ``B_bar`` by exact ZOH
    (or ``delta * B`` when ``simplified_b``), ``h = A_bar h + B_bar u``,
    ``y = C . h + D u``. ``u``/``delta`` are ``(batch, L, d)`` or ``(L, d)``;
    ``B``/``C`` match with ``n`` trailing; ``A`` is ``(d, n)``.
    """
    unbatched = u.ndim == 2
    if unbatched:
        u, delta, B, C = (x.reshape((1,) + x.shape) for x in (u, delta, B, C))
    y = primitive_forward("selective_scan", (u, delta, A, B, C, D), simplified_b=simplified_b)
    return y.reshape(y.shape[1:]) if unbatched else y
