"""Selective (Mamba-style) mixer: gated conv + selective-scan block."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .ssm import selective_scan
from .tensor import Tensor


@dataclass(frozen=True)
class MixerConfig:
    hidden_size: int
    intermediate_size: int
    time_step_rank: int
    state_size: int = 16
    conv_width: int = 4
    dt_min: float = 1e-3
    dt_max: float = 1e-1
    simplified_b: bool = False

    def __post_init__(self):
        for name in ("hidden_size", "intermediate_size", "time_step_rank", "state_size", "conv_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 < self.dt_min <= self.dt_max:
            raise ValueError("need 0 < dt_min <= dt_max")


@dataclass
class MixerParams:
    in_proj: Tensor  # (d, 2*IS), produces x and gate z
    conv_w: Tensor  # (IS, w)
    conv_b: Tensor  # (IS,)
    x_proj: Tensor  # (IS, TSR + 2n)
    dt_proj_w: Tensor  # (TSR, IS)
    dt_proj_b: Tensor  # (IS,)
    A_log: Tensor  # (IS, n); A = -exp(A_log)
    D: Tensor  # (IS,)
    out_proj: Tensor  # (IS, d)

    def named_parameters(self, prefix: str = ""):
        for f in fields(self):
            yield prefix + f.name, getattr(self, f.name)


def _uniform(rng, fan_in, shape, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_mixer(cfg: MixerConfig, rng: np.random.Generator, dtype=np.float32) -> MixerParams:
    d, e, r, n, w = cfg.hidden_size, cfg.intermediate_size, cfg.time_step_rank, cfg.state_size, cfg.conv_width
    # dt bias: inverse softplus of a log-uniform draw in [dt_min, dt_max]
    dt = np.exp(rng.uniform(np.log(cfg.dt_min), np.log(cfg.dt_max), size=e))
    dt_bias = dt + np.log(-np.expm1(-dt))
    A_log = np.log(np.tile(np.arange(1, n + 1, dtype=np.float64), (e, 1)))

    def p(a):
        return Tensor(np.asarray(a, dtype=dtype), requires_grad=True)

    return MixerParams(
        in_proj=p(_uniform(rng, d, (d, 2 * e), dtype)),
        conv_w=p(_uniform(rng, w, (e, w), dtype)),
        conv_b=p(_uniform(rng, w, (e,), dtype)),
        x_proj=p(_uniform(rng, e, (e, r + 2 * n), dtype)),
        dt_proj_w=p(_uniform(rng, r, (r, e), dtype)),
        dt_proj_b=p(dt_bias),
        A_log=p(A_log),
        D=p(np.ones(e)),
        out_proj=p(_uniform(rng, e, (e, d), dtype)),
    )


def _check_finite(x: Tensor, where: str) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise FloatingPointError(f"non-finite values in mixer {where}")
    return x


def mixer_forward(x: Tensor, params: MixerParams, cfg: MixerConfig) -> Tensor:
    """Map a ``(batch, L, d)`` (or ``(L, d)``) sequence to the same shape."""
    unbatched = x.ndim == 2
    if unbatched:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 3 or x.shape[-1] != cfg.hidden_size or x.shape[1] < 1:
        raise T.ShapeError(f"mixer expects (batch, L>=1, {cfg.hidden_size}), got {x.shape}")
    e, r, n = cfg.intermediate_size, cfg.time_step_rank, cfg.state_size

    xz = T.matmul(x, params.in_proj)
    xs, z = T.split(xz, (e, e), axis=-1)
    xs = _check_finite(T.silu(T.causal_conv1d(xs, params.conv_w, params.conv_b)), "conv1d")
    dt_logits, Bs, Cs = T.split(T.matmul(xs, params.x_proj), (r, n, n), axis=-1)
    delta = _check_finite(T.softplus(T.linear(dt_logits, params.dt_proj_w, params.dt_proj_b)), "dt_proj")
    A = T.neg(T.exp(params.A_log))
    y = _check_finite(selective_scan(xs, delta, A, Bs, Cs, params.D, simplified_b=cfg.simplified_b), "selective_scan")
    out = T.matmul(T.mul(y, T.silu(z)), params.out_proj)
    _check_finite(out, "out_proj")
    return out.reshape(out.shape[1:]) if unbatched else out


def count_mixer_params(cfg: MixerConfig) -> int:
    d, e, r, n, w = cfg.hidden_size, cfg.intermediate_size, cfg.time_step_rank, cfg.state_size, cfg.conv_width
    in_proj = d * 2 * e
    conv = e * w + e
    x_proj = e * (r + 2 * n)
    dt_proj = r * e + e
    ssm = e * n + e  # A_log, D
    out_proj = e * d
    return in_proj + conv + x_proj + dt_proj + ssm + out_proj
