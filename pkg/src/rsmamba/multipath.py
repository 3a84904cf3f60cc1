"""Dynamic multi-path activation block.

Forward, reverse and shuffled copies of the token sequence go through one
shared mixer, are put back into forward order, and are fused with a softmax
gate computed from the mean of the concatenated reverted outputs.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .mixer import MixerConfig, MixerParams, count_mixer_params, init_mixer, mixer_forward
from .tensor import ShapeError, Tensor


class PathKind(enum.IntEnum):
    FORWARD = 0
    REVERSE = 1
    SHUFFLE = 2

    @classmethod
    def parse(cls, name: "str | PathKind") -> "PathKind":
        if isinstance(name, PathKind):
            return name
        return cls[name.upper()]


@dataclass(frozen=True, eq=False)
class Permutation:
    order: np.ndarray
    inverse: np.ndarray = field(repr=False)

    @classmethod
    def from_order(cls, order) -> "Permutation":
        order = np.asarray(order, dtype=np.intp)
        if order.ndim != 1 or not np.array_equal(np.sort(order), np.arange(order.size)):
            raise ValueError("order is not a permutation of 0..L-1")
        inverse = np.empty_like(order)
        inverse[order] = np.arange(order.size)
        return cls(order, inverse)

    @classmethod
    def identity(cls, L: int) -> "Permutation":
        return cls.from_order(np.arange(L))

    @classmethod
    def reversed(cls, L: int) -> "Permutation":
        return cls.from_order(np.arange(L)[::-1])

    @classmethod
    def shuffled(cls, L: int, rng: np.random.Generator) -> "Permutation":
        return cls.from_order(rng.permutation(L))

    def __len__(self) -> int:
        return self.order.size

    @property
    def is_identity(self) -> bool:
        return bool(np.array_equal(self.order, np.arange(self.order.size)))


def eval_shuffle(eval_seed: int, layer: int, L: int) -> Permutation:
    """Deterministic shuffle used at evaluation time."""
    return Permutation.shuffled(L, np.random.default_rng([eval_seed, layer, L]))


def path_permutation(kind: PathKind, L: int, shuffle: Permutation | None = None) -> Permutation:
    kind = PathKind.parse(kind)
    if kind is PathKind.FORWARD:
        return Permutation.identity(L)
    if kind is PathKind.REVERSE:
        return Permutation.reversed(L)
    if shuffle is None:
        raise ValueError("shuffle path needs a permutation")
    if len(shuffle) != L:
        raise ShapeError(f"shuffle permutation has length {len(shuffle)}, sequence has {L}")
    return shuffle


def _seq_axis(x: Tensor) -> int:
    return x.ndim - 2


def apply_path(x: Tensor, perm: Permutation) -> Tensor:
    """Row ``i`` of the output is row ``perm.order[i]`` of ``x`` (sequence axis is -2)."""
    ax = _seq_axis(x)
    if x.shape[ax] != len(perm):
        raise ShapeError(f"permutation length {len(perm)} != sequence length {x.shape[ax]}")
    return T.gather(x, perm.order, axis=ax)


def revert_path(x: Tensor, perm: Permutation) -> Tensor:
    ax = _seq_axis(x)
    if x.shape[ax] != len(perm):
        raise ShapeError(f"permutation length {len(perm)} != sequence length {x.shape[ax]}")
    return T.gather(x, perm.inverse, axis=ax)


@dataclass(frozen=True)
class BlockConfig:
    mixer: MixerConfig
    paths: tuple[str, ...] = ("forward", "reverse", "shuffle")
    fusion: str = "gate"  # "gate" or "mean"
    pre_norm: bool = True

    def __post_init__(self):
        kinds = [PathKind.parse(p) for p in self.paths]
        if not kinds or len(set(kinds)) != len(kinds):
            raise ValueError(f"paths must be a non-empty set of distinct kinds, got {self.paths}")
        if self.fusion not in ("gate", "mean"):
            raise ValueError(f"unknown fusion {self.fusion!r}")

    @property
    def kinds(self) -> tuple[PathKind, ...]:
        return tuple(PathKind.parse(p) for p in self.paths)

    @property
    def gated(self) -> bool:
        return self.fusion == "gate" and len(self.paths) > 1


@dataclass
class BlockParams:
    mixer: MixerParams
    gate_w: Tensor | None = None  # (P*d, P)
    gate_b: Tensor | None = None  # (P,)
    norm_w: Tensor | None = None
    norm_b: Tensor | None = None

    def named_parameters(self, prefix: str = ""):
        if self.norm_w is not None:
            yield prefix + "norm_w", self.norm_w
            yield prefix + "norm_b", self.norm_b
        yield from self.mixer.named_parameters(prefix + "mixer.")
        if self.gate_w is not None:
            yield prefix + "gate_w", self.gate_w
            yield prefix + "gate_b", self.gate_b


def init_block(cfg: BlockConfig, rng: np.random.Generator, dtype=np.float32) -> BlockParams:
    d = cfg.mixer.hidden_size
    P = len(cfg.paths)
    params = BlockParams(mixer=init_mixer(cfg.mixer, rng, dtype))
    if cfg.gated:
        bound = 1.0 / np.sqrt(P * d)
        params.gate_w = Tensor(rng.uniform(-bound, bound, (P * d, P)).astype(dtype), requires_grad=True)
        params.gate_b = Tensor(np.zeros(P, dtype), requires_grad=True)
    if cfg.pre_norm:
        params.norm_w = Tensor(np.ones(d, dtype), requires_grad=True)
        params.norm_b = Tensor(np.zeros(d, dtype), requires_grad=True)
    return params


def count_block_params(cfg: BlockConfig) -> int:
    d = cfg.mixer.hidden_size
    P = len(cfg.paths)
    n = count_mixer_params(cfg.mixer)
    if cfg.gated:
        n += P * d * P + P
    if cfg.pre_norm:
        n += 2 * d
    return n


def gate_weights(reverted: list[Tensor], gate_w: Tensor, gate_b: Tensor) -> Tensor:
    """softmax(gate_proj(mean_seq(concat_features(reverted)))).

    Each input is ``(L, d)`` or ``(batch, L, d)``; returns ``(P,)`` or ``(batch, P)``.
    """
    shapes = {x.shape for x in reverted}
    if len(shapes) != 1:
        raise ShapeError(f"gate inputs disagree in shape: {sorted(shapes)}")
    cat = T.concat(reverted, axis=-1)
    pooled = T.mean(cat, axis=-2)
    return T.softmax(T.linear(pooled, gate_w, gate_b), axis=-1)


def block_forward(
    x: Tensor,
    params: BlockParams,
    cfg: BlockConfig,
    shuffle_perm: Permutation | None = None,
) -> Tensor:
    """Multi-path block without the outer residual; ``x`` is ``(batch, L, d)`` or ``(L, d)``."""
    unbatched = x.ndim == 2
    if unbatched:
        x = x.reshape((1,) + x.shape)
    B, L, d = x.shape
    h = T.layer_norm(x, params.norm_w, params.norm_b) if cfg.pre_norm else x
    perms = [path_permutation(k, L, shuffle_perm) for k in cfg.kinds]

    # all paths share one mixer, so run them as a single stacked batch
    seqs = [h if p.is_identity else apply_path(h, p) for p in perms]
    stacked = seqs[0] if len(seqs) == 1 else T.concat(seqs, axis=0)
    mixed = mixer_forward(stacked, params.mixer, cfg.mixer)
    outs = [mixed] if len(seqs) == 1 else T.split(mixed, [B] * len(seqs), axis=0)
    reverted = [o if p.is_identity else revert_path(o, p) for o, p in zip(outs, perms)]

    if len(reverted) == 1:
        out = reverted[0]
    elif cfg.gated:
        g = gate_weights(reverted, params.gate_w, params.gate_b)  # (B, P)
        out = None
        for k, r in enumerate(reverted):
            gk = T.broadcast_to(T.slice_(g, -1, k, k + 1).reshape(B, 1, 1), (B, L, d))
            term = T.mul(gk, r)
            out = term if out is None else T.add(out, term)
    else:
        out = reverted[0]
        for r in reverted[1:]:
            out = T.add(out, r)
        out = T.mul(out, 1.0 / len(reverted))
    return out.reshape(out.shape[1:]) if unbatched else out
