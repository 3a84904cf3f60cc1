"""Image classifier: overlapping patch embedding, residual multi-path blocks, pooled head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import tensor as T
from .mixer import MixerConfig
from .multipath import BlockConfig, BlockParams, Permutation, block_forward, count_block_params, eval_shuffle, init_block
from .tensor import ShapeError, Tensor

PE_KINDS = ("none", "fourier", "learnable")
HEAD_KINDS = ("mean", "cls_head", "cls_tail", "cls_head_tail", "cls_middle")

# (blocks, hidden, intermediate, time-step rank, state size)
PRESETS = {
    "base": (24, 192, 384, 12, 16),
    "large": (36, 256, 512, 16, 16),
    "huge": (48, 320, 640, 20, 16),
}


@dataclass(frozen=True)
class ModelConfig:
    num_blocks: int = 2
    hidden_size: int = 16
    intermediate_size: int = 32
    time_step_rank: int = 2
    state_size: int = 4
    conv_width: int = 4
    height: int = 32
    width: int = 32
    in_channels: int = 3
    patch_kernel: int = 8
    patch_stride: int = 4
    num_classes: int = 8
    pe_kind: str = "learnable"
    head_kind: str = "mean"
    paths: tuple[str, ...] = ("forward", "reverse", "shuffle")
    fusion: str = "gate"
    pre_norm: bool = True
    simplified_b: bool = False
    preset: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "paths", tuple(self.paths))
        if self.pe_kind not in PE_KINDS:
            raise ValueError(f"pe_kind must be one of {PE_KINDS}, got {self.pe_kind!r}")
        if self.head_kind not in HEAD_KINDS:
            raise ValueError(f"head_kind must be one of {HEAD_KINDS}, got {self.head_kind!r}")
        k, s = self.patch_kernel, self.patch_stride
        if not (1 <= s <= k and k <= self.height and k <= self.width):
            raise ShapeError(
                f"invalid patch geometry: kernel {k}, stride {s}, image {self.height}x{self.width}"
            )
        if self.num_blocks < 0 or self.num_classes < 1:
            raise ValueError("num_blocks must be >= 0 and num_classes >= 1")
        if self.pe_kind == "fourier" and self.hidden_size % 4:
            raise ValueError("fourier encoding needs hidden_size divisible by 4")
        # validates paths/fusion too
        self.block_config()

    @property
    def grid(self) -> tuple[int, int]:
        k, s = self.patch_kernel, self.patch_stride
        return (self.height - k) // s + 1, (self.width - k) // s + 1

    @property
    def seq_len(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def num_cls_tokens(self) -> int:
        return {"mean": 0, "cls_head_tail": 2}.get(self.head_kind, 1)

    def mixer_config(self) -> MixerConfig:
        return MixerConfig(
            hidden_size=self.hidden_size,
            intermediate_size=self.intermediate_size,
            time_step_rank=self.time_step_rank,
            state_size=self.state_size,
            conv_width=self.conv_width,
            simplified_b=self.simplified_b,
        )

    def block_config(self) -> BlockConfig:
        return BlockConfig(self.mixer_config(), self.paths, self.fusion, self.pre_norm)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["paths"] = list(self.paths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def preset(name: str, num_classes: int = 30, image_size: int = 224, **overrides) -> ModelConfig:
    try:
        n, d, e, r, s = PRESETS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    base = ModelConfig(
        num_blocks=n, hidden_size=d, intermediate_size=e, time_step_rank=r, state_size=s,
        height=image_size, width=image_size, patch_kernel=16, patch_stride=8,
        num_classes=num_classes, preset=name.lower(),
    )
    return replace(base, **overrides)


@dataclass
class ModelParams:
    patch_w: Tensor  # (k, k, C_in, d)
    patch_b: Tensor  # (d,)
    blocks: list[BlockParams]
    norm_w: Tensor
    norm_b: Tensor
    head_w: Tensor  # (d, classes)
    head_b: Tensor
    pos: Tensor | None = None  # (L, d), learnable encoding only
    cls: Tensor | None = None  # (d,)

    def named_parameters(self):
        yield "patch_w", self.patch_w
        yield "patch_b", self.patch_b
        if self.pos is not None:
            yield "pos", self.pos
        if self.cls is not None:
            yield "cls", self.cls
        for i, b in enumerate(self.blocks):
            yield from b.named_parameters(f"blocks.{i}.")
        yield "norm_w", self.norm_w
        yield "norm_b", self.norm_b
        yield "head_w", self.head_w
        yield "head_b", self.head_b

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        """Copy arrays into the existing tensors; all-or-nothing."""
        named = dict(self.named_parameters())
        if set(named) != set(state):
            missing, extra = set(named) - set(state), set(state) - set(named)
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in named.items():
            if state[name].shape != p.shape:
                raise ShapeError(f"{name}: shape {state[name].shape} != {p.shape}")
        for name, p in named.items():
            p.data = np.array(state[name], dtype=p.dtype)

    def copy(self) -> "ModelParams":
        import copy

        return copy.deepcopy(self)


def init_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    rng = np.random.default_rng(seed)
    k, c, d = cfg.patch_kernel, cfg.in_channels, cfg.hidden_size

    def p(a):
        return Tensor(np.asarray(a, dtype=dtype), requires_grad=True)

    bound = 1.0 / np.sqrt(k * k * c)
    params = ModelParams(
        patch_w=p(rng.uniform(-bound, bound, (k, k, c, d))),
        patch_b=p(rng.uniform(-bound, bound, d)),
        blocks=[init_block(cfg.block_config(), rng, dtype) for _ in range(cfg.num_blocks)],
        norm_w=p(np.ones(d)),
        norm_b=p(np.zeros(d)),
        head_w=p(rng.uniform(-1 / np.sqrt(d), 1 / np.sqrt(d), (d, cfg.num_classes))),
        head_b=p(np.zeros(cfg.num_classes)),
    )
    if cfg.pe_kind == "learnable":
        params.pos = p(rng.normal(0.0, 0.02, (cfg.seq_len, d)))
    if cfg.num_cls_tokens:
        params.cls = p(rng.normal(0.0, 0.02, d))
    return params


def count_parameters(cfg: ModelConfig) -> int:
    k, c, d = cfg.patch_kernel, cfg.in_channels, cfg.hidden_size
    n = k * k * c * d + d
    if cfg.pe_kind == "learnable":
        n += cfg.seq_len * d
    if cfg.num_cls_tokens:
        n += d
    n += cfg.num_blocks * count_block_params(cfg.block_config())
    n += 2 * d + d * cfg.num_classes + cfg.num_classes
    return n


def fourier_encoding(grid_h: int, grid_w: int, d: int) -> np.ndarray:
    """Fixed 2-D sin/cos features, ``d/4`` frequency pairs per grid axis.

    Row ``r*grid_w + c`` holds ``[sin(r w_0), cos(r w_0), ..., sin(c w_0), cos(c w_0), ...]``
    with rates ``w_j = 1 / lambda_j`` and wavelengths ``lambda_j`` geometric from 1 to L.
    """
    if d % 4:
        raise ValueError("d must be divisible by 4")
    L = grid_h * grid_w
    m = d // 4
    lam = np.geomspace(1.0, max(L, 1), m) if m > 1 else np.ones(1)
    rates = 1.0 / lam
    rows, cols = np.divmod(np.arange(L), grid_w)

    def axis_feats(pos):
        ang = pos[:, None] * rates[None, :]
        out = np.empty((L, 2 * m))
        out[:, 0::2] = np.sin(ang)
        out[:, 1::2] = np.cos(ang)
        return out

    return np.concatenate([axis_feats(rows), axis_feats(cols)], axis=1)


def patch_embed(images: Tensor, weight: Tensor, bias: Tensor, stride: int) -> Tensor:
    """``(B, H, W, C)`` images to ``(B, L, d)`` tokens, grid flattened row-major."""
    if images.ndim != 4:
        raise ShapeError(f"expected (batch, H, W, C) images, got {images.shape}")
    if images.shape[-1] != weight.shape[2]:
        raise ShapeError(f"image has {images.shape[-1]} channels, conv expects {weight.shape[2]}")
    fmap = T.conv2d(images, weight, bias, stride=stride)
    B, gh, gw, d = fmap.shape
    return fmap.reshape(B, gh * gw, d)


def add_position_encoding(tokens: Tensor, cfg: ModelConfig, params: ModelParams) -> Tensor:
    L, d = tokens.shape[-2:]
    if L != cfg.seq_len:
        raise ShapeError(f"sequence length {L} does not match configured geometry ({cfg.seq_len})")
    if cfg.pe_kind == "none":
        return tokens
    if cfg.pe_kind == "learnable":
        if params.pos is None or params.pos.shape != (L, d):
            raise ShapeError(f"positional table {None if params.pos is None else params.pos.shape} != {(L, d)}")
        return T.add(tokens, params.pos)
    gh, gw = cfg.grid
    return T.add(tokens, Tensor(fourier_encoding(gh, gw, d), dtype=tokens.dtype))


def cls_positions(cfg: ModelConfig, L: int) -> list[int]:
    """Indices of class tokens in the final sequence of length ``L + num_cls_tokens``."""
    return {
        "cls_head": [0],
        "cls_tail": [L],
        "cls_middle": [L // 2],
        "cls_head_tail": [0, L + 1],
    }.get(cfg.head_kind, [])


def _insert_cls(x: Tensor, cls: Tensor, cfg: ModelConfig) -> Tensor:
    B, L, d = x.shape
    tok = T.broadcast_to(cls.reshape(1, 1, d), (B, 1, d))
    kind = cfg.head_kind
    if kind == "cls_head":
        return T.concat([tok, x], axis=1)
    if kind == "cls_tail":
        return T.concat([x, tok], axis=1)
    if kind == "cls_head_tail":
        return T.concat([tok, x, tok], axis=1)
    mid = L // 2
    parts = [tok] if mid == 0 else [T.slice_(x, 1, 0, mid), tok]
    return T.concat(parts + [T.slice_(x, 1, mid, L)], axis=1)


def model_forward(
    images,
    params: ModelParams,
    cfg: ModelConfig,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    eval_seed: int = 0,
) -> Tensor:
    """Logits ``(B, num_classes)`` for channels-last ``(B, H, W, C)`` images.

    In train mode each block draws a fresh shuffle from ``rng``; in eval mode
    the shuffle is fixed by ``(eval_seed, block index, L)``.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "train" and rng is None:
        raise ValueError("train mode needs an rng for the shuffle path")
    images = images if isinstance(images, Tensor) else Tensor(np.asarray(images), dtype=params.patch_w.dtype)
    if images.shape[1:] != (cfg.height, cfg.width, cfg.in_channels):
        raise ShapeError(
            f"images {images.shape[1:]} do not match configured {(cfg.height, cfg.width, cfg.in_channels)}"
        )
    x = patch_embed(images, params.patch_w, params.patch_b, cfg.patch_stride)
    x = add_position_encoding(x, cfg, params)
    L = x.shape[1]
    if cfg.num_cls_tokens:
        x = _insert_cls(x, params.cls, cfg)
    seq = x.shape[1]
    bcfg = cfg.block_config()
    needs_shuffle = "shuffle" in [p.lower() for p in cfg.paths]
    for i, bp in enumerate(params.blocks):
        perm = None
        if needs_shuffle:
            perm = Permutation.shuffled(seq, rng) if mode == "train" else eval_shuffle(eval_seed, i, seq)
        try:
            x = T.add(x, block_forward(x, bp, bcfg, perm))
        except FloatingPointError as exc:
            raise FloatingPointError(f"block {i}: {exc}") from exc
        if not np.all(np.isfinite(x.data)):
            raise FloatingPointError(f"non-finite activations after block {i}")

    if cfg.head_kind == "mean":
        feat = T.mean(x, axis=1)
    else:
        picks = [T.slice_(x, 1, j, j + 1).reshape(x.shape[0], x.shape[2]) for j in cls_positions(cfg, L)]
        feat = picks[0] if len(picks) == 1 else T.mul(T.add(picks[0], picks[1]), 0.5)
    feat = T.layer_norm(feat, params.norm_w, params.norm_b)
    return T.linear(feat, params.head_w, params.head_b)
