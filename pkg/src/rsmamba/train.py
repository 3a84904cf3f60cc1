"""Loss, AdamW, LR schedule, metrics, synthetic data and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .model import ModelConfig, ModelParams, init_model, model_forward
from .tensor import Tape, Tensor, backward

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- loss


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.intp)
    B, C = logits.shape
    if labels.shape != (B,):
        raise T.ShapeError(f"labels shape {labels.shape} != ({B},)")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"labels must lie in [0, {C})")
    onehot = np.zeros((B, C), dtype=logits.dtype)
    onehot[np.arange(B), labels] = 1
    picked = T.sum_(T.mul(T.log_softmax(logits, axis=-1), onehot), axis=-1)
    return T.neg(T.mean(picked))


# ---------------------------------------------------------------- optimiser


def adamw_step(param, grad, m, v, t, lr, weight_decay=0.05, betas=(0.9, 0.999), eps=1e-8):
    """One decoupled-weight-decay Adam update; returns ``(param, m, v)``."""
    if t < 1:
        raise ValueError("step counter t starts at 1")
    b1, b2 = betas
    param = param - lr * weight_decay * param
    m = b1 * m + (1 - b1) * grad
    v = b2 * v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    param = param - lr * m_hat / (np.sqrt(v_hat) + eps)
    return param, m, v


def decays(name: str, p: Tensor) -> bool:
    # matrices only; A_log, norms, biases, positional and class tokens are exempt
    return p.ndim >= 2 and not name.endswith("A_log") and name != "pos"


class AdamW:
    """Stateful wrapper over :func:`adamw_step`. It is the only writer of parameter data."""

    def __init__(self, named_params, weight_decay=0.05, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(named_params)
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}
        self.skipped = 0

    def step(self, grads: dict[Tensor, Tensor], lr: float) -> bool:
        """Apply one update; returns False (and changes nothing) on non-finite grads."""
        gs = [grads[p].data if p in grads else np.zeros_like(p.data) for _, p in self.params]
        if not all(np.all(np.isfinite(g)) for g in gs):
            self.skipped += 1
            log.warning("non-finite gradient; step skipped")
            return False
        self.t += 1
        for (name, p), g in zip(self.params, gs):
            wd = self.weight_decay if decays(name, p) else 0.0
            new, self.m[name], self.v[name] = adamw_step(
                p.data, g, self.m[name], self.v[name], self.t, lr, wd, self.betas, self.eps
            )
            p.data = new.astype(p.dtype, copy=False)
        return True


def cosine_warmup_lr(step: int, warmup_steps: int, total_steps: int, lr0: float) -> float:
    """Linear ramp 0 -> lr0 over warmup, then half-cosine down to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps > 0 and step < warmup_steps:
        return lr0 * step / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return lr0
    progress = (step - warmup_steps) / span
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------- metrics


@dataclass
class MetricsReport:
    confusion: np.ndarray  # (C, C), rows = true class, cols = predicted
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    present: np.ndarray  # classes seen in labels or predictions
    macro_precision: float
    macro_recall: float
    macro_f1: float
    accuracy: float

    def to_dict(self) -> dict:
        return {
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "accuracy": self.accuracy,
            "precision": self.precision.tolist(),
            "recall": self.recall.tolist(),
            "f1": self.f1.tolist(),
            "present": self.present.tolist(),
            "confusion": self.confusion.tolist(),
        }

    def format(self) -> str:
        lines = [
            f"accuracy        {self.accuracy:.4f}",
            f"macro_precision {self.macro_precision:.4f}",
            f"macro_recall    {self.macro_recall:.4f}",
            f"macro_f1        {self.macro_f1:.4f}",
            "class  support  precision  recall  f1",
        ]
        for c in range(len(self.f1)):
            lines.append(
                f"{c:5d}  {int(self.confusion[c].sum()):7d}  {self.precision[c]:9.4f}  {self.recall[c]:6.4f}  {self.f1[c]:.4f}"
            )
        lines.append("confusion (rows=true, cols=pred)")
        lines.extend(" ".join(f"{n:4d}" for n in row) for row in self.confusion)
        return "\n".join(lines)


def _safe_div(a, b):
    return np.divide(a, b, out=np.zeros_like(a, dtype=np.float64), where=b > 0)


def macro_prf1(preds, labels, num_classes: int) -> MetricsReport:
    """Per-class and macro precision/recall/F1.

    A zero denominator gives 0; classes absent from both ``preds`` and
    ``labels`` are left out of the macro means.
    """
    preds = np.asarray(preds, dtype=np.intp)
    labels = np.asarray(labels, dtype=np.intp)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise ValueError("preds and labels must be 1-D and equally long")
    if preds.size == 0:
        raise ValueError("no predictions")
    for arr in (preds, labels):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise ValueError(f"class ids must lie in [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    tp = np.diag(cm).astype(np.float64)
    pred_count = cm.sum(axis=0).astype(np.float64)
    true_count = cm.sum(axis=1).astype(np.float64)
    p = _safe_div(tp, pred_count)
    r = _safe_div(tp, true_count)
    f1 = _safe_div(2 * p * r, p + r)
    present = (pred_count + true_count) > 0
    return MetricsReport(
        confusion=cm,
        precision=p,
        recall=r,
        f1=f1,
        present=present,
        macro_precision=float(p[present].mean()),
        macro_recall=float(r[present].mean()),
        macro_f1=float(f1[present].mean()),
        accuracy=float(tp.sum() / preds.size),
    )


# ---------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    """Class-conditioned sinusoid gratings plus Gaussian noise.

    Class ``c`` owns an integer wavevector: orientation ``pi*c/C`` and a radius
    alternating between ``radius`` and ``radius + radius_step``. The phase is
    random per sample, so a single linear filter cannot read the class off.
    """

    num_classes: int = 8
    samples_per_class: int = 32
    size: int = 32
    sigma: float = 0.0
    amplitude: float = 1.0
    radius: float = 4.0
    radius_step: float = 2.0
    channels: int = 3
    seed: int = 0

    def __post_init__(self):
        kv = self.wavevectors()
        if len({tuple(k) for k in kv.tolist()}) != self.num_classes:
            raise ValueError("class wavevectors collide; change radius or num_classes")

    @property
    def num_samples(self) -> int:
        return self.num_classes * self.samples_per_class

    def wavevectors(self) -> np.ndarray:
        c = np.arange(self.num_classes)
        theta = np.pi * c / self.num_classes
        r = self.radius + (c % 2) * self.radius_step
        return np.stack([np.rint(r * np.cos(theta)), np.rint(r * np.sin(theta))], axis=1).astype(int)


def generate_synthetic(spec: SyntheticSpec, index: int) -> tuple[np.ndarray, int]:
    """``(image (size, size, channels) float64, label)``, a pure function of ``(spec, index)``."""
    if not 0 <= index < spec.num_samples:
        raise IndexError(f"sample {index} outside [0, {spec.num_samples})")
    label = index % spec.num_classes
    rng = np.random.default_rng([spec.seed, index])
    kx, ky = spec.wavevectors()[label]
    yy, xx = np.mgrid[0 : spec.size, 0 : spec.size]
    phase = rng.uniform(0, 2 * np.pi)
    wave = spec.amplitude * np.cos(2 * np.pi * (kx * xx + ky * yy) / spec.size + phase)
    img = np.repeat(wave[:, :, None], spec.channels, axis=2)
    if spec.sigma > 0:
        img = img + rng.normal(0.0, spec.sigma, img.shape)
    return img, int(label)


def synthetic_arrays(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    pairs = [generate_synthetic(spec, i) for i in range(spec.num_samples)]
    return np.stack([p[0] for p in pairs]), np.array([p[1] for p in pairs])


def fourier_peak_classify(image: np.ndarray, spec: SyntheticSpec) -> int:
    """Class whose wavevector carries the most spectral power (the oracle classifier)."""
    spec2d = np.abs(np.fft.fft2(image.mean(axis=2))) ** 2
    kv = spec.wavevectors()
    power = spec2d[kv[:, 1] % spec.size, kv[:, 0] % spec.size]
    return int(np.argmax(power))


# ---------------------------------------------------------------- dataset plumbing


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, C)
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError("images must be (N, H, W, C) with one label each")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels out of range")

    def __len__(self) -> int:
        return len(self.labels)

    def channel_stats(self) -> tuple[np.ndarray, np.ndarray]:
        mean = self.images.mean(axis=(0, 1, 2))
        std = self.images.std(axis=(0, 1, 2))
        return mean, np.where(std > 0, std, 1.0)

    @classmethod
    def synthetic(cls, spec: SyntheticSpec) -> "Dataset":
        x, y = synthetic_arrays(spec)
        return cls(x, y, spec.num_classes)


def normalize(images: np.ndarray, mean, std, dtype=np.float32) -> np.ndarray:
    return ((images - np.asarray(mean)) / np.asarray(std)).astype(dtype)


def augment(images: np.ndarray, rng: np.random.Generator, crop_pad: int = 0, hflip: bool = False, vflip: bool = False):
    """Random crop (zero pad then crop back) and flips, per sample."""
    out = images.copy()
    N, H, W, _ = images.shape
    if crop_pad > 0:
        padded = np.pad(images, ((0, 0), (crop_pad, crop_pad), (crop_pad, crop_pad), (0, 0)))
        offs = rng.integers(0, 2 * crop_pad + 1, size=(N, 2))
        for i, (dy, dx) in enumerate(offs):
            out[i] = padded[i, dy : dy + H, dx : dx + W]
    if hflip:
        flip = rng.random(N) < 0.5
        out[flip] = out[flip, :, ::-1]
    if vflip:
        flip = rng.random(N) < 0.5
        out[flip] = out[flip, ::-1]
    return out


# ---------------------------------------------------------------- training loop


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    weight_decay: float = 0.05
    epochs: int = 20
    batch_size: int = 32
    warmup_frac: float = 0.05
    seed: int = 0
    eval_seed: int = 0
    crop_pad: int = 0
    hflip: bool = False
    vflip: bool = False
    eval_train: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.lr < 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("need lr >= 0, epochs >= 1, batch_size >= 1")
        if not 0 <= self.warmup_frac < 1:
            raise ValueError("warmup_frac must lie in [0, 1)")

    def steps_per_epoch(self, n: int) -> int:
        return -(-n // self.batch_size)

    def schedule(self, n: int) -> tuple[int, int]:
        total = self.epochs * self.steps_per_epoch(n)
        return int(self.warmup_frac * total), total

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, last_good: ModelParams, history: list):
        super().__init__(msg)
        self.last_good = last_good
        self.history = history


@dataclass
class TrainResult:
    params: ModelParams
    model_config: ModelConfig
    train_config: TrainConfig
    history: list[dict] = field(default_factory=list)
    norm_mean: np.ndarray | None = None
    norm_std: np.ndarray | None = None


def predict(params: ModelParams, cfg: ModelConfig, images: np.ndarray, batch_size: int = 64, eval_seed: int = 0):
    """Argmax class for already-normalised images, in eval mode."""
    preds = []
    for i in range(0, len(images), batch_size):
        logits = model_forward(images[i : i + batch_size], params, cfg, mode="eval", eval_seed=eval_seed)
        preds.append(np.argmax(logits.data, axis=-1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.intp)


def evaluate(params, cfg, images, labels, eval_seed: int = 0) -> MetricsReport:
    return macro_prf1(predict(params, cfg, images, eval_seed=eval_seed), labels, cfg.num_classes)


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    train_set: Dataset,
    val_set: Dataset | None = None,
    params: ModelParams | None = None,
) -> TrainResult:
    """Deterministic (given the seeds) mini-batch AdamW training."""
    if train_set.num_classes != model_cfg.num_classes:
        raise ValueError("dataset and model disagree on num_classes")
    dtype = np.dtype(train_cfg.dtype)
    mean, std = train_set.channel_stats()
    xtr = normalize(train_set.images, mean, std, dtype)
    xval = normalize(val_set.images, mean, std, dtype) if val_set is not None else None
    if params is None:
        params = init_model(model_cfg, seed=train_cfg.seed, dtype=dtype)
    opt = AdamW(params.named_parameters(), weight_decay=train_cfg.weight_decay)
    rng = np.random.default_rng([train_cfg.seed, 1])
    n = len(train_set)
    warmup, total = train_cfg.schedule(n)
    step = 0
    history: list[dict] = []
    last_good = params.copy()
    log.info("training %d samples, %d steps (warmup %d)", n, total, warmup)

    for epoch in range(train_cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for i in range(0, n, train_cfg.batch_size):
            idx = order[i : i + train_cfg.batch_size]
            xb = xtr[idx]
            if train_cfg.crop_pad or train_cfg.hflip or train_cfg.vflip:
                xb = augment(xb, rng, train_cfg.crop_pad, train_cfg.hflip, train_cfg.vflip)
            lr = cosine_warmup_lr(step, warmup, total, train_cfg.lr)
            try:
                with Tape() as tape:
                    loss = cross_entropy(model_forward(xb, params, model_cfg, mode="train", rng=rng), train_set.labels[idx])
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", last_good, history) from exc
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(f"epoch {epoch}: loss is {loss.item()}", last_good, history)
            grads = backward(tape, loss)
            opt.step(grads, lr)
            losses.append(loss.item())
            step += 1
        record = {"epoch": epoch, "loss": float(np.mean(losses)), "lr": lr, "skipped_steps": opt.skipped}
        if train_cfg.eval_train:
            rep = evaluate(params, model_cfg, xtr, train_set.labels, train_cfg.eval_seed)
            record.update(train_acc=rep.accuracy, train_f1=rep.macro_f1)
        if xval is not None:
            rep = evaluate(params, model_cfg, xval, val_set.labels, train_cfg.eval_seed)
            record.update(val_acc=rep.accuracy, val_precision=rep.macro_precision,
                          val_recall=rep.macro_recall, val_f1=rep.macro_f1)
        history.append(record)
        log.info("epoch %d %s", epoch, {k: round(v, 4) for k, v in record.items() if isinstance(v, float)})
        last_good = params.copy()
    return TrainResult(params, model_cfg, train_cfg, history, mean, std)


# ---------------------------------------------------------------- ablations


ABLATION_SUITES = {
    "head": [
        ("Head", dict(head_kind="cls_head")),
        ("Tail", dict(head_kind="cls_tail")),
        ("Head+Tail", dict(head_kind="cls_head_tail")),
        ("Middle", dict(head_kind="cls_middle")),
        ("Mean Pooling", dict(head_kind="mean")),
    ],
    "paths": [
        ("Forward / -", dict(paths=("forward",), fusion="gate")),
        ("Forward+Reverse / Mean", dict(paths=("forward", "reverse"), fusion="mean")),
        ("Forward+Reverse / Gate", dict(paths=("forward", "reverse"), fusion="gate")),
        ("Forward+Reverse+Shuffle / Gate", dict(paths=("forward", "reverse", "shuffle"), fusion="gate")),
    ],
    "pe": [
        ("PE None", dict(pe_kind="none")),
        ("PE Fourier", dict(pe_kind="fourier")),
        ("PE Learnable", dict(pe_kind="learnable")),
    ],
}


@dataclass(frozen=True)
class AblationSetup:
    """Shared budget for every row of an ablation suite."""

    model: ModelConfig = ModelConfig(num_blocks=2, hidden_size=16, intermediate_size=32, time_step_rank=1,
                                     state_size=4, height=32, width=32, patch_kernel=8, patch_stride=4)
    train: TrainConfig = TrainConfig(lr=3e-3, epochs=12, batch_size=32, eval_train=False)
    # sigma puts forward-only validation accuracy near 75% for this model and budget
    data: SyntheticSpec = SyntheticSpec(num_classes=8, samples_per_class=200, size=32, sigma=6.5)
    seeds: tuple[int, ...] = (0, 1, 2)


def _token_rows(setup: AblationSetup):
    s, k = setup.data.size, setup.model.patch_kernel
    big = s + s // 2
    return [
        (f"{s}px k={k} s={k}", dict(patch_stride=k), s),
        (f"{s}px k={k} s={k // 2}", dict(patch_stride=k // 2), s),
        (f"{big}px k={k} s={k // 2}", dict(patch_stride=k // 2, height=big, width=big), big),
    ]


@dataclass
class AblationRow:
    label: str
    precision: float
    recall: float
    f1: float
    accuracy: float
    per_seed_f1: list[float]


@dataclass
class AblationTable:
    suite: str
    rows: list[AblationRow]

    def format(self) -> str:
        w = max(len(r.label) for r in self.rows)
        out = [f"{'Design':<{w}}  {'P':>6}  {'R':>6}  {'F1':>6}  {'Acc':>6}"]
        for r in self.rows:
            out.append(f"{r.label:<{w}}  {100 * r.precision:6.2f}  {100 * r.recall:6.2f}  {100 * r.f1:6.2f}"
                       f"  {100 * r.accuracy:6.2f}")
        return "\n".join(out)

    def to_dict(self) -> dict:
        return {"suite": self.suite, "rows": [asdict(r) for r in self.rows]}


def run_ablation(
    suite: str,
    setup: AblationSetup = AblationSetup(),
    seed: int | None = None,
    rows: list[str] | None = None,
) -> AblationTable:
    """Train every variant of ``suite`` on the synthetic benchmark with matched seeds and budget.

    ``seed`` (if given) offsets all run seeds so whole tables are reproducible per seed.
    ``rows`` restricts the run to the listed row labels.
    """
    if suite == "tokens":
        variants = _token_rows(setup)
    elif suite in ABLATION_SUITES:
        variants = [(label, ov, setup.data.size) for label, ov in ABLATION_SUITES[suite]]
    else:
        raise ValueError(f"unknown suite {suite!r}; choose from {sorted(ABLATION_SUITES) + ['tokens']}")
    if rows is not None:
        unknown = set(rows) - {v[0] for v in variants}
        if unknown:
            raise ValueError(f"suite {suite!r} has no rows {sorted(unknown)}")
        variants = [v for v in variants if v[0] in rows]
    base_seed = 0 if seed is None else seed
    rows = []
    for label, overrides, size in variants:
        p, r, f, acc = [], [], [], []
        for s in setup.seeds:
            run_seed = base_seed * 1000 + s
            data = replace(setup.data, size=size, seed=run_seed)
            val = replace(data, seed=run_seed + 500)
            mcfg = replace(setup.model, **overrides)
            tcfg = replace(setup.train, seed=run_seed)
            res = train(mcfg, tcfg, Dataset.synthetic(data), Dataset.synthetic(val))
            last = res.history[-1]
            p.append(last["val_precision"])
            r.append(last["val_recall"])
            f.append(last["val_f1"])
            acc.append(last["val_acc"])
        rows.append(AblationRow(label, float(np.mean(p)), float(np.mean(r)), float(np.mean(f)),
                                float(np.mean(acc)), f))
        log.info("%s: F1 %.4f", label, rows[-1].f1)
    return AblationTable(suite, rows)
