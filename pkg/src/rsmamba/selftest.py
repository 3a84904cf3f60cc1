"""Oracle checks run by ``rsmamba selftest``.

Each check returns ``(name, passed, detail)``; :func:`run_all` aggregates them.
"""

from __future__ import annotations

import math
import tempfile
import time
from pathlib import Path

import numpy as np

from . import tensor as T
from .mixer import MixerConfig, init_mixer, mixer_forward
from .model import ModelConfig, count_parameters, init_model, model_forward, preset
from .multipath import BlockConfig, Permutation, apply_path, block_forward, gate_weights, init_block, revert_path
from .ssm import LtiSystem, conv_apply, conv_kernel, recurrent_scan, selective_scan, zoh_discretize
from .train import cross_entropy

REFERENCE_PARAMS_M = {"base": 6.4, "large": 16.2, "huge": 33.1}
GRAD_TOL = 1e-4
FD_EPS = 1e-6


def random_diagonal_lti(rng: np.random.Generator, n: int) -> LtiSystem:
    return LtiSystem(
        A=-rng.uniform(0.05, 2.0, n),
        B=rng.normal(size=n),
        C=rng.normal(size=n),
        delta=float(np.exp(rng.uniform(np.log(1e-2), np.log(1.0)))),
    )


def lti_duality_error(num_systems: int = 100, seed: int = 0) -> float:
    """Max |recurrent - convolutional| over random diagonal systems (n <= 8, L <= 64)."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(num_systems):
        n = int(rng.integers(1, 9))
        L = int(rng.integers(1, 65))
        sys = random_diagonal_lti(rng, n)
        disc = zoh_discretize(sys)
        x = rng.normal(size=L)
        y_rec = recurrent_scan(disc, sys.C, x)
        y_conv = conv_apply(x, conv_kernel(disc, sys.C, L))
        worst = max(worst, float(np.max(np.abs(y_rec - y_conv))))
    return worst


def selective_reduction_error(num_cases: int = 50, seed: int = 1) -> float:
    """Selective scan with constant delta/B/C versus per-channel LTI recurrences."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(num_cases):
        L = int(rng.integers(1, 33))
        d = int(rng.integers(1, 5))
        n = int(rng.integers(1, 9))
        A = -rng.uniform(0.05, 2.0, (d, n))
        delta_c = np.exp(rng.uniform(np.log(1e-2), 0.0, d))
        Bv = rng.normal(size=n)
        Cv = rng.normal(size=n)
        D = rng.normal(size=d)
        u = rng.normal(size=(L, d))
        y = selective_scan(
            u, np.tile(delta_c, (L, 1)), A, np.tile(Bv, (L, 1)), np.tile(Cv, (L, 1)), D
        ).data
        for c in range(d):
            sys = LtiSystem(A[c], Bv, Cv, float(delta_c[c]))
            ref = recurrent_scan(zoh_discretize(sys), Cv, u[:, c]) + D[c] * u[:, c]
            worst = max(worst, float(np.max(np.abs(y[:, c] - ref))))
    return worst


def zoh_scalar_error() -> float:
    disc = zoh_discretize(LtiSystem(A=[-1.0], B=[1.0], C=[1.0], delta=math.log(2)))
    return float(max(abs(disc.A_bar[0] - 0.5), abs(disc.B_bar[0] - 0.5)))


# ---------------------------------------------------------------- gradient suite


def _positive(rng, shape):
    return rng.uniform(0.5, 2.0, shape)


def primitive_cases(rng: np.random.Generator):
    """``(name, f, inputs)`` triples covering every registered primitive."""
    n = rng.normal
    w_red = n(size=(3, 4))
    perm = np.array([2, 0, 3, 1])
    w_mm, w_cat, w_c2, w_c1 = n(size=(2, 3, 5)), n(size=(3, 6)), n(size=(2, 3, 3, 4)), n(size=(2, 5, 3))
    cases = [
        ("add", lambda a, b: T.sum_(T.mul(T.add(a, b), w_red)), [n(size=(3, 4)), n(size=(4,))]),
        ("sub", lambda a, b: T.sum_(T.mul(T.sub(a, b), w_red)), [n(size=(3, 4)), n(size=(3, 4))]),
        ("mul", lambda a, b: T.sum_(T.mul(a, b)), [n(size=(3, 4)), n(size=(4,))]),
        ("div", lambda a, b: T.sum_(T.div(a, b)), [n(size=(3, 4)), _positive(rng, (3, 4))]),
        ("neg", lambda a: T.sum_(T.mul(T.neg(a), w_red)), [n(size=(3, 4))]),
        ("exp", lambda a: T.sum_(T.exp(a)), [n(size=(3, 4))]),
        ("log", lambda a: T.sum_(T.log(a)), [_positive(rng, (3, 4))]),
        ("sigmoid", lambda a: T.sum_(T.mul(T.sigmoid(a), w_red)), [n(size=(3, 4))]),
        ("softplus", lambda a: T.sum_(T.mul(T.softplus(a), w_red)), [n(size=(3, 4))]),
        ("silu", lambda a: T.sum_(T.mul(T.silu(a), w_red)), [n(size=(3, 4))]),
        ("sum", lambda a: T.sum_(T.mul(T.sum_(a, axis=0), w_red[0])), [n(size=(3, 4))]),
        ("mean", lambda a: T.sum_(T.mul(T.mean(a, axis=1), w_red[:, 0])), [n(size=(3, 4))]),
        ("softmax", lambda a: T.sum_(T.mul(T.softmax(a, axis=-1), w_red)), [n(size=(3, 4))]),
        ("log_softmax", lambda a: T.sum_(T.mul(T.log_softmax(a, axis=0), w_red)), [n(size=(3, 4))]),
        ("layer_norm", lambda a, w, b: T.sum_(T.mul(T.layer_norm(a, w, b), w_red)),
         [n(size=(3, 4)), n(size=4), n(size=4)]),
        ("matmul", lambda a, b: T.sum_(T.mul(T.matmul(a, b), w_mm)), [n(size=(2, 3, 4)), n(size=(4, 5))]),
        ("reshape", lambda a: T.sum_(T.mul(T.reshape(a, (4, 3)), w_red.T)), [n(size=(3, 4))]),
        ("transpose", lambda a: T.sum_(T.mul(T.transpose(a), w_red.T)), [n(size=(3, 4))]),
        ("broadcast_to", lambda a: T.sum_(T.mul(T.broadcast_to(a, (3, 4)), w_red)), [n(size=(3, 1))]),
        ("slice", lambda a: T.sum_(T.mul(T.slice_(a, 1, 1, 3), w_red[:, :2])), [n(size=(3, 4))]),
        ("concat", lambda a, b: T.sum_(T.mul(T.concat([a, b], axis=-1), w_cat)),
         [n(size=(3, 4)), n(size=(3, 2))]),
        ("gather", lambda a: T.sum_(T.mul(T.gather(a, perm, axis=1), w_red)), [n(size=(3, 4))]),
        ("conv2d", lambda x, w, b: T.sum_(T.mul(T.conv2d(x, w, b, stride=2), w_c2)),
         [n(size=(2, 7, 7, 3)), n(size=(3, 3, 3, 4)), n(size=4)]),
        ("causal_conv1d", lambda x, w, b: T.sum_(T.mul(T.causal_conv1d(x, w, b), w_c1)),
         [n(size=(2, 5, 3)), n(size=(3, 4)), n(size=3)]),
    ]
    L, d, s = 5, 3, 2
    wy = n(size=(2, L, d))
    for simplified in (False, True):
        cases.append((
            "selective_scan" + ("[simplified_b]" if simplified else ""),
            lambda u, dl, a, b, c, dd, simplified=simplified: T.sum_(T.mul(
                selective_scan(u, T.softplus(dl), T.neg(T.exp(a)), b, c, dd, simplified_b=simplified), wy)),
            [n(size=(2, L, d)), n(size=(2, L, d)), n(size=(d, s)) * 0.5, n(size=(2, L, s)), n(size=(2, L, s)), n(size=d)],
        ))
    return cases


def _params_loss_errors(named, loss_fn) -> float:
    """Tape vs central differences for every element of every tensor in ``named``."""
    with T.Tape() as tape:
        loss = loss_fn()
    grads = T.backward(tape, loss, [p for _, p in named])
    worst = 0.0
    for _, p in named:
        base = p.data.copy()
        num = np.empty(base.size)
        for i in range(base.size):
            vals = []
            for sgn in (1.0, -1.0):
                pert = base.copy().reshape(-1)
                pert[i] += sgn * FD_EPS
                p.data = pert.reshape(base.shape)
                vals.append(loss_fn().item())
            num[i] = (vals[0] - vals[1]) / (2 * FD_EPS)
        p.data = base
        worst = max(worst, T.grad_rel_error(grads[p].data.reshape(-1), num))
    return worst


def mixer_grad_error(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    cfg = MixerConfig(hidden_size=8, intermediate_size=8, time_step_rank=2, state_size=3, conv_width=3)
    params = init_mixer(cfg, rng, np.float64)
    x = T.Tensor(rng.normal(size=(1, 6, 8)), requires_grad=True)
    w = rng.normal(size=(1, 6, 8))
    named = list(params.named_parameters()) + [("x", x)]
    return _params_loss_errors(named, lambda: T.sum_(T.mul(mixer_forward(x, params, cfg), w)))


def block_grad_error(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    mcfg = MixerConfig(hidden_size=8, intermediate_size=8, time_step_rank=2, state_size=3, conv_width=3)
    cfg = BlockConfig(mcfg)
    params = init_block(cfg, rng, np.float64)
    params.gate_w.data = rng.normal(size=params.gate_w.shape)
    x = T.Tensor(rng.normal(size=(2, 6, 8)), requires_grad=True)
    w = rng.normal(size=(2, 6, 8))
    perm = Permutation.shuffled(6, rng)
    named = list(params.named_parameters()) + [("x", x)]
    return _params_loss_errors(named, lambda: T.sum_(T.mul(block_forward(x, params, cfg, perm), w)))


def tiny_model_config(**overrides) -> ModelConfig:
    """N=2, d=16, L=9 (12x12 images, kernel 4, stride 4), 3 classes."""
    base = dict(num_blocks=2, hidden_size=16, intermediate_size=32, time_step_rank=2, state_size=4,
                height=12, width=12, patch_kernel=4, patch_stride=4, num_classes=3)
    base.update(overrides)
    return ModelConfig(**base)


def model_grad_error(seed: int = 0, max_per_tensor: int | None = None) -> float:
    cfg = tiny_model_config()
    params = init_model(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    images = rng.normal(size=(2, 12, 12, 3))
    labels = np.array([0, 2])
    named = list(params.named_parameters())
    if max_per_tensor is not None:
        # probe a fixed random subset of entries in large tensors via a masked view
        return _subset_grad_error(named, lambda: cross_entropy(model_forward(images, params, cfg), labels),
                                  rng, max_per_tensor)
    return _params_loss_errors(named, lambda: cross_entropy(model_forward(images, params, cfg), labels))


def _subset_grad_error(named, loss_fn, rng, k) -> float:
    with T.Tape() as tape:
        loss = loss_fn()
    grads = T.backward(tape, loss, [p for _, p in named])
    worst = 0.0
    for _, p in named:
        base = p.data.copy()
        idx = rng.choice(base.size, size=min(k, base.size), replace=False)
        for i in idx:
            vals = []
            for sgn in (1.0, -1.0):
                pert = base.copy().reshape(-1)
                pert[i] += sgn * FD_EPS
                p.data = pert.reshape(base.shape)
                vals.append(loss_fn().item())
            num = (vals[0] - vals[1]) / (2 * FD_EPS)
            worst = max(worst, T.grad_rel_error(grads[p].data.reshape(-1)[i], num))
        p.data = base
    return worst


def primitive_grad_errors(seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    return {name: max(T.check_gradients(f, inputs, FD_EPS)) for name, f, inputs in primitive_cases(rng)}


# ---------------------------------------------------------------- structural checks


def param_counts(num_classes: int = 30) -> dict[str, tuple[int, float]]:
    """``{preset: (count, relative deviation from the published size)}``."""
    out = {}
    for name, ref in REFERENCE_PARAMS_M.items():
        c = count_parameters(preset(name, num_classes=num_classes))
        out[name] = (c, c / (ref * 1e6) - 1.0)
    return out


def multipath_invariant_failures(trials: int = 25, seed: int = 0) -> list[str]:
    rng = np.random.default_rng(seed)
    failures = []
    for trial in range(trials):
        L = int(rng.integers(1, 257))
        x = T.Tensor(rng.normal(size=(L, 3)))
        perms = [Permutation.identity(L), Permutation.reversed(L), Permutation.shuffled(L, rng)]
        for p in perms:
            if not np.array_equal(revert_path(apply_path(x, p), p).data, x.data):
                failures.append(f"round-trip L={L}")
        seqs = [T.Tensor(rng.normal(size=(L, 4))) for _ in range(3)]
        g = gate_weights(seqs, T.Tensor(rng.normal(size=(12, 3)) * 3), T.Tensor(rng.normal(size=3)))
        if abs(g.data.sum() - 1.0) > 1e-12 or np.any(g.data <= 0) or np.any(g.data >= 1):
            failures.append(f"gate simplex L={L}")

    mcfg = MixerConfig(hidden_size=8, intermediate_size=16, time_step_rank=2, state_size=4)
    cfg = BlockConfig(mcfg, pre_norm=False)
    for trial in range(5):
        params = init_block(cfg, rng, np.float64)
        L = int(rng.integers(2, 20))
        x = T.Tensor(rng.normal(size=(2, L, 8)))
        params.gate_w.data = np.zeros_like(params.gate_w.data)
        params.gate_b.data = np.array([1e3, 0.0, 0.0])
        out = block_forward(x, params, cfg, Permutation.shuffled(L, rng))
        ref = mixer_forward(x, params.mixer, mcfg)
        if np.max(np.abs(out.data - ref.data)) > 1e-12:
            failures.append(f"forced gate L={L}")
        params.gate_w.data = rng.normal(size=params.gate_w.shape)
        params.gate_b.data = rng.normal(size=3)
        x1 = T.Tensor(rng.normal(size=(2, 1, 8)))
        out1 = block_forward(x1, params, cfg, Permutation.identity(1))
        ref1 = mixer_forward(x1, params.mixer, mcfg)
        if np.max(np.abs(out1.data - ref1.data)) > 1e-12:
            failures.append("L=1 collapse")
    return failures


def checkpoint_roundtrip_ok() -> bool:
    from .io import load_checkpoint, save_checkpoint

    cfg = tiny_model_config()
    params = init_model(cfg, seed=3)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "tiny.rsmb"
        save_checkpoint(params, cfg, path)
        loaded, cfg2, _ = load_checkpoint(path)
    a, b = params.state_dict(), loaded.state_dict()
    return cfg2 == cfg and a.keys() == b.keys() and all(
        a[k].dtype == b[k].dtype and a[k].tobytes() == b[k].tobytes() for k in a
    )


def run_all(verbose=print) -> bool:
    results = []

    def record(name, ok, detail):
        results.append(ok)
        verbose(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")

    t0 = time.perf_counter()
    err = lti_duality_error()
    record("lti duality (100 systems)", err <= 1e-10, f"max err {err:.2e} in {time.perf_counter() - t0:.2f}s")
    err = selective_reduction_error()
    record("selective scan LTI reduction (50 cases)", err <= 1e-10, f"max err {err:.2e}")
    errs = primitive_grad_errors()
    worst = max(errs, key=errs.get)
    record("primitive gradients", errs[worst] <= GRAD_TOL, f"worst {worst} {errs[worst]:.2e}")
    err = mixer_grad_error()
    record("mixer gradient", err <= GRAD_TOL, f"rel err {err:.2e}")
    err = block_grad_error()
    record("multi-path block gradient", err <= GRAD_TOL, f"rel err {err:.2e}")
    err = model_grad_error(max_per_tensor=8)
    record("tiny model gradient (sampled)", err <= GRAD_TOL, f"rel err {err:.2e}")
    err = zoh_scalar_error()
    record("zoh scalar closed form", err <= 1e-12, f"err {err:.2e}")
    for name, (count, dev) in param_counts().items():
        record(f"params {name}", abs(dev) <= 0.15, f"{count:,} ({100 * dev:+.1f}% vs {REFERENCE_PARAMS_M[name]}M)")
    geo = (preset("base").seq_len, preset("base", patch_stride=16).seq_len)
    record("geometry", geo == (729, 196), f"L = {geo}")
    fails = multipath_invariant_failures()
    record("multi-path invariants", not fails, "ok" if not fails else "; ".join(fails[:5]))
    record("checkpoint round-trip", checkpoint_roundtrip_ok(), "bitwise")
    return all(results)
