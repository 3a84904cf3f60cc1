"""Command-line entry point: ``rsmamba <command> [--key value ...]``.

``--config FILE`` reads flat ``key = value`` lines whose keys mirror the flag
names; flags given on the command line override file values.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .io import load_checkpoint, read_dataset, save_checkpoint, write_dataset
from .model import ModelConfig, count_parameters, preset
from .train import (
    ABLATION_SUITES,
    AblationSetup,
    Dataset,
    SyntheticSpec,
    TrainConfig,
    TrainingDiverged,
    evaluate,
    normalize,
    predict,
    run_ablation,
    synthetic_arrays,
    train,
)

log = logging.getLogger("rsmamba")


def _bool(s: str) -> bool:
    if isinstance(s, bool):
        return s
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {s!r}")


def _paths(s: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in s.split(",") if p.strip())


def read_config_file(path) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.lstrip("-").replace("-", "_")] = v
    return out


# ---------------------------------------------------------------- argument groups


def _model_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--preset", choices=["base", "large", "huge", "custom"], default="custom")
    g.add_argument("--blocks", type=int, default=2)
    g.add_argument("--hidden", type=int, default=16)
    g.add_argument("--intermediate", type=int, default=None, help="default: 2 x hidden")
    g.add_argument("--tsr", type=int, default=None, help="time-step rank; default: ceil(hidden / 16)")
    g.add_argument("--state", type=int, default=None, help="SSM state size; default: 16 (presets) or 4")
    g.add_argument("--image-size", type=int, default=None, help="default: 224 (presets) or 32")
    g.add_argument("--kernel", type=int, default=None)
    g.add_argument("--stride", type=int, default=None)
    g.add_argument("--classes", type=int, default=8)
    g.add_argument("--pe", choices=["none", "fourier", "learnable"], default="learnable")
    g.add_argument("--head", choices=["mean", "cls_head", "cls_tail", "cls_head_tail", "cls_middle"], default="mean")
    g.add_argument("--paths", type=_paths, default=("forward", "reverse", "shuffle"))
    g.add_argument("--fusion", choices=["gate", "mean"], default="gate")
    g.add_argument("--pre-norm", type=_bool, default=True)
    g.add_argument("--simplified-b", type=_bool, default=False)


def model_config_from_args(a) -> ModelConfig:
    common = dict(
        num_classes=a.classes, pe_kind=a.pe, head_kind=a.head, paths=a.paths, fusion=a.fusion,
        pre_norm=a.pre_norm, simplified_b=a.simplified_b,
    )
    if a.preset != "custom":
        over = {k: v for k, v in (("patch_kernel", a.kernel), ("patch_stride", a.stride), ("state_size", a.state)) if v}
        return preset(a.preset, image_size=a.image_size or 224, **common, **over)
    hidden = a.hidden
    size = a.image_size or 32
    return ModelConfig(
        num_blocks=a.blocks,
        hidden_size=hidden,
        intermediate_size=a.intermediate or 2 * hidden,
        time_step_rank=a.tsr or max(1, -(-hidden // 16)),
        state_size=a.state or 4,
        height=size,
        width=size,
        patch_kernel=a.kernel or 8,
        patch_stride=a.stride or 4,
        **common,
    )


def _train_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--lr", type=float, default=5e-4)
    g.add_argument("--weight-decay", type=float, default=0.05)
    g.add_argument("--epochs", type=int, default=20)
    g.add_argument("--batch-size", type=int, default=32)
    g.add_argument("--warmup-frac", type=float, default=0.05)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--eval-seed", type=int, default=0)
    g.add_argument("--crop-pad", type=int, default=0)
    g.add_argument("--hflip", type=_bool, default=False)
    g.add_argument("--vflip", type=_bool, default=False)


def train_config_from_args(a) -> TrainConfig:
    return TrainConfig(
        lr=a.lr, weight_decay=a.weight_decay, epochs=a.epochs, batch_size=a.batch_size,
        warmup_frac=a.warmup_frac, seed=a.seed, eval_seed=a.eval_seed, crop_pad=a.crop_pad,
        hflip=a.hflip, vflip=a.vflip,
    )


def _synth_args(p: argparse.ArgumentParser, per_class: int = 32) -> None:
    g = p.add_argument_group("synthetic data (used when no --data index is given)")
    g.add_argument("--per-class", type=int, default=per_class)
    g.add_argument("--sigma", type=float, default=0.5)
    g.add_argument("--synth-seed", type=int, default=0)


def _synth_spec(a, size: int, classes: int, seed_offset: int = 0) -> SyntheticSpec:
    return SyntheticSpec(num_classes=classes, samples_per_class=a.per_class, size=size, sigma=a.sigma,
                         seed=a.synth_seed + seed_offset)


def _load_data(a, cfg: ModelConfig, index, seed_offset: int):
    if index:
        x, y = read_dataset(index, cfg.num_classes)
        return Dataset(x, y, cfg.num_classes), {"index": str(index)}
    if cfg.height != cfg.width:
        raise SystemExit("synthetic data needs square images")
    spec = _synth_spec(a, cfg.height, cfg.num_classes, seed_offset)
    return Dataset.synthetic(spec), {"synthetic": asdict(spec)}


def write_manifest(out_dir: Path, command: str, argv: list[str], **payload) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": argv,
        "package_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        **payload,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_json_default))
    return path


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(type(o))


# ---------------------------------------------------------------- commands


def cmd_params(a) -> int:
    cfg = model_config_from_args(a)
    n = count_parameters(cfg)
    print(f"{cfg.preset}\tL={cfg.seq_len}\tparams={n}\t({n / 1e6:.2f}M)")
    return 0


def cmd_gen_synth(a) -> int:
    spec = SyntheticSpec(num_classes=a.classes, samples_per_class=a.per_class, size=a.image_size or 32,
                         sigma=a.sigma, seed=a.synth_seed)
    x, y = synthetic_arrays(spec)
    out = Path(a.out)
    index = write_dataset(out, x, y)
    write_manifest(out, "gen-synth", a.argv, synthetic=asdict(spec))
    print(index)
    return 0


def cmd_train(a) -> int:
    mcfg = model_config_from_args(a)
    tcfg = train_config_from_args(a)
    train_set, train_src = _load_data(a, mcfg, a.data, 0)
    val_set, val_src = (None, None)
    if a.val_data or not a.data:
        val_set, val_src = _load_data(a, mcfg, a.val_data, 500)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        res = train(mcfg, tcfg, train_set, val_set)
        params, history, status = res.params, res.history, "ok"
        norm = (res.norm_mean, res.norm_std)
    except TrainingDiverged as exc:
        log.error("training diverged: %s", exc)
        params, history, status = exc.last_good, exc.history, f"diverged: {exc}"
        norm = train_set.channel_stats()
    header = {"norm_mean": norm[0].tolist(), "norm_std": norm[1].tolist(), "seed": tcfg.seed,
              "train_config": tcfg.to_dict()}
    save_checkpoint(params, mcfg, out / "checkpoint.rsmb", header)
    (out / "history.json").write_text(json.dumps(history, indent=2))
    warmup, total = tcfg.schedule(len(train_set))
    write_manifest(out, "train", a.argv, model_config=mcfg.to_dict(), train_config=tcfg.to_dict(),
                   train_data=train_src, val_data=val_src, warmup_steps=warmup, total_steps=total, status=status)
    if history:
        print(json.dumps(history[-1]))
    return 0 if status == "ok" else 2


def _checkpoint_eval_inputs(a):
    params, cfg, header = load_checkpoint(a.checkpoint)
    data, src = _load_data(a, cfg, a.data, 500)
    mean = np.asarray(header.get("norm_mean", data.channel_stats()[0]))
    std = np.asarray(header.get("norm_std", data.channel_stats()[1]))
    x = normalize(data.images, mean, std, params.patch_w.dtype)
    return params, cfg, data, x, src


def cmd_eval(a) -> int:
    params, cfg, data, x, src = _checkpoint_eval_inputs(a)
    rep = evaluate(params, cfg, x, data.labels, a.eval_seed)
    print(rep.format())
    out = Path(a.out)
    (out / "metrics.json").parent.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(rep.to_dict(), indent=2))
    write_manifest(out, "eval", a.argv, checkpoint=str(a.checkpoint), data=src, eval_seed=a.eval_seed)
    return 0


def cmd_predict(a) -> int:
    params, cfg, data, x, src = _checkpoint_eval_inputs(a)
    preds = predict(params, cfg, x, eval_seed=a.eval_seed)
    lines = [f"{i}\t{int(p)}" for i, p in enumerate(preds)]
    print("\n".join(lines))
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "predictions.tsv").write_text("\n".join(lines) + "\n")
    write_manifest(out, "predict", a.argv, checkpoint=str(a.checkpoint), data=src, eval_seed=a.eval_seed)
    return 0


def cmd_ablate(a) -> int:
    default = AblationSetup()
    mcfg = model_config_from_args(a)
    setup = AblationSetup(
        model=mcfg,
        train=replace(train_config_from_args(a), eval_train=False),
        data=SyntheticSpec(num_classes=mcfg.num_classes, samples_per_class=a.per_class, size=mcfg.height,
                           sigma=a.sigma),
        seeds=tuple(range(a.repeats)) if a.repeats else default.seeds,
    )
    rows = [r.strip() for r in a.rows.split(",")] if a.rows else None
    table = run_ablation(a.suite, setup, seed=a.seed, rows=rows)
    print(table.format())
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"ablation_{a.suite}.json").write_text(json.dumps(table.to_dict(), indent=2))
    write_manifest(out, "ablate", a.argv, suite=a.suite, seed=a.seed, model_config=mcfg.to_dict(),
                   train_config=setup.train.to_dict(), data=asdict(setup.data), seeds=list(setup.seeds))
    return 0


def cmd_selftest(a) -> int:
    from .selftest import run_all

    return 0 if run_all() else 1


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rsmamba", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help, description=help)
        sp.add_argument("--config", help="flat key = value file; flags override it")
        sp.add_argument("-v", "--verbose", action="store_true")
        sp.set_defaults(func=fn)
        return sp

    sp = add("params", cmd_params, "print the learnable parameter count of a configuration")
    _model_args(sp)

    sp = add("gen-synth", cmd_gen_synth, "write a synthetic grating dataset in raw-tensor format")
    sp.add_argument("--out", required=True)
    sp.add_argument("--classes", type=int, default=8)
    sp.add_argument("--image-size", type=int, default=32)
    _synth_args(sp)

    sp = add("train", cmd_train, "train a model and write checkpoint, history and manifest")
    _model_args(sp)
    _train_args(sp)
    _synth_args(sp)
    sp.add_argument("--data", help="training index file; synthetic data when omitted")
    sp.add_argument("--val-data", help="validation index file")
    sp.add_argument("--out", default="runs/train")

    for name, fn, help in (("eval", cmd_eval, "evaluate a checkpoint and print a metrics report"),
                           ("predict", cmd_predict, "print the predicted class of every sample")):
        sp = add(name, fn, help)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--data", help="index file; synthetic validation data when omitted")
        sp.add_argument("--eval-seed", type=int, default=0)
        sp.add_argument("--out", default=f"runs/{name}")
        _synth_args(sp)

    sp = add("ablate", cmd_ablate, "run an ablation suite on synthetic data")
    sp.add_argument("--suite", required=True, choices=sorted(ABLATION_SUITES) + ["tokens"])
    sp.add_argument("--repeats", type=int, default=0, help="number of seeds to average (default 3)")
    sp.add_argument("--rows", help="comma-separated subset of row labels to run")
    sp.add_argument("--out", default="runs/ablate")
    _model_args(sp)
    _train_args(sp)
    _synth_args(sp, per_class=200)
    sp.set_defaults(epochs=12, lr=3e-3, sigma=6.5)

    add("selftest", cmd_selftest, "run the oracle suites; nonzero exit on any failure")
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        values = read_config_file(args.config)
        sp = parser._subparsers._group_actions[0].choices[args.command]
        known = {act.dest for act in sp._actions}
        unknown = set(values) - known
        if unknown:
            parser.error(f"unknown keys in {args.config}: {sorted(unknown)}")
        sp.set_defaults(**values)
        args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
