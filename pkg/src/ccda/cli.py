"""Command line entry point: ``ccda {generate,train,eval,gradcheck,ablate}``.

Exit codes: 0 success, 2 validation error, 3 runtime failure (including failed checks).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .datagen import DatasetError, generate_pair, read_dataset, write_dataset
from .evaluation import evaluate, iou_report, rare_classes, run_ablation, write_report
from .nets import CheckpointError, build_from_checkpoint
from .trainer import ConfigError, run_lock, train

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("ccda")


class ChecksFailed(RuntimeError):
    pass


def _load_config(args):
    cfg, user = cfgmod.load(args.config)
    return cfgmod.with_overrides(
        cfg, user,
        seed=getattr(args, "seed", None),
        variant=getattr(args, "variant", None),
        iterations=getattr(args, "iterations", None),
        device=getattr(args, "device", None),
    )


def _write_resolved(out: Path, cfg, user) -> dict:
    res = cfgmod.resolved(cfg, user)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.json").write_text(json.dumps(res, indent=2, sort_keys=True) + "\n")
    return res


def cmd_generate(args) -> int:
    cfg, user = cfgmod.load(args.config)
    scene = cfg.scene
    if args.seed is not None:
        from dataclasses import replace
        scene = replace(scene, seed=args.seed)
        user = set(user) | {("scene", "seed")}
        cfg = replace(cfg, scene=scene)
    out = Path(args.out)
    stride = cfg.train.encoder.stride
    src, tgt = generate_pair(scene, cfg.shift, cfg.data.n_train, cfg.data.n_val,
                             stride=stride, workers=cfg.data.workers)
    with run_lock(out):
        paths = [write_dataset(src, out / "source"), write_dataset(tgt, out / "target")]
        _write_resolved(out, cfg, user)
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, user = _load_config(args)
    source = read_dataset(args.source, splits=["train"])
    target = read_dataset(args.target, withhold_labels=True, splits=["train"])
    resolved = cfgmod.resolved(cfg, user)
    run = train(cfg.train, source, target, args.out, resume=args.resume, resolved_config=resolved)
    print(run)
    return EXIT_OK


def cmd_eval(args) -> int:
    expected = {}
    if args.config is not None:
        cfg, _ = cfgmod.load(args.config)
        expected = dict(encoder_spec=cfg.train.encoder, disc_spec=cfg.train.disc_spec(cfg.scene.num_classes),
                        num_classes=cfg.scene.num_classes)
    seg, _, _ = build_from_checkpoint(args.checkpoint, **expected)
    ds = read_dataset(args.dataset)
    if args.split not in ds.splits:
        raise ConfigError(f"dataset has no split {args.split!r}")
    if ds.num_classes != seg.num_classes:
        raise ConfigError(f"checkpoint has {seg.num_classes} classes, dataset has {ds.num_classes}")
    report = iou_report(evaluate(seg, ds.splits[args.split], ds.num_classes))
    rare = None
    if "train" in ds.splits and all(s.labels is not None for s in ds.splits["train"]):
        rare = rare_classes(ds.class_pixel_counts("train"))
    write_report(report, args.out, rare=rare, plots=args.plots,
                 extra={"checkpoint": str(args.checkpoint), "split": args.split})
    per = " ".join("-" if v is None else f"{v:.3f}" for v in report.per_class)
    print(f"per-class IoU: {per}")
    print(f"mIoU: {report.miou:.4f}")
    return EXIT_OK


def _parse_sizes(text: str) -> tuple[int, int, int]:
    try:
        sizes = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise ConfigError(f"sizes must be C,H,W integers, got {text!r}") from None
    if len(sizes) != 3:
        raise ConfigError(f"sizes must be C,H,W, got {text!r}")
    if min(sizes) < 1:
        raise ConfigError(f"sizes must be positive, got {text!r}")
    return sizes


def cmd_gradcheck(args) -> int:
    from .verify.gradcheck import run_gradcheck

    sizes = _parse_sizes(args.sizes)
    results = run_gradcheck(seed=args.seed or 0, sizes=sizes, instances=args.instances, tol=args.tol)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name:<{width}}  max_rel_err={r.max_rel_error:.3e}  {'PASS' if r.passed else 'FAIL'}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        payload = [{"loss": r.name, "max_rel_error": r.max_rel_error, "passed": r.passed,
                    "instances": r.instances, "tol": r.tol} for r in results]
        (out / "gradcheck.json").write_text(json.dumps(payload, indent=2) + "\n")
    if not all(r.passed for r in results):
        raise ChecksFailed("gradient check failed for: " + ", ".join(r.name for r in results if not r.passed))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg, user = _load_config(args)
    seeds = list(cfg.eval.seeds) if args.seeds is None else [int(s) for s in args.seeds.split(",")]
    out = Path(args.out)
    if args.source and args.target:
        source = read_dataset(args.source)
        target = read_dataset(args.target)
    else:
        source, target = generate_pair(cfg.scene, cfg.shift, cfg.data.n_train, cfg.data.n_val,
                                       stride=cfg.train.encoder.stride, workers=cfg.data.workers)
    _write_resolved(out, cfg, user)
    table = run_ablation(cfg.train, source, target, seeds, out, eval_split=cfg.eval.split)
    print(f"rare classes: {table.rare}")
    print(f"{'variant':<8} {'mIoU':>14} {'rare IoU':>14}")
    for v, s in table.summary().items():
        print(f"{v:<8} {s['miou_mean']:.4f}±{s['miou_std']:.4f} {s['rare_mean']:.4f}±{s['rare_std']:.4f}")
    if args.plots:
        _ablation_plot(table, out / "ablation.png")
    if any(c.error for c in table.cells):
        raise ChecksFailed("some ablation cells failed; see ablation.json")
    return EXIT_OK


def _ablation_plot(table, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    summ = table.summary()
    names = list(summ)
    fig, ax = plt.subplots(figsize=(5, 3))
    x = np.arange(len(names))
    ax.bar(x - 0.2, [summ[n]["miou_mean"] for n in names], 0.4, yerr=[summ[n]["miou_std"] for n in names],
           label="mIoU")
    ax.bar(x + 0.2, [summ[n]["rare_mean"] for n in names], 0.4, yerr=[summ[n]["rare_std"] for n in names],
           label="rare-class IoU")
    ax.set_xticks(x, names)
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ccda", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", type=Path)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", type=Path, required=out_required)
        sp.add_argument("--device")

    g = sub.add_parser("generate", help="write paired source/target datasets")
    common(g)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one variant")
    common(t)
    t.add_argument("--source", type=Path, required=True)
    t.add_argument("--target", type=Path, required=True)
    t.add_argument("--variant", choices=("basic", "class", "full"))
    t.add_argument("--iterations", type=int)
    t.add_argument("--resume", type=Path)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-class IoU report for a checkpoint")
    common(e)
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--dataset", type=Path, required=True)
    e.add_argument("--split", default="val")
    e.add_argument("--plots", action="store_true")
    e.set_defaults(func=cmd_eval)

    gc = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients of every loss")
    common(gc, out_required=False)
    gc.add_argument("--sizes", default="4,6,5", help="C,H,W of the random instances")
    gc.add_argument("--instances", type=int, default=20)
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="basic / class / full ladder over several seeds")
    common(a)
    a.add_argument("--source", type=Path)
    a.add_argument("--target", type=Path)
    a.add_argument("--seeds", help="comma-separated; defaults to the config's eval seeds")
    a.add_argument("--iterations", type=int)
    a.add_argument("--plots", action="store_true")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetError, CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ChecksFailed as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # anything else is a runtime failure
        log.exception("unexpected failure")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
