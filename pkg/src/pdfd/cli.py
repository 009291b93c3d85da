"""``pdfd`` command-line entry point.

Exit codes: 0 success, 1 failed self-check, 2 usage / config / data error,
3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from .errors import NumericalError, PDFDError, TrainingAborted, UsageError

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_config(args):
    from .trainer import TrainConfig

    cfg = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    overrides = {}
    for key in ("seed", "epochs"):
        if getattr(args, key, None) is not None:
            overrides[key] = getattr(args, key)
    if getattr(args, "data", None):
        overrides["data_path"] = str(args.data)
    cfg = cfg.replace(**overrides)
    if getattr(args, "ablation", None):
        cfg = cfg.with_ablation(args.ablation)
    return cfg


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    from . import plotting
    from .data import Dataset, save_features
    from .evaluation import evaluate
    from .trainer import load_split, train

    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "resolved_config.json", cfg.to_dict())
    ds, split = load_split(cfg)
    save_features(ds, out / "dataset.pdfd")
    save_features(Dataset(split.x_test, split.y_test, split.num_classes), out / "test.pdfd")

    def progress(row):
        if not args.quiet:
            print(f"epoch {int(row['epoch']):4d}  lr {row['lr']:.4f}  L_ce_l {row['L_ce_l']:.4f}  "
                  f"L_diff {row['L_diff']:.3f}  seen {row['seen_acc']:.3f}  unseen {row['unseen_acc']:.3f}  "
                  f"all {row['all_acc']:.3f}", flush=True)

    result = train(cfg, split, out_dir=out, progress=progress)
    report = evaluate(split.x_test, split.y_test, result.bundle, split.seen, split.novel, cfg.eval_protocol)
    _write_json(out / "report.json", report.to_dict())
    (out / "report.txt").write_text(report.to_text())
    if not args.no_figures:
        plotting.plot_training_curves(result.history, out / "training_curves.png")
        plotting.plot_pseudo_telemetry(result.pseudo_history, split.seen, out / "pseudo_labels.png")
        plotting.plot_confusion(report.confusion, out / "confusion.png", split.seen)
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import plotting
    from .data import load_features
    from .errors import DimensionError
    from .evaluation import evaluate
    from .trainer import load_trained

    model = load_trained(args.checkpoint)
    ds = load_features(args.data)
    if ds.dim != model.input_dim:
        raise DimensionError(f"data has {ds.dim} input dims, checkpoint expects {model.input_dim}")
    if ds.num_classes != model.num_classes:
        raise DimensionError(f"data declares {ds.num_classes} classes, checkpoint has {model.num_classes}")
    report = evaluate(ds.x, ds.y, model.bundle, model.seen, model.novel, args.protocol)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    stem = f"eval_{args.protocol}"
    _write_json(out / f"{stem}.resolved_config.json", {
        "command": "eval", "checkpoint": str(args.checkpoint), "data": str(args.data),
        "protocol": args.protocol, "model_config": model.config.to_dict(),
    })
    _write_json(out / f"{stem}.json", report.to_dict())
    (out / f"{stem}.txt").write_text(report.to_text())
    if not args.no_figures:
        plotting.plot_confusion(report.confusion, out / f"{stem}_confusion.png", model.seen)
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_sample(args) -> int:
    from .autodiff import no_tape
    from .diffusion import build_schedule, reverse_generate, write_generated_csv
    from .rng import RandomStreams
    from .trainer import _class_prompts, load_trained

    model = load_trained(args.checkpoint)
    c = args.cls
    if not (0 <= c < model.num_classes):
        raise UsageError(f"class id {c} outside 0..{model.num_classes - 1}")
    if model.config.prompt_mode == "prototype" and not model.prototypes.valid[c]:
        raise UsageError(f"class {c} has no valid prototype in this checkpoint")
    if args.n < 0:
        raise UsageError("--n must be >= 0")
    cfg = model.config
    d = cfg.feature_dim
    streams = RandomStreams(args.seed)
    sched = build_schedule(cfg.T, cfg.beta_min, cfg.beta_max)
    if args.n:
        eps = streams.get("sample.eps").standard_normal((args.n, d))
        if cfg.no_class_condition:
            prompts = np.zeros((args.n, d))
        else:
            prompts = _class_prompts(cfg, model.prototypes, np.full(args.n, c), d)
        rng = streams.get("sample.noise") if args.stochastic else None
        with no_tape():
            z0 = reverse_generate(eps, cfg.T, prompts, sched, model.bundle.denoiser, rng=rng).data
    else:
        z0 = np.zeros((0, d))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_generated_csv(out, np.full(args.n, c), z0)
    _write_json(out.with_name(out.stem + ".resolved_config.json"), {
        "command": "sample", "checkpoint": str(args.checkpoint), "class": c, "n": args.n,
        "seed": args.seed, "stochastic": bool(args.stochastic), "steps": cfg.T,
    })
    print(f"wrote {args.n} samples of class {c} to {out}")
    return EXIT_OK


def _report_checks(results, out_dir=None) -> int:
    failed = [r for r in results if not r.passed]
    for r in results:
        print(r.line(), flush=True)
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "checks.json", [
            {"name": r.name, "passed": r.passed, "detail": r.detail, "seconds": r.seconds} for r in results
        ])
    if failed:
        print("failing: " + ", ".join(r.name for r in failed), file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import gradcheck_suite

    return _report_checks(gradcheck_suite(args.seed, args.points), args.out)


def cmd_selftest(args) -> int:
    from .checks import selftest_suite

    t0 = time.perf_counter()
    code = _report_checks(selftest_suite(args.seed), args.out)
    print(f"selftest finished in {time.perf_counter() - t0:.1f} s")
    return code


def cmd_ablate(args) -> int:
    from . import plotting
    from .ablation import ABLATION_VARIANTS, METRICS, parse_variant, run_variants

    cfg = _load_config(args)
    names = [v.strip() for v in args.variants.split(",") if v.strip()] if args.variants else list(ABLATION_VARIANTS)
    variants = {name: parse_variant(name) for name in names}
    for name, overrides in variants.items():
        cfg.replace(**overrides)  # validate before any training starts
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds must be a comma separated list of integers, got {args.seeds!r}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "resolved_config.json", {
        "base_config": cfg.to_dict(), "variants": variants, "seeds": seeds,
    })

    def progress(name, seed, row):
        if not args.quiet:
            print(f"{name:<22} seed {seed}: seen {row.get('seen_acc', 0):.3f}  unseen {row.get('unseen_acc', 0):.3f}"
                  f"  all {row.get('all_acc', 0):.3f}", flush=True)

    runs = run_variants(cfg, variants, seeds, progress)
    with open(out / "ablation_runs.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "seed", *METRICS])
        for name, vr in runs.items():
            for seed, final in zip(seeds, vr.finals):
                w.writerow([name, seed, *[repr(float(final[m])) for m in METRICS]])
    summary = [vr.summary() for vr in runs.values()]
    with open(out / "ablation_summary.csv", "w", newline="") as fh:
        cols = list(summary[0])
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in summary:
            w.writerow([row[c] if isinstance(row[c], str) else repr(row[c]) for c in cols])
    _write_json(out / "ablation.json", summary)
    if not args.no_figures:
        plotting.plot_ablation(summary, out / "ablation.png")
    print(f"{'variant':<22} {'seen':>7} {'unseen':>7} {'all':>7}")
    for row in summary:
        print(f"{row['variant']:<22} {100 * row['seen_acc_mean']:7.1f} {100 * row['unseen_acc_mean']:7.1f} "
              f"{100 * row['all_acc_mean']:7.1f}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pdfd", description="Prompt-driven feature diffusion for open-world semi-supervised learning")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train one model and write metrics, checkpoint and figures")
    t.add_argument("--config", help="JSON config mirroring TrainConfig (defaults when omitted)")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--ablation", help="comma separated flags, e.g. no_diff,no_adv")
    t.add_argument("--data", help="feature file (CSV or PDFD binary) instead of the synthetic mixture")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--no-figures", action="store_true")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a labelled feature file")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--protocol", default="seen-fixed", choices=("seen-fixed", "all-matched"))
    e.add_argument("--out", help="report directory (defaults to the checkpoint's directory)")
    e.add_argument("--no-figures", action="store_true")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sample", help="generate features for one class with the reverse chain")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--class", dest="cls", type=int, required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--stochastic", action="store_true", help="add sigma_t noise after each reverse step")
    s.set_defaults(func=cmd_sample)

    g = sub.add_parser("gradcheck", help="finite-difference check of every primitive and the joint loss")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--points", type=int, default=10)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gradcheck)

    st = sub.add_parser("selftest", help="gradient checks plus the invariant oracles")
    st.add_argument("--seed", type=int, default=0)
    st.add_argument("--out")
    st.set_defaults(func=cmd_selftest)

    a = sub.add_parser("ablate", help="train ablation variants over several seeds")
    a.add_argument("--config")
    a.add_argument("--out", required=True)
    a.add_argument("--variants", help="comma separated variant names (default: the full ablation table)")
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--epochs", type=int)
    a.add_argument("--data")
    a.add_argument("--no-figures", action="store_true")
    a.add_argument("--quiet", action="store_true")
    a.set_defaults(func=cmd_ablate, seed=None, ablation=None)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (NumericalError, TrainingAborted) as exc:
        print(f"pdfd: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except PDFDError as exc:
        print(f"pdfd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"pdfd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
