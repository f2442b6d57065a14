"""Command-line entry point.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure,
4 training failure.
"""
from __future__ import annotations

import argparse
import csv
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ABLATIONS, RunConfig, dump_run_config, load_run_config
from .errors import NumericalFailureError, OrcoError, TrainingFailureError
from .geometry import generate_random_targets, optimize_targets, pairwise_angle_stats, save_targets
from .matching import save_assignment
from .metrics import summarize, write_confusion_csv, write_report_csv, write_summary_csv
from .model import save_model
from .protocol import ncm_accuracy, pretrain_only, prepare_inputs, run_fscil_detailed

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_TRAINING = 0, 2, 3, 4
SWEEP_AXES = ("perturbation", "assignment", "exemplars", "loss_components", "pretrain")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


class _UsageError(Exception):
    pass


def _seed_default(value):
    if value is not None:
        return value
    env = os.environ.get("ORCO_SEED", "").strip()
    if not env:
        return 0
    try:
        return int(env)
    except ValueError:
        raise _UsageError("ORCO_SEED must be an integer") from None


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "nan" if math.isnan(v) else f"{v:.4f}"


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def cmd_gen_targets(args) -> int:
    if args.count < 2 or args.dim < 2:
        raise _UsageError("--count and --dim must be >= 2")
    if args.lr <= 0 or args.epochs < 0 or args.tau_o <= 0:
        raise _UsageError("--lr and --tau-o must be positive, --epochs non-negative")
    seed = _seed_default(args.seed)
    initial = generate_random_targets(args.count, args.dim, seed)
    targets = optimize_targets(initial, args.lr, args.epochs, args.tau_o, args.method) if args.epochs else initial
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_targets(targets, args.out)
    for name, stats in (("initial", pairwise_angle_stats(initial)), ("optimized", pairwise_angle_stats(targets))):
        print(f"{name}: mean_angle={stats.mean_deg:.4f} min_angle={stats.min_deg:.4f} "
              f"max_angle={stats.max_deg:.4f} mean_abs_cos={stats.mean_abs_cos:.6f} "
              f"max_abs_cos={stats.max_abs_cos:.6f}")
    print(f"wrote {args.out}")
    return EXIT_OK


def _parse_dims(text):
    dims = []
    for part in text.replace(",", " ").split():
        if ":" in part:
            lo, hi = (int(p) for p in part.split(":"))
            dims.extend(2 ** e for e in range(lo, hi + 1))
        else:
            dims.append(int(part))
    return dims


def cmd_angle_scan(args) -> int:
    try:
        dims = _parse_dims(args.dims)
    except ValueError:
        raise _UsageError(f"bad --dims {args.dims!r}") from None
    if not dims or min(dims) < 1 or args.count < 2:
        raise _UsageError("--dims must be non-empty positive integers and --count >= 2")
    seed = _seed_default(args.seed)
    rows = []
    for d in dims:
        s = pairwise_angle_stats(generate_random_targets(args.count, d, seed))
        rows.append((d, s.mean_deg, s.min_deg, s.max_deg, s.mean_abs_cos))
        print(f"dim={d} mean_angle={s.mean_deg:.4f}")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    _write_csv(args.out, ("dim", "mean_deg", "min_deg", "max_deg", "mean_abs_cos"), rows)
    return EXIT_OK


def _run_config(args) -> RunConfig:
    cfg = load_run_config(args.config, args.set, args.seed)
    if getattr(args, "data_file", None):
        cfg = RunConfig(cfg.phase, cfg.plan, None, args.data_file)
    ablate = getattr(args, "ablate_loss", None)
    if ablate:
        cfg = replace(cfg, phase=replace(cfg.phase, **ABLATIONS[ablate]))
    return cfg


def cmd_run(args) -> int:
    cfg = _run_config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(dump_run_config(cfg), encoding="utf-8")
    result = run_fscil_detailed(cfg.phase, cfg.plan, cfg.load_dataset())
    write_report_csv(result.reports, out / "summary.csv")
    summary = summarize(result.reports)
    write_summary_csv(summary, out / "run_summary.csv")
    for r in result.reports:
        write_confusion_csv(r.confusion_by_group, out / f"confusion_session_{r.session_index}.csv")
    save_targets(result.targets, out / "targets.txt")
    save_assignment(result.state, out / "assignment.txt")
    save_model(result.model, out / "model.txt")
    for r in result.reports:
        print(f"session {r.session_index}: base={_fmt(r.acc_base)} inc={_fmt(r.acc_inc)} "
              f"overall={_fmt(r.acc_overall)} hm={_fmt(r.hm)}")
    print(f"aHM={_fmt(summary.ahm)} aACC={_fmt(summary.aacc)}")
    return EXIT_OK


def _sweep_variants(axis, phase):
    if axis == "perturbation":
        return [("w/o", dict(perturb_distribution="none")), ("gaussian", dict(perturb_distribution="gaussian")),
                ("uniform", dict(perturb_distribution="uniform"))]
    if axis == "assignment":
        return [(s, dict(assignment_strategy=s)) for s in ("random", "reassignment", "greedy")]
    if axis == "exemplars":
        return [(str(k), dict(exemplars_per_class=k)) for k in (0, 1, 5)]
    if axis == "loss_components":
        combos = [(0, 1, 0), (0, 1, 1), (1, 0, 0), (1, 0, 1), (1, 1, 0), (1, 1, 1)]
        return [("+".join(n for n, on in zip(("pscl", "ce", "orth"), c) if on),
                 dict(use_pscl=bool(c[0]), use_ce=bool(c[1]), use_orth=bool(c[2]))) for c in combos]
    if axis == "pretrain":
        return [("none", dict(skip_pretrain=True)), ("scl", dict(alpha=0.0)), ("sscl", dict(alpha=1.0)),
                ("scl+sscl", dict(alpha=phase.alpha))]
    raise _UsageError(f"unknown sweep axis {axis!r}; choose from {', '.join(SWEEP_AXES)}")


def _sweep_row(axis, plan, result, extra):
    reports = result.reports
    s = summarize(reports)
    final = reports[-1]
    hms = [r.hm for r in reports[1:]]
    if axis == "perturbation":
        return [final.diagnostics.get("fp_inc", math.nan), s.mean_diagnostic("sim_cls"),
                s.mean_diagnostic("sim_cls_to_target"), final.hm]
    if axis == "assignment":
        return [final.acc_base, s.base_decay, s.ahm, s.aacc]
    if axis == "exemplars":
        return hms + [s.ahm, s.aacc]
    if axis == "loss_components":
        return hms + [s.ahm]
    return [extra, s.ahm]


def _sweep_header(axis, plan):
    hm_cols = [f"hm_{i}" for i in range(1, plan.sessions + 1)]
    return {
        "perturbation": ["perturbation", "fp_inc", "sim_cls", "sim_cls_to_target", "hm_final"],
        "assignment": ["assignment", "acc_base", "base_decay", "ahm", "aacc"],
        "exemplars": ["exemplars"] + hm_cols + ["ahm", "aacc"],
        "loss_components": ["pscl", "ce", "orth"] + hm_cols + ["ahm"],
        "pretrain": ["pretrain", "phase1_acc", "ahm"],
    }[axis]


def cmd_sweep(args) -> int:
    if args.axis not in SWEEP_AXES:
        raise _UsageError(f"unknown sweep axis {args.axis!r}; choose from {', '.join(SWEEP_AXES)}")
    if args.seeds < 1:
        raise _UsageError("--seeds must be >= 1")
    base = _run_config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(dump_run_config(base), encoding="utf-8")
    variants = _sweep_variants(args.axis, base.phase)
    table = {name: [] for name, _ in variants}
    for k in range(args.seeds):
        seed = base.phase.seed + k
        spec = replace(base.synthetic, seed=base.synthetic.seed + k) if base.synthetic is not None else None
        run_cfg = RunConfig(replace(base.phase, seed=seed), base.plan, spec, base.feature_file)
        dataset = run_cfg.load_dataset()
        shared = None if args.axis == "pretrain" else pretrain_only(run_cfg.phase, run_cfg.plan, dataset)
        for name, change in variants:
            phase = replace(run_cfg.phase, **change)
            pre = shared if shared is not None else pretrain_only(phase, run_cfg.plan, dataset)
            extra = math.nan
            if args.axis == "pretrain":
                base_cls = range(run_cfg.plan.base_classes)
                xt, yt = dataset.x_train[np.isin(dataset.y_train, base_cls)], dataset.y_train[np.isin(dataset.y_train, base_cls)]
                xv, yv = dataset.val_for(base_cls)
                extra = ncm_accuracy(pre, prepare_inputs(xt), yt, prepare_inputs(xv), yv)
            result = run_fscil_detailed(phase, run_cfg.plan, dataset, pretrained=pre)
            table[name].append(_sweep_row(args.axis, run_cfg.plan, result, extra))
    header = _sweep_header(args.axis, base.plan)
    rows = []
    for name, change in variants:
        vals = np.array(table[name], dtype=np.float64)
        means = [float(np.nanmean(c)) if not np.all(np.isnan(c)) else math.nan for c in vals.T]
        if args.axis == "loss_components":
            label = [str(int(change["use_pscl"])), str(int(change["use_ce"])), str(int(change["use_orth"]))]
        else:
            label = [name]
        rows.append(label + means)
        print(" ".join(f"{h}={_fmt(v)}" for h, v in zip(header, label + means)))
    _write_csv(out / f"sweep_{args.axis}.csv", header, rows)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="orco", description="Orthogonal-target few-shot class-incremental learning at desk scale.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-targets", help="generate and optimise pseudo-targets")
    g.add_argument("--count", type=int, default=100)
    g.add_argument("--dim", type=int, default=128)
    g.add_argument("--lr", type=float, default=1e-2)
    g.add_argument("--epochs", type=int, default=2000)
    g.add_argument("--tau-o", type=float, default=1.0)
    g.add_argument("--method", choices=("amsgrad", "sgd"), default="amsgrad")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_targets)

    a = sub.add_parser("angle-scan", help="mean pairwise angle of random Gaussian vectors per dimension")
    a.add_argument("--dims", default="4:15", help="comma list of dims, or lo:hi for powers of two (default 4:15)")
    a.add_argument("--count", type=int, default=100)
    a.add_argument("--seed", type=int, default=None)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_angle_scan)

    def common(sp):
        sp.add_argument("--config", default=None, help="INI run manifest")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--data-file", default=None, help="feature file replacing the synthetic data")
        sp.add_argument("--out-dir", required=True)

    r = sub.add_parser("run", help="full three-phase run")
    common(r)
    r.add_argument("--ablate-loss", choices=sorted(ABLATIONS), default=None)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="ablation sweep along one axis")
    common(s)
    s.add_argument("--axis", required=True)
    s.add_argument("--seeds", type=int, default=1, help="average over this many consecutive seeds")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except NumericalFailureError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except TrainingFailureError as exc:
        where = f" (phase {exc.phase}" + (f", session {exc.session})" if exc.session is not None else ")")
        print(f"training failure{where}: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except OrcoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
