"""Command line front end.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every output artifact gets a sibling manifest <artifact>.manifest.json
recording the command, its canonicalized flags, a hash of them, and the
tool version, so a run can be reproduced or audited later.  All numbers in
data files carry 17 significant digits, which round-trips doubles exactly;
rerunning a command with identical flags and inputs produces byte-identical
data files.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DataError, NumericalError, NotAligned
from .evaluation import TrialSummary, lmmse_curve, monte_carlo_order, order_sweep, McConfig
from .order_select import select_order_proposed, select_order_variance
from .pdm import fit_pdm, load_pdm, save_pdm, truncate, PdmModel
from .shapes import ShapeSet, generalized_procrustes, load_shape_set, mean_shape
from .simgen import (
    SeedPdm,
    SimConfig,
    TransformRanges,
    make_seed_pdm_procedural,
    sample_shapes,
    seed_pdm_from_model,
    noise_variance,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # noqa: D102 - argparse hook
        raise UsageError(f"{self.prog}: {message}")


def _fmt(value: float) -> str:
    return format(float(value), ".17g")


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _canonical_config(args: argparse.Namespace) -> dict:
    config = {}
    for key, value in sorted(vars(args).items()):
        if key in ("func", "command"):
            continue
        config[key] = value
    return config


def config_hash(command: str, config: dict) -> str:
    canonical = json.dumps({"command": command, "config": config}, sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()


def write_manifest(artifact: Path, command: str, args: argparse.Namespace, started: str) -> None:
    config = _canonical_config(args)
    manifest = {
        "command": command,
        "config": config,
        "config_hash": config_hash(command, config),
        "rng_seed": config.get("seed"),
        "tool_version": __version__,
        "timestamps": {"started": started, "finished": _utc_now()},
    }
    Path(str(artifact) + ".manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )


def write_shapes_csv(path: Path, shape_set: ShapeSet) -> None:
    lines = [",".join(_fmt(v) for v in s.coords) for s in shape_set.shapes]
    path.write_text("\n".join(lines) + "\n")


def write_scores_csv(path: Path, result, fits) -> None:
    lines = ["t,score,iterations,converged"]
    for order in sorted(result.scores):
        fit = fits[order]
        lines.append(
            f"{order},{_fmt(result.scores[order])},{fit.iterations},{str(fit.converged).lower()}"
        )
    path.write_text("\n".join(lines) + "\n")


def write_summary_csv(path: Path, summary: TrialSummary) -> None:
    lines = ["method,M,mean_t,var_t"]
    for (method, count), cell in sorted(summary.cells.items()):
        lines.append(f"{method},{count},{_fmt(cell.mean_t)},{_fmt(cell.var_t)}")
    path.write_text("\n".join(lines) + "\n")


def write_hist_csv(path: Path, summary: TrialSummary) -> None:
    lines = ["method,M,t,count"]
    for (method, count), cell in sorted(summary.cells.items()):
        for t, tally in sorted(cell.hist.items()):
            lines.append(f"{method},{count},{t},{tally}")
    path.write_text("\n".join(lines) + "\n")


def write_lmmse_csv(path: Path, result) -> None:
    lines = ["t,e_lmmse"]
    for t in sorted(result.errors):
        lines.append(f"{t},{_fmt(result.errors[t])}")
    path.write_text("\n".join(lines) + "\n")


def _hist_sidecar(out: Path) -> Path:
    return out.with_name(out.stem + "_hist" + out.suffix)


def _load_input(args: argparse.Namespace) -> ShapeSet:
    fmt = "directory_of_files" if args.format == "directory" else "csv_rows"
    return load_shape_set(args.input, fmt=fmt)


def _ensure_aligned(shape_set: ShapeSet, args: argparse.Namespace, command: str) -> ShapeSet:
    if shape_set.aligned:
        return shape_set
    if getattr(args, "no_align", False):
        raise NotAligned(f"{command}: input is not aligned and --no-align was given")
    print(f"{command}: input not aligned; running Procrustes alignment first", file=sys.stderr)
    return generalized_procrustes(shape_set)


def _add_input_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--input", required=True, help="shape data path")
    parser.add_argument(
        "--format",
        choices=("csv-rows", "directory"),
        default="csv-rows",
        dest="format",
        help="input layout: CSV rows or one file per shape",
    )


def _parse_counts(text: str) -> tuple[int, ...]:
    try:
        counts = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise UsageError(f"malformed sample count list {text!r}") from exc
    if not counts:
        raise UsageError("sample count list is empty")
    return counts


def _threads(args: argparse.Namespace) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("PDM_ORDER_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise UsageError(f"PDM_ORDER_THREADS is not an integer: {env!r}") from exc
    return 1


def _seed_pdm_for(args: argparse.Namespace) -> SeedPdm:
    if getattr(args, "seed_model", None):
        loaded = load_pdm(args.seed_model)
        if isinstance(loaded, PdmModel):
            loaded = truncate(loaded, args.order)
        return seed_pdm_from_model(loaded, source=f"from_data:{args.seed_model}")
    return make_seed_pdm_procedural(args.landmarks, args.order, args.spectrum, args.seed)


def cmd_align(args: argparse.Namespace) -> int:
    started = _utc_now()
    aligned = generalized_procrustes(
        _load_input(args),
        tol=args.tol,
        max_iter=args.max_iter,
        allow_scaling=not args.rigid,
    )
    out = Path(args.out)
    write_shapes_csv(out, aligned)
    write_manifest(out, "align", args, started)
    if args.report:
        report = aligned.alignment_report
        print(f"iterations={report.iterations}")
        print(f"final_change={_fmt(report.final_change)}")
    return 0


def cmd_fit(args: argparse.Namespace) -> int:
    started = _utc_now()
    shape_set = _ensure_aligned(_load_input(args), args, "fit")
    model = fit_pdm(shape_set)
    out = Path(args.out)
    save_pdm(model, out, order=args.order)
    write_manifest(out, "fit", args, started)
    return 0


def cmd_select(args: argparse.Namespace) -> int:
    started = _utc_now()
    shape_set = _ensure_aligned(_load_input(args), args, "select")
    if args.method == "proposed":
        result = select_order_proposed(
            shape_set,
            t_max=args.t_max,
            split_policy="shuffled" if args.split == "shuffled" else "first_half",
            split_seed=args.seed,
            tol=args.tol,
            max_iter=args.max_iter,
            mean_source=args.mean,
            clamp_mode=args.clamp,
            warm_start=args.warm_start,
            keep_fits=args.out is not None,
            threads=_threads(args),
        )
        t_star = result.t_star
        if args.out:
            out = Path(args.out)
            write_scores_csv(out, result, result.per_order_fits)
            write_manifest(out, "select", args, started)
    else:
        t_star = select_order_variance(fit_pdm(shape_set), fraction=args.fraction)
    print(f"t_star={t_star}")
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    started = _utc_now()
    seed_pdm = _seed_pdm_for(args)
    config = SimConfig(
        n_samples=args.samples,
        beta_db=args.beta_db,
        rng_seed=args.seed,
        transform_ranges=TransformRanges(
            rotation=args.rot_range,
            log_scale=args.log_scale_range,
            translation=args.translation_range,
        ),
        realign=not args.no_realign,
        b_dist=args.b_dist,
    )
    shape_set = sample_shapes(seed_pdm, config)
    out = Path(args.out)
    write_shapes_csv(out, shape_set)
    write_manifest(out, "simulate", args, started)
    if args.out_truth:
        model = seed_pdm.underlying
        truth = {
            "order": model.order,
            "sigma2": noise_variance(model.lambdas, args.beta_db),
            "beta_db": args.beta_db,
            "lambdas": [float(v) for v in model.lambdas],
            "rng_seed": args.seed,
            "source": seed_pdm.source,
        }
        Path(args.out_truth).write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_montecarlo(args: argparse.Namespace) -> int:
    started = _utc_now()
    cfg = McConfig(
        seed_pdm=_seed_pdm_for(args),
        beta_db=args.beta_db,
        sample_counts=_parse_counts(args.samples),
        trials=args.trials,
        rng_seed=args.seed,
        methods=tuple(args.methods.split(",")),
        variance_fraction=args.fraction,
        selector_t_max=args.t_max,
        b_dist=args.b_dist,
    )
    summary = monte_carlo_order(cfg, threads=_threads(args))
    out = Path(args.out)
    write_summary_csv(out, summary)
    write_hist_csv(_hist_sidecar(out), summary)
    write_manifest(out, "montecarlo", args, started)
    if summary.failures:
        print(f"failures={summary.failures}", file=sys.stderr)
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    started = _utc_now()
    shape_set = _ensure_aligned(_load_input(args), args, "sweep")
    summary = order_sweep(
        shape_set,
        sample_counts=_parse_counts(args.samples),
        trials=args.trials,
        rng_seed=args.seed,
        methods=tuple(args.methods.split(",")),
        mode=args.mode,
        t_max=args.t_max,
        variance_fraction=args.fraction,
        threads=_threads(args),
    )
    out = Path(args.out)
    write_summary_csv(out, summary)
    write_hist_csv(_hist_sidecar(out), summary)
    write_manifest(out, "sweep", args, started)
    if summary.failures:
        print(f"failures={summary.failures}", file=sys.stderr)
    return 0


def cmd_lmmse(args: argparse.Namespace) -> int:
    started = _utc_now()
    shape_set = _ensure_aligned(_load_input(args), args, "lmmse")
    result = lmmse_curve(
        shape_set,
        t_max=args.t_max,
        estimator=args.estimator,
        selector_t_max=args.selector_t_max,
    )
    out = Path(args.out)
    write_lmmse_csv(out, result)
    sidecar = out.with_suffix(".selected.json")
    sidecar.write_text(
        json.dumps(
            {"argmin_t": result.argmin_t, "selected_orders": result.selected_orders},
            indent=2,
            sort_keys=True,
        )
        + "\n"
    )
    write_manifest(out, "lmmse", args, started)
    return 0


def cmd_mean_shape(args: argparse.Namespace) -> int:
    started = _utc_now()
    shape_set = _ensure_aligned(_load_input(args), args, "mean-shape")
    mean = mean_shape(shape_set)
    lines = ["x,y"]
    coords = mean.coords
    for landmark in range(mean.n_landmarks):
        lines.append(f"{_fmt(coords[2 * landmark])},{_fmt(coords[2 * landmark + 1])}")
    text = "\n".join(lines) + "\n"
    if args.out:
        out = Path(args.out)
        out.write_text(text)
        write_manifest(out, "mean-shape", args, started)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="pdmorder", description="Point distribution model order toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("align", parents=[], help="Procrustes-align a shape set")
    _add_input_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--max-iter", type=int, default=200, dest="max_iter")
    p.add_argument("--rigid", action="store_true", help="rotation and translation only")
    p.add_argument("--report", action="store_true", help="print key=value alignment stats")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("fit", help="fit and store an eigenmodel")
    _add_input_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--order", type=int, default=None, help="store only the leading modes")
    p.add_argument("--no-align", action="store_true", dest="no_align")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("select", help="select the model order")
    _add_input_flags(p)
    p.add_argument("--method", choices=("proposed", "variance"), default="proposed")
    p.add_argument("--fraction", type=float, default=0.95)
    p.add_argument("--split", choices=("first-half", "shuffled"), default="first-half")
    p.add_argument("--seed", type=int, default=None, help="shuffled-split seed")
    p.add_argument("--t-max", type=int, default=None, dest="t_max")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iter", type=int, default=100, dest="max_iter")
    p.add_argument("--mean", choices=("x1", "x2"), default="x1")
    p.add_argument("--clamp", choices=("clip", "scale"), default="clip")
    p.add_argument("--warm-start", action="store_true", dest="warm_start")
    p.add_argument("--no-align", action="store_true", dest="no_align")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", default=None, help="write per-order scores CSV")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("simulate", help="generate one synthetic shape set")
    p.add_argument("--landmarks", type=int, required=True)
    p.add_argument("--order", type=int, required=True)
    p.add_argument("--spectrum", default="geometric:0.7")
    p.add_argument("--seed-model", default=None, help="use a stored model as the seed")
    p.add_argument("--beta-db", type=float, required=True, dest="beta_db")
    p.add_argument("--samples", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--b-dist", choices=("uniform", "gaussian"), default="uniform", dest="b_dist")
    p.add_argument("--rot-range", type=float, default=float(np.pi), dest="rot_range")
    p.add_argument("--log-scale-range", type=float, default=0.2, dest="log_scale_range")
    p.add_argument("--translation-range", type=float, default=0.5, dest="translation_range")
    p.add_argument("--no-realign", action="store_true", dest="no_realign")
    p.add_argument("--out", required=True)
    p.add_argument("--out-truth", default=None, dest="out_truth")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("montecarlo", help="Monte Carlo order-selection study")
    p.add_argument("--landmarks", type=int, required=True)
    p.add_argument("--order", type=int, required=True)
    p.add_argument("--spectrum", default="geometric:0.7")
    p.add_argument("--seed-model", default=None)
    p.add_argument("--beta-db", type=float, required=True, dest="beta_db")
    p.add_argument("--samples", required=True, help="comma-separated sample counts")
    p.add_argument("--trials", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--methods", default="proposed,variance")
    p.add_argument("--fraction", type=float, default=0.95)
    p.add_argument("--t-max", type=int, default=None, dest="t_max")
    p.add_argument("--b-dist", choices=("uniform", "gaussian"), default="uniform", dest="b_dist")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_montecarlo)

    p = sub.add_parser("sweep", help="order selection over subsets of one set")
    _add_input_flags(p)
    p.add_argument("--samples", required=True, help="comma-separated subset sizes")
    p.add_argument("--trials", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--methods", default="proposed,variance")
    p.add_argument("--mode", choices=("random", "prefix"), default="random")
    p.add_argument("--fraction", type=float, default=0.95)
    p.add_argument("--t-max", type=int, default=None, dest="t_max")
    p.add_argument("--no-align", action="store_true", dest="no_align")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("lmmse", help="leave-one-out hidden-landmark error curve")
    _add_input_flags(p)
    p.add_argument("--t-max", type=int, default=None, dest="t_max")
    p.add_argument("--estimator", choices=("ridge", "pinv"), default="ridge")
    p.add_argument("--selector-t-max", type=int, default=None, dest="selector_t_max")
    p.add_argument("--no-align", action="store_true", dest="no_align")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_lmmse)

    p = sub.add_parser("mean-shape", help="average shape of an aligned set")
    _add_input_flags(p)
    p.add_argument("--no-align", action="store_true", dest="no_align")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_mean_shape)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
