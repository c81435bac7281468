"""Command line entry points.

Six subcommands cover the full surface: ``fit`` and ``infer`` run the
pipeline on a CSV file, ``simulate`` and ``study`` drive the scenario
generators and the repetition harness, ``decorrelate-demo`` sweeps the
quasi-correlation diagnostic over an equicorrelation grid, and
``serve-worker`` hosts one socket-transport worker endpoint.

Every command is deterministic given its flags, writes plain-text outputs
through a temp-file rename (no partial files on failure), and maps errors
to stable exit codes: 0 success, 2 bad data or bad scenario, 3 solver
non-convergence, 1 anything else.  Set DDAC_LOG to quiet, info, or debug
to control logging on stderr.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import tempfile
from typing import Sequence

import numpy as np

from .core import load_dataset
from .decorrelate import DEFAULT_RIDGE, quasi_correlation_study
from .errors import DataError, DdacError, NotConverged
from .metrics import run_study, testing_study
from .runtime import run_ddac_spam, run_inference, serve_worker
from .spline import compute_dn
from .synthgen import export_csv, generate, parse_scenario

EXIT_OK = 0
EXIT_DATA = 2
EXIT_NOCONV = 3
GRID_POINTS = 200
DEMO_RHO_GRID = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)

log = logging.getLogger(__name__)


def main(argv: Sequence[str] | None = None) -> int:
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NotConverged as exc:
        print(f"error: solver did not converge: {exc}", file=sys.stderr)
        return EXIT_NOCONV
    except DataError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DdacError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def _configure_logging() -> None:
    wanted = os.environ.get("DDAC_LOG", "quiet").lower()
    levels = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
    if wanted not in levels:
        print(f"warning: DDAC_LOG={wanted!r} not recognized, using quiet", file=sys.stderr)
        wanted = "quiet"
    logging.basicConfig(
        level=levels[wanted], stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ddacspam",
        description="Feature-distributed sparse additive model fitting and testing.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="fit a CSV dataset and write the selection")
    _data_flags(fit)
    _fit_flags(fit)
    fit.add_argument("--out", default="fit_result.txt", help="result file path")
    fit.set_defaults(func=cmd_fit)

    infer = sub.add_parser("infer", help="fit, then test individual features")
    _data_flags(infer)
    _fit_flags(infer)
    which = infer.add_mutually_exclusive_group(required=True)
    which.add_argument("--features", help="comma-separated 1-based feature indices")
    which.add_argument("--all", action="store_true", help="test every feature")
    infer.add_argument("--alpha", type=float, default=0.05, help="test level")
    infer.add_argument("--out", default="test_reports.txt", help="report file path")
    infer.set_defaults(func=cmd_infer)

    sim = sub.add_parser("simulate", help="generate one scenario realization")
    sim.add_argument("--scenario", required=True,
                     help="key=value tokens, e.g. 'example_id=ex1 n=100 p=20 seed=7'")
    sim.add_argument("--seed", type=int, default=None,
                     help="seed, if the scenario text does not carry one")
    sim.add_argument("--out", default=None, help="CSV path (default derived)")
    sim.set_defaults(func=cmd_simulate)

    study = sub.add_parser("study", help="repeat a scenario and tabulate metrics")
    study.add_argument("--scenario", required=True, help="key=value scenario text")
    study.add_argument("--seed", type=int, required=True, help="study-level seed")
    study.add_argument("--reps", type=int, default=1, help="repetitions per cell")
    study.add_argument("--m", type=int, default=10, help="workers for the fits")
    study.add_argument("--alpha", type=float, default=0.05,
                       help="test level (fig3 scenarios)")
    study.add_argument("--dn", type=int, default=None, help="basis dimension override")
    study.add_argument("--out", default="study", help="output path prefix")
    study.set_defaults(func=cmd_study)

    demo = sub.add_parser("decorrelate-demo",
                          help="quasi-correlation quantiles over an equicorrelation grid")
    demo.add_argument("--scenario", default="",
                      help="optional 'n=200 p=100' size overrides")
    demo.add_argument("--seed", type=int, default=0)
    demo.add_argument("--r", type=float, default=DEFAULT_RIDGE, help="ridge parameter")
    demo.add_argument("--dn", type=int, default=None, help="basis dimension override")
    demo.add_argument("--out", default="quasi_correlation.csv", help="records file path")
    demo.set_defaults(func=cmd_decorrelate_demo)

    serve = sub.add_parser("serve-worker", help="host one socket worker endpoint")
    serve.add_argument("--port", type=int, required=True)
    serve.add_argument("--persistent", action="store_true",
                       help="keep serving connections until an accept times out")
    serve.add_argument("--timeout", type=float, default=600.0,
                       help="accept/read timeout in seconds")
    serve.set_defaults(func=cmd_serve_worker)

    return parser


def _data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--input", required=True, help="CSV file with a header row")
    p.add_argument("--response", default="y", help="response column name")


def _fit_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--m", type=int, required=True, help="number of workers")
    p.add_argument("--r", type=float, default=1.0, help="decorrelation ridge")
    p.add_argument("--seed", type=int, default=0, help="partition and fold seed")
    p.add_argument("--mode", choices=("ddac", "dac", "spam"), default="ddac")
    p.add_argument("--transport", choices=("in_process", "socket"), default="in_process")
    p.add_argument("--port", type=int, default=53800, help="socket base port")
    p.add_argument("--dn", type=int, default=None, help="basis dimension override")


# --------------------------------------------------------------- helpers


def _write_text(path: str, text: str) -> None:
    """Write whole-file-or-nothing: temp in the target directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _parse_features(text: str) -> list[int]:
    try:
        features = [int(tok) for tok in text.replace(",", " ").split()]
    except ValueError:
        raise ValueError(f"--features wants integers, got {text!r}") from None
    if not features:
        raise ValueError("--features is empty")
    return features


def _scenario_with_seed(text: str, seed: int | None):
    tokens = text.split()
    if seed is not None and not any(t.startswith("seed=") for t in tokens):
        text = f"{text} seed={seed}"
    return parse_scenario(text)


def _parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for token in text.split():
        if "=" not in token:
            raise ValueError(f"expected key=value, got {token!r}")
        key, value = token.split("=", 1)
        out[key] = value
    return out


# -------------------------------------------------------------- commands


def cmd_fit(args) -> int:
    dataset = load_dataset(args.input, args.response)
    fit = run_ddac_spam(
        dataset, m=args.m, r=args.r, seed=args.seed, mode=args.mode,
        transport=args.transport, d_n=args.dn, base_port=args.port,
    )
    lines = [
        "# ddacspam fit",
        f"# mode={args.mode} m={args.m} r={args.r:g} seed={args.seed} "
        f"transport={args.transport}",
        f"# input={args.input} response={args.response}",
        f"# n={dataset.n} p={dataset.p} d_n={fit.config['d_n']} "
        f"dn_override={'none' if args.dn is None else args.dn}",
        f"# intercept={fit.intercept!r} ridge_lambda={fit.ridge_lambda!r}",
        "[selected]",
        " ".join(str(j) for j in fit.selected),
    ]
    for j in fit.selected:
        lines.append(f"[beta feature={j}]")
        lines.append(" ".join(f"{v:.17g}" for v in fit.beta_hat[j]))
    for j in fit.selected:
        col = dataset.x[:, j - 1]
        grid = np.linspace(col.min(), col.max(), GRID_POINTS)
        values = fit.f_hat[j](grid)
        lines.append(f"[component feature={j}]")
        lines.extend(f"{g:.17g} {v:.17g}" for g, v in zip(grid, values))
    lines.append("[workers]")
    lines.append("machine assigned selected sweeps converged lambda idle")
    for w in fit.per_worker:
        lines.append(
            f"{w.machine} {w.assigned} {len(w.selected)} {w.sweeps} "
            f"{int(w.converged)} {w.lam:.6g} {int(w.idle)}"
        )
    lines.append("[timings]")
    lines.extend(f"{k} {v:.6f}" for k, v in sorted(fit.timings.items()))
    _write_text(args.out, "\n".join(lines) + "\n")
    print(f"selected {len(fit.selected)} of {dataset.p} features -> {args.out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    dataset = load_dataset(args.input, args.response)
    features = (
        list(range(1, dataset.p + 1)) if args.all else _parse_features(args.features)
    )
    reports = run_inference(
        dataset, m=args.m, features=features, alpha=args.alpha, r=args.r,
        seed=args.seed, mode=args.mode, transport=args.transport,
        d_n=args.dn, base_port=args.port,
    )
    lines = [
        "# ddacspam infer",
        f"# mode={args.mode} m={args.m} alpha={args.alpha:g} seed={args.seed} "
        f"sigma_hat={reports[0].sigma_hat:.6g}",
        "feature statistic dof p_value decision machine local_index",
    ]
    for rep in reports:
        lines.append(
            f"{rep.feature} {rep.statistic:.6g} {rep.dof} {rep.p_value:.6g} "
            f"{rep.decision} {rep.machine} {rep.local_index}"
        )
    _write_text(args.out, "\n".join(lines) + "\n")
    for line in lines[2:]:
        print(line)
    return EXIT_OK


def cmd_simulate(args) -> int:
    spec = _scenario_with_seed(args.scenario, args.seed)
    dataset = generate(spec)
    out = args.out
    if out is None:
        out = f"{spec.example_id}_n{spec.n}_p{spec.p}_seed{spec.seed}.csv"
    tmp = out + ".tmp"
    export_csv(dataset, tmp)
    os.replace(tmp, out)
    truth = dataset.truth
    sidecar_lines = [
        f"example_id={spec.example_id} n={spec.n} p={spec.p} seed={spec.seed} "
        f"a={spec.a:g}"
        + ("" if spec.t_or_rho is None else f" t_or_rho={spec.t_or_rho:g}"),
        f"sigma={truth.sigma!r}",
        "active_set=" + " ".join(str(j) for j in truth.active_set),
        "h_values",
    ]
    sidecar_lines.extend(f"{v:.17g}" for v in truth.h_values)
    _write_text(out + ".truth.txt", "\n".join(sidecar_lines) + "\n")
    print(f"wrote {out} and {out}.truth.txt")
    return EXIT_OK


def cmd_study(args) -> int:
    spec = _scenario_with_seed(args.scenario, None)
    if spec.example_id == "fig3":
        table = testing_study(
            [spec.a], r=args.reps, seed=args.seed, alpha=args.alpha,
            n=spec.n, p=spec.p, m=args.m, d_n=args.dn,
        )
    else:
        table = run_study(
            [spec], r=args.reps, seed=args.seed, m=args.m, d_n=args.dn,
        )
    text = table.to_text()
    _write_text(args.out + ".txt", text + "\n")
    table.write_records(args.out + ".csv")
    print(text)
    print(f"wrote {args.out}.txt and {args.out}.csv")
    return EXIT_OK


def cmd_decorrelate_demo(args) -> int:
    params = _parse_kv(args.scenario)
    unknown = params.keys() - {"n", "p"}
    if unknown:
        raise ValueError(f"decorrelate-demo accepts n and p, got {sorted(unknown)}")
    n = int(params.get("n", 200))
    p = int(params.get("p", 100))
    d_n = args.dn if args.dn is not None else compute_dn(n)
    summaries = [
        quasi_correlation_study(n, p, rho, d_n, seed=args.seed, r=args.r)
        for rho in DEMO_RHO_GRID
    ]
    grid = summaries[0].quantile_grid
    fieldnames = (
        ["rho", "n", "p", "d_n", "n_pairs"]
        + [f"before_q{int(100 * q):02d}" for q in grid]
        + [f"after_q{int(100 * q):02d}" for q in grid]
        + ["median_abs_before", "median_abs_after"]
    )
    rows = []
    for s in summaries:
        row = {"rho": s.rho, "n": s.n, "p": s.p, "d_n": s.d_n, "n_pairs": s.n_pairs}
        row.update(
            {f"before_q{int(100 * q):02d}": f"{v:.6g}"
             for q, v in zip(grid, s.before_quantiles)}
        )
        row.update(
            {f"after_q{int(100 * q):02d}": f"{v:.6g}"
             for q, v in zip(grid, s.after_quantiles)}
        )
        row["median_abs_before"] = f"{s.median_abs_before:.6g}"
        row["median_abs_after"] = f"{s.median_abs_after:.6g}"
        rows.append(row)

    directory = os.path.dirname(os.path.abspath(args.out))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fieldnames)
            writer.writeheader()
            writer.writerows(rows)
        os.replace(tmp, args.out)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    for s in summaries:
        print(
            f"rho={s.rho:.1f}  median|q| before={s.median_abs_before:.4f} "
            f"after={s.median_abs_after:.4f}  ({s.n_pairs} pairs)"
        )
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_serve_worker(args) -> int:
    served = serve_worker(args.port, persistent=args.persistent, timeout=args.timeout)
    print(f"served {served} connection(s) on port {args.port}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
