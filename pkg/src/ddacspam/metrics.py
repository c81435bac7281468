"""Selection and estimation metrics and the repetition harness.

A study cell is one (scenario, method) pair; the harness repeats it R
times with per-repetition seeds derived from the study seed, scores each
run against the scenario's ground truth, and reports mean (sd) per
metric.  Failed repetitions are counted, never silently dropped.  Four
methods are available: the decorrelated distributed fit, the plain
distributed fit, the single-machine fit, and an oracle that skips
selection entirely and ridge-refines on the true support.

Signal error is reported both on a fresh sample of the training size
(the decision-relevant quantity, regenerable from the scenario) and on
the training points.  Wall times are carried per phase for inspection
but are hardware facts, not assertions.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

import numpy as np
from numpy.typing import NDArray

from .core import Dataset, GroundTruth, ScenarioSpec
from .errors import DdacError, NoGroundTruth
from .runtime import FeatureFunction, ridge_refine, run_ddac_spam, run_inference
from .spline import build_basis, compute_dn, design_columns, standardize
from .synthgen import gen_fig3, generate

METHODS = ("ddac", "dac", "spam", "oracle")
SCALAR_METRICS = ("fp", "fn", "mse", "mse_train", "seconds")


# -------------------------------------------------------------- per run


def confusion(s_hat: Iterable[int], s_true: Iterable[int]) -> tuple[int, int]:
    """False positive and false negative counts between two feature sets."""
    hat, true = set(s_hat), set(s_true)
    return len(hat - true), len(true - hat)


def mse_h(fit, truth: GroundTruth, test_points: NDArray[np.float64]) -> float:
    """Mean squared gap between the fitted and the true signal surface."""
    x = np.asarray(test_points, dtype=np.float64)
    return float(np.mean((fit.predict_h(x) - truth.h(x)) ** 2))


@dataclass(frozen=True)
class RunMetrics:
    fp: int
    fn_: int
    mse: float
    mse_train: float
    wall_times: Mapping[str, float]

    def scalars(self) -> dict[str, float]:
        return {
            "fp": float(self.fp),
            "fn": float(self.fn_),
            "mse": self.mse,
            "mse_train": self.mse_train,
            "seconds": float(self.wall_times.get("total", 0.0)),
        }


def score_run(fit, dataset: Dataset, test_x: NDArray[np.float64]) -> RunMetrics:
    truth = dataset.truth
    if truth is None:
        raise NoGroundTruth("scoring needs the generating scenario's truth")
    fp, fn = confusion(fit.selected, truth.active_set)
    return RunMetrics(
        fp=fp,
        fn_=fn,
        mse=mse_h(fit, truth, test_x),
        mse_train=mse_h(fit, truth, dataset.x),
        wall_times=dict(fit.timings),
    )


# ------------------------------------------------------------ the oracle


@dataclass(eq=False)
class OracleFit:
    """Ridge refinement on the true support, no selection stage."""

    selected: tuple[int, ...]
    beta_hat: dict[int, NDArray[np.float64]]
    intercept: float
    f_hat: dict[int, FeatureFunction]
    ridge_lambda: float
    timings: dict[str, float]

    def predict_h(self, x: NDArray[np.float64]) -> NDArray[np.float64]:
        x = np.asarray(x, dtype=np.float64)
        out = np.full(x.shape[0], self.intercept)
        for j, fn in self.f_hat.items():
            out += fn(x[:, j - 1])
        return out


def fit_oracle(
    dataset: Dataset, seed: int = 0, d_n: int | None = None, folds: int = 5
) -> OracleFit:
    """Fit the refinement stage directly on the true support's design."""
    truth = dataset.truth
    if truth is None:
        raise NoGroundTruth("the oracle method needs the true active set")
    t0 = time.perf_counter()
    d_n = d_n if d_n is not None else compute_dn(dataset.n)
    bases, blocks = [], []
    for j in truth.active_set:
        col = dataset.x[:, j - 1]
        basis = build_basis(col, d_n, feature_index=j)
        bases.append(basis)
        blocks.append(standardize(design_columns(basis, col), j))
    psi = (
        np.hstack([b.standardized for b in blocks])
        if blocks
        else np.zeros((dataset.n, 0))
    )
    refined = ridge_refine(dataset.y, psi, folds=folds, seed=seed)
    beta_hat: dict[int, NDArray[np.float64]] = {}
    f_hat: dict[int, FeatureFunction] = {}
    offset = 0
    for j, basis, block in zip(truth.active_set, bases, blocks):
        width = block.standardized.shape[1]
        beta = refined.beta[offset : offset + width]
        offset += width
        beta_hat[j] = beta
        f_hat[j] = FeatureFunction(
            feature=j,
            degree=basis.degree,
            interior_knots=np.asarray(basis.interior_knots),
            boundary_lo=basis.boundary[0],
            boundary_hi=basis.boundary[1],
            col_means=block.col_means,
            col_sds=block.col_sds,
            beta=beta,
        )
    return OracleFit(
        selected=tuple(truth.active_set),
        beta_hat=beta_hat,
        intercept=refined.intercept,
        f_hat=f_hat,
        ridge_lambda=refined.lam,
        timings={"total": time.perf_counter() - t0},
    )


# ------------------------------------------------------------- the study


@dataclass(frozen=True)
class StudyCell:
    """One (scenario, method) aggregate; sd is empty when only one run counts."""

    scenario: str
    method: str
    r: int
    failures: int
    mean: Mapping[str, float]
    sd: Mapping[str, float]
    runs: tuple[RunMetrics, ...]


@dataclass(frozen=True)
class StudyTable:
    rows: tuple[StudyCell, ...]

    def to_text(self) -> str:
        head = f"{'scenario':<10} {'method':<8} {'R':>4} {'fail':>4}"
        for name in SCALAR_METRICS:
            head += f" {name:>18}"
        lines = [head]
        for cell in self.rows:
            line = f"{cell.scenario:<10} {cell.method:<8} {cell.r:>4} {cell.failures:>4}"
            for name in SCALAR_METRICS:
                if name not in cell.mean:
                    line += f" {'-':>18}"
                elif name in cell.sd:
                    line += f" {cell.mean[name]:>10.4g} ({cell.sd[name]:.3g})".rjust(19)
                else:
                    line += f" {cell.mean[name]:>18.4g}"
            lines.append(line)
        return "\n".join(lines)

    def to_records(self) -> list[dict]:
        records = []
        for cell in self.rows:
            for name in SCALAR_METRICS:
                if name not in cell.mean:
                    continue
                records.append(
                    {
                        "scenario": cell.scenario,
                        "method": cell.method,
                        "metric": name,
                        "mean": cell.mean[name],
                        "sd": cell.sd.get(name, ""),
                        "r": cell.r,
                        "failures": cell.failures,
                    }
                )
        return records

    def write_records(self, path: str) -> None:
        records = self.to_records()
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["scenario", "method", "metric", "mean", "sd", "r", "failures"]
            )
            writer.writeheader()
            writer.writerows(records)

    def cell(self, scenario: str, method: str) -> StudyCell:
        for row in self.rows:
            if row.scenario == scenario and row.method == method:
                return row
        raise KeyError(f"no cell ({scenario}, {method})")


def _rep_seeds(study_seed: int, tag: int, rep: int) -> tuple[int, int, int]:
    ss = np.random.SeedSequence([study_seed, tag, rep])
    a, b, c = ss.generate_state(3, dtype=np.uint64)
    return int(a), int(b), int(c)


def _fit_once(method: str, dataset: Dataset, m: int, fit_seed: int,
              d_n: int | None, folds: int):
    if method == "oracle":
        return fit_oracle(dataset, seed=fit_seed, d_n=d_n, folds=folds)
    workers = 1 if method == "spam" else m
    return run_ddac_spam(
        dataset, m=workers, seed=fit_seed, mode=method, d_n=d_n, folds=folds
    )


def run_study(
    scenarios: Sequence[ScenarioSpec],
    methods: Sequence[str] = METHODS,
    r: int = 1,
    seed: int = 0,
    m: int = 10,
    d_n: int | None = None,
    folds: int = 5,
) -> StudyTable:
    """Repeat each scenario R times and score every requested method.

    All methods within a repetition see the same realized dataset and the
    same fresh evaluation sample, so cells are directly comparable row by
    row.  A repetition that raises a fitting or data error counts toward
    the cell's failure tally and contributes nothing to the means.
    """
    if r < 1:
        raise ValueError(f"need r >= 1, got {r}")
    bad = set(methods) - set(METHODS)
    if bad:
        raise ValueError(f"unknown methods: {sorted(bad)}")
    rows = []
    for tag, spec in enumerate(scenarios):
        runs: dict[str, list[RunMetrics]] = {meth: [] for meth in methods}
        failures: dict[str, int] = {meth: 0 for meth in methods}
        for rep in range(r):
            data_seed, fit_seed, test_seed = _rep_seeds(seed, tag, rep)
            dataset = generate(replace(spec, seed=data_seed))
            test_x = generate(replace(spec, seed=test_seed)).x
            for meth in methods:
                try:
                    fit = _fit_once(meth, dataset, m, fit_seed, d_n, folds)
                    runs[meth].append(score_run(fit, dataset, test_x))
                except DdacError:
                    failures[meth] += 1
        label = _scenario_label(spec)
        for meth in methods:
            rows.append(_summarize(label, meth, r, failures[meth], runs[meth]))
    return StudyTable(rows=tuple(rows))


def _scenario_label(spec: ScenarioSpec) -> str:
    if spec.example_id == "fig3":
        return f"fig3[a={spec.a:g}]"
    return spec.example_id


def _summarize(
    label: str, method: str, r: int, failures: int, runs: list[RunMetrics]
) -> StudyCell:
    mean: dict[str, float] = {}
    sd: dict[str, float] = {}
    if runs:
        table = {name: [m.scalars()[name] for m in runs] for name in SCALAR_METRICS}
        mean = {name: float(np.mean(vals)) for name, vals in table.items()}
        if len(runs) > 1:
            sd = {name: float(np.std(vals, ddof=1)) for name, vals in table.items()}
    return StudyCell(
        scenario=label, method=method, r=r, failures=failures,
        mean=mean, sd=sd, runs=tuple(runs),
    )


# ------------------------------------------------------------- hypothesis


@dataclass(frozen=True)
class TestingRow:
    a: float
    r: int
    type1: float
    power: float
    null_tests: int
    active_tests: int
    failures: int


@dataclass(frozen=True)
class TestingTable:
    rows: tuple[TestingRow, ...]
    alpha: float

    def to_text(self) -> str:
        lines = [
            f"{'a':>6} {'R':>5} {'type1':>8} {'power':>8} "
            f"{'nulls':>6} {'active':>7} {'fail':>5}   alpha={self.alpha:g}"
        ]
        for row in self.rows:
            t1 = f"{row.type1:.4f}" if not math.isnan(row.type1) else "-"
            pw = f"{row.power:.4f}" if not math.isnan(row.power) else "-"
            lines.append(
                f"{row.a:>6g} {row.r:>5} {t1:>8} {pw:>8} "
                f"{row.null_tests:>6} {row.active_tests:>7} {row.failures:>5}"
            )
        return "\n".join(lines)

    def to_records(self) -> list[dict]:
        return [
            {
                "a": row.a, "r": row.r, "alpha": self.alpha,
                "type1": row.type1, "power": row.power,
                "null_tests": row.null_tests, "active_tests": row.active_tests,
                "failures": row.failures,
            }
            for row in self.rows
        ]

    def write_records(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(
                fh,
                fieldnames=[
                    "a", "r", "alpha", "type1", "power",
                    "null_tests", "active_tests", "failures",
                ],
            )
            writer.writeheader()
            writer.writerows(self.to_records())


def testing_study(
    a_grid: Sequence[float],
    r: int = 1,
    seed: int = 0,
    alpha: float = 0.05,
    n: int = 300,
    p: int = 500,
    m: int = 10,
    n_null: int = 10,
    d_n: int | None = None,
    folds: int = 5,
) -> TestingTable:
    """Rejection rates of the per-feature test across signal scales.

    Every repetition tests features 1..4 plus n_null seeded draws from
    the inert range.  Rejections on truly inactive features (all features
    when a = 0) accumulate into the type-I rate; rejections on active
    ones into power.  Rates with an empty denominator come back NaN.
    """
    if r < 1:
        raise ValueError(f"need r >= 1, got {r}")
    rows = []
    for a in a_grid:
        if a < 0:
            raise ValueError(f"signal scale must be >= 0, got {a}")
        null_hits = null_total = act_hits = act_total = failures = 0
        for rep in range(r):
            data_seed, fit_seed, pick_seed = _rep_seeds(
                seed, int(round(a * 1_000_000)), rep
            )
            dataset = gen_fig3(a, n, p, seed=data_seed)
            pool = np.arange(5, p + 1)
            picks = np.random.default_rng(pick_seed).choice(
                pool, size=min(n_null, pool.size), replace=False
            )
            features = [1, 2, 3, 4] + sorted(int(j) for j in picks)
            try:
                reports = run_inference(
                    dataset, m=m, features=features, alpha=alpha,
                    seed=fit_seed, d_n=d_n, folds=folds,
                )
            except DdacError:
                failures += 1
                continue
            active = set(dataset.truth.active_set)
            for report in reports:
                rejected = report.decision == "Reject"
                if report.feature in active:
                    act_total += 1
                    act_hits += rejected
                else:
                    null_total += 1
                    null_hits += rejected
        rows.append(
            TestingRow(
                a=a, r=r,
                type1=null_hits / null_total if null_total else math.nan,
                power=act_hits / act_total if act_total else math.nan,
                null_tests=null_total, active_tests=act_total,
                failures=failures,
            )
        )
    return TestingTable(rows=tuple(rows), alpha=alpha)
