"""Seeded generators for the five simulation scenarios and the scaled-signal
testing scenario.

Every scenario draws covariates, evaluates four fixed component functions
on features 1..4, and adds Gaussian noise; everything past feature 4 is
inert.  The returned Dataset carries a GroundTruth with the realized
signal values and per-feature callables, so selection error counts and
out-of-sample signal error can be scored exactly.

Covariate families:

  ex1   iid Uniform(-2.5, 2.5)
  ex2   iid standard normal
  ex3   X_j = (W_j + t U_s) / (1 + t), W and U iid Uniform(0, 1); features
        share one U per segment of 20, so within-segment correlation is
        t^2 / (1 + t^2)
  ex4   as ex3 with a single global U shared by every feature
  ex5   equicorrelated standard normal, common correlation rho
  fig3  ex3 covariates with the whole signal scaled by a >= 0; a = 0 is
        the exact global null

The dependence parameter (t for ex3/ex4, rho for ex5) defaults to the
values above the simulations use, t = 1.5 and rho = 0.5, and can be
overridden through ScenarioSpec.t_or_rho.

A note on stress-testing with real data: a practical recipe is to keep a
real response and covariate block and append a few thousand synthetic
noise columns drawn like ex5's equicorrelated family, which preserves the
selection problem's difficulty without inventing a response model.  This
module does not package such hybrids.
"""

from __future__ import annotations

import math
from typing import Callable, Mapping

import numpy as np
from numpy.typing import NDArray

from .core import Dataset, GroundTruth, ScenarioSpec
from .errors import NoGroundTruth, OutOfRange

SEGMENT = 20  # features per shared random effect in ex3
DEFAULT_T = 1.5
DEFAULT_RHO = 0.5

EXAMPLE_IDS = ("ex1", "ex2", "ex3", "ex4", "ex5")


# ------------------------------------------------------------ components


def g1(x: NDArray[np.float64]) -> NDArray[np.float64]:
    """Identity."""
    return np.asarray(x, dtype=np.float64)


def g2(x: NDArray[np.float64]) -> NDArray[np.float64]:
    """Centered square: x^2 - 25/12 has mean zero over Uniform(-2.5, 2.5)."""
    return x**2 - 25.0 / 12.0


def g3(x: NDArray[np.float64], omega: float) -> NDArray[np.float64]:
    return np.sin(omega * x)


def g4(x: NDArray[np.float64]) -> NDArray[np.float64]:
    """exp(-x) centered to mean zero over Uniform(-2.5, 2.5)."""
    return np.exp(-x) - 0.4 * math.sinh(2.5)


def g5(x: NDArray[np.float64]) -> NDArray[np.float64]:
    return (x - 1.0) ** 2


def g6(x: NDArray[np.float64], omega: float) -> NDArray[np.float64]:
    s = np.sin(omega * x)
    return s / (2.0 - s)


def g7(x: NDArray[np.float64], omega: float) -> NDArray[np.float64]:
    s = np.sin(omega * x)
    c = np.cos(omega * x)
    return 0.1 * s + 0.2 * c + 0.3 * s**2 + 0.4 * c**3 + 0.5 * s**3


def component_functions() -> Mapping[str, Callable]:
    """The shared component library; g3, g6, g7 take a frequency argument."""
    return {"g1": g1, "g2": g2, "g3": g3, "g4": g4, "g5": g5, "g6": g6, "g7": g7}


# (coefficient, function, frequency or None) for features 1..4
_PARTS: dict[str, tuple[tuple[float, Callable, float | None], ...]] = {
    "ex1": ((2.0, g1, None), (1.6, g2, None), (-4.0, g3, 2.0), (1.0, g4, None)),
    "ex2": ((5.0, g1, None), (2.1, g5, None),
            (13.2, g6, math.pi / 4), (17.2, g7, math.pi / 4)),
    "ex3": ((2.5, g1, None), (2.6, g5, None),
            (1.0, g6, 2 * math.pi), (1.0, g7, 2 * math.pi)),
    "ex5": ((2.5, g1, None), (1.0, g5, None),
            (6.5, g6, math.pi / 4), (8.5, g7, math.pi / 4)),
}
_PARTS["ex4"] = _PARTS["ex3"]
_PARTS["fig3"] = _PARTS["ex3"]

_SIGMA = {"ex1": 1.5, "ex2": 2.56, "ex3": 0.3, "ex4": 0.3, "ex5": 1.2, "fig3": 0.5}


def _scaled(coef: float, fn: Callable, omega: float | None) -> Callable:
    if omega is None:
        return lambda x: coef * fn(x)
    return lambda x: coef * fn(x, omega)


def _component_map(example_id: str, a: float = 1.0) -> dict[int, Callable]:
    return {
        j: _scaled(a * coef, fn, omega)
        for j, (coef, fn, omega) in enumerate(_PARTS[example_id], start=1)
    }


# ------------------------------------------------------------- covariates


def _covariates(
    example_id: str, n: int, p: int, rng: np.random.Generator, t_or_rho: float | None
) -> NDArray[np.float64]:
    if example_id == "ex1":
        return rng.uniform(-2.5, 2.5, size=(n, p))
    if example_id == "ex2":
        return rng.standard_normal((n, p))
    if example_id in ("ex3", "ex4", "fig3"):
        t = DEFAULT_T if t_or_rho is None else t_or_rho
        if t < 0.0:
            raise OutOfRange(f"shared-effect weight t must be >= 0, got {t}")
        w = rng.uniform(0.0, 1.0, size=(n, p))
        n_shared = 1 if example_id == "ex4" else (p + SEGMENT - 1) // SEGMENT
        u = rng.uniform(0.0, 1.0, size=(n, n_shared))
        segment = np.zeros(p, dtype=np.intp)
        if n_shared > 1:
            segment = np.arange(p) // SEGMENT
        return (w + t * u[:, segment]) / (1.0 + t)
    if example_id == "ex5":
        rho = DEFAULT_RHO if t_or_rho is None else t_or_rho
        if not 0.0 <= rho < 1.0:
            raise OutOfRange(f"common correlation must be in [0, 1), got {rho}")
        shared = rng.standard_normal((n, 1))
        own = rng.standard_normal((n, p))
        return math.sqrt(rho) * shared + math.sqrt(1.0 - rho) * own
    raise OutOfRange(f"unknown example_id {example_id!r}")


# ------------------------------------------------------------- generators


def gen_example(spec: ScenarioSpec) -> Dataset:
    """Generate one scenario realization with its ground truth attached.

    Features 1..4 carry the signal, so p must be at least 4.  The noise
    scale is fixed per example: 1.5, 2.56, 0.3, 0.3, 1.2 for ex1..ex5.
    """
    if spec.example_id not in EXAMPLE_IDS:
        raise OutOfRange(
            f"example_id must be one of {EXAMPLE_IDS}, got {spec.example_id!r}"
        )
    if spec.p < 4:
        raise OutOfRange(f"scenarios place signal on features 1..4; got p={spec.p}")
    rng = np.random.default_rng(spec.seed)
    x = _covariates(spec.example_id, spec.n, spec.p, rng, spec.t_or_rho)
    components = _component_map(spec.example_id)
    h = np.zeros(spec.n)
    for j, fn in components.items():
        h += fn(x[:, j - 1])
    sigma = _SIGMA[spec.example_id]
    y = h + sigma * rng.standard_normal(spec.n)
    truth = GroundTruth(
        active_set=(1, 2, 3, 4),
        h_values=h,
        sigma=sigma,
        component_eval=components,
        scenario=spec,
    )
    return Dataset(y=y, x=x, truth=truth)


def gen_fig3(a: float, n: int, p: int, seed: int) -> Dataset:
    """Testing scenario: ex3 covariates, signal scaled by a, noise sd 0.5.

    a = 0 removes the signal entirely; the ground truth then carries an
    empty active set so every rejection counts as a false positive.
    """
    if a < 0.0:
        raise OutOfRange(f"signal scale a must be >= 0, got {a}")
    if p < 4:
        raise OutOfRange(f"scenarios place signal on features 1..4; got p={p}")
    spec = ScenarioSpec(example_id="fig3", n=n, p=p, seed=seed, a=a)
    rng = np.random.default_rng(seed)
    x = _covariates("fig3", n, p, rng, None)
    sigma = _SIGMA["fig3"]
    if a == 0.0:
        truth = GroundTruth(
            active_set=(),
            h_values=np.zeros(n),
            sigma=sigma,
            component_eval={},
            scenario=spec,
        )
        return Dataset(y=sigma * rng.standard_normal(n), x=x, truth=truth)
    components = _component_map("fig3", a=a)
    h = np.zeros(n)
    for j, fn in components.items():
        h += fn(x[:, j - 1])
    truth = GroundTruth(
        active_set=(1, 2, 3, 4),
        h_values=h,
        sigma=sigma,
        component_eval=components,
        scenario=spec,
    )
    return Dataset(y=h + sigma * rng.standard_normal(n), x=x, truth=truth)


def snr(dataset: Dataset) -> float:
    """Sample variance of the realized signal over the noise variance."""
    if dataset.truth is None:
        raise NoGroundTruth("dataset carries no ground truth")
    h = dataset.truth.h_values
    if h.shape[0] < 2:
        return 0.0
    return float(h.var(ddof=1) / dataset.truth.sigma**2)


# ------------------------------------------------------------ config + io


def parse_scenario(text: str) -> ScenarioSpec:
    """Build a ScenarioSpec from key=value lines.

    Recognized keys: example_id (required), n, p, seed (required integers),
    a, t_or_rho (optional floats).  Blank lines and #-comments are skipped;
    tokens may also share a line.
    """
    fields: dict[str, str] = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        for token in line.split():
            if "=" not in token:
                raise ValueError(f"expected key=value, got {token!r}")
            key, value = token.split("=", 1)
            if key in fields:
                raise ValueError(f"duplicate key {key!r}")
            fields[key] = value
    missing = {"example_id", "n", "p", "seed"} - fields.keys()
    if missing:
        raise ValueError(f"missing required keys: {sorted(missing)}")
    unknown = fields.keys() - {"example_id", "n", "p", "seed", "a", "t_or_rho"}
    if unknown:
        raise ValueError(f"unknown keys: {sorted(unknown)}")
    try:
        spec = ScenarioSpec(
            example_id=fields["example_id"],
            n=int(fields["n"]),
            p=int(fields["p"]),
            seed=int(fields["seed"]),
            a=float(fields.get("a", 1.0)),
            t_or_rho=float(fields["t_or_rho"]) if "t_or_rho" in fields else None,
        )
    except ValueError as exc:
        raise ValueError(f"bad scenario value: {exc}") from None
    if spec.n < 1 or spec.p < 1:
        raise OutOfRange(f"need n >= 1 and p >= 1, got n={spec.n}, p={spec.p}")
    return spec


def generate(spec: ScenarioSpec) -> Dataset:
    """Dispatch on example_id, routing fig3 through its signal scale."""
    if spec.example_id == "fig3":
        return gen_fig3(spec.a, spec.n, spec.p, spec.seed)
    return gen_example(spec)


def export_csv(dataset: Dataset, path: str) -> None:
    """Write y plus covariates as CSV, full double precision, load_dataset form."""
    header = ",".join(("y",) + dataset.feature_names)
    table = np.column_stack([dataset.y, dataset.x])
    np.savetxt(path, table, fmt="%.17g", delimiter=",", header=header, comments="")
