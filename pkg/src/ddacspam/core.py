"""Shared domain types, the feature partition, and dataset ingestion.

Feature indices are 1-based everywhere a human sees them (reports, plans,
ground truth); raw array columns are 0-based internally, and the boundary
between the two conventions sits exactly at the record types defined here.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from numpy.typing import NDArray

from .errors import (
    ConstantColumn,
    MissingColumn,
    MissingFile,
    NonNumericCell,
    OutOfRange,
    TooFewRows,
)

MIN_ROWS = 8


@dataclass(frozen=True)
class ScenarioSpec:
    """Identifies a synthetic scenario; carried by GroundTruth for regeneration.

    ``example_id`` is "ex1".."ex5" or "fig3"; ``a`` applies to fig3 only.
    ``t_or_rho`` overrides the dependence parameter where one exists: the
    shared-effect weight t in ex3/ex4 (default 1.5) or the common
    correlation in ex5 (default 0.5).  Must satisfy t >= 0, 0 <= rho < 1.
    """

    example_id: str
    n: int
    p: int
    seed: int
    a: float = 1.0
    t_or_rho: float | None = None


@dataclass(frozen=True)
class GroundTruth:
    """What the generator knows: active set, component functions, noise scale.

    component_eval maps 1-based feature index j to a vectorized callable
    returning the coefficient-scaled component f_j at fresh points.
    """

    active_set: tuple[int, ...]
    h_values: NDArray[np.float64]
    sigma: float
    component_eval: Mapping[int, Callable[[NDArray[np.float64]], NDArray[np.float64]]]
    scenario: ScenarioSpec | None = None

    def h(self, x: NDArray[np.float64]) -> NDArray[np.float64]:
        """Evaluate h(x) = sum of active components at fresh points (n×p array)."""
        out = np.zeros(x.shape[0])
        for j in self.active_set:
            out += self.component_eval[j](x[:, j - 1])
        return out


@dataclass(frozen=True)
class Dataset:
    y: NDArray[np.float64]
    x: NDArray[np.float64]
    truth: GroundTruth | None = None
    feature_names: tuple[str, ...] = ()

    def __post_init__(self):
        y = np.ascontiguousarray(self.y, dtype=np.float64)
        x = np.ascontiguousarray(self.x, dtype=np.float64)
        if x.ndim != 2 or y.ndim != 1 or y.shape[0] != x.shape[0]:
            raise TooFewRows(f"incompatible shapes y{y.shape}, x{x.shape}")
        n, p = x.shape
        if n < MIN_ROWS:
            raise TooFewRows(f"need at least {MIN_ROWS} rows, got {n}")
        if p < 1:
            raise MissingColumn("no covariate columns")
        if not (np.isfinite(y).all() and np.isfinite(x).all()):
            raise NonNumericCell(-1, "<non-finite>")
        names = self.feature_names or tuple(f"x{j}" for j in range(1, p + 1))
        if len(names) != p:
            raise MissingColumn("feature_names length mismatch")
        for j in range(p):
            if x[:, j].std() == 0.0:
                raise ConstantColumn(names[j])
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "feature_names", names)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]


@dataclass(frozen=True)
class PartitionPlan:
    """Assignment of 1-based features to 1-based machines.

    machines[i-1] lists machine i's global feature indices in ascending
    order; the local index k of feature j is its 1-based position there.
    assignment[j-1] = (i, k) is the inverse view of the same bijection.
    """

    m: int
    machines: tuple[tuple[int, ...], ...]
    seed: int
    assignment: tuple[tuple[int, int], ...] = field(init=False)

    def __post_init__(self):
        p = sum(len(block) for block in self.machines)
        pairs: list[tuple[int, int] | None] = [None] * p
        for i, block in enumerate(self.machines, start=1):
            for k, j in enumerate(block, start=1):
                if not (1 <= j <= p) or pairs[j - 1] is not None:
                    raise OutOfRange(f"assignment is not a bijection at feature {j}")
                pairs[j - 1] = (i, k)
        object.__setattr__(self, "assignment", tuple(pairs))  # type: ignore[arg-type]

    @property
    def p(self) -> int:
        return len(self.assignment)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(block) for block in self.machines)

    def machine_of(self, j: int) -> tuple[int, int]:
        if not 1 <= j <= self.p:
            raise OutOfRange(f"feature {j} outside 1..{self.p}")
        return self.assignment[j - 1]


def partition_features(p: int, m: int, seed: int) -> PartitionPlan:
    """Balanced random split of features 1..p over m machines.

    A seeded uniform permutation is cut into m contiguous chunks whose sizes
    differ by at most one; surplus machines (m > p) receive no features and
    stay idle.  Within a machine, features are stored in ascending order.
    """
    if p < 1 or m < 1:
        raise OutOfRange(f"need p >= 1 and m >= 1, got p={p}, m={m}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(p) + 1
    base, extra = divmod(p, m)
    machines = []
    start = 0
    for i in range(m):
        size = base + (1 if i < extra else 0)
        machines.append(tuple(sorted(int(j) for j in perm[start : start + size])))
        start += size
    return PartitionPlan(m=m, machines=tuple(machines), seed=seed)


def zeta_inverse(plan: PartitionPlan, i: int, k: int) -> int:
    """Global feature index held by machine i at local slot k (all 1-based)."""
    if not 1 <= i <= plan.m:
        raise OutOfRange(f"machine {i} outside 1..{plan.m}")
    block = plan.machines[i - 1]
    if not 1 <= k <= len(block):
        raise OutOfRange(f"local index {k} outside 1..{len(block)} on machine {i}")
    return block[k - 1]


def load_dataset(path: str, response_column: str) -> Dataset:
    """Read a comma-separated file with a header row into a Dataset.

    The named response column becomes y; every other column is a covariate,
    kept in file order.  Any non-numeric cell rejects the whole file.
    """
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except OSError as exc:
        raise MissingFile(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise TooFewRows(f"{path} is empty") from None
        header = [h.strip() for h in header]
        if response_column not in header:
            raise MissingColumn(f"response column {response_column!r} not in header")
        y_pos = header.index(response_column)
        rows = []
        for lineno, row in enumerate(reader, start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(header):
                raise NonNumericCell(lineno, "<ragged row>")
            vals = []
            for cell, name in zip(row, header):
                try:
                    v = float(cell)
                except ValueError:
                    raise NonNumericCell(lineno, name) from None
                if not np.isfinite(v):
                    raise NonNumericCell(lineno, name)
                vals.append(v)
            rows.append(vals)
    if len(rows) < MIN_ROWS:
        raise TooFewRows(f"{path}: need at least {MIN_ROWS} data rows, got {len(rows)}")
    table = np.asarray(rows, dtype=np.float64)
    y = table[:, y_pos]
    x = np.delete(table, y_pos, axis=1)
    names = tuple(h for idx, h in enumerate(header) if idx != y_pos)
    return Dataset(y=y, x=x, feature_names=names)
