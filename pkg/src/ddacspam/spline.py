"""B-spline basis construction, evaluation, and column standardization.

Each feature is expanded in a clamped cubic B-spline basis with d_n - 3
interior knots at empirical quantiles, giving d_n + 1 functions in the
complete set.  The design keeps a truncated set: the leading function is
dropped, leaving d_n columns per feature.  The complete clamped set sums
to one across every row (partition of unity), so centering it would make
each block exactly rank deficient; the truncated set stays full rank and
pins down the mean-zero representation of each component.

The empirical quantile convention is the order statistic at position
ceil(t * n / (d_n - 2)) for t = 1 .. d_n - 3 (1-based); d_n = 3 means a
plain cubic with no interior knots.  Points outside the training range
are clamped to the boundary, which keeps cross-validation folds and fresh
test samples well defined.  Duplicate interior knots -- possible when a
covariate has heavy ties -- are collapsed and the effective basis count
shrinks accordingly; callers can compare ``requested_dn`` against ``d_n``
to detect this.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .errors import ConstantBasisColumn, DegenerateColumn

DEGREE = 3


def compute_dn(n: int) -> int:
    """Basis dimension for sample size n: ceil(0.1 * n^(1/3) * ln n), >= 3."""
    if n < 8:
        raise DegenerateColumn(f"need n >= 8, got {n}")
    return max(3, math.ceil(0.1 * n ** (1.0 / 3.0) * math.log(n)))


@dataclass(frozen=True)
class BSplineBasis:
    """A clamped B-spline basis on [boundary[0], boundary[1]].

    The complete set has n_funcs = len(interior_knots) + degree + 1
    functions; the truncated design keeps d_n = n_funcs - 1 of them.
    """

    feature_index: int
    degree: int
    interior_knots: tuple[float, ...]
    boundary: tuple[float, float]
    requested_dn: int
    knots: NDArray[np.float64] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        lo, hi = self.boundary
        full = np.concatenate(
            [
                np.full(self.degree + 1, lo),
                np.asarray(self.interior_knots, dtype=np.float64),
                np.full(self.degree + 1, hi),
            ]
        )
        object.__setattr__(self, "knots", full)

    @property
    def n_funcs(self) -> int:
        return len(self.interior_knots) + self.degree + 1

    @property
    def d_n(self) -> int:
        """Width of the truncated design block."""
        return self.n_funcs - 1

    @property
    def collapsed(self) -> bool:
        return self.d_n != self.requested_dn


def build_basis(x_col: NDArray[np.float64], d_n: int, feature_index: int = 0) -> BSplineBasis:
    """Construct the basis for one covariate from its observed values."""
    if d_n < 3:
        raise DegenerateColumn(f"d_n must be >= 3, got {d_n}")
    x_col = np.asarray(x_col, dtype=np.float64)
    if np.unique(x_col).size < d_n + 1:
        raise DegenerateColumn(
            f"feature {feature_index}: {np.unique(x_col).size} distinct values "
            f"cannot carry {d_n} design columns"
        )
    lo = float(x_col.min())
    hi = float(x_col.max())
    n_interior = d_n - DEGREE
    interior: list[float] = []
    if n_interior > 0:
        xs = np.sort(x_col)
        n = xs.size
        denom = d_n - 2
        for t in range(1, n_interior + 1):
            pos = math.ceil(t * n / denom)  # 1-based order statistic
            interior.append(float(xs[min(max(pos, 1), n) - 1]))
        # collapse ties and knots that fall on the boundary
        kept = []
        for v in interior:
            if lo < v < hi and (not kept or v > kept[-1]):
                kept.append(v)
        interior = kept
    return BSplineBasis(
        feature_index=feature_index,
        degree=DEGREE,
        interior_knots=tuple(interior),
        boundary=(lo, hi),
        requested_dn=d_n,
    )


def evaluate_block(basis: BSplineBasis, x_col: NDArray[np.float64]) -> NDArray[np.float64]:
    """Complete basis matrix: row i holds all n_funcs functions at x_i.

    Points are clamped to the training boundary first; each row of the
    result sums to one (partition of unity of the clamped basis).
    """
    x = np.clip(np.asarray(x_col, dtype=np.float64), *basis.boundary)
    t = basis.knots
    g = basis.degree
    nb = basis.n_funcs
    npts = x.size

    # knot span per point: largest s with t[s] <= x, clipped to valid spans
    spans = np.searchsorted(t, x, side="right") - 1
    spans = np.clip(spans, g, nb - 1)

    # triangular scheme: N holds the g+1 nonzero basis values per point
    n_vals = np.zeros((npts, g + 1))
    n_vals[:, 0] = 1.0
    left = np.empty((npts, g))
    right = np.empty((npts, g))
    for deg in range(1, g + 1):
        left[:, deg - 1] = x - t[spans + 1 - deg]
        right[:, deg - 1] = t[spans + deg] - x
        saved = np.zeros(npts)
        for r in range(deg):
            denom = right[:, r] + left[:, deg - r - 1]
            temp = n_vals[:, r] / denom
            n_vals[:, r] = saved + right[:, r] * temp
            saved = left[:, deg - r - 1] * temp
        n_vals[:, deg] = saved

    out = np.zeros((npts, nb))
    cols = spans[:, None] - g + np.arange(g + 1)[None, :]
    np.put_along_axis(out, cols, n_vals, axis=1)
    return out


def design_columns(basis: BSplineBasis, x_col: NDArray[np.float64]) -> NDArray[np.float64]:
    """Truncated design block: the complete basis minus its leading function."""
    return evaluate_block(basis, x_col)[:, 1:]


@dataclass(frozen=True)
class DesignBlock:
    """One feature's basis block together with its standardization constants."""

    feature_index: int
    raw: NDArray[np.float64]
    standardized: NDArray[np.float64]
    col_means: NDArray[np.float64]
    col_sds: NDArray[np.float64]


def standardize(block: NDArray[np.float64], feature_index: int = 0) -> DesignBlock:
    """Center columns and scale them to unit sample sd (divisor n-1)."""
    block = np.asarray(block, dtype=np.float64)
    means = block.mean(axis=0)
    sds = block.std(axis=0, ddof=1)
    bad = np.flatnonzero(sds <= 1e-10)
    if bad.size:
        raise ConstantBasisColumn(
            f"feature {feature_index}: basis column {int(bad[0])} is constant "
            "(interior knot collision?)"
        )
    return DesignBlock(
        feature_index=feature_index,
        raw=block,
        standardized=(block - means) / sds,
        col_means=means,
        col_sds=sds,
    )
