"""Standardized group-lasso solver on decorrelated blocks.

Each block is orthonormalized by a thin QR so the penalty ‖Q̃_kθ_k‖ equals
‖θ_k‖ and the per-block minimizer has the closed form

    θ_k ← (1 − nλ / (2‖P_k‖))₊ · P_k,   P_k = Q̃_kᵀ(ỹ − Σ_{j≠k} Q̃_jθ_j),

which drives a cyclic backfitting loop under the objective

    (1/n)‖ỹ − Q̃θ‖² + λ Σ_k ‖θ_k‖.

The λ path and per-fold cross-validation fits run inside compiled kernels
with sequential strong-rule screening; every screened fit ends with a full
KKT scan, so returned solutions are exact minimizers regardless of what
the screen discarded.  Thresholded blocks come back exactly zero.

Cross-validation splits rows of the decorrelated system (re-decorrelating
per fold would need a full Gram re-aggregation across machines per fold,
which the fitting procedure does not describe); within each training fold
the blocks are re-orthonormalized so the closed-form update stays exact,
and held-out predictions go through the fold's own back-solve.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit
from numpy.typing import NDArray
from scipy.linalg import solve_triangular

from .errors import RankDeficientBlock, SingularR

TOL = 1e-7
MAX_SWEEPS = 10000
PATH_LENGTH = 500
PATH_FLOOR = 0.001


# --------------------------------------------------------------------- types


@dataclass(frozen=True)
class OrthoBlocks:
    """Per-block thin QR factors in padded layout.

    q_pad[k, :w_k, :] holds Q̃_kᵀ (so rows are basis directions, contiguous
    in the sample index); r_pad[k, :w_k, :w_k] holds R̃_k and is identity
    beyond the block width.  Widths may differ across blocks when a basis
    collapsed knots.
    """

    q_pad: NDArray[np.float64]
    r_pad: NDArray[np.float64]
    widths: NDArray[np.int64]
    n: int

    @property
    def n_blocks(self) -> int:
        return len(self.widths)

    @property
    def offsets(self) -> NDArray[np.int64]:
        return np.concatenate([[0], np.cumsum(self.widths)])

    @property
    def total_width(self) -> int:
        return int(self.widths.sum())

    @property
    def q_blocks(self) -> list[NDArray[np.float64]]:
        return [self.q_pad[k, : self.widths[k]].T.copy() for k in range(self.n_blocks)]

    @property
    def r_blocks(self) -> list[NDArray[np.float64]]:
        return [
            self.r_pad[k, : self.widths[k], : self.widths[k]].copy()
            for k in range(self.n_blocks)
        ]


@dataclass(frozen=True)
class BackfitResult:
    theta: NDArray[np.float64]  # flat over blocks
    sweeps: int
    converged: bool
    max_change: float


@dataclass(frozen=True)
class CvReport:
    chosen_lambda: float
    chosen_index: int
    cv_errors: NDArray[np.float64]
    folds: int
    seed: int


@dataclass(frozen=True)
class GroupLassoFit:
    """Solution at the cross-validated λ, with the path it came from."""

    theta: NDArray[np.float64]
    lam: float
    path: NDArray[np.float64]
    cv_errors: NDArray[np.float64]
    active: tuple[int, ...]  # 1-based local block indices with ‖θ̂_k‖ > 0
    iterations: int
    converged: bool
    chosen_index: int
    degenerate: bool = False


# ------------------------------------------------------------------- kernels


@njit(cache=True, fastmath=True)
def _grad_norms(q, widths, resid, out):
    # one dgemv over the padded stack; zero padding rows contribute nothing
    K = widths.size
    dmax = q.shape[1]
    g = np.dot(q.reshape(K * dmax, resid.size), resid)
    for k in range(K):
        s = 0.0
        base = k * dmax
        for a in range(dmax):
            s += g[base + a] * g[base + a]
        out[k] = np.sqrt(s)


@njit(cache=True, fastmath=True)
def _sweep(q, widths, idx, resid, theta, thr, pbuf, dbuf):
    """One cyclic pass over the blocks in idx; returns max block change²."""
    n = resid.size
    maxchg2 = 0.0
    for ii in range(idx.size):
        k = idx[ii]
        w = widths[k]
        if w == 4:
            # fused variant for the most common width: one pass over the
            # residual for all four basis directions
            r0 = q[k, 0]
            r1 = q[k, 1]
            r2 = q[k, 2]
            r3 = q[k, 3]
            a0 = 0.0
            a1 = 0.0
            a2 = 0.0
            a3 = 0.0
            for t in range(n):
                rt = resid[t]
                a0 += r0[t] * rt
                a1 += r1[t] * rt
                a2 += r2[t] * rt
                a3 += r3[t] * rt
            p0 = a0 + theta[k, 0]
            p1 = a1 + theta[k, 1]
            p2 = a2 + theta[k, 2]
            p3 = a3 + theta[k, 3]
            pnorm = np.sqrt(p0 * p0 + p1 * p1 + p2 * p2 + p3 * p3)
            scale = 0.0
            if pnorm > thr:
                scale = 1.0 - thr / pnorm
            d0 = scale * p0 - theta[k, 0]
            d1 = scale * p1 - theta[k, 1]
            d2 = scale * p2 - theta[k, 2]
            d3 = scale * p3 - theta[k, 3]
            chg2 = d0 * d0 + d1 * d1 + d2 * d2 + d3 * d3
            if chg2 > 0.0:
                theta[k, 0] += d0
                theta[k, 1] += d1
                theta[k, 2] += d2
                theta[k, 3] += d3
                for t in range(n):
                    resid[t] -= d0 * r0[t] + d1 * r1[t] + d2 * r2[t] + d3 * r3[t]
            if chg2 > maxchg2:
                maxchg2 = chg2
            continue
        pn2 = 0.0
        for a in range(w):
            row = q[k, a]
            acc = 0.0
            for t in range(n):
                acc += row[t] * resid[t]
            pv = acc + theta[k, a]
            pbuf[a] = pv
            pn2 += pv * pv
        pnorm = np.sqrt(pn2)
        scale = 0.0
        if pnorm > thr:
            scale = 1.0 - thr / pnorm
        chg2 = 0.0
        changed = False
        for a in range(w):
            newv = scale * pbuf[a]
            d = newv - theta[k, a]
            if d != 0.0:
                changed = True
            dbuf[a] = d
            chg2 += d * d
            theta[k, a] = newv
        if changed:
            for a in range(w):
                d = dbuf[a]
                if d != 0.0:
                    row = q[k, a]
                    for t in range(n):
                        resid[t] -= d * row[t]
        if chg2 > maxchg2:
            maxchg2 = chg2
    return maxchg2


@njit(cache=True, fastmath=True)
def _mm_step(q, widths, idx, y, resid, theta, lam, g, qty, use_g):
    """One monotone reweighted-ridge jump on the currently nonzero blocks.

    At block norms r_k > 0 the penalty term is majorized by a quadratic,
    λ‖θ_k‖ ≤ λ(‖θ_k‖²/(2 r_k) + r_k/2), touching at the current point, so
    the exact minimizer of the weighted ridge

        (1/n)‖ỹ − Q̃θ‖² + Σ_k λ/(2 r_k) ‖θ_k‖²   (zero blocks held at zero)

    cannot increase the true objective.  Cyclic sweeps crawl when many
    blocks are coupled through shared directions; this jump solves the
    coupled quadratic in one shot.  With the stacked Gram g available the
    normal equations are solved in coefficient space; otherwise the
    push-through identity gives the same step from an n×n system,

        (I + Σ_k 2 r_k/(n λ) Q̃_k Q̃_kᵀ) z = ỹ,   θ_k = 2 r_k/(n λ) Q̃_kᵀ z.

    The step is kept only when the objective strictly decreases, and the
    residual is refreshed from ỹ, so certification by full sweeps is
    untouched.  Returns the largest block change (L2); 0.0 on rejection.
    """
    n = resid.size
    dmax = q.shape[1]
    nact = 0
    act = np.empty(idx.size, np.int64)
    rn = np.empty(idx.size)
    c = 0
    for ii in range(idx.size):
        k = idx[ii]
        s = 0.0
        for a in range(widths[k]):
            v = theta[k, a]
            s += v * v
        if s > 0.0:
            act[nact] = k
            rn[nact] = np.sqrt(s)
            c += widths[k]
            nact += 1
    if nact == 0:
        return 0.0
    rr = 0.0
    for t in range(n):
        rr += resid[t] * resid[t]
    obj_old = rr / n
    for j in range(nact):
        obj_old += lam * rn[j]

    tnew = np.empty(c)
    if use_g and c <= (3 * n) // 2:
        cols = np.empty(c, np.int64)
        pos = 0
        for j in range(nact):
            k = act[j]
            for a in range(widths[k]):
                cols[pos] = k * dmax + a
                pos += 1
        S = np.empty((c, c))
        rhs = np.empty(c)
        pos = 0
        for j in range(nact):
            dk = 0.5 * n * lam / rn[j]
            for _ in range(widths[act[j]]):
                ci = cols[pos]
                grow = g[ci]
                for j2 in range(c):
                    S[pos, j2] = grow[cols[j2]]
                S[pos, pos] += dk
                rhs[pos] = qty[ci]
                pos += 1
        tnew = np.linalg.solve(S, rhs)
    else:
        a_rows = np.empty((c, n))
        pos = 0
        for j in range(nact):
            k = act[j]
            sc = np.sqrt(2.0 * rn[j] / (n * lam))
            for a in range(widths[k]):
                row = q[k, a]
                for t in range(n):
                    a_rows[pos, t] = sc * row[t]
                pos += 1
        m = np.dot(a_rows.T.copy(), a_rows)
        for t in range(n):
            m[t, t] += 1.0
        z = np.linalg.solve(m, y)
        pos = 0
        for j in range(nact):
            k = act[j]
            sc = 2.0 * rn[j] / (n * lam)
            for a in range(widths[k]):
                row = q[k, a]
                acc = 0.0
                for t in range(n):
                    acc += row[t] * z[t]
                tnew[pos] = sc * acc
                pos += 1

    rnew = y.copy()
    pos = 0
    for j in range(nact):
        k = act[j]
        for a in range(widths[k]):
            v = tnew[pos]
            pos += 1
            if v != 0.0:
                row = q[k, a]
                for t in range(n):
                    rnew[t] -= v * row[t]
    rr2 = 0.0
    for t in range(n):
        rr2 += rnew[t] * rnew[t]
    obj_new = rr2 / n
    maxchg2 = 0.0
    pos = 0
    for j in range(nact):
        k = act[j]
        s = 0.0
        chg = 0.0
        for a in range(widths[k]):
            v = tnew[pos + a]
            s += v * v
            d = v - theta[k, a]
            chg += d * d
        pos += widths[k]
        obj_new += lam * np.sqrt(s)
        if chg > maxchg2:
            maxchg2 = chg
    if obj_new >= obj_old:
        return 0.0
    pos = 0
    for j in range(nact):
        k = act[j]
        for a in range(widths[k]):
            theta[k, a] = tnew[pos]
            pos += 1
    for t in range(n):
        resid[t] = rnew[t]
    return np.sqrt(maxchg2)


@njit(cache=True, fastmath=True)
def _chol_solve(l_mat, c, b, out):
    """Solve L Lᵀ x = b with the lower factor in l_mat's top-left c×c."""
    for i in range(c):
        s = b[i]
        for j in range(i):
            s -= l_mat[i, j] * out[j]
        out[i] = s / l_mat[i, i]
    for i in range(c - 1, -1, -1):
        s = out[i]
        for j in range(i + 1, c):
            s -= l_mat[j, i] * out[j]
        out[i] = s / l_mat[i, i]


@njit(cache=True, fastmath=True)
def _newton_burst(q, widths, idx, y, resid, theta, lam, g, qty, use_g, tol, fl, fcols, fstate):
    """Damped Newton polish of the stationarity system on the active blocks.

    For nonzero blocks the objective is smooth with gradient
    F_k = (2/n)Q̃_kᵀ(Q̃θ − ỹ) + λθ_k/r_k and Hessian
    H = (2/n)Q̃ᵀQ̃ + λ·blockdiag((I − θ̂_kθ̂_kᵀ)/r_k), which is nearly
    singular along mixed radial directions in the stacked design's null
    space — exactly the modes where cyclic sweeps crawl.  Solving
    (H + τI)d = −F with τ ∝ ‖F‖ contracts those modes quadratically
    (Levenberg–Marquardt on a solution manifold), so a couple of solves
    replace thousands of sweeps.

    While the active width fits the factor buffer fl, the solve is a
    Cholesky in coefficient space, and the factor is kept for later
    bursts: consecutive path steps usually share the active set, and any
    positive definite model matrix still yields a descent direction, so
    stale factors are retried first and refreshed only when they stop
    paying (a rejected or barely-contracting step, or a set change).
    Larger systems fall back to truncated CG preconditioned with the
    analytic block-diagonal inverse.  Every step passes a backtracking
    objective check; if even the shortest step fails, one
    guaranteed-descent ridge jump (_mm_step) runs instead.  Zero blocks
    are never touched, so activation and the stopping decision stay
    entirely with the certified sweeps.
    """
    n = resid.size
    dmax = q.shape[1]
    cap = fl.shape[0]
    prev_chg = 1e300
    for _it in range(12):
        nact = 0
        c = 0
        act = np.empty(idx.size, np.int64)
        rn = np.empty(idx.size)
        for ii in range(idx.size):
            k = idx[ii]
            s = 0.0
            for a in range(widths[k]):
                v = theta[k, a]
                s += v * v
            if s > 0.0:
                act[nact] = k
                rn[nact] = np.sqrt(s)
                c += widths[k]
                nact += 1
        if nact == 0:
            return
        f_vec = np.empty(c)
        pos = 0
        for j in range(nact):
            k = act[j]
            for a in range(widths[k]):
                row = q[k, a]
                acc = 0.0
                for t in range(n):
                    acc += row[t] * resid[t]
                f_vec[pos] = -(2.0 / n) * acc + lam * theta[k, a] / rn[j]
                pos += 1
        nf2 = 0.0
        for i in range(c):
            nf2 += f_vec[i] * f_vec[i]
        nf = np.sqrt(nf2)
        if nf <= 1e-14:
            return
        tau = 0.03 * nf
        direct = use_g and c <= cap
        cols = np.empty(c, np.int64)
        if direct:
            pos = 0
            for j in range(nact):
                k = act[j]
                for a in range(widths[k]):
                    cols[pos] = k * dmax + a
                    pos += 1

        accepted = False
        chg = 0.0
        used_stale = False
        d = np.zeros(c)
        for attempt in range(2):
            if direct:
                stale = attempt == 0 and fstate[0] == c
                if stale:
                    for i in range(c):
                        if fcols[i] != cols[i]:
                            stale = False
                            break
                if not stale:
                    s_mat = np.empty((c, c))
                    for i in range(c):
                        gi = g[cols[i]]
                        for j2 in range(c):
                            s_mat[i, j2] = (2.0 / n) * gi[cols[j2]]
                        s_mat[i, i] += tau
                    pos = 0
                    for j in range(nact):
                        k = act[j]
                        w = widths[k]
                        sc = lam / rn[j]
                        # dying blocks can make this arbitrarily steep;
                        # capping keeps the factorization finite without
                        # changing any descent guarantee
                        if sc > 1e10:
                            sc = 1e10
                        for a in range(w):
                            tha = theta[k, a] / rn[j]
                            s_mat[pos + a, pos + a] += sc
                            for b in range(w):
                                s_mat[pos + a, pos + b] -= sc * tha * (theta[k, b] / rn[j])
                        pos += w
                    lmat = np.linalg.cholesky(s_mat)
                    for i in range(c):
                        for j2 in range(c):
                            fl[i, j2] = lmat[i, j2]
                        fcols[i] = cols[i]
                    fstate[0] = c
                used_stale = stale
                negf = np.empty(c)
                for i in range(c):
                    negf[i] = -f_vec[i]
                _chol_solve(fl, c, negf, d)
            else:
                used_stale = False
                for i in range(c):
                    d[i] = 0.0
                r_cg = np.empty(c)
                for i in range(c):
                    r_cg[i] = -f_vec[i]
                z = np.empty(c)
                pvec = np.empty(c)
                ap = np.empty(c)
                qv = np.empty(n)
                pos = 0
                for j in range(nact):
                    k = act[j]
                    w = widths[k]
                    sdot = 0.0
                    for a in range(w):
                        sdot += (theta[k, a] / rn[j]) * r_cg[pos + a]
                    dt = 2.0 / n + tau
                    sc = lam / rn[j]
                    if sc > 1e10:
                        sc = 1e10
                    dtt = dt + sc
                    for a in range(w):
                        tha = theta[k, a] / rn[j]
                        z[pos + a] = (r_cg[pos + a] - sdot * tha) / dtt + sdot * tha / dt
                    pos += w
                rz = 0.0
                for i in range(c):
                    pvec[i] = z[i]
                    rz += r_cg[i] * z[i]
                # truncated solve: any partial CG iterate of an SPD system
                # is already a descent direction, the line search does the
                # rest, and later bursts resume from the improved point
                cg_tol2 = 1e-4 * nf2
                for _cg in range(200):
                    for t in range(n):
                        qv[t] = 0.0
                    pos = 0
                    for j in range(nact):
                        k = act[j]
                        for a in range(widths[k]):
                            v = pvec[pos]
                            pos += 1
                            if v != 0.0:
                                row = q[k, a]
                                for t in range(n):
                                    qv[t] += v * row[t]
                    pos = 0
                    for j in range(nact):
                        k = act[j]
                        w = widths[k]
                        sdot = 0.0
                        for a in range(w):
                            sdot += (theta[k, a] / rn[j]) * pvec[pos + a]
                        sc = lam / rn[j]
                        if sc > 1e10:
                            sc = 1e10
                        for a in range(w):
                            row = q[k, a]
                            acc = 0.0
                            for t in range(n):
                                acc += row[t] * qv[t]
                            tha = theta[k, a] / rn[j]
                            ap[pos + a] = (2.0 / n) * acc + sc * (pvec[pos + a] - sdot * tha) + tau * pvec[pos + a]
                        pos += w
                    pap = 0.0
                    for i in range(c):
                        pap += pvec[i] * ap[i]
                    if pap <= 0.0:
                        break
                    alpha_cg = rz / pap
                    rn2 = 0.0
                    for i in range(c):
                        d[i] += alpha_cg * pvec[i]
                        r_cg[i] -= alpha_cg * ap[i]
                        rn2 += r_cg[i] * r_cg[i]
                    if rn2 <= cg_tol2:
                        break
                    pos = 0
                    for j in range(nact):
                        k = act[j]
                        w = widths[k]
                        sdot = 0.0
                        for a in range(w):
                            sdot += (theta[k, a] / rn[j]) * r_cg[pos + a]
                        dt = 2.0 / n + tau
                        sc = lam / rn[j]
                        if sc > 1e10:
                            sc = 1e10
                        dtt = dt + sc
                        for a in range(w):
                            tha = theta[k, a] / rn[j]
                            z[pos + a] = (r_cg[pos + a] - sdot * tha) / dtt + sdot * tha / dt
                        pos += w
                    rznew = 0.0
                    for i in range(c):
                        rznew += r_cg[i] * z[i]
                    beta_cg = rznew / rz
                    rz = rznew
                    for i in range(c):
                        pvec[i] = z[i] + beta_cg * pvec[i]

            # Dying blocks have no radial curvature, so the solve can push
            # them straight through the origin where the linearized penalty
            # turns invalid; send any sign-flipping block to exact zero.
            pos = 0
            for j in range(nact):
                k = act[j]
                w = widths[k]
                radial = 0.0
                for a in range(w):
                    radial += theta[k, a] * (theta[k, a] + d[pos + a])
                if radial < 0.0:
                    for a in range(w):
                        d[pos + a] = -theta[k, a]
                pos += w

            qd = np.zeros(n)
            pos = 0
            for j in range(nact):
                k = act[j]
                for a in range(widths[k]):
                    v = d[pos]
                    pos += 1
                    if v != 0.0:
                        row = q[k, a]
                        for t in range(n):
                            qd[t] += v * row[t]
            rr = 0.0
            for t in range(n):
                rr += resid[t] * resid[t]
            obj0 = rr / n
            for j in range(nact):
                obj0 += lam * rn[j]
            alpha = 1.0
            for _ls in range(4):
                rr2 = 0.0
                for t in range(n):
                    rv = resid[t] - alpha * qd[t]
                    rr2 += rv * rv
                objn = rr2 / n
                pos = 0
                maxchg2 = 0.0
                for j in range(nact):
                    k = act[j]
                    s = 0.0
                    bchg = 0.0
                    for a in range(widths[k]):
                        v = theta[k, a] + alpha * d[pos + a]
                        s += v * v
                        dd = alpha * d[pos + a]
                        bchg += dd * dd
                    pos += widths[k]
                    objn += lam * np.sqrt(s)
                    if bchg > maxchg2:
                        maxchg2 = bchg
                if objn < obj0:
                    pos = 0
                    for j in range(nact):
                        k = act[j]
                        for a in range(widths[k]):
                            theta[k, a] += alpha * d[pos]
                            pos += 1
                    for t in range(n):
                        resid[t] -= alpha * qd[t]
                    accepted = True
                    chg = np.sqrt(maxchg2)
                    break
                alpha *= 0.5
            if accepted:
                break
            if direct and used_stale:
                fstate[0] = 0
            else:
                break
        if not accepted:
            _mm_step(q, widths, idx, y, resid, theta, lam, g, qty, use_g)
            return
        if chg <= 0.3 * tol:
            return
        if used_stale and chg > 0.7 * prev_chg:
            fstate[0] = 0
        prev_chg = chg


@njit(cache=True, fastmath=True)
def _backfit_kernel(
    q, widths, idx, y, resid, theta, thr, tol, max_sweeps, pbuf, dbuf, g, qty, use_g, fl, fcols, fstate, eager
):
    """Cyclic convergence on idx to tol (max block L2 change).

    Every sweep is a full certified pass, so the stopping criterion is
    exactly plain cyclic iteration's.  When a sweep fails to contract
    fast — or immediately, when eager says the previous path step needed
    help — a damped Newton polish (_newton_burst) jumps the nonzero
    blocks toward stationarity; every jump passes an objective descent
    check, leaving the certified solutions unchanged while cutting sweep
    counts by orders of magnitude on designs whose blocks share strong
    common directions.
    """
    tol2 = tol * tol
    lam = 2.0 * thr / resid.size
    sweeps = 0
    converged = False
    maxchg2 = 0.0
    prev2 = 1e300
    nslow = 0
    bursts = 0
    while sweeps < max_sweeps:
        sweeps += 1
        maxchg2 = _sweep(q, widths, idx, resid, theta, thr, pbuf, dbuf)
        if maxchg2 <= tol2:
            converged = True
            break
        if maxchg2 > 0.25 * prev2:
            nslow += 1
        else:
            nslow = 0
        prev2 = maxchg2
        if lam > 0.0 and (nslow >= 1 or (eager == 1 and sweeps == 1)):
            _newton_burst(q, widths, idx, y, resid, theta, lam, g, qty, use_g, tol, fl, fcols, fstate)
            bursts += 1
            nslow = 0
            prev2 = 1e300
    return sweeps, converged, np.sqrt(maxchg2), bursts


@njit(cache=True, fastmath=True)
def _path_kernel(
    q, widths, y, lambdas, tol, max_sweeps, stop_index, kkt_slack, r_pad, btest, ytest, want_sse
):
    """Warm-started path fit, largest λ first, with strong-rule screening.

    Returns theta at stop_index, per-λ held-out SSE (when want_sse),
    total sweeps, the count of λ steps that hit the sweep cap, and the
    convergence flag of the stop_index fit.  Screening only restricts the
    sweep order: the KKT scan over excluded blocks re-admits violators and
    re-converges, so each returned iterate is the exact path solution.
    """
    n = y.size
    K = widths.size
    dmax = q.shape[1]
    theta = np.zeros((K, dmax))
    theta_prev = np.zeros((K, dmax))
    theta_prev2 = np.zeros((K, dmax))
    live_prev = np.zeros(K, np.bool_)
    live_prev2 = np.zeros(K, np.bool_)
    theta_out = np.zeros((K, dmax))
    resid = y.copy()
    gnorms = np.empty(K)
    pbuf = np.empty(dmax)
    dbuf = np.empty(dmax)
    beta = np.empty(dmax)
    # stacked Gram in coefficient space, cached for the ridge jumps when it
    # fits comfortably; padding rows of q are zero so their Gram rows are too
    use_g = K * dmax <= 1600
    if use_g:
        qflat = q.reshape(K * dmax, n)
        g = np.dot(qflat, qflat.T.copy())
        qty = np.dot(qflat, y)
    else:
        g = np.zeros((1, 1))
        qty = np.zeros(1)
    # Newton factor buffer, shared along the path so unchanged active sets
    # reuse the Cholesky from earlier bursts
    capn = K * dmax if use_g else 1
    if capn > 900:
        capn = 900
    fl = np.zeros((capn, capn))
    fcols = np.full(capn, -1, np.int64)
    fstate = np.zeros(1, np.int64)
    eager = 0
    sse = np.zeros(lambdas.size)
    cand = np.zeros(K, np.bool_)
    total_sweeps = 0
    n_capped = 0
    conv_at_stop = True
    lam_prev = lambdas[0]
    npred = ytest.size
    pred = np.empty(npred)
    # gnorms always holds Q̃ᵀresid block norms at the previous solution,
    # which is exactly what the sequential strong rule screens against
    _grad_norms(q, widths, resid, gnorms)
    for l in range(lambdas.size):
        lam = lambdas[l]
        thr = 0.5 * n * lam
        bound = 0.5 * n * (2.0 * lam - lam_prev)
        for k in range(K):
            nz = False
            for a in range(widths[k]):
                if theta[k, a] != 0.0:
                    nz = True
                    break
            cand[k] = nz or gnorms[k] >= bound
        # warm start by extrapolating the recent solutions one (geometric)
        # step forward: quadratic through the last three when the block was
        # active in all of them, linear through two, cold otherwise.  Blocks
        # that just died stay at zero.  Any start point is admissible: the
        # convergence and KKT scans below still certify the exact solution.
        if l >= 1:
            for k in range(K):
                w = widths[k]
                live = False
                for a in range(w):
                    if theta[k, a] != 0.0:
                        live = True
                        break
                moved = False
                if live and live_prev[k]:
                    if live_prev2[k]:
                        for a in range(w):
                            s1 = theta[k, a] - theta_prev[k, a]
                            s0 = theta_prev[k, a] - theta_prev2[k, a]
                            dbuf[a] = 2.0 * s1 - s0
                            if dbuf[a] != 0.0:
                                moved = True
                    else:
                        for a in range(w):
                            dbuf[a] = theta[k, a] - theta_prev[k, a]
                            if dbuf[a] != 0.0:
                                moved = True
                live_prev2[k] = live_prev[k]
                live_prev[k] = live
                for a in range(w):
                    theta_prev2[k, a] = theta_prev[k, a]
                    theta_prev[k, a] = theta[k, a]
                if moved:
                    for a in range(w):
                        d = dbuf[a]
                        if d != 0.0:
                            theta[k, a] += d
                            row = q[k, a]
                            for t in range(n):
                                resid[t] -= d * row[t]
        else:
            for k in range(K):
                live = False
                for a in range(widths[k]):
                    theta_prev[k, a] = theta[k, a]
                    if theta[k, a] != 0.0:
                        live = True
                live_prev[k] = live
        conv_here = True
        bursts_here = 0
        while True:
            idx = np.where(cand)[0]
            sw, conv, _, nb = _backfit_kernel(
                q, widths, idx, y, resid, theta, thr, tol, max_sweeps, pbuf, dbuf, g, qty, use_g,
                fl, fcols, fstate, eager,
            )
            total_sweeps += sw
            bursts_here += nb
            if nb > 0:
                eager = 1
            if not conv:
                conv_here = False
            _grad_norms(q, widths, resid, gnorms)
            viol = False
            for k in range(K):
                if not cand[k] and gnorms[k] > thr + kkt_slack:
                    cand[k] = True
                    viol = True
            if not viol:
                break
        eager = 1 if bursts_here > 0 else 0
        if not conv_here:
            n_capped += 1
        lam_prev = lam
        if want_sse:
            for t in range(npred):
                pred[t] = 0.0
            for k in range(K):
                w = widths[k]
                nzb = False
                for a in range(w):
                    if theta[k, a] != 0.0:
                        nzb = True
                        break
                if not nzb:
                    continue
                for a in range(w - 1, -1, -1):
                    acc = theta[k, a]
                    for b in range(a + 1, w):
                        acc -= r_pad[k, a, b] * beta[b]
                    beta[a] = acc / r_pad[k, a, a]
                for a in range(w):
                    ba = beta[a]
                    if ba != 0.0:
                        row = btest[k, a]
                        for t in range(npred):
                            pred[t] += ba * row[t]
            acc2 = 0.0
            for t in range(npred):
                d = ytest[t] - pred[t]
                acc2 += d * d
            sse[l] = acc2
        if l == stop_index:
            for k in range(K):
                for a in range(dmax):
                    theta_out[k, a] = theta[k, a]
            conv_at_stop = conv_here
            break
    return theta_out, sse, total_sweeps, n_capped, conv_at_stop


# ------------------------------------------------------------- construction


def qr_blocks(psi_tilde: list[NDArray[np.float64]], d_n: int | None = None) -> OrthoBlocks:
    """Thin QR of every block, signs fixed so each R̃ has positive diagonal.

    Accepts a list of n×w_k blocks, or a single n×(K·d_n) matrix to be cut
    into uniform-width blocks when d_n is given.
    """
    if isinstance(psi_tilde, np.ndarray):
        if d_n is None:
            raise ValueError("d_n required to slice a single design matrix into blocks")
        psi_tilde = [
            psi_tilde[:, s : s + d_n] for s in range(0, psi_tilde.shape[1], d_n)
        ]
    if not psi_tilde:
        raise ValueError("no blocks")
    n = psi_tilde[0].shape[0]
    widths = np.array([b.shape[1] for b in psi_tilde], dtype=np.int64)
    dmax = int(widths.max())
    nb = len(psi_tilde)
    q_pad = np.zeros((nb, dmax, n))
    r_pad = np.tile(np.eye(dmax), (nb, 1, 1))
    for k, block in enumerate(psi_tilde):
        q, r = np.linalg.qr(np.asarray(block, dtype=np.float64))
        s = np.sign(np.diag(r))
        s[s == 0] = 1.0
        q = q * s
        r = s[:, None] * r
        if np.min(np.abs(np.diag(r))) <= 1e-10:
            raise RankDeficientBlock(k + 1)
        w = widths[k]
        q_pad[k, :w, :] = q.T
        r_pad[k, :w, :w] = r
    return OrthoBlocks(q_pad=q_pad, r_pad=r_pad, widths=widths, n=n)


def _pad_theta(blocks: OrthoBlocks, theta_flat: NDArray[np.float64]) -> NDArray[np.float64]:
    out = np.zeros((blocks.n_blocks, blocks.q_pad.shape[1]))
    off = blocks.offsets
    for k in range(blocks.n_blocks):
        out[k, : blocks.widths[k]] = theta_flat[off[k] : off[k + 1]]
    return out


def _flatten_theta(blocks: OrthoBlocks, theta_pad: NDArray[np.float64]) -> NDArray[np.float64]:
    return np.concatenate(
        [theta_pad[k, : blocks.widths[k]] for k in range(blocks.n_blocks)]
    )


def _fitted(blocks: OrthoBlocks, theta_pad: NDArray[np.float64]) -> NDArray[np.float64]:
    return np.einsum("kan,ka->n", blocks.q_pad, theta_pad)


def theta_block(blocks: OrthoBlocks, theta_flat: NDArray[np.float64], k: int) -> NDArray[np.float64]:
    """Block k (1-based) of a flat coefficient vector."""
    off = blocks.offsets
    return theta_flat[off[k - 1] : off[k]]


# ---------------------------------------------------------------- operations


def backfit(
    y_tilde: NDArray[np.float64],
    blocks: OrthoBlocks,
    lam: float,
    warm_start: NDArray[np.float64] | None = None,
    tol: float = TOL,
    max_sweeps: int = MAX_SWEEPS,
) -> BackfitResult:
    """Cyclic block soft-threshold updates until the largest block change
    (L2) drops to tol.  Non-convergence is reported via the flag, with the
    last iterate returned."""
    y_tilde = np.ascontiguousarray(y_tilde, dtype=np.float64)
    if warm_start is None:
        theta = np.zeros((blocks.n_blocks, blocks.q_pad.shape[1]))
        resid = y_tilde.copy()
    else:
        theta = _pad_theta(blocks, np.asarray(warm_start, dtype=np.float64))
        resid = y_tilde - _fitted(blocks, theta)
    idx = np.arange(blocks.n_blocks, dtype=np.int64)
    dmax = blocks.q_pad.shape[1]
    sweeps, converged, max_change, _ = _backfit_kernel(
        blocks.q_pad,
        blocks.widths,
        idx,
        y_tilde,
        resid,
        theta,
        0.5 * blocks.n * float(lam),
        tol,
        max_sweeps,
        np.empty(dmax),
        np.empty(dmax),
        np.zeros((1, 1)),
        np.zeros(1),
        False,
        np.zeros((1, 1)),
        np.full(1, -1, np.int64),
        np.zeros(1, np.int64),
        0,
    )
    return BackfitResult(
        theta=_flatten_theta(blocks, theta),
        sweeps=int(sweeps),
        converged=bool(converged),
        max_change=float(max_change),
    )


def objective(
    y_tilde: NDArray[np.float64],
    blocks: OrthoBlocks,
    theta: NDArray[np.float64],
    lam: float,
) -> float:
    """(1/n)‖ỹ − Q̃θ‖² + λ Σ_k ‖θ_k‖ for a flat θ."""
    theta_pad = _pad_theta(blocks, np.asarray(theta, dtype=np.float64))
    resid = np.asarray(y_tilde, dtype=np.float64) - _fitted(blocks, theta_pad)
    penalty = sum(
        float(np.linalg.norm(theta_pad[k, : blocks.widths[k]]))
        for k in range(blocks.n_blocks)
    )
    return float(resid @ resid) / blocks.n + float(lam) * penalty


def kkt_residual(
    y_tilde: NDArray[np.float64],
    blocks: OrthoBlocks,
    theta: NDArray[np.float64],
    lam: float,
) -> float:
    """Max over blocks of the stationarity violation at θ.

    Active blocks measure ‖(2/n)Q̃_kᵀ(Q̃θ − ỹ) + λθ_k/‖θ_k‖‖; zero blocks
    measure the subgradient overshoot max(0, ‖(2/n)Q̃_kᵀ(ỹ − Q̃θ)‖ − λ).
    """
    theta_pad = _pad_theta(blocks, np.asarray(theta, dtype=np.float64))
    resid = np.asarray(y_tilde, dtype=np.float64) - _fitted(blocks, theta_pad)
    worst = 0.0
    for k in range(blocks.n_blocks):
        w = blocks.widths[k]
        grad = (2.0 / blocks.n) * (blocks.q_pad[k, :w] @ resid)
        tk = theta_pad[k, :w]
        norm_tk = np.linalg.norm(tk)
        if norm_tk > 0:
            viol = float(np.linalg.norm(-grad + lam * tk / norm_tk))
        else:
            viol = max(0.0, float(np.linalg.norm(grad)) - lam)
        worst = max(worst, viol)
    return worst


def lambda_path(
    y_tilde: NDArray[np.float64],
    blocks: OrthoBlocks,
    length: int = PATH_LENGTH,
    floor: float = PATH_FLOOR,
) -> NDArray[np.float64]:
    """Geometric grid from λ⁽¹⁾ = max_k (2/n)‖Q̃_kᵀỹ‖ down to floor·λ⁽¹⁾.

    λ⁽¹⁾ is the smallest λ whose solution is all-zero.  A zero response
    yields the degenerate all-zero path.
    """
    y_tilde = np.ascontiguousarray(y_tilde, dtype=np.float64)
    gnorms = np.empty(blocks.n_blocks)
    _grad_norms(blocks.q_pad, blocks.widths, y_tilde, gnorms)
    lam1 = (2.0 / blocks.n) * float(gnorms.max())
    if lam1 == 0.0:
        return np.zeros(length)
    return lam1 * floor ** (np.arange(length) / (length - 1))


def _fold_assignments(n: int, folds: int, seed: int) -> list[NDArray[np.int64]]:
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(chunk) for chunk in np.array_split(perm, folds)]


def cross_validate(
    y_tilde: NDArray[np.float64],
    blocks: OrthoBlocks,
    path: NDArray[np.float64],
    folds: int = 5,
    seed: int = 0,
) -> CvReport:
    """Row-wise K-fold CV over the λ path; ties resolve to the larger λ.

    Training-fold blocks are re-orthonormalized so the solver's closed-form
    update stays exact on the fold; held-out predictions are made in the
    original block coordinates via the fold's back-solve.
    """
    y_tilde = np.ascontiguousarray(y_tilde, dtype=np.float64)
    n = blocks.n
    if n < folds:
        raise ValueError(f"need n >= folds, got n={n}, folds={folds}")
    path = np.ascontiguousarray(path, dtype=np.float64)
    if path[0] == 0.0:
        return CvReport(0.0, 0, np.zeros(len(path)), folds, seed)
    nb = blocks.n_blocks
    dmax = blocks.q_pad.shape[1]
    slack = 1e-9 * (1.0 + 0.5 * n * path[0])
    sse_total = np.zeros(len(path))
    for test_idx in _fold_assignments(n, folds, seed):
        mask = np.ones(n, dtype=bool)
        mask[test_idx] = False
        train_idx = np.flatnonzero(mask)
        q_tr = np.zeros((nb, dmax, len(train_idx)))
        r_tr = np.tile(np.eye(dmax), (nb, 1, 1))
        for k in range(nb):
            w = blocks.widths[k]
            q, r = np.linalg.qr(blocks.q_pad[k, :w][:, train_idx].T)
            s = np.sign(np.diag(r))
            s[s == 0] = 1.0
            q = q * s
            r = s[:, None] * r
            # a degenerate fold can make R nearly singular; floor the
            # diagonal so predictions stay finite (CV then avoids that λ)
            d = np.diag(r).copy()
            d[np.abs(d) < 1e-12] = 1e-12
            np.fill_diagonal(r, d)
            q_tr[k, :w, :] = q.T
            r_tr[k, :w, :w] = r
        b_test = np.ascontiguousarray(blocks.q_pad[:, :, test_idx])
        _, sse, _, _, _ = _path_kernel(
            q_tr,
            blocks.widths,
            np.ascontiguousarray(y_tilde[train_idx]),
            path,
            TOL,
            MAX_SWEEPS,
            len(path) - 1,
            slack,
            r_tr,
            b_test,
            np.ascontiguousarray(y_tilde[test_idx]),
            True,
        )
        sse_total += sse
    cv_errors = sse_total / n
    chosen = int(np.argmin(cv_errors))  # first minimum = largest λ on ties
    return CvReport(float(path[chosen]), chosen, cv_errors, folds, seed)


def path_fit(
    y_tilde: NDArray[np.float64],
    blocks: OrthoBlocks,
    path: NDArray[np.float64],
    stop_index: int,
    tol: float = TOL,
    max_sweeps: int = MAX_SWEEPS,
) -> BackfitResult:
    """Warm-started fit along the path, stopping at path[stop_index]."""
    path = np.ascontiguousarray(path, dtype=np.float64)
    slack = 1e-9 * (1.0 + 0.5 * blocks.n * path[0])
    theta_pad, _, sweeps, _, converged = _path_kernel(
        blocks.q_pad,
        blocks.widths,
        np.ascontiguousarray(y_tilde, dtype=np.float64),
        path,
        tol,
        max_sweeps,
        stop_index,
        slack,
        blocks.r_pad,
        np.zeros((blocks.n_blocks, blocks.q_pad.shape[1], 0)),
        np.zeros(0),
        False,
    )
    return BackfitResult(
        theta=_flatten_theta(blocks, theta_pad),
        sweeps=int(sweeps),
        converged=bool(converged),
        max_change=0.0,
    )


def back_solve(r_blocks, theta: NDArray[np.float64]) -> NDArray[np.float64]:
    """β̂ blocks from R̃β̂ = θ̂ per block; zero blocks stay exactly zero.

    Accepts an OrthoBlocks or a list of upper-triangular factors.
    """
    if isinstance(r_blocks, OrthoBlocks):
        r_list = r_blocks.r_blocks
    else:
        r_list = list(r_blocks)
    theta = np.asarray(theta, dtype=np.float64)
    widths = [r.shape[0] for r in r_list]
    offsets = np.concatenate([[0], np.cumsum(widths)])
    if offsets[-1] != theta.size:
        raise ValueError(f"theta length {theta.size} does not match blocks {offsets[-1]}")
    beta = np.zeros_like(theta)
    for k, r in enumerate(r_list):
        tk = theta[offsets[k] : offsets[k + 1]]
        if not tk.any():
            continue
        if np.min(np.abs(np.diag(r))) <= 1e-10:
            raise SingularR(k + 1)
        beta[offsets[k] : offsets[k + 1]] = solve_triangular(r, tk, lower=False)
    return beta


def fit_local(
    y_tilde: NDArray[np.float64],
    blocks: OrthoBlocks,
    folds: int = 5,
    seed: int = 0,
    path_length: int = PATH_LENGTH,
) -> GroupLassoFit:
    """Full local pipeline: λ path, cross-validation, fit at the chosen λ."""
    path = lambda_path(y_tilde, blocks, length=path_length)
    if path[0] == 0.0:
        return GroupLassoFit(
            theta=np.zeros(blocks.total_width),
            lam=0.0,
            path=path,
            cv_errors=np.zeros(len(path)),
            active=(),
            iterations=0,
            converged=True,
            chosen_index=0,
            degenerate=True,
        )
    report = cross_validate(y_tilde, blocks, path, folds=folds, seed=seed)
    result = path_fit(y_tilde, blocks, path, report.chosen_index)
    off = blocks.offsets
    active = tuple(
        k + 1
        for k in range(blocks.n_blocks)
        if np.linalg.norm(result.theta[off[k] : off[k + 1]]) > 0
    )
    return GroupLassoFit(
        theta=result.theta,
        lam=report.chosen_lambda,
        path=path,
        cv_errors=report.cv_errors,
        active=active,
        iterations=result.sweeps,
        converged=result.converged,
        chosen_index=report.chosen_index,
    )
