"""Debiased estimator, scaling matrix, and chi-squared component test.

The selection fit shrinks aggressively, so its coefficients are biased.
Adding back a projection of the residual,

    β̂ᵘ_k = β̂_k + (p·d_n/n)·Ψ̃_kᵀ F ε̂,

undoes the bias well enough that the scaled norm 𝒯 = ‖M̂_k β̂ᵘ_k‖² is
asymptotically χ² with the block's dimension under H0: f_j = 0, where

    M̂_k = (Ψ̃_kᵀ F Fᵀ Ψ̃_k)^(-1/2) · n/(p·d_n·σ̂).

σ̂ comes from the plain worker-fit residuals, before any refinement; the
refined fit would re-use the data and distort the calibration.  M̂ plugs
σ̂ in where the asymptotic statement has the true σ.

The chi-squared helpers are built on the regularized incomplete gamma
function; the quantile inverts the CDF by bracketed root-finding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.optimize import brentq
from scipy.special import gammainc, gammaincc

from .errors import NearSingularInner, ShapeMismatch, SigmaZero


# ------------------------------------------------------------- chi-squared


def chi2_cdf(dof: int, x: float) -> float:
    """P(χ²(dof) ≤ x) through the regularized lower incomplete gamma."""
    if x <= 0.0:
        return 0.0
    return float(gammainc(dof / 2.0, x / 2.0))


def chi2_sf(dof: int, x: float) -> float:
    """Upper tail P(χ²(dof) > x); more accurate than 1 - cdf far out."""
    if x <= 0.0:
        return 1.0
    return float(gammaincc(dof / 2.0, x / 2.0))


def chi2_quantile(dof: int, prob: float) -> float:
    """Inverse CDF at prob ∈ (0,1), bracketed to absolute error ≤ 1e-9."""
    if not 0.0 < prob < 1.0:
        raise ValueError(f"prob must be in (0,1), got {prob}")
    hi = dof + 10.0 * np.sqrt(2.0 * dof) + 10.0
    while chi2_cdf(dof, hi) < prob:
        hi *= 2.0
    return float(brentq(lambda x: chi2_cdf(dof, x) - prob, 0.0, hi, xtol=1e-12))


# ----------------------------------------------------------------- blocks


@dataclass(frozen=True)
class DebiasedBlock:
    """Debiased coefficients and the scaling that whitens them under H0."""

    beta_u: NDArray[np.float64]
    m_hat: NDArray[np.float64]


@dataclass(frozen=True)
class TestReport:
    feature: int  # global j
    machine: int  # worker i holding the feature
    local_index: int  # position k within that worker
    statistic: float
    dof: int
    p_value: float
    alpha: float
    decision: str  # "Reject" | "Accept"
    sigma_hat: float


def estimate_sigma(
    y: NDArray[np.float64], fitted_sums: NDArray[np.float64]
) -> tuple[NDArray[np.float64], float]:
    """Residual and σ̂ = ‖ε̂‖/√n from the summed worker fits."""
    y = np.asarray(y, dtype=np.float64)
    fitted_sums = np.asarray(fitted_sums, dtype=np.float64)
    if y.shape != fitted_sums.shape:
        raise ShapeMismatch(f"y has shape {y.shape}, fitted sum {fitted_sums.shape}")
    eps = y - fitted_sums
    return eps, float(np.linalg.norm(eps) / np.sqrt(len(y)))


def debias_block(
    beta_hat_k: NDArray[np.float64],
    psi_tilde_k: NDArray[np.float64],
    f: NDArray[np.float64],
    eps_hat: NDArray[np.float64],
    p: int,
    d_n: int,
    n: int,
) -> NDArray[np.float64]:
    """β̂ᵘ_k = β̂_k + (p·d_n/n)·Ψ̃_kᵀ F ε̂."""
    beta_hat_k = np.asarray(beta_hat_k, dtype=np.float64)
    psi_tilde_k = np.asarray(psi_tilde_k, dtype=np.float64)
    if psi_tilde_k.ndim != 2 or psi_tilde_k.shape[1] != beta_hat_k.size:
        raise ShapeMismatch(
            f"basis block {psi_tilde_k.shape} does not match beta of length {beta_hat_k.size}"
        )
    if f.shape[0] != psi_tilde_k.shape[0] or eps_hat.shape[0] != f.shape[1]:
        raise ShapeMismatch("F and residual dimensions do not line up")
    return beta_hat_k + (p * d_n / n) * (psi_tilde_k.T @ (f @ eps_hat))


def scaling_matrix(
    psi_tilde_k: NDArray[np.float64],
    f: NDArray[np.float64],
    sigma_hat: float,
    p: int,
    d_n: int,
    n: int,
) -> NDArray[np.float64]:
    """M̂_k = (Ψ̃_kᵀ F Fᵀ Ψ̃_k)^(-1/2) · n/(p·d_n·σ̂).

    The inverse square root goes through an eigendecomposition; a nearly
    singular inner matrix is an error, not something to regularize away,
    because any ridge here would silently break the χ² calibration.
    """
    if sigma_hat <= 0.0:
        raise SigmaZero("residuals are exactly zero; the test statistic is undefined")
    z = f.T @ psi_tilde_k
    inner = z.T @ z
    inner = (inner + inner.T) / 2.0
    vals, vecs = np.linalg.eigh(inner)
    if vals[0] <= 1e-12:
        raise NearSingularInner(float(vals[0]))
    root = (vecs / np.sqrt(vals)) @ vecs.T
    return root * (n / (p * d_n * sigma_hat))


def t_statistic(block: DebiasedBlock) -> float:
    """𝒯 = ‖M̂ β̂ᵘ‖²."""
    v = block.m_hat @ block.beta_u
    return float(v @ v)


def run_test(dataset, plan, fit_state, target_j: int, alpha: float = 0.05) -> TestReport:
    """Test H0: f_j = 0 using a completed inference-pipeline state.

    fit_state provides the shared quantities (F, ε̂, σ̂, p, d_n, n) and a
    ``block_for(j)`` lookup returning that feature's local fit pieces.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0,1), got {alpha}")
    i, k = plan.machine_of(target_j)
    beta_k, psi_tilde_k, d_eff = fit_state.block_for(target_j)
    beta_u = debias_block(
        beta_k, psi_tilde_k, fit_state.f_matrix, fit_state.eps_hat,
        fit_state.p, fit_state.d_n, fit_state.n,
    )
    m_hat = scaling_matrix(
        psi_tilde_k, fit_state.f_matrix, fit_state.sigma_hat,
        fit_state.p, fit_state.d_n, fit_state.n,
    )
    stat = t_statistic(DebiasedBlock(beta_u=beta_u, m_hat=m_hat))
    p_value = chi2_sf(d_eff, stat)
    reject = stat > chi2_quantile(d_eff, 1.0 - alpha)
    return TestReport(
        feature=target_j,
        machine=i,
        local_index=k,
        statistic=stat,
        dof=d_eff,
        p_value=p_value,
        alpha=alpha,
        decision="Reject" if reject else "Accept",
        sigma_hat=fit_state.sigma_hat,
    )
