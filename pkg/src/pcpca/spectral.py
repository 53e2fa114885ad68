"""Differential covariance matrices, descending eigendecompositions, and
the feasibility bounds on the contrast weight gamma.

Two covariance scalings coexist and the choice is always explicit:
``sums`` builds sum(x x^T) - gamma * sum(y y^T) (the convention of the
closed-form estimator), ``means`` builds C_X - gamma * C_Y with per-group
averaged covariances (the convention of the subspace objective). The two
differ by the factor n (and a rescaled gamma) when n != m.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from .errors import NumericError

SYMMETRY_TOL = 1e-10


def scatter_matrix(data, scaling="sums"):
    """sum_i x_i x_i^T over the rows, divided by the row count for ``means``."""
    if not data.fully_observed:
        raise ValueError("covariance math requires fully observed data; "
                         "use the missing-data fitting path instead")
    X = data.values
    S = X.T @ X
    S = 0.5 * (S + S.T)
    if scaling == "means":
        return S / data.n_samples
    if scaling == "sums":
        return S
    raise ValueError(f"unknown scaling {scaling!r}")


def differential_covariance(pair, gamma, scaling="sums"):
    """Foreground-minus-weighted-background covariance, symmetric by construction."""
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    if not pair.centered:
        raise ValueError("pair must be centered before covariance computation")
    return scatter_matrix(pair.foreground, scaling) \
        - gamma * scatter_matrix(pair.background, scaling)


@dataclass(frozen=True)
class Spectrum:
    """Eigenvalues in descending order with orthonormal eigenvectors."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "eigenvalues", np.asarray(self.eigenvalues, float))
        object.__setattr__(self, "eigenvectors", np.asarray(self.eigenvectors, float))

    def top(self, d):
        """Leading-d eigenvalues and eigenvectors."""
        return self.eigenvalues[:d], self.eigenvectors[:, :d]


def eig_desc(A):
    """Symmetric eigendecomposition, eigenvalues sorted descending."""
    A = np.asarray(A, dtype=float)
    if not np.all(np.isfinite(A)):
        raise NumericError("matrix contains non-finite entries")
    if np.max(np.abs(A - A.T)) > SYMMETRY_TOL * max(1.0, np.max(np.abs(A))):
        raise ValueError("matrix is not symmetric")
    A = 0.5 * (A + A.T)
    evals, evecs = np.linalg.eigh(A)
    return Spectrum(eigenvalues=evals[::-1].copy(), eigenvectors=evecs[:, ::-1].copy())


def _checked_psd_eigenvalues(spectrum, name):
    vals = spectrum.eigenvalues if isinstance(spectrum, Spectrum) else np.asarray(spectrum, float)
    vals = np.sort(np.asarray(vals, float))[::-1]
    scale = max(1.0, np.max(np.abs(vals), initial=0.0))
    if np.any(vals < -1e-8 * scale):
        raise ValueError(f"{name} has negative eigenvalues; covariances must be PSD")
    return np.clip(vals, 0.0, None)


def _ratio(num, den):
    # Bound-formula conventions: 0/0 := 0, x/0 := +inf for x > 0.
    if den == 0.0:
        return 0.0 if num == 0.0 else np.inf
    return num / den


def gamma_pd_bound(mu, rho):
    """Largest gamma below which C_X - gamma*C_Y stays positive definite.

    Equals min(mu) / max(rho); +inf when the background has no variance.
    """
    mu = _checked_psd_eigenvalues(mu, "foreground spectrum")
    rho = _checked_psd_eigenvalues(rho, "background spectrum")
    if rho[0] == 0.0:
        return np.inf
    return mu[-1] / rho[0]


def gamma_rank_d_bound(mu, rho, d):
    """Weyl-inequality bound keeping the top-d eigenvalues of C positive.

    max over k of mu_{d+k} / rho_{1+k}; reduces to the PD bound at d = D.
    """
    mu = _checked_psd_eigenvalues(mu, "foreground spectrum")
    rho = _checked_psd_eigenvalues(rho, "background spectrum")
    D = len(mu)
    if len(rho) != D:
        raise ValueError("spectra must have equal length")
    if not 1 <= d <= D:
        raise ValueError(f"d must lie in [1, {D}], got {d}")
    return max(_ratio(mu[d - 1 + k], rho[k]) for k in range(D - d + 1))


@dataclass(frozen=True)
class GammaReport:
    """All feasibility bounds on gamma, in raw (sums-convention) units."""

    pd_bound: float
    rank_d_bound: float
    mle_sample_bound: float
    mle_sufficient_bound: float
    mle_feasible_sup: float
    d: int
    n_features: int
    n: int
    m: int

    def to_json(self, indent=2):
        return json.dumps(asdict(self), indent=indent)


def _tail_sum(C, d):
    return float(np.sum(eig_desc(C).eigenvalues[d:]))


def gamma_mle_report(pair, d, rel_tol=1e-6):
    """Diagnose the feasible gamma range for the closed-form estimator.

    ``mle_feasible_sup`` is the supremum gamma below which both closed-form
    constraints hold: n - gamma*m > 0 and a positive tail eigenvalue sum of
    the sums-convention differential covariance. The tail sum is
    non-increasing and concave in gamma, so bisection is exact.
    """
    if not pair.centered:
        raise ValueError("pair must be centered")
    D = pair.n_features
    if not 1 <= d < D:
        raise ValueError(f"d must lie in [1, {D - 1}], got {d}")
    S_X = scatter_matrix(pair.foreground, "sums")
    S_Y = scatter_matrix(pair.background, "sums")
    mu = eig_desc(S_X).eigenvalues
    rho = eig_desc(S_Y).eigenvalues
    n, m = pair.n, pair.m

    sample_bound = n / m
    sufficient = _ratio(float(np.sum(mu[d:])), (D - d) * float(max(rho[0], 0.0)))

    def tail(gamma):
        return _tail_sum(S_X - gamma * S_Y, d)

    if tail(0.0) <= 0.0:
        feasible_sup = 0.0
    elif tail(sample_bound) > 0.0:
        feasible_sup = sample_bound
    else:
        lo, hi = 0.0, sample_bound
        tol = rel_tol * sample_bound
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            if tail(mid) > 0.0:
                lo = mid
            else:
                hi = mid
        feasible_sup = 0.5 * (lo + hi)

    return GammaReport(
        pd_bound=float(gamma_pd_bound(mu, rho)),
        rank_d_bound=float(gamma_rank_d_bound(mu, rho, d)),
        mle_sample_bound=float(sample_bound),
        mle_sufficient_bound=float(sufficient),
        mle_feasible_sup=float(feasible_sup),
        d=d,
        n_features=D,
        n=n,
        m=m,
    )
