"""Closed-form fitting of the PCA family, the relative-likelihood
objective, latent projection, data generation, and held-out scoring.

The relative likelihood p(X | W, sigma^2) / p(Y | W, sigma^2)^gamma is
maximized in closed form by an eigendecomposition of the differential
covariance; PPCA (gamma = 0) and the plain contrastive subspace
(sigma^2 -> 0) fall out as special cases. The raw weight gamma applies to
per-sample sums and must stay below n/m; user-facing code usually works
with the sample-size-adjusted gamma' = gamma * m / n, which lives in
[0, 1) whenever the estimator exists.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import dataset
from .errors import InfeasibleGammaError, NumericError, RankDeficiencyError
from .spectral import differential_covariance, eig_desc, scatter_matrix

LOG_2PI = np.log(2.0 * np.pi)

MODEL_SCHEMA_VERSION = "pcpca-model/1"

# gamma == n/m exactly is rejected; the open constraint is strict.
GAMMA_STRICTNESS = 1e-12


@dataclass(frozen=True)
class PcpcaModel:
    """Fitted parameters of the probabilistic contrastive model.

    W has non-increasing column norms (the free rotation is pinned to the
    identity) and WW^T + sigma2*I is positive definite by construction.
    """

    W: np.ndarray
    sigma2: float
    feature_mean: np.ndarray
    d: int
    D: int
    gamma: float
    n: int
    m: int
    scaling: str = "sums"
    project_mode: str = "posterior_mean"

    def __post_init__(self):
        object.__setattr__(self, "W", np.asarray(self.W, dtype=float))
        object.__setattr__(self, "feature_mean",
                           np.asarray(self.feature_mean, dtype=float))
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")
        if self.W.shape != (self.D, self.d):
            raise ValueError("W must be D x d")

    @property
    def gamma_prime(self):
        return self.gamma * self.m / self.n

    def covariance(self):
        """Marginal data covariance WW^T + sigma2 * I."""
        return self.W @ self.W.T + self.sigma2 * np.eye(self.D)

    def to_json(self, indent=2):
        payload = {
            "version": MODEL_SCHEMA_VERSION,
            "W": self.W.tolist(),
            "sigma2": float(self.sigma2),
            "feature_mean": self.feature_mean.tolist(),
            "d": self.d,
            "D": self.D,
            "gamma": float(self.gamma),
            "gamma_prime": float(self.gamma_prime),
            "n": self.n,
            "m": self.m,
            "scaling": self.scaling,
            "project_mode": self.project_mode,
        }
        return json.dumps(payload, indent=indent)

    @classmethod
    def from_json(cls, text):
        payload = json.loads(text)
        version = payload.get("version")
        if version != MODEL_SCHEMA_VERSION:
            raise ValueError(f"unsupported model version {version!r}")
        return cls(
            W=np.array(payload["W"], dtype=float),
            sigma2=payload["sigma2"],
            feature_mean=np.array(payload["feature_mean"], dtype=float),
            d=payload["d"],
            D=payload["D"],
            gamma=payload["gamma"],
            n=payload["n"],
            m=payload["m"],
            scaling=payload.get("scaling", "sums"),
            project_mode=payload.get("project_mode", "posterior_mean"),
        )


@dataclass(frozen=True)
class Subspace:
    """A d-dimensional subspace given by an orthonormal basis."""

    basis: np.ndarray

    def __post_init__(self):
        basis = np.asarray(self.basis, dtype=float)
        d = basis.shape[1]
        if np.max(np.abs(basis.T @ basis - np.eye(d))) > 1e-8:
            raise ValueError("basis columns are not orthonormal")
        object.__setattr__(self, "basis", basis)

    def projector(self):
        return self.basis @ self.basis.T


def gamma_from_prime(gamma_prime, n, m):
    """Convert the sample-size-adjusted weight gamma' into raw gamma."""
    if gamma_prime < 0:
        raise ValueError("gamma_prime must be non-negative")
    if n < 1 or m < 1:
        raise ValueError("sample counts must be at least 1")
    return gamma_prime * n / m


def gamma_to_prime(gamma, n, m):
    """Inverse of :func:`gamma_from_prime`."""
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    if n < 1 or m < 1:
        raise ValueError("sample counts must be at least 1")
    return gamma * m / n


def _closed_form(C, denom, d, tag):
    """Shared eigendecomposition solve behind the empirical and population fits.

    Maximizes -(denom/2) ln|A| - tr(A^{-1} C)/2 over A = WW^T + sigma2*I.
    """
    D = C.shape[0]
    spectrum = eig_desc(C)
    evals = spectrum.eigenvalues
    tail = float(np.sum(evals[d:]))
    if tail <= 0.0:
        raise InfeasibleGammaError(
            f"tail eigenvalue sum {tail:.6g} is non-positive at {tag}; "
            "the noise variance estimate requires a positive tail"
        )
    sigma2 = tail / (denom * (D - d))
    diag = evals[:d] / denom - sigma2
    guard = 1e-10 * max(1.0, float(evals[0]) / denom)
    if np.any(diag < -guard):
        raise RankDeficiencyError(
            f"component variance went negative at {tag}; "
            "reduce d or the contrast weight"
        )
    diag = np.clip(diag, 0.0, None)
    W = spectrum.eigenvectors[:, :d] * np.sqrt(diag)
    return W, float(sigma2), spectrum


def fit_pcpca(pair, d, gamma):
    """Closed-form maximum relative-likelihood estimate.

    Requires a centered, fully observed pair, 1 <= d < D, and a feasible
    raw gamma (gamma < n/m with a positive tail eigenvalue sum).
    """
    if not pair.centered:
        raise ValueError("pair must be centered")
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    D = pair.n_features
    if not 1 <= d < D:
        raise ValueError(f"d must lie in [1, {D - 1}], got {d}")
    n, m = pair.n, pair.m
    if gamma * m / n >= 1.0 - GAMMA_STRICTNESS:
        raise InfeasibleGammaError(
            f"gamma={gamma:.6g} violates the n - gamma*m > 0 constraint "
            f"(n={n}, m={m}, bound {n / m:.6g})"
        )
    C = differential_covariance(pair, gamma, scaling="sums")
    W, sigma2, _ = _closed_form(C, n - gamma * m, d,
                                tag=f"gamma={gamma:.6g}")
    return PcpcaModel(
        W=W, sigma2=sigma2,
        feature_mean=pair.foreground.feature_mean,
        d=d, D=D, gamma=float(gamma), n=n, m=m,
    )


def fit_ppca(data, d):
    """Probabilistic PCA: the gamma = 0 special case."""
    background = dataset.DataMatrix(
        values=np.zeros((1, data.n_features)), centered=True,
    )
    pair = dataset.ContrastivePair(foreground=data, background=background)
    return fit_pcpca(pair, d, gamma=0.0)


def fit_cpca(pair, d, gamma):
    """Top-d eigenvectors of C_X - gamma * C_Y (mean-covariance convention).

    ``gamma`` here weights the averaged covariances and therefore matches
    the adjusted gamma' units of :func:`fit_pcpca` for the same data. The
    subspace exists even when trailing eigenvalues go negative; that case
    only triggers a warning since the projection may still be useful.
    """
    if not pair.centered:
        raise ValueError("pair must be centered")
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    D = pair.n_features
    if not 1 <= d <= D:
        raise ValueError(f"d must lie in [1, {D}], got {d}")
    C = differential_covariance(pair, gamma, scaling="means")
    spectrum = eig_desc(C)
    if spectrum.eigenvalues[d - 1] <= 0:
        warnings.warn(
            f"eigenvalue {d} of the differential covariance is not positive "
            f"at gamma={gamma:.6g}; the subspace is not variance-dominant",
            stacklevel=2,
        )
    return Subspace(basis=spectrum.eigenvectors[:, :d].copy())


def fit_pca(data, d):
    """Plain PCA: the gamma = 0 special case of the contrastive subspace."""
    background = dataset.DataMatrix(
        values=np.zeros((1, data.n_features)), centered=True,
    )
    pair = dataset.ContrastivePair(foreground=data, background=background)
    return fit_cpca(pair, d, gamma=0.0)


def _chol_logdet_and_inv_quad(A, S):
    """(ln|A|, tr(A^{-1} S)) via Cholesky; raises NumericError if A not PD."""
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise NumericError("covariance WW^T + sigma2*I is not PD") from exc
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    half = scipy.linalg.solve_triangular(L, S, lower=True)
    inv_quad = float(np.trace(scipy.linalg.solve_triangular(
        L, half.T, lower=True).T))
    return logdet, inv_quad


def relative_log_likelihood(model, pair, gamma):
    """log p(X | W, sigma2) - gamma * log p(Y | W, sigma2), constants included."""
    if not pair.centered:
        raise ValueError("pair must be centered")
    if pair.n_features != model.D:
        raise ValueError("pair feature count does not match the model")
    A = model.covariance()
    C = differential_covariance(pair, gamma, scaling="sums")
    logdet, inv_quad = _chol_logdet_and_inv_quad(A, C)
    n_eff = pair.n - gamma * pair.m
    return -0.5 * n_eff * (model.D * LOG_2PI + logdet) - 0.5 * inv_quad


def _as_centered_values(X, model):
    if isinstance(X, dataset.DataMatrix):
        if not X.centered:
            raise ValueError("data must be centered with the model's feature mean")
        if not X.fully_observed:
            raise ValueError("projection requires fully observed data")
        X = X.values
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != model.D:
        raise ValueError(f"expected {model.D} features, got {X.shape[1]}")
    return X


def orthonormalized_loadings(W):
    """QR-orthonormalized columns of W with a positive-diagonal sign fix."""
    Q, R = np.linalg.qr(W)
    signs = np.sign(np.diag(R))
    signs[signs == 0] = 1.0
    return Q * signs


def project(model, X, mode="posterior_mean"):
    """Map centered data to d latent coordinates.

    ``posterior_mean`` returns E[z | x] = (W^T W + sigma2 I)^{-1} W^T x;
    ``orthonormal`` projects onto the orthonormalized span of W.
    """
    X = _as_centered_values(X, model)
    if mode == "posterior_mean":
        M = model.W.T @ model.W + model.sigma2 * np.eye(model.d)
        return np.linalg.solve(M, model.W.T @ X.T).T
    if mode == "orthonormal":
        return X @ orthonormalized_loadings(model.W)
    raise ValueError(f"unknown projection mode {mode!r}")


def generate(model, count, seed, add_noise=False, latents=None):
    """Draw synthetic samples x = W z + feature_mean (+ optional noise).

    ``latents`` overrides the z draws (shape count x d) for deterministic
    checks; noise is off by default so generated data lie on the fitted
    subspace through the foreground mean.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    rng = np.random.default_rng(seed)
    if latents is None:
        latents = rng.standard_normal((count, model.d))
    else:
        latents = np.asarray(latents, dtype=float)
        if latents.shape != (count, model.d):
            raise ValueError("latents must have shape (count, d)")
    values = latents @ model.W.T + model.feature_mean
    if add_noise:
        values = values + rng.normal(scale=np.sqrt(model.sigma2),
                                     size=values.shape)
    return dataset.DataMatrix(values=values)


def heldout_log_likelihood(model, X_test):
    """Sum of log N(x; 0, WW^T + sigma2 I) over held-out (centered) rows."""
    X = _as_centered_values(X_test, model)
    A = model.covariance()
    S = X.T @ X
    logdet, inv_quad = _chol_logdet_and_inv_quad(A, 0.5 * (S + S.T))
    n = X.shape[0]
    return -0.5 * n * (model.D * LOG_2PI + logdet) - 0.5 * inv_quad
