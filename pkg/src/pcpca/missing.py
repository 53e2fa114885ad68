"""Fitting from partially observed data and conditional-Gaussian imputation.

The observed-data objective sums, per sample, the Gaussian log density of
the observed subvector under the marginal covariance restricted to the
observed coordinates (background samples enter with weight -gamma). Its
closed-form W and sigma2 gradients enable first-order ascent; unobserved
foreground cells are then imputed by conditioning the fitted Gaussian.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .dataset import DataMatrix
from .errors import (InfeasibleGammaError, MetricUndefinedError,
                     NonConvergenceError, NumericError)
from .estimators import LOG_2PI, PcpcaModel
from .spectral import eig_desc


@dataclass(frozen=True)
class OptimizerConfig:
    """Adaptive-moment ascent hyperparameters (Adam with a sigma2 floor)."""

    step_size: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon_hat: float = 1e-8
    max_iters: int = 2000
    grad_tol: float = 1e-5
    sigma2_floor: float = 1e-6

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.step_size <= 0 or self.sigma2_floor <= 0:
            raise ValueError("step_size and sigma2_floor must be positive")


@dataclass
class FitTrace:
    """Objective trajectory and convergence data for one ascent run."""

    objectives: np.ndarray
    final_grad_norm: float
    converged: bool
    iterations_used: int


class _MaskGroups:
    """Samples grouped by observation pattern, batched by pattern size.

    Each distinct pattern contributes its sample count k and the scatter
    T = sum of x^o x^o^T over its samples; patterns of equal observed size
    share one stacked Cholesky/solve, which keeps evaluations fast when
    most samples carry distinct random masks.
    """

    def __init__(self, data):
        D = data.n_features
        self.n_features = D
        patterns = {}
        for i in range(data.n_samples):
            obs = np.flatnonzero(data.mask[i])
            if obs.size == 0:
                raise ValueError(f"sample {i + 1} has no observed features")
            patterns.setdefault(obs.tobytes(), (obs, []))[1].append(i)
        by_size = {}
        for obs, rows in patterns.values():
            V = data.values[np.ix_(np.array(rows), obs)]
            by_size.setdefault(obs.size, []).append((obs, len(rows), V.T @ V))
        self.size_classes = []
        for size, entries in sorted(by_size.items()):
            obs_stack = np.array([e[0] for e in entries])
            counts = np.array([e[1] for e in entries], dtype=float)
            T_stack = np.array([e[2] for e in entries])
            flat_idx = obs_stack[:, :, None] * D + obs_stack[:, None, :]
            self.size_classes.append((size, counts, T_stack, flat_idx))

    def log_density_and_suffstats(self, Sigma, with_grad):
        """Total restricted log density; optionally the D x D gradient kernel
        sum_i L_i^T [A_i^{-1} - A_i^{-1} x x^T A_i^{-1}] L_i scattered back
        into full coordinates."""
        total = 0.0
        flat_G = np.zeros(self.n_features ** 2) if with_grad else None
        sigma_flat = Sigma.ravel()
        for size, counts, T_stack, flat_idx in self.size_classes:
            A_stack = sigma_flat[flat_idx]
            try:
                chol = np.linalg.cholesky(A_stack)
            except np.linalg.LinAlgError as exc:
                raise NumericError("restricted covariance is not PD") from exc
            logdets = 2.0 * np.sum(
                np.log(chol.reshape(len(counts), -1)[:, ::size + 1]), axis=1)
            AinvT = np.linalg.solve(A_stack, T_stack)
            quads = np.trace(AinvT, axis1=1, axis2=2)
            total += -0.5 * float(
                np.sum(counts * (size * LOG_2PI + logdets) + quads))
            if with_grad:
                Ainv = np.linalg.solve(
                    A_stack, np.broadcast_to(np.eye(size), A_stack.shape))
                terms = counts[:, None, None] * Ainv - AinvT @ Ainv
                np.add.at(flat_G, flat_idx.ravel(), terms.ravel())
        G = flat_G.reshape(self.n_features, -1) if with_grad else None
        return total, G


def _marginal_cov(W, sigma2):
    return W @ W.T + sigma2 * np.eye(W.shape[0])


def masked_objective(W, sigma2, pair, gamma):
    """Relative log likelihood of the observed cells only."""
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    Sigma = _marginal_cov(np.asarray(W, float), sigma2)
    fg = _MaskGroups(pair.foreground)
    bg = _MaskGroups(pair.background)
    lx, _ = fg.log_density_and_suffstats(Sigma, with_grad=False)
    ly, _ = bg.log_density_and_suffstats(Sigma, with_grad=False)
    return lx - gamma * ly


def masked_gradient(W, sigma2, pair, gamma):
    """Closed-form (dW, dsigma2) of :func:`masked_objective`."""
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    W = np.asarray(W, float)
    Sigma = _marginal_cov(W, sigma2)
    fg = _MaskGroups(pair.foreground)
    bg = _MaskGroups(pair.background)
    _, Gx = fg.log_density_and_suffstats(Sigma, with_grad=True)
    _, Gy = bg.log_density_and_suffstats(Sigma, with_grad=True)
    G = Gx - gamma * Gy
    return -G @ W, -0.5 * float(np.trace(G))


def _objective_and_gradient(W, sigma2, fg, bg, gamma):
    Sigma = _marginal_cov(W, sigma2)
    lx, Gx = fg.log_density_and_suffstats(Sigma, with_grad=True)
    ly, Gy = bg.log_density_and_suffstats(Sigma, with_grad=True)
    G = Gx - gamma * Gy
    return lx - gamma * ly, -G @ W, -0.5 * float(np.trace(G))


def available_case_scatter(data):
    """Pairwise available-case estimate of sum_i x_i x_i^T.

    Returns (scatter, complete) where ``complete`` is False when some
    feature pair has no jointly observed sample.
    """
    X = data.observed_values()
    M = data.mask.astype(float)
    raw = X.T @ X
    counts = M.T @ M
    complete = bool(np.all(counts > 0))
    scale = np.divide(data.n_samples, counts,
                      out=np.zeros_like(raw), where=counts > 0)
    S = raw * scale
    return 0.5 * (S + S.T), complete


def _check_gamma_feasibility(pair, d, gamma):
    n, m = pair.n, pair.m
    if gamma * m / n >= 1.0 - 1e-12:
        raise InfeasibleGammaError(
            f"gamma={gamma:.6g} violates n - gamma*m > 0 (n={n}, m={m})"
        )
    S_X, ok_x = available_case_scatter(pair.foreground)
    S_Y, ok_y = available_case_scatter(pair.background)
    if not (ok_x and ok_y):
        warnings.warn(
            "some feature pairs have no jointly observed samples; "
            "gamma feasibility cannot be verified", stacklevel=3,
        )
        return
    tail = float(np.sum(eig_desc(S_X - gamma * S_Y).eigenvalues[d:]))
    if tail <= 0.0:
        raise InfeasibleGammaError(
            f"available-case tail eigenvalue sum {tail:.6g} is non-positive "
            f"at gamma={gamma:.6g}"
        )


def fit_missing(pair, d, gamma, config=None, seed=0):
    """Maximize the observed-data objective by Adam ascent.

    Starts from W ~ N(0, 0.01) and sigma2 = 1 (seeded), clamps sigma2 at
    the configured floor, and returns the best-objective iterate together
    with the full trace.
    """
    config = config or OptimizerConfig()
    D = pair.n_features
    if not 1 <= d < D:
        raise ValueError(f"d must lie in [1, {D - 1}], got {d}")
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    _check_gamma_feasibility(pair, d, gamma)

    fg = _MaskGroups(pair.foreground)
    bg = _MaskGroups(pair.background)
    rng = np.random.default_rng(seed)
    W = rng.normal(scale=0.1, size=(D, d))
    sigma2 = 1.0

    mW = np.zeros_like(W)
    vW = np.zeros_like(W)
    ms = 0.0
    vs = 0.0
    best_obj = -np.inf
    best_params = (W.copy(), sigma2)
    objectives = []
    converged = False
    grad_norm = np.inf
    floor_streak = 0
    floor_start_obj = None

    t = 0
    for t in range(1, config.max_iters + 1):
        obj, dW, ds = _objective_and_gradient(W, sigma2, fg, bg, gamma)
        if not np.isfinite(obj):
            raise NonConvergenceError(
                "objective became non-finite",
                trace=FitTrace(np.array(objectives), grad_norm, False, t - 1),
            )
        objectives.append(obj)
        if obj > best_obj:
            best_obj = obj
            best_params = (W.copy(), sigma2)
        grad_norm = max(float(np.max(np.abs(dW))), abs(ds))
        if grad_norm <= config.grad_tol:
            converged = True
            break

        mW = config.beta1 * mW + (1 - config.beta1) * dW
        vW = config.beta2 * vW + (1 - config.beta2) * dW ** 2
        ms = config.beta1 * ms + (1 - config.beta1) * ds
        vs = config.beta2 * vs + (1 - config.beta2) * ds ** 2
        bias1 = 1 - config.beta1 ** t
        bias2 = 1 - config.beta2 ** t
        W = W + config.step_size * (mW / bias1) / (
            np.sqrt(vW / bias2) + config.epsilon_hat)
        sigma2 = sigma2 + config.step_size * (ms / bias1) / (
            np.sqrt(vs / bias2) + config.epsilon_hat)

        if sigma2 < config.sigma2_floor:
            sigma2 = config.sigma2_floor
            if floor_streak == 0:
                floor_start_obj = obj
            floor_streak += 1
            if floor_streak > 100 and obj > floor_start_obj:
                raise NonConvergenceError(
                    "objective keeps climbing with sigma2 pinned at the "
                    "floor; the noise variance is collapsing",
                    trace=FitTrace(np.array(objectives), grad_norm, False, t),
                )
        else:
            floor_streak = 0

    W_best, sigma2_best = best_params
    # Canonical column order: descending norms, rotation pinned by QR sign.
    order = np.argsort(-np.sum(W_best ** 2, axis=0), kind="stable")
    W_best = W_best[:, order]
    trace = FitTrace(
        objectives=np.array(objectives),
        final_grad_norm=grad_norm,
        converged=converged,
        iterations_used=t,
    )
    model = PcpcaModel(
        W=W_best, sigma2=float(max(sigma2_best, config.sigma2_floor)),
        feature_mean=pair.foreground.feature_mean,
        d=d, D=D, gamma=float(gamma), n=pair.n, m=pair.m,
    )
    return model, trace


def impute(model, x, mask):
    """Conditional mean and covariance of the unobserved block of one sample.

    ``x`` is a full-length centered sample; only entries where ``mask`` is
    True are read. Returns arrays over the unobserved coordinates, in
    increasing index order; both are empty when everything is observed.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (model.D,):
        raise ValueError("mask must be a length-D boolean vector")
    obs = np.flatnonzero(mask)
    unobs = np.flatnonzero(~mask)
    if obs.size == 0:
        raise ValueError("cannot impute a fully unobserved sample")
    if unobs.size == 0:
        return np.empty(0), np.empty((0, 0))
    x = np.asarray(x, dtype=float)
    Sigma = model.covariance()
    A = Sigma[np.ix_(obs, obs)]
    F = Sigma[np.ix_(unobs, obs)]
    C_u = Sigma[np.ix_(unobs, unobs)]
    solve = np.linalg.solve(A, np.column_stack([x[obs], F.T]))
    mean = F @ solve[:, 0]
    cov = C_u - F @ solve[:, 1:]
    cov = 0.5 * (cov + cov.T)
    evals, evecs = np.linalg.eigh(cov)
    tol = 1e-10 * max(1.0, float(np.max(np.abs(Sigma))))
    if np.any(evals < -tol):
        raise NumericError("conditional covariance is not PSD")
    evals = np.clip(evals, 0.0, None)
    cov = (evecs * evals) @ evecs.T
    return mean, cov


def impute_matrix(model, values, mask):
    """Fill every unobserved cell with its conditional mean.

    ``values`` must already be centered by the model's feature mean;
    entries are read only where ``mask`` is True. Returns (filled values,
    per-cell conditional standard deviations); stdev is zero at observed
    cells.
    """
    values = np.asarray(values, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    filled = np.where(mask, values, 0.0)
    stdev = np.zeros_like(filled)
    for i in range(values.shape[0]):
        if mask[i].all():
            continue
        mean, cov = impute(model, filled[i], mask[i])
        unobs = np.flatnonzero(~mask[i])
        filled[i, unobs] = mean
        stdev[i, unobs] = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return filled, stdev


def imputation_mse(truth, imputed, hidden):
    """Per-sample-normalized mean squared error over the hidden cells.

    MSE = mean over samples with at least one hidden cell of
    ||x_u - xhat_u||^2 / U_i. Raises when nothing is hidden.
    """
    truth = truth.values if isinstance(truth, DataMatrix) else np.asarray(truth, float)
    imputed = np.asarray(imputed, dtype=float)
    hidden = np.asarray(hidden, dtype=bool)
    if truth.shape != imputed.shape or truth.shape != hidden.shape:
        raise ValueError("truth, imputed, and hidden must share one shape")
    counts = hidden.sum(axis=1)
    if counts.sum() == 0:
        raise MetricUndefinedError("no hidden cells: imputation MSE undefined")
    sq = np.where(hidden, (truth - imputed) ** 2, 0.0).sum(axis=1)
    keep = counts > 0
    return float(np.mean(sq[keep] / counts[keep]))
