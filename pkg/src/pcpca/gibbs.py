"""Generalized-Bayes layer: empirical and population risks, the Gibbs
log-posterior, adaptive random-walk Metropolis sampling, risk divergence,
and the empirical contraction-rate statistic.

The Gibbs posterior has density proportional to exp(-w * (n+m) * R_n)
times a proper prior; the subspace variant lives on the set of orthonormal
bases (states compared only through their projectors), the probabilistic
variant on a bounded box for W entries and the noise variance.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InfeasibleGammaError, SamplerStuckError
from .estimators import (LOG_2PI, PcpcaModel, Subspace, _chol_logdet_and_inv_quad,
                         _closed_form, fit_pcpca)
from .spectral import eig_desc, scatter_matrix

CHAIN_SCHEMA_VERSION = "pcpca-chain/1"


@dataclass(frozen=True)
class PriorBox:
    """Uniform prior support: |W_ij| <= w_bound, sigma2 in [low, high]."""

    w_bound: float
    sigma2_low: float
    sigma2_high: float

    def __post_init__(self):
        if self.w_bound <= 0 or self.sigma2_low <= 0:
            raise ValueError("prior box bounds must be positive")
        if self.sigma2_high <= self.sigma2_low:
            raise ValueError("sigma2_high must exceed sigma2_low")

    def contains(self, W, sigma2):
        return (np.max(np.abs(W)) <= self.w_bound
                and self.sigma2_low <= sigma2 <= self.sigma2_high)


@dataclass(frozen=True)
class GibbsConfig:
    """Sampler settings; ``learning_rate_w`` is the Gibbs tempering weight."""

    learning_rate_w: float = 1.0
    n_samples: int = 5000
    burn_in: int = 1000
    thinning: int = 1
    proposal_scale: float = 1.0
    target_accept: float = 0.3
    prior_box: PriorBox = None
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate_w <= 0:
            raise ValueError("learning_rate_w must be positive")
        if not 0 <= self.burn_in < self.n_samples:
            raise ValueError("burn_in must lie in [0, n_samples)")
        if self.thinning < 1:
            raise ValueError("thinning must be at least 1")


@dataclass(frozen=True)
class PopulationMixture:
    """Foreground/background covariances with their mixing weight."""

    beta: float
    C_F: np.ndarray
    C_B: np.ndarray
    gamma: float

    def __post_init__(self):
        if not 0 < self.beta <= 1:
            raise ValueError("beta must lie in (0, 1]")
        for name in ("C_F", "C_B"):
            M = np.asarray(getattr(self, name), dtype=float)
            if np.max(np.abs(M - M.T)) > 1e-10 * max(1.0, np.max(np.abs(M))):
                raise ValueError(f"{name} must be symmetric")
            if np.min(np.linalg.eigvalsh(M)) < -1e-8 * max(1.0, np.max(np.abs(M))):
                raise ValueError(f"{name} must be PSD")
            object.__setattr__(self, name, 0.5 * (M + M.T))

    @property
    def contrast_weight(self):
        """beta - (1 - beta) * gamma, the effective log-det weight."""
        return self.beta - (1.0 - self.beta) * self.gamma

    def differential(self):
        return self.beta * self.C_F - (1.0 - self.beta) * self.gamma * self.C_B


@dataclass
class GibbsChain:
    """Kept posterior states with their log densities and acceptance stats."""

    kind: str
    states: list
    log_densities: np.ndarray
    acceptance_rate: float
    config: GibbsConfig
    prior_box: PriorBox = None

    def __len__(self):
        return len(self.states)

    def to_json(self, indent=None):
        if self.kind == "pcpca":
            states = [{"W": W.tolist(), "sigma2": float(s2)}
                      for W, s2 in self.states]
        else:
            states = [{"basis": V.tolist()} for V in self.states]
        payload = {
            "version": CHAIN_SCHEMA_VERSION,
            "kind": self.kind,
            "states": states,
            "log_densities": self.log_densities.tolist(),
            "acceptance_rate": float(self.acceptance_rate),
            "config": {
                "learning_rate_w": self.config.learning_rate_w,
                "n_samples": self.config.n_samples,
                "burn_in": self.config.burn_in,
                "thinning": self.config.thinning,
                "proposal_scale": self.config.proposal_scale,
                "target_accept": self.config.target_accept,
                "seed": self.config.seed,
            },
            "prior_box": None if self.prior_box is None else {
                "w_bound": self.prior_box.w_bound,
                "sigma2_low": self.prior_box.sigma2_low,
                "sigma2_high": self.prior_box.sigma2_high,
            },
        }
        return json.dumps(payload, indent=indent)


def _risk_pcpca_from_scatter(W, sigma2, S_X, S_Y, n, m, gamma):
    D = S_X.shape[0]
    A = W @ W.T + sigma2 * np.eye(D)
    logdet, inv_quad = _chol_logdet_and_inv_quad(A, S_X - gamma * S_Y)
    n_eff = n - gamma * m
    return (0.5 * n_eff * (D * LOG_2PI + logdet) + 0.5 * inv_quad) / (n + m)


def empirical_risk_pcpca(W, sigma2, pair, gamma):
    """Average loss over both groups; equals -relative_log_likelihood/(n+m)."""
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    S_X = scatter_matrix(pair.foreground, "sums")
    S_Y = scatter_matrix(pair.background, "sums")
    return _risk_pcpca_from_scatter(np.asarray(W, float), sigma2,
                                    S_X, S_Y, pair.n, pair.m, gamma)


def _risk_cpca_from_scatter(V, S_X, S_Y, n, m, gamma):
    rx = float(np.trace(S_X)) - float(np.sum((S_X @ V) * V))
    ry = float(np.trace(S_Y)) - float(np.sum((S_Y @ V) * V))
    return (rx - gamma * ry) / (n + m)


def _as_basis(V):
    basis = V.basis if isinstance(V, Subspace) else np.asarray(V, dtype=float)
    d = basis.shape[1]
    if np.max(np.abs(basis.T @ basis - np.eye(d))) > 1e-8:
        raise ValueError("V must have orthonormal columns")
    return basis


def empirical_risk_cpca(V, pair, gamma):
    """Reconstruction-gap loss of a subspace, absolute constants retained."""
    basis = _as_basis(V)
    S_X = scatter_matrix(pair.foreground, "sums")
    S_Y = scatter_matrix(pair.background, "sums")
    return _risk_cpca_from_scatter(basis, S_X, S_Y, pair.n, pair.m, gamma)


def population_risk_pcpca(W, sigma2, mix):
    """Expected per-sample loss under the population mixture."""
    D = mix.C_F.shape[0]
    A = np.asarray(W, float) @ np.asarray(W, float).T + sigma2 * np.eye(D)
    logdet, inv_quad = _chol_logdet_and_inv_quad(A, mix.differential())
    return 0.5 * mix.contrast_weight * (D * LOG_2PI + logdet) + 0.5 * inv_quad


def population_risk_cpca(V, mix):
    basis = _as_basis(V)
    C_F, C_B = mix.C_F, mix.C_B
    rf = float(np.trace(C_F)) - float(np.sum((C_F @ basis) * basis))
    rb = float(np.trace(C_B)) - float(np.sum((C_B @ basis) * basis))
    return mix.beta * rf - (1.0 - mix.beta) * mix.gamma * rb


def population_minimizer(mix, d):
    """Risk-minimizing (W*, sigma2*) for the population mixture.

    Identical algebra to the empirical closed form with the sample weight
    n - gamma*m replaced by beta - (1-beta)*gamma.
    """
    c = mix.contrast_weight
    if c <= 0:
        raise InfeasibleGammaError(
            f"beta - (1-beta)*gamma = {c:.6g} must be positive"
        )
    C = mix.differential()
    D = C.shape[0]
    if not 1 <= d < D:
        raise ValueError(f"d must lie in [1, {D - 1}], got {d}")
    W, sigma2, _ = _closed_form(C, c, d, tag="population mixture")
    return W, sigma2


def population_minimizer_cpca(mix, d):
    """Top-d eigenvectors of the population differential covariance."""
    return Subspace(basis=eig_desc(mix.differential()).eigenvectors[:, :d].copy())


def risk_divergence(theta, theta_star, mix):
    """sqrt(R(theta) - R(theta*)), clamped at zero against float noise.

    ``theta`` is either a (W, sigma2) pair or a subspace basis; both
    arguments must be of the same kind.
    """
    if isinstance(theta, (tuple, list)):
        r = population_risk_pcpca(theta[0], theta[1], mix)
        r_star = population_risk_pcpca(theta_star[0], theta_star[1], mix)
    else:
        r = population_risk_cpca(theta, mix)
        r_star = population_risk_cpca(theta_star, mix)
    return float(np.sqrt(max(r - r_star, 0.0)))


def qr_retract(M):
    """Orthonormalize columns by QR with a sign-fixed diagonal."""
    Q, R = np.linalg.qr(M)
    signs = np.sign(np.diag(R))
    signs[signs == 0] = 1.0
    return Q * signs


def random_walk_metropolis(log_density, initial, propose, config, rng):
    """Generic adaptive random-walk Metropolis kernel.

    ``propose(state, scale, rng)`` draws a candidate. The proposal scale
    adapts toward ``target_accept`` in batches of 50 during burn-in only,
    so the post-burn-in kernel is fixed. Returns kept states, their log
    densities, the post-burn-in acceptance rate, and the final scale.
    """
    state = initial
    logp = log_density(state)
    if not np.isfinite(logp):
        raise ValueError("initial state has zero prior density")
    scale = config.proposal_scale
    states = []
    logps = []
    accepted_post = 0
    accepted_burn = 0
    batch_accepts = 0
    post_steps = 0
    for t in range(config.n_samples):
        candidate = propose(state, scale, rng)
        cand_logp = log_density(candidate)
        if np.log(rng.random()) < cand_logp - logp:
            state, logp = candidate, cand_logp
            if t < config.burn_in:
                accepted_burn += 1
                batch_accepts += 1
            else:
                accepted_post += 1
        if t < config.burn_in:
            if (t + 1) % 50 == 0:
                scale *= float(np.exp(batch_accepts / 50.0 - config.target_accept))
                batch_accepts = 0
        else:
            post_steps += 1
            if (t - config.burn_in) % config.thinning == 0:
                states.append(state)
                logps.append(logp)
    if config.burn_in > 0 and accepted_burn == 0:
        raise SamplerStuckError(
            "no proposal accepted during burn-in",
            diagnostics={"scale": scale, "last_log_density": logp},
        )
    rate = accepted_post / post_steps if post_steps else 0.0
    return states, np.array(logps), rate, scale


def default_prior_box(pair):
    """Data-derived box: generous multiples of the foreground scale."""
    S_X = scatter_matrix(pair.foreground, "sums")
    n = pair.n
    top = float(eig_desc(S_X).eigenvalues[0])
    D = S_X.shape[0]
    return PriorBox(
        w_bound=10.0 * np.sqrt(max(top, 1e-12) / n),
        sigma2_low=1e-4,
        sigma2_high=10.0 * float(np.trace(S_X)) / (n * D),
    )


def sample_gibbs(pair, d, gamma, model_kind="pcpca", config=None):
    """Draw from the Gibbs posterior exp(-w*(n+m)*R_n(theta)) * prior.

    ``model_kind`` selects the parameter space: "pcpca" walks (W, sigma2)
    inside the uniform prior box, "cpca" walks orthonormal bases with a QR
    retraction after each Gaussian perturbation. Deterministic given the
    config seed.
    """
    if not pair.centered:
        raise ValueError("pair must be centered")
    config = config or GibbsConfig()
    rng = np.random.default_rng(config.seed)
    S_X = scatter_matrix(pair.foreground, "sums")
    S_Y = scatter_matrix(pair.background, "sums")
    n, m = pair.n, pair.m
    w = config.learning_rate_w
    D = pair.n_features

    if model_kind == "pcpca":
        box = config.prior_box or default_prior_box(pair)
        try:
            mle = fit_pcpca(pair, d, gamma)
            W0, s0 = mle.W, mle.sigma2
            if not box.contains(W0, s0):
                warnings.warn("closed-form estimate lies outside the prior box",
                              stacklevel=2)
        except InfeasibleGammaError:
            W0 = np.zeros((D, d))
            s0 = float(np.sqrt(box.sigma2_low * box.sigma2_high))
        W0 = np.clip(W0, -box.w_bound, box.w_bound)
        s0 = float(np.clip(s0, box.sigma2_low, box.sigma2_high))

        widths = np.concatenate([
            np.full(D * d, 0.1 * box.w_bound),
            [0.1 * (box.sigma2_high - box.sigma2_low)],
        ])

        def log_density(theta):
            W = theta[:-1].reshape(D, d)
            sigma2 = theta[-1]
            if not box.contains(W, sigma2):
                return -np.inf
            return -w * (n + m) * _risk_pcpca_from_scatter(
                W, sigma2, S_X, S_Y, n, m, gamma)

        def propose(theta, scale, rng):
            return theta + scale * widths * rng.standard_normal(theta.shape)

        initial = np.concatenate([W0.ravel(), [s0]])
        raw_states, logps, rate, _ = random_walk_metropolis(
            log_density, initial, propose, config, rng)
        states = [(s[:-1].reshape(D, d).copy(), float(s[-1]))
                  for s in raw_states]
        return GibbsChain(kind="pcpca", states=states, log_densities=logps,
                          acceptance_rate=rate, config=config, prior_box=box)

    if model_kind == "cpca":
        V0 = eig_desc(S_X - gamma * S_Y).eigenvectors[:, :d].copy()

        def log_density(V):
            return -w * (n + m) * _risk_cpca_from_scatter(V, S_X, S_Y, n, m, gamma)

        def propose(V, scale, rng):
            return qr_retract(V + 0.1 * scale * rng.standard_normal(V.shape))

        raw_states, logps, rate, _ = random_walk_metropolis(
            log_density, V0, propose, config, rng)
        return GibbsChain(kind="cpca", states=raw_states, log_densities=logps,
                          acceptance_rate=rate, config=config)

    raise ValueError(f"unknown model_kind {model_kind!r}")


def contraction_stat(chain, theta_star, mix, n, c_const=1.0):
    """Fraction of chain states whose risk divergence exceeds c / sqrt(n)."""
    if len(chain) == 0:
        raise ValueError("chain is empty")
    threshold = c_const * n ** -0.5
    exceed = sum(
        risk_divergence(state, theta_star, mix) > threshold
        for state in chain.states
    )
    return exceed / len(chain)
