"""Closed-form fits, the relative-likelihood objective, projection,
generation, scoring, and the gamma reparameterization."""

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from pcpca import (ContrastivePair, DataMatrix, InfeasibleGammaError,
                   PcpcaModel, center, fit_cpca, fit_pca, fit_pcpca, fit_ppca,
                   gamma_from_prime, gamma_mle_report, gamma_to_prime,
                   generate, heldout_log_likelihood, make_pair, project,
                   relative_log_likelihood)
from pcpca.spectral import differential_covariance, eig_desc


def random_pair(rng, n=40, m=30, D=5, fg_scale=1.0):
    fg = DataMatrix(values=fg_scale * rng.standard_normal((n, D)))
    bg = DataMatrix(values=rng.standard_normal((m, D)))
    return make_pair(fg, bg)


def zero_pair(D, n=1, m=1):
    return ContrastivePair(
        foreground=DataMatrix(values=np.zeros((n, D)), centered=True),
        background=DataMatrix(values=np.zeros((m, D)), centered=True),
    )


def projector_distance(A, B):
    """Frobenius distance between the projectors spanned by two bases."""
    Qa = np.linalg.qr(A)[0]
    Qb = np.linalg.qr(B)[0]
    return np.linalg.norm(Qa @ Qa.T - Qb @ Qb.T)


def reference_ppca(X, d):
    """Independent PPCA MLE on the mean covariance (textbook form)."""
    n = X.shape[0]
    S = X.T @ X / n
    s = eig_desc(S)
    sigma2 = float(np.mean(s.eigenvalues[d:]))
    W = s.eigenvectors[:, :d] * np.sqrt(s.eigenvalues[:d] - sigma2)
    return W, sigma2


def toy_mixture_pair(rng, n=200, m=200):
    """Two foreground subgroups at +-(1,-1) sharing the background covariance."""
    Sigma = np.array([[2.7, 2.6], [2.6, 2.7]])
    mu = np.array([1.0, -1.0])
    half = n // 2
    fg = np.vstack([
        rng.multivariate_normal(mu, Sigma, size=half),
        rng.multivariate_normal(-mu, Sigma, size=n - half),
    ])
    bg = rng.multivariate_normal(np.zeros(2), Sigma, size=m)
    return make_pair(DataMatrix(values=fg), DataMatrix(values=bg))


class TestFitPcpca:
    def test_hand_diagonal_case(self):
        """Scatter n*diag(5,2,1), gamma=0, d=1: sigma2=1.5, |W|=sqrt(3.5)."""
        rows = []
        for scale, axis in ((np.sqrt(15), 0), (np.sqrt(6), 1), (np.sqrt(3), 2)):
            v = np.zeros(3)
            v[axis] = scale
            rows += [v, -v]
        fg = DataMatrix(values=np.array(rows), centered=True)
        pair = ContrastivePair(foreground=fg,
                               background=DataMatrix(values=np.zeros((1, 3)),
                                                     centered=True))
        model = fit_pcpca(pair, 1, 0.0)
        assert model.sigma2 == pytest.approx(1.5)
        np.testing.assert_allclose(np.abs(model.W[:, 0]),
                                   [np.sqrt(3.5), 0.0, 0.0], atol=1e-12)

    def test_gamma_zero_reduces_to_ppca(self):
        rng = np.random.default_rng(10)
        pair = random_pair(rng)
        model = fit_pcpca(pair, 2, 0.0)
        W_ref, s2_ref = reference_ppca(pair.foreground.values, 2)
        assert abs(model.sigma2 - s2_ref) <= 1e-10
        assert np.linalg.norm(model.W @ model.W.T - W_ref @ W_ref.T) <= 1e-8

    def test_ppca_wrapper_matches(self):
        rng = np.random.default_rng(11)
        pair = random_pair(rng)
        a = fit_pcpca(pair, 2, 0.0)
        b = fit_ppca(pair.foreground, 2)
        np.testing.assert_allclose(a.W, b.W)
        assert a.sigma2 == b.sigma2

    def test_column_norms_non_increasing(self):
        rng = np.random.default_rng(12)
        model = fit_pcpca(random_pair(rng, D=6), 3, 0.2)
        norms = np.linalg.norm(model.W, axis=0)
        assert np.all(np.diff(norms) <= 1e-12)

    def test_gamma_at_sample_ratio_rejected(self):
        pair = random_pair(np.random.default_rng(13), n=20, m=20)
        with pytest.raises(InfeasibleGammaError, match="n - gamma\\*m"):
            fit_pcpca(pair, 2, 1.0)

    def test_feasibility_matches_gamma_report(self):
        """Fits succeed just below the diagnosed supremum and raise just
        above it, on random instances."""
        rng = np.random.default_rng(14)
        for _ in range(10):
            pair = random_pair(rng, n=25, m=20, D=4)
            sup = gamma_mle_report(pair, 2).mle_feasible_sup
            fit_pcpca(pair, 2, 0.999 * sup)
            with pytest.raises(InfeasibleGammaError):
                fit_pcpca(pair, 2, 1.001 * sup)

    def test_closed_form_beats_random_ascent(self):
        """Light numeric-oracle check (full version in acceptance)."""
        import scipy.optimize
        from pcpca.estimators import LOG_2PI

        rng = np.random.default_rng(15)
        pair = random_pair(rng, n=30, m=25, D=4)
        gamma = gamma_from_prime(0.4, pair.n, pair.m)
        model = fit_pcpca(pair, 2, gamma)
        closed = relative_log_likelihood(model, pair, gamma)
        C = differential_covariance(pair, gamma, "sums")
        n_eff = pair.n - gamma * pair.m
        D = 4

        def neg(theta):
            W = theta[:-1].reshape(D, 2)
            A = W @ W.T + theta[-1] * np.eye(D)
            Ainv = np.linalg.inv(A)
            ll = (-0.5 * n_eff * (D * LOG_2PI + np.linalg.slogdet(A)[1])
                  - 0.5 * np.trace(Ainv @ C))
            G = n_eff * Ainv - Ainv @ C @ Ainv
            return -ll, np.concatenate([(G @ W).ravel(), [0.5 * np.trace(G)]])

        best = -np.inf
        for k in range(5):
            r = np.random.default_rng(k)
            x0 = np.concatenate([r.normal(size=D * 2), [r.uniform(0.2, 2)]])
            res = scipy.optimize.minimize(
                neg, x0, jac=True, method="L-BFGS-B",
                bounds=[(None, None)] * (D * 2) + [(1e-6, None)])
            best = max(best, -res.fun)
        assert closed >= best - 1e-6


class TestFitCpca:
    def test_gamma_zero_is_pca(self):
        rng = np.random.default_rng(20)
        pair = random_pair(rng)
        sub = fit_cpca(pair, 2, 0.0)
        top = eig_desc(differential_covariance(pair, 0.0, "means")).eigenvectors[:, :2]
        assert projector_distance(sub.basis, top) <= 1e-10
        sub_pca = fit_pca(pair.foreground, 2)
        assert projector_distance(sub.basis, sub_pca.basis) <= 1e-10

    def test_span_matches_pcpca_at_matched_gamma(self):
        """The probabilistic loadings span the contrastive subspace when the
        mean-scaled weight gamma' maps to raw gamma = gamma' * n / m."""
        rng = np.random.default_rng(21)
        for _ in range(5):
            pair = random_pair(rng, n=40, m=25, D=5)
            gp = rng.uniform(0.1, 0.6)
            sub = fit_cpca(pair, 2, gp)
            model = fit_pcpca(pair, 2, gamma_from_prime(gp, pair.n, pair.m))
            assert projector_distance(sub.basis, model.W) <= 1e-6

    def test_direction_matches_geometric_grid_search(self):
        """Brute-force minimization of the mean reconstruction-gap objective
        over 1e5 directions agrees with the top eigenvector."""
        rng = np.random.default_rng(22)
        pair = random_pair(rng, n=60, m=50, D=2)
        gamma = 0.5
        X = pair.foreground.values
        Y = pair.background.values
        angles = np.linspace(0.0, np.pi, 100_000, endpoint=False)
        V = np.stack([np.cos(angles), np.sin(angles)])
        px = X @ V
        py = Y @ V
        loss = ((X ** 2).sum() - (px ** 2).sum(axis=0)) / pair.n \
            - gamma * ((Y ** 2).sum() - (py ** 2).sum(axis=0)) / pair.m
        best = angles[np.argmin(loss)]
        v = fit_cpca(pair, 1, gamma).basis[:, 0]
        theta = np.arctan2(v[1], v[0]) % np.pi
        delta = abs(theta - best)
        assert min(delta, np.pi - delta) <= 1e-3

    def test_warns_when_top_eigenvalue_not_positive(self):
        fg = DataMatrix(values=[[1e-3, 0.0], [-1e-3, 0.0]], centered=True)
        bg = DataMatrix(values=[[2.0, 0.0], [-2.0, 0.0]], centered=True)
        pair = ContrastivePair(foreground=fg, background=bg)
        with pytest.warns(UserWarning, match="not positive"):
            fit_cpca(pair, 1, 1.0)


class TestRelativeLogLikelihood:
    def test_standard_normal_at_origin(self):
        D = 3
        model = PcpcaModel(W=np.zeros((D, 1)), sigma2=1.0,
                           feature_mean=np.zeros(D), d=1, D=D,
                           gamma=0.0, n=1, m=1)
        value = relative_log_likelihood(model, zero_pair(D), 0.0)
        assert value == pytest.approx(-(D / 2) * np.log(2 * np.pi))

    def test_gamma_zero_matches_density_sum(self):
        rng = np.random.default_rng(30)
        pair = random_pair(rng)
        model = fit_pcpca(pair, 2, 0.0)
        direct = multivariate_normal(mean=np.zeros(5),
                                     cov=model.covariance()).logpdf(
                                         pair.foreground.values).sum()
        assert relative_log_likelihood(model, pair, 0.0) == pytest.approx(direct)

    def test_local_optimality_of_closed_form(self):
        rng = np.random.default_rng(31)
        pair = random_pair(rng)
        gamma = gamma_from_prime(0.3, pair.n, pair.m)
        model = fit_pcpca(pair, 2, gamma)
        at_mle = relative_log_likelihood(model, pair, gamma)
        for _ in range(100):
            E = rng.standard_normal(model.W.shape)
            E *= 0.1 / np.linalg.norm(E)
            bumped = PcpcaModel(W=model.W + E, sigma2=model.sigma2,
                                feature_mean=model.feature_mean, d=2, D=5,
                                gamma=gamma, n=pair.n, m=pair.m)
            assert relative_log_likelihood(bumped, pair, gamma) <= at_mle + 1e-9

    def test_rotation_invariance(self):
        """The objective sees W only through WW^T (50 random rotations)."""
        rng = np.random.default_rng(32)
        pair = random_pair(rng)
        gamma = 0.4
        model = fit_pcpca(pair, 2, gamma)
        base = relative_log_likelihood(model, pair, gamma)
        for _ in range(50):
            R = np.linalg.qr(rng.standard_normal((2, 2)))[0]
            rotated = PcpcaModel(W=model.W @ R, sigma2=model.sigma2,
                                 feature_mean=model.feature_mean, d=2, D=5,
                                 gamma=gamma, n=pair.n, m=pair.m)
            assert abs(relative_log_likelihood(rotated, pair, gamma) - base) <= 1e-8


class TestProject:
    def _model(self, W, sigma2):
        D = W.shape[0]
        return PcpcaModel(W=W, sigma2=sigma2, feature_mean=np.zeros(D),
                          d=W.shape[1], D=D, gamma=0.0, n=1, m=1)

    def test_hand_posterior_mean(self):
        W = np.zeros((3, 1))
        W[0, 0] = 1.0
        model = self._model(W, 1.0)
        x = np.array([2.0, 0.0, 0.0])
        z = project(model, x, mode="posterior_mean")
        assert z[0, 0] == pytest.approx(1.0)

    def test_posterior_mean_limit_is_orthonormal_projection(self):
        rng = np.random.default_rng(40)
        W = np.linalg.qr(rng.standard_normal((5, 2)))[0]
        model = self._model(W, 1e-12)
        X = rng.standard_normal((7, 5))
        np.testing.assert_allclose(project(model, X, "posterior_mean"),
                                   X @ W, atol=1e-9)

    def test_orthonormal_mode_exact_for_orthonormal_W(self):
        rng = np.random.default_rng(41)
        W = np.linalg.qr(rng.standard_normal((5, 2)))[0]
        model = self._model(W, 0.5)
        X = rng.standard_normal((7, 5))
        np.testing.assert_allclose(project(model, X, "orthonormal"), X @ W,
                                   atol=1e-12)

    def test_dimension_mismatch(self):
        model = self._model(np.zeros((3, 1)), 1.0)
        with pytest.raises(ValueError):
            project(model, np.zeros((2, 4)))


class TestGenerate:
    def test_zero_latents_give_feature_mean(self):
        mean = np.array([3.0, -1.0])
        model = PcpcaModel(W=np.ones((2, 1)), sigma2=0.5, feature_mean=mean,
                           d=1, D=2, gamma=0.0, n=1, m=1)
        out = generate(model, 1, seed=0, latents=np.zeros((1, 1)))
        np.testing.assert_allclose(out.values[0], mean)

    def test_noiseless_covariance_matches_WWt(self):
        rng = np.random.default_rng(42)
        W = rng.standard_normal((4, 2))
        model = PcpcaModel(W=W, sigma2=0.3, feature_mean=np.zeros(4),
                           d=2, D=4, gamma=0.0, n=1, m=1)
        draws = generate(model, 100_000, seed=7)
        S = np.cov(draws.values.T, bias=True)
        target = W @ W.T
        assert np.linalg.norm(S - target) <= 0.05 * np.linalg.norm(target)

    def test_noisy_covariance_matches_marginal(self):
        rng = np.random.default_rng(43)
        W = rng.standard_normal((4, 2))
        model = PcpcaModel(W=W, sigma2=0.7, feature_mean=np.zeros(4),
                           d=2, D=4, gamma=0.0, n=1, m=1)
        draws = generate(model, 100_000, seed=8, add_noise=True)
        S = np.cov(draws.values.T, bias=True)
        target = model.covariance()
        assert np.linalg.norm(S - target) <= 0.05 * np.linalg.norm(target)

    def test_deterministic_given_seed(self):
        model = PcpcaModel(W=np.ones((2, 1)), sigma2=1.0,
                           feature_mean=np.zeros(2), d=1, D=2, gamma=0.0,
                           n=1, m=1)
        a = generate(model, 5, seed=3, add_noise=True)
        b = generate(model, 5, seed=3, add_noise=True)
        np.testing.assert_array_equal(a.values, b.values)


class TestHeldoutLogLikelihood:
    def test_standard_normal_hand_value(self):
        model = PcpcaModel(W=np.zeros((2, 1)), sigma2=1.0,
                           feature_mean=np.zeros(2), d=1, D=2, gamma=0.0,
                           n=1, m=1)
        assert heldout_log_likelihood(model, np.zeros((1, 2))) == \
            pytest.approx(-np.log(2 * np.pi))

    def test_equals_relative_ll_with_zero_background(self):
        rng = np.random.default_rng(50)
        pair = random_pair(rng)
        model = fit_pcpca(pair, 2, 0.0)
        ll = heldout_log_likelihood(model, pair.foreground)
        assert ll == pytest.approx(relative_log_likelihood(model, pair, 0.0))

    def test_rotation_invariant(self):
        rng = np.random.default_rng(51)
        pair = random_pair(rng)
        model = fit_pcpca(pair, 2, 0.0)
        base = heldout_log_likelihood(model, pair.foreground)
        for _ in range(10):
            R = np.linalg.qr(rng.standard_normal((2, 2)))[0]
            rotated = PcpcaModel(W=model.W @ R, sigma2=model.sigma2,
                                 feature_mean=model.feature_mean, d=2, D=5,
                                 gamma=0.0, n=pair.n, m=pair.m)
            assert abs(heldout_log_likelihood(rotated, pair.foreground)
                       - base) <= 1e-8


class TestConvertGamma:
    def test_arithmetic(self):
        assert gamma_from_prime(0.5, 200, 100) == pytest.approx(1.0)
        assert gamma_to_prime(1.0, 200, 100) == pytest.approx(0.5)

    def test_prime_below_one_iff_gamma_below_ratio(self):
        rng = np.random.default_rng(60)
        for _ in range(20):
            n, m = int(rng.integers(5, 50)), int(rng.integers(5, 50))
            gp = rng.uniform(0, 2)
            assert (gp < 1) == (gamma_from_prime(gp, n, m) < n / m)

    def test_equal_sizes_identity(self):
        assert gamma_from_prime(0.7, 33, 33) == pytest.approx(0.7)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            gamma_from_prime(-0.1, 5, 5)


class TestPcaObjectiveEquivalence:
    def test_top_eigenvector_optimizes_both_objectives(self):
        """Max variance and min reconstruction error coincide against 1e5
        random unit directions."""
        rng = np.random.default_rng(70)
        X = rng.standard_normal((50, 4)) @ np.diag([3.0, 1.5, 1.0, 0.5])
        X = X - X.mean(axis=0)
        C = X.T @ X
        v_top = eig_desc(C).eigenvectors[:, 0]
        directions = rng.standard_normal((100_000, 4))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        var_top = v_top @ C @ v_top
        variances = np.einsum("kd,de,ke->k", directions, C, directions)
        assert var_top >= variances.max() - 1e-9
        # reconstruction error = total - projected variance: same argmax
        recon_top = np.trace(C) - var_top
        recons = np.trace(C) - variances
        assert recon_top <= recons.min() + 1e-9


class TestToyGeometry:
    def test_high_gamma_recovers_subgroup_axis(self):
        rng = np.random.default_rng(80)
        pair = toy_mixture_pair(rng)
        model = fit_pcpca(pair, 1, gamma_from_prime(0.9, pair.n, pair.m))
        w = model.W[:, 0] / np.linalg.norm(model.W[:, 0])
        axis = np.array([1.0, -1.0]) / np.sqrt(2)
        angle = np.degrees(np.arccos(min(abs(w @ axis), 1.0)))
        assert angle <= 10.0

    def test_zero_gamma_recovers_shared_axis(self):
        rng = np.random.default_rng(81)
        pair = toy_mixture_pair(rng)
        model = fit_pcpca(pair, 1, 0.0)
        w = model.W[:, 0] / np.linalg.norm(model.W[:, 0])
        axis = np.array([1.0, 1.0]) / np.sqrt(2)
        angle = np.degrees(np.arccos(min(abs(w @ axis), 1.0)))
        assert angle <= 10.0


class TestModelSerialization:
    def test_json_roundtrip(self):
        rng = np.random.default_rng(90)
        pair = random_pair(rng)
        model = fit_pcpca(pair, 2, 0.2)
        back = PcpcaModel.from_json(model.to_json())
        np.testing.assert_array_equal(back.W, model.W)
        assert back.sigma2 == model.sigma2
        assert back.gamma_prime == pytest.approx(model.gamma_prime)

    def test_unknown_version_rejected(self):
        with pytest.raises(ValueError, match="version"):
            PcpcaModel.from_json('{"version": "pcpca-model/999"}')
