"""Closed-loop filter and smoother against exact joint-Gaussian conditioning."""

import numpy as np
import pytest
from conftest import (
    oracle_filtered,
    oracle_smoothed,
    random_model,
    random_policy,
    random_spd,
)

from socem.dynamics import LtvModel, LtvStep
from socem.policy import PolicyParams, PolicyStep
from socem.smoothing import (
    augment,
    kalman_filter,
    rts_smooth,
    sample_latent_paths,
)


def _instance(seed, T, n_s, n_a, affine=True, noise=0.3):
    rng = np.random.default_rng(seed)
    model = random_model(rng, T, n_s, n_a, affine=affine)
    policy = random_policy(rng, T, n_s, n_a, noise=noise)
    s1 = rng.standard_normal(n_s)
    P1 = random_spd(rng, n_s, 0.2)
    y = rng.standard_normal(T)
    return model, policy, s1, P1, y


class TestAugment:
    def test_open_loop(self):
        rng = np.random.default_rng(0)
        model = random_model(rng, 1, 3, 2)
        zero = PolicyStep(F=np.zeros((2, 3)), e=np.zeros(2), sigma_sqrt=np.zeros((2, 2)))
        cl = augment(model[0], zero)
        np.testing.assert_array_equal(cl.A_d, model[0].A_d)
        np.testing.assert_array_equal(cl.A_r, model[0].A_r)
        np.testing.assert_allclose(cl.Sigma_d, model[0].Sigma_d)
        assert cl.Sigma_r == pytest.approx(model[0].Sigma_r)

    def test_scalar_arithmetic(self):
        st = LtvStep(A_d=[[1.0]], B_d=[[1.0]], A_r=[0.0], B_r=[0.0], c_d=[0.0],
                     c_r=0.0, Sigma_d=[[1.0]], Sigma_r=1.0)
        pol = PolicyStep(F=[[-0.5]], e=[0.0], sigma_sqrt=[[0.0]])
        assert augment(st, pol).A_d[0, 0] == pytest.approx(0.5)

    def test_matches_symbolic_expansion(self):
        rng = np.random.default_rng(1)
        model = random_model(rng, 1, 3, 2)
        pol = random_policy(rng, 1, 3, 2)
        st, p = model[0], pol[0]
        cl = augment(st, p)
        sig = p.sigma_sqrt.T @ p.sigma_sqrt
        np.testing.assert_allclose(cl.A_d, st.A_d + st.B_d @ p.F, atol=1e-13)
        np.testing.assert_allclose(cl.A_r, st.A_r + st.B_r @ p.F, atol=1e-13)
        np.testing.assert_allclose(cl.Sigma_d, st.B_d @ sig @ st.B_d.T + st.Sigma_d, atol=1e-13)
        assert cl.Sigma_r == pytest.approx(float(st.B_r @ sig @ st.B_r + st.Sigma_r))

    def test_dimension_mismatch(self):
        rng = np.random.default_rng(2)
        model = random_model(rng, 1, 3, 2)
        pol = random_policy(rng, 1, 2, 2)
        with pytest.raises(ValueError, match="dims"):
            augment(model[0], pol[0])


class TestKalmanFilter:
    def test_uninformative_observation_keeps_prediction(self):
        # Huge observation noise drives the gain to zero.
        rng = np.random.default_rng(3)
        model, policy, s1, P1, y = _instance(3, 4, 2, 1)
        steps = tuple(
            LtvStep(A_d=st.A_d, B_d=st.B_d, A_r=st.A_r, B_r=st.B_r, c_d=st.c_d,
                    c_r=st.c_r, Sigma_d=st.Sigma_d, Sigma_r=1e12)
            for st in model.steps
        )
        big = LtvModel(steps=steps, mu1=model.mu1, P1=model.P1)
        filt = kalman_filter(big, policy, y, s1, P1)
        np.testing.assert_allclose(filt.mean[1:], filt.pred_mean, rtol=1e-6, atol=1e-9)
        np.testing.assert_allclose(filt.cov[1:], filt.pred_cov, rtol=1e-6)

    def test_scalar_hand_computation(self):
        # One step, all quantities scalar, checked against hand arithmetic.
        st = LtvStep(A_d=[[0.8]], B_d=[[1.0]], A_r=[0.5], B_r=[0.2], c_d=[0.1],
                     c_r=0.05, Sigma_d=[[0.3]], Sigma_r=0.4)
        model = LtvModel(steps=(st,), mu1=[0.0], P1=[[1.0]])
        pol = PolicyParams(steps=(PolicyStep(F=[[0.1]], e=[0.5], sigma_sqrt=[[0.6]]),))
        s1, P1, y = np.array([2.0]), np.array([[1.5]]), np.array([0.7])
        filt = kalman_filter(model, pol, y, s1, P1)

        a_d = 0.8 + 1.0 * 0.1
        a_r = 0.5 + 0.2 * 0.1
        sig_d = 1.0 * 0.36 * 1.0 + 0.3
        sig_r = 0.2 * 0.36 * 0.2 + 0.4
        drift_d = 1.0 * 0.5 + 0.1
        drift_r = 0.2 * 0.5 + 0.05
        pred_m = a_d * 2.0 + drift_d
        pred_p = a_d * 1.5 * a_d + sig_d
        innov_var = a_r * pred_p * a_r + sig_r
        gain = pred_p * a_r / innov_var
        filt_p = pred_p - gain * a_r * pred_p
        filt_m = pred_m + gain * (0.7 - a_r * pred_m - drift_r)
        assert filt.pred_mean[0, 0] == pytest.approx(pred_m, abs=1e-12)
        assert filt.pred_cov[0, 0, 0] == pytest.approx(pred_p, abs=1e-12)
        assert filt.innovation_var[0] == pytest.approx(innov_var, abs=1e-12)
        assert filt.gain[0, 0] == pytest.approx(gain, abs=1e-12)
        assert filt.cov[1, 0, 0] == pytest.approx(filt_p, abs=1e-12)
        assert filt.mean[1, 0] == pytest.approx(filt_m, abs=1e-12)

    def test_filtered_marginals_match_exact_conditioning(self):
        model, policy, s1, P1, y = _instance(4, 5, 2, 2)
        filt = kalman_filter(model, policy, y, s1, P1)
        for k in range(model.T + 1):
            mean_o, cov_o = oracle_filtered(model, policy, s1, P1, y, k)
            np.testing.assert_allclose(filt.mean[k], mean_o, atol=1e-10)
            np.testing.assert_allclose(filt.cov[k], cov_o, atol=1e-10)

    def test_square_root_equivalent(self):
        for seed in range(5):
            model, policy, s1, P1, y = _instance(seed + 10, 5, 3, 2)
            full = kalman_filter(model, policy, y, s1, P1)
            sqrt = kalman_filter(model, policy, y, s1, P1, square_root=True)
            np.testing.assert_allclose(sqrt.mean, full.mean, atol=1e-10)
            np.testing.assert_allclose(sqrt.cov, full.cov, atol=1e-10)
            np.testing.assert_allclose(sqrt.gain, full.gain, atol=1e-10)

    def test_mismatched_lengths_rejected(self):
        model, policy, s1, P1, y = _instance(5, 4, 2, 1)
        with pytest.raises(ValueError, match="observations"):
            kalman_filter(model, policy, y[:-1], s1, P1)


class TestRtsSmooth:
    def test_noise_free_chain_reduces_to_rollout(self):
        # With (numerically) no noise anywhere, filtered and smoothed means
        # equal the deterministic closed-loop rollout.
        rng = np.random.default_rng(6)
        T, n_s, n_a = 4, 2, 1
        steps = []
        for _ in range(T):
            steps.append(LtvStep(
                A_d=0.5 * rng.standard_normal((n_s, n_s)),
                B_d=rng.standard_normal((n_s, n_a)),
                A_r=rng.standard_normal(n_s), B_r=rng.standard_normal(n_a),
                c_d=rng.standard_normal(n_s), c_r=rng.standard_normal() * 0.1,
                Sigma_d=1e-14 * np.eye(n_s), Sigma_r=1e-14,
            ))
        model = LtvModel(steps=tuple(steps), mu1=np.zeros(n_s), P1=1e-14 * np.eye(n_s))
        policy = PolicyParams(steps=tuple(
            PolicyStep(F=0.3 * rng.standard_normal((n_a, n_s)), e=rng.standard_normal(n_a),
                       sigma_sqrt=np.zeros((n_a, n_a)))
            for _ in range(T)
        ))
        s1 = rng.standard_normal(n_s)
        # exact noise-free rollout and its exact observations
        states = [s1]
        y = []
        from socem.smoothing import augment as _augment
        for k in range(T):
            cl = _augment(model[k], policy[k])
            states.append(cl.A_d @ states[-1] + cl.drift_d)
            y.append(cl.A_r @ states[-1] + cl.drift_r)
        filt = kalman_filter(model, policy, np.array(y), s1, 1e-14 * np.eye(n_s))
        post = rts_smooth(filt, model, policy)
        np.testing.assert_allclose(post.mean, np.stack(states), atol=1e-7)
        np.testing.assert_allclose(filt.mean, np.stack(states), atol=1e-7)

    def test_matches_exact_conditioning(self):
        model, policy, s1, P1, y = _instance(7, 5, 2, 2)
        filt = kalman_filter(model, policy, y, s1, P1)
        post = rts_smooth(filt, model, policy)
        means, covs, lags = oracle_smoothed(model, policy, s1, P1, y)
        np.testing.assert_allclose(post.mean, means, atol=1e-8)
        np.testing.assert_allclose(post.cov, covs, atol=1e-8)
        np.testing.assert_allclose(post.lag_cov, lags, atol=1e-8)

    def test_second_moments_definitionally_exact(self):
        # The uncentered moments are built as covariance plus mean outer
        # product, so subtracting the outer product recovers the covariance
        # to machine precision (floating-point add/subtract round trip).
        model, policy, s1, P1, y = _instance(8, 4, 3, 2)
        filt = kalman_filter(model, policy, y, s1, P1)
        post = rts_smooth(filt, model, policy)
        scale = 1.0 + np.abs(post.second_moment).max()
        for k in range(model.T + 1):
            np.testing.assert_allclose(
                post.second_moment[k] - np.outer(post.mean[k], post.mean[k]),
                post.cov[k], atol=1e-13 * scale, rtol=0,
            )
        for k in range(model.T):
            np.testing.assert_allclose(
                post.cross_moment[k] - np.outer(post.mean[k + 1], post.mean[k]),
                post.lag_cov[k], atol=1e-13 * scale, rtol=0,
            )

    def test_psd_preserved(self):
        for seed in range(10):
            model, policy, s1, P1, y = _instance(seed + 20, 6, 3, 2)
            filt = kalman_filter(model, policy, y, s1, P1)
            post = rts_smooth(filt, model, policy)
            for cov in list(filt.cov) + list(filt.pred_cov) + list(post.cov):
                assert np.linalg.eigvalsh(cov).min() >= -1e-10

    def test_uninformative_limit_recovers_prior_moments(self):
        # With near-infinite observation noise the smoothed moments converge
        # to the closed-loop prior rollout moments.
        model, policy, s1, P1, y = _instance(9, 4, 2, 1)
        steps = tuple(
            LtvStep(A_d=st.A_d, B_d=st.B_d, A_r=st.A_r, B_r=st.B_r, c_d=st.c_d,
                    c_r=st.c_r, Sigma_d=st.Sigma_d, Sigma_r=1e12)
            for st in model.steps
        )
        big = LtvModel(steps=steps, mu1=model.mu1, P1=model.P1)
        filt = kalman_filter(big, policy, y, s1, P1)
        post = rts_smooth(filt, big, policy)
        mean, cov = s1.copy(), P1.copy()
        for k in range(model.T):
            cl = augment(big[k], policy[k])
            np.testing.assert_allclose(post.mean[k], mean, rtol=1e-6, atol=1e-6)
            np.testing.assert_allclose(post.cov[k], cov, rtol=1e-6, atol=1e-6)
            mean = cl.A_d @ mean + cl.drift_d
            cov = cl.A_d @ cov @ cl.A_d.T + cl.Sigma_d

    def test_oracle_equivalence_batch(self):
        # Smaller version of the acceptance sweep: random sizes T<=6, n_s<=3.
        rng = np.random.default_rng(10)
        for case in range(10):
            T = int(rng.integers(2, 7))
            n_s = int(rng.integers(1, 4))
            n_a = int(rng.integers(1, n_s + 1))
            model, policy, s1, P1, y = _instance(100 + case, T, n_s, n_a,
                                                 affine=bool(case % 2))
            filt = kalman_filter(model, policy, y, s1, P1)
            post = rts_smooth(filt, model, policy)
            means, covs, lags = oracle_smoothed(model, policy, s1, P1, y)
            assert np.abs(post.mean - means).max() < 1e-8
            assert np.abs(post.cov - covs).max() < 1e-8
            assert np.abs(post.lag_cov - lags).max() < 1e-8


class TestLatentPathSampling:
    def test_moments_match_smoothed_posterior(self):
        model, policy, s1, P1, y = _instance(11, 4, 2, 1)
        filt = kalman_filter(model, policy, y, s1, P1)
        post = rts_smooth(filt, model, policy)
        paths = sample_latent_paths(filt, model, policy, np.random.default_rng(0), 120_000)
        np.testing.assert_allclose(paths.mean(axis=0), post.mean, atol=2e-2)
        for k in range(model.T + 1):
            emp = np.cov(paths[:, k, :].T)
            np.testing.assert_allclose(emp, post.cov[k], atol=3e-2)
        for k in range(model.T):
            a = paths[:, k + 1, :] - paths[:, k + 1, :].mean(axis=0)
            b = paths[:, k, :] - paths[:, k, :].mean(axis=0)
            emp = a.T @ b / (paths.shape[0] - 1)
            np.testing.assert_allclose(emp, post.lag_cov[k], atol=3e-2)

    def test_seeded_and_shaped(self):
        model, policy, s1, P1, y = _instance(12, 3, 2, 2)
        filt = kalman_filter(model, policy, y, s1, P1)
        p1 = sample_latent_paths(filt, model, policy, np.random.default_rng(5), 7)
        p2 = sample_latent_paths(filt, model, policy, np.random.default_rng(5), 7)
        assert p1.shape == (7, 4, 2)
        np.testing.assert_array_equal(p1, p2)
