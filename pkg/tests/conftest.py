"""Shared test helpers: random instances and the exact-conditioning oracle.

The oracle builds the full joint Gaussian over all latent states and
observations of the closed-loop chain and conditions it by block solves;
filter and smoother outputs are checked against marginals of that joint.
"""

from __future__ import annotations

import numpy as np

from socem.dynamics import LtvModel, LtvStep
from socem.policy import PolicyParams, PolicyStep
from socem.smoothing import augment


def random_spd(rng: np.random.Generator, n: int, scale: float = 1.0) -> np.ndarray:
    mat = rng.standard_normal((n, n))
    return scale * (mat @ mat.T + n * np.eye(n))


def random_model(
    rng: np.random.Generator, T: int, n_s: int, n_a: int, *, affine: bool = True
) -> LtvModel:
    steps = []
    for _ in range(T):
        steps.append(
            LtvStep(
                A_d=0.6 * rng.standard_normal((n_s, n_s)),
                B_d=rng.standard_normal((n_s, n_a)),
                A_r=0.4 * rng.standard_normal(n_s),
                B_r=0.4 * rng.standard_normal(n_a),
                c_d=rng.standard_normal(n_s) if affine else np.zeros(n_s),
                c_r=0.3 * rng.standard_normal() if affine else 0.0,
                Sigma_d=random_spd(rng, n_s, 0.1),
                Sigma_r=float(0.2 + rng.random()),
            )
        )
    return LtvModel(
        steps=tuple(steps),
        mu1=rng.standard_normal(n_s),
        P1=random_spd(rng, n_s, 0.2),
    )


def random_policy(
    rng: np.random.Generator, T: int, n_s: int, n_a: int, *, noise: float = 0.3
) -> PolicyParams:
    return PolicyParams(
        steps=tuple(
            PolicyStep(
                F=0.5 * rng.standard_normal((n_a, n_s)),
                e=rng.standard_normal(n_a),
                sigma_sqrt=noise * rng.standard_normal((n_a, n_a)),
            )
            for _ in range(T)
        )
    )


def joint_gaussian(
    model: LtvModel, policy: PolicyParams, s1_mean: np.ndarray, P1: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Joint N(mu, C) over [s_1..s_{T+1}, y_1..y_T] of the closed loop.

    Observation ``y_k`` measures state ``s_{k+1}`` through the closed-loop
    observation row, matching the generative convention of the filter.
    """
    T, n = model.T, model.n_s
    dim = (T + 1) * n + T
    mu = np.zeros(dim)
    C = np.zeros((dim, dim))
    sl = [slice(i * n, (i + 1) * n) for i in range(T + 1)]
    obs = [(T + 1) * n + j for j in range(T)]

    mu[sl[0]] = np.asarray(s1_mean, dtype=float)
    C[sl[0], sl[0]] = np.asarray(P1, dtype=float)
    for k in range(T):
        cl = augment(model[k], policy[k])
        mu[sl[k + 1]] = cl.A_d @ mu[sl[k]] + cl.drift_d
        C[sl[k + 1], :] = cl.A_d @ C[sl[k], :]
        C[:, sl[k + 1]] = C[sl[k + 1], :].T
        C[sl[k + 1], sl[k + 1]] = cl.A_d @ C[sl[k], sl[k]] @ cl.A_d.T + cl.Sigma_d
        j = obs[k]
        mu[j] = cl.A_r @ mu[sl[k + 1]] + cl.drift_r
        C[j, :] = cl.A_r @ C[sl[k + 1], :]
        C[:, j] = C[j, :].T
        C[j, j] = cl.A_r @ C[sl[k + 1], sl[k + 1]] @ cl.A_r + cl.Sigma_r
    return mu, C


def condition_joint(
    mu: np.ndarray, C: np.ndarray, obs_idx: np.ndarray, y: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Condition the joint on a subset of coordinates by block solves."""
    keep = np.setdiff1d(np.arange(mu.shape[0]), obs_idx)
    C_oo = C[np.ix_(obs_idx, obs_idx)]
    C_ko = C[np.ix_(keep, obs_idx)]
    mu_c = mu[keep] + C_ko @ np.linalg.solve(C_oo, y - mu[obs_idx])
    C_c = C[np.ix_(keep, keep)] - C_ko @ np.linalg.solve(C_oo, C_ko.T)
    return mu_c, C_c


def oracle_smoothed(model, policy, s1_mean, P1, y):
    """Exact smoothed means/covs/one-lag cross-covariances for all states."""
    T, n = model.T, model.n_s
    mu, C = joint_gaussian(model, policy, s1_mean, P1)
    obs_idx = np.arange((T + 1) * n, (T + 1) * n + T)
    mu_c, C_c = condition_joint(mu, C, obs_idx, np.asarray(y, dtype=float))
    means = np.stack([mu_c[i * n : (i + 1) * n] for i in range(T + 1)])
    covs = np.stack([C_c[i * n : (i + 1) * n, i * n : (i + 1) * n] for i in range(T + 1)])
    lags = np.stack(
        [C_c[(i + 1) * n : (i + 2) * n, i * n : (i + 1) * n] for i in range(T)]
    )
    return means, covs, lags


def oracle_filtered(model, policy, s1_mean, P1, y, k: int):
    """Exact posterior of state ``k+1`` (0-based) given the first ``k`` observations."""
    T, n = model.T, model.n_s
    mu, C = joint_gaussian(model, policy, s1_mean, P1)
    if k == 0:
        return mu[:n], C[:n, :n]
    obs_idx = np.arange((T + 1) * n, (T + 1) * n + k)
    mu_c, C_c = condition_joint(mu, C, obs_idx, np.asarray(y[:k], dtype=float))
    return mu_c[k * n : (k + 1) * n], C_c[k * n : (k + 1) * n, k * n : (k + 1) * n]


def true_plant_model(plant, noise: float = 1e-9) -> LtvModel:
    """Hand-discretized affine dynamics of the point-mass plant.

    Semi-implicit Euler gives, for position p and velocity v,
    ``v' = (1 - dt c) v + (dt/m) a + dt g`` and ``p' = p + dt v'``.
    """
    dt, m, c, g = plant.dt, plant.mass, plant.damping, plant.gravity
    A = np.eye(4)
    A[0, 2] = dt * (1 - dt * c)
    A[1, 3] = dt * (1 - dt * c)
    A[2, 2] = 1 - dt * c
    A[3, 3] = 1 - dt * c
    B = np.zeros((4, 2))
    B[0, 0] = dt * dt / m
    B[1, 1] = dt * dt / m
    B[2, 0] = dt / m
    B[3, 1] = dt / m
    c_d = np.concatenate([dt * dt * g, dt * g])
    steps = tuple(
        LtvStep(
            A_d=A, B_d=B, A_r=np.zeros(4), B_r=np.zeros(2),
            c_d=c_d, c_r=0.0, Sigma_d=noise * np.eye(4), Sigma_r=noise,
        )
        for _ in range(plant.T)
    )
    return LtvModel(steps=steps, mu1=plant.x0, P1=noise * np.eye(4))


def smoothed_from_random_run(rng, T, n_s, n_a, *, affine=True, noise=0.3):
    """A valid smoothed posterior from a random model, policy and observations."""
    from socem.smoothing import kalman_filter, rts_smooth

    model = random_model(rng, T, n_s, n_a, affine=affine)
    policy = random_policy(rng, T, n_s, n_a, noise=noise)
    s1 = rng.standard_normal(n_s)
    P1 = random_spd(rng, n_s, 0.2)
    y = rng.standard_normal(T)
    filt = kalman_filter(model, policy, y, s1, P1)
    post = rts_smooth(filt, model, policy)
    return model, policy, y, s1, P1, filt, post
