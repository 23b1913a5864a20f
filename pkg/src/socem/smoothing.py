"""Closed-loop Kalman filtering and fixed-interval smoothing.

The policy noise is folded into the transition before filtering: with the
control law ``a = F s + e + w`` the fitted model closes to

    s_{k+1} = (A_d + B_d F) s_k + (B_d e + c_d) + noise(B_d Sig B_d' + Sigma_d)
    y_k     = (A_r + B_r F) s_{k+1} + (B_r e + c_r) + noise(B_r Sig B_r' + Sigma_r)

so the scalar cost observation at step ``k`` informs the successor state.
The forward pass is the exact filter for that closed-loop chain; the
backward pass is a fixed-interval smoother augmented with the one-lag
cross-covariances that the policy update needs.  Covariances are
symmetrized after every update; an optional square-root mode propagates
Cholesky factors through the forward pass instead.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dynamics import LtvModel, LtvStep
from .policy import PolicyParams, PolicyStep

__all__ = [
    "SmoothingError",
    "ClosedLoopStep",
    "FilterState",
    "SmoothedPosterior",
    "augment",
    "kalman_filter",
    "rts_smooth",
    "sample_latent_paths",
]


class SmoothingError(RuntimeError):
    pass


def _sym(mat: np.ndarray) -> np.ndarray:
    return 0.5 * (mat + mat.T)


@dataclass(frozen=True)
class ClosedLoopStep:
    """One transition step with the policy folded in."""

    A_d: np.ndarray      # (n_s, n_s) closed-loop state map
    A_r: np.ndarray      # (n_s,) closed-loop observation row
    Sigma_d: np.ndarray  # (n_s, n_s) state noise incl. policy noise
    Sigma_r: float       # scalar observation noise incl. policy noise
    drift_d: np.ndarray  # (n_s,) constant state drift  B_d e + c_d
    drift_r: float       # constant observation drift  B_r e + c_r


def augment(step: LtvStep, pol: PolicyStep) -> ClosedLoopStep:
    """Fold one policy step into one model step."""
    if pol.n_s != step.n_s or pol.n_a != step.n_a:
        raise ValueError(
            f"policy dims ({pol.n_s},{pol.n_a}) do not match model dims ({step.n_s},{step.n_a})"
        )
    sigma = pol.covariance
    return ClosedLoopStep(
        A_d=step.A_d + step.B_d @ pol.F,
        A_r=step.A_r + pol.F.T @ step.B_r,
        Sigma_d=_sym(step.B_d @ sigma @ step.B_d.T + step.Sigma_d),
        Sigma_r=float(step.B_r @ sigma @ step.B_r + step.Sigma_r),
        drift_d=step.B_d @ pol.e + step.c_d,
        drift_r=float(step.B_r @ pol.e + step.c_r),
    )


@dataclass(frozen=True)
class FilterState:
    """Forward-pass output.

    ``mean[j]``/``cov[j]`` hold the posterior of state ``j+1`` given the
    first ``j`` observations (``mean[0]`` is the supplied prior);
    ``pred_mean[j]``/``pred_cov[j]`` hold the one-step prediction of state
    ``j+2`` from the same information set.
    """

    mean: np.ndarray       # (T+1, n_s)
    cov: np.ndarray        # (T+1, n_s, n_s)
    pred_mean: np.ndarray  # (T, n_s)
    pred_cov: np.ndarray   # (T, n_s, n_s)
    gain: np.ndarray       # (T, n_s)
    innovation_var: np.ndarray  # (T,)

    @property
    def T(self) -> int:
        return self.pred_mean.shape[0]


def _chol_lower(mat: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        # PSD rescue for factors that drift slightly indefinite.
        eigval, eigvec = np.linalg.eigh(_sym(mat))
        return eigvec @ np.diag(np.sqrt(np.maximum(eigval, 0.0)))


def kalman_filter(
    model: LtvModel,
    policy: PolicyParams,
    y: np.ndarray,
    s1: np.ndarray,
    P1: np.ndarray,
    *,
    square_root: bool = False,
) -> FilterState:
    """Run the closed-loop forward filter over one observation sequence.

    ``s1``/``P1`` initialize the first state's posterior.  With
    ``square_root=True`` the covariances are propagated as Cholesky
    factors through QR factorizations; the returned covariances are
    identical up to floating-point error.
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    T = model.T
    if policy.T != T:
        raise ValueError(f"policy horizon {policy.T} does not match model horizon {T}")
    if y.shape[0] != T:
        raise ValueError(f"need {T} observations, got {y.shape[0]}")
    n = model.n_s

    mean = np.empty((T + 1, n))
    cov = np.empty((T + 1, n, n))
    pred_mean = np.empty((T, n))
    pred_cov = np.empty((T, n, n))
    gain = np.empty((T, n))
    innov_var = np.empty(T)

    mean[0] = np.asarray(s1, dtype=float).reshape(n)
    cov[0] = _sym(np.asarray(P1, dtype=float).reshape(n, n))
    chol = _chol_lower(cov[0]) if square_root else None

    for k in range(T):
        cl = augment(model[k], policy[k])
        pred_mean[k] = cl.A_d @ mean[k] + cl.drift_d

        if square_root:
            stacked = np.vstack([(cl.A_d @ chol).T, _chol_lower(cl.Sigma_d).T])
            r_pred = np.linalg.qr(stacked, mode="reduced")[1]  # (n, n) upper
            chol_pred = r_pred.T
            pred_cov[k] = chol_pred @ chol_pred.T
            # Scalar-observation array update: QR of the stacked pre-array
            # reproduces the innovation variance, gain, and posterior factor.
            pre = np.zeros((1 + n, 1 + n))
            pre[0, 0] = np.sqrt(cl.Sigma_r)
            pre[0, 1:] = cl.A_r @ chol_pred
            pre[1:, 1:] = chol_pred
            post = np.linalg.qr(pre.T, mode="reduced")[1].T  # lower triangular
            post = post @ np.diag(np.sign(np.where(np.diag(post) == 0, 1.0, np.diag(post))))
            innov_sd = post[0, 0]
            innov_var[k] = innov_sd**2
            gain[k] = post[1:, 0] / innov_sd
            chol = post[1:, 1:]
            cov[k + 1] = chol @ chol.T
        else:
            pred_cov[k] = _sym(cl.A_d @ cov[k] @ cl.A_d.T + cl.Sigma_d)
            innov_var[k] = float(cl.A_r @ pred_cov[k] @ cl.A_r + cl.Sigma_r)
            if innov_var[k] <= 0.0:
                raise SmoothingError(
                    f"nonpositive innovation variance {innov_var[k]:.3e} at step {k}: "
                    "the model noise terms are inconsistent"
                )
            gain[k] = pred_cov[k] @ cl.A_r / innov_var[k]
            cov[k + 1] = _sym(pred_cov[k] - np.outer(gain[k], cl.A_r @ pred_cov[k]))

        resid = y[k] - cl.A_r @ pred_mean[k] - cl.drift_r
        mean[k + 1] = pred_mean[k] + gain[k] * resid

    return FilterState(
        mean=mean, cov=cov, pred_mean=pred_mean, pred_cov=pred_cov,
        gain=gain, innovation_var=innov_var,
    )


@dataclass(frozen=True)
class SmoothedPosterior:
    """Backward-pass output over the whole horizon.

    ``mean[j]``/``cov[j]`` are the full-information posterior of state
    ``j+1``; ``lag_cov[j]`` is the posterior cross-covariance of states
    ``j+2`` and ``j+1``.  ``second_moment`` and ``cross_moment`` are the
    corresponding uncentered moments consumed by the policy update.
    """

    mean: np.ndarray           # (T+1, n_s)
    cov: np.ndarray            # (T+1, n_s, n_s)
    gains: np.ndarray          # (T, n_s, n_s) backward gains
    lag_cov: np.ndarray        # (T, n_s, n_s)
    second_moment: np.ndarray  # (T+1, n_s, n_s)  E[s s'] given all observations
    cross_moment: np.ndarray   # (T, n_s, n_s)    E[s_next s'] given all observations

    @property
    def T(self) -> int:
        return self.lag_cov.shape[0]

    def to_debug_json(self, path: str | Path) -> None:
        # Debugging aid only; the layout is not a stable interface.
        doc = {
            "mean": self.mean.tolist(),
            "cov": self.cov.tolist(),
            "lag_cov": self.lag_cov.tolist(),
        }
        Path(path).write_text(json.dumps(doc))


def _closed_loop_steps(model: LtvModel, policy: PolicyParams) -> list[ClosedLoopStep]:
    return [augment(model[k], policy[k]) for k in range(model.T)]


def _backward_gains(filt: FilterState, cls_: list[ClosedLoopStep]) -> np.ndarray:
    T, n = filt.T, filt.mean.shape[1]
    gains = np.empty((T, n, n))
    for k in range(T):
        try:
            gains[k] = np.linalg.solve(filt.pred_cov[k], cls_[k].A_d @ filt.cov[k]).T
        except np.linalg.LinAlgError as exc:
            raise SmoothingError(
                f"singular predicted covariance at step {k}; increase the model jitter"
            ) from exc
    return gains


def rts_smooth(filt: FilterState, model: LtvModel, policy: PolicyParams) -> SmoothedPosterior:
    """Fixed-interval smoothing pass over a completed forward filter.

    The backward gain uses the transposed closed-loop map,
    ``J_k = P_filt A_d' P_pred^{-1}``, which is the form that agrees with
    exact joint-Gaussian conditioning.  The recursion starts from the final
    filtered posterior and also produces the one-lag cross-covariances.
    """
    T, n = filt.T, filt.mean.shape[1]
    cls_ = _closed_loop_steps(model, policy)
    gains = _backward_gains(filt, cls_)

    mean = np.empty_like(filt.mean)
    cov = np.empty_like(filt.cov)
    mean[T] = filt.mean[T]
    cov[T] = filt.cov[T]
    for k in range(T - 1, -1, -1):
        mean[k] = filt.mean[k] + gains[k] @ (mean[k + 1] - filt.pred_mean[k])
        cov[k] = _sym(filt.cov[k] + gains[k] @ (cov[k + 1] - filt.pred_cov[k]) @ gains[k].T)

    lag = np.empty((T, n, n))
    # Final one-lag term comes straight from the last update's gain.
    lag[T - 1] = (np.eye(n) - np.outer(filt.gain[T - 1], cls_[T - 1].A_r)) @ (
        cls_[T - 1].A_d @ filt.cov[T - 1]
    )
    for k in range(T - 2, -1, -1):
        lag[k] = (
            filt.cov[k + 1] @ gains[k].T
            + gains[k + 1] @ (lag[k + 1] - cls_[k + 1].A_d @ filt.cov[k + 1]) @ gains[k].T
        )

    second = cov + mean[:, :, None] * mean[:, None, :]
    cross = lag + mean[1:, :, None] * mean[:-1, None, :]

    return SmoothedPosterior(
        mean=mean, cov=cov, gains=gains, lag_cov=lag,
        second_moment=second, cross_moment=cross,
    )


def sample_latent_paths(
    filt: FilterState,
    model: LtvModel,
    policy: PolicyParams,
    rng: np.random.Generator,
    n_paths: int,
) -> np.ndarray:
    """Draw latent state trajectories from the full smoothing posterior.

    Forward-filter/backward-sample: the last state is drawn from its
    filtered posterior and earlier states from the backward conditionals,
    so the returned paths follow the exact joint posterior given all
    observations.  Shape ``(n_paths, T+1, n_s)``.
    """
    T, n = filt.T, filt.mean.shape[1]
    cls_ = _closed_loop_steps(model, policy)
    gains = _backward_gains(filt, cls_)

    cond_chol = np.empty((T, n, n))
    for k in range(T):
        cond = _sym(filt.cov[k] - gains[k] @ filt.pred_cov[k] @ gains[k].T)
        cond_chol[k] = _chol_lower(cond)

    paths = np.empty((n_paths, T + 1, n))
    last_chol = _chol_lower(_sym(filt.cov[T]))
    paths[:, T, :] = filt.mean[T] + rng.standard_normal((n_paths, n)) @ last_chol.T
    for k in range(T - 1, -1, -1):
        mean_k = filt.mean[k] + (paths[:, k + 1, :] - filt.pred_mean[k]) @ gains[k].T
        paths[:, k, :] = mean_k + rng.standard_normal((n_paths, n)) @ cond_chol[k].T
    return paths
