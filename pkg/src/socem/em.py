"""Per-step policy maximization of the smoothed complete-data likelihood.

Given the smoothed posterior over latent states, the expected complete-data
log-likelihood splits into one term per timestep, and each term is an
exactly quadratic, strictly concave function of that step's packed policy
parameters (gain, offset, noise factor).  This module assembles those
moments and quadratics, exposes their closed-form gradient/Hessian and
unique maximizer, and wires them into the two iteration schemes:

* the sequential scheme re-smooths after every step's update so later
  subproblems see the newly updated earlier steps;
* the independent scheme solves all steps against the same smoothed
  posterior (they decouple, so this is the plain maximization step of an
  expectation-maximization iteration and inherits its ascent guarantee).

The maximizer's noise-factor block is exactly zero (its linear term
vanishes), so by default updates take a single trust-radius-bounded step
toward the maximizer instead of jumping onto it; that keeps a shrinking
but nonzero exploration covariance, mirroring what a tolerance-limited
numerical optimizer does.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .costs import QuadraticCost
from .dynamics import LtvModel, LtvStep
from .policy import PolicyParams, PolicyStep
from .smoothing import SmoothedPosterior, kalman_filter, rts_smooth

__all__ = [
    "EmError",
    "TransitionMoments",
    "StepQuadratic",
    "StepUpdateInfo",
    "EmDiagnostics",
    "DecayReport",
    "transition_moments",
    "surrogate_term",
    "surrogate_value",
    "assemble_quadratic",
    "surrogate_gradient",
    "surrogate_hessian",
    "closed_form_step",
    "bounded_step",
    "soc_em_1",
    "soc_em_2",
    "covariance_decay_report",
    "expected_path_cost",
    "write_diagnostics_csv",
]

logger = logging.getLogger(__name__)


class EmError(RuntimeError):
    pass


def _vec(mat: np.ndarray) -> np.ndarray:
    return mat.ravel(order="F")


# ----------------------------------------------------------------------
# Smoothed moments of the transition regression variables
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class TransitionMoments:
    """Smoothed second moments of the transition variables at one step.

    Outputs are ``(s_{k+1}, y_k)`` and inputs ``(s_k, a_k)``; the action
    moments come from pushing the evaluated policy step through the state
    posterior, and the observation moments from pushing both through the
    model's observation row.
    """

    out_out: np.ndarray   # (n_s+1, n_s+1)
    out_in: np.ndarray    # (n_s+1, n_s+n_a)
    in_in: np.ndarray     # (n_s+n_a, n_s+n_a)
    out_mean: np.ndarray  # (n_s+1,)
    in_mean: np.ndarray   # (n_s+n_a,)


def transition_moments(
    post: SmoothedPosterior, model: LtvModel, pol_step: PolicyStep, k: int
) -> TransitionMoments:
    """Assemble the smoothed transition moments at step ``k``.

    The state moments are read off the smoother output; action moments use
    the Gaussian identities for ``a = F s + e + w`` with ``Cov(w)`` from
    the evaluated step, and the scalar observation is generated through
    the model's observation row (so its residual keeps no dependence on
    the evaluated policy).
    """
    step = model[k]
    n_s, n_a = step.n_s, step.n_a
    if pol_step.n_s != n_s or pol_step.n_a != n_a:
        raise ValueError(
            f"policy step dims ({pol_step.n_s},{pol_step.n_a}) do not match model ({n_s},{n_a})"
        )
    shat = post.mean[k]
    shat1 = post.mean[k + 1]
    G = post.second_moment[k]
    G1 = post.second_moment[k + 1]
    M = post.cross_moment[k]  # E[s_{k+1} s_k']

    F, e = pol_step.F, pol_step.e
    sig = pol_step.covariance

    ea = F @ shat + e
    e_sa = G @ F.T + np.outer(shat, e)                      # E[s a']
    e_aa = F @ G @ F.T + np.outer(F @ shat, e) + np.outer(e, F @ shat) \
        + np.outer(e, e) + sig                               # E[a a']
    e_s1a = M @ F.T + np.outer(shat1, e)                     # E[s_next a']

    A_r, B_r, c_r, sig_r = step.A_r, step.B_r, step.c_r, step.Sigma_r
    ey = float(A_r @ shat + B_r @ ea + c_r)
    e_ys = A_r @ G + B_r @ e_sa.T + c_r * shat               # E[y s']
    e_ya = A_r @ e_sa + B_r @ e_aa + c_r * ea                # E[y a']
    e_ys1 = A_r @ M.T + B_r @ e_s1a.T + c_r * shat1          # E[y s_next']
    e_yy = float(
        A_r @ G @ A_r + 2.0 * A_r @ e_sa @ B_r + B_r @ e_aa @ B_r
        + 2.0 * c_r * (A_r @ shat + B_r @ ea) + c_r**2 + sig_r
    )

    out_out = np.zeros((n_s + 1, n_s + 1))
    out_out[:n_s, :n_s] = G1
    out_out[:n_s, n_s] = e_ys1
    out_out[n_s, :n_s] = e_ys1
    out_out[n_s, n_s] = e_yy

    out_in = np.zeros((n_s + 1, n_s + n_a))
    out_in[:n_s, :n_s] = M
    out_in[:n_s, n_s:] = e_s1a
    out_in[n_s, :n_s] = e_ys
    out_in[n_s, n_s:] = e_ya

    in_in = np.zeros((n_s + n_a, n_s + n_a))
    in_in[:n_s, :n_s] = G
    in_in[:n_s, n_s:] = e_sa
    in_in[n_s:, :n_s] = e_sa.T
    in_in[n_s:, n_s:] = e_aa

    return TransitionMoments(
        out_out=out_out,
        out_in=out_in,
        in_in=in_in,
        out_mean=np.concatenate([shat1, [ey]]),
        in_mean=np.concatenate([shat, ea]),
    )


def _augmented_transition(step: LtvStep) -> np.ndarray:
    """Transition matrix over the constant-augmented input ``(s, a, 1)``."""
    n_s, n_a = step.n_s, step.n_a
    aug = np.zeros((n_s + 1, n_s + n_a + 1))
    aug[:n_s, :n_s] = step.A_d
    aug[:n_s, n_s : n_s + n_a] = step.B_d
    aug[:n_s, -1] = step.c_d
    aug[n_s, :n_s] = step.A_r
    aug[n_s, n_s : n_s + n_a] = step.B_r
    aug[n_s, -1] = step.c_r
    return aug


def surrogate_term(mom: TransitionMoments, step: LtvStep) -> float:
    """One step's expected transition log-density under the smoothed moments.

    Returns ``-0.5 tr(Sig^{-1} R) - 0.5 log|Sig|`` where ``R`` is the
    residual second moment of the transition regression and ``Sig`` the
    block-diagonal residual covariance.  The additive normalization
    constant of the Gaussian density is dropped.
    """
    n_s = step.n_s
    min_eig = float(np.linalg.eigvalsh(step.Sigma_d).min())
    if min_eig <= 0.0 or step.Sigma_r <= 0.0:
        raise EmError(
            f"residual covariance is not positive definite "
            f"(min state eigenvalue {min_eig:.3e}, observation variance {step.Sigma_r:.3e})"
        )
    aug = _augmented_transition(step)
    d_in = mom.in_in.shape[0]
    t2 = np.hstack([mom.out_in, mom.out_mean[:, None]])
    t3 = np.zeros((d_in + 1, d_in + 1))
    t3[:d_in, :d_in] = mom.in_in
    t3[:d_in, -1] = mom.in_mean
    t3[-1, :d_in] = mom.in_mean
    t3[-1, -1] = 1.0

    resid = mom.out_out - t2 @ aug.T - aug @ t2.T + aug @ t3 @ aug.T
    resid = 0.5 * (resid + resid.T)

    tr_d = float(np.trace(np.linalg.solve(step.Sigma_d, resid[:n_s, :n_s])))
    tr_r = float(resid[n_s, n_s]) / step.Sigma_r
    logdet = float(np.linalg.slogdet(step.Sigma_d)[1]) + np.log(step.Sigma_r)
    return -0.5 * (tr_d + tr_r) - 0.5 * logdet


def surrogate_value(post: SmoothedPosterior, model: LtvModel, policy: PolicyParams) -> float:
    """Sum of the per-step surrogate terms over the whole horizon.

    The initial-state log-density term is independent of the policy and is
    omitted; comparisons between policies under the same posterior are
    unaffected.
    """
    return float(
        sum(
            surrogate_term(transition_moments(post, model, policy[k], k), model[k])
            for k in range(model.T)
        )
    )


# ----------------------------------------------------------------------
# The per-step quadratic and its solutions
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class StepQuadratic:
    """Coefficients of one step's quadratic surrogate in packed parameters.

    With ``phi = (vec F, e, vec S)`` the surrogate is
    ``-0.5 (phi' H phi + o' phi) + const`` where ``H`` has blocks
    ``quad_gain`` (gain), ``quad_offset`` (offset core; the factor block
    expands to ``kron(quad_offset, I)``) and ``quad_cross`` coupling gain
    and offset; ``o`` stacks ``lin_gain`` and ``lin_offset`` with a zero
    factor component.  Both ``quad_offset`` and the full gain/offset block
    are positive definite whenever the control matrix has full column rank
    and the smoothed covariances are positive definite.
    """

    quad_gain: np.ndarray    # (n_a*n_s, n_a*n_s)
    quad_offset: np.ndarray  # (n_a, n_a)
    quad_cross: np.ndarray   # (n_a*n_s, n_a)
    lin_gain: np.ndarray     # (n_a*n_s,)
    lin_offset: np.ndarray   # (n_a,)
    n_s: int
    n_a: int

    @property
    def gain_offset_block(self) -> np.ndarray:
        """The gain/offset quadratic block ``[[Z1, Z3], [Z3', Z2]]``."""
        return np.block(
            [[self.quad_gain, self.quad_cross], [self.quad_cross.T, self.quad_offset]]
        )

    @property
    def factor_block(self) -> np.ndarray:
        """Quadratic block of the noise-factor parameters."""
        return np.kron(self.quad_offset, np.eye(self.n_a))

    @property
    def packed_dim(self) -> int:
        return PolicyStep.packed_dim(self.n_s, self.n_a)


def assemble_quadratic(
    post: SmoothedPosterior,
    model: LtvModel,
    j: int,
    steps: tuple[int, ...] | None = None,
    *,
    rank_tol: float = 1e-8,
) -> StepQuadratic:
    """Build the quadratic surrogate for optimizing the step-``j`` parameters.

    By default only the ``j``-th transition term depends on those
    parameters, so the accumulation set is ``{j}``; passing ``steps``
    accumulates the same blocks over several timesteps instead.
    """
    if steps is None:
        steps = (j,)
    n_s, n_a = model.n_s, model.n_a
    quad_gain = np.zeros((n_a * n_s, n_a * n_s))
    quad_offset = np.zeros((n_a, n_a))
    quad_cross = np.zeros((n_a * n_s, n_a))
    lin_gain = np.zeros(n_a * n_s)
    lin_offset = np.zeros(n_a)

    for k in steps:
        step = model[k]
        sv = np.linalg.svd(step.B_d, compute_uv=False)
        sv_min = float(sv.min()) if step.n_s >= step.n_a else 0.0
        if sv_min < rank_tol:
            raise EmError(
                f"control matrix at step {k} is column-rank deficient "
                f"(min singular value {sv_min:.3e}); the per-step update needs full "
                "column rank for a unique maximizer"
            )
        sd_inv_b = np.linalg.solve(step.Sigma_d, step.B_d)
        W = step.B_d.T @ sd_inv_b
        W = 0.5 * (W + W.T)
        G = post.second_moment[k]
        shat = post.mean[k]
        shat1 = post.mean[k + 1]
        M = post.cross_moment[k]

        quad_gain += 2.0 * np.kron(G, W)
        quad_offset += 2.0 * W
        quad_cross += 2.0 * np.kron(shat[:, None], W)
        q_gain = sd_inv_b.T @ (step.A_d @ G + np.outer(step.c_d, shat) - M)
        q_off = sd_inv_b.T @ (step.A_d @ shat + step.c_d - shat1)
        lin_gain += 2.0 * _vec(q_gain)
        lin_offset += 2.0 * q_off

    return StepQuadratic(
        quad_gain=quad_gain,
        quad_offset=quad_offset,
        quad_cross=quad_cross,
        lin_gain=lin_gain,
        lin_offset=lin_offset,
        n_s=n_s,
        n_a=n_a,
    )


def _split(q: StepQuadratic, phi: np.ndarray):
    nf = q.n_a * q.n_s
    return phi[:nf], phi[nf : nf + q.n_a], phi[nf + q.n_a :]


def surrogate_gradient(q: StepQuadratic, phi: np.ndarray) -> np.ndarray:
    """Ascent gradient of the quadratic surrogate at packed parameters ``phi``.

    The noise-factor block has no linear term, so its gradient vanishes at
    a zero factor.
    """
    phi = np.asarray(phi, dtype=float).reshape(-1)
    if phi.shape[0] != q.packed_dim:
        raise ValueError(f"packed parameters have length {phi.shape[0]}, expected {q.packed_dim}")
    f, e, s = _split(q, phi)
    g_f = -0.5 * (q.quad_gain @ f + q.quad_cross @ e + q.lin_gain)
    g_e = -0.5 * (q.quad_cross.T @ f + q.quad_offset @ e + q.lin_offset)
    g_s = -0.5 * (q.factor_block @ s)
    return np.concatenate([g_f, g_e, g_s])


def surrogate_hessian(q: StepQuadratic) -> np.ndarray:
    """Constant Hessian of the quadratic surrogate; its negative is PD."""
    dim = q.packed_dim
    nf = q.n_a * q.n_s
    hess = np.zeros((dim, dim))
    hess[:nf, :nf] = q.quad_gain
    hess[:nf, nf : nf + q.n_a] = q.quad_cross
    hess[nf : nf + q.n_a, :nf] = q.quad_cross.T
    hess[nf : nf + q.n_a, nf : nf + q.n_a] = q.quad_offset
    hess[nf + q.n_a :, nf + q.n_a :] = q.factor_block
    return -0.5 * hess


def closed_form_step(q: StepQuadratic, *, cond_limit: float = 1e12) -> PolicyStep:
    """The unique maximizer of the per-step surrogate.

    Solves the stationarity system for the gain/offset block; the
    noise-factor component of the maximizer is exactly zero.
    """
    Z = q.gain_offset_block
    cond = float(np.linalg.cond(Z))
    if not np.isfinite(cond) or cond > cond_limit:
        raise EmError(
            f"surrogate quadratic is ill-conditioned (condition number {cond:.3e}); "
            "cannot solve for the maximizer"
        )
    rhs = np.concatenate([q.lin_gain, q.lin_offset])
    fe = -np.linalg.solve(Z, rhs)
    nf = q.n_a * q.n_s
    return PolicyStep(
        F=fe[:nf].reshape((q.n_a, q.n_s), order="F"),
        e=fe[nf:],
        sigma_sqrt=np.zeros((q.n_a, q.n_a)),
    )


def bounded_step(
    q: StepQuadratic,
    step0: PolicyStep,
    *,
    trust_radius: float = 0.5,
    sigma_floor: float = 0.0,
) -> tuple[PolicyStep, float]:
    """Move from ``step0`` toward the maximizer, at most ``trust_radius`` far.

    The surrogate is concave quadratic, so any partial move along the
    Newton direction ascends; the step fraction taken is returned.  An
    optional floor keeps the noise factor away from exactly zero (the
    maximizer would zero it), preserving a minimum of exploration.
    """
    target = closed_form_step(q)
    phi0 = step0.packed()
    direction = target.packed() - phi0
    dist = float(np.linalg.norm(direction))
    t = 1.0 if dist <= trust_radius else trust_radius / dist
    new = PolicyStep.from_packed(phi0 + t * direction, q.n_s, q.n_a)
    return _apply_sigma_floor(new, step0, sigma_floor, q.n_a), t


# ----------------------------------------------------------------------
# Iteration schemes
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class StepUpdateInfo:
    """Bookkeeping for one per-step subproblem."""

    j: int
    term_before: float
    term_after: float
    step_fraction: float
    min_eig_neg_hessian: float


def _apply_sigma_floor(
    new: PolicyStep, step0: PolicyStep, sigma_floor: float, n_a: int
) -> PolicyStep:
    if sigma_floor <= 0.0:
        return new
    if float(np.linalg.norm(new.sigma_sqrt)) >= sigma_floor:
        return new
    norm_old = float(np.linalg.norm(step0.sigma_sqrt))
    if norm_old <= sigma_floor:
        # Already at or below the floor: keep the old factor bitwise so the
        # covariance trace series stays exactly non-increasing.
        return PolicyStep(F=new.F, e=new.e, sigma_sqrt=step0.sigma_sqrt)
    return PolicyStep(F=new.F, e=new.e, sigma_sqrt=(sigma_floor / norm_old) * step0.sigma_sqrt)


def _solve_subproblem(
    q: StepQuadratic,
    step0: PolicyStep,
    *,
    exact: bool,
    trust_radius: float,
    sigma_floor: float,
) -> tuple[PolicyStep, float]:
    if exact:
        new = _apply_sigma_floor(closed_form_step(q), step0, sigma_floor, q.n_a)
        return new, 1.0
    return bounded_step(q, step0, trust_radius=trust_radius, sigma_floor=sigma_floor)


def soc_em_2(
    post: SmoothedPosterior,
    model: LtvModel,
    policy: PolicyParams,
    *,
    trust_radius: float = 0.5,
    sigma_floor: float = 0.0,
    exact: bool = False,
) -> tuple[PolicyParams, list[StepUpdateInfo]]:
    """Independent per-step maximization against one fixed smoothed posterior.

    Every subproblem ascends its own surrogate term, and the terms add to
    the full surrogate, so the update can never decrease the surrogate
    evaluated under the given posterior.  Subproblems are independent and
    safe to run concurrently; they are executed sequentially here.
    """
    infos = []
    new_steps = []
    for j in range(model.T):
        q = assemble_quadratic(post, model, j)
        before = surrogate_term(transition_moments(post, model, policy[j], j), model[j])
        new, frac = _solve_subproblem(
            q, policy[j], exact=exact, trust_radius=trust_radius, sigma_floor=sigma_floor
        )
        after = surrogate_term(transition_moments(post, model, new, j), model[j])
        min_eig = float(np.linalg.eigvalsh(-surrogate_hessian(q)).min())
        infos.append(StepUpdateInfo(j, before, after, frac, min_eig))
        new_steps.append(new)
    return PolicyParams(steps=tuple(new_steps)), infos


def soc_em_1(
    post: SmoothedPosterior,
    model: LtvModel,
    policy: PolicyParams,
    y: np.ndarray,
    s1: np.ndarray,
    P1: np.ndarray,
    *,
    trust_radius: float = 0.5,
    sigma_floor: float = 0.0,
    exact: bool = False,
) -> tuple[PolicyParams, list[StepUpdateInfo]]:
    """Sequential per-step maximization with re-smoothing between steps.

    After updating step ``j`` the posterior is recomputed under the partly
    updated policy, so subproblem ``j+1`` sees the effect of all earlier
    updates.  Strictly sequential by construction.
    """
    current = policy
    cur_post = post
    infos = []
    for j in range(model.T):
        q = assemble_quadratic(cur_post, model, j)
        before = surrogate_term(transition_moments(cur_post, model, current[j], j), model[j])
        new, frac = _solve_subproblem(
            q, current[j], exact=exact, trust_radius=trust_radius, sigma_floor=sigma_floor
        )
        after = surrogate_term(transition_moments(cur_post, model, new, j), model[j])
        min_eig = float(np.linalg.eigvalsh(-surrogate_hessian(q)).min())
        infos.append(StepUpdateInfo(j, before, after, frac, min_eig))
        current = current.replace_step(j, new)
        if j < model.T - 1:
            filt = kalman_filter(model, current, y, s1, P1)
            cur_post = rts_smooth(filt, model, current)
    return current, infos


# ----------------------------------------------------------------------
# Diagnostics
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class DecayReport:
    """Per-iteration sums of policy-covariance singular values."""

    trace_sums: np.ndarray     # (n_iterations,)
    violations: tuple[int, ...]  # iteration indices i where the sum increased


def covariance_decay_report(
    history: list[PolicyParams], *, rel_tol: float = 1e-12
) -> DecayReport:
    """Track the exploration-covariance decay across policy iterates.

    The sum of a PSD matrix's singular values equals its trace, so the
    recorded series is the per-iteration sum over steps of covariance
    traces.  Any increase beyond tolerance is flagged and logged.
    """
    if len(history) < 2:
        raise ValueError("need at least two policy iterates to report covariance decay")
    sums = np.array([pol.covariance_trace_sum() for pol in history])
    violations = []
    for i in range(len(sums) - 1):
        if sums[i + 1] > sums[i] + rel_tol * max(abs(sums[i]), 1.0):
            violations.append(i)
            logger.warning(
                "covariance trace sum increased at iteration %d: %.6e -> %.6e",
                i, sums[i], sums[i + 1],
            )
    return DecayReport(trace_sums=sums, violations=tuple(violations))


def expected_path_cost(
    paths: np.ndarray, policy: PolicyParams, cost: QuadraticCost
) -> np.ndarray:
    """Expected cumulative cost of each latent path under a policy.

    The action is integrated out analytically: at state ``s`` the expected
    action penalty of ``a ~ N(F s + e, Sig)`` is the penalty of the mean
    action plus ``tr(Q_a Sig)``.  Returns one value per path.
    """
    paths = np.asarray(paths, dtype=float)
    n_paths, _, _ = paths.shape
    total = np.zeros(n_paths)
    for k in range(policy.T):
        st = policy[k]
        ds = paths[:, k, :] - cost.s_star
        total += np.einsum("ni,ij,nj->n", ds, cost.q_s, ds)
        da = paths[:, k, :] @ st.F.T + st.e - cost.a_star
        total += np.einsum("ni,ij,nj->n", da, cost.q_a, da)
        total += float(np.trace(cost.q_a @ st.covariance))
    return total


@dataclass(frozen=True)
class EmDiagnostics:
    """One iteration's diagnostic row."""

    iteration: int
    surrogate: float
    expected_cost: float
    cov_trace_sum: float
    min_eig_neg_hessian: float


def write_diagnostics_csv(records: list[EmDiagnostics], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["iteration", "surrogate", "expected_cost", "cov_trace_sum", "min_eig_neg_hessian"]
        )
        for r in records:
            writer.writerow(
                [r.iteration, f"{r.surrogate:.17g}", f"{r.expected_cost:.17g}",
                 f"{r.cov_trace_sum:.17g}", f"{r.min_eig_neg_hessian:.17g}"]
            )
