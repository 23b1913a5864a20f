"""Finite-horizon LQR on the fitted affine model, used to seed the optimizer.

The backward Riccati recursion runs over the fitted affine-Gaussian state
dynamics ``s' = A_d s + B_d a + c_d + w`` with the quadratic step cost,
yielding time-varying affine gains that minimize the expected cumulative
cost under the model.  Wrapping those gains with isotropic exploration
noise produces the initial stochastic policy the iteration loop starts
from.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .costs import QuadraticCost
from .dynamics import LtvModel
from .policy import PolicyParams, PolicyStep

__all__ = ["RiccatiPass", "lqr_backward", "make_phi0", "value_at"]


@dataclass(frozen=True)
class RiccatiPass:
    """Backward-pass value function and affine gains.

    ``value_quad[k] / value_lin[k] / value_const[k]`` define the expected
    cost-to-go ``s' V s + 2 v' s + d`` from state index ``k`` (0-based;
    index T is the terminal zero).  ``gain[k]``/``offset[k]`` give the
    minimizing action ``a = K s + k0`` at step ``k``.
    """

    value_quad: np.ndarray   # (T+1, n_s, n_s)
    value_lin: np.ndarray    # (T+1, n_s)
    value_const: np.ndarray  # (T+1,)
    gain: np.ndarray         # (T, n_a, n_s)
    offset: np.ndarray       # (T, n_a)

    @property
    def T(self) -> int:
        return self.gain.shape[0]


def lqr_backward(model: LtvModel, cost: QuadraticCost) -> RiccatiPass:
    """Backward Riccati recursion over the fitted affine dynamics.

    The optimized objective is the sum of step costs plus a terminal state
    penalty with the same state weight, so even the last action steers
    toward the target (with a bare step-cost sum the final action would
    only minimize its own penalty).  The process noise enters only the
    constant term of the value function.
    """
    T, n_s, n_a = model.T, model.n_s, model.n_a
    if cost.n_s != n_s or cost.n_a != n_a:
        raise ValueError(
            f"cost dims ({cost.n_s},{cost.n_a}) do not match model dims ({n_s},{n_a})"
        )

    Vq = np.zeros((T + 1, n_s, n_s))
    vl = np.zeros((T + 1, n_s))
    vc = np.zeros(T + 1)
    K = np.zeros((T, n_a, n_s))
    k0 = np.zeros((T, n_a))

    # Terminal penalty (s - s*)' Q_s (s - s*) on the post-horizon state.
    Vq[T] = cost.q_s
    vl[T] = -cost.q_s @ cost.s_star
    vc[T] = float(cost.s_star @ cost.q_s @ cost.s_star)

    for k in range(T - 1, -1, -1):
        st = model[k]
        A, B, c = st.A_d, st.B_d, st.c_d
        V, v, d = Vq[k + 1], vl[k + 1], vc[k + 1]

        c_ss = cost.q_s + A.T @ V @ A
        c_aa = cost.q_a + B.T @ V @ B
        c_sa = A.T @ V @ B
        g_s = -cost.q_s @ cost.s_star + A.T @ (V @ c + v)
        g_a = -cost.q_a @ cost.a_star + B.T @ (V @ c + v)
        const = (
            float(cost.s_star @ cost.q_s @ cost.s_star)
            + float(cost.a_star @ cost.q_a @ cost.a_star)
            + float(c @ V @ c) + 2.0 * float(v @ c) + d
            + float(np.trace(V @ st.Sigma_d))
        )

        # c_aa is PD because the action weight is PD and V is PSD.
        min_eig = float(np.linalg.eigvalsh(c_aa).min())
        assert min_eig > 0.0, f"control Hessian not PD at step {k} (min eig {min_eig:.3e})"

        K[k] = -np.linalg.solve(c_aa, c_sa.T)
        k0[k] = -np.linalg.solve(c_aa, g_a)
        Vq[k] = 0.5 * ((c_ss + c_sa @ K[k]) + (c_ss + c_sa @ K[k]).T)
        vl[k] = g_s + c_sa @ k0[k]
        vc[k] = const + float(g_a @ k0[k])

    return RiccatiPass(value_quad=Vq, value_lin=vl, value_const=vc, gain=K, offset=k0)


def value_at(rp: RiccatiPass, s: np.ndarray, k: int = 0) -> float:
    """Expected cost-to-go from state ``s`` at step index ``k``."""
    s = np.asarray(s, dtype=float).reshape(-1)
    return float(s @ rp.value_quad[k] @ s + 2.0 * rp.value_lin[k] @ s + rp.value_const[k])


def make_phi0(rp: RiccatiPass, exploration_sigma: float = 0.1) -> PolicyParams:
    """Wrap the Riccati gains into the initial stochastic policy.

    The noise factor is ``exploration_sigma * I`` at every step; zero
    gives the deterministic LQR policy.
    """
    if exploration_sigma < 0:
        raise ValueError(f"exploration_sigma must be nonnegative, got {exploration_sigma}")
    n_a = rp.gain.shape[1]
    noise = exploration_sigma * np.eye(n_a)
    steps = tuple(
        PolicyStep(F=rp.gain[k], e=rp.offset[k], sigma_sqrt=noise) for k in range(rp.T)
    )
    return PolicyParams(steps=steps)
