"""Quadratic step costs and the exponential cost-observation transform.

A rollout produces a nonnegative scalar cost at every step.  The optimizer
never consumes the raw cost directly; it works with the bounded transform
``exp(-cost)``, which maps low cost to values near one and can be treated
as the observation of a latent-state inference problem.  When the raw cost
is exponentially distributed with rate ``lam > 1``, the transformed value
has density ``lam * y**(lam - 1)`` on (0, 1], so summed log observations
are a monotone image of summed costs: raising observation likelihood is
the same move as lowering expected cost.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "COST_CLIP",
    "QuadraticCost",
    "CostObservationLaw",
    "instantaneous_cost",
    "observed_cost",
    "observed_cost_pdf",
]

# Costs are clipped here before exponentiation so exp(-cost) stays a strictly
# positive float64 (exp(-700) ~ 1e-304); observations must live in (0, 1].
COST_CLIP = 700.0


def _check_spd(name: str, mat: np.ndarray, sym_tol: float = 1e-12) -> np.ndarray:
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {mat.shape}")
    if not np.allclose(mat, mat.T, rtol=0.0, atol=sym_tol):
        raise ValueError(f"{name} must be symmetric to within {sym_tol:g}")
    min_eig = float(np.linalg.eigvalsh(mat).min())
    if min_eig <= 0.0:
        raise ValueError(f"{name} must be positive definite (min eigenvalue {min_eig:.3e})")
    return mat


@dataclass(frozen=True)
class QuadraticCost:
    """Quadratic penalty around a target state/action pair.

    ``q_s`` and ``q_a`` are symmetric positive-definite weight matrices;
    ``s_star`` and ``a_star`` are the target state and action.
    """

    q_s: np.ndarray
    q_a: np.ndarray
    s_star: np.ndarray
    a_star: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q_s", _check_spd("q_s", self.q_s))
        object.__setattr__(self, "q_a", _check_spd("q_a", self.q_a))
        s_star = np.asarray(self.s_star, dtype=float).reshape(-1)
        a_star = np.asarray(self.a_star, dtype=float).reshape(-1)
        if s_star.shape[0] != self.q_s.shape[0]:
            raise ValueError(
                f"s_star has length {s_star.shape[0]} but q_s is {self.q_s.shape[0]}x{self.q_s.shape[0]}"
            )
        if a_star.shape[0] != self.q_a.shape[0]:
            raise ValueError(
                f"a_star has length {a_star.shape[0]} but q_a is {self.q_a.shape[0]}x{self.q_a.shape[0]}"
            )
        object.__setattr__(self, "s_star", s_star)
        object.__setattr__(self, "a_star", a_star)

    @property
    def n_s(self) -> int:
        return self.q_s.shape[0]

    @property
    def n_a(self) -> int:
        return self.q_a.shape[0]

    def to_dict(self) -> dict:
        return {
            "Q_s": self.q_s.tolist(),
            "Q_a": self.q_a.tolist(),
            "s_star": self.s_star.tolist(),
            "a_star": self.a_star.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuadraticCost":
        return cls(
            q_s=np.asarray(d["Q_s"], dtype=float),
            q_a=np.asarray(d["Q_a"], dtype=float),
            s_star=np.asarray(d["s_star"], dtype=float),
            a_star=np.asarray(d["a_star"], dtype=float),
        )


@dataclass(frozen=True)
class CostObservationLaw:
    """Exponential law assumed for the raw step cost.

    The rate must be strictly greater than one: that is what makes the
    transformed observation density increasing in its argument, so that
    likelier observations correspond to lower costs.
    """

    lam: float = 2.0

    def __post_init__(self):
        if not self.lam > 1.0:
            raise ValueError(f"lam must be > 1 strictly, got {self.lam}")


def instantaneous_cost(s: np.ndarray, a: np.ndarray, cost: QuadraticCost) -> float:
    """Evaluate the quadratic step cost at a state/action pair.

    Returns ``(s - s*)' Q_s (s - s*) + (a - a*)' Q_a (a - a*)``, which is
    nonnegative for positive-definite weights.
    """
    s = np.asarray(s, dtype=float).reshape(-1)
    a = np.asarray(a, dtype=float).reshape(-1)
    if s.shape[0] != cost.n_s:
        raise ValueError(f"state s has length {s.shape[0]}, expected {cost.n_s}")
    if a.shape[0] != cost.n_a:
        raise ValueError(f"action a has length {a.shape[0]}, expected {cost.n_a}")
    ds = s - cost.s_star
    da = a - cost.a_star
    return float(ds @ cost.q_s @ ds + da @ cost.q_a @ da)


def observed_cost(y_raw: float) -> float:
    """Map a nonnegative cost to its observation ``exp(-cost)`` in (0, 1].

    Costs above ``COST_CLIP`` are clipped first so the result never
    underflows to exactly zero.
    """
    if y_raw < 0.0:
        raise ValueError(f"cost must be nonnegative, got {y_raw}")
    return float(np.exp(-min(float(y_raw), COST_CLIP)))


def observed_cost_pdf(y: float, law: CostObservationLaw) -> float:
    """Density of the cost observation on (0, 1].

    For a raw cost with exponential rate ``lam`` the observation
    ``exp(-cost)`` has density ``lam * y**(lam - 1)``, which integrates to
    one over (0, 1].
    """
    if not 0.0 < y <= 1.0:
        raise ValueError(f"observation must lie in (0, 1], got {y}")
    return float(law.lam * y ** (law.lam - 1.0))
