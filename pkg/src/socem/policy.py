"""Time-varying linear-Gaussian control policies.

Each step applies an affine state-feedback law with additive Gaussian
noise: ``a = F s + e + w`` with ``w ~ N(0, Sigma)``.  The covariance is
never stored directly; the step keeps a square-root factor ``S`` with
``Sigma = S' S``, so any parameter vector reconstructs to a valid PSD
covariance and optimizer iterates cannot leave the PSD cone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "PolicyStep",
    "PolicyParams",
    "sample_action",
]


def _vec(mat: np.ndarray) -> np.ndarray:
    # Column-stacking vectorization; all packed layouts use this order.
    return np.asarray(mat, dtype=float).ravel(order="F")


def _unvec(v: np.ndarray, rows: int, cols: int) -> np.ndarray:
    return np.asarray(v, dtype=float).reshape((rows, cols), order="F")


@dataclass(frozen=True)
class PolicyStep:
    """One step of the policy: gain ``F``, offset ``e``, noise factor ``sigma_sqrt``."""

    F: np.ndarray            # (n_a, n_s) feedback gain
    e: np.ndarray            # (n_a,) offset
    sigma_sqrt: np.ndarray   # (n_a, n_a) factor, covariance = sigma_sqrt' sigma_sqrt

    def __post_init__(self):
        F = np.atleast_2d(np.asarray(self.F, dtype=float))
        e = np.asarray(self.e, dtype=float).reshape(-1)
        S = np.atleast_2d(np.asarray(self.sigma_sqrt, dtype=float))
        n_a = e.shape[0]
        if F.shape[0] != n_a:
            raise ValueError(f"F has {F.shape[0]} rows but e has length {n_a}")
        if S.shape != (n_a, n_a):
            raise ValueError(f"sigma_sqrt must be {n_a}x{n_a}, got {S.shape}")
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "e", e)
        object.__setattr__(self, "sigma_sqrt", S)

    @property
    def n_a(self) -> int:
        return self.e.shape[0]

    @property
    def n_s(self) -> int:
        return self.F.shape[1]

    @property
    def covariance(self) -> np.ndarray:
        # Gram product, symmetric PSD by construction.
        return self.sigma_sqrt.T @ self.sigma_sqrt

    def packed(self) -> np.ndarray:
        return np.concatenate([_vec(self.F), self.e, _vec(self.sigma_sqrt)])

    @staticmethod
    def packed_dim(n_s: int, n_a: int) -> int:
        return n_a * n_s + n_a + n_a * n_a

    @classmethod
    def from_packed(cls, v: np.ndarray, n_s: int, n_a: int) -> "PolicyStep":
        v = np.asarray(v, dtype=float).reshape(-1)
        want = cls.packed_dim(n_s, n_a)
        if v.shape[0] != want:
            raise ValueError(f"packed step has length {v.shape[0]}, expected {want}")
        nf = n_a * n_s
        return cls(
            F=_unvec(v[:nf], n_a, n_s),
            e=v[nf : nf + n_a],
            sigma_sqrt=_unvec(v[nf + n_a :], n_a, n_a),
        )


@dataclass(frozen=True)
class PolicyParams:
    """A horizon-length sequence of policy steps, immutable once built."""

    steps: tuple[PolicyStep, ...]

    def __post_init__(self):
        steps = tuple(self.steps)
        if not steps:
            raise ValueError("policy must have at least one step")
        n_s, n_a = steps[0].n_s, steps[0].n_a
        for k, st in enumerate(steps):
            if (st.n_s, st.n_a) != (n_s, n_a):
                raise ValueError(f"step {k} has dims ({st.n_s},{st.n_a}), expected ({n_s},{n_a})")
        object.__setattr__(self, "steps", steps)

    @property
    def T(self) -> int:
        return len(self.steps)

    @property
    def n_s(self) -> int:
        return self.steps[0].n_s

    @property
    def n_a(self) -> int:
        return self.steps[0].n_a

    def __getitem__(self, k: int) -> PolicyStep:
        return self.steps[k]

    def pack(self) -> np.ndarray:
        """Flatten to one vector, stacking per-step blocks (gain, offset, factor)."""
        return np.concatenate([st.packed() for st in self.steps])

    @classmethod
    def unpack(cls, v: np.ndarray, T: int, n_s: int, n_a: int) -> "PolicyParams":
        """Inverse of :meth:`pack`; rejects vectors of the wrong length."""
        v = np.asarray(v, dtype=float).reshape(-1)
        per = PolicyStep.packed_dim(n_s, n_a)
        want = T * per
        if v.shape[0] != want:
            raise ValueError(f"packed policy has length {v.shape[0]}, expected {want}")
        steps = [PolicyStep.from_packed(v[k * per : (k + 1) * per], n_s, n_a) for k in range(T)]
        return cls(steps=tuple(steps))

    def replace_step(self, k: int, step: PolicyStep) -> "PolicyParams":
        steps = list(self.steps)
        steps[k] = step
        return PolicyParams(steps=tuple(steps))

    def with_zero_noise(self) -> "PolicyParams":
        """Copy with all noise factors zeroed, for deterministic evaluation."""
        zero = np.zeros((self.n_a, self.n_a))
        return PolicyParams(
            steps=tuple(PolicyStep(F=st.F, e=st.e, sigma_sqrt=zero) for st in self.steps)
        )

    def covariance_trace_sum(self) -> float:
        """Sum over steps of the covariance trace (equals the sum of its singular values)."""
        return float(sum(np.trace(st.covariance) for st in self.steps))

    def to_dict(self) -> dict:
        return {
            "T": self.T,
            "n_s": self.n_s,
            "n_a": self.n_a,
            "steps": [
                {"F": st.F.tolist(), "e": st.e.tolist(), "Sigma_sqrt": st.sigma_sqrt.tolist()}
                for st in self.steps
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyParams":
        steps = tuple(
            PolicyStep(
                F=np.asarray(s["F"], dtype=float),
                e=np.asarray(s["e"], dtype=float),
                sigma_sqrt=np.asarray(s["Sigma_sqrt"], dtype=float),
            )
            for s in d["steps"]
        )
        pol = cls(steps=steps)
        for key in ("T", "n_s", "n_a"):
            if key in d and d[key] != getattr(pol, key):
                raise ValueError(f"policy document claims {key}={d[key]} but steps give {getattr(pol, key)}")
        return pol

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "PolicyParams":
        return cls.from_dict(json.loads(Path(path).read_text()))


def sample_action(
    step: PolicyStep,
    s: np.ndarray,
    rng: np.random.Generator | None = None,
    *,
    deterministic: bool = False,
    k: int | None = None,
) -> np.ndarray:
    """Draw an action from the policy step at state ``s``.

    In deterministic mode the mean ``F s + e`` is returned exactly and a
    zero noise factor is legal.  In stochastic mode the covariance must be
    positive definite; a singular factor raises, naming the offending
    timestep when ``k`` is given.
    """
    s = np.asarray(s, dtype=float).reshape(-1)
    if s.shape[0] != step.n_s:
        raise ValueError(f"state has length {s.shape[0]}, expected {step.n_s}")
    mean = step.F @ s + step.e
    if deterministic:
        return mean
    if rng is None:
        raise ValueError("stochastic sampling requires a random generator")
    # Sigma = S'S is PD iff the factor is nonsingular.
    if abs(np.linalg.det(step.sigma_sqrt)) == 0.0:
        where = f" at timestep {k}" if k is not None else ""
        raise ValueError(
            f"policy covariance{where} is singular; zero noise is only allowed in deterministic mode"
        )
    w = rng.standard_normal(step.n_a)
    return mean + step.sigma_sqrt.T @ w
