"""Ground-truth plant: a damped 2D point mass with noisy state sensing.

The true state is ``x = (px, py, vx, vy)``; the control is a planar force.
Integration is semi-implicit Euler: velocity first, then position with the
updated velocity.  Controllers never see ``x`` directly; they act on a
measurement ``s = x + eps`` with isotropic Gaussian sensor noise, and the
recorded step cost is evaluated on that measurement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .costs import CostObservationLaw, QuadraticCost, instantaneous_cost, observed_cost
from .policy import PolicyParams, sample_action

__all__ = ["PlantConfig", "Rollout", "step", "measure", "run_episode"]


@dataclass(frozen=True)
class PlantConfig:
    mass: float = 1.0
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, -9.8]))
    damping: float = 0.5          # linear velocity damping, 1/s
    dt: float = 0.1               # integration step, s
    rho: float = 0.3              # sensor-noise std-dev on every state component
    T: int = 30                   # horizon, steps
    x0: np.ndarray = field(default_factory=lambda: np.array([0.0, 5.0, 0.0, 0.0]))
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "gravity", np.asarray(self.gravity, dtype=float).reshape(2))
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float).reshape(4))
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.mass <= 0:
            raise ValueError(f"mass must be positive, got {self.mass}")
        if self.rho < 0:
            raise ValueError(f"rho must be nonnegative, got {self.rho}")
        if self.T < 1:
            raise ValueError(f"T must be at least 1, got {self.T}")

    @property
    def n_s(self) -> int:
        return 4

    @property
    def n_a(self) -> int:
        return 2

    def to_dict(self) -> dict:
        return {
            "mass": self.mass,
            "gravity": self.gravity.tolist(),
            "damping": self.damping,
            "dt": self.dt,
            "rho": self.rho,
            "T": self.T,
            "x0": self.x0.tolist(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PlantConfig":
        kwargs = dict(d)
        if "gravity" in kwargs:
            kwargs["gravity"] = np.asarray(kwargs["gravity"], dtype=float)
        if "x0" in kwargs:
            kwargs["x0"] = np.asarray(kwargs["x0"], dtype=float)
        return cls(**kwargs)


@dataclass(frozen=True)
class Rollout:
    """One episode: true and measured trajectories plus per-step costs."""

    true_states: np.ndarray      # (T+1, 4)
    measured_states: np.ndarray  # (T+1, 4)
    actions: np.ndarray          # (T, 2)
    costs: np.ndarray            # (T,) raw quadratic costs
    observations: np.ndarray     # (T,) exp(-cost), in (0, 1]

    @property
    def T(self) -> int:
        return self.actions.shape[0]

    def cumulative_costs(self) -> np.ndarray:
        return np.cumsum(self.costs)


def step(x: np.ndarray, a: np.ndarray, cfg: PlantConfig) -> np.ndarray:
    """Advance the true state one step; deterministic semi-implicit Euler."""
    x = np.asarray(x, dtype=float).reshape(4)
    a = np.asarray(a, dtype=float).reshape(2)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(a))):
        raise ValueError("plant step requires finite state and action")
    p, v = x[:2], x[2:]
    v_next = v + cfg.dt * (a / cfg.mass + cfg.gravity - cfg.damping * v)
    p_next = p + cfg.dt * v_next
    return np.concatenate([p_next, v_next])


def measure(x: np.ndarray, rho: float, rng: np.random.Generator) -> np.ndarray:
    """Measured state: truth plus isotropic Gaussian noise of std ``rho``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if rho < 0:
        raise ValueError(f"rho must be nonnegative, got {rho}")
    if rho == 0.0:
        return x.copy()
    return x + rho * rng.standard_normal(x.shape[0])


def run_episode(
    cfg: PlantConfig,
    policy: PolicyParams,
    cost: QuadraticCost,
    law: CostObservationLaw,
    rng: np.random.Generator,
    *,
    deterministic: bool = False,
) -> Rollout:
    """Roll the plant for one episode under the policy.

    Actions are sampled from the policy conditioned on the *measured*
    state, and the recorded cost is evaluated on the measured state too;
    sensor noise therefore propagates into both control and bookkeeping.
    """
    if policy.T != cfg.T:
        raise ValueError(f"policy horizon {policy.T} does not match plant horizon {cfg.T}")
    del law  # accepted for interface symmetry; the transform itself is deterministic

    x = cfg.x0.copy()
    xs = np.empty((cfg.T + 1, 4))
    ss = np.empty((cfg.T + 1, 4))
    acts = np.empty((cfg.T, 2))
    ys_raw = np.empty(cfg.T)
    ys = np.empty(cfg.T)

    xs[0] = x
    ss[0] = measure(x, cfg.rho, rng)
    for k in range(cfg.T):
        a = sample_action(policy[k], ss[k], rng, deterministic=deterministic, k=k)
        ys_raw[k] = instantaneous_cost(ss[k], a, cost)
        ys[k] = observed_cost(ys_raw[k])
        x = step(x, a, cfg)
        xs[k + 1] = x
        ss[k + 1] = measure(x, cfg.rho, rng)
        acts[k] = a

    return Rollout(
        true_states=xs,
        measured_states=ss,
        actions=acts,
        costs=ys_raw,
        observations=ys,
    )
