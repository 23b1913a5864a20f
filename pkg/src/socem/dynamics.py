"""Bayesian fitting of the per-step joint Gaussian over rollout tuples.

For every timestep the repeated experiments yield tuples
``(s_k, a_k, s_{k+1}, y_k)``.  A normal-inverse-Wishart prior turns the
sample moments into a posterior joint Gaussian over the stacked tuple;
conditioning that joint on ``(s_k, a_k)`` produces the time-varying
affine-Gaussian transition used everywhere downstream:

    [s_{k+1}; y_k] | s_k, a_k  ~  N(A_k [s_k; a_k] + c_k, Sigma_k)

with the transition partitioned into a state row-block (``A_d, B_d, c_d,
Sigma_d``) and a scalar observation row (``A_r, B_r, c_r, Sigma_r``).  The
cross-covariance between the two blocks is zeroed by assumption, and the
affine offset comes for free from conditioning a non-centered joint (the
input is augmented with a constant one during conditioning).
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "DynamicsFitError",
    "EpisodeData",
    "NiwPrior",
    "JointGaussianStep",
    "LtvStep",
    "LtvModel",
    "FitConfig",
    "posterior_joint",
    "condition_step",
    "fit_model",
]

logger = logging.getLogger(__name__)


class DynamicsFitError(RuntimeError):
    pass


def _jitter(mat: np.ndarray, scale: float = 1e-9) -> np.ndarray:
    """Symmetrize and add scaled-trace jitter so the matrix inverts safely."""
    mat = 0.5 * (mat + mat.T)
    d = mat.shape[0]
    bump = scale * max(float(np.trace(mat)) / d, 1e-12)
    return mat + bump * np.eye(d)


# ----------------------------------------------------------------------
# Rollout tuples
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class EpisodeData:
    """Tuples ``(s_k, a_k, s_{k+1}, y_k)`` over timesteps and repeated experiments."""

    s: np.ndarray       # (T, M, n_s) states
    a: np.ndarray       # (T, M, n_a) actions
    s_next: np.ndarray  # (T, M, n_s) successor states
    y: np.ndarray       # (T, M) cost observations in (0, 1]

    def __post_init__(self):
        s = np.asarray(self.s, dtype=float)
        a = np.asarray(self.a, dtype=float)
        s_next = np.asarray(self.s_next, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if s.ndim != 3 or a.ndim != 3 or s_next.shape != s.shape or y.shape != s.shape[:2]:
            raise ValueError("inconsistent episode-data shapes")
        if s.shape[:2] != a.shape[:2]:
            raise ValueError("state and action arrays disagree on (T, M)")
        if np.any(y <= 0.0) or np.any(y > 1.0):
            raise ValueError("cost observations must lie in (0, 1]")
        for name, arr in (("s", s), ("a", a), ("s_next", s_next), ("y", y)):
            object.__setattr__(self, name, arr)

    @property
    def T(self) -> int:
        return self.s.shape[0]

    @property
    def M(self) -> int:
        return self.s.shape[1]

    @property
    def n_s(self) -> int:
        return self.s.shape[2]

    @property
    def n_a(self) -> int:
        return self.a.shape[2]

    def tuple_dim(self) -> int:
        return 2 * self.n_s + self.n_a + 1

    def stacked(self, k: int) -> np.ndarray:
        """All records at timestep ``k`` as rows ``(s, a, s_next, y)``, shape (M, d)."""
        return np.hstack(
            [self.s[k], self.a[k], self.s_next[k], self.y[k][:, None]]
        )

    @classmethod
    def from_rollouts(cls, rollouts) -> "EpisodeData":
        """Stack plant rollouts (see :mod:`socem.simulator`) into tuple arrays."""
        T = rollouts[0].T
        s = np.stack([r.measured_states[:-1] for r in rollouts], axis=1)
        s_next = np.stack([r.measured_states[1:] for r in rollouts], axis=1)
        a = np.stack([r.actions for r in rollouts], axis=1)
        y = np.stack([r.observations for r in rollouts], axis=1)
        if any(r.T != T for r in rollouts):
            raise ValueError("rollouts disagree on horizon")
        return cls(s=s, a=a, s_next=s_next, y=y)

    # -- serialization: columnar CSV plus a JSON manifest ---------------

    def to_csv(self, csv_path: str | Path, manifest_path: str | Path | None = None) -> None:
        csv_path = Path(csv_path)
        header = (
            ["k", "m"]
            + [f"s{i}" for i in range(self.n_s)]
            + [f"a{i}" for i in range(self.n_a)]
            + [f"snext{i}" for i in range(self.n_s)]
            + ["y"]
        )
        with csv_path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for k in range(self.T):
                for m in range(self.M):
                    row = (
                        [k, m]
                        + [f"{v:.17g}" for v in self.s[k, m]]
                        + [f"{v:.17g}" for v in self.a[k, m]]
                        + [f"{v:.17g}" for v in self.s_next[k, m]]
                        + [f"{self.y[k, m]:.17g}"]
                    )
                    writer.writerow(row)
        if manifest_path is not None:
            manifest = {"T": self.T, "M": self.M, "n_s": self.n_s, "n_a": self.n_a,
                        "csv": csv_path.name}
            Path(manifest_path).write_text(json.dumps(manifest, indent=2))

    @classmethod
    def from_csv(cls, csv_path: str | Path) -> "EpisodeData":
        csv_path = Path(csv_path)
        with csv_path.open() as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [row for row in reader if row]
        n_s = sum(1 for h in header if h.startswith("s") and not h.startswith("snext"))
        n_a = sum(1 for h in header if h.startswith("a"))
        ks = sorted({int(r[0]) for r in rows})
        ms = sorted({int(r[1]) for r in rows})
        T, M = len(ks), len(ms)
        s = np.empty((T, M, n_s))
        a = np.empty((T, M, n_a))
        s_next = np.empty((T, M, n_s))
        y = np.empty((T, M))
        for row in rows:
            k, m = int(row[0]), int(row[1])
            vals = np.asarray(row[2:], dtype=float)
            s[k, m] = vals[:n_s]
            a[k, m] = vals[n_s : n_s + n_a]
            s_next[k, m] = vals[n_s + n_a : 2 * n_s + n_a]
            y[k, m] = vals[-1]
        return cls(s=s, a=a, s_next=s_next, y=y)


# ----------------------------------------------------------------------
# Normal-inverse-Wishart posterior over one timestep's tuple
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class NiwPrior:
    """Conjugate prior for the mean and covariance of one tuple Gaussian."""

    mean: np.ndarray     # (d,)
    kappa: float         # pseudo-count on the mean
    dof: float           # inverse-Wishart degrees of freedom
    scatter: np.ndarray  # (d, d) inverse-Wishart scale matrix

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        scatter = np.asarray(self.scatter, dtype=float)
        if scatter.shape != (mean.shape[0], mean.shape[0]):
            raise ValueError("prior scatter shape does not match prior mean")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "scatter", scatter)


@dataclass(frozen=True)
class JointGaussianStep:
    """Posterior joint Gaussian over one timestep's stacked tuple."""

    mu: np.ndarray   # (d,)
    lam: np.ndarray  # (d, d) symmetric PD covariance


def posterior_joint(
    data: EpisodeData,
    k: int,
    prior: NiwPrior,
    *,
    min_samples: int = 1,
    jitter_scale: float = 1e-9,
) -> JointGaussianStep:
    """Posterior-mode joint Gaussian over ``(s_k, a_k, s_{k+1}, y_k)``.

    Standard conjugate update: the posterior mean blends the prior mean
    with the sample mean by pseudo-count weighting, and the covariance is
    the joint posterior mode ``(prior scatter + sample scatter +
    shrinkage)/(dof + M + d + 2)``.
    """
    x = data.stacked(k)  # (M, d)
    M, d = x.shape
    if M < min_samples:
        raise DynamicsFitError(
            f"timestep {k} has {M} records but at least {min_samples} are required; "
            "collect more rollouts"
        )
    if M == 0:
        mu = prior.mean
        cov = prior.scatter / (prior.dof + d + 2.0)
    else:
        xbar = x.mean(axis=0)
        centered = x - xbar
        sample_scatter = centered.T @ centered
        kap = prior.kappa
        mu = (kap * prior.mean + M * xbar) / (kap + M)
        shrink = (kap * M / (kap + M)) * np.outer(xbar - prior.mean, xbar - prior.mean)
        cov = (prior.scatter + sample_scatter + shrink) / (prior.dof + M + d + 2.0)
    return JointGaussianStep(mu=mu, lam=_jitter(cov, jitter_scale))


# ----------------------------------------------------------------------
# Conditioning into the affine-Gaussian transition
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class LtvStep:
    """One step of the fitted affine-Gaussian transition model."""

    A_d: np.ndarray      # (n_s, n_s)
    B_d: np.ndarray      # (n_s, n_a)
    A_r: np.ndarray      # (n_s,) observation row over the state
    B_r: np.ndarray      # (n_a,) observation row over the action
    c_d: np.ndarray      # (n_s,) affine offset of the state block
    c_r: float           # affine offset of the observation row
    Sigma_d: np.ndarray  # (n_s, n_s) symmetric PD
    Sigma_r: float       # > 0

    def __post_init__(self):
        for name in ("A_d", "B_d", "Sigma_d"):
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        for name in ("A_r", "B_r", "c_d"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(-1))
        object.__setattr__(self, "c_r", float(self.c_r))
        object.__setattr__(self, "Sigma_r", float(self.Sigma_r))

    @property
    def n_s(self) -> int:
        return self.A_d.shape[0]

    @property
    def n_a(self) -> int:
        return self.B_d.shape[1]

    def to_dict(self) -> dict:
        return {
            "A_d": self.A_d.tolist(),
            "B_d": self.B_d.tolist(),
            "A_r": self.A_r.tolist(),
            "B_r": self.B_r.tolist(),
            "c_d": self.c_d.tolist(),
            "c_r": self.c_r,
            "Sigma_d": self.Sigma_d.tolist(),
            "Sigma_r": self.Sigma_r,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LtvStep":
        return cls(
            A_d=np.asarray(d["A_d"], dtype=float),
            B_d=np.asarray(d["B_d"], dtype=float),
            A_r=np.asarray(d["A_r"], dtype=float),
            B_r=np.asarray(d["B_r"], dtype=float),
            c_d=np.asarray(d.get("c_d", np.zeros(len(d["A_d"]))), dtype=float),
            c_r=float(d.get("c_r", 0.0)),
            Sigma_d=np.asarray(d["Sigma_d"], dtype=float),
            Sigma_r=float(d["Sigma_r"]),
        )


@dataclass(frozen=True)
class LtvModel:
    """Per-timestep affine-Gaussian transitions plus the initial-state Gaussian."""

    steps: tuple[LtvStep, ...]
    mu1: np.ndarray  # (n_s,) initial-state mean
    P1: np.ndarray   # (n_s, n_s) initial-state covariance

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        object.__setattr__(self, "mu1", np.asarray(self.mu1, dtype=float).reshape(-1))
        object.__setattr__(self, "P1", np.atleast_2d(np.asarray(self.P1, dtype=float)))

    @property
    def T(self) -> int:
        return len(self.steps)

    @property
    def n_s(self) -> int:
        return self.steps[0].n_s

    @property
    def n_a(self) -> int:
        return self.steps[0].n_a

    def __getitem__(self, k: int) -> LtvStep:
        return self.steps[k]

    def to_dict(self) -> dict:
        return {
            "T": self.T,
            "n_s": self.n_s,
            "n_a": self.n_a,
            "mu1": self.mu1.tolist(),
            "P1": self.P1.tolist(),
            "steps": [st.to_dict() for st in self.steps],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LtvModel":
        return cls(
            steps=tuple(LtvStep.from_dict(s) for s in d["steps"]),
            mu1=np.asarray(d["mu1"], dtype=float),
            P1=np.asarray(d["P1"], dtype=float),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "LtvModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def condition_step(
    joint: JointGaussianStep,
    n_s: int,
    n_a: int,
    *,
    jitter_scale: float = 1e-9,
) -> LtvStep:
    """Condition the tuple joint on ``(s_k, a_k)`` to get one transition step.

    Gaussian conditioning of the outputs ``(s_{k+1}, y_k)`` on the inputs
    gives the regression matrix and residual covariance; the affine offset
    absorbs the non-centered means (equivalently, the input is augmented
    with a constant one).  The residual cross-covariance between the state
    block and the observation row is zeroed afterwards by assumption.
    """
    d_in = n_s + n_a
    d_out = n_s + 1
    mu = joint.mu
    lam = joint.lam
    if mu.shape[0] != d_in + d_out:
        raise ValueError(f"joint dimension {mu.shape[0]} does not match n_s={n_s}, n_a={n_a}")

    lam_ii = _jitter(lam[:d_in, :d_in], jitter_scale)
    lam_oi = lam[d_in:, :d_in]
    lam_oo = lam[d_in:, d_in:]
    try:
        coef = np.linalg.solve(lam_ii, lam_oi.T).T  # (d_out, d_in)
    except np.linalg.LinAlgError as exc:
        raise DynamicsFitError(
            "input block of the joint covariance is singular; increase the jitter scale "
            "or collect richer rollouts"
        ) from exc
    resid = lam_oo - coef @ lam_oi.T
    resid = 0.5 * (resid + resid.T)
    offset = mu[d_in:] - coef @ mu[:d_in]

    sigma_d = resid[:n_s, :n_s]
    sigma_r = float(resid[n_s, n_s])
    # Residual cross-covariance between the state block and the observation
    # row is dropped; downstream formulas assume a block-diagonal residual.
    return LtvStep(
        A_d=coef[:n_s, :n_s],
        B_d=coef[:n_s, n_s:],
        A_r=coef[n_s, :n_s],
        B_r=coef[n_s, n_s:],
        c_d=offset[:n_s],
        c_r=float(offset[n_s]),
        Sigma_d=_jitter(sigma_d, jitter_scale),
        Sigma_r=max(sigma_r, 1e-12),
    )


# ----------------------------------------------------------------------
# Whole-horizon fit
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class FitConfig:
    """Hyperparameters of the per-timestep Bayesian fit.

    The prior at each timestep is built from the records of the adjacent
    timesteps (window ``pool_window`` on each side, weighted by
    ``pool_weight`` per record): both its mean and its scatter pool the
    window.  Pooling the scatter matters: within one timestep the repeated
    experiments spread mostly by sensor noise, and a regression on that
    alone is badly attenuated; the cross-time variation carried in through
    the prior is what identifies the dynamics, the same sample-complexity
    reduction a shared mixture fit would provide.
    """

    kappa0: float = 1.0           # extra pseudo-count on the prior mean
    nu0_extra: float = 2.0        # dof = tuple_dim + nu0_extra + pooled pseudo-count
    scatter_scale: float = 1e-2   # isotropic floor added to the prior scatter
    pool_window: int = 2
    pool_weight: float = 1.0      # weight of one pooled record relative to a local one
    min_samples: int = 1
    jitter_scale: float = 1e-9
    b_rank_tol: float = 1e-8      # smallest allowed singular value of B_d
    p1_floor: float = 1e-6        # eigenvalue floor on the initial-state covariance
    # The cost observation is a deterministic function of the regressors, so
    # its fitted residual variance only measures linearization error; flooring
    # it at a fraction of the pooled observation variance keeps the smoother
    # from treating that error as an exact measurement.
    sigma_r_floor_frac: float = 0.75
    n_components: int = 1         # reserved hook for a mixture extension

    def to_dict(self) -> dict:
        return {
            "kappa0": self.kappa0,
            "nu0_extra": self.nu0_extra,
            "scatter_scale": self.scatter_scale,
            "pool_window": self.pool_window,
            "pool_weight": self.pool_weight,
            "min_samples": self.min_samples,
            "jitter_scale": self.jitter_scale,
            "b_rank_tol": self.b_rank_tol,
            "p1_floor": self.p1_floor,
            "sigma_r_floor_frac": self.sigma_r_floor_frac,
            "n_components": self.n_components,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        return cls(**d)


def _regularize_b(B: np.ndarray, tol: float, k: int) -> np.ndarray:
    """Clamp tiny singular values of the control matrix.

    A column-rank-deficient control matrix makes the per-step policy
    update ill-posed, so near-zero singular values are lifted to the
    tolerance instead of letting the downstream solve blow up.
    """
    u, sv, vt = np.linalg.svd(B, full_matrices=False)
    if sv.min() >= tol:
        return B
    logger.warning(
        "timestep %d: control matrix is column-rank deficient (min singular value %.3e); "
        "clamping to %.1e", k, sv.min(), tol,
    )
    return u @ np.diag(np.maximum(sv, tol)) @ vt


def fit_model(data: EpisodeData, cfg: FitConfig | None = None) -> LtvModel:
    """Fit the whole-horizon transition model from rollout tuples.

    Applies the conjugate posterior and Gaussian conditioning at every
    timestep, then sets the initial-state Gaussian from the empirical
    moments of the recorded first states (eigenvalue-floored).
    """
    cfg = cfg or FitConfig()
    if cfg.n_components != 1:
        raise NotImplementedError(
            "mixture fits are a reserved extension; only a single component is implemented"
        )
    d = data.tuple_dim()
    y_var = float(data.y.var())

    steps = []
    for k in range(data.T):
        lo, hi = max(0, k - cfg.pool_window), min(data.T, k + cfg.pool_window + 1)
        pooled = np.vstack([data.stacked(j) for j in range(lo, hi)])
        pooled_mean = pooled.mean(axis=0)
        centered = pooled - pooled_mean
        count = cfg.pool_weight * pooled.shape[0]
        prior = NiwPrior(
            mean=pooled_mean,
            kappa=cfg.kappa0 + count,
            dof=d + cfg.nu0_extra + count,
            scatter=cfg.pool_weight * (centered.T @ centered) + cfg.scatter_scale * np.eye(d),
        )
        try:
            joint = posterior_joint(
                data, k, prior, min_samples=cfg.min_samples, jitter_scale=cfg.jitter_scale
            )
            st = condition_step(joint, data.n_s, data.n_a, jitter_scale=cfg.jitter_scale)
        except DynamicsFitError as exc:
            raise DynamicsFitError(f"timestep {k}: {exc}") from exc
        B = _regularize_b(st.B_d, cfg.b_rank_tol, k)
        sigma_r = max(st.Sigma_r, cfg.sigma_r_floor_frac * y_var)
        if B is not st.B_d or sigma_r != st.Sigma_r:
            st = LtvStep(
                A_d=st.A_d, B_d=B, A_r=st.A_r, B_r=st.B_r,
                c_d=st.c_d, c_r=st.c_r, Sigma_d=st.Sigma_d, Sigma_r=sigma_r,
            )
        steps.append(st)

    first = data.s[0]  # (M, n_s)
    mu1 = first.mean(axis=0)
    if data.M > 1:
        centered = first - mu1
        P1 = centered.T @ centered / (data.M - 1)
    else:
        P1 = np.zeros((data.n_s, data.n_s))
    eigval, eigvec = np.linalg.eigh(0.5 * (P1 + P1.T))
    P1 = eigvec @ np.diag(np.maximum(eigval, cfg.p1_floor)) @ eigvec.T

    return LtvModel(steps=tuple(steps), mu1=mu1, P1=P1)
