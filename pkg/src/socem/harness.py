"""End-to-end iteration loop: fit, observe, smooth, optimize, deploy.

One iteration collects plant rollouts under the current policy, refits the
transition model, generates a cost-observation sequence from the fitted
model, smooths the latent states against it, and takes one policy-update
pass; the updated policy is then evaluated on the plant.

Randomness is fully determined by one root seed.  Every stream is derived
as ``default_rng(SeedSequence((seed, stage, iteration, index)))`` with
stage codes 0 exploration rollouts, 1 data-collection rollouts,
2 observation generation, 3 evaluation rollouts, 4 latent-path sampling.
Evaluation streams use iteration 0 for every iteration (common random
numbers), so per-iteration cost comparisons are paired rather than
independently noisy.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import em
from .costs import COST_CLIP, CostObservationLaw, QuadraticCost
from .dynamics import EpisodeData, FitConfig, LtvModel, fit_model
from .lqr import lqr_backward, make_phi0
from .policy import PolicyParams, PolicyStep, sample_action
from .simulator import PlantConfig, Rollout, run_episode
from .smoothing import kalman_filter, rts_smooth, sample_latent_paths

__all__ = [
    "EmAscentError",
    "HarnessError",
    "RunConfig",
    "IterationRecord",
    "RunResult",
    "generate_observations",
    "run_soc_em",
    "export_results",
    "evaluate_policy",
    "load_config",
]

logger = logging.getLogger(__name__)

_STAGE_EXPLORE = 0
_STAGE_COLLECT = 1
_STAGE_OBSERVE = 2
_STAGE_EVAL = 3
_STAGE_PATHS = 4


class EmAscentError(RuntimeError):
    """The policy update decreased the surrogate it was meant to ascend."""


class HarnessError(RuntimeError):
    """Failure of one pipeline stage, tagged for replay."""

    def __init__(self, stage: str, iteration: int, seed: int, cause: BaseException):
        super().__init__(f"stage '{stage}' failed at iteration {iteration} (seed {seed}): {cause}")
        self.stage = stage
        self.iteration = iteration
        self.seed = seed


def _rng(seed: int, stage: int, iteration: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, stage, iteration, index)))


def _default_cost() -> QuadraticCost:
    # Weight scale matters beyond the usual LQR trade-off here: exp(-cost)
    # must not underflow along typical rollouts, or the fitted observation
    # row degenerates and smoothing carries no information.  These weights
    # keep the initial-state cost near 2.5 so observations span (0.05, 1).
    return QuadraticCost(
        q_s=np.diag([0.01, 0.01, 0.001, 0.001]),
        q_a=1e-4 * np.eye(2),
        s_star=np.array([5.0, 20.0, 0.0, 0.0]),
        a_star=np.zeros(2),
    )


@dataclass(frozen=True)
class RunConfig:
    """Everything one run needs; serializes losslessly into the manifest."""

    plant: PlantConfig = field(default_factory=PlantConfig)
    cost: QuadraticCost = field(default_factory=_default_cost)
    law: CostObservationLaw = field(default_factory=CostObservationLaw)
    fit: FitConfig = field(default_factory=FitConfig)
    M: int = 20                    # rollouts per model fit
    n_iters: int = 10
    variant: str = "em2"           # "em1" (sequential) or "em2" (independent)
    eval_rollouts: int = 20
    seed: int = 0
    trust_radius: float = 2.0
    trust_decay: float = 1.0       # per-iteration multiplier on the trust radius
    sigma_floor: float = 0.02      # keeps a minimum of exploration in collected data
    exploration_sigma: float = 0.1
    explore_sigma0: float = 1.0    # action noise of the pre-baseline exploration policy
    refit_until: int | None = 4    # refit the model only while iteration < this; None = always
    phi0_path: str | None = None   # optional externally supplied initial policy (JSON)
    use_closed_form: bool = False  # jump to the exact per-step maximizer (zero noise)
    skip_optimize: bool = False    # null-experiment control: identity policy update
    mc_cost_samples: int = 256

    def __post_init__(self):
        if self.n_iters < 1:
            raise ValueError(f"n_iters must be at least 1, got {self.n_iters}")
        if self.M < 1:
            raise ValueError(f"M must be at least 1, got {self.M}")
        if self.variant not in ("em1", "em2"):
            raise ValueError(f"variant must be 'em1' or 'em2', got {self.variant!r}")
        if self.eval_rollouts < 2:
            raise ValueError("eval_rollouts must be at least 2 to report a std-dev")

    def to_dict(self) -> dict:
        return {
            "plant": self.plant.to_dict(),
            "cost": self.cost.to_dict(),
            "lambda": self.law.lam,
            "fit": self.fit.to_dict(),
            "run": {
                "M": self.M,
                "n_iters": self.n_iters,
                "variant": self.variant,
                "eval_rollouts": self.eval_rollouts,
                "seed": self.seed,
                "trust_radius": self.trust_radius,
                "trust_decay": self.trust_decay,
                "sigma_floor": self.sigma_floor,
                "exploration_sigma": self.exploration_sigma,
                "explore_sigma0": self.explore_sigma0,
                "refit_until": self.refit_until,
                "phi0_path": self.phi0_path,
                "use_closed_form": self.use_closed_form,
                "skip_optimize": self.skip_optimize,
                "mc_cost_samples": self.mc_cost_samples,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        kwargs = {}
        if "plant" in d:
            kwargs["plant"] = PlantConfig.from_dict(d["plant"])
        if "cost" in d:
            kwargs["cost"] = QuadraticCost.from_dict(d["cost"])
        if "lambda" in d:
            kwargs["law"] = CostObservationLaw(lam=float(d["lambda"]))
        if "fit" in d:
            kwargs["fit"] = FitConfig.from_dict(d["fit"])
        run = d.get("run", {})
        for key, value in run.items():
            kwargs[key] = value
        return cls(**kwargs)

    def with_overrides(self, **kwargs) -> "RunConfig":
        return replace(self, **kwargs)


def load_config(path: str | Path) -> RunConfig:
    """Read a run configuration from a JSON or TOML document."""
    path = Path(path)
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib

        doc = tomllib.loads(path.read_text())
    else:
        doc = json.loads(path.read_text())
    return RunConfig.from_dict(doc)


# ----------------------------------------------------------------------
# Observation generation (the fitted model, not the plant)
# ----------------------------------------------------------------------


def generate_observations(
    model: LtvModel,
    policy: PolicyParams,
    s1: np.ndarray,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Roll the fitted model forward and record sampled cost observations.

    Successor state and observation are drawn jointly from the fitted
    transition at each step (their residuals are independent blocks);
    observations are clamped into (0, 1].  Returns the observation
    sequence and the sampled latent states.
    """
    if policy.T != model.T:
        raise ValueError(f"policy horizon {policy.T} does not match model horizon {model.T}")
    n_s = model.n_s
    s = np.asarray(s1, dtype=float).reshape(n_s)
    states = np.empty((model.T + 1, n_s))
    states[0] = s
    y = np.empty(model.T)
    floor = float(np.exp(-COST_CLIP))
    for k in range(model.T):
        st = model[k]
        a = sample_action(policy[k], s, rng, k=k)
        mean_s = st.A_d @ s + st.B_d @ a + st.c_d
        mean_y = float(st.A_r @ s + st.B_r @ a + st.c_r)
        s = rng.multivariate_normal(mean_s, st.Sigma_d, method="cholesky")
        y[k] = np.clip(mean_y + np.sqrt(st.Sigma_r) * rng.standard_normal(), floor, 1.0)
        states[k + 1] = s
    return y, states


# ----------------------------------------------------------------------
# Iteration records
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class IterationRecord:
    """Evaluation and update diagnostics for one iteration's policy."""

    iteration: int
    policy: PolicyParams
    cum_cost_mean: np.ndarray   # (T,) mean cumulative cost over eval rollouts
    cum_cost_std: np.ndarray    # (T,)
    cov_trace_sum: float
    cov_traces: np.ndarray      # (T,) per-step covariance traces
    surrogate_before: float
    surrogate_after: float
    exp_cost_current: float     # MC estimate under the smoothed law, current policy
    exp_cost_updated: float     # same paths, updated policy
    exp_cost_se: float          # standard error of the updated-policy estimate
    exp_cost_diff_se: float     # standard error of the paired difference
    min_eig_neg_hessian: float
    eval_true_states: np.ndarray  # (R, T+1, 4)
    eval_actions: np.ndarray      # (R, T, 2)

    @property
    def final_cost_mean(self) -> float:
        return float(self.cum_cost_mean[-1])

    @property
    def final_cost_std(self) -> float:
        return float(self.cum_cost_std[-1])


@dataclass(frozen=True)
class RunResult:
    config: RunConfig
    records: tuple[IterationRecord, ...]
    final_policy: PolicyParams
    model: LtvModel

    def policy_history(self) -> list[PolicyParams]:
        return [r.policy for r in self.records] + [self.final_policy]


# ----------------------------------------------------------------------
# The loop
# ----------------------------------------------------------------------


def _exploration_policy(cfg: RunConfig) -> PolicyParams:
    zero_gain = np.zeros((cfg.plant.n_a, cfg.plant.n_s))
    noise = cfg.explore_sigma0 * np.eye(cfg.plant.n_a)
    step = PolicyStep(F=zero_gain, e=np.zeros(cfg.plant.n_a), sigma_sqrt=noise)
    return PolicyParams(steps=tuple(step for _ in range(cfg.plant.T)))


def _collect(cfg: RunConfig, policy: PolicyParams, stage: int, iteration: int) -> EpisodeData:
    rollouts = [
        run_episode(cfg.plant, policy, cfg.cost, cfg.law, _rng(cfg.seed, stage, iteration, m))
        for m in range(cfg.M)
    ]
    return EpisodeData.from_rollouts(rollouts)


def _evaluate(cfg: RunConfig, policy: PolicyParams) -> list[Rollout]:
    # Common random numbers: stream depends on the rollout index only, so
    # per-iteration evaluations are paired.
    return [
        run_episode(cfg.plant, policy, cfg.cost, cfg.law, _rng(cfg.seed, _STAGE_EVAL, 0, m))
        for m in range(cfg.eval_rollouts)
    ]


def evaluate_policy(
    plant: PlantConfig,
    policy: PolicyParams,
    cost: QuadraticCost,
    law: CostObservationLaw,
    *,
    rollouts: int = 20,
    seed: int = 0,
    deterministic: bool = False,
) -> tuple[np.ndarray, np.ndarray, list[Rollout]]:
    """Mean and std of the cumulative cost curve over fresh eval rollouts."""
    runs = [
        run_episode(plant, policy, cost, law, _rng(seed, _STAGE_EVAL, 0, m),
                    deterministic=deterministic)
        for m in range(rollouts)
    ]
    cum = np.stack([r.cumulative_costs() for r in runs])
    return cum.mean(axis=0), cum.std(axis=0, ddof=1), runs


def run_soc_em(cfg: RunConfig) -> RunResult:
    """Run the full iteration loop and return per-iteration records.

    Record ``i`` evaluates the policy entering iteration ``i`` (record 0
    is the baseline) together with the diagnostics of the update computed
    during that iteration.  The returned final policy is the last update's
    output.  Within each iteration the update may never decrease the
    surrogate under the fixed smoothed posterior; for the independent
    variant this is asserted, for the sequential variant (whose later
    subproblems deliberately change the posterior) a decrease is only
    logged.
    """
    stage, iteration = "init", -1
    try:
        stage = "explore"
        data = _collect(cfg, _exploration_policy(cfg), _STAGE_EXPLORE, 0)
        stage = "fit"
        model = fit_model(data, cfg.fit)
        stage = "baseline"
        if cfg.phi0_path is not None:
            policy = PolicyParams.load(cfg.phi0_path)
            if policy.T != cfg.plant.T:
                raise ValueError(
                    f"supplied initial policy has horizon {policy.T}, plant has {cfg.plant.T}"
                )
        else:
            policy = make_phi0(lqr_backward(model, cfg.cost), cfg.exploration_sigma)
    except Exception as exc:
        raise HarnessError(stage, iteration, cfg.seed, exc) from exc

    records: list[IterationRecord] = []
    for iteration in range(cfg.n_iters):
        try:
            refit = cfg.refit_until is None or iteration < max(cfg.refit_until, 1)
            if refit:
                stage = "collect"
                data = _collect(cfg, policy, _STAGE_COLLECT, iteration)
                stage = "fit"
                model = fit_model(data, cfg.fit)

            stage = "observe"
            rng_obs = _rng(cfg.seed, _STAGE_OBSERVE, iteration)
            s1 = rng_obs.multivariate_normal(model.mu1, model.P1, method="cholesky")
            y, _ = generate_observations(model, policy, s1, rng_obs)

            stage = "smooth"
            filt = kalman_filter(model, policy, y, s1, model.P1)
            post = rts_smooth(filt, model, policy)

            stage = "optimize"
            radius = cfg.trust_radius * cfg.trust_decay**iteration
            surrogate_before = em.surrogate_value(post, model, policy)
            if cfg.skip_optimize:
                new_policy, infos = policy, []
            elif cfg.variant == "em1":
                new_policy, infos = em.soc_em_1(
                    post, model, policy, y, s1, model.P1,
                    trust_radius=radius, sigma_floor=cfg.sigma_floor,
                    exact=cfg.use_closed_form,
                )
            else:
                new_policy, infos = em.soc_em_2(
                    post, model, policy,
                    trust_radius=radius, sigma_floor=cfg.sigma_floor,
                    exact=cfg.use_closed_form,
                )
            surrogate_after = em.surrogate_value(post, model, new_policy)
            ascent_slack = 1e-8 * max(1.0, abs(surrogate_before))
            if surrogate_after < surrogate_before - ascent_slack:
                msg = (
                    f"surrogate decreased across the optimize step at iteration {iteration}: "
                    f"{surrogate_before:.6e} -> {surrogate_after:.6e}"
                )
                if cfg.variant == "em2" and not cfg.skip_optimize:
                    raise EmAscentError(msg)
                logger.warning(msg)

            stage = "mc-cost"
            paths = sample_latent_paths(
                filt, model, policy, _rng(cfg.seed, _STAGE_PATHS, iteration), cfg.mc_cost_samples
            )
            v_cur = em.expected_path_cost(paths, policy, cfg.cost)
            v_new = em.expected_path_cost(paths, new_policy, cfg.cost)
            diff = v_new - v_cur
            n_mc = diff.shape[0]
            mc_se = float(v_new.std(ddof=1) / np.sqrt(n_mc))
            diff_se = float(diff.std(ddof=1) / np.sqrt(n_mc))

            stage = "evaluate"
            evals = _evaluate(cfg, policy)
            cum = np.stack([r.cumulative_costs() for r in evals])

            records.append(
                IterationRecord(
                    iteration=iteration,
                    policy=policy,
                    cum_cost_mean=cum.mean(axis=0),
                    cum_cost_std=cum.std(axis=0, ddof=1),
                    cov_trace_sum=policy.covariance_trace_sum(),
                    cov_traces=np.array(
                        [float(np.trace(st.covariance)) for st in policy.steps]
                    ),
                    surrogate_before=surrogate_before,
                    surrogate_after=surrogate_after,
                    exp_cost_current=float(v_cur.mean()),
                    exp_cost_updated=float(v_new.mean()),
                    exp_cost_se=mc_se,
                    exp_cost_diff_se=diff_se,
                    min_eig_neg_hessian=min(
                        (info.min_eig_neg_hessian for info in infos), default=float("nan")
                    ),
                    eval_true_states=np.stack([r.true_states for r in evals]),
                    eval_actions=np.stack([r.actions for r in evals]),
                )
            )
            policy = new_policy
        except HarnessError:
            raise
        except Exception as exc:
            raise HarnessError(stage, iteration, cfg.seed, exc) from exc

    return RunResult(
        config=cfg, records=tuple(records), final_policy=policy, model=model
    )


# ----------------------------------------------------------------------
# Result export
# ----------------------------------------------------------------------


def _writerow(writer, values) -> None:
    writer.writerow([v if isinstance(v, (int, str)) else f"{v:.17g}" for v in values])


def export_results(result: RunResult, out_dir: str | Path) -> list[Path]:
    """Write the delimited result files and the replay manifest.

    Produces ``costs.csv`` (cumulative-cost curves), ``trajectories.csv``
    (true eval states), ``actions.csv`` (eval actions), ``covariance.csv``
    (per-step policy covariance traces), ``em_diagnostics.csv`` and
    ``manifest.json``.  Re-running with the manifest's configuration
    reproduces every file byte for byte.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    path = out / "costs.csv"
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "k", "mean", "std"])
        for rec in result.records:
            for k in range(rec.cum_cost_mean.shape[0]):
                _writerow(writer, [rec.iteration, k + 1, rec.cum_cost_mean[k], rec.cum_cost_std[k]])
    written.append(path)

    path = out / "trajectories.csv"
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "rollout", "k", "x", "y", "v_x", "v_y"])
        for rec in result.records:
            n_roll, n_k, _ = rec.eval_true_states.shape
            for r in range(n_roll):
                for k in range(n_k):
                    _writerow(writer, [rec.iteration, r, k + 1, *rec.eval_true_states[r, k]])
    written.append(path)

    path = out / "actions.csv"
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "rollout", "k", "a_x", "a_y"])
        for rec in result.records:
            n_roll, n_k, _ = rec.eval_actions.shape
            for r in range(n_roll):
                for k in range(n_k):
                    _writerow(writer, [rec.iteration, r, k + 1, *rec.eval_actions[r, k]])
    written.append(path)

    path = out / "covariance.csv"
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "k", "trace"])
        for rec in result.records:
            for k, tr in enumerate(rec.cov_traces):
                _writerow(writer, [rec.iteration, k + 1, tr])
    written.append(path)

    path = out / "em_diagnostics.csv"
    em.write_diagnostics_csv(
        [
            em.EmDiagnostics(
                iteration=rec.iteration,
                surrogate=rec.surrogate_after,
                expected_cost=rec.exp_cost_updated,
                cov_trace_sum=rec.cov_trace_sum,
                min_eig_neg_hessian=rec.min_eig_neg_hessian,
            )
            for rec in result.records
        ],
        path,
    )
    written.append(path)

    path = out / "final_policy.json"
    result.final_policy.save(path)
    written.append(path)

    path = out / "manifest.json"
    manifest = {
        "package": "socem",
        "config": result.config.to_dict(),
        "seed": result.config.seed,
        "variant": result.config.variant,
        "files": [p.name for p in written],
    }
    path.write_text(json.dumps(manifest, indent=2))
    written.append(path)
    return written
