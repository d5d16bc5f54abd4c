"""Sampling MPC with value bootstrap, warm-started from the policy.

Each call: (1) roll the internal model with the expert actor to get a fresh
posterior state and a Gaussian action plan; (2) blend it with the previous
plan (temporal momentum); (3) iterate: sample candidate action sequences,
score them by discounted predicted reward plus the terminal value head,
keep the best constraint-satisfying elites, refit the Gaussian, blend
(iteration momentum); (4) sample the first action of the final plan.

The planner talks to any model through a small duck-typed surface:
    warm_start(y_prev, horizon, rng) -> (y0, GaussianActionPlan)
    begin(y0, n) -> batch state
    step(batch, actions (n, m), rng) -> (batch', reward_mean (n,), x_pred (n, 7))
    value_mean(batch) -> (n,)
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError
from .state import (IDX_OFFSET, IDX_OMEGA, IDX_VX, IDX_VZ, ModelState, X_DIM,
                    relative_rollout, x_features)


@dataclass
class GaussianActionPlan:
    """Mean/std sequences over an H-step action horizon."""

    mean: np.ndarray  # (H, m)
    std: np.ndarray   # (H, m), elementwise >= the configured floor

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape:
            raise DimensionError(
                f"plan mean shape {self.mean.shape} != std shape {self.std.shape}")
        if not (np.isfinite(self.mean).all() and np.isfinite(self.std).all()):
            raise ValueError("plan contains non-finite entries")
        if (self.std <= 0).any():
            raise ValueError("plan std must be positive")

    def copy(self) -> "GaussianActionPlan":
        return GaussianActionPlan(self.mean.copy(), self.std.copy())


@dataclass(frozen=True)
class PlannerConfig:
    horizon: int = 8
    iterations: int = 4          # MPPI distribution updates per call
    samples: int = 256           # draws from the current plan per iteration
    policy_samples: int = 32     # draws from the warm-start policy per iteration
    elites: int = 32
    temporal_momentum: float = 0.5    # alpha: previous plan vs warm start
    iteration_momentum: float = 0.7   # beta: elite fit vs previous iterate
    gamma: float = 0.951
    sigma_floor: float = 1e-3
    penalty_weight: float = 1e3
    bootstrap: bool = True
    max_action_retries: int = 8

    def validate(self):
        if self.horizon < 1:
            raise ConfigError("planner.horizon", "must be >= 1")
        for name in ("iterations",):
            if getattr(self, name) < 0:
                raise ConfigError(f"planner.{name}", "must be >= 0")
        for name in ("samples", "policy_samples", "elites"):
            if getattr(self, name) < 1:
                raise ConfigError(f"planner.{name}", "must be >= 1")
        if self.elites > self.samples + self.policy_samples:
            raise ConfigError("planner.elites",
                              "elite count exceeds sampled candidates")
        for name in ("temporal_momentum", "iteration_momentum"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"planner.{name}", "must lie in [0, 1]")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("planner.gamma", "must lie in [0, 1)")
        if self.sigma_floor <= 0:
            raise ConfigError("planner.sigma_floor", "must be positive")
        return self


_INF = float("inf")


@dataclass(frozen=True)
class ConstraintSet:
    """Hard feasibility set: height-offset box (joint-limit analog),
    height-rate bounds on the action (joint-velocity analog), base twist
    bounds, and the admissible action box."""

    height_offset: tuple[float, float] = (-0.3, 0.15)
    height_rate: tuple[float, float] = (-1.0, 1.0)
    v_x: tuple[float, float] = (-_INF, _INF)
    v_z: tuple[float, float] = (-_INF, _INF)
    pitch_rate: tuple[float, float] = (-_INF, _INF)
    action_low: tuple = (-1.0, -1.0, -1.0, -1.0)
    action_high: tuple = (1.0, 1.0, 1.0, 1.0)
    height_rate_dim: int = 3

    def __post_init__(self):
        for name in ("height_offset", "height_rate", "v_x", "v_z", "pitch_rate"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ConfigError(f"constraints.{name}", f"lower {lo} must be < upper {hi}")
        if not (np.asarray(self.action_low) < np.asarray(self.action_high)).all():
            raise ConfigError("constraints.action_box", "lower must be < upper")

    @classmethod
    def unbounded(cls, action_low, action_high, height_rate_dim: int | None = None
                  ) -> "ConstraintSet":
        m = len(action_low)
        return cls(height_offset=(-_INF, _INF), height_rate=(-_INF, _INF),
                   action_low=tuple(action_low), action_high=tuple(action_high),
                   height_rate_dim=height_rate_dim if height_rate_dim is not None
                   else min(3, m - 1))

    def action_box(self) -> tuple[np.ndarray, np.ndarray]:
        return np.asarray(self.action_low, dtype=np.float64), \
            np.asarray(self.action_high, dtype=np.float64)

    @staticmethod
    def _excess(values, lo, hi):
        over = np.maximum(values - hi, 0.0)
        under = np.maximum(lo - values, 0.0)
        over = np.where(np.isfinite(over), over, 0.0)
        under = np.where(np.isfinite(under), under, 0.0)
        return over + under

    def state_excess(self, xs: np.ndarray) -> np.ndarray:
        """Sum of positive constraint excesses over trailing state axes.

        xs: (..., 7) or (..., H, 7); reduces every axis after the batch."""
        xs = np.asarray(xs, dtype=np.float64)
        e = self._excess(xs[..., IDX_VX], *self.v_x)
        e = e + self._excess(xs[..., IDX_VZ], *self.v_z)
        e = e + self._excess(xs[..., IDX_OMEGA], *self.pitch_rate)
        e = e + self._excess(xs[..., IDX_OFFSET], *self.height_offset)
        if e.ndim > 1:
            e = e.sum(axis=tuple(range(1, e.ndim)))
        return e

    def action_excess(self, actions: np.ndarray) -> np.ndarray:
        actions = np.asarray(actions, dtype=np.float64)
        lo, hi = self.action_box()
        e = self._excess(actions, lo, hi).sum(axis=-1)
        e = e + self._excess(actions[..., self.height_rate_dim], *self.height_rate)
        if e.ndim > 1:
            e = e.sum(axis=tuple(range(1, e.ndim)))
        return e


@dataclass
class TrajectoryCandidate:
    actions: np.ndarray            # (H, m)
    predicted_states: np.ndarray   # (H, 7) kinodynamic predictions
    return_estimate: float
    feasible: bool
    violation_magnitude: float


@dataclass
class IterationStats:
    iteration: int
    return_mean: float
    return_max: float
    elite_return_mean: float
    elite_return_min: float
    feasible_count: int
    violation_count: int
    elite_violation_count: int
    infeasible_fallback: bool
    non_elite_feasible_max: float


@dataclass
class DiagnosticTrace:
    """Per-call planner telemetry; `actual_pz` is filled by the control loop
    after the environment advances."""

    call_index: int = 0
    iterations: list = field(default_factory=list)
    executed_action: np.ndarray | None = None
    one_step_predicted_x: np.ndarray | None = None
    one_step_violation: float = 0.0
    predicted_pz: np.ndarray | None = None
    actual_pz: float | None = None
    infeasible_events: int = 0
    action_fallback: bool = False
    timing_ms: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "schema_version": 1,
            "call_index": self.call_index,
            "iterations": [vars(s) for s in self.iterations],
            "executed_action": None if self.executed_action is None
            else [float(v) for v in self.executed_action],
            "one_step_predicted_x": None if self.one_step_predicted_x is None
            else [float(v) for v in self.one_step_predicted_x],
            "one_step_violation": float(self.one_step_violation),
            "predicted_pz": None if self.predicted_pz is None
            else [float(v) for v in self.predicted_pz],
            "actual_pz": self.actual_pz,
            "infeasible_events": self.infeasible_events,
            "action_fallback": self.action_fallback,
            "timing_ms": {k: round(v, 3) for k, v in self.timing_ms.items()},
        }


# -- return evaluation ---------------------------------------------------------


def rollout_candidates(model, y0, actions: np.ndarray, gamma: float,
                       rng: np.random.Generator, bootstrap: bool = True
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Roll n candidates through the model's dynamics branch.

    actions: (n, H, m). Returns (returns (n,), predicted states (n, H, 7)).
    Discounted reward means are accumulated step-by-step; the terminal value
    head mean is added at gamma^H when bootstrapping.
    """
    actions = np.asarray(actions, dtype=np.float64)
    n, horizon = actions.shape[0], actions.shape[1]
    batch = model.begin(y0, n)
    returns = np.zeros(n)
    xs = np.zeros((n, horizon, X_DIM))
    gpow = 1.0
    for k in range(horizon):
        batch, r_mean, x_pred = model.step(batch, actions[:, k], rng)
        returns += gpow * r_mean
        xs[:, k] = x_pred
        gpow *= gamma
    if bootstrap:
        returns += gpow * model.value_mean(batch)
    return returns, xs


def evaluate_return(actions: np.ndarray, y0, gamma: float, model,
                    rng: np.random.Generator, bootstrap: bool = True) -> float:
    """Expected return of one candidate: discounted reward-head means over the
    horizon plus the discounted terminal value mean. H = 0 degenerates to the
    pure bootstrap."""
    actions = np.asarray(actions, dtype=np.float64)
    if actions.shape[0] == 0:
        batch = model.begin(y0, 1)
        return float(model.value_mean(batch)[0]) if bootstrap else 0.0
    returns, _ = rollout_candidates(model, y0, actions[None], gamma, rng, bootstrap)
    return float(returns[0])


def check_constraints(candidate: TrajectoryCandidate, cset: ConstraintSet
                      ) -> tuple[bool, float]:
    """Feasibility of one candidate: zero total excess over predicted states
    and actions (bounds inclusive)."""
    violation = float(cset.state_excess(candidate.predicted_states[None])[0]
                      + cset.action_excess(candidate.actions[None])[0])
    if not np.isfinite(candidate.return_estimate):
        violation = _INF
    candidate.violation_magnitude = violation
    candidate.feasible = violation == 0.0
    return candidate.feasible, violation


def select_elites(actions: np.ndarray, returns: np.ndarray, violations: np.ndarray,
                  n_elite: int, penalty_weight: float
                  ) -> tuple[np.ndarray, bool]:
    """Indices of the elite set: stable descending sort by return (lower index
    wins ties), keep the best feasible candidates; when fewer than n_elite are
    feasible, fall back to penalized ranking over all candidates."""
    finite = np.isfinite(returns)
    order = np.argsort(-np.where(finite, returns, -_INF), kind="stable")
    feasible_sorted = order[(violations[order] == 0.0) & finite[order]]
    if feasible_sorted.size >= n_elite:
        return feasible_sorted[:n_elite], False
    penalized = np.where(finite, returns - penalty_weight * violations, -1e18)
    fallback_order = np.argsort(-penalized, kind="stable")
    return fallback_order[:n_elite], True


def fit_elite_plan(elite_actions: np.ndarray, sigma_floor: float) -> GaussianActionPlan:
    """Per-(step, dim) sample mean and population std over the elite set."""
    mean = elite_actions.mean(axis=0)
    std = np.maximum(elite_actions.std(axis=0, ddof=0), sigma_floor)
    return GaussianActionPlan(mean, std)


def blend_plans(a: GaussianActionPlan, b: GaussianActionPlan, weight_a: float
                ) -> GaussianActionPlan:
    """weight_a * a + (1 - weight_a) * b, blended in std space."""
    return GaussianActionPlan(weight_a * a.mean + (1.0 - weight_a) * b.mean,
                              weight_a * a.std + (1.0 - weight_a) * b.std)


def mppi_plan(plan_prev: GaussianActionPlan | None, y_prev, model,
              config: PlannerConfig, cset: ConstraintSet,
              rng: np.random.Generator, call_index: int = 0
              ) -> tuple[np.ndarray, GaussianActionPlan, DiagnosticTrace]:
    """One full planner call; pure function of (inputs, rng state)."""
    config.validate()
    trace = DiagnosticTrace(call_index=call_index)
    lo, hi = cset.action_box()
    m = lo.shape[0]
    horizon = config.horizon

    t0 = time.perf_counter()
    y0, plan_rl = model.warm_start(y_prev, horizon, rng)
    plan_rl = GaussianActionPlan(plan_rl.mean,
                                 np.maximum(plan_rl.std, config.sigma_floor))
    trace.timing_ms["warm_start"] = (time.perf_counter() - t0) * 1e3

    if plan_prev is None:
        plan_prev = plan_rl.copy()
    if plan_prev.mean.shape != (horizon, m):
        raise DimensionError(
            f"previous plan shape {plan_prev.mean.shape} != ({horizon}, {m})")
    plan = blend_plans(plan_prev, plan_rl, config.temporal_momentum)

    t_sample = t_eval = t_fit = 0.0
    for i in range(1, config.iterations + 1):
        t1 = time.perf_counter()
        eps = rng.standard_normal((config.samples, horizon, m))
        cand = plan.mean[None] + plan.std[None] * eps
        eps_pi = rng.standard_normal((config.policy_samples, horizon, m))
        cand_pi = plan_rl.mean[None] + plan_rl.std[None] * eps_pi
        actions = np.clip(np.concatenate([cand, cand_pi], axis=0), lo, hi)
        t2 = time.perf_counter()
        returns, xs = rollout_candidates(model, y0, actions, config.gamma, rng,
                                         config.bootstrap)
        violations = cset.state_excess(xs) + cset.action_excess(actions)
        violations = np.where(np.isfinite(returns), violations, _INF)
        t3 = time.perf_counter()
        elite_idx, fell_back = select_elites(actions, returns, violations,
                                             config.elites, config.penalty_weight)
        elite_fit = fit_elite_plan(actions[elite_idx], config.sigma_floor)
        plan = blend_plans(elite_fit, plan, config.iteration_momentum)
        t4 = time.perf_counter()
        t_sample += t2 - t1
        t_eval += t3 - t2
        t_fit += t4 - t3
        finite = returns[np.isfinite(returns)]
        elite_returns = returns[elite_idx]
        non_elite_feasible = np.setdiff1d(
            np.where((violations == 0.0) & np.isfinite(returns))[0], elite_idx)
        trace.iterations.append(IterationStats(
            iteration=i,
            return_mean=float(finite.mean()) if finite.size else float("nan"),
            return_max=float(finite.max()) if finite.size else float("nan"),
            elite_return_mean=float(elite_returns.mean()),
            elite_return_min=float(elite_returns.min()),
            feasible_count=int((violations == 0.0).sum()),
            violation_count=int((violations > 0.0).sum()),
            elite_violation_count=int((violations[elite_idx] > 0.0).sum()),
            infeasible_fallback=fell_back,
            non_elite_feasible_max=(float(returns[non_elite_feasible].max())
                                    if non_elite_feasible.size else float("-inf")),
        ))
        if fell_back:
            trace.infeasible_events += 1
    trace.timing_ms["sampling"] = t_sample * 1e3
    trace.timing_ms["evaluation"] = t_eval * 1e3
    trace.timing_ms["elite_fit"] = t_fit * 1e3

    t5 = time.perf_counter()
    a0, one_x, one_viol, fell_back = _draw_first_action(
        plan, y0, model, cset, config, rng)
    trace.executed_action = a0
    trace.one_step_predicted_x = one_x
    trace.one_step_violation = one_viol
    trace.action_fallback = fell_back

    # mean-plan rollout for the predicted-vs-actual overlay: offset 0 is the
    # posterior state estimate, offsets 1..H-1 the open-loop mean plan
    mean_returns, mean_xs = rollout_candidates(
        model, y0, plan.mean[None], config.gamma, rng, config.bootstrap)
    trace.predicted_pz = np.concatenate([[_y0_pz(y0)],
                                         mean_xs[0, :horizon - 1, 1]])
    trace.timing_ms["finalize"] = (time.perf_counter() - t5) * 1e3
    return a0, plan, trace


def _y0_pz(y0) -> float:
    x = y0.x if isinstance(y0, ModelState) else np.asarray(y0)
    return float(np.asarray(x).ravel()[1]) if np.asarray(x).size > 1 else float("nan")


def _draw_first_action(plan: GaussianActionPlan, y0, model, cset: ConstraintSet,
                       config: PlannerConfig, rng: np.random.Generator):
    """Sample a0 from the final plan, clipped into the action box; retry a few
    times if its one-step predicted state violates the constraint set."""
    lo, hi = cset.action_box()
    best = None
    for _ in range(max(config.max_action_retries, 1)):
        a0 = np.clip(plan.mean[0] + plan.std[0] * rng.standard_normal(lo.shape[0]),
                     lo, hi)
        batch = model.begin(y0, 1)
        _, _, x_pred = model.step(batch, a0[None], rng)
        viol = float(cset.state_excess(x_pred[None])[0] + cset.action_excess(a0[None])[0])
        if viol == 0.0:
            return a0, x_pred[0], 0.0, False
        if best is None or viol < best[2]:
            best = (a0, x_pred[0], viol)
    # fall back to the plan mean itself
    a0 = np.clip(plan.mean[0], lo, hi)
    batch = model.begin(y0, 1)
    _, _, x_pred = model.step(batch, a0[None], rng)
    viol = float(cset.state_excess(x_pred[None])[0] + cset.action_excess(a0[None])[0])
    if best is not None and best[2] < viol:
        a0, x_pred0, viol = best
        return a0, x_pred0, viol, True
    return a0, x_pred[0], viol, True


# -- the learned-model adapter ----------------------------------------------------


class ModelPlannerAdapter:
    """Bridges the internal model + expert actor to the planner surface.

    Call begin_tick(obs_flat) once per control tick before planning; it fixes
    the observation the warm start conditions on. After warm_start the fields
    tick_rollout/tick_state expose the imagination products of the tick.
    """

    def __init__(self, model, actor, sigma_floor: float = 1e-3):
        self.model = model
        self.actor = actor
        self.sigma_floor = sigma_floor
        self.obs_flat = None
        self._e = None
        self.tick_rollout = None
        self.tick_state = None

    def begin_tick(self, obs_flat: np.ndarray):
        self.obs_flat = np.asarray(obs_flat, dtype=np.float64)
        with ad.no_grad():
            self._e = self.model.embed(self.obs_flat[None]).data

    def warm_start(self, y_prev: ModelState, horizon: int, rng: np.random.Generator):
        if self._e is None:
            raise RuntimeError("begin_tick() must be called before planning")
        rollout, y1 = self.model.imagine(y_prev, self._e, horizon, rng=rng)
        self.tick_rollout = rollout
        self.tick_state = y1
        rollout_flat = relative_rollout(rollout.states, y1.x).reshape(1, -1)
        obs = self.obs_flat[None]

        def actor_plan(x, h, z, k):
            with ad.no_grad():
                dist = self.actor(obs, h, rollout_flat)
            mu = dist.mean.data
            return mu, mu, dist.std

        _, _, means, stds, _ = self.model.rollout_batch(
            y1.x[None], y1.h[None], y1.z[None], None, horizon, rng=rng,
            action_fn=actor_plan, posterior_first=False)
        plan = GaussianActionPlan(means[0], np.maximum(stds[0], self.sigma_floor))
        return y1, plan

    def begin(self, y0: ModelState, n: int) -> dict:
        return {"x": np.tile(y0.x, (n, 1)), "h": np.tile(y0.h, (n, 1)),
                "z": np.tile(y0.z, (n, 1))}

    def step(self, batch: dict, actions: np.ndarray, rng: np.random.Generator):
        with ad.no_grad():
            x, h, z = batch["x"], batch["h"], batch["z"]
            r_mean = self.model.predict_reward(x, h, z, actions).mean.data[:, 0]
            gin = np.concatenate([x_features(x), z, actions], axis=-1)
            h_next = self.model.gru(ad.Tensor(gin), ad.Tensor(h)).data
            z_next, _, x_next = self.model.prior_update(x, h_next, rng=rng)
        return ({"x": x_next.data, "h": h_next, "z": z_next.data}, r_mean,
                x_next.data)

    def value_mean(self, batch: dict) -> np.ndarray:
        with ad.no_grad():
            return self.model.predict_value(batch["x"], batch["h"],
                                            batch["z"]).mean.data[:, 0]
