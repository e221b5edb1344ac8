"""Intrinsic-coefficient schedules and the skill meta-controller.

The adaptive coefficient treats task return as a constraint
``J_E >= R_hat`` (best mean return seen so far) on intrinsic maximization.
The multiplier follows dual gradient descent,

    lambda_k = lambda_{k-1} - eta * (J_E_k - R_hat_{k-1}),

so falling short of the best return raises lambda, and the intrinsic weight
is ``tau_k = min(1 / lambda_k, 1)``. Per iteration the order is fixed:
:func:`update_lambda` (against the previous R_hat), then :func:`tau_cim`,
then :func:`update_rhat`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .envs import EnvSpec, StepResult
from .errors import ConfigError, NumericError
from .intrinsic import SkillPrior, conditioned_obs
from .rl import Policy, policy_act

LAMBDA_MIN, LAMBDA_MAX = 1e-6, 1e6
SCHEDULES = ("adaptive", "constant", "linear", "exponential", "none")


@dataclass
class CoefficientState:
    lam: float = 1.0
    eta: float = 0.05
    r_hat: float | None = None
    k: int = 0
    tau: float = 1.0


def _finite(x: float, what: str) -> float:
    x = float(x)
    if not math.isfinite(x):
        raise NumericError(f"{what} is not finite: {x}")
    return x


def update_rhat(state: CoefficientState, j_e: float) -> CoefficientState:
    j_e = _finite(j_e, "mean episode return")
    state.r_hat = j_e if state.r_hat is None else max(state.r_hat, j_e)
    return state


def update_lambda(state: CoefficientState, j_e: float) -> CoefficientState:
    """One dual step; a no-op before any return has been recorded."""
    j_e = _finite(j_e, "mean episode return")
    _finite(state.lam, "lambda")
    if state.r_hat is not None:
        lam = state.lam - state.eta * (j_e - state.r_hat)
        state.lam = min(max(lam, LAMBDA_MIN), LAMBDA_MAX)
    state.k += 1
    return state


def tau_cim(state: CoefficientState) -> float:
    state.tau = min(1.0 / state.lam, 1.0)
    return state.tau


def adaptive_step(state: CoefficientState, j_e: float | None) -> float:
    """Full per-iteration update; ``j_e=None`` (no finished episodes) keeps tau as is."""
    if j_e is None:
        return tau_cim(state)
    update_lambda(state, j_e)
    tau = tau_cim(state)
    update_rhat(state, j_e)
    return tau


@dataclass(frozen=True)
class Schedule:
    kind: str
    horizon: int = 100

    def __post_init__(self):
        if self.kind not in SCHEDULES:
            raise ConfigError(f"unknown coefficient schedule {self.kind!r}; expected one of {SCHEDULES}")
        if self.kind == "linear" and self.horizon <= 0:
            raise ConfigError("linear schedule needs a positive horizon")


def tau_schedule(sched: Schedule, k: int) -> float:
    """Fixed baselines: constant 1, linear ``max(0, 1 - k/T)``, exponential ``0.001**k``."""
    if k < 0:
        raise ConfigError("iteration index must be non-negative")
    if sched.kind == "constant":
        return 1.0
    if sched.kind == "linear":
        return max(0.0, 1.0 - k / sched.horizon)
    if sched.kind == "exponential":
        return 0.001 ** k
    if sched.kind == "none":
        return 0.0
    raise ConfigError(f"schedule {sched.kind!r} is not a fixed schedule")


def mix_rewards(r_e, r_i, tau: float):
    return r_e + tau * r_i


# ------------------------------------------------------------------ meta-controller

def skill_from_meta(meta_action, prior: SkillPrior) -> np.ndarray:
    """Turn a meta-policy action into a skill vector (unit-normalized or one-hot)."""
    if prior.categorical:
        v = np.zeros(prior.n_z)
        v[int(meta_action)] = 1.0
        return v
    u = np.asarray(meta_action, dtype=float)
    if u.shape != (prior.n_z,):
        raise ConfigError(f"meta action has shape {u.shape}, skills have {prior.n_z} dims")
    norm = np.linalg.norm(u)
    if norm < 1e-12:
        v = np.zeros(prior.n_z)
        v[0] = 1.0
        return v
    return u / norm if prior.mode == "unit-sphere" else np.clip(u, prior.low, prior.high)


def meta_step(meta_policy: Policy, s, s_goal, skill_policy: Policy, prior: SkillPrior,
              rng: np.random.Generator | None = None, deterministic: bool = True):
    """Pick a skill from ``[s; s_goal]`` and act with the frozen skill policy.

    Returns ``(env_action, z)``.
    """
    meta_obs = np.concatenate([np.asarray(s, dtype=float), np.asarray(s_goal, dtype=float)])
    rng = rng if rng is not None else np.random.default_rng(0)
    u, _, _ = policy_act(meta_policy, meta_obs, rng, deterministic)
    z = skill_from_meta(u, prior)
    return low_level_action(skill_policy, s, z), z


def low_level_action(skill_policy: Policy, s, z) -> np.ndarray:
    obs = conditioned_obs(np.asarray(s, dtype=float), z)
    if obs.shape[-1] != skill_policy.obs_dim:
        raise ConfigError(f"skill policy expects {skill_policy.obs_dim} inputs, got {obs.shape[-1]}")
    return skill_policy.net(obs)  # mode of the Gaussian head


class SkillControlledEnv:
    """Exposes a goal env whose action is a skill; a frozen skill policy does the low-level control.

    The meta-policy acts on the full goal observation ``[s; s_g]`` and its
    action is mapped through :func:`skill_from_meta`.
    """

    def __init__(self, env, skill_policy: Policy, prior: SkillPrior):
        base = env.spec
        if not base.goal:
            raise ConfigError("meta-control needs a goal-conditioned environment")
        if skill_policy.obs_dim != base.base_dim + prior.n_z:
            raise ConfigError(
                f"skill policy takes {skill_policy.obs_dim} inputs; env state {base.base_dim} + skill {prior.n_z}")
        self.env = env
        self.skill_policy = skill_policy
        self.prior = prior
        self.spec = EnvSpec(base.name, base.state_dim, prior.n_z, prior.categorical,
                            base.time_limit, True, base.goal_dim)
        self._state = None
        self.last_z = None

    def reset(self, rng) -> np.ndarray:
        self._state = self.env.reset(rng)
        return self._state

    def step(self, meta_action) -> StepResult:
        z = skill_from_meta(meta_action, self.prior)
        self.last_z = z
        a = low_level_action(self.skill_policy, self._state[:self.spec.base_dim], z)
        res = self.env.step(a)
        self._state = res.next_state
        return res

    def position(self, state):
        return self.env.position(state)
