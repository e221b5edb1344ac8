"""Training and evaluation entry points used by the CLI.

A run directory holds ``config.cfg`` (the resolved configuration),
``checkpoint.ckpt`` (all network tensors) and ``metrics.csv``.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .encoder import AlignmentBatch, Encoder, EncoderTrainer, identity_encoder, make_encoder
from .eim import (CoefficientState, Schedule, SkillControlledEnv, adaptive_step, mix_rewards,
                  tau_schedule)
from .envs import make_env
from .errors import ConfigError
from .evaluation import (Trajectory, best_rotation_directionality, export_traj_csv, read_traj_csv,
                         render_svg, skill_directionality, state_coverage)
from .intrinsic import (CountTable, RewardStats, Rnd, SkillPrior, conditioned_obs, normalize,
                        reward_apt, reward_cim, reward_count)
from .nn import Adam, load_checkpoint, save_checkpoint
from .rl import (Policy, PpoConfig, RolloutCollector, compute_gae, make_policy, policy_act,
                 policy_from_tensors, ppo_update)

log = logging.getLogger(__name__)

CKPT_NAME = "checkpoint.ckpt"
CONFIG_NAME = "config.cfg"
METRICS_NAME = "metrics.csv"
METRIC_COLUMNS = ("iteration", "env_steps", "mean_episode_return_extrinsic", "mean_intrinsic_reward",
                  "tau", "lambda", "policy_loss", "value_loss", "entropy", "clip_fraction",
                  "encoder_loss", "success_rate", "episodes")


def make_prior(cfg: RunConfig) -> SkillPrior | None:
    sk = cfg.skill
    if sk.prior == "none":
        return None
    return SkillPrior(sk.prior, sk.n_z, mode=sk.mode, low=sk.low, high=sk.high)


def env_kwargs(cfg: RunConfig) -> dict:
    e = cfg.env
    return {"time_limit": e.time_limit, "grid_size": e.grid_size, "goal_radius": e.goal_radius,
            "cell_size": e.cell_size}


def _seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


@dataclass
class SkillBundle:
    """A frozen skill policy loaded from a pretraining run."""

    policy: Policy
    prior: SkillPrior
    cfg: RunConfig


def load_run(ckpt_path) -> tuple[RunConfig, dict]:
    ckpt_path = Path(ckpt_path)
    if ckpt_path.is_dir():
        ckpt_path = ckpt_path / CKPT_NAME
    cfg_path = ckpt_path.parent / CONFIG_NAME
    if not ckpt_path.exists() or not cfg_path.exists():
        raise ConfigError(f"{ckpt_path}: checkpoint or its {CONFIG_NAME} is missing")
    return load_config(cfg_path).validate(), load_checkpoint(ckpt_path)


def _policy_for(cfg: RunConfig, obs_dim: int, action_dim: int, discrete: bool, seed: int) -> Policy:
    return make_policy(obs_dim, action_dim, discrete, cfg.rl.hidden, seed, cfg.rl.init_log_std)


def load_skills(path) -> SkillBundle:
    cfg, tensors = load_run(path)
    prior = make_prior(cfg)
    if prior is None:
        raise ConfigError(f"{path}: run has no skill prior; cannot serve as frozen skills")
    return SkillBundle(policy_from_tensors(tensors, "policy."), prior, cfg)


class Trainer:
    """One training run: ``mode`` is ``pretrain`` (intrinsic only) or ``eim`` (mixed)."""

    def __init__(self, cfg: RunConfig, mode: str, skills: SkillBundle | None = None):
        self.cfg = cfg.validate()
        self.mode = mode
        s_env, s_pol, s_enc, s_ppo, s_rnd, s_col = _seeds(cfg.run.seed, 6)
        ekw = env_kwargs(cfg)
        envs = [make_env(cfg.env.name, ekw, cfg.run.seed) for _ in range(cfg.env.n_envs)]
        self.skills = skills
        if cfg.eim.meta:
            if skills is None:
                raise ConfigError("meta-controller training needs frozen skills (--skills or eim.skills)")
            envs = [SkillControlledEnv(e, skills.policy, skills.prior) for e in envs]
            self.prior = None
        else:
            self.prior = make_prior(cfg)
        self.spec = envs[0].spec
        base_dim = self.spec.base_dim
        nz = self.prior.n_z if self.prior is not None else 0
        # skill-conditioned policies see the base state only, so they can be reused under any goal
        pol_in = base_dim if self.prior is not None else self.spec.state_dim
        self.policy = _policy_for(cfg, pol_in + nz, self.spec.action_dim, self.spec.discrete, s_pol)
        self.opt = Adam(self.policy.parameters(), lr=cfg.rl.lr, max_grad_norm=cfg.rl.max_grad_norm or None)
        self.ppo_cfg = PpoConfig(cfg.rl.gamma, cfg.rl.gae_lambda, cfg.rl.clip, cfg.rl.epochs, cfg.rl.minibatch,
                                 cfg.rl.ent_coef, cfg.rl.vf_coef, cfg.rl.lr, cfg.rl.max_grad_norm or None)
        self.ppo_rng = np.random.default_rng(s_ppo)
        self.collector = RolloutCollector(envs, self.policy, self.prior, np.random.default_rng(s_col),
                                          base_dim if self.prior is not None else None)

        kind = cfg.intrinsic.kind
        self.encoder: Encoder | None = None
        self.enc_trainer: EncoderTrainer | None = None
        if kind in ("cim", "apt"):
            if cfg.encoder.identity or self.prior is None:
                self.encoder = identity_encoder(base_dim)
            else:
                self.encoder = make_encoder(base_dim, nz, cfg.encoder.hidden, s_enc)
                self.enc_trainer = EncoderTrainer(self.encoder, cfg.encoder.loss, cfg.encoder.lr, s_enc,
                                                  cfg.encoder.lsd_weight, cfg.encoder.cic_hidden)
            if kind == "cim" and self.encoder.n_z != nz:
                raise ConfigError("cim reward needs an encoder emitting skill.n_z dims (set encoder.identity = false)")
        self.rnd = Rnd(base_dim, seed=s_rnd) if kind == "rnd" else None
        self.counts = CountTable(self._count_cell()) if kind == "count" else None
        self.stats = RewardStats()
        norm = cfg.intrinsic.normalize
        self.normalize = (mode == "eim") if norm == "auto" else norm == "true"
        self.coef = CoefficientState(lam=cfg.eim.lambda0, eta=cfg.eim.eta)
        self.schedule = Schedule(cfg.eim.coefficient, max(cfg.eim.horizon, 1))
        self.buffer: list[tuple] = []
        self.iteration = 0
        self.last_je: float | None = None
        self.n_iterations = cfg.run.total_steps // cfg.rl.rollout_steps
        if cfg.eim.horizon == 0:
            self.schedule = Schedule(cfg.eim.coefficient, max(self.n_iterations, 1))

    def _count_cell(self) -> float:
        if self.cfg.env.name.startswith("gridworld"):
            return 1.0 / (self.cfg.env.grid_size - 1)
        return self.cfg.eval.bin_size

    # ------------------------------------------------------------ rewards
    def intrinsic_rewards(self, batch) -> np.ndarray:
        cfg = self.cfg
        kind = cfg.intrinsic.kind
        T, E = batch.r_e.shape
        nxt = batch.flat("next_states")[:, :self.spec.base_dim]
        z = batch.flat("z")
        idx = batch.flat("skill_index")
        if kind == "none":
            return np.zeros((T, E))
        if kind == "rnd":
            r = self.rnd.reward(nxt)
            self.rnd.update(nxt, cfg.intrinsic.rnd_steps)
            return r.reshape(T, E)
        if kind == "count":
            return np.array([reward_count(self.counts, s) for s in nxt]).reshape(T, E)
        frozen = self.encoder.copy()
        n_new = len(nxt)
        if cfg.intrinsic.candidates == "buffer":
            self.buffer.append((nxt, z, idx))
            total = 0
            keep = []
            for item in reversed(self.buffer):
                if total >= cfg.intrinsic.buffer_size:
                    break
                keep.append(item)
                total += len(item[0])
            self.buffer = keep[::-1]
            nxt = np.concatenate([b[0] for b in self.buffer])
            z = np.concatenate([b[1] for b in self.buffer])
            idx = np.concatenate([b[2] for b in self.buffer])
        if kind == "cim":
            group = idx if self.prior.categorical else None
            r = reward_cim(frozen, nxt, z, cfg.intrinsic.xi, group)
        else:
            r = reward_apt(frozen, nxt, cfg.intrinsic.xi)
        return r[-n_new:].reshape(T, E)

    # ------------------------------------------------------------ loop
    def step(self) -> dict:
        cfg = self.cfg
        batch = self.collector.collect(cfg.rl.rollout_steps)
        r_i_raw = self.intrinsic_rewards(batch)
        r_i = normalize(self.stats, r_i_raw) if self.normalize else r_i_raw
        batch.r_i = r_i

        enc_loss = 0.0
        if self.enc_trainer is not None:
            ab = AlignmentBatch(batch.flat("states")[:, :self.spec.base_dim],
                                batch.flat("next_states")[:, :self.spec.base_dim], batch.flat("z"),
                                batch.flat("skill_index") if self.prior.categorical else None)
            enc_loss = self.enc_trainer.update(ab, cfg.encoder.n_steps, cfg.encoder.batch_size)

        je = float(np.mean(batch.episode_returns)) if batch.episode_returns else None
        if je is not None:
            self.last_je = je
        if self.mode == "pretrain":
            tau = 1.0
            rewards = r_i
        else:
            if self.schedule.kind == "adaptive":
                tau = adaptive_step(self.coef, je)
            else:
                tau = tau_schedule(self.schedule, self.iteration)
                self.coef.tau = tau
            rewards = mix_rewards(batch.r_e, r_i, tau)
        compute_gae(batch, cfg.rl.gamma, cfg.rl.gae_lambda, rewards)
        ppo = ppo_update(self.policy, batch, self.ppo_cfg, self.opt, self.ppo_rng)
        self.iteration += 1
        row = {
            "iteration": self.iteration,
            "env_steps": self.collector.env_steps,
            "mean_episode_return_extrinsic": self.last_je if self.last_je is not None else 0.0,
            "mean_intrinsic_reward": float(np.mean(r_i_raw)),
            "tau": tau,
            "lambda": self.coef.lam,
            **ppo,
            "encoder_loss": enc_loss,
            "success_rate": float(np.mean(batch.episode_success)) if batch.episode_success else 0.0,
            "episodes": len(batch.episode_returns),
        }
        log.info("iter %d steps %d J_E %.3f r_I %.4f tau %.4f", row["iteration"], row["env_steps"],
                 row["mean_episode_return_extrinsic"], row["mean_intrinsic_reward"], tau)
        return row

    def tensors(self) -> dict[str, np.ndarray]:
        out = self.policy.named_arrays("policy.")
        if self.encoder is not None:
            out.update(self.encoder.net.named_arrays("encoder."))
        if self.rnd is not None:
            out.update(self.rnd.predictor.named_arrays("rnd.predictor."))
            out.update(self.rnd.target.named_arrays("rnd.target."))
        if self.skills is not None and self.cfg.eim.meta:
            out.update(self.skills.policy.named_arrays("skill_policy."))
        return out

    def run(self, out_dir) -> list[dict]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / CONFIG_NAME).write_text(self.cfg.dumps())
        rows = []
        with open(out / METRICS_NAME, "w") as fh:
            fh.write("# schema=1\n" + ",".join(METRIC_COLUMNS) + "\n")
            for _ in range(self.n_iterations):
                row = self.step()
                rows.append(row)
                fh.write(",".join(_fmt(row[c]) for c in METRIC_COLUMNS) + "\n")
                fh.flush()
        save_checkpoint(out / CKPT_NAME, self.tensors())
        return rows


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def run_pretrain(cfg: RunConfig, out_dir) -> list[dict]:
    return Trainer(cfg, "pretrain").run(out_dir)


def run_eim(cfg: RunConfig, out_dir, skills_path=None) -> list[dict]:
    skills = None
    if cfg.eim.meta:
        path = skills_path or cfg.eim.skills
        if not path:
            raise ConfigError("meta-controller training needs --skills or eim.skills")
        cfg.eim.skills = str(path)
        skills = load_skills(path)
        cfg.skill = skills.cfg.skill  # recorded so the meta checkpoint knows its skill prior
    return Trainer(cfg, "eim", skills).run(out_dir)


# ------------------------------------------------------------------ evaluation

def eval_skills(cfg: RunConfig, n: int) -> list[np.ndarray]:
    prior = make_prior(cfg)
    if prior.categorical:
        return [np.eye(prior.n_z)[i % prior.n_z] for i in range(n)]
    if prior.n_z == 2:
        grid = [np.array([math.cos(a), math.sin(a)]) for a in 2 * math.pi * np.arange(16) / 16]
    else:
        g = np.random.default_rng(12345).standard_normal((16, prior.n_z))
        grid = list(g / np.linalg.norm(g, axis=1, keepdims=True))
    return [grid[i % len(grid)] for i in range(n)]


def rollout_episode(env, policy: Policy, rng, z=None, deterministic: bool = True, skill_env=None):
    """One episode; returns ``(positions, return, success)``."""
    s = env.reset(rng)
    positions = [env.position(s)]
    ret, success = 0.0, False
    while True:
        obs = s if z is None else conditioned_obs(s[:env.spec.base_dim], z)
        a, _, _ = policy_act(policy, obs, rng, deterministic)
        res = env.step(a)
        ret += res.reward
        s = res.next_state
        positions.append(env.position(s))
        if res.done:
            success = res.terminated and res.reward > 0
            return np.asarray(positions), ret, success


def evaluate(cfg: RunConfig, tensors: dict, episodes: int, deterministic: bool = True,
             seed_offset: int = 10_000) -> dict:
    """Roll out a trained checkpoint and compute coverage, directionality and success."""
    rng = np.random.default_rng(cfg.run.seed + seed_offset)
    env = make_env(cfg.env.name, env_kwargs(cfg))
    trajs = []
    prior = make_prior(cfg)
    pol = policy_from_tensors(tensors, "policy.")
    if cfg.eim.meta:
        menv = SkillControlledEnv(env, policy_from_tensors(tensors, "skill_policy."), prior)
        for _ in range(episodes):
            pos, ret, ok = rollout_episode(menv, pol, rng, None, deterministic)
            trajs.append(Trajectory(pos, menv.last_z if menv.last_z is not None else np.zeros(prior.n_z),
                                    seed=cfg.run.seed, success=ok, ret=ret))
    else:
        skills = eval_skills(cfg, episodes) if prior is not None else [None] * episodes
        for i, z in enumerate(skills):
            pos, ret, ok = rollout_episode(env, pol, rng, z, deterministic)
            idx = int(np.argmax(z)) if prior is not None and prior.categorical else None
            trajs.append(Trajectory(pos, z if z is not None else np.zeros(0), idx, cfg.run.seed, ok, ret))
    cov = state_coverage(trajs, cfg.eval.bin_size)
    summary = {
        "episodes": episodes,
        "coverage_bins": cov.occupied_bins,
        "bin_size": cov.bin_size,
        "success_rate": float(np.mean([t.success for t in trajs])),
        "mean_return": float(np.mean([t.ret for t in trajs])),
    }
    if prior is not None and not cfg.eim.meta and prior.n_z >= 2:
        d = skill_directionality(trajs)
        summary["directionality"] = d.mean_cosine
        summary["directionality_skipped"] = d.n_skipped
        summary["directionality_best_rotation"] = best_rotation_directionality(trajs)
    summary["trajectories"] = trajs
    return summary


def run_eval(ckpt_path, episodes: int | None = None, out_dir=None, deterministic: bool = True) -> dict:
    cfg, tensors = load_run(ckpt_path)
    n = episodes or cfg.eval.episodes
    summary = evaluate(cfg, tensors, n, deterministic)
    trajs = summary.pop("trajectories")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(json.dumps(summary, indent=2) + "\n")
        export_traj_csv(trajs, out / "trajectories.csv")
        render_svg(trajs, out / "trajectories.svg")
    summary["trajectories"] = trajs
    return summary


def run_plot(csv_path, out_svg) -> None:
    render_svg(read_traj_csv(csv_path), out_svg)
