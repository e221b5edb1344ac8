"""Skill-conditioned actor-critic, rollout collection, GAE and PPO."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError
from .intrinsic import Skill, SkillPrior, conditioned_obs, sample_skill
from .nn import Adam, Mlp, ParamTensor, mlp_init

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
_LOG_2PI = math.log(2.0 * math.pi)


class Policy:
    """Actor (diagonal Gaussian or categorical head) plus a separate value net."""

    def __init__(self, net: Mlp, value_net: Mlp, discrete: bool, log_std: ParamTensor | None = None):
        self.net = net
        self.value_net = value_net
        self.discrete = discrete
        if not discrete and log_std is None:
            log_std = ParamTensor(np.zeros(net.out_dim))
        self.log_std = log_std

    @property
    def obs_dim(self) -> int:
        return self.net.in_dim

    def parameters(self) -> list[ParamTensor]:
        ps = self.net.parameters() + self.value_net.parameters()
        return ps + ([self.log_std] if self.log_std is not None else [])

    def std(self) -> np.ndarray:
        return np.exp(np.clip(self.log_std.values, LOG_STD_MIN, LOG_STD_MAX))

    def value(self, obs) -> np.ndarray:
        return self.value_net(obs)[..., 0]

    def named_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = self.net.named_arrays(prefix + "pi.")
        out.update(self.value_net.named_arrays(prefix + "v."))
        if self.log_std is not None:
            out[prefix + "log_std"] = self.log_std.values
        return out

    def load_named(self, tensors: dict, prefix: str) -> None:
        self.net.load_named(tensors, prefix + "pi.")
        self.value_net.load_named(tensors, prefix + "v.")
        if self.log_std is not None:
            self.log_std.assign(tensors[prefix + "log_std"])


def make_policy(obs_dim: int, action_dim: int, discrete: bool, hidden=(64, 64), seed: int = 0,
                init_log_std: float = 0.0) -> Policy:
    net = mlp_init([obs_dim, *hidden, action_dim], seed, output_gain=0.01)
    value_net = mlp_init([obs_dim, *hidden, 1], seed + 7919, output_gain=1.0)
    log_std = None if discrete else ParamTensor(np.full(action_dim, float(init_log_std)))
    return Policy(net, value_net, discrete, log_std)


def policy_from_tensors(tensors: dict, prefix: str) -> Policy:
    """Rebuild a policy saved with :meth:`Policy.named_arrays` (shapes come from the tensors)."""
    def net(tag):
        layers, i = [], 0
        while f"{prefix}{tag}.l{i}.weight" in tensors:
            layers.append((tensors[f"{prefix}{tag}.l{i}.weight"], tensors[f"{prefix}{tag}.l{i}.bias"]))
            i += 1
        if not layers:
            raise ConfigError(f"checkpoint has no tensors under {prefix}{tag}.")
        return Mlp.from_arrays(layers)

    log_std = tensors.get(prefix + "log_std")
    return Policy(net("pi"), net("v"), log_std is None,
                  None if log_std is None else ParamTensor(log_std))


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    top = logits.max(axis=-1, keepdims=True)
    shifted = logits - top
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def log_prob(pol: Policy, out: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Log-density of ``actions`` under the head output ``out`` (batched)."""
    if pol.discrete:
        ls = _log_softmax(out)
        return np.take_along_axis(ls, actions.astype(np.int64)[:, None], axis=1)[:, 0]
    log_std = np.clip(pol.log_std.values, LOG_STD_MIN, LOG_STD_MAX)
    u = (actions - out) / np.exp(log_std)
    return np.sum(-0.5 * u * u - log_std - 0.5 * _LOG_2PI, axis=1)


def policy_act(pol: Policy, obs, rng: np.random.Generator, deterministic: bool = False):
    """Sample (or take the mode of) the action; returns ``(action, logp, value)``.

    Accepts one observation or a batch.
    """
    obs = np.asarray(obs, dtype=float)
    single = obs.ndim == 1
    ob = obs[None] if single else obs
    out = pol.net(ob)
    if not np.all(np.isfinite(out)):
        raise NumericError("policy network produced non-finite output")
    if pol.discrete:
        if deterministic:
            a = out.argmax(axis=1)
        else:
            p = np.exp(_log_softmax(out))
            u = rng.random(len(ob))
            a = np.minimum((p.cumsum(axis=1) < u[:, None]).sum(axis=1), out.shape[1] - 1)
    else:
        a = out.copy() if deterministic else out + pol.std() * rng.standard_normal(out.shape)
    logp = log_prob(pol, out, a)
    v = pol.value(ob)
    if single:
        return a[0], float(logp[0]), float(v[0])
    return a, logp, v


# ------------------------------------------------------------------ rollouts

@dataclass
class RolloutBatch:
    """One iteration of experience, stored time-major as ``(steps, n_envs, ...)``."""

    obs: np.ndarray
    states: np.ndarray
    next_states: np.ndarray
    z: np.ndarray
    skill_index: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    values: np.ndarray
    next_values: np.ndarray
    r_e: np.ndarray
    r_i: np.ndarray
    terminated: np.ndarray
    truncated: np.ndarray
    episode_returns: list = field(default_factory=list)
    episode_success: list = field(default_factory=list)
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None
    rewards: np.ndarray | None = None

    def __len__(self) -> int:
        return self.r_e.size

    def flat(self, name: str) -> np.ndarray:
        a = getattr(self, name)
        return a.reshape(a.shape[0] * a.shape[1], *a.shape[2:])


class RolloutCollector:
    """Steps ``envs`` in lockstep; episodes carry over between calls.

    A new skill is drawn from ``prior`` at every episode start (none when
    ``prior`` is None). ``r_i`` is left at zero: intrinsic rewards need the whole
    batch and are filled in afterwards. ``obs_dims`` keeps only the leading
    state components in the policy input (skill policies ignore goals).
    """

    def __init__(self, envs, pol: Policy, prior: SkillPrior | None, rng: np.random.Generator,
                 obs_dims: int | None = None):
        self.envs = list(envs)
        self.obs_dims = obs_dims
        self.pol = pol
        self.prior = prior
        self.rng = rng
        self.states = [env.reset(rng) for env in self.envs]
        self.skills = [self._skill() for _ in self.envs]
        self.ep_return = np.zeros(len(self.envs))
        self.env_steps = 0

    def _skill(self) -> Skill | None:
        return sample_skill(self.prior, self.rng) if self.prior is not None else None

    def _obs(self, states, skills) -> np.ndarray:
        s = np.asarray(states)
        if self.obs_dims is not None:
            s = s[..., :self.obs_dims]
        if self.prior is None:
            return s
        return conditioned_obs(s, np.stack([k.vector for k in skills]))

    def collect(self, n_steps: int) -> RolloutBatch:
        n_env = len(self.envs)
        if n_steps % n_env:
            raise ConfigError(f"rollout length {n_steps} is not a multiple of {n_env} environments")
        T = n_steps // n_env
        sdim = len(self.states[0])
        nz = self.prior.n_z if self.prior is not None else 0
        adim = self.envs[0].spec.action_dim
        b = RolloutBatch(
            obs=np.zeros((T, n_env, (self.obs_dims or sdim) + nz)), states=np.zeros((T, n_env, sdim)),
            next_states=np.zeros((T, n_env, sdim)), z=np.zeros((T, n_env, nz)),
            skill_index=np.full((T, n_env), -1, dtype=np.int64),
            actions=np.zeros((T, n_env)) if self.pol.discrete else np.zeros((T, n_env, adim)),
            logp=np.zeros((T, n_env)), values=np.zeros((T, n_env)), next_values=np.zeros((T, n_env)),
            r_e=np.zeros((T, n_env)), r_i=np.zeros((T, n_env)),
            terminated=np.zeros((T, n_env), dtype=bool), truncated=np.zeros((T, n_env), dtype=bool),
        )
        for t in range(T):
            obs = self._obs(self.states, self.skills)
            a, logp, v = policy_act(self.pol, obs, self.rng)
            b.obs[t], b.states[t], b.actions[t], b.logp[t], b.values[t] = obs, self.states, a, logp, v
            if nz:
                b.z[t] = [k.vector for k in self.skills]
                b.skill_index[t] = [-1 if k.index is None else k.index for k in self.skills]
            boot = []
            for e, env in enumerate(self.envs):
                try:
                    res = env.step(a[e])
                except Exception as exc:
                    raise type(exc)(f"env {e} failed at rollout step {t}: {exc}") from exc
                b.next_states[t, e] = res.next_state
                b.r_e[t, e] = res.reward
                b.terminated[t, e], b.truncated[t, e] = res.terminated, res.truncated
                self.ep_return[e] += res.reward
                if res.done:
                    b.episode_returns.append(float(self.ep_return[e]))
                    b.episode_success.append(bool(res.terminated and res.reward > 0))
                    self.ep_return[e] = 0.0
                    if res.truncated or t == T - 1:
                        boot.append((e, res.next_state, self.skills[e]))
                    self.states[e] = env.reset(self.rng)
                    self.skills[e] = self._skill()
                else:
                    self.states[e] = res.next_state
                    if t == T - 1:
                        boot.append((e, res.next_state, self.skills[e]))
            if boot:
                idx = [e for e, _, _ in boot]
                vals = self.pol.value(self._obs([s for _, s, _ in boot], [k for _, _, k in boot]))
                b.next_values[t, idx] = vals
        self.env_steps += n_steps
        return b


def collect_rollouts(envs, pol: Policy, prior: SkillPrior | None, n_steps: int,
                     rng: np.random.Generator) -> RolloutBatch:
    """One-shot helper around :class:`RolloutCollector`."""
    if n_steps == 0:
        return RolloutCollector(envs, pol, prior, rng).collect(0) if envs else None
    return RolloutCollector(envs, pol, prior, rng).collect(n_steps)


def compute_gae(batch: RolloutBatch, gamma: float, lam: float, rewards=None) -> RolloutBatch:
    """Truncation-aware GAE over ``rewards`` (defaults to ``batch.r_e + batch.r_i``).

    Terminated steps do not bootstrap; truncated steps and the final step of
    the batch bootstrap from ``next_values``.
    """
    r = batch.r_e + batch.r_i if rewards is None else np.asarray(rewards, dtype=float)
    T = r.shape[0]
    adv = np.zeros_like(r)
    last = np.zeros(r.shape[1:])
    for t in range(T - 1, -1, -1):
        episode_end = batch.terminated[t] | batch.truncated[t]
        if t == T - 1:
            nv = batch.next_values[t]
        else:
            nv = np.where(batch.truncated[t], batch.next_values[t], batch.values[t + 1])
        delta = r[t] + gamma * nv * (~batch.terminated[t]) - batch.values[t]
        carry = np.where(episode_end, 0.0, last) if t < T - 1 else 0.0
        last = delta + gamma * lam * carry
        adv[t] = last
    batch.rewards = r
    batch.advantages = adv
    batch.returns = adv + batch.values
    return batch


# ------------------------------------------------------------------ PPO

@dataclass
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    epochs: int = 4
    minibatch: int = 256
    ent_coef: float = 0.003
    vf_coef: float = 0.5
    lr: float = 3e-4
    max_grad_norm: float | None = 0.5


def ppo_loss(pol: Policy, obs, actions, old_logp, adv, returns, cfg: PpoConfig, backward: bool = True):
    """Clipped surrogate + value regression - entropy bonus on one minibatch.

    ``adv`` is used as given (normalize beforehand). Returns
    ``(total, policy_loss, value_loss, entropy, clip_fraction)``.
    """
    n = len(obs)
    out, cache = pol.net.forward(obs)
    logp = log_prob(pol, out, actions)
    ratio = np.exp(logp - old_logp)
    clipped = np.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)
    s1, s2 = ratio * adv, clipped * adv
    pg_loss = -float(np.mean(np.minimum(s1, s2)))
    # gradient flows through the unclipped branch wherever it is the minimum
    active = s1 <= s2
    g_logp = np.where(active, -ratio * adv, 0.0) / n

    v, vcache = pol.value_net.forward(obs)
    err = v[:, 0] - returns
    v_loss = 0.5 * float(np.mean(err * err))

    if pol.discrete:
        ls = _log_softmax(out)
        p = np.exp(ls)
        ent_each = -np.sum(p * ls, axis=1)
        entropy = float(ent_each.mean())
    else:
        log_std = np.clip(pol.log_std.values, LOG_STD_MIN, LOG_STD_MAX)
        entropy = float(np.sum(log_std + 0.5 * (_LOG_2PI + 1.0)))

    total = pg_loss + cfg.vf_coef * v_loss - cfg.ent_coef * entropy
    clip_frac = float(np.mean(np.abs(ratio - 1.0) > cfg.clip))
    if backward:
        if pol.discrete:
            onehot = np.zeros_like(out)
            onehot[np.arange(n), actions.astype(np.int64)] = 1.0
            g_out = g_logp[:, None] * (onehot - p)
            # d(-c * mean H)/d logits, with dH/dlogits = -p (log p + H)
            g_out += cfg.ent_coef * p * (ls + ent_each[:, None]) / n
        else:
            std = np.exp(log_std)
            u = (actions - out) / std
            g_out = g_logp[:, None] * u / std
            inside = (pol.log_std.values >= LOG_STD_MIN) & (pol.log_std.values <= LOG_STD_MAX)
            g_ls = np.sum(g_logp[:, None] * (u * u - 1.0), axis=0) - cfg.ent_coef
            pol.log_std.grad += np.where(inside, g_ls, 0.0)
        pol.net.backward(cache, g_out)
        pol.value_net.backward(vcache, (cfg.vf_coef * err / n)[:, None])
    return total, pg_loss, v_loss, entropy, clip_frac


def ppo_update(pol: Policy, batch: RolloutBatch, cfg: PpoConfig, opt: Adam,
               rng: np.random.Generator) -> dict:
    """Several epochs of minibatch PPO over ``batch`` (needs :func:`compute_gae` first)."""
    obs = batch.flat("obs")
    actions = batch.flat("actions")
    old_logp = batch.flat("logp")
    adv_all = batch.advantages.reshape(-1)
    ret_all = batch.returns.reshape(-1)
    n = len(obs)
    mb = min(cfg.minibatch, n)
    stats = {"policy_loss": [], "value_loss": [], "entropy": [], "clip_fraction": []}
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for lo in range(0, n - mb + 1, mb):
            idx = perm[lo:lo + mb]
            adv = adv_all[idx]
            adv = (adv - adv.mean()) / max(adv.std(), 1e-8)
            opt.zero_grad()
            total, pg, vl, ent, cf = ppo_loss(pol, obs[idx], actions[idx], old_logp[idx], adv, ret_all[idx], cfg)
            if not math.isfinite(total):
                opt.zero_grad()
                raise NumericError("non-finite PPO loss")
            opt.step()
            for key, val in zip(stats, (pg, vl, ent, cf)):
                stats[key].append(val)
    return {k: float(np.mean(v)) if v else 0.0 for k, v in stats.items()}
