"""Skill priors and intrinsic bonuses.

The main reward scores each state by how isolated it is along its own skill
direction: states are encoded, projected onto the skill vector, and rewarded
with ``log(1 + mean distance to the xi nearest projected neighbours)``.
APT (full latent k-NN), RND and a visit-count bonus are provided as
baselines, with a streaming normalizer for mixing into task rewards.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma, gammaln

from . import _kernels
from .encoder import Encoder, encode
from .errors import ConfigError, ShapeError
from .nn import Adam, Mlp, mlp_init

DIAGNOSTICS: Counter = Counter()


@dataclass(frozen=True)
class SkillPrior:
    """``categorical`` over ``k`` one-hot skills, or ``continuous`` in ``n_z`` dims.

    Continuous skills are drawn on the unit sphere by default; ``mode="interval"``
    draws each component uniformly on ``[low, high]``.
    """

    kind: str
    n_z: int
    probs: tuple[float, ...] | None = None
    mode: str = "unit-sphere"
    low: float = -1.0
    high: float = 1.0

    def __post_init__(self):
        if self.n_z < 1:
            raise ConfigError("skill dimension must be at least 1")
        if self.kind == "categorical":
            probs = self.probs if self.probs is not None else (1.0 / self.n_z,) * self.n_z
            p = np.asarray(probs, dtype=float)
            if len(p) != self.n_z or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
                raise ConfigError(f"categorical probabilities must be {self.n_z} non-negative numbers summing to 1")
            object.__setattr__(self, "probs", tuple(float(x) for x in p))
        elif self.kind == "continuous":
            if self.mode not in ("unit-sphere", "interval"):
                raise ConfigError(f"unknown continuous skill mode {self.mode!r}")
            if self.mode == "interval" and not self.low < self.high:
                raise ConfigError("interval skills need low < high")
        else:
            raise ConfigError(f"unknown skill prior kind {self.kind!r}")

    @property
    def categorical(self) -> bool:
        return self.kind == "categorical"


@dataclass
class Skill:
    vector: np.ndarray
    index: int | None = None


def sample_skill(prior: SkillPrior, rng: np.random.Generator) -> Skill:
    if prior.categorical:
        idx = int(rng.choice(prior.n_z, p=prior.probs))
        v = np.zeros(prior.n_z)
        v[idx] = 1.0
        return Skill(v, idx)
    if prior.mode == "interval":
        return Skill(rng.uniform(prior.low, prior.high, prior.n_z))
    while True:
        g = rng.standard_normal(prior.n_z)
        norm = np.linalg.norm(g)
        if norm > 1e-12:
            return Skill(g / norm)


def conditioned_obs(s, z) -> np.ndarray:
    """Policy input ``[s; z]``; works row-wise on batches."""
    vec = z.vector if isinstance(z, Skill) else z
    return np.concatenate([np.asarray(s, dtype=float), np.asarray(vec, dtype=float)], axis=-1)


def project(phi_s, z) -> float:
    phi_s = np.asarray(phi_s, dtype=float)
    vec = np.asarray(z.vector if isinstance(z, Skill) else z, dtype=float)
    if phi_s.shape != vec.shape:
        raise ShapeError(f"latent {phi_s.shape} and skill {vec.shape} differ")
    acc = 0.0
    for a, b in zip(vec, phi_s):
        acc += a * b
    return acc


def knn_mean_dist(values, query_index: int, xi: int) -> float:
    """Mean distance from ``values[query_index]`` to its ``xi`` nearest other entries."""
    if xi < 1:
        raise ConfigError("xi must be >= 1")
    x = np.asarray(values, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if len(x) <= 1:
        return 0.0
    d = np.sqrt(np.sum((x - x[query_index]) ** 2, axis=1))
    d = np.delete(d, query_index)
    k = min(xi, len(d))
    near = np.sort(d, kind="stable")[:k]
    acc = 0.0
    for v in near:
        acc += v
    return acc / k


def _check_xi(xi: int) -> None:
    if xi < 1:
        raise ConfigError("xi must be >= 1")


def reward_cim(enc: Encoder, states, z, xi: int, skill_index=None) -> np.ndarray:
    """Projected k-NN sparsity reward for each ``(state, skill)`` row.

    Every state in the batch is a candidate neighbour, projected onto the
    anchor's own skill; with ``skill_index`` (categorical skills) candidates
    are restricted to states collected under the same index.
    """
    _check_xi(xi)
    states = np.atleast_2d(np.asarray(states, dtype=float))
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if len(states) == 0:
        return np.zeros(0)
    phi = encode(enc, states)
    if phi.shape != z.shape:
        raise ShapeError(f"latents {phi.shape} and skills {z.shape} differ")
    group = np.zeros(len(states), dtype=np.int64) if skill_index is None else np.asarray(skill_index)
    nearest, counts = _kernels.projected_neighbours(phi, z, group, xi)
    DIAGNOSTICS["isolated_anchors"] += int(np.sum(counts == 0))
    return np.log1p(_kernels.mean_of_nearest(nearest, counts))


def reward_apt(enc: Encoder, states, xi: int) -> np.ndarray:
    """``log(1 + mean distance to the xi nearest latents)`` over the batch."""
    _check_xi(xi)
    states = np.atleast_2d(np.asarray(states, dtype=float))
    if len(states) == 0:
        return np.zeros(0)
    phi = encode(enc, states)
    nearest, counts = _kernels.euclidean_neighbours(phi, xi)
    DIAGNOSTICS["isolated_anchors"] += int(np.sum(counts == 0))
    return np.log1p(_kernels.mean_of_nearest(nearest, counts))


def knn_entropy(samples, k: int) -> float:
    """Kozachenko-Leonenko differential entropy estimate (nats).

    ``psi(N) - psi(k) + log V_d + d * mean(log eps_k)`` where ``eps_k`` is the
    distance to the k-th nearest neighbour and ``V_d`` the unit-ball volume.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    if not 1 <= k < n:
        raise ConfigError(f"need 1 <= k < number of samples, got k={k}, n={n}")
    nearest, _ = _kernels.euclidean_neighbours(x, k)
    eps = nearest[:, k - 1]
    log_vd = 0.5 * d * math.log(math.pi) - gammaln(0.5 * d + 1.0)
    return float(digamma(n) - digamma(k) + log_vd + d * np.mean(np.log(eps)))


class Rnd:
    """Random network distillation: squared error of a trained predictor against a fixed random target."""

    def __init__(self, state_dim: int, hidden: int = 64, out_dim: int = 16, lr: float = 1e-3, seed: int = 0):
        self.target = mlp_init([state_dim, hidden, out_dim], seed)
        self.predictor = mlp_init([state_dim, hidden, out_dim], seed + 1)
        self.opt = Adam(self.predictor.parameters(), lr=lr)

    def reward(self, states) -> np.ndarray:
        return reward_rnd(self.predictor, self.target, states)

    def update(self, states, n_steps: int = 1) -> float:
        return rnd_update(self, states, n_steps)


def reward_rnd(predictor: Mlp, target: Mlp, states) -> np.ndarray | float:
    states = np.asarray(states, dtype=float)
    if states.shape[-1] != predictor.in_dim or predictor.dims != target.dims:
        raise ShapeError("predictor, target and states disagree on shapes")
    err = predictor(states) - target(states)
    return np.sum(err * err, axis=-1)


def rnd_update(rnd: Rnd, states, n_steps: int = 1) -> float:
    states = np.atleast_2d(np.asarray(states, dtype=float))
    target = rnd.target(states)
    loss = 0.0
    for _ in range(n_steps):
        out, cache = rnd.predictor.forward(states)
        err = out - target
        loss = float(np.mean(np.sum(err * err, axis=1)))
        rnd.opt.zero_grad()
        rnd.predictor.backward(cache, 2.0 * err / len(states))
        rnd.opt.step()
    return loss


@dataclass
class CountTable:
    """Visit counts over discretized states; ``cell`` maps a state to a hashable key."""

    cell_size: float = 1.0
    counts: dict = field(default_factory=dict)

    def key(self, s) -> tuple:
        return tuple(np.floor(np.asarray(s, dtype=float) / self.cell_size).astype(int).tolist())


def reward_count(table: CountTable, s) -> float:
    """``1/sqrt(n + 1)`` for the current count ``n``, then count the visit."""
    k = table.key(s)
    n = table.counts.get(k, 0)
    table.counts[k] = n + 1
    return 1.0 / math.sqrt(n + 1)


@dataclass
class RewardStats:
    """Streaming mean and variance (Chan et al. parallel merge)."""

    mean: float = 0.0
    m2: float = 0.0
    count: int = 0

    @property
    def var(self) -> float:
        return self.m2 / self.count if self.count > 0 else 0.0

    def update(self, values) -> None:
        x = np.asarray(values, dtype=float).ravel()
        if x.size == 0:
            return
        b_mean = float(x.mean())
        b_m2 = float(np.sum((x - b_mean) ** 2))
        n = self.count + x.size
        delta = b_mean - self.mean
        self.mean += delta * x.size / n
        self.m2 += b_m2 + delta * delta * self.count * x.size / n
        self.count = n


def normalize(stats: RewardStats, rewards) -> np.ndarray:
    """Fold ``rewards`` into ``stats`` and divide by the running std (mean kept)."""
    r = np.asarray(rewards, dtype=float)
    stats.update(r)
    return r / max(math.sqrt(stats.var), 1e-8)
