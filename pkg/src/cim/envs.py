"""Desk-scale episodic environments.

``point2d``
    Damped point mass in an open plane, state ``(x, y, vx, vy)``, no task
    reward. Stand-in for x-y locomotion skill discovery.
``gridworld`` / ``gridworld-sparse``
    Four-action grid with the start and goal in opposite corners. The dense
    variant pays -0.01 per step and +1 at the goal; the sparse one only +1.
``umaze``
    The point mass inside a U-shaped corridor with a goal cell sampled per
    episode; observation ``(x, y, vx, vy, gx, gy)``.

All environments share ``reset(rng) -> state`` and ``step(action) -> StepResult``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError

ENV_NAMES = ("point2d", "gridworld", "gridworld-sparse", "umaze")


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_dim: int
    discrete: bool
    time_limit: int
    goal: bool = False
    goal_dim: int = 0

    @property
    def base_dim(self) -> int:
        """Width of the state without the appended goal."""
        return self.state_dim - self.goal_dim


@dataclass
class StepResult:
    next_state: np.ndarray
    reward: float
    terminated: bool
    truncated: bool

    @property
    def done(self) -> bool:
        return self.terminated or self.truncated


class _Episodic:
    spec: EnvSpec

    def __init__(self):
        self.t = 0
        self._done = True

    def _begin(self):
        self.t = 0
        self._done = False

    def _advance(self, state, reward, terminated) -> StepResult:
        if self._done:
            raise ContractError(f"{self.spec.name}: step() called on a finished episode; call reset()")
        self.t += 1
        truncated = (not terminated) and self.t >= self.spec.time_limit
        self._done = terminated or truncated
        return StepResult(state, float(reward), bool(terminated), bool(truncated))

    def position(self, state) -> np.ndarray:
        """2-D location used for coverage and plots."""
        return np.asarray(state, dtype=float)[..., :2]


class Point2D(_Episodic):
    def __init__(self, time_limit: int = 200, jitter: float = 0.01):
        super().__init__()
        self.spec = EnvSpec("point2d", 4, 2, False, time_limit)
        self.jitter = jitter
        self.pos = np.zeros(2)
        self.vel = np.zeros(2)

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self._begin()
        self.pos = rng.normal(0.0, self.jitter, 2)
        self.vel = np.zeros(2)
        return self.state()

    def state(self) -> np.ndarray:
        return np.concatenate([self.pos, self.vel])

    def step(self, action) -> StepResult:
        a = np.clip(np.asarray(action, dtype=float), -1.0, 1.0)
        self.vel = 0.9 * self.vel + 0.1 * a
        self.pos = self.pos + 0.1 * self.vel
        return self._advance(self.state(), 0.0, False)


class GridWorld(_Episodic):
    MOVES = np.array([[1, 0], [-1, 0], [0, -1], [0, 1]])  # up, down, left, right as (row, col)

    def __init__(self, size: int = 10, sparse: bool = False, time_limit: int = 100,
                 goal: tuple[int, int] | None = None):
        super().__init__()
        if size < 2:
            raise ConfigError("grid size must be at least 2")
        self.size = size
        self.sparse = sparse
        self.spec = EnvSpec("gridworld-sparse" if sparse else "gridworld", 2, 4, True, time_limit)
        self.start = np.array([0, 0])
        self.goal = np.array(goal if goal is not None else (size - 1, size - 1))
        self.cell = self.start.copy()

    def state(self) -> np.ndarray:
        return self.cell / (self.size - 1.0)

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self._begin()
        self.cell = self.start.copy()
        return self.state()

    def step(self, action) -> StepResult:
        a = int(action)
        if not 0 <= a < 4:
            raise ContractError(f"gridworld action must be in 0..3, got {action}")
        self.cell = np.clip(self.cell + self.MOVES[a], 0, self.size - 1)
        at_goal = bool(np.all(self.cell == self.goal))
        if at_goal:
            reward = 1.0
        else:
            reward = 0.0 if self.sparse else -0.01
        return self._advance(self.state(), reward, at_goal)

    def success(self, result: StepResult) -> bool:
        return result.terminated


U_LAYOUT = np.array([
    [1, 1, 1, 1, 1],
    [1, 0, 0, 0, 1],
    [1, 1, 1, 0, 1],
    [1, 0, 0, 0, 1],
    [1, 1, 1, 1, 1],
])  # row 0 is the bottom (y grows with row index)


def _segment_hits_box(p, q, lo, hi) -> bool:
    """Liang-Barsky clip: does the closed segment p->q touch the closed box [lo, hi]?"""
    t0, t1 = 0.0, 1.0
    d = q - p
    for k in range(2):
        if d[k] == 0.0:
            if p[k] < lo[k] or p[k] > hi[k]:
                return False
            continue
        a = (lo[k] - p[k]) / d[k]
        b = (hi[k] - p[k]) / d[k]
        if a > b:
            a, b = b, a
        t0, t1 = max(t0, a), min(t1, b)
        if t0 > t1:
            return False
    return True


class UMaze(_Episodic):
    """Point mass in a U corridor; coordinates are shifted so the start is the origin."""

    def __init__(self, time_limit: int = 300, cell_size: float = 1.0, goal_radius: float = 0.5,
                 layout: np.ndarray = U_LAYOUT, start_cell: tuple[int, int] = (1, 1)):
        super().__init__()
        self.spec = EnvSpec("umaze", 6, 2, False, time_limit, goal=True, goal_dim=2)
        self.cell_size = cell_size
        self.goal_radius = goal_radius
        self.layout = np.asarray(layout)
        self.start_cell = tuple(start_cell)
        self.origin = (np.array(self.start_cell[::-1], dtype=float) + 0.5) * cell_size
        self.walls = [self._cell_box(r, c) for r, c in zip(*np.nonzero(self.layout))]
        free = [(int(r), int(c)) for r, c in zip(*np.nonzero(self.layout == 0))]
        self.goal_cells = [rc for rc in free if rc != self.start_cell]
        self.pos = np.zeros(2)
        self.vel = np.zeros(2)
        self.goal = np.zeros(2)

    def _cell_box(self, r, c):
        lo = np.array([c, r], dtype=float) * self.cell_size - self.origin
        return lo, lo + self.cell_size

    def cell_center(self, cell) -> np.ndarray:
        r, c = cell
        return (np.array([c, r], dtype=float) + 0.5) * self.cell_size - self.origin

    def state(self) -> np.ndarray:
        return np.concatenate([self.pos, self.vel, self.goal])

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self._begin()
        self.pos = np.zeros(2)
        self.vel = np.zeros(2)
        self.goal = self.cell_center(self.goal_cells[int(rng.integers(len(self.goal_cells)))])
        return self.state()

    def blocked(self, p, q) -> bool:
        return any(_segment_hits_box(p, q, lo, hi) for lo, hi in self.walls)

    def step(self, action) -> StepResult:
        a = np.clip(np.asarray(action, dtype=float), -1.0, 1.0)
        vel = 0.9 * self.vel + 0.1 * a
        # a blocked move slides along the wall: keep whichever axis is free
        for mask in ((1.0, 1.0), (1.0, 0.0), (0.0, 1.0)):
            v = vel * mask
            new = self.pos + 0.1 * v
            if not self.blocked(self.pos, new):
                self.pos, self.vel = new, v
                break
        else:
            self.vel = np.zeros(2)
        reached = bool(np.linalg.norm(self.pos - self.goal) < self.goal_radius)
        return self._advance(self.state(), 1.0 if reached else 0.0, reached)


def make_env(name: str, cfg: dict | None = None, seed: int = 0):
    """Build an environment by name. ``cfg`` may override ``time_limit``,
    ``grid_size``, ``goal_radius`` and ``cell_size``; zero/None keeps defaults.
    """
    cfg = {k: v for k, v in (cfg or {}).items() if v not in (None, 0)}
    if name == "point2d":
        return Point2D(time_limit=cfg.get("time_limit", 200))
    if name in ("gridworld", "gridworld-sparse"):
        return GridWorld(size=cfg.get("grid_size", 10), sparse=name.endswith("sparse"),
                         time_limit=cfg.get("time_limit", 100))
    if name == "umaze":
        return UMaze(time_limit=cfg.get("time_limit", 300), cell_size=cfg.get("cell_size", 1.0),
                     goal_radius=cfg.get("goal_radius", 0.5))
    raise ConfigError(f"unknown environment {name!r}; expected one of {ENV_NAMES}")
