"""Run configuration: flat ``section.key = value`` files.

Lines starting with ``#`` are comments. Values are parsed according to the
field type of the matching dataclass; tuples are comma-separated. Unknown
sections or keys are errors.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import get_type_hints

from .encoder import LOSS_KINDS
from .envs import ENV_NAMES
from .errors import ConfigError
from .eim import SCHEDULES

INTRINSIC_KINDS = ("cim", "apt", "rnd", "count", "none")


@dataclass
class EnvConfig:
    name: str = "point2d"
    time_limit: int = 0  # 0 = environment default
    grid_size: int = 10
    goal_radius: float = 0.5
    cell_size: float = 1.0
    n_envs: int = 16


@dataclass
class SkillConfig:
    prior: str = "continuous"  # continuous | categorical | none
    n_z: int = 2
    mode: str = "unit-sphere"
    low: float = -1.0
    high: float = 1.0


@dataclass
class IntrinsicConfig:
    kind: str = "cim"
    xi: int = 12
    normalize: str = "auto"  # auto: on for train-eim, off for pretrain
    candidates: str = "batch"  # batch | buffer
    buffer_size: int = 16384
    rnd_steps: int = 16


@dataclass
class EncoderConfig:
    loss: str = "cim"
    hidden: tuple = (64,)
    identity: bool = False
    n_steps: int = 8
    batch_size: int = 256
    lr: float = 3e-4
    lsd_weight: float = 10.0
    cic_hidden: int = 64


@dataclass
class RlConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    epochs: int = 4
    minibatch: int = 256
    ent_coef: float = 0.003
    vf_coef: float = 0.5
    lr: float = 3e-4
    max_grad_norm: float = 0.5
    rollout_steps: int = 4096
    hidden: tuple = (64, 64)
    init_log_std: float = 0.0


@dataclass
class EimConfig:
    coefficient: str = "adaptive"
    eta: float = 0.05
    lambda0: float = 1.0
    horizon: int = 0  # linear schedule length in iterations; 0 = whole run
    meta: bool = False
    skills: str = ""


@dataclass
class RunSection:
    seed: int = 0
    total_steps: int = 200_000
    out: str = "runs/out"


@dataclass
class EvalConfig:
    episodes: int = 100
    bin_size: float = 0.25


@dataclass
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    skill: SkillConfig = field(default_factory=SkillConfig)
    intrinsic: IntrinsicConfig = field(default_factory=IntrinsicConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    rl: RlConfig = field(default_factory=RlConfig)
    eim: EimConfig = field(default_factory=EimConfig)
    run: RunSection = field(default_factory=RunSection)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def set(self, dotted: str, raw) -> None:
        section, _, key = dotted.partition(".")
        if not hasattr(self, section) or not key:
            raise ConfigError(f"unknown config section in {dotted!r}")
        obj = getattr(self, section)
        hints = get_type_hints(type(obj))
        if key not in hints:
            raise ConfigError(f"unknown config key {dotted!r}")
        setattr(obj, key, _coerce(dotted, hints[key], raw))

    def validate(self) -> "RunConfig":
        errors = []
        if self.env.name not in ENV_NAMES:
            errors.append(f"env.name must be one of {ENV_NAMES}")
        if self.env.n_envs < 1:
            errors.append("env.n_envs must be >= 1")
        if self.skill.prior not in ("continuous", "categorical", "none"):
            errors.append("skill.prior must be continuous, categorical or none")
        if self.skill.prior != "none" and self.skill.n_z < 1:
            errors.append("skill.n_z must be >= 1")
        if self.skill.mode not in ("unit-sphere", "interval"):
            errors.append("skill.mode must be unit-sphere or interval")
        if self.skill.mode == "interval" and not self.skill.low < self.skill.high:
            errors.append("skill.low must be below skill.high")
        if self.intrinsic.kind not in INTRINSIC_KINDS:
            errors.append(f"intrinsic.kind must be one of {INTRINSIC_KINDS}")
        if self.intrinsic.kind == "cim" and self.skill.prior == "none":
            errors.append("intrinsic.kind = cim needs a skill prior")
        if self.intrinsic.xi < 1:
            errors.append("intrinsic.xi must be >= 1")
        if self.intrinsic.normalize not in ("auto", "true", "false"):
            errors.append("intrinsic.normalize must be auto, true or false")
        if self.intrinsic.candidates not in ("batch", "buffer"):
            errors.append("intrinsic.candidates must be batch or buffer")
        if self.encoder.loss not in LOSS_KINDS:
            errors.append(f"encoder.loss must be one of {LOSS_KINDS}")
        if self.encoder.n_steps < 0 or self.encoder.batch_size < 1:
            errors.append("encoder.n_steps must be >= 0 and encoder.batch_size >= 1")
        if self.rl.rollout_steps < 1 or self.rl.rollout_steps % self.env.n_envs:
            errors.append("rl.rollout_steps must be a positive multiple of env.n_envs")
        if self.rl.minibatch < 1 or self.rl.epochs < 0:
            errors.append("rl.minibatch must be >= 1 and rl.epochs >= 0")
        if not 0.0 <= self.rl.gamma <= 1.0 or not 0.0 <= self.rl.gae_lambda <= 1.0:
            errors.append("rl.gamma and rl.gae_lambda must lie in [0, 1]")
        if self.eim.coefficient not in SCHEDULES:
            errors.append(f"eim.coefficient must be one of {SCHEDULES}")
        if self.eim.lambda0 <= 0 or self.eim.eta < 0:
            errors.append("eim.lambda0 must be > 0 and eim.eta >= 0")
        if self.eim.meta and self.env.name != "umaze":
            errors.append("eim.meta needs env.name = umaze")
        if self.run.total_steps < 0:
            errors.append("run.total_steps must be >= 0")
        if self.eval.episodes < 1 or self.eval.bin_size <= 0:
            errors.append("eval.episodes must be >= 1 and eval.bin_size > 0")
        if errors:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors))
        return self

    def dumps(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            obj = getattr(self, f.name)
            for g in dataclasses.fields(obj):
                lines.append(f"{f.name}.{g.name} = {_format(getattr(obj, g.name))}")
        return "\n".join(lines) + "\n"

    def copy(self) -> "RunConfig":
        return parse_config(self.dumps())


def _coerce(key: str, typ, raw):
    if not isinstance(raw, str):
        return tuple(raw) if typ is tuple else raw
    text = raw.strip()
    try:
        if typ is bool:
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if typ is int:
            return int(text.replace("_", ""))
        if typ is float:
            return float(text)
        if typ is tuple:
            return tuple(int(x) for x in text.replace(" ", "").split(",") if x)
        return text
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from exc


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config(text: str, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'section.key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        cfg.set(key, value)
    for key, value in (overrides or {}).items():
        cfg.set(key, value)
    return cfg


def load_config(path, overrides: dict | None = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, overrides)
