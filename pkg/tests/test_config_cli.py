import json
import subprocess
import sys
from pathlib import Path

import pytest

from cim.cli import main
from cim.config import RunConfig, load_config, parse_config
from cim.errors import ConfigError

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
TINY = ["--set", "run.total_steps=256", "--set", "rl.rollout_steps=128", "--set", "encoder.n_steps=1",
        "--set", "rl.epochs=1", "--set", "eval.episodes=4"]


def test_parse_typed_values():
    cfg = parse_config("""
        # comment
        env.name = umaze      # trailing comment
        env.n_envs = 4
        rl.hidden = 32, 16
        rl.lr = 1e-3
        eim.meta = yes
        run.total_steps = 10_000
    """)
    assert cfg.env.name == "umaze" and cfg.env.n_envs == 4
    assert cfg.rl.hidden == (32, 16) and cfg.rl.lr == 1e-3
    assert cfg.eim.meta is True and cfg.run.total_steps == 10_000


def test_round_trip_through_text():
    cfg = load_config(CONFIGS / "point2d_mse.cfg")
    assert parse_config(cfg.dumps()) == cfg
    assert cfg.copy() == cfg and cfg.copy() is not cfg


@pytest.mark.parametrize("text", [
    "env.nmae = point2d",
    "envv.name = point2d",
    "env.name point2d",
    "rl.lr = fast",
    "eim.meta = maybe",
    "env.n_envs = 2.5",
])
def test_parse_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


@pytest.mark.parametrize("key,value", [
    ("env.name", "ant"), ("skill.prior", "beta"), ("intrinsic.kind", "becl"), ("encoder.loss", "l1"),
    ("eim.coefficient", "cosine"), ("rl.rollout_steps", "100"), ("intrinsic.xi", "0"),
    ("eim.meta", "true"), ("eval.bin_size", "0"), ("run.total_steps", "-1"),
])
def test_validation_errors(key, value):
    cfg = RunConfig()
    cfg.set(key, value)
    with pytest.raises(ConfigError):
        cfg.validate()


def test_validation_lists_every_problem():
    cfg = parse_config("env.name = ant\nintrinsic.xi = 0")
    with pytest.raises(ConfigError) as exc:
        cfg.validate()
    assert "env.name" in str(exc.value) and "intrinsic.xi" in str(exc.value)


def test_shipped_configs_validate():
    for path in CONFIGS.glob("*.cfg"):
        load_config(path).validate()


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.cfg")


# ---------------------------------------------------------------- CLI

def test_cli_exit_codes(tmp_path, capsys):
    assert main(["pretrain", "--config", str(CONFIGS / "point2d_cim.cfg"), "--seed", "0",
                 "--out", str(tmp_path / "x"), "--set", "env.name=ant"]) == 2
    assert "config error" in capsys.readouterr().err
    assert main(["pretrain", "--config", str(tmp_path / "nope.cfg"), "--seed", "0", "--out", str(tmp_path)]) == 2
    assert main(["pretrain", "--config", str(CONFIGS / "point2d_cim.cfg"), "--seed", "0",
                 "--out", str(tmp_path / "x"), "--set", "novalue"]) == 2
    assert main(["eval", "--ckpt", str(tmp_path / "missing"), "--out", str(tmp_path / "e")]) == 2
    assert main(["train-eim", "--config", str(CONFIGS / "umaze_meta.cfg"), "--seed", "0",
                 "--out", str(tmp_path / "m")]) == 2


def test_cli_numeric_failure_exit_code(tmp_path):
    assert main(["pretrain", "--config", str(CONFIGS / "point2d_cim.cfg"), "--seed", "0",
                 "--out", str(tmp_path / "nan"), "--set", "rl.lr=nan", *TINY]) == 3


def test_cli_end_to_end(tmp_path, capsys):
    skills = tmp_path / "skills"
    assert main(["pretrain", "--config", str(CONFIGS / "point2d_cim.cfg"), "--seed", "1",
                 "--out", str(skills), *TINY]) == 0
    for name in ("config.cfg", "checkpoint.ckpt", "metrics.csv"):
        assert (skills / name).exists()
    lines = (skills / "metrics.csv").read_text().splitlines()
    assert lines[0] == "# schema=1" and lines[1].startswith("iteration,env_steps,") and len(lines) == 4

    meta = tmp_path / "meta"
    assert main(["train-eim", "--config", str(CONFIGS / "umaze_meta.cfg"), "--skills", str(skills),
                 "--seed", "1", "--out", str(meta), *TINY]) == 0
    assert main(["eval", "--ckpt", str(meta), "--episodes", "3", "--out", str(tmp_path / "ev")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["episodes"] == 3 and 0.0 <= summary["success_rate"] <= 1.0

    assert main(["eval", "--ckpt", str(skills / "checkpoint.ckpt"), "--out", str(tmp_path / "ev2")]) == 0
    capsys.readouterr()
    svg = tmp_path / "plot.svg"
    assert main(["plot", "--csv", str(tmp_path / "ev2" / "trajectories.csv"), "--out", str(svg)]) == 0
    assert svg.read_text().count("<polyline") == 4


def test_train_eim_with_bonus(tmp_path):
    for cfg in ("gridworld_sparse_apt_adaptive.cfg", "gridworld_dense_ppo.cfg"):
        out = tmp_path / cfg
        assert main(["train-eim", "--config", str(CONFIGS / cfg), "--seed", "0", "--out", str(out), *TINY]) == 0
        assert len((out / "metrics.csv").read_text().splitlines()) == 4


def test_same_seed_same_metrics(tmp_path):
    for tag in "ab":
        main(["pretrain", "--config", str(CONFIGS / "point2d_cim.cfg"), "--seed", "3",
              "--out", str(tmp_path / tag), *TINY])
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert (tmp_path / "a" / "checkpoint.ckpt").read_bytes() == (tmp_path / "b" / "checkpoint.ckpt").read_bytes()


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "cim.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("pretrain", "train-eim", "eval", "plot"):
        assert cmd in out.stdout
