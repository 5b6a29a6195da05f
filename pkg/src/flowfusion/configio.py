"""Plain-text key=value run configuration.

A config file holds one ``key=value`` per line; ``#`` starts a comment.
Unknown keys are rejected so typos fail loudly. The fingerprint is the
SHA-256 of the canonical (sorted) effective configuration and is stamped
into checkpoints and reports.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

from . import harness, stgnn


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, str] = {
    "task.input_steps": "12",
    "task.output_steps": "12",
    "task.interval_minutes": "5",
    "split.train": "0.7",
    "split.val": "0.1",
    "split.test": "0.2",
    "graph.sigma_m": "1000",
    "graph.threshold": "0.1",
    "model.channels": "16",
    "model.layers": "4",
    "model.kernel_size": "2",
    "model.dilations": "1,2,2,4",
    "model.embedding_dim": "8",
    "model.adaptive": "true",
    "stage1.lr": "0.003",
    "stage1.batch_size": "64",
    "stage1.max_epochs": "60",
    "stage1.patience": "8",
    "stage2.lr": "0.003",
    "stage2.batch_size": "64",
    "stage2.max_epochs": "60",
    "stage2.patience": "8",
    "stage2.balance_init": "0.0001",
    "eval.horizons": "3,6,12",
    "synth.n_nodes": "12",
    "synth.m_cameras": "4",
    "synth.days": "14",
    "synth.profile": "commute-peaked",
    "synth.vehicle_scale": "3.0",
    "synth.pedestrian_noise_std": "25.0",
    "synth.observation_noise_std": "10.0",
    "synth.seed": "0",
}


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path: str | None) -> dict[str, str]:
    """Defaults overlaid with the given file (if any)."""
    effective = dict(DEFAULTS)
    if path is not None:
        overrides = parse_config_text(Path(path).read_text())
        unknown = set(overrides) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        effective.update(overrides)
    return effective


def fingerprint(config: dict[str, str]) -> str:
    canonical = "\n".join(f"{k}={config[k]}" for k in sorted(config))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def config_text(config: dict[str, str]) -> str:
    return "\n".join(f"{k}={config[k]}" for k in sorted(config))


def get_int(cfg: dict[str, str], key: str) -> int:
    try:
        return int(cfg[key])
    except ValueError:
        raise ConfigError(f"{key} must be an integer, got {cfg[key]!r}") from None


def get_float(cfg: dict[str, str], key: str) -> float:
    try:
        return float(cfg[key])
    except ValueError:
        raise ConfigError(f"{key} must be a number, got {cfg[key]!r}") from None


def get_bool(cfg: dict[str, str], key: str) -> bool:
    value = cfg[key].lower()
    if value not in ("true", "false"):
        raise ConfigError(f"{key} must be true or false, got {cfg[key]!r}")
    return value == "true"


def get_ints(cfg: dict[str, str], key: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in cfg[key].split(","))
    except ValueError:
        raise ConfigError(f"{key} must be comma-separated integers, got {cfg[key]!r}") from None


def ratios(cfg: dict[str, str]) -> tuple[float, float, float]:
    return (get_float(cfg, "split.train"), get_float(cfg, "split.val"),
            get_float(cfg, "split.test"))


def stage_train_config(cfg: dict[str, str], stage: str) -> stgnn.TrainConfig:
    return stgnn.TrainConfig(
        lr=get_float(cfg, f"{stage}.lr"),
        batch_size=get_int(cfg, f"{stage}.batch_size"),
        max_epochs=get_int(cfg, f"{stage}.max_epochs"),
        patience=get_int(cfg, f"{stage}.patience"),
    )


def arch_config(cfg: dict[str, str], n_nodes: int) -> stgnn.StgnnConfig:
    return stgnn.StgnnConfig(
        n_nodes=n_nodes,
        in_steps=get_int(cfg, "task.input_steps"),
        out_steps=get_int(cfg, "task.output_steps"),
        channels=get_int(cfg, "model.channels"),
        layers=get_int(cfg, "model.layers"),
        kernel_size=get_int(cfg, "model.kernel_size"),
        dilation_schedule=get_ints(cfg, "model.dilations"),
        use_adaptive_adjacency=get_bool(cfg, "model.adaptive"),
        embedding_dim=get_int(cfg, "model.embedding_dim"),
    )


def loo_config(cfg: dict[str, str], horizons: tuple[int, ...] | None = None) -> harness.LooConfig:
    return harness.LooConfig(
        input_steps=get_int(cfg, "task.input_steps"),
        output_steps=get_int(cfg, "task.output_steps"),
        horizons=horizons if horizons is not None else get_ints(cfg, "eval.horizons"),
        ratios=ratios(cfg),
        channels=get_int(cfg, "model.channels"),
        layers=get_int(cfg, "model.layers"),
        kernel_size=get_int(cfg, "model.kernel_size"),
        dilations=get_ints(cfg, "model.dilations"),
        embedding_dim=get_int(cfg, "model.embedding_dim"),
        adaptive=get_bool(cfg, "model.adaptive"),
        stage1_train=stage_train_config(cfg, "stage1"),
        stage2_train=stage_train_config(cfg, "stage2"),
        balance_init=get_float(cfg, "stage2.balance_init"),
        fingerprint=fingerprint(cfg),
    )


def synth_config(cfg: dict[str, str]):
    from . import synthgen

    scale_text = cfg["synth.vehicle_scale"]
    scale = (
        tuple(float(v) for v in scale_text.split(","))
        if "," in scale_text
        else float(scale_text)
    )
    return synthgen.SynthConfig(
        n_nodes=get_int(cfg, "synth.n_nodes"),
        m_cameras=get_int(cfg, "synth.m_cameras"),
        days=get_int(cfg, "synth.days"),
        interval_minutes=get_int(cfg, "task.interval_minutes"),
        base_profile=cfg["synth.profile"],
        vehicle_scale=scale,
        pedestrian_noise_std=get_float(cfg, "synth.pedestrian_noise_std"),
        observation_noise_std=get_float(cfg, "synth.observation_noise_std"),
        seed=get_int(cfg, "synth.seed"),
    )
