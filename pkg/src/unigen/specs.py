from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Dict

import yaml

from .config import ConfigError, ExperimentConfig


def read_mapping(path: Path) -> Dict[str, Any]:
    if not path.exists():
        raise FileNotFoundError(f"Config not found: {path}")
    try:
        if path.suffix.lower() in {".yml", ".yaml"}:
            data = yaml.safe_load(path.read_text())
        else:
            data = json.loads(path.read_text())
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError(f"Could not parse {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"Experiment config must be a mapping: {path}")
    return data


def load_experiment_config(path: Path) -> ExperimentConfig:
    return ExperimentConfig.from_mapping(read_mapping(Path(path)))


def load_dataset_mapping(spec: str) -> Dict[str, Any]:
    """``--dataset`` accepts a JSON/YAML file or an inline JSON object."""
    candidate = Path(spec)
    if candidate.exists():
        data = read_mapping(candidate)
        return data.get("dataset", data)
    try:
        data = json.loads(spec)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"--dataset is neither a file nor inline JSON: {spec}") from exc
    if not isinstance(data, dict):
        raise ConfigError("--dataset must describe a mapping")
    return data
