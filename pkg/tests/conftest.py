from __future__ import annotations

from typing import Dict

import numpy as np
import pytest

from unigen.config import ExperimentConfig
from unigen.models import Bound, Mlp
from unigen.tensor import Tensor


@pytest.fixture(autouse=True)
def _no_output_root_override(monkeypatch):
    monkeypatch.delenv("UNIGEN_OUTPUT_ROOT", raising=False)


def small_config(kind: str, **overrides) -> ExperimentConfig:
    mapping: Dict = {
        "kind": kind,
        "seed": 3,
        "model": {"latent_dim": 2, "hidden": [8]},
        "optimizer": {"lr": 1e-3},
        "steps": 6,
        "batch_size": 16,
        "log_every": 3,
        "snapshot_every": 2,
        "eval_samples": 200,
        "verify": {"instances": 2},
    }
    mapping.update(overrides)
    return ExperimentConfig.from_mapping(mapping)


def constant_net(net: Mlp, bias: float = 0.0) -> Bound:
    """Zero weights; the last bias set to ``bias``."""
    shapes = net.param_shapes()
    last = f"{net.name}.b{len(net.widths) - 2}"
    weights = {
        name: Tensor(np.full(shape, bias) if name == last else np.zeros(shape)) for name, shape in shapes.items()
    }
    return Bound(net, weights)


def random_net(net: Mlp, seed: int = 0, gain: float = 1.0) -> Bound:
    from unigen.models import RngStream

    return Bound(net, {k: Tensor(v) for k, v in net.init(RngStream(seed, net.name), gain=gain).items()})
