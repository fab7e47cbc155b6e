from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "unigen-paramset"
CHECKPOINT_VERSION = 1


class NumericalAbort(RuntimeError):
    def __init__(self, message: str, diagnostics: Optional[Dict] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, shape: Tuple[int, ...]) -> "AdamState":
        return cls(m=_frozen(np.zeros(shape)), v=_frozen(np.zeros(shape)), step=0)


@dataclass(frozen=True)
class ParamSet:
    """Named parameters plus per-parameter Adam state. Shapes are fixed at creation."""

    values: Mapping[str, np.ndarray]
    state: Mapping[str, AdamState] = field(default_factory=dict)

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "ParamSet":
        values = {name: _frozen(arr) for name, arr in arrays.items()}
        return cls(values=values, state={name: AdamState.zeros(v.shape) for name, v in values.items()})

    def __post_init__(self) -> None:
        for name, value in self.values.items():
            st = self.state.get(name)
            if st is not None and (st.m.shape != value.shape or st.v.shape != value.shape):
                raise ValueError(f"Optimizer state for '{name}' does not match shape {value.shape}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: object) -> bool:
        return name in self.values

    def names(self) -> Tuple[str, ...]:
        return tuple(self.values)

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {name: v.shape for name, v in self.values.items()}

    def group(self, prefix: str) -> Tuple[str, ...]:
        return tuple(n for n in self.values if n.startswith(prefix + "."))

    def merge(self, other: "ParamSet") -> "ParamSet":
        clash = set(self.values) & set(other.values)
        if clash:
            raise ValueError(f"Parameter names must be unique; duplicated: {sorted(clash)}")
        return ParamSet(values={**self.values, **other.values}, state={**self.state, **other.state})

    def replace(self, updates: Mapping[str, np.ndarray]) -> "ParamSet":
        values = dict(self.values)
        for name, arr in updates.items():
            if name not in values:
                raise KeyError(f"Unknown parameter '{name}'")
            if np.shape(arr) != values[name].shape:
                raise ValueError(f"Shape of '{name}' is fixed at {values[name].shape}, got {np.shape(arr)}")
            values[name] = _frozen(arr)
        return ParamSet(values=values, state=self.state)

    def snapshot(self, names: Optional[Iterable[str]] = None) -> Dict[str, np.ndarray]:
        keep = self.values if names is None else {n: self.values[n] for n in names}
        return {n: np.array(v) for n, v in keep.items()}


def adam_step(
    params: ParamSet,
    grads: Mapping[str, np.ndarray],
    lr: float = 2e-4,
    betas: Tuple[float, float] = (0.5, 0.999),
    eps: float = 1e-8,
) -> ParamSet:
    """Bias-corrected Adam update for the parameters named in ``grads``."""
    unknown = set(grads) - set(params.values)
    if unknown:
        raise KeyError(f"Gradients for unknown parameters: {sorted(unknown)}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.sum(~np.isfinite(g)))
            raise NumericalAbort(
                f"Non-finite gradient for parameter '{name}' ({bad} of {np.size(g)} entries)",
                diagnostics={"parameter": name, "non_finite": bad, "shape": list(np.shape(g))},
            )

    b1, b2 = betas
    values = dict(params.values)
    state = dict(params.state)
    for name, g in grads.items():
        st = state.get(name) or AdamState.zeros(values[name].shape)
        step = st.step + 1
        m = b1 * st.m + (1.0 - b1) * g
        v = b2 * st.v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**step)
        v_hat = v / (1.0 - b2**step)
        values[name] = _frozen(values[name] - lr * m_hat / (np.sqrt(v_hat) + eps))
        state[name] = AdamState(m=_frozen(m), v=_frozen(v), step=step)
    return ParamSet(values=values, state=state)


def save_checkpoint(path: Path, params: ParamSet, meta: Optional[Dict] = None) -> Path:
    """Write a JSON checkpoint; float repr keeps values bit-exact on reload."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "params": {
            name: {
                "shape": list(value.shape),
                "values": value.reshape(-1).tolist(),
                "m": params.state[name].m.reshape(-1).tolist(),
                "v": params.state[name].v.reshape(-1).tolist(),
                "step": params.state[name].step,
            }
            for name, value in params.values.items()
        },
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload))
    return path


def load_checkpoint(path: Path) -> Tuple[ParamSet, Dict]:
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    payload = json.loads(path.read_text())
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"Unsupported checkpoint version {payload.get('version')} in {path}")
    values: Dict[str, np.ndarray] = {}
    state: Dict[str, AdamState] = {}
    for name, entry in payload["params"].items():
        shape = tuple(entry["shape"])
        values[name] = _frozen(np.array(entry["values"], dtype=np.float64).reshape(shape))
        state[name] = AdamState(
            m=_frozen(np.array(entry["m"], dtype=np.float64).reshape(shape)),
            v=_frozen(np.array(entry["v"], dtype=np.float64).reshape(shape)),
            step=int(entry["step"]),
        )
    return ParamSet(values=values, state=state), payload.get("meta", {})
