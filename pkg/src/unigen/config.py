from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple

from .utils import load_manifest

OUTPUT_ROOT_ENV = "UNIGEN_OUTPUT_ROOT"

KINDS = ("gan", "iwgan", "infogan", "aae", "vae", "aavae", "wakesleep", "verify-lemmas")
DATASET_KINDS = ("gaussian-mixture-2d", "mnist-idx", "tabular-synthetic")
TEMPERATURE_GRID = (1.0, 1.5, 3.0, 5.0)

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


def canonical_json(payload: Mapping) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def config_hash(payload: Mapping) -> str:
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


def output_root(base_dir: Optional[Path] = None) -> Path:
    """``UNIGEN_OUTPUT_ROOT`` wins over ``--base-dir``."""
    env = os.environ.get(OUTPUT_ROOT_ENV)
    if env:
        return Path(env)
    return Path(base_dir) if base_dir is not None else Path(".")


@dataclass(frozen=True)
class Paths:
    root: Path
    run_id: str

    @property
    def run_dir(self) -> Path:
        return self.root / "runs" / self.run_id

    @property
    def config_path(self) -> Path:
        return self.run_dir / "config.json"

    @property
    def manifest_path(self) -> Path:
        return self.run_dir / "manifest.json"

    @property
    def metrics_path(self) -> Path:
        return self.run_dir / "metrics.jsonl"

    @property
    def summary_path(self) -> Path:
        return self.run_dir / "summary.csv"

    @property
    def curves_path(self) -> Path:
        return self.run_dir / "curves.csv"

    @property
    def samples_path(self) -> Path:
        return self.run_dir / "samples.csv"

    @property
    def lemmas_path(self) -> Path:
        return self.run_dir / "lemmas.jsonl"

    @property
    def abort_path(self) -> Path:
        return self.run_dir / "abort.json"

    @property
    def checkpoints_dir(self) -> Path:
        return self.run_dir / "checkpoints"

    @property
    def model_card_path(self) -> Path:
        return self.checkpoints_dir / "model_card.json"

    def checkpoint_path(self, name: str = "final") -> Path:
        return self.checkpoints_dir / f"{name}.json"


def _require(mapping: Mapping, key: str, where: str):
    if key not in mapping or mapping[key] is None:
        raise ConfigError(f"{where}: '{key}' is required")
    return mapping[key]


def _pairs(values, where: str) -> Tuple[Tuple[float, float], ...]:
    try:
        out = tuple((float(a), float(b)) for a, b in values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: expected a list of [x, y] pairs") from exc
    return out


@dataclass(frozen=True)
class MixtureSpec:
    means: Tuple[Tuple[float, float], ...] = ((-2.0, 0.0), (2.0, 0.0))
    weights: Tuple[float, ...] = (0.75, 0.25)
    stds: Tuple[float, ...] = (0.3, 0.3)

    @classmethod
    def from_mapping(cls, mapping: Mapping) -> "MixtureSpec":
        default = cls()
        means = _pairs(mapping.get("means", default.means), "mixture")
        weights = tuple(float(w) for w in mapping.get("weights", default.weights))
        stds = mapping.get("stds", mapping.get("std", default.stds))
        if isinstance(stds, (int, float)):
            stds = (float(stds),) * len(means)
        spec = cls(means=means, weights=weights, stds=tuple(float(s) for s in stds))
        spec.validate()
        return spec

    def validate(self) -> None:
        if not self.means:
            raise ConfigError("mixture: at least one component is required")
        if len(self.weights) != len(self.means) or len(self.stds) != len(self.means):
            raise ConfigError("mixture: means, weights and stds must have the same length")
        if any(w < 0 for w in self.weights) or abs(sum(self.weights) - 1.0) > 1e-9:
            raise ConfigError(f"mixture: weights must be non-negative and sum to 1, got {list(self.weights)}")
        if any(s < 0 for s in self.stds):
            raise ConfigError("mixture: stds must be non-negative")

    @property
    def n_modes(self) -> int:
        return len(self.means)


@dataclass(frozen=True)
class MnistSpec:
    image_path: str
    label_path: str
    subset_fraction: float = 1.0
    threshold: float = 0.5
    binarize: bool = True
    test_image_path: Optional[str] = None
    test_label_path: Optional[str] = None

    @classmethod
    def from_mapping(cls, mapping: Mapping) -> "MnistSpec":
        spec = cls(
            image_path=str(_require(mapping, "image_path", "mnist")),
            label_path=str(_require(mapping, "label_path", "mnist")),
            subset_fraction=float(mapping.get("subset_fraction", 1.0)),
            threshold=float(mapping.get("threshold", 0.5)),
            binarize=bool(mapping.get("binarize", True)),
            test_image_path=mapping.get("test_image_path"),
            test_label_path=mapping.get("test_label_path"),
        )
        spec.validate()
        return spec

    def validate(self) -> None:
        if not 0.0 < self.subset_fraction <= 1.0:
            raise ConfigError(f"mnist: subset_fraction must lie in (0, 1], got {self.subset_fraction}")
        for p in (self.image_path, self.label_path, self.test_image_path, self.test_label_path):
            if p is not None and not Path(p).exists():
                raise ConfigError(f"mnist: file not found: {p}")
        if (self.test_image_path is None) != (self.test_label_path is None):
            raise ConfigError("mnist: test_image_path and test_label_path go together")


@dataclass(frozen=True)
class TabularSpec:
    support_size: int = 16
    code_size: int = 8

    @classmethod
    def from_mapping(cls, mapping: Mapping) -> "TabularSpec":
        spec = cls(support_size=int(mapping.get("support_size", 16)), code_size=int(mapping.get("code_size", 8)))
        if spec.support_size < 2 or spec.code_size < 1:
            raise ConfigError("tabular: support_size must be >= 2 and code_size >= 1")
        return spec


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "gaussian-mixture-2d"
    mixture: Optional[MixtureSpec] = field(default_factory=MixtureSpec)
    mnist: Optional[MnistSpec] = None
    tabular: Optional[TabularSpec] = None

    @classmethod
    def from_mapping(cls, mapping: Mapping) -> "DatasetSpec":
        kind = mapping.get("kind", "gaussian-mixture-2d")
        if kind == "gaussian-mixture-2d":
            return cls(kind=kind, mixture=MixtureSpec.from_mapping(mapping))
        if kind == "mnist-idx":
            return cls(kind=kind, mixture=None, mnist=MnistSpec.from_mapping(mapping))
        if kind == "tabular-synthetic":
            return cls(kind=kind, mixture=None, tabular=TabularSpec.from_mapping(mapping))
        raise ConfigError(f"dataset: unknown kind '{kind}' (expected one of {', '.join(DATASET_KINDS)})")

    def to_mapping(self) -> Dict:
        body = {"mixture": self.mixture, "mnist": self.mnist, "tabular": self.tabular}[_KIND_FIELD[self.kind]]
        return {"kind": self.kind, **{k: _jsonable(v) for k, v in asdict(body).items() if v is not None}}


_KIND_FIELD = {"gaussian-mixture-2d": "mixture", "mnist-idx": "mnist", "tabular-synthetic": "tabular"}


def _jsonable(value):
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    return value


@dataclass(frozen=True)
class ModelSizes:
    latent_dim: int = 2
    hidden: Tuple[int, ...] = (64, 64)
    activation: str = "tanh"

    @classmethod
    def from_mapping(cls, mapping: Mapping) -> "ModelSizes":
        hidden = mapping.get("hidden", (64, 64))
        if isinstance(hidden, int):
            hidden = (hidden,)
        sizes = cls(
            latent_dim=int(mapping.get("latent_dim", 2)),
            hidden=tuple(int(h) for h in hidden),
            activation=str(mapping.get("activation", "tanh")),
        )
        if sizes.latent_dim < 1 or any(h < 1 for h in sizes.hidden):
            raise ConfigError("model: latent_dim and hidden widths must be positive")
        return sizes


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def from_mapping(cls, mapping: Mapping) -> "OptimizerConfig":
        opt = cls(
            lr=float(mapping.get("lr", 2e-4)),
            beta1=float(mapping.get("beta1", 0.5)),
            beta2=float(mapping.get("beta2", 0.999)),
            eps=float(mapping.get("eps", 1e-8)),
        )
        if opt.lr <= 0 or not (0 <= opt.beta1 < 1 and 0 <= opt.beta2 < 1):
            raise ConfigError("optimizer: lr must be positive and betas in [0, 1)")
        return opt

    @property
    def betas(self) -> Tuple[float, float]:
        return (self.beta1, self.beta2)


@dataclass(frozen=True)
class VerifySpec:
    instances: int = 100
    tol: float = 1e-5

    @classmethod
    def from_mapping(cls, mapping: Mapping) -> "VerifySpec":
        spec = cls(instances=int(mapping.get("instances", 100)), tol=float(mapping.get("tol", 1e-5)))
        if spec.instances < 1 or spec.tol <= 0:
            raise ConfigError("verify: instances must be >= 1 and tol positive")
        return spec


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    seed: int
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSizes = field(default_factory=ModelSizes)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    verify: VerifySpec = field(default_factory=VerifySpec)
    steps: int = 200
    batch_size: int = 64
    k: int = 1
    temperature: float = 3.0
    log_every: int = 20
    snapshot_every: int = 50
    eval_samples: int = 1000
    run_id: Optional[str] = None
    output_dir: Optional[str] = None

    @classmethod
    def from_mapping(cls, mapping: Mapping) -> "ExperimentConfig":
        kind = mapping.get("kind")
        if kind not in KINDS:
            raise ConfigError(f"unknown experiment kind '{kind}' (expected one of {', '.join(KINDS)})")
        if mapping.get("seed") is None:
            raise ConfigError("seed is required")
        try:
            cfg = cls(
                kind=kind,
                seed=int(mapping["seed"]),
                dataset=DatasetSpec.from_mapping(mapping.get("dataset") or {}),
                model=ModelSizes.from_mapping(mapping.get("model") or {}),
                optimizer=OptimizerConfig.from_mapping(mapping.get("optimizer") or {}),
                verify=VerifySpec.from_mapping(mapping.get("verify") or {}),
                steps=int(mapping.get("steps", 200)),
                batch_size=int(mapping.get("batch_size", 64)),
                k=int(mapping.get("k", 1)),
                temperature=float(mapping.get("temperature", 3.0)),
                log_every=int(mapping.get("log_every", 20)),
                snapshot_every=int(mapping.get("snapshot_every", 50)),
                eval_samples=int(mapping.get("eval_samples", 1000)),
                run_id=mapping.get("run_id"),
                output_dir=mapping.get("output_dir"),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid experiment config: {exc}") from exc
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.steps < 0 or self.batch_size < 1 or self.log_every < 1 or self.snapshot_every < 1:
            raise ConfigError("steps must be >= 0; batch_size, log_every and snapshot_every >= 1")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.batch_size % self.k:
            raise ConfigError(f"batch_size {self.batch_size} is not a multiple of k={self.k}")
        if self.temperature < 1.0:
            raise ConfigError(f"temperature must be >= 1, got {self.temperature}")
        if self.kind == "aavae" and self.temperature not in TEMPERATURE_GRID:
            logger.warning("temperature %s is outside the validated grid %s", self.temperature, TEMPERATURE_GRID)
        if self.kind in ("aae", "infogan", "wakesleep") and self.dataset.kind == "tabular-synthetic":
            raise ConfigError(f"{self.kind} needs a continuous or image dataset")

    def to_mapping(self) -> Dict:
        return {
            "kind": self.kind,
            "seed": self.seed,
            "dataset": self.dataset.to_mapping(),
            "model": {"latent_dim": self.model.latent_dim, "hidden": list(self.model.hidden), "activation": self.model.activation},
            "optimizer": asdict(self.optimizer),
            "verify": asdict(self.verify),
            "steps": self.steps,
            "batch_size": self.batch_size,
            "k": self.k,
            "temperature": self.temperature,
            "log_every": self.log_every,
            "snapshot_every": self.snapshot_every,
            "eval_samples": self.eval_samples,
        }

    def hash(self) -> str:
        return config_hash(self.to_mapping())

    def with_seed(self, seed: int) -> "ExperimentConfig":
        mapping = self.to_mapping()
        mapping.update(seed=seed, run_id=None, output_dir=self.output_dir)
        return ExperimentConfig.from_mapping(mapping)

    def resolve_run_id(self) -> str:
        return self.run_id or f"{self.kind}-s{self.seed}-{self.hash()[:10]}"

    def paths(self, base_dir: Optional[Path] = None) -> Paths:
        root = output_root(base_dir if base_dir is not None else (Path(self.output_dir) if self.output_dir else None))
        return Paths(root=root, run_id=self.resolve_run_id())


MANIFEST_IDENTITY = ("run_id", "kind", "seed", "config_hash")


def record_manifest(path: Path, payload: Dict) -> None:
    missing = [key for key in MANIFEST_IDENTITY if key not in payload]
    if missing:
        raise ConfigError(f"manifest for {path.parent.name} lacks {', '.join(missing)}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))


def update_manifest(path: Path, **fields) -> Dict:
    """Merge progress fields (status, summary, checkpoints); the run identity stays fixed."""
    manifest = load_manifest(path)
    changed = [key for key in MANIFEST_IDENTITY if key in fields and fields[key] != manifest.get(key)]
    if changed:
        raise ConfigError(f"manifest identity of {manifest['run_id']} cannot change: {', '.join(changed)}")
    manifest.update(fields)
    record_manifest(path, manifest)
    return manifest
