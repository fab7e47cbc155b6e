"""Run-scoped training: one ``runs/<run_id>/`` directory per experiment config."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np
import pandas as pd

from . import tensor as T
from .config import ExperimentConfig, Paths, record_manifest, update_manifest
from .datasets import Dataset, build_dataset
from .metrics import MetricWriter, histogram_divergences, mode_coverage, summarize, test_elbo
from .models import (
    Bound,
    Mlp,
    ModelBundle,
    PriorSpec,
    RngStream,
    decoder_mean,
    decoder_sample,
    generate,
)
from .objectives import (
    aae_losses,
    aavae_losses,
    gan_disc_loss,
    gan_gen_loss_unsaturated,
    infogan_losses,
    iw_gan_gen_update,
    vae_elbo,
    wake_sleep_step,
)
from .optim import NumericalAbort, adam_step, save_checkpoint
from .oracle import run_suite
from .tensor import Tensor
from .utils import write_jsonl

logger = logging.getLogger(__name__)

GAN_KINDS = ("gan", "iwgan", "infogan")
DECODER_KINDS = ("aae", "vae", "aavae", "wakesleep")
ELBO_KINDS = ("vae", "aavae", "wakesleep")


@dataclass
class RunRecord:
    """What a run left on disk. Metric rows are append-only."""

    run_id: str
    config_hash: str
    paths: Paths
    rows: List[Dict] = field(default_factory=list)
    summary: Dict = field(default_factory=dict)
    checkpoints: List[str] = field(default_factory=list)
    batches: Dict[str, int] = field(default_factory=lambda: {"real": 0, "fake": 0})

    def verify_hash(self) -> bool:
        stored = json.loads(self.paths.config_path.read_text())
        return ExperimentConfig.from_mapping(stored).hash() == self.config_hash


@dataclass
class TrainState:
    config: ExperimentConfig
    dataset: Dataset
    bundle: ModelBundle
    rng: RngStream
    step: int = 0
    snapshot: Optional[Dict[str, np.ndarray]] = None
    batches: Dict[str, int] = field(default_factory=lambda: {"real": 0, "fake": 0})

    @property
    def likelihood(self) -> str:
        return self.dataset.likelihood

    def draws(self, label: str) -> RngStream:
        return self.rng.child(f"step{self.step}/{label}")

    def real_batch(self) -> np.ndarray:
        self.batches["real"] += self.config.batch_size
        return self.dataset.batch(self.config.batch_size, self.draws("batch"))

    def prior_batch(self, n: Optional[int] = None) -> np.ndarray:
        return self.bundle.prior.sample(n or self.config.batch_size, self.draws("z"))


# ---------------------------------------------------------------------------
# Architectures


def build_bundle(config: ExperimentConfig, data_dim: int, likelihood: str, rng: RngStream) -> ModelBundle:
    """Default MLPs per experiment kind; every hidden layer shares one activation."""
    sizes = config.model
    latent = sizes.latent_dim
    hidden = sizes.hidden
    acts = (sizes.activation,) * len(hidden)

    def mlp(name: str, d_in: int, d_out: int, head: str) -> Mlp:
        return Mlp(name, (d_in, *hidden, d_out), acts, head)

    decoder_head = "linear" if likelihood == "bernoulli" else "gaussian"
    kind = config.kind
    if kind in ("gan", "iwgan", "infogan"):
        gen_head = "sigmoid" if likelihood == "bernoulli" else "linear"
        nets = [mlp("generator", latent, data_dim, gen_head), mlp("discriminator", data_dim, 1, "sigmoid")]
        if kind == "infogan":
            nets.append(mlp("encoder", data_dim, latent, "gaussian"))
    elif kind == "aae":
        nets = [
            mlp("encoder", data_dim, latent, "linear"),
            mlp("decoder", latent, data_dim, "gaussian"),
            mlp("discriminator", latent, 1, "sigmoid"),
        ]
        likelihood = "gaussian"
    elif kind in ("vae", "aavae", "wakesleep"):
        nets = [mlp("encoder", data_dim, latent, "gaussian"), mlp("decoder", latent, data_dim, decoder_head)]
        if kind == "aavae":
            nets.append(mlp("discriminator", data_dim, 1, "sigmoid"))
    else:
        raise ValueError(f"No architecture for kind '{kind}'")
    bundle = ModelBundle.build(nets, PriorSpec("standard-normal", latent), rng, likelihood=likelihood)
    bundle.meta["kind"] = kind
    return bundle


# ---------------------------------------------------------------------------
# Update helpers


def _scalar(value) -> Optional[float]:
    if isinstance(value, Tensor):
        return value.item() if value.size == 1 else None
    if isinstance(value, (int, float, np.floating)):
        return float(value)
    return None


def _update(state: TrainState, trainable: Tuple[str, ...], loss_fn: Callable, prefix: str) -> Dict[str, float]:
    with T.Tape() as tape:
        weights = state.bundle.weights(tape, trainable=trainable)
        out = loss_fn(weights)
    terms = {f"{prefix}{k}": v for k, v in ((k, _scalar(v)) for k, v in out.items()) if v is not None}
    terms.update(out.get("extra", {}))
    loss = out["loss"]
    if not math.isfinite(loss.item()):
        raise NumericalAbort(
            f"Non-finite {prefix or 'loss'} at step {state.step}",
            diagnostics={"loss_terms": terms, "parameter": None},
        )
    grads = tape.backward(loss)
    opt = state.config.optimizer
    try:
        state.bundle.params = adam_step(state.bundle.params, grads, lr=opt.lr, betas=opt.betas, eps=opt.eps)
    except NumericalAbort as exc:
        exc.diagnostics.setdefault("loss_terms", terms)
        raise
    return terms


def _bind(bundle: ModelBundle, weights: Mapping[str, Tensor], *names: str) -> Tuple[Bound, ...]:
    return tuple(bundle.bind(n, weights) for n in names)


# ---------------------------------------------------------------------------
# Trainers: one alternating step each


def _gan_disc_step(state: TrainState, z: np.ndarray, real: np.ndarray) -> Dict[str, float]:
    bundle = state.bundle

    def loss(w):
        gen, disc = _bind(bundle, w, "generator", "discriminator")
        return {"loss": gan_disc_loss(disc, Tensor(real), generate(gen, Tensor(z)))}

    state.batches["fake"] += z.shape[0]
    return _update(state, ("discriminator",), loss, "disc_")


def train_gan(state: TrainState) -> Dict[str, float]:
    z, real = state.prior_batch(), state.real_batch()
    terms = _gan_disc_step(state, z, real)

    def loss(w):
        gen, disc = _bind(state.bundle, w, "generator", "discriminator")
        return {"loss": gan_gen_loss_unsaturated(disc, generate(gen, Tensor(z)))}

    terms.update(_update(state, ("generator",), loss, "gen_"))
    return terms


def train_iwgan(state: TrainState) -> Dict[str, float]:
    z, real = state.prior_batch(), state.real_batch()
    terms = _gan_disc_step(state, z, real)
    k = state.config.k

    def loss(w):
        gen, disc = _bind(state.bundle, w, "generator", "discriminator")
        out = iw_gan_gen_update(disc, gen, z, k)
        return {"loss": out["loss"], "extra": out["report"].summary()}

    terms.update(_update(state, ("generator",), loss, "gen_"))
    return terms


def train_infogan(state: TrainState) -> Dict[str, float]:
    z, real = state.prior_batch(), state.real_batch()
    state.batches["fake"] += z.shape[0]

    def disc_loss(w):
        gen, disc, code = _bind(state.bundle, w, "generator", "discriminator", "encoder")
        losses = infogan_losses(gen, disc, code, z, Tensor(real))
        return {"loss": losses["disc_loss"], "adv": losses["disc_adv_loss"]}

    def gen_loss(w):
        gen, disc, code = _bind(state.bundle, w, "generator", "discriminator", "encoder")
        losses = infogan_losses(gen, disc, code, z, Tensor(real))
        return {"loss": losses["gen_loss"], "adv": losses["gen_adv_loss"], "code": losses["code_loss"]}

    terms = _update(state, ("discriminator", "encoder"), disc_loss, "disc_")
    terms.update(_update(state, ("generator", "encoder"), gen_loss, "gen_"))
    return terms


def train_aae(state: TrainState) -> Dict[str, float]:
    real = state.real_batch()
    prior_z = state.prior_batch()

    def step(part: str):
        def loss(w):
            enc, disc, dec = _bind(state.bundle, w, "encoder", "discriminator", "decoder")
            losses = aae_losses(enc, disc, dec, Tensor(real), prior_z)
            if part == "disc":
                return {"loss": losses["disc_loss"]}
            return {"loss": losses["gen_loss"], "adv": losses["adv_loss"], "nll": losses["nll_loss"], "recon": losses["recon_loss"]}

        return loss

    terms = _update(state, ("discriminator",), step("disc"), "disc_")
    terms.update(_update(state, ("encoder", "decoder"), step("gen"), "gen_"))
    return terms


def train_vae(state: TrainState) -> Dict[str, float]:
    real = state.real_batch()
    noise = state.draws("eps")

    def loss(w):
        enc, dec = _bind(state.bundle, w, "encoder", "decoder")
        elbo = vae_elbo(enc, dec, Tensor(real), rng=noise, likelihood=state.likelihood)
        return {"loss": -elbo, "elbo": elbo}

    return _update(state, ("encoder", "decoder"), loss, "")


def _refresh_snapshot(state: TrainState) -> None:
    if state.snapshot is None or state.step % state.config.snapshot_every == 0:
        state.snapshot = state.bundle.params.snapshot(state.bundle.names("decoder"))
        logger.debug("AAVAE generator snapshot refreshed at step %d", state.step)


def _snapshot_samples(state: TrainState, n: int) -> np.ndarray:
    values = {**state.bundle.params.values, **state.snapshot}
    weights = state.bundle.weights(values=values)
    with T.no_grad():
        return decoder_sample(state.bundle.bind("decoder", weights), Tensor(state.prior_batch(n)), state.likelihood, state.draws("fake"))


def train_aavae(state: TrainState) -> Dict[str, float]:
    _refresh_snapshot(state)
    real = state.real_batch()
    fake = _snapshot_samples(state, real.shape[0])
    state.batches["fake"] += fake.shape[0]

    def disc_loss(w):
        (disc,) = _bind(state.bundle, w, "discriminator")
        return {"loss": gan_disc_loss(disc, Tensor(real), Tensor(fake))}

    terms = _update(state, ("discriminator",), disc_loss, "disc_")
    noise = state.draws("eps")

    def gen_loss(w):
        enc, dec, disc = _bind(state.bundle, w, "encoder", "decoder", "discriminator")
        out = aavae_losses(
            enc, dec, disc, Tensor(real), Tensor(fake), rng=noise,
            temperature=state.config.temperature, likelihood=state.likelihood,
        )
        extra = {"weight_real_mean": float(out["weights_real"].mean()), "weight_fake_mean": float(out["weights_fake"].mean())}
        return {"loss": out["gen_loss"], "extra": extra}

    terms.update(_update(state, ("encoder", "decoder"), gen_loss, "gen_"))
    return terms


def train_wakesleep(state: TrainState) -> Dict[str, float]:
    real = state.real_batch()
    noise = state.draws("wakesleep")

    def loss(w):
        gen, inf = _bind(state.bundle, w, "decoder", "encoder")
        out = wake_sleep_step(gen, inf, Tensor(real), state.bundle.prior, noise, likelihood=state.likelihood)
        return {"loss": out["wake_loss"] + out["sleep_loss"], "wake": out["wake_loss"], "sleep": out["sleep_loss"]}

    return _update(state, ("decoder", "encoder"), loss, "")


TRAINERS: Dict[str, Callable[[TrainState], Dict[str, float]]] = {
    "gan": train_gan,
    "iwgan": train_iwgan,
    "infogan": train_infogan,
    "aae": train_aae,
    "vae": train_vae,
    "aavae": train_aavae,
    "wakesleep": train_wakesleep,
}


# ---------------------------------------------------------------------------
# Evaluation


def sample_model(bundle: ModelBundle, n: int, rng: RngStream) -> np.ndarray:
    """Generator outputs for GAN kinds, decoder means at prior codes otherwise."""
    kind = bundle.meta.get("kind")
    weights = bundle.weights()
    z = Tensor(bundle.prior.sample(n, rng))
    with T.no_grad():
        if kind in GAN_KINDS:
            return generate(bundle.bind("generator", weights), z).data
        if kind in DECODER_KINDS:
            likelihood = "gaussian" if kind == "aae" else bundle.likelihood
            return decoder_mean(bundle.bind("decoder", weights), z, likelihood).data
    raise ValueError(f"Cannot sample from a '{kind}' bundle")


def evaluate_bundle(bundle: ModelBundle, dataset: Dataset, spec, seed: int, n: int = 1000) -> Dict[str, float]:
    """Mode metrics on 2-D mixtures, histogram divergences, and a test ELBO for VAE kinds."""
    rng = RngStream(seed, "eval")
    out: Dict[str, float] = {}
    samples = sample_model(bundle, n, rng.child("samples"))
    if spec.kind == "gaussian-mixture-2d":
        cov = mode_coverage(samples, spec.mixture)
        out.update(
            high_quality=cov["high_quality"],
            covered_modes=cov["covered_modes"],
            smallest_mode_hit=cov["smallest_mode_hit"],
            **{f"mode{i}_hit": h for i, h in enumerate(cov["mode_hits"])},
        )
        out.update(histogram_divergences(samples, dataset.x[:n]))
    if bundle.meta.get("kind") in ELBO_KINDS:
        weights = bundle.weights()
        out["test_elbo"] = test_elbo(
            bundle.bind("encoder", weights),
            bundle.bind("decoder", weights),
            dataset.x[:n],
            rng.child("elbo"),
            likelihood=bundle.likelihood,
        )
    return out


# ---------------------------------------------------------------------------
# Orchestration


def _write_abort(paths: Paths, exc: NumericalAbort, state: TrainState, last_terms: Dict) -> None:
    payload = {
        "step": state.step,
        "message": str(exc),
        "loss_terms": exc.diagnostics.get("loss_terms", last_terms),
        "parameter": exc.diagnostics.get("parameter"),
        "diagnostics": exc.diagnostics,
    }
    paths.abort_path.write_text(json.dumps(payload, indent=2, default=str))
    update_manifest(paths.manifest_path, status="aborted", aborted_at_step=state.step)


def _start_run(config: ExperimentConfig, base_dir: Optional[Path]) -> Tuple[Paths, str]:
    paths = config.paths(base_dir)
    paths.run_dir.mkdir(parents=True, exist_ok=True)
    for stale in (paths.metrics_path, paths.abort_path, paths.lemmas_path):
        if stale.exists():
            stale.unlink()
    digest = config.hash()
    paths.config_path.write_text(json.dumps(config.to_mapping(), indent=2, sort_keys=True))
    record_manifest(
        paths.manifest_path,
        {
            "run_id": paths.run_id,
            "kind": config.kind,
            "seed": config.seed,
            "config_hash": digest,
            "status": "running",
            "started_at": datetime.now(timezone.utc).isoformat(),
        },
    )
    return paths, digest


def _verify_lemmas(config: ExperimentConfig, record: RunRecord) -> RunRecord:
    reports = list(run_suite(config.seed, config.verify.instances, config.verify.tol))
    write_jsonl(record.paths.lemmas_path, reports)
    record.summary = {
        "kind": config.kind,
        "seed": config.seed,
        "config_hash": record.config_hash,
        "checks": len(reports),
        "failed": sum(1 for r in reports if r.get("passed") is False),
    }
    pd.DataFrame([record.summary]).to_csv(record.paths.summary_path, index=False)
    update_manifest(record.paths.manifest_path, status="completed", lemmas=str(record.paths.lemmas_path), summary=record.summary)
    return record


def run_experiment(config: ExperimentConfig, base_dir: Optional[Path] = None) -> RunRecord:
    """Train (or verify) per ``config`` and persist every artifact under the run directory.

    Raises NumericalAbort after writing ``abort.json`` when a loss or gradient
    turns non-finite.
    """
    paths, digest = _start_run(config, base_dir)
    record = RunRecord(run_id=paths.run_id, config_hash=digest, paths=paths)
    if config.kind == "verify-lemmas":
        return _verify_lemmas(config, record)

    root = RngStream(config.seed)
    dataset = build_dataset(config.dataset, config.seed)
    eval_data = build_dataset(config.dataset, config.seed, n=config.eval_samples, split="test")
    bundle = build_bundle(config, dataset.dim, dataset.likelihood, root.child("init"))
    state = TrainState(config=config, dataset=dataset, bundle=bundle, rng=root.child("train"))
    writer = MetricWriter(paths.metrics_path)
    trainer = TRAINERS[config.kind]
    logger.info("Run %s: %s on %s for %d steps", paths.run_id, config.kind, config.dataset.kind, config.steps)

    terms: Dict[str, float] = {}
    try:
        for step in range(config.steps):
            state.step = step
            terms = trainer(state)
            if (step + 1) % config.log_every == 0 or step + 1 == config.steps:
                row = {"step": step + 1, **terms}
                row.update(evaluate_bundle(bundle, eval_data, config.dataset, config.seed, config.eval_samples))
                record.rows.append(writer.write(row))
                logger.debug("step %d: %s", step + 1, row)
    except NumericalAbort as exc:
        logger.error("Numerical abort at step %d: %s", state.step, exc)
        _write_abort(paths, exc, state, terms)
        raise

    record.batches = dict(state.batches)
    ckpt = save_checkpoint(paths.checkpoint_path("final"), bundle.params, meta={"kind": config.kind, "config_hash": digest, "step": config.steps})
    card = {**bundle.card(), "kind": config.kind, "config_hash": digest, "data_dim": dataset.dim}
    paths.model_card_path.write_text(json.dumps(card, indent=2))
    record.checkpoints.append(str(ckpt))

    _write_tables(paths, record, bundle, eval_data, config)
    update_manifest(
        paths.manifest_path,
        status="completed",
        steps=config.steps,
        batches=record.batches,
        checkpoints=record.checkpoints,
        summary=record.summary,
    )
    return record


def _write_tables(paths: Paths, record: RunRecord, bundle: ModelBundle, eval_data: Dataset, config: ExperimentConfig) -> None:
    if record.rows:
        pd.DataFrame(record.rows).to_csv(paths.curves_path, index=False)
    final = summarize(record.rows, [k for row in record.rows for k in row if k != "step"])
    record.summary = {
        "kind": config.kind,
        "seed": config.seed,
        "config_hash": record.config_hash,
        "steps": config.steps,
        "real_examples": record.batches["real"],
        "fake_examples": record.batches["fake"],
        **final,
    }
    pd.DataFrame([record.summary]).to_csv(paths.summary_path, index=False)

    n = config.eval_samples if eval_data.dim <= 16 else min(config.eval_samples, 64)
    model = sample_model(bundle, n, RngStream(config.seed, "eval/scatter"))
    cols = [f"x{i}" for i in range(model.shape[1])]
    frames = [pd.DataFrame(model, columns=cols).assign(source="model"), pd.DataFrame(eval_data.x[:n], columns=cols).assign(source="data")]
    pd.concat(frames, ignore_index=True).to_csv(paths.samples_path, index=False)
