from __future__ import annotations

import json
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Optional, Tuple

import click

from .compare import compare_configs, render_table
from .config import ConfigError, DatasetSpec
from .datasets import DatasetFormatError, build_dataset
from .models import ModelBundle
from .optim import NumericalAbort, load_checkpoint
from .oracle import run_suite
from .specs import load_dataset_mapping, load_experiment_config
from .training import evaluate_bundle, run_experiment
from .utils import assert_exists, configure_logging, write_jsonl

EXIT_CONFIG = 1
EXIT_NUMERICAL = 2
EXIT_CHECKS_FAILED = 3


@contextmanager
def _exit_codes() -> Iterator[None]:
    """Map domain failures to the documented exit codes."""
    try:
        yield
    except (ConfigError, DatasetFormatError, FileNotFoundError) as exc:
        click.echo(f"[error] {exc}", err=True)
        raise SystemExit(EXIT_CONFIG)
    except NumericalAbort as exc:
        click.echo(f"[abort] {exc}", err=True)
        raise SystemExit(EXIT_NUMERICAL)


def _base_dir(base_dir: Optional[str]) -> Optional[Path]:
    return Path(base_dir) if base_dir else None


@click.group()
@click.option("--verbose", is_flag=True, help="Log at DEBUG level.")
def cli(verbose: bool):
    """Unified GAN/VAE laboratory: training runs, lemma checks, comparisons."""
    configure_logging(verbose)


@cli.command()
@click.argument("config_path", type=click.Path(dir_okay=False))
@click.option("--base-dir", default=None, help="Output root (UNIGEN_OUTPUT_ROOT overrides).")
def run(config_path: str, base_dir: Optional[str]):
    """Train or verify per an experiment config (JSON/YAML)."""
    with _exit_codes():
        config = load_experiment_config(Path(config_path))
        record = run_experiment(config, _base_dir(base_dir))
    click.echo(f"[run] Done. Manifest at {record.paths.manifest_path}")


@cli.command("verify-lemmas")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--instances", default=100, show_default=True, type=int)
@click.option("--tol", default=1e-5, show_default=True, type=float)
@click.option("--output", type=click.Path(dir_okay=False), default=None, help="Also write the reports as JSONL.")
def verify_lemmas(seed: int, instances: int, tol: float, output: Optional[str]):
    """Check the GAN/VAE identities on seeded random tabular instances."""
    with _exit_codes():
        if instances < 1 or tol <= 0:
            raise ConfigError("--instances must be >= 1 and --tol positive")
        reports = []
        for report in run_suite(seed=seed, instances=instances, tol=tol):
            click.echo(json.dumps(report))
            reports.append(report)
    if output:
        write_jsonl(Path(output), reports)
    failed = sum(1 for r in reports if r.get("passed") is False)
    click.echo(f"[verify-lemmas] {len(reports)} checks, {failed} failed.")
    if failed:
        raise SystemExit(EXIT_CHECKS_FAILED)


@cli.command("eval")
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path(dir_okay=False))
@click.option("--dataset", "dataset_spec", required=True, help="Dataset spec: JSON/YAML file or inline JSON.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--samples", default=1000, show_default=True, type=int)
def evaluate(checkpoint_path: str, dataset_spec: str, seed: int, samples: int):
    """Evaluate a saved checkpoint against a dataset."""
    with _exit_codes():
        ckpt = Path(checkpoint_path)
        params, _ = load_checkpoint(assert_exists(ckpt, "checkpoint"))
        card_path = assert_exists(ckpt.parent / "model_card.json", "model card")
        bundle = ModelBundle.from_card(json.loads(card_path.read_text()), params)
        spec = DatasetSpec.from_mapping(load_dataset_mapping(dataset_spec))
        dataset = build_dataset(spec, seed, n=samples, split="test")
        _check_width(bundle, dataset.dim)
        metrics = evaluate_bundle(bundle, dataset, spec, seed, n=samples)
    click.echo(json.dumps(metrics, indent=2))


def _check_width(bundle: ModelBundle, dim: int) -> None:
    for name in ("discriminator", "encoder"):
        net = bundle.nets.get(name)
        if name == "discriminator" and bundle.meta.get("kind") == "aae":
            continue
        if net is not None and net.in_width != dim:
            raise ConfigError(f"dataset dimension {dim} does not match '{name}' input width {net.in_width}")


@cli.command()
@click.option("--configs", nargs=2, required=True, type=click.Path(dir_okay=False), help="Baseline and candidate configs.")
@click.option("--seeds", default=5, show_default=True, type=int, help="Number of paired seeds (0..N-1).")
@click.option("--workers", default=1, show_default=True, type=int)
@click.option("--base-dir", default=None)
def compare(configs: Tuple[str, str], seeds: int, workers: int, base_dir: Optional[str]):
    """Paired-seed comparison; writes compare.csv with per-seed deltas and medians."""
    with _exit_codes():
        loaded = [(Path(p).stem, load_experiment_config(Path(p))) for p in configs]
        if loaded[0][0] == loaded[1][0]:
            loaded = [(f"{name}_{i}", cfg) for i, (name, cfg) in enumerate(loaded)]
        table, out_path = compare_configs(loaded, list(range(seeds)), _base_dir(base_dir), workers=workers)
    render_table(table)
    click.echo(f"[compare] Done. Deltas at {out_path}")


def main():
    cli()


if __name__ == "__main__":
    main()
