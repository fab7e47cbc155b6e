"""Paired-seed comparison of two experiment configs (e.g. iwgan vs gan)."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd
from rich.console import Console
from rich.table import Table

from .config import ExperimentConfig, config_hash, output_root
from .optim import NumericalAbort
from .training import run_experiment

logger = logging.getLogger(__name__)

DEFAULT_METRICS = ("high_quality", "smallest_mode_hit", "covered_modes", "jsd_hat", "test_elbo")


def _run_seed(args: Tuple[str, ExperimentConfig, int, Optional[Path]]) -> Dict:
    name, config, seed, base_dir = args
    try:
        record = run_experiment(config.with_seed(seed), base_dir)
    except NumericalAbort as exc:
        logger.error("%s seed %d aborted: %s", name, seed, exc)
        return {"config": name, "seed": seed, "status": "aborted"}
    return {"config": name, "seed": seed, "status": "completed", "run_id": record.run_id, **record.summary}


def paired_deltas(results: pd.DataFrame, baseline: str, candidate: str, metrics: Sequence[str]) -> pd.DataFrame:
    """Per-seed ``candidate - baseline`` for every metric both runs reported, plus a median row."""
    base = results[results["config"] == baseline].set_index("seed")
    cand = results[results["config"] == candidate].set_index("seed")
    seeds = sorted(set(base.index) & set(cand.index))
    rows = []
    for seed in seeds:
        row: Dict = {"seed": seed}
        for metric in metrics:
            if metric in base.columns and metric in cand.columns:
                a, b = base.at[seed, metric], cand.at[seed, metric]
                row[f"{metric}_{baseline}"] = a
                row[f"{metric}_{candidate}"] = b
                row[f"{metric}_delta"] = b - a if pd.notna(a) and pd.notna(b) else float("nan")
        rows.append(row)
    table = pd.DataFrame(rows)
    if not table.empty:
        median = table.drop(columns=["seed"]).median(numeric_only=True).to_dict()
        table = pd.concat([table, pd.DataFrame([{"seed": "median", **median}])], ignore_index=True)
    return table


def compare_configs(
    configs: Sequence[Tuple[str, ExperimentConfig]],
    seeds: Sequence[int],
    base_dir: Optional[Path] = None,
    workers: int = 1,
    metrics: Sequence[str] = DEFAULT_METRICS,
) -> Tuple[pd.DataFrame, Path]:
    """Run every (config, seed) pair, in a process pool when ``workers > 1``."""
    if len(configs) != 2:
        raise ValueError(f"compare needs exactly two configs, got {len(configs)}")
    jobs = [(name, cfg, seed, base_dir) for name, cfg in configs for seed in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results: List[Dict] = list(pool.map(_run_seed, jobs))
    else:
        results = [_run_seed(job) for job in jobs]

    frame = pd.DataFrame(results)
    (base_name, _), (cand_name, _) = configs
    table = paired_deltas(frame, base_name, cand_name, metrics)

    digest = config_hash({name: cfg.to_mapping() for name, cfg in configs} | {"seeds": list(seeds)})
    out_dir = output_root(base_dir) / "runs" / f"compare-{digest[:10]}"
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / "compare.csv"
    table.to_csv(out_path, index=False)
    frame.to_csv(out_dir / "runs.csv", index=False)
    return table, out_path


def render_table(table: pd.DataFrame, console: Optional[Console] = None) -> None:
    console = console or Console()
    view = Table(title="Paired-seed deltas")
    for col in table.columns:
        view.add_column(str(col), justify="right")
    for _, row in table.iterrows():
        view.add_row(*(f"{v:.4g}" if isinstance(v, float) else str(v) for v in row.tolist()))
    console.print(view)
