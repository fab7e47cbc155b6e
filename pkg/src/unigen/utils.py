from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Dict, List

from rich.logging import RichHandler


def configure_logging(verbose: bool = False) -> None:
    level = logging.DEBUG if verbose else logging.INFO
    root = logging.getLogger()
    for handler in list(root.handlers):
        if isinstance(handler, RichHandler):
            root.removeHandler(handler)
    root.addHandler(RichHandler(rich_tracebacks=True, show_path=False, markup=False))
    root.setLevel(level)


def assert_exists(path: Path, what: str = "file") -> Path:
    """Return ``path`` if it names an existing file; ``what`` labels the error."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def load_manifest(path: Path) -> Dict[str, Any]:
    """Read a run manifest; anything without a ``run_id`` is rejected."""
    data = json.loads(assert_exists(path, "run manifest").read_text())
    if not isinstance(data, dict) or "run_id" not in data:
        raise ValueError(f"{path} is not a run manifest")
    return data


def write_jsonl(path: Path, rows: List[Dict[str, Any]]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")
    return path


def read_jsonl(path: Path) -> List[Dict[str, Any]]:
    assert_exists(path, "JSONL file")
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
