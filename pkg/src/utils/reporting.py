"""
Reporting utilities: TSV / JSONL tables written through pandas, the run
manifest, and rich console tables.
"""

import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Union

import pandas as pd
from rich.console import Console
from rich.table import Table

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"

console = Console()


def to_frame(rows: Union[pd.DataFrame, Iterable[Mapping[str, Any]]], columns: Optional[List[str]] = None) -> pd.DataFrame:
    frame = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(list(rows))
    if columns is not None:
        frame = frame.reindex(columns=columns)
    return frame


def write_tsv(rows, path, columns: Optional[List[str]] = None) -> Path:
    """Write rows as a tab-separated table; missing values are left empty."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    to_frame(rows, columns).to_csv(path, sep="\t", index=False, na_rep="", float_format="%.17g")
    return path


def read_tsv(path) -> pd.DataFrame:
    return pd.read_csv(path, sep="\t")


def _json_safe(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    return value


def append_jsonl(record: Dict[str, Any], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as handle:
        handle.write(json.dumps(_json_safe(record), sort_keys=True) + "\n")
    return path


def write_manifest(out_dir, command: str, config: Optional[Dict[str, Any]] = None,
                   extra: Optional[Dict[str, Any]] = None) -> Path:
    """
    List every artifact under ``out_dir`` in ``manifest.json``.

    Args:
        out_dir (str): Run directory
        command (str): CLI command that produced the bundle
        config (dict): Config echo
        extra (dict): Additional fields (hashes, metrics)

    Returns:
        Path: Manifest path
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts = sorted(p.relative_to(out_dir).as_posix() for p in out_dir.rglob("*")
                       if p.is_file() and p.name != MANIFEST_FILE)
    manifest = {"command": command, "artifacts": artifacts, "config": config or {}}
    manifest.update(extra or {})
    path = out_dir / MANIFEST_FILE
    path.write_text(json.dumps(_json_safe(manifest), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info(f"Manifest written: {path} ({len(artifacts)} artifacts)")
    return path


def _cell(value: Any) -> str:
    if isinstance(value, float):
        return "" if math.isnan(value) else f"{value:.4g}"
    return str(value)


def print_table(rows, title: Optional[str] = None) -> None:
    """Render rows (DataFrame or list of dicts) as a rich table on stdout."""
    frame = to_frame(rows)
    table = Table(title=title)
    for column in frame.columns:
        table.add_column(str(column))
    for record in frame.itertuples(index=False):
        table.add_row(*(_cell(v) for v in record))
    console.print(table)
