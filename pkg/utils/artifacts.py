"""
Artifact Writing Utilities
Versioned CSV tables, profile triplet files, config hashing and the experiment MANIFEST
"""

import hashlib
import json
from datetime import datetime
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Union

import pandas as pd
from pydantic import BaseModel

from utils.logger import get_logger

logger = get_logger("utils.artifacts")

SCHEMA_VERSION = 1
FLOAT_FORMAT = "%.17g"
TRACKED_PACKAGES = ("numpy", "scipy", "pandas", "pydantic", "langgraph", "python-dotenv")

PathLike = Union[str, Path]


def canonical_json(config: BaseModel) -> str:
    return json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))


def config_hash(config: BaseModel) -> str:
    """First 12 hex characters of the SHA-256 of the canonical config JSON"""
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()[:12]


def stamp(frame: pd.DataFrame, config_hash_value: str,
          leading: Optional[Dict[str, Any]] = None) -> pd.DataFrame:
    """Prefix schema_version, any leading columns and config_hash"""
    stamped = frame.copy()
    columns = {"schema_version": SCHEMA_VERSION, **(leading or {}), "config_hash": config_hash_value}
    for position, (name, value) in enumerate(columns.items()):
        stamped.insert(position, name, value)
    return stamped


def write_csv(frame: pd.DataFrame, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def read_csv(path: PathLike) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip")


def aggregate_csv(paths: Iterable[PathLike], destination: PathLike) -> Optional[Path]:
    """Concatenate per-cell tables in the given order; None when no table exists"""
    frames = [read_csv(path) for path in paths if Path(path).exists()]
    if not frames:
        return None
    return write_csv(pd.concat(frames, ignore_index=True), destination)


def write_text(text: str, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def package_versions() -> Dict[str, str]:
    versions = {}
    for package in TRACKED_PACKAGES:
        try:
            versions[package] = metadata.version(package)
        except metadata.PackageNotFoundError:
            versions[package] = "unknown"
    return versions


def write_manifest(path: PathLike, experiment_id: str, config_hash_value: str,
                   cells: Dict[str, Dict[str, Any]], failed_stage: Optional[str],
                   tables: Dict[str, str], started_at: datetime,
                   extra: Optional[Dict[str, Any]] = None) -> Path:
    """MANIFEST.json: config hash, package versions, stage statuses and timestamps"""
    payload = {
        "experiment_id": experiment_id,
        "config_hash": config_hash_value,
        "schema_version": SCHEMA_VERSION,
        "versions": package_versions(),
        "status": "failed" if failed_stage else "completed",
        "failed_stage": failed_stage,
        "cells": cells,
        "tables": tables,
        "started_at": started_at.isoformat(),
        "finished_at": datetime.now().isoformat(),
        **(extra or {}),
    }
    path = write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", path)
    logger.info(f"Wrote manifest {path}")
    return path
