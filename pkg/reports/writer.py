# =============================================================
# ImpactLens - Report Bundle Writer
#
# Files are staged in a hidden sibling directory and moved into
# place only when the whole run succeeded. A failed run leaves
# the previous bundle (if any) untouched.
# =============================================================

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import tempfile
from importlib import metadata
from typing import Any

import numpy as np
import pandas as pd
from pydantic import BaseModel

from reports.models import InputFile, RunManifest
from services.errors import ConfigError
from services.forward_bootstrap import save_draws

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
PACKAGES = ("numpy", "scipy", "pandas", "pydantic", "python-dotenv")


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def package_versions() -> dict[str, str]:
    versions = {}
    for name in PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "unknown"
    return versions


class ReportBundle:
    """
    Usage:
        with ReportBundle(out_dir, seed=7, command="report") as bundle:
            bundle.write_table("effects.csv", frame)
    Leaving the block without an exception publishes the bundle.
    """

    def __init__(self, output_dir: str, seed: int, command: str, config: dict[str, Any] | None = None):
        self.output_dir = os.path.abspath(output_dir)
        self.seed = seed
        self.command = command
        self.config = config or {}
        self._inputs: list[InputFile] = []
        self._files: list[str] = []
        self._staging: str | None = None

    # -- lifecycle -----------------------------------------------------

    def __enter__(self) -> "ReportBundle":
        parent = os.path.dirname(self.output_dir) or "."
        try:
            os.makedirs(parent, exist_ok=True)
            self._staging = tempfile.mkdtemp(prefix=".impactlens-", dir=parent)
        except OSError as e:
            raise ConfigError(f"output directory {self.output_dir} is not writable: {e}") from e
        logger.debug("bundle staging | dir=%s", self._staging)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        if exc_type is None:
            self.commit()
        else:
            self.discard()
        return False

    def commit(self) -> None:
        self.write_json(MANIFEST_NAME, RunManifest(
            command=self.command,
            seed=self.seed,
            inputs=sorted(self._inputs, key=lambda i: i.path),
            config=self.config,
            packages=package_versions(),
            files=sorted(self._files),
        ))
        backup = None
        if os.path.exists(self.output_dir):
            backup = self._staging + ".previous"
            os.replace(self.output_dir, backup)
        os.replace(self._staging, self.output_dir)
        if backup:
            shutil.rmtree(backup, ignore_errors=True)
        logger.info("bundle written | dir=%s | files=%d", self.output_dir, len(self._files) + 1)
        self._staging = None

    def discard(self) -> None:
        if self._staging:
            shutil.rmtree(self._staging, ignore_errors=True)
            logger.info("bundle discarded | dir=%s", self.output_dir)
            self._staging = None

    # -- content -------------------------------------------------------

    def _path(self, name: str) -> str:
        if self._staging is None:
            raise RuntimeError("ReportBundle is not open")
        path = os.path.join(self._staging, name)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        self._files.append(name)
        return path

    def add_input(self, path: str | None) -> None:
        if path:
            self._inputs.append(InputFile(path=path, sha256=sha256_file(path)))

    def write_table(self, name: str, frame: pd.DataFrame, index: bool = False) -> None:
        with open(self._path(name), "w", newline="") as f:
            f.write(f"# impactlens seed={self.seed}\n")
            frame.to_csv(f, index=index, float_format="%.6f")

    def write_json(self, name: str, payload: BaseModel | dict[str, Any]) -> None:
        data = payload.model_dump(mode="json") if isinstance(payload, BaseModel) else payload
        with open(self._path(name), "w") as f:
            json.dump(data, f, sort_keys=True, indent=2, default=_json_default)
            f.write("\n")

    def write_text(self, name: str, text: str) -> None:
        with open(self._path(name), "w") as f:
            f.write(text.rstrip("\n") + "\n")

    def write_draws(self, name: str, draws: np.ndarray) -> None:
        save_draws(self._path(name), draws)


def _json_default(value):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if hasattr(value, "isoformat"):
        return value.isoformat()
    raise TypeError(f"cannot serialize {type(value).__name__}")


def read_table(path: str) -> pd.DataFrame:
    """Reads a bundle CSV, skipping the seed header line."""
    return pd.read_csv(path, skiprows=1)
