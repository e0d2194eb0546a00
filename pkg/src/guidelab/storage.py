"""Atomic artifact writes, run manifests, and failure quarantine."""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import time
from pathlib import Path


def atomic_write_json(path, doc) -> Path:
    """Serialize deterministically (sorted keys) and rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)
    return path


def atomic_write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)
    return path


def append_jsonl(path, record: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class RunManifest:
    """Per-run record of artifacts; every referenced file must exist at write time."""

    def __init__(self, run_dir):
        self.run_dir = Path(run_dir)
        self.path = self.run_dir / "manifest.json"
        self.doc = {"format": "guidelab/manifest", "version": 1, "entries": {}}
        if self.path.exists():
            self.doc = json.loads(self.path.read_text(encoding="utf-8"))

    def record(self, command: str, config_sha256: str, artifacts: list, wall_seconds: float) -> None:
        from . import __version__

        rels = []
        for artifact in artifacts:
            p = Path(artifact)
            if not p.exists():
                raise FileNotFoundError(f"manifest references missing artifact: {p}")
            rels.append(os.path.relpath(p, self.run_dir))
        self.doc["config_sha256"] = config_sha256
        self.doc["entries"][command] = {
            "artifacts": sorted(rels),
            "wall_seconds": round(wall_seconds, 3),
            "package_version": __version__,
        }
        atomic_write_json(self.path, self.doc)


class ArtifactSession:
    """Tracks files written by one command; quarantines them if the command fails."""

    def __init__(self, run_dir, command: str):
        self.run_dir = Path(run_dir)
        self.command = command
        self.written: list[Path] = []
        self.t0 = 0.0

    def __enter__(self):
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.t0 = time.monotonic()
        return self

    def track(self, path) -> Path:
        p = Path(path)
        self.written.append(p)
        return p

    @property
    def wall_seconds(self) -> float:
        return time.monotonic() - self.t0

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            return False
        quarantine = self.run_dir / "failed" / f"{self.command}-{os.getpid()}"
        quarantine.mkdir(parents=True, exist_ok=True)
        for p in self.written:
            if p.exists():
                shutil.move(str(p), quarantine / p.name)
        return False
