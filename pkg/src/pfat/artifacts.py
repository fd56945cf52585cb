"""Run-directory layout, schema-checked JSON records, and stage manifests."""
from __future__ import annotations

import hashlib
import json
import subprocess
from functools import lru_cache
from importlib import resources
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import jsonschema

SCHEMAS = ("round_report", "gate_report", "metrics", "partition", "manifest", "phase1_summary")


class MissingArtifact(FileNotFoundError):
    """A stage was started before the stage it depends on wrote its outputs."""


@lru_cache(maxsize=None)
def schema(name: str) -> dict:
    if name not in SCHEMAS:
        raise KeyError(name)
    text = resources.files("pfat").joinpath("schemas", f"{name}.v1.json").read_text(encoding="utf-8")
    return json.loads(text)


def stamp(name: str, record: dict) -> dict:
    """Tag a record with its schema id and validate it."""
    out = {"schema": f"pfat.{name}.v1", **record}
    jsonschema.validate(out, schema(name))
    return out


def dumps(record: dict) -> str:
    # allow_nan=False: NaN/inf are not JSON and would break downstream readers
    return json.dumps(record, sort_keys=True, allow_nan=False)


def write_json(path: Path, record: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(record) + "\n", encoding="utf-8")


def write_jsonl(path: Path, records) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for r in records:
            f.write(dumps(r) + "\n")


def read_json(path: Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def read_jsonl(path: Path) -> list[dict]:
    with Path(path).open(encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def package_version() -> str:
    try:
        return version("pfat")
    except PackageNotFoundError:
        return "0+unknown"


@lru_cache(maxsize=None)
def provenance() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=here, capture_output=True,
                             text=True, timeout=5, check=True)
        return f"git:{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        return f"pfat-{package_version()}"


def write_manifest(stage_dir: Path, stage: str, config_hash: str, seed: int) -> dict:
    """Hash every file the stage wrote (sorted, relative paths) into ``manifest.json``."""
    files = {p.relative_to(stage_dir).as_posix(): sha256_file(p)
             for p in sorted(stage_dir.rglob("*")) if p.is_file() and p.name != "manifest.json"}
    record = stamp("manifest", {
        "stage": stage, "config_hash": config_hash, "seed": seed, "provenance": provenance(),
        "package_version": package_version(), "files": files,
    })
    write_json(stage_dir / "manifest.json", record)
    return record


class RunLayout:
    """Where each stage reads and writes inside one run directory."""

    def __init__(self, root):
        self.root = Path(root)

    def stage(self, name: str) -> Path:
        return self.root / name

    @property
    def config_copy(self) -> Path:
        return self.root / "config.yaml"

    def pretrained(self) -> Path:
        return self.stage("partition") / "pretrained.ckpt"

    def shard(self, client_id: int, part: str) -> Path:
        return self.stage("partition") / f"client{client_id:03d}_{part}.csv"

    def partition_record(self) -> Path:
        return self.stage("partition") / "partition.json"

    def phase1_checkpoint(self, client_id: int) -> Path:
        return self.stage("phase1") / f"client{client_id:03d}.ckpt"

    def rounds(self) -> Path:
        return self.stage("phase1") / "rounds.jsonl"

    def phase1_summary(self) -> Path:
        return self.stage("phase1") / "summary.json"

    def phase2_checkpoint(self, client_id: int) -> Path:
        return self.stage("phase2") / f"client{client_id:03d}.ckpt"

    def gates(self) -> Path:
        return self.stage("phase2") / "gates.jsonl"

    def metrics(self) -> Path:
        return self.stage("evaluate") / "metrics.jsonl"

    def require(self, path: Path, producer: str) -> Path:
        if not path.exists():
            raise MissingArtifact(f"{path} not found; run `pfat {producer}` first")
        return path
