"""Versioned pipeline store with hot reload, A/B routing, and experiment
metric aggregation.

The store is file-directory backed (``*.pipeline.json``), diffable, and
zero-dependency. Readers are lock-free: each entry's active version is one
reference to an immutable (digest, pipeline, loadedAt) record, swapped
atomically under a writer lock, so a reader sees either the old or the new
version, never a mix. Version history is append-only; rollback reactivates
a stored version without deleting anything.
"""

from __future__ import annotations

import hashlib
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path

from .analysis import SignatureSet, validate
from .canonical import canonical_json, parse_json
from .errors import EngineError
from .executor import RunMetrics
from .ir import Pipeline, PipelineDigest, hash_pipeline, parse_ir


@dataclass(frozen=True)
class PipelineVersion:
    digest: str
    pipeline: Pipeline
    loaded_at_ms: float


@dataclass
class _Entry:
    versions: list[PipelineVersion]
    active: PipelineVersion


@dataclass(frozen=True)
class LoadIssue:
    file: str
    reason: str


class PipelineRegistry:
    """Name -> versioned pipelines with an atomically swapped active pointer."""

    def __init__(self) -> None:
        self._entries: dict[str, _Entry] = {}
        self._lock = threading.Lock()
        self.load_issues: list[LoadIssue] = []

    # -- read side (lock-free) -------------------------------------------

    def get(self, name: str, default=None):
        entry = self._entries.get(name)
        return entry.active.pipeline if entry is not None else default

    def __getitem__(self, name: str) -> Pipeline:
        pipeline = self.get(name)
        if pipeline is None:
            raise KeyError(name)
        return pipeline

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self):
        return iter(list(self._entries))

    def __len__(self) -> int:
        return len(self._entries)

    def keys(self):
        return list(self._entries)

    def items(self):
        return [(name, entry.active.pipeline) for name, entry in list(self._entries.items())]

    def active_version(self, name: str) -> PipelineVersion:
        entry = self._entries.get(name)
        if entry is None:
            raise EngineError("PIPELINE_NOT_FOUND", f"pipeline {name!r} is not registered")
        return entry.active

    def active_digest(self, name: str) -> PipelineDigest:
        return PipelineDigest(self.active_version(name).digest)

    def versions(self, name: str) -> list[PipelineVersion]:
        entry = self._entries.get(name)
        if entry is None:
            raise EngineError("PIPELINE_NOT_FOUND", f"pipeline {name!r} is not registered")
        return list(entry.versions)

    # -- write side (single-writer) ----------------------------------------

    def register(self, pipeline: Pipeline, now_ms: float = 0.0) -> PipelineDigest:
        if not pipeline.name:
            raise EngineError("BAD_IR", "cannot register a pipeline without a name")
        digest = hash_pipeline(pipeline).digest
        version = PipelineVersion(digest, pipeline, now_ms)
        with self._lock:
            entry = self._entries.get(pipeline.name)
            if entry is None:
                self._entries[pipeline.name] = _Entry(versions=[version], active=version)
            else:
                entry.versions.append(version)
                entry.active = version
        return PipelineDigest(digest)

    def reload(self, name: str, json_text: str, sigs: SignatureSet | None = None,
               now_ms: float = 0.0, strict: bool = True) -> PipelineDigest:
        """Validate, append, and activate a new version atomically.

        On validation failure the active version is unchanged. In-flight
        executions keep the snapshot they started with.
        """
        pipeline = parse_ir(json_text, strict=strict)
        if pipeline.name != name:
            raise EngineError("NAME_MISMATCH",
                              f"file declares pipeline {pipeline.name!r}, expected {name!r}")
        report = validate(pipeline, sigs, self)
        if not report.ok:
            details = "; ".join(f"{f.code}: {f.message}" for f in report.errors)
            raise EngineError("VALIDATION_FAILED", f"reload of {name!r} rejected: {details}")
        return self.register(pipeline, now_ms)

    def rollback(self, name: str, digest: str | PipelineDigest) -> PipelineDigest:
        """Reactivate any stored version by digest; history is kept intact."""
        wanted = digest.digest if isinstance(digest, PipelineDigest) else digest
        with self._lock:
            entry = self._entries.get(name)
            if entry is None:
                raise EngineError("PIPELINE_NOT_FOUND", f"pipeline {name!r} is not registered")
            for version in entry.versions:
                if version.digest == wanted:
                    entry.active = version
                    return PipelineDigest(wanted)
        raise EngineError("VERSION_NOT_FOUND",
                          f"digest {wanted[:12]}... not among versions of {name!r}")


def load_directory(path: str | Path, sigs: SignatureSet | None = None,
                   strict: bool = True) -> PipelineRegistry:
    """Load every ``*.pipeline.json`` under a directory into a registry.

    Invalid files are reported on ``registry.load_issues`` and skipped;
    duplicate pipeline names across files are an error.
    """
    directory = Path(path)
    if not directory.is_dir():
        raise EngineError("IO_ERROR", f"not a readable directory: {directory}")
    registry = PipelineRegistry()
    seen_names: dict[str, str] = {}
    for file in sorted(directory.glob("*.pipeline.json")):
        try:
            text = file.read_text(encoding="utf-8")
            pipeline = parse_ir(text, strict=strict)
            report = validate(pipeline, sigs, None)
            if not report.ok:
                details = "; ".join(f"{f.code}: {f.message}" for f in report.errors)
                registry.load_issues.append(LoadIssue(file.name, details))
                continue
            if pipeline.name in seen_names:
                raise EngineError(
                    "DUPLICATE_NAME",
                    f"pipeline {pipeline.name!r} defined in both {seen_names[pipeline.name]} "
                    f"and {file.name}")
            seen_names[pipeline.name] = file.name
            registry.register(pipeline)
        except EngineError as e:
            if e.code == "DUPLICATE_NAME":
                raise
            registry.load_issues.append(LoadIssue(file.name, str(e)))
    return registry


# --------------------------------------------------------------------------
# A/B experiments

@dataclass(frozen=True)
class Variant:
    name: str
    pipeline_name: str
    weight: float

    def __post_init__(self) -> None:
        if self.weight < 0:
            raise EngineError("BAD_CONFIG", f"variant {self.name!r} has negative weight")


@dataclass(frozen=True)
class ExperimentConfig:
    experiment_id: str
    variants: tuple[Variant, ...]
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.variants:
            raise EngineError("BAD_CONFIG", "experiment needs at least one variant")
        if sum(v.weight for v in self.variants) <= 0:
            raise EngineError("BAD_CONFIG", "variant weights must sum to a positive value")

    @classmethod
    def from_jsonable(cls, data) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise EngineError("BAD_CONFIG", "experiment config must be a JSON object")
        variants = tuple(
            Variant(name=str(v["name"]), pipeline_name=str(v["pipelineName"]),
                    weight=float(v["weight"]))
            for v in data.get("variants", ())
        )
        return cls(experiment_id=str(data.get("experimentId", "exp")),
                   variants=variants, seed=int(data.get("seed", 0)))

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_jsonable(parse_json(text))


def _hash64(seed: int | str, session_key: str) -> int:
    raw = f"{seed}:{session_key}".encode("utf-8")
    return int.from_bytes(hashlib.sha256(raw).digest()[:8], "big")


def route(exp: ExperimentConfig, session_key: str) -> str:
    """Deterministic weighted assignment of a session key to one variant."""
    u = _hash64(exp.seed, session_key) / float(2**64)
    total = sum(v.weight for v in exp.variants)
    cumulative = 0.0
    for variant in exp.variants:
        cumulative += variant.weight / total
        if u < cumulative:
            return variant.name
    return exp.variants[-1].name  # u == 1 - eps edge with float rounding


# --------------------------------------------------------------------------
# Experiment reports

@dataclass
class _VariantStats:
    runs: int = 0
    successes: int = 0
    steps: list[int] = field(default_factory=list)
    latencies_ms: list[float] = field(default_factory=list)
    tool_calls: list[int] = field(default_factory=list)


class ExperimentReport:
    """Per-variant aggregates for one experiment."""

    def __init__(self, exp: ExperimentConfig):
        self.experiment = exp
        self._stats: dict[str, _VariantStats] = {v.name: _VariantStats() for v in exp.variants}
        self._lock = threading.Lock()

    def record_run(self, variant: str, metrics: RunMetrics, success: bool) -> None:
        stats = self._stats.get(variant)
        if stats is None:
            raise EngineError("UNKNOWN_VARIANT", f"variant {variant!r} not in experiment")
        with self._lock:
            stats.runs += 1
            if success:
                stats.successes += 1
            stats.steps.append(metrics.steps_executed)
            stats.latencies_ms.append(metrics.wall_time_ms)
            stats.tool_calls.append(metrics.tool_calls)

    def compare(self) -> dict:
        """Per-variant table sorted by success rate (best first)."""
        rows = []
        for name, stats in self._stats.items():
            runs = stats.runs
            rows.append({
                "variant": name,
                "runs": runs,
                "successRate": (stats.successes / runs) if runs else 0.0,
                "meanSteps": (sum(stats.steps) / runs) if runs else 0.0,
                "p95LatencyMs": percentile_95(stats.latencies_ms) if runs else 0.0,
                "meanToolCalls": (sum(stats.tool_calls) / runs) if runs else 0.0,
            })
        rows.sort(key=lambda r: (-r["successRate"], r["variant"]))
        return {"experimentId": self.experiment.experiment_id, "variants": rows}

    def to_json(self) -> str:
        return canonical_json(self.compare())


def percentile_95(values: list[float]) -> float:
    """Nearest-rank (exclusive) 95th percentile.

    The rank is ceil(0.95 * n) used as a zero-based index, clamped to the
    maximum; on [1ms x 100, 200ms x 5] this lands on 200ms.
    """
    if not values:
        return 0.0
    ordered = sorted(values)
    index = min(len(ordered) - 1, math.ceil(0.95 * len(ordered)))
    return ordered[index]
