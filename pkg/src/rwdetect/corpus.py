"""Sample metadata, time-aware splitting, and synthetic corpus generation.

The metadata table is CSV with the exact header

    sample_id,sha256,label,ransomware_type,family,first_submission,source

The time-aware split strata are goodware (one stratum) plus one stratum
per ransomware type; within a stratum records are ordered by
(first_submission, sample_id) and the earliest floor(ratio*n) go to train.

The synthetic generator plants class-conditional features into otherwise
class-independent noise so selection and training can be tested against a
known ground truth. All randomness flows through splitmix64 streams
derived per report index, making corpora byte-identical across runs.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path
from typing import Iterator, Mapping, Optional, Sequence

import numpy as np

from .errors import BadDate, DuplicateSampleId, PipelineError, SchemaMismatch
from .features import GROUPS, SparseBinaryMatrix, feature_group
from .prng import derive_stream
from .report_ingest import (
    GOODWARE,
    RANSOMWARE,
    RANSOMWARE_TYPES,
    SampleMetadata,
    SandboxReport,
    parse_report,
)

logger = logging.getLogger(__name__)

METADATA_HEADER = (
    "sample_id",
    "sha256",
    "label",
    "ransomware_type",
    "family",
    "first_submission",
    "source",
)


@dataclass
class LabeledDataset:
    """Matrix rows joined with labels and metadata, in matrix row order."""

    matrix: SparseBinaryMatrix
    labels: np.ndarray
    meta: list[SampleMetadata]
    class_names: tuple[str, ...]


@dataclass
class SplitPlan:
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    ratio: float


def load_metadata(table_path: Path) -> list[SampleMetadata]:
    """Parse the metadata CSV; schema violations are fatal with a row number."""
    path = Path(table_path)
    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaMismatch(f"{path}: empty file, expected header row") from None
        if tuple(header) != METADATA_HEADER:
            raise SchemaMismatch(
                f"{path}: row 1: header {header!r} does not match "
                f"{','.join(METADATA_HEADER)}"
            )
        records: list[SampleMetadata] = []
        seen: set[str] = set()
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(METADATA_HEADER):
                raise SchemaMismatch(f"{path}: row {row_no}: expected 7 fields, got {len(row)}")
            sample_id, sha256, label, rtype, family, first_submission, source = row
            if label not in (GOODWARE, RANSOMWARE):
                raise SchemaMismatch(f"{path}: row {row_no}: unknown label {label!r}")
            if label == GOODWARE and (rtype or family):
                raise SchemaMismatch(
                    f"{path}: row {row_no}: goodware must not carry type/family"
                )
            if rtype and rtype not in RANSOMWARE_TYPES:
                raise SchemaMismatch(f"{path}: row {row_no}: unknown type {rtype!r}")
            if not sample_id:
                raise SchemaMismatch(f"{path}: row {row_no}: empty sample_id")
            if sample_id in seen:
                raise DuplicateSampleId(f"{path}: row {row_no}: duplicate id {sample_id!r}")
            seen.add(sample_id)
            try:
                submitted = date.fromisoformat(first_submission)
            except ValueError:
                raise BadDate(
                    f"{path}: row {row_no}: bad first_submission {first_submission!r}"
                ) from None
            records.append(
                SampleMetadata(
                    sample_id=sample_id,
                    sha256=sha256,
                    label=label,
                    ransomware_type=rtype or None,
                    family=family or None,
                    first_submission=submitted,
                    source=source,
                )
            )
    return records


def write_metadata(records: Sequence[SampleMetadata], path: Path) -> None:
    lines = [",".join(METADATA_HEADER)]
    for m in records:
        lines.append(
            ",".join(
                (
                    m.sample_id,
                    m.sha256,
                    m.label,
                    m.ransomware_type or "",
                    m.family or "",
                    m.first_submission.isoformat(),
                    m.source,
                )
            )
        )
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("utf-8"))


def stratum_of(meta: SampleMetadata) -> str:
    if meta.label == GOODWARE:
        return GOODWARE
    return meta.ransomware_type or "unspecified"


def time_aware_split(meta: Sequence[SampleMetadata], ratio: float) -> SplitPlan:
    """Chronological per-stratum split: earliest floor(ratio*n) train, rest test.

    Strata smaller than 2 go entirely to train (with a warning) so every
    test sample has at least one earlier training sample of its stratum.
    """
    if not 0 < ratio < 1:
        raise PipelineError(f"split ratio must be in (0,1), got {ratio}")
    strata: dict[str, list[SampleMetadata]] = {}
    for m in meta:
        strata.setdefault(stratum_of(m), []).append(m)

    train: list[str] = []
    test: list[str] = []
    for key in sorted(strata):
        records = sorted(strata[key], key=lambda m: (m.first_submission, m.sample_id))
        if len(records) < 2:
            logger.warning("stratum %r has %d sample(s); kept entirely in train", key, len(records))
            train.extend(m.sample_id for m in records)
            continue
        cut = int(np.floor(ratio * len(records)))
        train.extend(m.sample_id for m in records[:cut])
        test.extend(m.sample_id for m in records[cut:])
    return SplitPlan(tuple(train), tuple(test), ratio)


def random_split(meta: Sequence[SampleMetadata], ratio: float, seed: int) -> SplitPlan:
    """Non-temporal shuffle split. Override path only: it ignores submission
    dates entirely, so results are optimistic under concept drift."""
    if not 0 < ratio < 1:
        raise PipelineError(f"split ratio must be in (0,1), got {ratio}")
    ids = sorted(m.sample_id for m in meta)
    rng = np.random.default_rng(seed)
    rng.shuffle(ids)
    cut = int(np.floor(ratio * len(ids)))
    return SplitPlan(tuple(ids[:cut]), tuple(ids[cut:]), ratio)


def write_split_plan(plan: SplitPlan, path: Path) -> None:
    lines = ["[train]"]
    lines.extend(plan.train_ids)
    lines.append("[test]")
    lines.extend(plan.test_ids)
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("utf-8"))


def read_split_plan(path: Path, ratio: float = 0.8) -> SplitPlan:
    lines = Path(path).read_bytes().decode("utf-8").splitlines()
    if not lines or lines[0] != "[train]":
        raise PipelineError(f"malformed split plan: {path}")
    sections: dict[str, list[str]] = {"train": [], "test": []}
    current = "train"
    for line in lines[1:]:
        if line == "[test]":
            current = "test"
        elif line:
            sections[current].append(line)
    return SplitPlan(tuple(sections["train"]), tuple(sections["test"]), ratio)


# ---------------------------------------------------------------------------
# Labelling tasks
# ---------------------------------------------------------------------------

TASKS = ("binary", "type", "family")


def class_names_for_task(task: str, meta: Sequence[SampleMetadata]) -> tuple[str, ...]:
    if task == "binary":
        return (GOODWARE, RANSOMWARE)
    if task == "type":
        return (GOODWARE,) + RANSOMWARE_TYPES
    if task == "family":
        families = sorted(
            {m.family or "unspecified" for m in meta if m.label == RANSOMWARE}
        )
        return (GOODWARE,) + tuple(families)
    raise PipelineError(f"unknown task {task!r}")


def label_index(meta: SampleMetadata, task: str, class_names: Sequence[str]) -> int:
    if task == "binary":
        return 0 if meta.label == GOODWARE else 1
    if task == "type":
        key = GOODWARE if meta.label == GOODWARE else (meta.ransomware_type or "unspecified")
    else:
        key = GOODWARE if meta.label == GOODWARE else (meta.family or "unspecified")
    try:
        return class_names.index(key)
    except ValueError:
        raise PipelineError(f"sample {meta.sample_id}: class {key!r} not in task classes") from None


def build_dataset(
    matrix: SparseBinaryMatrix,
    meta: Sequence[SampleMetadata],
    task: str,
    class_names: Optional[tuple[str, ...]] = None,
) -> LabeledDataset:
    """Join matrix rows with metadata by sample_id; missing metadata is fatal."""
    by_id = {m.sample_id: m for m in meta}
    names = class_names or class_names_for_task(task, meta)
    row_meta = []
    labels = np.zeros(matrix.n_rows, dtype=np.int64)
    for i, sample_id in enumerate(matrix.row_ids):
        m = by_id.get(sample_id)
        if m is None:
            raise SchemaMismatch(f"no metadata row for sample {sample_id!r}")
        row_meta.append(m)
        labels[i] = label_index(m, task, names)
    return LabeledDataset(matrix, labels, row_meta, tuple(names))


# ---------------------------------------------------------------------------
# Synthetic corpora with planted signal
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PlantedFeature:
    name: str
    label: str  # class whose reports carry the feature at hit_rate
    hit_rate: float
    leak_rate: float


@dataclass
class SynthSpec:
    """Deterministic description of a synthetic corpus."""

    seed: int
    n_goodware: int
    n_ransomware: int
    n_noise_features: Mapping[str, int] = field(
        default_factory=lambda: {g: 10 for g in GROUPS}
    )
    planted: Sequence[PlantedFeature] = ()
    background_rate: float = 0.3
    goodware_dates: tuple[date, date] = (date(2014, 1, 1), date(2023, 12, 31))
    ransomware_dates: tuple[date, date] = (date(2014, 1, 1), date(2023, 12, 31))

    def validate(self) -> None:
        if self.n_goodware < 0 or self.n_ransomware < 0:
            raise PipelineError("sample counts must be >= 0")
        for p in self.planted:
            if not p.hit_rate > p.leak_rate:
                raise PipelineError(
                    f"planted feature {p.name!r}: hit_rate must exceed leak_rate"
                )
            if p.label not in (GOODWARE, RANSOMWARE):
                raise PipelineError(f"planted feature {p.name!r}: bad label {p.label!r}")


# Template noise feature names per group; {i} is the feature index.
_NOISE_TEMPLATES = {
    "API": "API:NtNoiseCall{i:04d}",
    "REG": "REG:OPENED:hkey_local_machine\\software\\noise\\key{i:04d}",
    "FILE": "FILE:CREATED:c:\\users\\admin\\noise_{i:04d}.tmp",
    "DIR": "DIRECTORY:ENUMERATED:c:\\noisedir\\{i:04d}",
    "STR": "STRING:noise_token_{i:04d}",
    "NET": "NETWORK:RESOLVES_HOST:noise{i:04d}.example.net",
    "SYS": "SYSTEM:MUTEX:NoiseMutex{i:04d}",
    "DROP": "DROP:EXTENSION:.nz{i:04d}",
    "SIG": "SIGNATURE:noise_signature_{i:04d}",
}


def default_planted(count: int = 20, hit_rate: float = 0.9, leak_rate: float = 0.05) -> list[PlantedFeature]:
    """Evenly alternating ransomware/goodware markers across varied groups."""
    templates = [
        "SIGNATURE:planted_marker_{i:02d}",
        "API:PlantedApiCall{i:02d}",
        "REG:WRITTEN:hkey_local_machine\\software\\planted\\{i:02d}",
        "STRING:planted_token_{i:02d}",
        "SYSTEM:MUTEX:PlantedMutex{i:02d}",
    ]
    planted = []
    for i in range(count):
        template = templates[i % len(templates)]
        label = RANSOMWARE if i % 2 == 0 else GOODWARE
        planted.append(PlantedFeature(template.format(i=i), label, hit_rate, leak_rate))
    return planted


def noise_feature_names(spec: SynthSpec) -> list[str]:
    names = []
    for group in GROUPS:
        count = spec.n_noise_features.get(group, 0)
        template = _NOISE_TEMPLATES[group]
        names.extend(template.format(i=i) for i in range(count))
    return names


def _place_feature(doc: dict, canonical: str) -> None:
    """Insert one canonical feature into a report document (extraction inverse)."""
    group = feature_group(canonical)
    rest = canonical.split(":", 1)[1] if group in ("API", "STR", "SIG") else canonical.split(":", 2)[2]
    if group == "API":
        doc.setdefault("behavior", {}).setdefault("apistats", {}).setdefault("1", {})[rest] = 1
        return
    if group == "STR":
        doc.setdefault("strings", []).append(rest)
        return
    if group == "SIG":
        doc.setdefault("signatures", []).append(rest)
        return
    action = canonical.split(":", 2)[1]
    if group == "REG":
        key = "regkey_" + action.lower()
    elif group == "FILE":
        key = "file_" + action.lower()
    elif group == "DIR":
        key = "directory_" + action.lower()
    elif group == "SYS":
        key = action.lower()
    elif group == "NET":
        doc.setdefault("network", {}).setdefault(action.lower(), []).append(rest)
        return
    else:  # DROP
        records = doc.setdefault("dropped", [])
        if action == "EXTENSION":
            records.append({"extension": rest})
        else:
            records.append({"type": rest})
        return
    doc.setdefault("behavior", {}).setdefault("summary", {}).setdefault(key, []).append(rest)


def _report_document(feature_names: Sequence[str]) -> dict:
    doc: dict = {}
    for name in feature_names:
        _place_feature(doc, name)
    return doc


def _spread_date(span: tuple[date, date], index: int, count: int) -> date:
    if count <= 1:
        return span[0]
    days = (span[1] - span[0]).days
    return span[0] + timedelta(days=(days * index) // max(1, count - 1))


def synth_samples(
    spec: SynthSpec,
) -> Iterator[tuple[SampleMetadata, list[str]]]:
    """Yield (metadata, feature names) per sample, goodware first.

    Feature draws come from a stream derived per report index, so any
    subset of reports can be regenerated independently and identically.
    """
    spec.validate()
    noise = noise_feature_names(spec)
    classes = [(GOODWARE, spec.n_goodware, spec.goodware_dates), (RANSOMWARE, spec.n_ransomware, spec.ransomware_dates)]
    report_index = 0
    for label, count, dates in classes:
        for i in range(count):
            stream = derive_stream(spec.seed, report_index)
            names = []
            for p in spec.planted:
                rate = p.hit_rate if p.label == label else p.leak_rate
                if stream.next_float() < rate:
                    names.append(p.name)
            for noise_name in noise:
                if stream.next_float() < spec.background_rate:
                    names.append(noise_name)
            sample_id = ("g" if label == GOODWARE else "r") + f"{i:05d}"
            sha = f"{derive_stream(spec.seed, report_index, 0xC0FFEE).next_u64():016x}" * 4
            meta = SampleMetadata(
                sample_id=sample_id,
                sha256=sha,
                label=label,
                ransomware_type=None if label == GOODWARE else RANSOMWARE_TYPES[i % 4],
                family=None if label == GOODWARE else "fam_" + RANSOMWARE_TYPES[i % 4],
                first_submission=_spread_date(dates, i, count),
                source="synthetic",
            )
            yield meta, names
            report_index += 1


def synth_reports(spec: SynthSpec) -> Iterator[tuple[SampleMetadata, SandboxReport]]:
    """In-memory variant of generate_corpus (same bytes, no files)."""
    for meta, names in synth_samples(spec):
        document = json.dumps(_report_document(names), sort_keys=True, ensure_ascii=False)
        yield meta, parse_report(document)


def generate_corpus(spec: SynthSpec, out_dir: Path) -> tuple[Path, Path]:
    """Write report files plus metadata.csv; pure function of the spec."""
    out_dir = Path(out_dir)
    reports_dir = out_dir / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for meta, names in synth_samples(spec):
        document = json.dumps(
            _report_document(names), sort_keys=True, ensure_ascii=False, indent=1
        )
        (reports_dir / f"{meta.sample_id}.json").write_bytes(document.encode("utf-8"))
        records.append(meta)
    metadata_path = out_dir / "metadata.csv"
    write_metadata(records, metadata_path)
    return reports_dir, metadata_path
