"""Parsing of sandbox behavioural reports (Cuckoo-compatible JSON).

A report document is one JSON object per analysed sample. The sections we
read are:

    behavior.apistats            {pid: {api_name: call_count}}
    behavior.summary             {summary_key: [string, ...]}
    strings                      [string, ...]
    network.connects_ip / connects_host / resolves_host
    dropped                      [{extension: str, type: str}, ...]
    signatures                   [name, ...] or [{name: ...}, ...]

Anything absent maps to an empty collection; unknown sections are ignored.
Strings are kept verbatim, byte-for-byte. Only JSON syntax errors raise
MalformedDocument; any shape of valid JSON parses to *some* report.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Iterator, Optional

from .errors import DuplicateSampleId, MalformedDocument, PipelineError

logger = logging.getLogger(__name__)

REPORT_SUFFIX = ".json"

# behavior.summary keys carried into the typed model, in report order.
SUMMARY_KEYS = (
    "regkey_opened",
    "regkey_deleted",
    "regkey_read",
    "regkey_written",
    "file_created",
    "file_deleted",
    "file_written",
    "file_opened",
    "directory_created",
    "directory_enumerated",
    "dll_loaded",
    "command_line",
    "mutex",
    "guid",
)

NETWORK_KEYS = ("connects_ip", "connects_host", "resolves_host")

GOODWARE = "goodware"
RANSOMWARE = "ransomware"
RANSOMWARE_TYPES = ("locker", "crypto", "raas", "modern")


@dataclass(frozen=True)
class DroppedFile:
    """One dropped-file record; missing fields stay None (no feature emitted)."""

    extension: Optional[str] = None
    type: Optional[str] = None


@dataclass(frozen=True)
class SandboxReport:
    """Immutable typed view of one behavioural report."""

    api_stats: dict[str, dict[str, int]] = field(default_factory=dict)
    summary: dict[str, tuple[str, ...]] = field(default_factory=dict)
    strings: tuple[str, ...] = ()
    connects_ip: tuple[str, ...] = ()
    connects_host: tuple[str, ...] = ()
    resolves_host: tuple[str, ...] = ()
    dropped: tuple[DroppedFile, ...] = ()
    signatures: tuple[str, ...] = ()


@dataclass(frozen=True)
class SampleMetadata:
    """Identity, label and timing for one sample; drives the time-aware split."""

    sample_id: str
    sha256: str
    label: str
    ransomware_type: Optional[str]
    family: Optional[str]
    first_submission: date
    source: str


def _string_list(value) -> tuple[str, ...]:
    if not isinstance(value, list):
        return ()
    return tuple(v for v in value if isinstance(v, str))


def _parse_api_stats(value) -> dict[str, dict[str, int]]:
    if not isinstance(value, dict):
        return {}
    stats: dict[str, dict[str, int]] = {}
    for pid, apis in value.items():
        if not isinstance(apis, dict):
            continue
        per_pid: dict[str, int] = {}
        for api, count in apis.items():
            if not isinstance(api, str):
                continue
            # Counts are clamped to non-negative ints; presence is what
            # matters downstream, so unparseable counts degrade to 0.
            if isinstance(count, bool) or not isinstance(count, (int, float)):
                per_pid[api] = 0
            else:
                per_pid[api] = max(0, int(count))
        stats[str(pid)] = per_pid
    return stats


def _parse_dropped(value) -> tuple[DroppedFile, ...]:
    if not isinstance(value, list):
        return ()
    records = []
    for entry in value:
        if not isinstance(entry, dict):
            continue
        ext = entry.get("extension")
        ftype = entry.get("type")
        records.append(
            DroppedFile(
                extension=ext if isinstance(ext, str) else None,
                type=ftype if isinstance(ftype, str) else None,
            )
        )
    return tuple(records)


def _parse_signatures(value) -> tuple[str, ...]:
    if not isinstance(value, list):
        return ()
    names = []
    for entry in value:
        if isinstance(entry, str):
            names.append(entry)
        elif isinstance(entry, dict) and isinstance(entry.get("name"), str):
            names.append(entry["name"])
    return tuple(names)


def parse_report(document_text: str) -> SandboxReport:
    """Parse one report document into a SandboxReport.

    Raises MalformedDocument on JSON syntax errors only; every valid JSON
    document (of any shape) yields a report with absent sections empty.
    """
    try:
        doc = json.loads(document_text)
    except json.JSONDecodeError as exc:
        raise MalformedDocument(f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        return SandboxReport()

    behavior = doc.get("behavior")
    behavior = behavior if isinstance(behavior, dict) else {}
    raw_summary = behavior.get("summary")
    raw_summary = raw_summary if isinstance(raw_summary, dict) else {}
    summary = {}
    for key in SUMMARY_KEYS:
        values = _string_list(raw_summary.get(key))
        if values:
            summary[key] = values

    network = doc.get("network")
    network = network if isinstance(network, dict) else {}

    return SandboxReport(
        api_stats=_parse_api_stats(behavior.get("apistats")),
        summary=summary,
        strings=_string_list(doc.get("strings")),
        connects_ip=_string_list(network.get("connects_ip")),
        connects_host=_string_list(network.get("connects_host")),
        resolves_host=_string_list(network.get("resolves_host")),
        dropped=_parse_dropped(doc.get("dropped")),
        signatures=_parse_signatures(doc.get("signatures")),
    )


def _sort_key(sample_id: str):
    # Numeric ids in numeric order ahead of the rest in lexicographic order;
    # the zero-padded-vs-bare tie ("007" vs "7") falls back to the string.
    if sample_id.isdigit():
        return (0, int(sample_id), sample_id)
    return (1, 0, sample_id)


def report_files(path: Path) -> list[tuple[str, Path]]:
    """Enumerate report files under path as (sample_id, file) in stream order.

    A file qualifies if its name is all digits or ends with ".json"; the
    sample_id is the name with the suffix stripped. Duplicate ids (e.g.
    "12" next to "12.json") are a fatal configuration error.
    """
    if not path.is_dir():
        raise PipelineError(f"report directory not found: {path}")
    entries: dict[str, Path] = {}
    for child in path.iterdir():
        if not child.is_file():
            continue
        name = child.name
        if name.endswith(REPORT_SUFFIX):
            sample_id = name[: -len(REPORT_SUFFIX)]
        elif name.isdigit():
            sample_id = name
        else:
            continue
        if not sample_id or "\t" in sample_id or "\n" in sample_id:
            continue
        if sample_id in entries:
            raise DuplicateSampleId(
                f"sample id {sample_id!r} appears more than once under {path}"
            )
        entries[sample_id] = child
    return sorted(entries.items(), key=lambda item: _sort_key(item[0]))


def load_report_dir(
    path: Path,
) -> tuple[Iterator[tuple[str, SandboxReport]], list[tuple[str, str]]]:
    """Stream (sample_id, SandboxReport) from a directory in deterministic order.

    Returns the stream plus a skip-list of (filename, error) entries for
    files that failed to parse; the skip-list fills as the stream is
    consumed and is complete once the stream is exhausted.
    """
    files = report_files(Path(path))
    skipped: list[tuple[str, str]] = []

    def generate() -> Iterator[tuple[str, SandboxReport]]:
        for sample_id, file_path in files:
            try:
                text = file_path.read_text(encoding="utf-8")
                report = parse_report(text)
            except (MalformedDocument, UnicodeDecodeError) as exc:
                logger.warning("skipping %s: %s", file_path.name, exc)
                skipped.append((file_path.name, str(exc)))
                continue
            yield sample_id, report

    return generate(), skipped


def write_skip_list(skipped: list[tuple[str, str]], out_path: Path) -> None:
    """Persist a skip-list as newline-delimited "<filename>\\t<error>"."""
    lines = "".join(f"{name}\t{error}\n" for name, error in skipped)
    Path(out_path).write_bytes(lines.encode("utf-8"))
