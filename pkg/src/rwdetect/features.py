"""Behavioural feature extraction and sparse binary matrix assembly.

Nine feature groups are extracted from a SandboxReport, each feature a
canonical prefixed name recording the *presence* of a behaviour:

    API   API:<api_name>                       from api_stats (counts discarded)
    REG   REG:<OPENED|DELETED|READ|WRITTEN>:<key>
    FILE  FILE:<CREATED|DELETED|WRITTEN|OPENED>:<path>
    DIR   DIRECTORY:<CREATED|ENUMERATED>:<path>
    STR   STRING:<raw string>
    NET   NETWORK:<CONNECTS_IP|CONNECTS_HOST|RESOLVES_HOST>:<value>
    SYS   SYSTEM:<DLL_LOADED|COMMAND_LINE|MUTEX|GUID>:<value>
    DROP  DROP:EXTENSION:<ext> and DROP:TYPE:<type>
    SIG   SIGNATURE:<name>

Values are embedded verbatim; names longer than the byte cap are truncated
with an explicit "…#<hash8>" suffix that preserves uniqueness.

The vocabulary (built from training reports only) fixes the column order:
groups in the order above, lexicographic by canonical name within a group.
A matrix row holds the sorted active column indices for one sample.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import EmptyTrainingSet, PipelineError
from .report_ingest import SandboxReport

GROUPS = ("API", "REG", "FILE", "DIR", "STR", "NET", "SYS", "DROP", "SIG")

GROUP_PREFIXES = {
    "API": "API:",
    "REG": "REG:",
    "FILE": "FILE:",
    "DIR": "DIRECTORY:",
    "STR": "STRING:",
    "NET": "NETWORK:",
    "SYS": "SYSTEM:",
    "DROP": "DROP:",
    "SIG": "SIGNATURE:",
}

_GROUP_RANK = {group: rank for rank, group in enumerate(GROUPS)}

# (summary_key, action token) pairs per prefixed summary group.
_REG_ACTIONS = (
    ("regkey_opened", "OPENED"),
    ("regkey_deleted", "DELETED"),
    ("regkey_read", "READ"),
    ("regkey_written", "WRITTEN"),
)
_FILE_ACTIONS = (
    ("file_created", "CREATED"),
    ("file_deleted", "DELETED"),
    ("file_written", "WRITTEN"),
    ("file_opened", "OPENED"),
)
_DIR_ACTIONS = (
    ("directory_created", "CREATED"),
    ("directory_enumerated", "ENUMERATED"),
)
_SYS_KINDS = (
    ("dll_loaded", "DLL_LOADED"),
    ("command_line", "COMMAND_LINE"),
    ("mutex", "MUTEX"),
    ("guid", "GUID"),
)

DEFAULT_MAX_NAME_BYTES = 4096


def feature_group(canonical: str) -> str:
    """Group code for a canonical feature name (prefixes are disjoint)."""
    for group in GROUPS:
        if canonical.startswith(GROUP_PREFIXES[group]):
            return group
    raise PipelineError(f"feature name has no known group prefix: {canonical!r}")


def cap_name(canonical: str, max_bytes: int = DEFAULT_MAX_NAME_BYTES) -> str:
    """Truncate an over-long name, keeping uniqueness via a hash suffix."""
    raw = canonical.encode("utf-8")
    if len(raw) <= max_bytes:
        return canonical
    digest = hashlib.sha256(raw).hexdigest()[:8]
    suffix = "…#" + digest
    keep = max_bytes - len(suffix.encode("utf-8"))
    head = raw[:keep]
    while head and (head[-1] & 0xC0) == 0x80:  # do not split a UTF-8 codepoint
        head = head[:-1]
    if head and head[-1] >= 0xC0:  # drop a lead byte whose tail was cut
        head = head[:-1]
    return head.decode("utf-8") + suffix


def extract_features(
    report: SandboxReport, max_name_bytes: int = DEFAULT_MAX_NAME_BYTES
) -> set[str]:
    """Canonical feature-name set for one report (binary presence semantics)."""
    names: set[str] = set()

    for apis in report.api_stats.values():
        for api in apis:
            names.add("API:" + api)

    for key, action in _REG_ACTIONS:
        for value in report.summary.get(key, ()):
            names.add(f"REG:{action}:{value}")
    for key, action in _FILE_ACTIONS:
        for value in report.summary.get(key, ()):
            names.add(f"FILE:{action}:{value}")
    for key, action in _DIR_ACTIONS:
        for value in report.summary.get(key, ()):
            names.add(f"DIRECTORY:{action}:{value}")

    for s in report.strings:
        names.add("STRING:" + s)

    for value in report.connects_ip:
        names.add("NETWORK:CONNECTS_IP:" + value)
    for value in report.connects_host:
        names.add("NETWORK:CONNECTS_HOST:" + value)
    for value in report.resolves_host:
        names.add("NETWORK:RESOLVES_HOST:" + value)

    for key, kind in _SYS_KINDS:
        for value in report.summary.get(key, ()):
            names.add(f"SYSTEM:{kind}:{value}")

    for record in report.dropped:
        if record.extension is not None:
            names.add("DROP:EXTENSION:" + record.extension)
        if record.type is not None:
            names.add("DROP:TYPE:" + record.type)

    for sig in report.signatures:
        names.add("SIGNATURE:" + sig)

    if max_name_bytes:
        names = {cap_name(n, max_name_bytes) for n in names}
    return names


def _name_sort_key(canonical: str):
    return (_GROUP_RANK[feature_group(canonical)], canonical)


@dataclass(frozen=True)
class FeatureVocabulary:
    """Deterministic bijection between canonical names and column indices."""

    names: tuple[str, ...]
    index: dict[str, int] = field(repr=False)
    group_spans: dict[str, int]

    def __len__(self) -> int:
        return len(self.names)

    @classmethod
    def from_names(cls, names: Iterable[str]) -> "FeatureVocabulary":
        ordered = sorted(set(names), key=_name_sort_key)
        spans = {group: 0 for group in GROUPS}
        for name in ordered:
            spans[feature_group(name)] += 1
        return cls(
            names=tuple(ordered),
            index={name: i for i, name in enumerate(ordered)},
            group_spans=spans,
        )

    def group_slices(self) -> dict[str, slice]:
        """Column range per group (groups are contiguous by construction)."""
        slices = {}
        start = 0
        for group in GROUPS:
            count = self.group_spans[group]
            slices[group] = slice(start, start + count)
            start += count
        return slices


def build_vocabulary(
    train_reports: Iterable[tuple[str, SandboxReport]],
    max_name_bytes: int = DEFAULT_MAX_NAME_BYTES,
) -> FeatureVocabulary:
    """Union of extract_features over the training stream, canonically ordered."""
    union: set[str] = set()
    n_reports = 0
    for _, report in train_reports:
        n_reports += 1
        union |= extract_features(report, max_name_bytes)
    if n_reports == 0:
        raise EmptyTrainingSet("cannot build a vocabulary from zero reports")
    return FeatureVocabulary.from_names(union)


def vectorize(
    report: SandboxReport,
    vocab: FeatureVocabulary,
    max_name_bytes: int = DEFAULT_MAX_NAME_BYTES,
) -> np.ndarray:
    """Sorted active column indices; out-of-vocabulary features are dropped."""
    index = vocab.index
    active = {index[n] for n in extract_features(report, max_name_bytes) if n in index}
    return np.fromiter(sorted(active), dtype=np.int64, count=len(active))


@dataclass
class SparseBinaryMatrix:
    """Row-major binary presence matrix in CSR-like form.

    indices[indptr[i]:indptr[i+1]] holds row i's active columns, strictly
    increasing; implied values are 1 there and 0 elsewhere.
    """

    n_rows: int
    n_cols: int
    indptr: np.ndarray
    indices: np.ndarray
    row_ids: tuple[str, ...]

    @classmethod
    def from_rows(
        cls, row_ids: Iterable[str], rows: Iterable[np.ndarray], n_cols: int
    ) -> "SparseBinaryMatrix":
        ids = tuple(row_ids)
        row_list = list(rows)
        if len(ids) != len(row_list):
            raise PipelineError("row_ids and rows must align")
        indptr = np.zeros(len(row_list) + 1, dtype=np.int64)
        for i, row in enumerate(row_list):
            row = np.asarray(row)
            if row.size > 1 and not (np.diff(row) > 0).all():
                raise PipelineError(f"row {i}: indices must be strictly increasing")
            indptr[i + 1] = indptr[i] + len(row)
        indices = (
            np.concatenate(row_list).astype(np.int64)
            if row_list and indptr[-1] > 0
            else np.zeros(0, dtype=np.int64)
        )
        if indices.size and (indices.min() < 0 or indices.max() >= n_cols):
            raise PipelineError("active column index out of range")
        return cls(len(ids), n_cols, indptr, indices, ids)

    def row(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i] : self.indptr[i + 1]]

    def to_dense(self, dtype=np.float64) -> np.ndarray:
        dense = np.zeros((self.n_rows, self.n_cols), dtype=dtype)
        for i in range(self.n_rows):
            dense[i, self.row(i)] = 1
        return dense

    def row_lengths(self) -> np.ndarray:
        return np.diff(self.indptr)

    def coo(self) -> tuple[np.ndarray, np.ndarray]:
        """(row, col) arrays of all active cells, row-major order."""
        rows = np.repeat(np.arange(self.n_rows, dtype=np.int64), self.row_lengths())
        return rows, self.indices

    def column_counts(self) -> np.ndarray:
        return np.bincount(self.indices, minlength=self.n_cols).astype(np.int64)

    def column_means(self) -> np.ndarray:
        if self.n_rows == 0:
            return np.zeros(self.n_cols)
        return self.column_counts() / float(self.n_rows)

    def select_columns(self, columns: np.ndarray) -> "SparseBinaryMatrix":
        """Submatrix with the given original columns renumbered 0..k-1."""
        columns = np.asarray(columns, dtype=np.int64)
        if columns.size and (columns.min() < 0 or columns.max() >= self.n_cols):
            raise PipelineError("selected column out of range")
        remap = -np.ones(self.n_cols, dtype=np.int64)
        remap[columns] = np.arange(columns.size)
        new_rows = []
        for i in range(self.n_rows):
            mapped = remap[self.row(i)]
            new_rows.append(np.sort(mapped[mapped >= 0]))
        return SparseBinaryMatrix.from_rows(self.row_ids, new_rows, columns.size)

    def select_rows(self, row_positions: np.ndarray) -> "SparseBinaryMatrix":
        rows = [self.row(int(i)) for i in row_positions]
        ids = tuple(self.row_ids[int(i)] for i in row_positions)
        return SparseBinaryMatrix.from_rows(ids, rows, self.n_cols)


def assemble_matrix(
    reports: Iterable[tuple[str, SandboxReport]],
    vocab: FeatureVocabulary,
    max_name_bytes: int = DEFAULT_MAX_NAME_BYTES,
) -> SparseBinaryMatrix:
    """One row per report, in stream order."""
    ids = []
    rows = []
    for sample_id, report in reports:
        ids.append(sample_id)
        rows.append(vectorize(report, vocab, max_name_bytes))
    return SparseBinaryMatrix.from_rows(ids, rows, len(vocab))


# ---------------------------------------------------------------------------
# Persistence: MLRSPARSE v1 matrix file + vocabulary file
# ---------------------------------------------------------------------------


def write_matrix(matrix: SparseBinaryMatrix, path: Path) -> None:
    """Bit-exact text format: header line, then "<sample_id>\\t<i1>,<i2>,…"."""
    parts = [f"MLRSPARSE v1 rows={matrix.n_rows} cols={matrix.n_cols}\n"]
    for i in range(matrix.n_rows):
        cols = ",".join(str(c) for c in matrix.row(i))
        parts.append(f"{matrix.row_ids[i]}\t{cols}\n")
    Path(path).write_bytes("".join(parts).encode("utf-8"))


def read_matrix(path: Path) -> SparseBinaryMatrix:
    text = Path(path).read_bytes().decode("utf-8")
    lines = text.split("\n")
    header = lines[0].split(" ")
    if len(header) != 4 or header[0] != "MLRSPARSE" or header[1] != "v1":
        raise PipelineError(f"not an MLRSPARSE v1 file: {path}")
    n_rows = int(header[2].removeprefix("rows="))
    n_cols = int(header[3].removeprefix("cols="))
    if len(lines) < n_rows + 1:
        raise PipelineError(f"truncated MLRSPARSE file: {path}")
    ids = []
    rows = []
    for line in lines[1 : n_rows + 1]:
        sample_id, _, cols = line.partition("\t")
        ids.append(sample_id)
        row = (
            np.fromiter((int(c) for c in cols.split(",")), dtype=np.int64)
            if cols
            else np.zeros(0, dtype=np.int64)
        )
        rows.append(row)
    return SparseBinaryMatrix.from_rows(ids, rows, n_cols)


_ESCAPES = [("\\", "\\\\"), ("\t", "\\t"), ("\n", "\\n"), ("\r", "\\r")]


def escape_name(name: str) -> str:
    for raw, esc in _ESCAPES:
        name = name.replace(raw, esc)
    return name


def unescape_name(name: str) -> str:
    out = []
    i = 0
    while i < len(name):
        ch = name[i]
        if ch == "\\" and i + 1 < len(name):
            nxt = name[i + 1]
            out.append({"\\": "\\", "t": "\t", "n": "\n", "r": "\r"}.get(nxt, nxt))
            i += 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def write_vocabulary(vocab: FeatureVocabulary, path: Path) -> None:
    """One canonical name per line in column order, tab/newline escaped."""
    lines = "".join(escape_name(name) + "\n" for name in vocab.names)
    Path(path).write_bytes(lines.encode("utf-8"))


def read_vocabulary(path: Path) -> FeatureVocabulary:
    text = Path(path).read_bytes().decode("utf-8")
    names = [unescape_name(line) for line in text.split("\n") if line != ""]
    vocab = FeatureVocabulary.from_names(names)
    if list(vocab.names) != names:
        raise PipelineError(f"vocabulary file is not in canonical order: {path}")
    return vocab
