"""Dataset ingestion: flow CSVs, email corpora, normalization, downsampling.

Both loaders produce lists of FlowRecord, the common currency for graph
construction.  Feature vectors are dense float64; the flow loader builds
them from declared numeric columns followed by one-hot expansions of
declared categorical columns, the email loader from normalized term
frequencies over a document-frequency vocabulary.
"""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .graph import ANOMALOUS, NORMAL, BehaviorGraph, build_graph


class IngestError(Exception):
    """Base class for ingestion failures."""


class MissingColumn(IngestError):
    """The CSV header lacks a column required by the schema."""


class UnparseableCell(IngestError):
    """A cell could not be converted to its declared type."""

    def __init__(self, row: int, column: str, value: str):
        self.row = row
        self.column = column
        self.value = value
        super().__init__(f"row {row}, column {column!r}: "
                         f"cannot parse {value!r}")


class EmptyFile(IngestError):
    """The input contains no data rows."""


class TargetUnreachable(IngestError):
    """Even a single anomaly would exceed the requested proportion."""


@dataclass(frozen=True, eq=False)
class FlowRecord:
    src_key: str
    dst_key: str
    features: np.ndarray
    label: str


@dataclass(frozen=True)
class SamplingSpec:
    target_anomaly_proportion: float
    seed: int


@dataclass(frozen=True)
class FlowSchema:
    """Column declaration for a flow CSV.

    anomaly_values lists the label-column values mapped to the anomalous
    class; everything else is normal.  categorical maps a column name to
    its closed one-hot vocabulary; values outside the vocabulary encode
    as all zeros.
    """
    key_a: str
    key_b: str
    label: str
    anomaly_values: tuple[str, ...]
    numeric: tuple[str, ...] = ()
    categorical: dict[str, tuple[str, ...]] = field(default_factory=dict)

    @property
    def feature_dim(self) -> int:
        return len(self.numeric) + sum(len(v) for v in self.categorical.values())

    @classmethod
    def from_json(cls, path: str | Path) -> "FlowSchema":
        with open(path) as fh:
            raw = json.load(fh)
        return cls(
            key_a=raw["key_a"],
            key_b=raw["key_b"],
            label=raw["label"],
            anomaly_values=tuple(raw["anomaly_values"]),
            numeric=tuple(raw.get("numeric", ())),
            categorical={k: tuple(v)
                         for k, v in raw.get("categorical", {}).items()})

    def to_json(self, path: str | Path) -> None:
        raw = {"key_a": self.key_a, "key_b": self.key_b, "label": self.label,
               "anomaly_values": list(self.anomaly_values),
               "numeric": list(self.numeric),
               "categorical": {k: list(v) for k, v in self.categorical.items()}}
        with open(path, "w") as fh:
            json.dump(raw, fh, indent=2)
            fh.write("\n")


def parse_flow_csv(path: str | Path, schema: FlowSchema) -> list[FlowRecord]:
    """Read one record per data row, mapping columns through the schema."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        if header is None:
            raise EmptyFile(f"{path} has no header row")
        needed = [schema.key_a, schema.key_b, schema.label,
                  *schema.numeric, *schema.categorical]
        for col in needed:
            if col not in header:
                raise MissingColumn(f"{path} lacks column {col!r}")
        records: list[FlowRecord] = []
        for row_idx, row in enumerate(reader, start=1):
            feats = np.zeros(schema.feature_dim)
            pos = 0
            for col in schema.numeric:
                cell = row[col]
                try:
                    val = float(cell)
                except (TypeError, ValueError):
                    raise UnparseableCell(row_idx, col, str(cell)) from None
                if not math.isfinite(val):
                    raise UnparseableCell(row_idx, col, str(cell))
                feats[pos] = val
                pos += 1
            for col, vocab in schema.categorical.items():
                cell = row[col]
                if cell in vocab:
                    feats[pos + vocab.index(cell)] = 1.0
                pos += len(vocab)
            label = ANOMALOUS if row[schema.label] in schema.anomaly_values \
                else NORMAL
            records.append(FlowRecord(row[schema.key_a], row[schema.key_b],
                                      feats, label))
    if not records:
        raise EmptyFile(f"{path} has a header but no data rows")
    return records


_ADDRESS = re.compile(r"[\w.+-]+@[\w.-]+")
_TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")


def _split_message(text: str) -> tuple[dict[str, str], str]:
    """Separate unfolded headers from the body at the first blank line."""
    headers: dict[str, str] = {}
    lines = text.split("\n")
    body_start = len(lines)
    last_name = None
    for i, line in enumerate(lines):
        if line.strip() == "":
            body_start = i + 1
            break
        if line[:1] in (" ", "\t") and last_name is not None:
            headers[last_name] += " " + line.strip()
            continue
        name, sep, value = line.partition(":")
        if sep:
            last_name = name.strip().lower()
            if last_name not in headers:
                headers[last_name] = value.strip()
    return headers, "\n".join(lines[body_start:])


def _header_key(headers: dict[str, str], name: str, fallback: str) -> str:
    value = headers.get(name, "")
    match = _ADDRESS.search(value)
    if match:
        return match.group(0).lower()
    if value.strip():
        return value.strip().lower()
    return fallback


def tokenize(body: str) -> list[str]:
    """Lowercase split on runs of non-alphanumeric characters."""
    return [t for t in _TOKEN_SPLIT.split(body.lower()) if t]


def parse_email_corpus(ham_dir: str | Path, spam_dir: str | Path,
                       vocab_size: int,
                       ) -> tuple[list[FlowRecord], list[str]]:
    """Build sender-to-recipient records with term-frequency features.

    The vocabulary holds the vocab_size tokens with highest document
    frequency across both directories (ties broken lexicographically).
    Each feature vector is the record's term-frequency over that
    vocabulary, normalized to sum 1, or all zeros when no vocabulary
    token occurs.
    """
    docs: list[tuple[str, str, list[str], str]] = []
    counter = 0
    for directory, label in ((Path(ham_dir), NORMAL),
                             (Path(spam_dir), ANOMALOUS)):
        for path in sorted(p for p in directory.iterdir() if p.is_file()):
            text = path.read_text(encoding="utf-8", errors="replace")
            headers, body = _split_message(text)
            src = _header_key(headers, "from", f"unknown-sender-{counter}")
            dst = _header_key(headers, "to", f"unknown-recipient-{counter}")
            docs.append((src, dst, tokenize(body), label))
            counter += 1

    df: dict[str, int] = {}
    for _, _, tokens, _ in docs:
        for tok in set(tokens):
            df[tok] = df.get(tok, 0) + 1
    vocab = sorted(df, key=lambda t: (-df[t], t))[:vocab_size]
    index = {tok: i for i, tok in enumerate(vocab)}

    records = []
    for src, dst, tokens, label in docs:
        feats = np.zeros(len(vocab))
        for tok in tokens:
            i = index.get(tok)
            if i is not None:
                feats[i] += 1.0
        total = feats.sum()
        if total > 0:
            feats /= total
        records.append(FlowRecord(src, dst, feats, label))
    return records, vocab


@dataclass(frozen=True)
class NormalizationParams:
    mins: np.ndarray
    maxs: np.ndarray


def normalize_features(records: list[FlowRecord],
                       ) -> tuple[list[FlowRecord], NormalizationParams]:
    """Min-max scale every feature dimension to [0, 1].

    Constant dimensions map to 0.  The returned params allow the same
    affine map to be replayed on held-out records.
    """
    if len(records) < 2:
        raise IngestError("need at least 2 records to fit normalization")
    X = np.stack([r.features for r in records])
    params = NormalizationParams(X.min(axis=0), X.max(axis=0))
    return apply_normalization(records, params), params


def apply_normalization(records: list[FlowRecord],
                        params: NormalizationParams) -> list[FlowRecord]:
    span = params.maxs - params.mins
    safe = np.where(span > 0, span, 1.0)
    out = []
    for r in records:
        feats = np.where(span > 0, (r.features - params.mins) / safe, 0.0)
        out.append(FlowRecord(r.src_key, r.dst_key, feats, r.label))
    return out


def anomaly_proportion(records: Iterable[FlowRecord]) -> float:
    labels = [r.label for r in records]
    return labels.count(ANOMALOUS) / len(labels) if labels else 0.0


def downsample_anomalies(records: list[FlowRecord],
                         spec: SamplingSpec) -> list[FlowRecord]:
    """Drop anomalies uniformly at random until their share meets the target.

    All normal records are kept.  The number of retained anomalies is
    floor(target * n_normal / (1 - target)), capped at the available
    count; input order is preserved.  Raises TargetUnreachable when even
    one anomaly would overshoot the target.
    """
    t = spec.target_anomaly_proportion
    if not 0.0 < t <= 1.0:
        raise IngestError(f"target proportion {t} outside (0, 1]")
    anom_idx = [i for i, r in enumerate(records) if r.label == ANOMALOUS]
    n_normal = len(records) - len(anom_idx)
    if not anom_idx:
        return list(records)
    if t == 1.0:
        keep_count = len(anom_idx)
    else:
        keep_count = math.floor(t * n_normal / (1.0 - t))
    if keep_count < 1:
        raise TargetUnreachable(
            f"cannot reach proportion {t} with {n_normal} normal records")
    keep_count = min(keep_count, len(anom_idx))
    rng = np.random.default_rng(spec.seed)
    chosen = set(rng.choice(len(anom_idx), size=keep_count, replace=False)
                 .tolist())
    keep = {anom_idx[i] for i in chosen}
    return [r for i, r in enumerate(records)
            if r.label != ANOMALOUS or i in keep]


def flows_to_graph(records: list[FlowRecord]) -> BehaviorGraph:
    """One node per distinct key (first-appearance order), one edge per record."""
    seen: dict[str, None] = {}
    for r in records:
        seen.setdefault(r.src_key)
        seen.setdefault(r.dst_key)
    nodes = [(k, []) for k in seen]
    edges = [(r.src_key, r.dst_key, r.features, r.label) for r in records]
    return build_graph(nodes, edges)
