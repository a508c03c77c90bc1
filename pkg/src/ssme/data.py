"""Classifier score profiles with partial labels: data model, ingestion, validation.

A dataset holds, for every example, an ``M x K`` matrix of class probabilities
(one row per classifier), an optional class label and an optional group tag.
On disk an example is unlabeled when the ``label`` field is absent.

Canonical format is JSON Lines::

    {"id": "a", "scores": [[0.8, 0.2], [0.6, 0.4]], "label": 1, "group": "west"}

A CSV convenience format is accepted for binary tasks only, with columns
``id, s_1, ..., s_M[, label][, group]`` holding positive-class probabilities.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

ROW_SUM_TOLERANCE = 1e-3
# Rows closer to unit sum than this are left untouched so that
# load -> dump -> load is the identity.
_RENORMALIZE_ABOVE = 1e-9

UNLABELED = -1


class DatasetError(ValueError):
    """Malformed or invalid dataset content."""


class SchemaError(DatasetError):
    """Inconsistent classifier or class counts across records."""


@dataclass(frozen=True)
class ExampleRecord:
    id: str
    profile: np.ndarray
    label: int | None = None
    group: str | None = None


class EvaluationDataset:
    """Immutable collection of score profiles, some of them labeled.

    Stored column-wise: ``profiles`` is ``(n, M, K)``, ``labels`` holds the
    class index or ``-1`` for unlabeled rows (an in-memory convention only;
    serialization omits the field).
    """

    def __init__(
        self,
        profiles,
        labels=None,
        ids: Sequence[str] | None = None,
        groups: Sequence[str | None] | None = None,
    ):
        profiles = np.array(profiles, dtype=float)
        if profiles.ndim != 3:
            raise SchemaError(f"profiles must be (n, M, K), got shape {profiles.shape}")
        n, m, k = profiles.shape
        if m < 1 or k < 2:
            raise SchemaError(f"need M >= 1 and K >= 2, got M={m}, K={k}")
        if labels is None:
            labels = np.full(n, UNLABELED, dtype=np.int64)
        labels = np.array(labels, dtype=np.int64)
        if labels.shape != (n,):
            raise SchemaError("labels length does not match profile count")
        if ids is None:
            ids = [str(i) for i in range(n)]
        ids = tuple(str(i) for i in ids)
        if len(ids) != n:
            raise SchemaError("ids length does not match profile count")
        if groups is None:
            groups = (None,) * n
        groups = tuple(groups)
        if len(groups) != n:
            raise SchemaError("groups length does not match profile count")

        profiles.setflags(write=False)
        labels.setflags(write=False)
        self.profiles = profiles
        self.labels = labels
        self.ids = ids
        self.groups = groups

    @classmethod
    def from_records(cls, records: Iterable[ExampleRecord]) -> "EvaluationDataset":
        records = list(records)
        if not records:
            raise DatasetError("dataset has no records")
        shape = np.shape(records[0].profile)
        for r in records:
            if np.shape(r.profile) != shape:
                raise SchemaError(
                    f"record {r.id!r} has profile shape {np.shape(r.profile)}, expected {shape}"
                )
        return cls(
            np.stack([np.asarray(r.profile, dtype=float) for r in records]),
            [UNLABELED if r.label is None else r.label for r in records],
            [r.id for r in records],
            [r.group for r in records],
        )

    @property
    def records(self) -> list[ExampleRecord]:
        return [
            ExampleRecord(
                self.ids[i],
                self.profiles[i],
                None if self.labels[i] == UNLABELED else int(self.labels[i]),
                self.groups[i],
            )
            for i in range(len(self))
        ]

    def __len__(self) -> int:
        return self.profiles.shape[0]

    @property
    def n_classifiers(self) -> int:
        return self.profiles.shape[1]

    @property
    def n_classes(self) -> int:
        return self.profiles.shape[2]

    @property
    def labeled_mask(self) -> np.ndarray:
        return self.labels != UNLABELED

    @property
    def n_labeled(self) -> int:
        return int(self.labeled_mask.sum())

    @property
    def n_unlabeled(self) -> int:
        return len(self) - self.n_labeled

    def subset(self, index) -> "EvaluationDataset":
        """Rows selected by an integer index array or boolean mask, order kept."""
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        return EvaluationDataset(
            self.profiles[index],
            self.labels[index],
            [self.ids[i] for i in index],
            [self.groups[i] for i in index],
        )

    def with_labels(self, labels) -> "EvaluationDataset":
        return EvaluationDataset(self.profiles, labels, self.ids, self.groups)

    def classifier(self, j: int) -> "EvaluationDataset":
        """Single-classifier view (used by the marginal ablation)."""
        return EvaluationDataset(self.profiles[:, j : j + 1, :], self.labels, self.ids, self.groups)

    def group_mask(self, group: str) -> np.ndarray:
        return np.array([g == group for g in self.groups], dtype=bool)


# ---------------------------------------------------------------------------
# Ingestion


def _check_profile(raw, where: str) -> np.ndarray:
    try:
        profile = np.array(raw, dtype=float)
    except (TypeError, ValueError) as exc:
        raise DatasetError(f"{where}: scores must be a numeric matrix ({exc})") from None
    if profile.ndim != 2 or profile.shape[1] < 2 or profile.shape[0] < 1:
        raise DatasetError(f"{where}: scores must be an M x K matrix with K >= 2")
    if not np.all(np.isfinite(profile)) or np.any(profile < 0.0) or np.any(profile > 1.0):
        raise DatasetError(f"{where}: probabilities must lie in [0, 1]")
    sums = profile.sum(axis=1)
    worst = np.max(np.abs(sums - 1.0))
    if worst > ROW_SUM_TOLERANCE:
        raise DatasetError(
            f"{where}: probability row sums to {sums[np.argmax(np.abs(sums - 1.0))]:.6g}, "
            f"deviation {worst:.3g} exceeds tolerance {ROW_SUM_TOLERANCE}"
        )
    if worst > _RENORMALIZE_ABOVE:
        profile = profile / sums[:, None]
    return profile


def _check_label(raw, k: int, where: str) -> int:
    if isinstance(raw, bool) or not isinstance(raw, (int, np.integer)):
        if isinstance(raw, float) and raw.is_integer():
            raw = int(raw)
        else:
            raise DatasetError(f"{where}: label must be an integer class index, got {raw!r}")
    if not 0 <= raw < k:
        raise DatasetError(f"{where}: label {raw} outside [0, {k})")
    return int(raw)


def _assemble(rows: list[tuple[str, np.ndarray, int | None, str | None, int]]) -> EvaluationDataset:
    if not rows:
        raise DatasetError("dataset has no records")
    shape = rows[0][1].shape
    seen: dict[str, int] = {}
    for rid, profile, _, _, line in rows:
        if profile.shape != shape:
            raise SchemaError(
                f"line {line}: scores have shape {profile.shape}, expected {shape} "
                "(M and K must match across records)"
            )
        if rid in seen:
            raise DatasetError(f"line {line}: duplicate id {rid!r} (first seen on line {seen[rid]})")
        seen[rid] = line
    return EvaluationDataset(
        np.stack([r[1] for r in rows]),
        [UNLABELED if r[2] is None else r[2] for r in rows],
        [r[0] for r in rows],
        [r[3] for r in rows],
    )


def _load_jsonl(path: Path) -> EvaluationDataset:
    rows = []
    with path.open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"line {line_no}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{where}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict) or "id" not in obj or "scores" not in obj:
                raise DatasetError(f"{where}: record needs 'id' and 'scores' fields")
            profile = _check_profile(obj["scores"], where)
            label = obj.get("label")
            if label is not None:
                label = _check_label(label, profile.shape[1], where)
            group = obj.get("group")
            rows.append((str(obj["id"]), profile, label, None if group is None else str(group), line_no))
    return _assemble(rows)


def _load_csv(path: Path) -> EvaluationDataset:
    rows = []
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetError("line 1: empty CSV file") from None
        if not header or header[0] != "id":
            raise DatasetError("line 1: first CSV column must be 'id'")
        score_cols = [i for i, h in enumerate(header) if h.startswith("s_")]
        if not score_cols:
            raise DatasetError("line 1: CSV needs score columns s_1..s_M")
        label_col = header.index("label") if "label" in header else None
        group_col = header.index("group") if "group" in header else None
        for line_no, cells in enumerate(reader, start=2):
            if not cells or all(not c.strip() for c in cells):
                continue
            where = f"line {line_no}"
            if len(cells) != len(header):
                raise DatasetError(f"{where}: expected {len(header)} columns, got {len(cells)}")
            try:
                pos = np.array([float(cells[i]) for i in score_cols])
            except ValueError:
                raise DatasetError(f"{where}: non-numeric score") from None
            if np.any(pos < 0.0) or np.any(pos > 1.0) or not np.all(np.isfinite(pos)):
                raise DatasetError(f"{where}: probabilities must lie in [0, 1]")
            profile = np.stack([1.0 - pos, pos], axis=1)
            label = None
            if label_col is not None and cells[label_col].strip():
                try:
                    label = _check_label(float(cells[label_col]), 2, where)
                except ValueError as exc:
                    raise DatasetError(str(exc)) from None
            group = None
            if group_col is not None and cells[group_col].strip():
                group = cells[group_col]
            rows.append((cells[0], profile, label, group, line_no))
    return _assemble(rows)


def load_dataset(path, format: str | None = None) -> EvaluationDataset:
    """Read a dataset from JSON Lines or (binary-only) CSV.

    ``format`` defaults to the file suffix. Rows whose probabilities sum to
    within 1e-3 of one are renormalized; larger deviations are rejected with
    the offending line number.
    """
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"no such file: {path}")
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt in ("jsonl", "json", "ndjson"):
        return _load_jsonl(path)
    if fmt == "csv":
        return _load_csv(path)
    raise DatasetError(f"unknown dataset format {fmt!r}; use jsonl or csv")


def dump_dataset(dataset: EvaluationDataset, path, format: str | None = None) -> None:
    """Write ``dataset`` so that :func:`load_dataset` reproduces it field for field."""
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt == "csv":
        if dataset.n_classes != 2:
            raise DatasetError("CSV format supports binary (K=2) datasets only")
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(
                ["id"] + [f"s_{m + 1}" for m in range(dataset.n_classifiers)] + ["label", "group"]
            )
            for r in dataset.records:
                writer.writerow(
                    [r.id]
                    + [repr(float(v)) for v in r.profile[:, 1]]
                    + ["" if r.label is None else r.label, "" if r.group is None else r.group]
                )
        return
    with path.open("w", encoding="utf-8") as fh:
        for r in dataset.records:
            obj: dict = {"id": r.id, "scores": r.profile.tolist()}
            if r.label is not None:
                obj["label"] = r.label
            if r.group is not None:
                obj["group"] = r.group
            fh.write(json.dumps(obj) + "\n")


# ---------------------------------------------------------------------------
# Validation


@dataclass
class ValidationReport:
    checks: dict[str, bool] = field(default_factory=dict)
    failures: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {"checks": dict(self.checks), "failures": list(self.failures), "warnings": list(self.warnings)}


def validate_dataset(d: EvaluationDataset) -> ValidationReport:
    """Run every integrity check and report; never raises."""
    report = ValidationReport()

    sums = d.profiles.sum(axis=2)
    bad_rows = np.flatnonzero(np.any(np.abs(sums - 1.0) > 1e-6, axis=1))
    out_of_range = np.flatnonzero(np.any((d.profiles < 0.0) | (d.profiles > 1.0), axis=(1, 2)))
    report.checks["row_sums"] = bad_rows.size == 0 and out_of_range.size == 0
    for i in bad_rows:
        report.failures.append(f"record {d.ids[i]!r}: probability row does not sum to 1 within 1e-6")
    for i in out_of_range:
        report.failures.append(f"record {d.ids[i]!r}: probability outside [0, 1]")

    seen: set[str] = set()
    dupes: list[str] = []
    for rid in d.ids:
        if rid in seen:
            dupes.append(rid)
        seen.add(rid)
    report.checks["unique_ids"] = not dupes
    for rid in dupes:
        report.failures.append(f"duplicate id {rid!r}")

    labels = d.labels
    invalid = np.flatnonzero((labels != UNLABELED) & ((labels < 0) | (labels >= d.n_classes)))
    report.checks["label_range"] = invalid.size == 0
    for i in invalid:
        report.failures.append(f"record {d.ids[i]!r}: label {labels[i]} outside [0, {d.n_classes})")

    present = set(labels[d.labeled_mask].tolist())
    missing = [k for k in range(d.n_classes) if k not in present]
    report.checks["class_coverage"] = not missing
    if d.n_labeled == 0:
        report.warnings.append("no labeled records")
    for k in missing:
        report.warnings.append(f"class {k} unseen among labeled")
    return report
