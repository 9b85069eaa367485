"""Alarm datasets: loading, validation, binning, partitioning, folds, synthesis.

An observation is one 15-minute window of a microwave link; each feature is
the number of seconds (0..900) a specific equipment alarm was active in that
window.  Labels are the four hardware failure causes.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

RAW_MAX = 900  # seconds in a 15-minute window
N_CLASSES = 4


class FailureClass(IntEnum):
    IDU = 1
    ODU = 2
    CABLE = 3
    POWER = 4


class DatasetError(ValueError):
    """Malformed dataset content (bad cell, bad label, bad schema)."""


class PartitionError(ValueError):
    """Feature-group table does not form a valid partition."""


class FoldError(ValueError):
    """Stratified fold plan cannot be built."""


@dataclass(frozen=True)
class AlarmDataset:
    """Raw alarm-seconds matrix plus failure-cause labels.

    ``raw`` is (n_obs, n_feat) int64 with cells in [0, 900]; ``labels`` is
    (n_obs,) int64 with values in {1, 2, 3, 4}.
    """

    feature_names: tuple[str, ...]
    raw: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        raw = np.asarray(self.raw, dtype=np.int64)
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "raw", raw)
        object.__setattr__(self, "labels", labels)
        if raw.ndim != 2:
            raise DatasetError(f"raw matrix must be 2-D, got shape {raw.shape}")
        if raw.shape[1] != len(self.feature_names):
            raise DatasetError(
                f"{len(self.feature_names)} feature names for {raw.shape[1]} columns"
            )
        if len(set(self.feature_names)) != len(self.feature_names):
            raise DatasetError("feature names must be unique")
        if labels.shape != (raw.shape[0],):
            raise DatasetError("labels length must equal number of rows")
        if raw.size and (raw.min() < 0 or raw.max() > RAW_MAX):
            bad = np.argwhere((raw < 0) | (raw > RAW_MAX))[0]
            raise DatasetError(
                f"cell out of range [0, {RAW_MAX}] at row {bad[0]}, "
                f"column {self.feature_names[bad[1]]}: {raw[bad[0], bad[1]]}"
            )
        if labels.size and not np.isin(labels, [c.value for c in FailureClass]).all():
            bad_row = int(np.argwhere(~np.isin(labels, list(FailureClass)))[0][0])
            raise DatasetError(f"label out of {{1..4}} at row {bad_row}: {labels[bad_row]}")

    @property
    def n_obs(self) -> int:
        return self.raw.shape[0]

    @property
    def n_features(self) -> int:
        return self.raw.shape[1]


@dataclass(frozen=True)
class BinnedDataset:
    """Same shape as :class:`AlarmDataset` but cells are categories {0,1,2,3}."""

    feature_names: tuple[str, ...]
    values: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.int64)
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "labels", labels)
        if values.size and (values.min() < 0 or values.max() > 3):
            raise DatasetError("binned cells must lie in {0,1,2,3}")
        if values.shape[1] != len(self.feature_names):
            raise DatasetError("feature name count mismatch")
        if labels.shape != (values.shape[0],):
            raise DatasetError("labels length must equal number of rows")

    @property
    def n_obs(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]


class ScenarioKind:
    SVS = "SVS"
    VS2 = "2VS"
    VS3 = "3VS"

    ALL = (SVS, VS2, VS3)


@dataclass(frozen=True)
class FeaturePartition:
    """Assignment of every feature index to exactly one named party."""

    party_names: tuple[str, ...]
    assignment: np.ndarray  # feature index -> party index
    active_party: int

    def __post_init__(self):
        assignment = np.asarray(self.assignment, dtype=np.int64)
        object.__setattr__(self, "assignment", assignment)
        if assignment.size and (
            assignment.min() < 0 or assignment.max() >= len(self.party_names)
        ):
            raise PartitionError("assignment references unknown party index")
        if not 0 <= self.active_party < len(self.party_names):
            raise PartitionError(f"active party index {self.active_party} invalid")

    @property
    def n_parties(self) -> int:
        return len(self.party_names)

    def party_features(self, party: int) -> np.ndarray:
        """Feature indices owned by ``party``, in original column order."""
        return np.flatnonzero(self.assignment == party)

    def slices(self, matrix: np.ndarray) -> list[np.ndarray]:
        """Split a (n, n_feat) matrix into per-party column slices."""
        return [matrix[:, self.party_features(p)] for p in range(self.n_parties)]


@dataclass(frozen=True)
class FoldPlan:
    """Stratified assignment of observations to k folds."""

    k: int
    assignments: np.ndarray  # observation index -> fold id
    seed: int

    def fold_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == fold)

    def splits(self):
        """Yield (train_idx, test_idx) per fold, test fold ascending."""
        for f in range(self.k):
            test = self.fold_indices(f)
            train = np.flatnonzero(self.assignments != f)
            yield train, test


def load_csv(path, label_column: str = "label") -> AlarmDataset:
    """Load an alarm dataset from CSV (one header row, integer cells).

    Raises :class:`DatasetError` naming the offending row/column for a
    missing label column, a non-integer cell, or a value outside [0, 900].
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file, expected a header row")
        if label_column not in header:
            raise DatasetError(f"{path}: missing label column {label_column!r}")
        label_pos = header.index(label_column)
        feature_names = tuple(h for i, h in enumerate(header) if i != label_pos)

        rows, labels = [], []
        for lineno, record in enumerate(reader, start=2):
            if len(record) != len(header):
                raise DatasetError(
                    f"{path}:{lineno}: expected {len(header)} cells, got {len(record)}"
                )
            parsed = []
            for col, cell in zip(header, record):
                try:
                    value = int(cell)
                except ValueError:
                    raise DatasetError(
                        f"{path}:{lineno}: non-integer cell in column {col!r}: {cell!r}"
                    ) from None
                if col == label_column:
                    labels.append(value)
                else:
                    if not 0 <= value <= RAW_MAX:
                        raise DatasetError(
                            f"{path}:{lineno}: value {value} outside [0, {RAW_MAX}] "
                            f"in column {col!r}"
                        )
                    parsed.append(value)
            rows.append(parsed)

    raw = np.array(rows, dtype=np.int64).reshape(len(rows), len(feature_names))
    return AlarmDataset(feature_names, raw, np.array(labels, dtype=np.int64))


def save_csv(dataset, path, label_column: str = "label") -> None:
    """Write a dataset (raw or binned) back out in the ingest CSV format."""
    matrix = dataset.raw if isinstance(dataset, AlarmDataset) else dataset.values
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(dataset.feature_names) + [label_column])
        for row, label in zip(matrix, dataset.labels):
            writer.writerow([int(v) for v in row] + [int(label)])


def drop_all_zero_features(d: AlarmDataset) -> AlarmDataset:
    """Remove features that are zero in every observation, preserving order."""
    keep = np.flatnonzero((d.raw != 0).any(axis=0))
    names = tuple(d.feature_names[i] for i in keep)
    return AlarmDataset(names, d.raw[:, keep], d.labels)


def bin_alarm_counts(d: AlarmDataset) -> BinnedDataset:
    """Map alarm-active seconds into the four categories.

    0 -> 0 (off); [1, 45] -> 1; (45, 450] -> 2; (450, 900] -> 3.  The mapping
    is monotone non-decreasing in the raw value.
    """
    v = d.raw
    binned = np.zeros_like(v)
    binned[(v >= 1) & (v <= 45)] = 1
    binned[(v > 45) & (v <= 450)] = 2
    binned[v > 450] = 3
    return BinnedDataset(d.feature_names, binned, d.labels)


def load_group_table(path) -> dict[str, list[str]]:
    """Read a feature-group table JSON: {"IDU": [names...], "ODU": ..., "NOS": ...}."""
    with open(path, encoding="utf-8") as fh:
        table = json.load(fh)
    if not isinstance(table, dict) or not all(
        isinstance(v, list) for v in table.values()
    ):
        raise PartitionError(f"{path}: group table must map group name -> name list")
    return {g: [str(n) for n in names] for g, names in table.items()}


def _check_groups(d, groups: dict[str, list[str]]) -> dict[str, list[int]]:
    """Validate a group table against the dataset; return name->column indices."""
    col = {name: i for i, name in enumerate(d.feature_names)}
    seen: dict[str, str] = {}
    indices: dict[str, list[int]] = {}
    for group, names in groups.items():
        idx = []
        for name in names:
            if name not in col:
                raise PartitionError(f"unknown feature {name!r} in group {group!r}")
            if name in seen:
                raise PartitionError(
                    f"feature {name!r} appears in groups {seen[name]!r} and {group!r}"
                )
            seen[name] = group
            idx.append(col[name])
        indices[group] = idx
    missing = [n for n in d.feature_names if n not in seen]
    if missing:
        raise PartitionError(f"features not covered by any group: {missing[:5]}")
    return indices


def partition_features(
    d: BinnedDataset,
    scenario: str,
    groups: dict[str, list[str]],
    active_party: int | None = None,
) -> FeaturePartition:
    """Build the party assignment for a deployment scenario.

    SVS keeps everything at one party.  2VS gives party 0 the ODU alarms and
    party 1 the IDU+NOS alarms (label holder by default).  3VS gives IDU, ODU
    and NOS alarms to parties 0..2; the IDU vendor holds labels by default.
    """
    idx = _check_groups(d, groups)
    n = d.n_features
    assignment = np.zeros(n, dtype=np.int64)
    if scenario != ScenarioKind.SVS:
        unknown = set(idx) - {"IDU", "ODU", "NOS"}
        if unknown:
            raise PartitionError(f"unknown feature groups for {scenario}: {sorted(unknown)}")
    if scenario == ScenarioKind.SVS:
        names = ("vendor",)
        default_active = 0
    elif scenario == ScenarioKind.VS2:
        names = ("odu-vendor", "idu-nos-vendor")
        for group, party in (("ODU", 0), ("IDU", 1), ("NOS", 1)):
            assignment[idx.get(group, [])] = party
        default_active = 1
    elif scenario == ScenarioKind.VS3:
        names = ("idu-vendor", "odu-vendor", "nos-vendor")
        for group, party in (("IDU", 0), ("ODU", 1), ("NOS", 2)):
            assignment[idx.get(group, [])] = party
        default_active = 0
    else:
        raise PartitionError(f"unknown scenario {scenario!r}")
    active = default_active if active_party is None else active_party
    return FeaturePartition(names, assignment, active)


def stratified_kfold(labels, k: int, seed: int) -> FoldPlan:
    """Stratified k-fold assignment: per-class and total fold sizes within 1.

    Class members are shuffled with the seeded generator and dealt in chunks;
    each class's remainder goes to the currently smallest folds, which keeps
    total fold sizes balanced.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if k < 2:
        raise FoldError(f"fold count must be >= 2, got {k}")
    classes, counts = np.unique(labels, return_counts=True)
    small = classes[counts < k]
    if small.size:
        raise FoldError(
            f"class {small[0]} has {counts[classes == small[0]][0]} members, fewer than k={k}"
        )
    rng = np.random.default_rng(seed)
    assignments = np.empty(labels.shape[0], dtype=np.int64)
    fold_sizes = np.zeros(k, dtype=np.int64)
    for cls in classes:
        members = np.flatnonzero(labels == cls)
        rng.shuffle(members)
        base, extra = divmod(len(members), k)
        gets_extra = np.zeros(k, dtype=bool)
        gets_extra[np.argsort(fold_sizes, kind="stable")[:extra]] = True
        pos = 0
        for f in range(k):
            take = base + int(gets_extra[f])
            assignments[members[pos : pos + take]] = f
            fold_sizes[f] += take
            pos += take
    return FoldPlan(k, assignments, seed)


@dataclass(frozen=True)
class SignatureAlarm:
    """One class-characteristic alarm: fires with ``on_prob`` for a duration
    drawn uniformly from [low, high] seconds."""

    feature: str
    on_prob: float
    low: int
    high: int


@dataclass(frozen=True)
class GeneratorSpec:
    """Recipe for a synthetic alarm dataset.

    Feature names are A_1..A_N assigned to groups in declaration order, so
    the group table is implied by ``groups``.  Class signatures must span at
    least two feature groups so that no single party holds the full signal.
    """

    n_obs: int
    groups: dict[str, int]  # group name -> feature count
    class_counts: dict[int, int]  # class label -> observation count
    signatures: dict[int, tuple[SignatureAlarm, ...]]
    background_on_prob: float = 0.01
    background_low: int = 1
    background_high: int = RAW_MAX

    def feature_names(self) -> tuple[str, ...]:
        total = sum(self.groups.values())
        return tuple(f"A_{i}" for i in range(1, total + 1))

    def group_table(self) -> dict[str, list[str]]:
        names = self.feature_names()
        table, start = {}, 0
        for group, count in self.groups.items():
            table[group] = list(names[start : start + count])
            start += count
        return table

    @classmethod
    def from_json(cls, doc: dict) -> "GeneratorSpec":
        signatures = {
            int(label): tuple(
                SignatureAlarm(
                    s["feature"], float(s["on_prob"]), int(s["low"]), int(s["high"])
                )
                for s in sigs
            )
            for label, sigs in doc["signatures"].items()
        }
        bg = doc.get("background", {})
        return cls(
            n_obs=int(doc["n_obs"]),
            groups={str(g): int(c) for g, c in doc["groups"].items()},
            class_counts={int(k): int(v) for k, v in doc["class_counts"].items()},
            signatures=signatures,
            background_on_prob=float(bg.get("on_prob", 0.01)),
            background_low=int(bg.get("low", 1)),
            background_high=int(bg.get("high", RAW_MAX)),
        )

    def to_json(self) -> dict:
        return {
            "n_obs": self.n_obs,
            "groups": dict(self.groups),
            "class_counts": {str(k): v for k, v in self.class_counts.items()},
            "signatures": {
                str(label): [
                    {"feature": s.feature, "on_prob": s.on_prob, "low": s.low, "high": s.high}
                    for s in sigs
                ]
                for label, sigs in self.signatures.items()
            },
            "background": {
                "on_prob": self.background_on_prob,
                "low": self.background_low,
                "high": self.background_high,
            },
        }


def _validate_generator_spec(spec: GeneratorSpec) -> None:
    if sum(spec.class_counts.values()) != spec.n_obs:
        raise DatasetError(
            f"class counts sum to {sum(spec.class_counts.values())}, expected n_obs={spec.n_obs}"
        )
    table = spec.group_table()
    group_of = {name: g for g, names in table.items() for name in names}
    for label, sigs in spec.signatures.items():
        groups_hit = set()
        for sig in sigs:
            if sig.feature not in group_of:
                raise DatasetError(
                    f"class {label} signature references unknown feature {sig.feature!r}"
                )
            if not 1 <= sig.low <= sig.high <= RAW_MAX:
                raise DatasetError(
                    f"class {label} signature {sig.feature}: bad duration range "
                    f"[{sig.low}, {sig.high}]"
                )
            groups_hit.add(group_of[sig.feature])
        if spec.class_counts.get(label, 0) > 0 and len(groups_hit) < 2:
            raise DatasetError(
                f"class {label} signature spans only {sorted(groups_hit)}; "
                "signatures must span >= 2 feature groups"
            )


def generate_synthetic(spec: GeneratorSpec, seed: int) -> AlarmDataset:
    """Sample a deterministic synthetic dataset from ``spec``.

    Background noise turns any alarm on with a small class-independent
    probability; signature alarms fire with their own probability and
    duration range, overwriting the background.
    """
    _validate_generator_spec(spec)
    names = spec.feature_names()
    col = {name: i for i, name in enumerate(names)}
    n, n_feat = spec.n_obs, len(names)

    rng = np.random.default_rng(seed)
    labels = np.concatenate(
        [np.full(count, label, dtype=np.int64) for label, count in sorted(spec.class_counts.items())]
    ) if n else np.zeros(0, dtype=np.int64)
    rng.shuffle(labels)

    raw = np.zeros((n, n_feat), dtype=np.int64)
    if n and spec.background_on_prob > 0:
        on = rng.random((n, n_feat)) < spec.background_on_prob
        durations = rng.integers(spec.background_low, spec.background_high + 1, size=(n, n_feat))
        raw[on] = durations[on]
    for label in sorted(spec.signatures):
        rows = np.flatnonzero(labels == label)
        if not rows.size:
            continue
        for sig in spec.signatures[label]:
            on = rng.random(rows.size) < sig.on_prob
            durations = rng.integers(sig.low, sig.high + 1, size=rows.size)
            raw[rows[on], col[sig.feature]] = durations[on]
    return AlarmDataset(names, raw, labels)


def paper_scale_spec() -> GeneratorSpec:
    """The shipped generator recipe: 1669 observations, 31/54/34 features,
    class counts 515/611/207/336, and cross-party class signatures.

    The signatures are arranged so that no single vendor (nor the combined
    IDU+NOS vendor) can separate all four classes: classes 1/2/4 share the
    IDU pattern, 1/3/4 share the NOS pattern, 3/4 share the ODU pattern, and
    1/4 coincide on IDU+NOS jointly.  Only the full feature set separates
    everything.
    """
    sig = lambda feature, low, high: SignatureAlarm(feature, 0.97, low, high)
    # Group layout: IDU = A_1..A_31, ODU = A_32..A_85, NOS = A_86..A_119.
    return GeneratorSpec(
        n_obs=1669,
        groups={"IDU": 31, "ODU": 54, "NOS": 34},
        class_counts={1: 515, 2: 611, 3: 207, 4: 336},
        signatures={
            1: (sig("A_1", 46, 450), sig("A_32", 451, 900), sig("A_86", 1, 45)),
            2: (sig("A_1", 46, 450), sig("A_33", 46, 450), sig("A_87", 451, 900)),
            3: (sig("A_2", 46, 450), sig("A_34", 46, 450), sig("A_86", 1, 45)),
            4: (sig("A_1", 46, 450), sig("A_34", 46, 450), sig("A_86", 1, 45)),
        },
        background_on_prob=0.01,
    )
