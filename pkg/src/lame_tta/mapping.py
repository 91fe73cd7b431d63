"""Pooling of source-class probabilities into target superclasses.

A mapping assigns each source class to at most one target class (or to
nothing, in which case its probability mass is dropped). Pooled vectors
are renormalized so they remain valid probability vectors; group sums use
correctly rounded summation so pooling commutes exactly with permutations
inside a group.

Mapping file format (UTF-8, one entry per line):

    <source_index><TAB><target_label>

The literal target label ``__null__`` marks an unmapped source class;
lines starting with ``#`` are comments; target indices are assigned by
first appearance order of their labels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import exact_sum

NULL_LABEL = "__null__"
NULL_TARGET = -1


class MappingError(ValueError):
    pass


@dataclass(frozen=True)
class ClassMapping:
    """Partial function from source class index to target class index.

    ``assignment[y]`` is the target index of source class y, or -1 when y
    is unmapped. Every target class must receive at least one source
    class.
    """

    source_count: int
    target_count: int
    assignment: tuple[int, ...]
    target_labels: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if self.source_count < 1 or self.target_count < 1:
            raise MappingError("source and target counts must be >= 1")
        if len(self.assignment) != self.source_count:
            raise MappingError("assignment length must equal source_count")
        seen = set()
        for y, z in enumerate(self.assignment):
            if z == NULL_TARGET:
                continue
            if not 0 <= z < self.target_count:
                raise MappingError(f"source {y} maps to unknown target {z}")
            seen.add(z)
        missing = set(range(self.target_count)) - seen
        if missing:
            raise MappingError(f"empty target class(es): {sorted(missing)}")
        if self.target_labels and len(self.target_labels) != self.target_count:
            raise MappingError("target_labels length must equal target_count")

    def groups(self) -> list[np.ndarray]:
        """Source indices per target class, in target order."""
        a = np.asarray(self.assignment)
        return [np.flatnonzero(a == z) for z in range(self.target_count)]

    def map_labels(self, labels: np.ndarray) -> np.ndarray:
        """Translate source labels to target labels (-1 for unmapped)."""
        a = np.asarray(self.assignment)
        return a[np.asarray(labels)]


def identity_mapping(count: int) -> ClassMapping:
    return ClassMapping(count, count, tuple(range(count)))


def _pool(q_source, m: ClassMapping, reducer) -> np.ndarray:
    q = np.asarray(q_source, dtype=float)
    if q.ndim != 1 or q.size != m.source_count:
        raise ValueError(f"expected a length-{m.source_count} probability vector, got {q.shape}")
    pooled = np.empty(m.target_count)
    for z, group in enumerate(m.groups()):
        pooled[z] = reducer(q[group])
    total = exact_sum(pooled)
    if total == 0.0:
        raise MappingError("all probability mass fell on unmapped classes")
    if total != 1.0:
        pooled = pooled / total
    return pooled


def pool_average(q_source, m: ClassMapping) -> np.ndarray:
    """Mean of the source probabilities inside each target group, then
    renormalized. Mass on unmapped classes is dropped."""
    return _pool(q_source, m, lambda g: exact_sum(g) / len(g))


def pool_max(q_source, m: ClassMapping) -> np.ndarray:
    """Max of the source probabilities inside each target group, then
    renormalized. Mass on unmapped classes is dropped."""
    return _pool(q_source, m, lambda g: float(np.max(g)))


def pool_rows(Q: np.ndarray, m: ClassMapping, how: str = "average") -> np.ndarray:
    """Pool every row of an (N, |Y|) matrix into (N, |Z|)."""
    if how not in ("average", "max"):
        raise ValueError(f"unknown pooling {how!r}")
    fn = pool_average if how == "average" else pool_max
    return np.stack([fn(row, m) for row in np.asarray(Q, dtype=float)])


def parse_mapping(text: str, source_count: int | None = None) -> ClassMapping:
    """Parse the tab-separated mapping format; errors carry line numbers.

    ``source_count`` defaults to one past the largest listed source index;
    unlisted source classes are unmapped.
    """
    entries: list[tuple[int, str]] = []
    seen: set[int] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise MappingError(f"line {lineno}: expected '<source_index><TAB><target_label>'")
        idx_text, label = parts[0].strip(), parts[1].strip()
        try:
            y = int(idx_text)
        except ValueError:
            raise MappingError(f"line {lineno}: bad source index {idx_text!r}") from None
        if y < 0:
            raise MappingError(f"line {lineno}: source index must be nonnegative")
        if not label:
            raise MappingError(f"line {lineno}: unknown target label (empty)")
        if y in seen:
            raise MappingError(f"line {lineno}: duplicate source class {y}")
        seen.add(y)
        entries.append((y, label))
    if not entries:
        raise MappingError("mapping file defines no entries")
    inferred = max(seen) + 1
    if source_count is None:
        source_count = inferred
    elif inferred > source_count:
        raise MappingError(
            f"source index {max(seen)} exceeds declared source count {source_count}"
        )

    # target indices follow the first appearance of each label in the file
    labels: list[str] = []
    assignment = [NULL_TARGET] * source_count
    for y, label in entries:
        if label == NULL_LABEL:
            continue
        if label not in labels:
            labels.append(label)
        assignment[y] = labels.index(label)
    if not labels:
        raise MappingError("every source class is unmapped; no target classes defined")
    return ClassMapping(source_count, len(labels), tuple(assignment), tuple(labels))


def load_mapping(path, source_count: int | None = None) -> ClassMapping:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_mapping(fh.read(), source_count=source_count)
