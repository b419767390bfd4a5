from __future__ import annotations

import hashlib
import math
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from enum import StrEnum

import numpy as np

BACKGROUND = 0
SOFT_LABEL_TOLERANCE = 1e-9
# Share of the non-background predicates in each group (16/17/17 of 50).
GROUP_PROPORTIONS = (16 / 50, 17 / 50)


class TripletForgeError(Exception):
    """Root of every error raised by the package."""


class ValidationError(TripletForgeError, ValueError):
    """Invalid input or parameter, qualified by the module that rejected it."""

    def __init__(self, module: str, message: str) -> None:
        super().__init__(f"{module}: {message}")
        self.module = module
        self.message = message


class ParseError(ValidationError):
    """Malformed input file. ``line`` is 1-based; binary files report a byte offset."""

    def __init__(
        self,
        module: str,
        path: str,
        message: str,
        *,
        line: int | None = None,
        offset: int | None = None,
    ) -> None:
        where = path
        if line is not None:
            where = f"{path}:{line}"
        elif offset is not None:
            where = f"{path}@{offset}"
        super().__init__(module, f"{where}: {message}")
        self.path = path
        self.line = line
        self.offset = offset


class TrainingDivergedError(TripletForgeError):
    """A loss became NaN or infinite."""

    def __init__(self, what: str, iteration: int) -> None:
        super().__init__(f"{what} diverged at iteration {iteration}")
        self.iteration = iteration


class Group(StrEnum):
    HEAD = "head"
    BODY = "body"
    TAIL = "tail"


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in continuous image coordinates."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValidationError("core", f"box has non-finite coordinates: {coords}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValidationError("core", f"box must satisfy x1<x2 and y1<y2, got {coords}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes."""
    inter_w = min(a.x2, b.x2) - max(a.x1, b.x1)
    inter_h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if inter_w <= 0.0 or inter_h <= 0.0:
        return 0.0
    inter = inter_w * inter_h
    return inter / (a.area + b.area - inter)


@dataclass(frozen=True)
class SoftLabel:
    """Sparse predicate distribution; entries are ``(class, probability)`` sorted by class.

    Zero-probability classes are not stored, so ``support`` is the set of
    classes with positive mass. ``preferred`` only settles ties in ``top``;
    a softened transfer sets it to the target so an even split still reads
    as the transferred predicate.
    """

    entries: tuple[tuple[int, float], ...]
    preferred: int | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if not self.entries:
            raise ValidationError("core", "soft label must have at least one entry")
        classes = [c for c, _ in self.entries]
        if classes != sorted(set(classes)):
            raise ValidationError("core", f"soft label classes must be unique, sorted: {classes}")
        total = 0.0
        for cls, prob in self.entries:
            if cls < 0:
                raise ValidationError("core", f"soft label class must be >= 0, got {cls}")
            if not (0.0 < prob <= 1.0):
                raise ValidationError("core", f"soft label probability out of (0,1]: {prob}")
            total += prob
        if abs(total - 1.0) > SOFT_LABEL_TOLERANCE:
            raise ValidationError("core", f"soft label must sum to 1, got {total!r}")

    @classmethod
    def one_hot(cls, predicate: int) -> SoftLabel:
        return cls(((predicate, 1.0),))

    @classmethod
    def from_mapping(
        cls, mapping: Mapping[int, float], preferred: int | None = None
    ) -> SoftLabel:
        return cls(
            tuple(sorted((c, float(p)) for c, p in mapping.items() if p > 0.0)), preferred
        )

    @property
    def support(self) -> tuple[int, ...]:
        return tuple(c for c, _ in self.entries)

    @property
    def is_hard(self) -> bool:
        return len(self.entries) == 1

    @property
    def top(self) -> int:
        """Class with the most mass; ties go to ``preferred``, else the lower class index."""
        best = max(prob for _, prob in self.entries)
        tied = [cls for cls, prob in self.entries if prob == best]
        if self.preferred in tied:
            return self.preferred
        return tied[0]

    def ordered(self) -> tuple[tuple[int, float], ...]:
        """Entries with ``preferred`` first, as written to annotation files."""
        return tuple(sorted(self.entries, key=lambda item: item[0] != self.preferred))

    def probability(self, predicate: int) -> float:
        for cls, prob in self.entries:
            if cls == predicate:
                return prob
        return 0.0

    def as_dict(self) -> dict[int, float]:
        return dict(self.entries)

    def dense(self, n_predicates: int) -> np.ndarray:
        vector = np.zeros(n_predicates, dtype=np.float64)
        for cls, prob in self.entries:
            vector[cls] = prob
        return vector


@dataclass(frozen=True)
class TripletRecord:
    triplet_id: int
    image_id: int
    subject_class: int
    subject_box: BBox
    object_class: int
    object_box: BBox
    label: SoftLabel
    subject_instance: int | None = None
    object_instance: int | None = None

    @property
    def predicate(self) -> int:
        """Hard predicate: the label's top class."""
        return self.label.top

    @property
    def combo(self) -> tuple[int, int, int]:
        return (self.subject_class, self.predicate, self.object_class)


@dataclass(frozen=True)
class LabelSpace:
    """Object/predicate vocabularies, predicate groups and the observed valid triples.

    Predicate index 0 is the background (no-relation) class and never
    belongs to a group.
    """

    object_classes: tuple[str, ...]
    predicate_classes: tuple[str, ...]
    groups: Mapping[int, Group] = field(default_factory=dict)
    valid_triples: frozenset[tuple[int, int, int]] = frozenset()

    def __post_init__(self) -> None:
        if len(set(self.object_classes)) != len(self.object_classes):
            raise ValidationError("core", "object class names must be unique")
        if len(set(self.predicate_classes)) != len(self.predicate_classes):
            raise ValidationError("core", "predicate class names must be unique")
        if self.groups:
            expected = set(range(1, self.n_predicates))
            if set(self.groups) != expected:
                raise ValidationError(
                    "core", "groups must partition exactly the non-background predicates"
                )
        for s, p, o in self.valid_triples:
            if not (self.has_object(s) and self.has_object(o)):
                raise ValidationError("core", f"valid triple {(s, p, o)} has unknown object class")
            if not (1 <= p < self.n_predicates):
                raise ValidationError("core", f"valid triple {(s, p, o)} has invalid predicate")

    @property
    def n_objects(self) -> int:
        return len(self.object_classes)

    @property
    def n_predicates(self) -> int:
        return len(self.predicate_classes)

    def has_object(self, index: int) -> bool:
        return 0 <= index < self.n_objects

    def has_predicate(self, index: int) -> bool:
        return 0 <= index < self.n_predicates

    def group_of(self, predicate: int) -> Group:
        try:
            return self.groups[predicate]
        except KeyError as exc:
            raise ValidationError("core", f"predicate {predicate} has no group") from exc

    def predicates_in(self, group: Group) -> tuple[int, ...]:
        return tuple(sorted(p for p, g in self.groups.items() if g is group))

    def predicate_index(self, name: str) -> int:
        try:
            return self.predicate_classes.index(name)
        except ValueError as exc:
            raise ValidationError("core", f"unknown predicate class {name!r}") from exc

    def object_index(self, name: str) -> int:
        try:
            return self.object_classes.index(name)
        except ValueError as exc:
            raise ValidationError("core", f"unknown object class {name!r}") from exc

    def is_valid(self, subject_class: int, predicate: int, object_class: int) -> bool:
        return (subject_class, predicate, object_class) in self.valid_triples


def group_predicates(counts: Mapping[int, int]) -> dict[int, Group]:
    """Split predicates into head/body/tail by descending training count.

    50 predicates split 16/17/17; other sizes use the same proportions
    rounded half-up, with the tail taking the remainder. Ties in count go to
    the lower class index first.
    """
    if not counts:
        raise ValidationError("core", "cannot group an empty predicate count table")
    if BACKGROUND in counts:
        raise ValidationError("core", "background predicate must not be grouped")
    ordered = sorted(counts, key=lambda p: (-counts[p], p))
    total = len(ordered)
    n_head = math.floor(total * GROUP_PROPORTIONS[0] + 0.5)
    n_body = min(total - n_head, math.floor(total * GROUP_PROPORTIONS[1] + 0.5))
    groups: dict[int, Group] = {}
    for rank, predicate in enumerate(ordered):
        if rank < n_head:
            groups[predicate] = Group.HEAD
        elif rank < n_head + n_body:
            groups[predicate] = Group.BODY
        else:
            groups[predicate] = Group.TAIL
    return groups


def percent_count(percent: float, n: int) -> int:
    """``floor(percent% * n)``; tolerant of float noise such as 0.29 * 100."""
    if not (0.0 <= percent <= 100.0):
        raise ValidationError("core", f"percentage must be in [0, 100], got {percent}")
    return min(n, math.floor(percent * n / 100.0 + 1e-9))


def derive_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for ``name``; streams of other names are unaffected."""
    return np.random.default_rng(derive_seed(seed, name))


def build_label_space(
    object_classes: Iterable[str],
    predicate_classes: Iterable[str],
    records: Iterable[TripletRecord],
) -> LabelSpace:
    """Label space whose groups and valid triples come from ``records``."""
    objects = tuple(object_classes)
    predicates = tuple(predicate_classes)
    counts = {p: 0 for p in range(1, len(predicates))}
    triples: set[tuple[int, int, int]] = set()
    for record in records:
        combo = record.combo
        if combo[1] == BACKGROUND:
            continue
        counts[combo[1]] = counts.get(combo[1], 0) + 1
        triples.add(combo)
    groups = group_predicates(counts) if counts else {}
    return LabelSpace(
        object_classes=objects,
        predicate_classes=predicates,
        groups=groups,
        valid_triples=frozenset(triples),
    )
