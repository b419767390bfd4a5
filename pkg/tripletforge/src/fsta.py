"""Feature-space triplet augmentation planning.

A step plan is built in a fixed order: candidate pairs are sampled per
image, artificial combinations are enumerated (generated object or swapped
subject), head-group entries are undersampled, and only then are object
classes drawn from the MP-sampler.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from collections.abc import Callable, Iterable, Sequence
from dataclasses import asdict, dataclass, field, replace
from enum import StrEnum
from pathlib import Path
from typing import Any

import numpy as np

from tripletforge.src.core import (
    BACKGROUND,
    BBox,
    Group,
    LabelSpace,
    ParseError,
    TripletRecord,
    ValidationError,
    iou,
)
from tripletforge.src.featgen import GanState, generate
from tripletforge.src.ingest import FeatureStore, instance_ids
from tripletforge.src.mp_sampler import SamplerTable, draw
from tripletforge.src.telemetry import METRICS

LOGGER = logging.getLogger(__name__)

GEOMETRY_DIM = 6


class ArtificialKind(StrEnum):
    SPO_PRIME = "spo_prime"
    S_PRIME_PO = "s_prime_po"


class ObjectSource(StrEnum):
    MP_SAMPLER = "mp-sampler"
    SWAP = "swap"


@dataclass(frozen=True)
class FstaConfig:
    n_t: int = 2
    s_iou: float = 0.7
    u_h: float = 0.2
    alpha: float = 0.1
    tail_only_s_po: bool = True
    undersample: bool = True
    bidirectional: bool = True
    object_source: ObjectSource = ObjectSource.MP_SAMPLER

    def __post_init__(self) -> None:
        if self.n_t < 1:
            raise ValidationError("fsta", f"n_t must be >= 1, got {self.n_t}")
        if not (0.0 <= self.s_iou <= 1.0):
            raise ValidationError("fsta", f"s_iou must be in [0, 1], got {self.s_iou}")
        if not (0.0 <= self.u_h <= 1.0):
            raise ValidationError("fsta", f"u_h must be in [0, 1], got {self.u_h}")
        if self.alpha < 0.0:
            raise ValidationError("fsta", f"alpha must be >= 0, got {self.alpha}")
        try:
            object.__setattr__(self, "object_source", ObjectSource(self.object_source))
        except ValueError as exc:
            raise ValidationError(
                "fsta", f"unknown object_source {self.object_source!r}"
            ) from exc


@dataclass(frozen=True)
class Proposal:
    """Detected object region with its predicted class."""

    instance_id: int
    class_index: int
    box: BBox


@dataclass(frozen=True)
class BatchImage:
    image_id: int
    proposals: tuple[Proposal, ...]
    records: tuple[TripletRecord, ...]


@dataclass(frozen=True)
class CandidateTriplet:
    """Proposal pair matched to a ground-truth triplet, inheriting its predicate."""

    image_id: int
    subject: Proposal
    obj: Proposal
    predicate: int
    triplet_id: int


@dataclass(frozen=True)
class ArtificialTriplet:
    """One artificial combination built from a base candidate.

    ``spo_prime`` entries replace the object: ``object_instance`` is None when
    the object feature is to be generated, and ``object_class`` is None until
    drawn. ``s_prime_po`` entries take the subject of ``donor_triplet_id``.
    """

    kind: ArtificialKind
    base_triplet_id: int
    predicate: int
    subject_class: int
    subject_instance: int
    object_class: int | None
    object_instance: int | None
    subject_box: BBox
    object_box: BBox
    donor_triplet_id: int | None = None

    def __post_init__(self) -> None:
        if self.kind is ArtificialKind.S_PRIME_PO:
            if self.donor_triplet_id is None or self.donor_triplet_id == self.base_triplet_id:
                raise ValidationError("fsta", "subject swap needs a donor distinct from the base")
            if self.object_class is None or self.object_instance is None:
                raise ValidationError("fsta", "subject swap keeps the base object")

    @property
    def combo(self) -> tuple[int, int, int | None]:
        return (self.subject_class, self.predicate, self.object_class)

    @property
    def generated_object(self) -> bool:
        return self.kind is ArtificialKind.SPO_PRIME and self.object_instance is None


@dataclass(frozen=True)
class AugmentationPlan:
    step: int
    triplets: tuple[ArtificialTriplet, ...]
    group_counts: dict[Group, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if sum(self.group_counts.values()) != len(self.triplets):
            raise ValidationError("fsta", f"step {self.step}: group counts do not match entries")
        if any(t.object_class is None for t in self.triplets):
            raise ValidationError("fsta", f"step {self.step}: plan has undrawn object classes")

    def __len__(self) -> int:
        return len(self.triplets)


@dataclass(frozen=True)
class ArtificialBatch:
    """Resolved feature triples of a plan, row-aligned."""

    subjects: np.ndarray
    geometry: np.ndarray
    objects: np.ndarray
    predicates: np.ndarray

    def __post_init__(self) -> None:
        n = self.predicates.shape[0]
        for name in ("subjects", "geometry", "objects"):
            value = getattr(self, name)
            if value.ndim != 2 or value.shape[0] != n:
                raise ValidationError("fsta", f"{name} rows do not match {n} predicates")

    def __len__(self) -> int:
        return int(self.predicates.shape[0])

    def stacked(self) -> np.ndarray:
        return np.hstack([self.subjects, self.geometry, self.objects])


def gt_proposals(records: Iterable[TripletRecord]) -> tuple[Proposal, ...]:
    """Ground-truth boxes as proposals, one per object instance."""
    found: dict[int, Proposal] = {}
    for record in records:
        subject, obj = instance_ids(record)
        found.setdefault(subject, Proposal(subject, record.subject_class, record.subject_box))
        found.setdefault(obj, Proposal(obj, record.object_class, record.object_box))
    return tuple(found[i] for i in sorted(found))


def sample_pairs(
    image: BatchImage, cfg: FstaConfig, rng: np.random.Generator
) -> list[CandidateTriplet]:
    """Proposal pairs overlapping a ground-truth triplet, at most ``n_t`` per image.

    A pair matches a triplet when both its subject and object IoU exceed
    ``s_iou``; among several triplets the highest min-IoU wins, then the
    lower triplet id. Draws are without replacement and returned in pool order.
    """
    gts = sorted(
        (r for r in image.records if r.predicate != BACKGROUND), key=lambda r: r.triplet_id
    )
    pool: list[CandidateTriplet] = []
    for subject in image.proposals:
        for obj in image.proposals:
            if subject.instance_id == obj.instance_id:
                continue
            best: tuple[float, TripletRecord] | None = None
            for gt in gts:
                overlap = min(iou(subject.box, gt.subject_box), iou(obj.box, gt.object_box))
                if overlap > cfg.s_iou and (best is None or overlap > best[0]):
                    best = (overlap, gt)
            if best is not None:
                pool.append(
                    CandidateTriplet(
                        image_id=image.image_id,
                        subject=subject,
                        obj=obj,
                        predicate=best[1].predicate,
                        triplet_id=best[1].triplet_id,
                    )
                )
    if len(pool) <= cfg.n_t:
        return pool
    chosen = sorted(int(i) for i in rng.choice(len(pool), size=cfg.n_t, replace=False))
    return [pool[i] for i in chosen]


def _spo_prime(
    base: CandidateTriplet,
    object_class: int | None,
    object_instance: int | None,
    donor: int | None = None,
) -> ArtificialTriplet:
    return ArtificialTriplet(
        kind=ArtificialKind.SPO_PRIME,
        base_triplet_id=base.triplet_id,
        predicate=base.predicate,
        subject_class=base.subject.class_index,
        subject_instance=base.subject.instance_id,
        object_class=object_class,
        object_instance=object_instance,
        subject_box=base.subject.box,
        object_box=base.obj.box,
        donor_triplet_id=donor,
    )


def enumerate_spo_prime(
    candidates: Sequence[CandidateTriplet], sampler: SamplerTable
) -> list[ArtificialTriplet]:
    """Generated-object entries with undrawn classes, one per sampler-covered candidate."""
    return [
        _spo_prime(c, None, None)
        for c in candidates
        if (c.subject.class_index, c.predicate) in sampler
    ]


def draw_objects(
    pending: Sequence[ArtificialTriplet], sampler: SamplerTable, rng: np.random.Generator
) -> list[ArtificialTriplet]:
    drawn: list[ArtificialTriplet] = []
    for entry in pending:
        if entry.object_class is not None:
            drawn.append(entry)
            continue
        object_class = draw(sampler, entry.subject_class, entry.predicate, rng)
        drawn.append(replace(entry, object_class=object_class))
    return drawn


def enum_spo_prime(
    candidates: Sequence[CandidateTriplet], sampler: SamplerTable, rng: np.random.Generator
) -> list[ArtificialTriplet]:
    """Generated-object entries with their object classes drawn from the MP-sampler."""
    return draw_objects(enumerate_spo_prime(candidates, sampler), sampler, rng)


def enum_spo_prime_swap(
    candidates: Sequence[CandidateTriplet], label_space: LabelSpace
) -> list[ArtificialTriplet]:
    """Object-swap variant: the object comes from another candidate's real object."""
    found: list[ArtificialTriplet] = []
    for base in candidates:
        for donor in candidates:
            if donor.triplet_id == base.triplet_id:
                continue
            if label_space.is_valid(
                base.subject.class_index, base.predicate, donor.obj.class_index
            ):
                found.append(
                    _spo_prime(
                        base,
                        donor.obj.class_index,
                        donor.obj.instance_id,
                        donor.triplet_id,
                    )
                )
    return found


def enum_s_prime_po(
    candidates: Sequence[CandidateTriplet], label_space: LabelSpace, cfg: FstaConfig
) -> list[ArtificialTriplet]:
    """Subject-swap entries over every ordered (base, donor) pair of candidates."""
    found: list[ArtificialTriplet] = []
    for base in candidates:
        if cfg.tail_only_s_po and label_space.groups.get(base.predicate) is not Group.TAIL:
            continue
        for donor in candidates:
            if donor.triplet_id == base.triplet_id:
                continue
            if not label_space.is_valid(
                donor.subject.class_index, base.predicate, base.obj.class_index
            ):
                continue
            found.append(
                ArtificialTriplet(
                    kind=ArtificialKind.S_PRIME_PO,
                    base_triplet_id=base.triplet_id,
                    predicate=base.predicate,
                    subject_class=donor.subject.class_index,
                    subject_instance=donor.subject.instance_id,
                    object_class=base.obj.class_index,
                    object_instance=base.obj.instance_id,
                    subject_box=base.subject.box,
                    object_box=base.obj.box,
                    donor_triplet_id=donor.triplet_id,
                )
            )
    return found


def undersample(
    triplets: Sequence[ArtificialTriplet],
    label_space: LabelSpace,
    u_h: float,
    rng: np.random.Generator,
) -> list[ArtificialTriplet]:
    """Keep each head-group entry with probability ``u_h``; others pass through.

    One uniform is drawn per head entry, in order.
    """
    if not (0.0 <= u_h <= 1.0):
        raise ValidationError("fsta", f"u_h must be in [0, 1], got {u_h}")
    kept: list[ArtificialTriplet] = []
    dropped = 0
    for entry in triplets:
        if label_space.group_of(entry.predicate) is Group.HEAD and not rng.random() < u_h:
            dropped += 1
            continue
        kept.append(entry)
    METRICS.undersampled_total.inc(dropped)
    return kept


def plan_step(
    step: int,
    batch: Sequence[BatchImage],
    label_space: LabelSpace,
    sampler: SamplerTable | None,
    cfg: FstaConfig,
    rng: np.random.Generator,
) -> AugmentationPlan:
    """Artificial triplets for one training step.

    Order: sample pairs per image, enumerate both sets, undersample both,
    then draw object classes. ``rng`` is consumed in that order.
    """
    candidates = [c for image in batch for c in sample_pairs(image, cfg, rng)]
    if cfg.object_source is ObjectSource.MP_SAMPLER:
        if sampler is None:
            raise ValidationError("fsta", "object_source mp-sampler needs a sampler table")
        objects = enumerate_spo_prime(candidates, sampler)
    else:
        objects = enum_spo_prime_swap(candidates, label_space)
    subjects = enum_s_prime_po(candidates, label_space, cfg) if cfg.bidirectional else []
    if cfg.undersample:
        objects = undersample(objects, label_space, cfg.u_h, rng)
        subjects = undersample(subjects, label_space, cfg.u_h, rng)
    if sampler is not None:
        objects = draw_objects(objects, sampler, rng)

    triplets = (*objects, *subjects)
    counts: Counter[Group] = Counter()
    for entry in triplets:
        if entry.object_class is None or not label_space.is_valid(
            entry.subject_class, entry.predicate, entry.object_class
        ):
            raise ValidationError("fsta", f"planned combo {entry.combo} is not a valid triple")
        group = label_space.group_of(entry.predicate)
        counts[group] += 1
        METRICS.artificial_triplets_total.labels(kind=entry.kind.value, group=group.value).inc()
    LOGGER.debug(
        "FSTA step %d: %d candidates, %d spo' + %d s'po entries",
        step,
        len(candidates),
        len(objects),
        len(subjects),
    )
    return AugmentationPlan(step=step, triplets=triplets, group_counts=dict(counts))


def predicate_geometry(subject_box: BBox, object_box: BBox) -> np.ndarray:
    """Fixed pair embedding: normalized offset, log size ratios, overlap terms."""
    dx = ((object_box.x1 + object_box.x2) - (subject_box.x1 + subject_box.x2)) / (
        2.0 * subject_box.width
    )
    dy = ((object_box.y1 + object_box.y2) - (subject_box.y1 + subject_box.y2)) / (
        2.0 * subject_box.height
    )
    overlap = iou(subject_box, object_box)
    inter_w = max(0.0, min(subject_box.x2, object_box.x2) - max(subject_box.x1, object_box.x1))
    inter_h = max(0.0, min(subject_box.y2, object_box.y2) - max(subject_box.y1, object_box.y1))
    return np.array(
        [
            dx,
            dy,
            math.log(object_box.width / subject_box.width),
            math.log(object_box.height / subject_box.height),
            overlap,
            inter_w * inter_h / subject_box.area,
        ],
        dtype=np.float64,
    )


@dataclass
class FeatureResolver:
    """Turns plan entries into concrete feature triples.

    Real subject/object features come from ``store``; generated objects are
    drawn from ``generator`` with ``rng``.
    """

    store: FeatureStore
    generator: GanState | None = None
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    def resolve(self, plan: AugmentationPlan) -> ArtificialBatch:
        dim = self.store.dim
        if not plan.triplets:
            return ArtificialBatch(
                subjects=np.zeros((0, dim)),
                geometry=np.zeros((0, GEOMETRY_DIM)),
                objects=np.zeros((0, dim)),
                predicates=np.zeros(0, dtype=np.int64),
            )
        subjects, geometry, objects = [], [], []
        for entry in plan.triplets:
            subjects.append(self.store.vector(entry.subject_instance))
            geometry.append(predicate_geometry(entry.subject_box, entry.object_box))
            objects.append(self._object_feature(entry))
        return ArtificialBatch(
            subjects=np.stack(subjects),
            geometry=np.stack(geometry),
            objects=np.stack(objects),
            predicates=np.array([t.predicate for t in plan.triplets], dtype=np.int64),
        )

    def _object_feature(self, entry: ArtificialTriplet) -> np.ndarray:
        if entry.object_instance is not None:
            return self.store.vector(entry.object_instance)
        if self.generator is None or entry.object_class is None:
            raise ValidationError("fsta", "generated object needs a class and a loaded generator")
        vector = generate(self.generator, entry.object_class, self.rng)
        if vector.shape != (self.store.dim,):
            raise ValidationError(
                "fsta",
                f"generator emits dim {vector.shape[0]}, feature store has dim {self.store.dim}",
            )
        return vector


def cross_entropy(probs: np.ndarray, predicates: np.ndarray) -> float:
    """Mean ``-ln p`` of the true predicate over rows."""
    if probs.shape[0] == 0:
        return 0.0
    picked = probs[np.arange(probs.shape[0]), predicates]
    return float(-np.mean(np.log(np.maximum(picked, np.finfo(np.float64).tiny))))


def l_at(batch: ArtificialBatch, head: Callable[[np.ndarray], np.ndarray]) -> float:
    """Cross-entropy of ``head`` on the artificial triples; the caller scales by alpha.

    ``head`` maps stacked ``[f_s, f_p, f_o]`` rows to predicate distributions.
    """
    if len(batch) == 0:
        return 0.0
    probs = head(batch.stacked())
    if probs.ndim != 2 or probs.shape[0] != len(batch):
        raise ValidationError("fsta", f"relation head returned shape {probs.shape}")
    if int(batch.predicates.max()) >= probs.shape[1]:
        raise ValidationError("fsta", "artificial predicate outside the head's output range")
    return cross_entropy(probs, batch.predicates)


# --- plan files --------------------------------------------------------------


def _triplet_json(step: int, entry: ArtificialTriplet) -> dict[str, Any]:
    payload = asdict(entry)
    payload["kind"] = entry.kind.value
    payload["subject_box"] = entry.subject_box.as_list()
    payload["object_box"] = entry.object_box.as_list()
    return {"step": step, **payload}


def write_plans(plans: Iterable[AugmentationPlan], path: str | Path) -> None:
    lines = [
        json.dumps(_triplet_json(plan.step, entry), sort_keys=True)
        for plan in plans
        for entry in plan.triplets
    ]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def load_plan_entries(path: str | Path) -> list[tuple[int, ArtificialTriplet]]:
    """``(step, entry)`` pairs from a plan file."""
    source = str(path)
    entries: list[tuple[int, ArtificialTriplet]] = []
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            payload = json.loads(line)
            step = int(payload.pop("step"))
            payload["kind"] = ArtificialKind(payload["kind"])
            payload["subject_box"] = BBox(*payload["subject_box"])
            payload["object_box"] = BBox(*payload["object_box"])
            entries.append((step, ArtificialTriplet(**payload)))
        except ValidationError as exc:
            raise ParseError("fsta", source, exc.message, line=line_no) from exc
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ParseError("fsta", source, f"malformed plan entry: {exc}", line=line_no) from exc
    return entries
