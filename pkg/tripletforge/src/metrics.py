from __future__ import annotations

import json
import logging
from collections import defaultdict
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
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
from tripletforge.src.ingest import Dataset, parse_part
from tripletforge.src.telemetry import METRICS

LOGGER = logging.getLogger(__name__)

BOX_MATCH_IOU = 0.5


@dataclass(frozen=True)
class EvalConfig:
    k: tuple[int, ...] = (50, 100)
    iou_threshold: float = BOX_MATCH_IOU

    def __post_init__(self) -> None:
        object.__setattr__(self, "k", tuple(int(k) for k in self.k))
        if not self.k or any(k <= 0 for k in self.k):
            raise ValidationError("metrics", f"K values must be positive, got {list(self.k)}")
        if not (0.0 < self.iou_threshold <= 1.0):
            raise ValidationError("metrics", "iou_threshold must be in (0, 1]")


@dataclass(frozen=True)
class PredictedRelation:
    image_id: int
    subject_class: int
    subject_box: BBox
    object_class: int
    object_box: BBox
    predicate: int
    score: float

    @property
    def pair(self) -> tuple[int, BBox, int, BBox]:
        return (self.subject_class, self.subject_box, self.object_class, self.object_box)


@dataclass(frozen=True)
class GroupRecall:
    """Mean recall overall and per predicate group; None where a group has no GT."""

    overall: float
    head: float | None
    body: float | None
    tail: float | None

    def as_dict(self) -> dict[str, float | None]:
        return {"overall": self.overall, "head": self.head, "body": self.body, "tail": self.tail}


@dataclass(frozen=True)
class EvalReport:
    k: tuple[int, ...]
    recall: dict[int, float]
    mean_recall: dict[int, GroupRecall]
    f1: dict[int, float]
    avg: dict[int, float]
    per_class_recall: dict[int, dict[int, float]] = field(default_factory=dict)

    def to_json(self, predicate_names: Sequence[str] | None = None) -> dict[str, Any]:
        def name(p: int) -> str:
            return predicate_names[p] if predicate_names else str(p)

        return {
            "k": list(self.k),
            "recall": {str(k): v for k, v in self.recall.items()},
            "mean_recall": {str(k): v.as_dict() for k, v in self.mean_recall.items()},
            "f1": {str(k): v for k, v in self.f1.items()},
            "avg": {str(k): v for k, v in self.avg.items()},
            "per_class_recall": {
                str(k): {name(p): r for p, r in sorted(per.items())}
                for k, per in self.per_class_recall.items()
            },
        }


def apply_graph_constraint(
    predictions: Iterable[PredictedRelation],
) -> list[PredictedRelation]:
    """Keep one predicate per ordered subject-object pair: the top-scoring one.

    Background predictions are dropped; equal scores go to the lower predicate.
    """
    best: dict[tuple[int, tuple[int, BBox, int, BBox]], PredictedRelation] = {}
    for prediction in predictions:
        if prediction.predicate == BACKGROUND:
            continue
        key = (prediction.image_id, prediction.pair)
        current = best.get(key)
        if current is None or (-prediction.score, prediction.predicate) < (
            -current.score,
            current.predicate,
        ):
            best[key] = prediction
    return list(best.values())


def _top_k(predictions: Sequence[PredictedRelation], k: int) -> list[PredictedRelation]:
    return sorted(predictions, key=lambda p: -p.score)[:k]


def _compatible(
    prediction: PredictedRelation, gt: TripletRecord, threshold: float
) -> bool:
    return (
        prediction.predicate == gt.predicate
        and prediction.subject_class == gt.subject_class
        and prediction.object_class == gt.object_class
        and iou(prediction.subject_box, gt.subject_box) >= threshold
        and iou(prediction.object_box, gt.object_box) >= threshold
    )


def _max_matching(edges: Sequence[Sequence[int]], n_right: int) -> list[int]:
    """Kuhn's augmenting-path matching; returns the matched left indices."""
    owner = [-1] * n_right

    def augment(left: int, visited: list[bool]) -> bool:
        for right in edges[left]:
            if visited[right]:
                continue
            visited[right] = True
            if owner[right] == -1 or augment(owner[right], visited):
                owner[right] = left
                return True
        return False

    for left in range(len(edges)):
        augment(left, [False] * n_right)
    return [left for left in owner if left != -1]


def _group_by_image(
    predictions: Iterable[PredictedRelation],
) -> dict[int, list[PredictedRelation]]:
    grouped: dict[int, list[PredictedRelation]] = defaultdict(list)
    for prediction in apply_graph_constraint(predictions):
        grouped[prediction.image_id].append(prediction)
    return grouped


def class_hits(
    predictions: Iterable[PredictedRelation],
    ground_truth: Dataset,
    k: int,
    *,
    iou_threshold: float = BOX_MATCH_IOU,
) -> dict[int, tuple[int, int]]:
    """``predicate -> (recalled, total)`` GT counts at top-``k`` per image.

    Each prediction recalls at most one GT triplet (maximum one-to-one matching).
    """
    if k <= 0:
        raise ValidationError("metrics", f"K must be positive, got {k}")
    by_image = _group_by_image(predictions)
    hits: dict[int, list[int]] = defaultdict(lambda: [0, 0])
    for image_id, records in sorted(ground_truth.images.items()):
        gts = [r for r in records if r.predicate != BACKGROUND]
        for gt in gts:
            hits[gt.predicate][1] += 1
        top = _top_k(by_image.get(image_id, []), k)
        edges = [
            [j for j, p in enumerate(top) if _compatible(p, gt, iou_threshold)] for gt in gts
        ]
        for left in _max_matching(edges, len(top)):
            hits[gts[left].predicate][0] += 1
    return {p: (h[0], h[1]) for p, h in sorted(hits.items())}


def recall_at_k(
    predictions: Iterable[PredictedRelation],
    ground_truth: Dataset,
    k: int,
    *,
    iou_threshold: float = BOX_MATCH_IOU,
) -> float:
    """Micro recall: recalled GT triplets over all GT triplets."""
    hits = class_hits(predictions, ground_truth, k, iou_threshold=iou_threshold)
    total = sum(t for _, t in hits.values())
    return sum(h for h, _ in hits.values()) / total if total else 0.0


def _group_mean(
    per_class: Mapping[int, float], label_space: LabelSpace
) -> GroupRecall:
    def mean(values: list[float]) -> float | None:
        return float(np.mean(values)) if values else None

    grouped: dict[Group, list[float]] = defaultdict(list)
    for predicate, value in per_class.items():
        group = label_space.groups.get(predicate)
        if group is not None:
            grouped[group].append(value)
    return GroupRecall(
        overall=mean(list(per_class.values())) or 0.0,
        head=mean(grouped[Group.HEAD]),
        body=mean(grouped[Group.BODY]),
        tail=mean(grouped[Group.TAIL]),
    )


def per_class_recall(hits: Mapping[int, tuple[int, int]]) -> dict[int, float]:
    """Recall of every predicate with at least one GT instance."""
    return {p: h / t for p, (h, t) in hits.items() if t > 0}


def mean_recall_at_k(
    predictions: Iterable[PredictedRelation],
    ground_truth: Dataset,
    k: int,
    label_space: LabelSpace | None = None,
    *,
    iou_threshold: float = BOX_MATCH_IOU,
) -> GroupRecall:
    """Unweighted mean of per-class recalls, overall and within each group."""
    hits = class_hits(predictions, ground_truth, k, iou_threshold=iou_threshold)
    return _group_mean(per_class_recall(hits), label_space or ground_truth.label_space)


def f1(r: float, mr: float) -> float:
    """Harmonic mean of recall and mean recall; ``f1(0, 0) == 0``."""
    if r < 0.0 or mr < 0.0:
        raise ValidationError("metrics", "recalls must be non-negative")
    if r + mr == 0.0:
        return 0.0
    return 2.0 * r * mr / (r + mr)


def avg(r: float, mr: float) -> float:
    if r < 0.0 or mr < 0.0:
        raise ValidationError("metrics", "recalls must be non-negative")
    return (r + mr) / 2.0


def evaluate(
    predictions: Iterable[PredictedRelation],
    ground_truth: Dataset,
    cfg: EvalConfig | None = None,
    label_space: LabelSpace | None = None,
) -> EvalReport:
    """R@K, mR@K (with group breakdown), F1@K and Avg@K for every configured K."""
    cfg = cfg or EvalConfig()
    space = label_space or ground_truth.label_space
    constrained = apply_graph_constraint(predictions)
    recall: dict[int, float] = {}
    mean_recall: dict[int, GroupRecall] = {}
    per_class: dict[int, dict[int, float]] = {}
    for k in sorted(cfg.k):
        hits = class_hits(constrained, ground_truth, k, iou_threshold=cfg.iou_threshold)
        total = sum(t for _, t in hits.values())
        recall[k] = sum(h for h, _ in hits.values()) / total if total else 0.0
        per_class[k] = per_class_recall(hits)
        mean_recall[k] = _group_mean(per_class[k], space)
    METRICS.evaluations_total.inc()
    report = EvalReport(
        k=tuple(sorted(cfg.k)),
        recall=recall,
        mean_recall=mean_recall,
        f1={k: f1(recall[k], mean_recall[k].overall) for k in recall},
        avg={k: avg(recall[k], mean_recall[k].overall) for k in recall},
        per_class_recall=per_class,
    )
    for k in report.k:
        LOGGER.info(
            "K=%d: R=%.4f mR=%.4f F1=%.4f",
            k,
            recall[k],
            mean_recall[k].overall,
            report.f1[k],
        )
    return report


def relations_from_scores(
    image_id: int,
    subject: tuple[int, BBox],
    obj: tuple[int, BBox],
    scores: Sequence[float] | np.ndarray,
) -> list[PredictedRelation]:
    """One scored relation per non-background predicate of a pair's distribution."""
    return [
        PredictedRelation(
            image_id=image_id,
            subject_class=subject[0],
            subject_box=subject[1],
            object_class=obj[0],
            object_box=obj[1],
            predicate=p,
            score=float(scores[p]),
        )
        for p in range(1, len(scores))
    ]


def load_predicted_relations(
    path: str | Path, label_space: LabelSpace
) -> list[PredictedRelation]:
    """Read scored relations, one pair per line.

    A line carries either ``"p"`` and ``"score"`` or a full ``"scores"``
    distribution over predicates.
    """
    source = str(path)
    objects = label_space.object_classes
    relations: list[PredictedRelation] = []
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            payload = json.loads(line)
            image_id = int(payload["image_id"])
            s_cls, s_box, _ = parse_part(payload["s"], objects)
            o_cls, o_box, _ = parse_part(payload["o"], objects)
            if "scores" in payload:
                scores = [float(v) for v in payload["scores"]]
                if len(scores) != label_space.n_predicates:
                    raise ValueError(f"expected {label_space.n_predicates} scores")
                relations.extend(
                    relations_from_scores(image_id, (s_cls, s_box), (o_cls, o_box), scores)
                )
                continue
            predicate = int(payload["p"])
            if not label_space.has_predicate(predicate):
                raise ValueError(f"predicate {predicate} out of range")
            relations.append(
                PredictedRelation(
                    image_id, s_cls, s_box, o_cls, o_box, predicate, float(payload["score"])
                )
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ParseError("metrics", source, f"bad prediction: {exc}", line=line_no) from exc
    return relations


def write_predicted_relations(relations: Iterable[PredictedRelation], path: str | Path) -> None:
    lines = [
        json.dumps(
            {
                "image_id": r.image_id,
                "s": {"cls": r.subject_class, "box": r.subject_box.as_list()},
                "o": {"cls": r.object_class, "box": r.object_box.as_list()},
                "p": r.predicate,
                "score": r.score,
            }
        )
        for r in relations
    ]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def load_groups(path: str | Path, label_space: LabelSpace) -> LabelSpace:
    """Label space with groups replaced from a ``{predicate name: group}`` JSON file."""
    source = str(path)
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        groups = {
            label_space.predicate_index(name): Group(group) for name, group in payload.items()
        }
    except ValidationError as exc:
        raise ParseError("metrics", source, exc.message) from exc
    except (json.JSONDecodeError, AttributeError, ValueError) as exc:
        raise ParseError("metrics", source, f"malformed groups file: {exc}") from exc
    return LabelSpace(
        object_classes=label_space.object_classes,
        predicate_classes=label_space.predicate_classes,
        groups=groups,
        valid_triples=label_space.valid_triples,
    )


def write_report(
    report: EvalReport, path: str | Path, predicate_names: Sequence[str] | None = None
) -> None:
    Path(path).write_text(
        json.dumps(report.to_json(predicate_names), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
