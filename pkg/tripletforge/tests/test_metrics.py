from __future__ import annotations

import json
from collections.abc import Sequence
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from tripletforge.src.core import BBox, Group, ParseError, TripletRecord, ValidationError, iou
from tripletforge.src.ingest import Dataset
from tripletforge.src.metrics import (
    EvalConfig,
    PredictedRelation,
    apply_graph_constraint,
    avg,
    class_hits,
    evaluate,
    f1,
    load_groups,
    load_predicted_relations,
    mean_recall_at_k,
    recall_at_k,
    write_predicted_relations,
    write_report,
)
from tripletforge.tests import builders

MAN, HORSE = 0, 1
ON, RIDING, NEAR = 1, 2, 3
GROUPS = {ON: Group.HEAD, RIDING: Group.BODY, NEAR: Group.TAIL}
OBJECT_BOX = BBox(50.0, 0.0, 60.0, 10.0)
FAR_BOX = BBox(200.0, 0.0, 210.0, 10.0)


def _crowded() -> Dataset:
    """Two overlapping "man on horse" triplets and one "man near horse" elsewhere."""
    records = [
        builders.record(
            0, MAN, ON, HORSE, subject_box=BBox(0.0, 0.0, 10.0, 10.0), object_box=OBJECT_BOX
        ),
        builders.record(
            1, MAN, ON, HORSE, subject_box=BBox(2.0, 0.0, 12.0, 10.0), object_box=OBJECT_BOX
        ),
        builders.record(
            2, MAN, NEAR, HORSE, subject_box=BBox(100.0, 0.0, 110.0, 10.0), object_box=FAR_BOX
        ),
    ]
    return builders.dataset(records, n_objects=2, n_predicates=4, groups=GROUPS)


def _relation(
    subject_box: BBox, predicate: int, score: float, object_box: BBox = OBJECT_BOX
) -> PredictedRelation:
    return PredictedRelation(0, MAN, subject_box, HORSE, object_box, predicate, score)


def _predictions() -> list[PredictedRelation]:
    # the first matches both "on" triplets, the second only triplet 0
    return [
        _relation(BBox(1.0, 0.0, 11.0, 10.0), ON, 0.9),
        _relation(BBox(-3.0, 0.0, 7.0, 10.0), ON, 0.8),
        _relation(BBox(100.0, 0.0, 110.0, 10.0), NEAR, 0.7, FAR_BOX),
    ]


def test_eval_config_validation() -> None:
    assert EvalConfig(k=[100, 20]).k == (100, 20)  # type: ignore[arg-type]
    with pytest.raises(ValidationError, match="positive"):
        EvalConfig(k=(0,))
    with pytest.raises(ValidationError, match="iou_threshold"):
        EvalConfig(iou_threshold=0.0)


def test_f1_and_avg_reference_values() -> None:
    assert f1(54.7, 30.9) == pytest.approx(39.5, abs=0.05)
    assert avg(65.0, 16.1) == pytest.approx(40.6, abs=0.06)
    assert f1(0.0, 0.0) == 0.0
    with pytest.raises(ValidationError):
        f1(-1.0, 0.5)
    with pytest.raises(ValidationError):
        avg(0.5, -0.1)


def test_graph_constraint_keeps_top_predicate_per_pair() -> None:
    box = BBox(0.0, 0.0, 10.0, 10.0)
    predictions = [
        _relation(box, ON, 0.4),
        _relation(box, RIDING, 0.4),
        _relation(box, NEAR, 0.2),
        _relation(box, 0, 0.9),
    ]

    kept = apply_graph_constraint(predictions)

    assert [(p.predicate, p.score) for p in kept] == [(ON, 0.4)]


def test_recall_uses_maximum_matching() -> None:
    data = _crowded()

    hits = class_hits(_predictions(), data, 50)

    # greedy assignment of the top prediction to triplet 0 would recall only one
    assert hits == {ON: (2, 2), NEAR: (1, 1)}
    assert recall_at_k(_predictions(), data, 50) == 1.0


def test_recall_counts_only_top_k_predictions() -> None:
    data = _crowded()

    assert recall_at_k(_predictions(), data, 1) == pytest.approx(1 / 3)
    assert class_hits(_predictions(), data, 2) == {ON: (2, 2), NEAR: (0, 1)}
    with pytest.raises(ValidationError, match="K must be positive"):
        recall_at_k(_predictions(), data, 0)


def test_wrong_predicate_or_loose_box_is_not_recalled() -> None:
    data = _crowded()
    predictions = [
        _relation(BBox(0.0, 0.0, 10.0, 10.0), RIDING, 0.9),
        _relation(BBox(5.0, 5.0, 15.0, 15.0), NEAR, 0.9),
    ]

    assert recall_at_k(predictions, data, 50) == 0.0


def test_mean_recall_breaks_down_by_group() -> None:
    data = _crowded()
    predictions = _predictions()[1:]

    grouped = mean_recall_at_k(predictions, data, 50)

    assert grouped.overall == pytest.approx(0.75)
    assert grouped.head == pytest.approx(0.5)
    assert grouped.body is None
    assert grouped.tail == 1.0


def test_evaluate_reports_every_k() -> None:
    data = _crowded()

    report = evaluate(_predictions()[1:], data, EvalConfig(k=(50, 1)))

    assert report.k == (1, 50)
    assert report.recall[50] == pytest.approx(2 / 3)
    assert report.mean_recall[50].overall == pytest.approx(0.75)
    assert report.f1[50] == pytest.approx(f1(2 / 3, 0.75))
    assert report.avg[50] == pytest.approx((2 / 3 + 0.75) / 2)
    assert report.per_class_recall[1] == {ON: 1.0 / 2, NEAR: 0.0}


def test_evaluate_without_ground_truth_is_zero() -> None:
    data = builders.dataset([], n_objects=2, n_predicates=4)

    report = evaluate(_predictions(), data, EvalConfig(k=(5,)))

    assert report.recall == {5: 0.0}
    assert report.mean_recall[5].overall == 0.0


def test_prediction_files_round_trip(tmp_path: Path) -> None:
    data = _crowded()
    path = tmp_path / "pred.jsonl"

    write_predicted_relations(_predictions(), path)

    assert load_predicted_relations(path, data.label_space) == _predictions()


def test_prediction_file_with_score_vectors(tmp_path: Path) -> None:
    data = _crowded()
    path = tmp_path / "pred.jsonl"
    line = {
        "image_id": 0,
        "s": {"cls": MAN, "box": [0, 0, 10, 10]},
        "o": {"cls": HORSE, "box": [50, 0, 60, 10]},
        "scores": [0.1, 0.6, 0.2, 0.1],
    }
    path.write_text(json.dumps(line) + "\n" + '{"image_id": 0}\n', encoding="utf-8")

    with pytest.raises(ParseError, match=r"pred.jsonl:2: bad prediction"):
        load_predicted_relations(path, data.label_space)

    path.write_text(json.dumps(line) + "\n", encoding="utf-8")
    relations = load_predicted_relations(path, data.label_space)
    assert [(r.predicate, r.score) for r in relations] == [(1, 0.6), (2, 0.2), (3, 0.1)]


def test_load_groups_overrides_label_space(tmp_path: Path) -> None:
    data = _crowded()
    path = tmp_path / "groups.json"
    path.write_text(json.dumps({"pred_1": "tail", "pred_2": "body", "pred_3": "head"}))

    space = load_groups(path, data.label_space)

    assert space.group_of(ON) is Group.TAIL
    path.write_text(json.dumps({"pred_1": "tail", "riding": "body"}))
    with pytest.raises(ParseError, match="unknown predicate"):
        load_groups(path, data.label_space)


def test_write_report_uses_predicate_names(tmp_path: Path) -> None:
    data = _crowded()
    report = evaluate(_predictions(), data, EvalConfig(k=(50,)))
    path = tmp_path / "report.json"

    write_report(report, path, data.label_space.predicate_classes)

    payload = json.loads(path.read_text(encoding="utf-8"))
    assert payload["recall"] == {"50": 1.0}
    assert payload["per_class_recall"]["50"] == {"pred_1": 1.0, "pred_3": 1.0}
    assert payload["mean_recall"]["50"]["body"] is None


def _jittered(anchor: float, rng: np.random.Generator) -> BBox:
    # boxes at most 3 apart have IoU >= 0.5
    x = anchor + float(rng.integers(0, 7))
    return BBox(x, 0.0, x + 10.0, 10.0)


def _exhaustive_matching(gts: Sequence[TripletRecord], top: Sequence[PredictedRelation]) -> int:
    """Largest number of GT triplets matched one-to-one, by trying every assignment."""

    def compatible(gt: TripletRecord, p: PredictedRelation) -> bool:
        return (
            (p.predicate, p.subject_class, p.object_class)
            == (gt.predicate, gt.subject_class, gt.object_class)
            and iou(p.subject_box, gt.subject_box) >= 0.5
            and iou(p.object_box, gt.object_box) >= 0.5
        )

    def best(index: int, used: frozenset[int]) -> int:
        if index == len(gts):
            return 0
        result = best(index + 1, used)
        for j, prediction in enumerate(top):
            if j not in used and compatible(gts[index], prediction):
                result = max(result, 1 + best(index + 1, used | {j}))
        return result

    return best(0, frozenset())


@pytest.mark.parametrize("seed", range(30))
def test_class_hits_match_exhaustive_assignment(seed: int) -> None:
    rng = np.random.default_rng(seed)
    records: list[TripletRecord] = []
    predictions: list[PredictedRelation] = []
    for image in range(int(rng.integers(1, 6))):
        for _ in range(int(rng.integers(1, 7))):
            records.append(
                builders.record(
                    len(records),
                    MAN,
                    int(rng.integers(1, 3)),
                    HORSE,
                    image=image,
                    subject_box=_jittered(0.0, rng),
                    object_box=_jittered(50.0, rng),
                )
            )
        for _ in range(int(rng.integers(0, 9))):
            predictions.append(
                PredictedRelation(
                    image,
                    MAN,
                    _jittered(0.0, rng),
                    HORSE,
                    _jittered(50.0, rng),
                    int(rng.integers(1, 3)),
                    0.0,
                )
            )
    # distinct scores keep top-K and the per-pair constraint unambiguous
    scores = rng.permutation(len(predictions)) / max(len(predictions), 1)
    predictions = [
        replace(p, score=float(s)) for p, s in zip(predictions, scores, strict=True)
    ]
    data = builders.dataset(records, n_objects=2, n_predicates=3)
    k = int(rng.integers(1, 9))

    hits = class_hits(predictions, data, k)

    expected: dict[int, list[int]] = {}
    for image, image_records in data.images.items():
        kept: dict[tuple[int, BBox, int, BBox], PredictedRelation] = {}
        for p in predictions:
            if p.image_id == image and (p.pair not in kept or p.score > kept[p.pair].score):
                kept[p.pair] = p
        top = sorted(kept.values(), key=lambda p: p.score, reverse=True)[:k]
        for predicate in (ON, RIDING):
            gts = [r for r in image_records if r.predicate == predicate]
            counts = expected.setdefault(predicate, [0, 0])
            counts[0] += _exhaustive_matching(gts, top)
            counts[1] += len(gts)
    assert hits == {p: (c[0], c[1]) for p, c in sorted(expected.items()) if c[1]}
    total = sum(c[1] for c in expected.values())
    assert recall_at_k(predictions, data, k) == pytest.approx(
        sum(c[0] for c in expected.values()) / total
    )
