from __future__ import annotations

import json
import logging
import struct
from pathlib import Path
from typing import Any

import numpy as np
import pytest

from tripletforge.src.core import BBox, ParseError, SoftLabel, TripletRecord, ValidationError
from tripletforge.src.ingest import (
    FEATURE_MAGIC,
    FeatureStore,
    dump_annotations,
    instance_ids,
    load_annotations,
    load_features,
    load_predictions,
    write_features,
    write_predictions,
)

OBJECTS = ["man", "chair", "laptop", "table", "plant", "pot", "person"]
PREDICATES = ["__background__", "sitting on", "on", "in", "above"]


def _part(cls: int, box: list[float], inst: int | None = None) -> dict[str, Any]:
    part: dict[str, Any] = {"cls": cls, "box": box}
    if inst is not None:
        part["inst"] = inst
    return part


def _triplet(ident: int, s: dict[str, Any], o: dict[str, Any], p: int) -> dict[str, Any]:
    return {"id": ident, "s": s, "o": o, "p": p}


def _write_lines(path: Path, payloads: list[dict[str, Any]]) -> Path:
    path.write_text("\n".join(json.dumps(p) for p in payloads) + "\n", encoding="utf-8")
    return path


def _kitchen_scene(path: Path) -> Path:
    """One image with four relations and one unlabeled pair."""
    return _write_lines(
        path,
        [
            {"label_space": {"object_classes": OBJECTS, "predicate_classes": PREDICATES}},
            {
                "image_id": 1,
                "triplets": [
                    {"id": 0, "s": _part(0, [0, 0, 4, 8]), "o": _part(1, [0, 4, 4, 10]), "p": 1},
                    {"id": 1, "s": _part(2, [5, 2, 8, 4]), "o": _part(3, [4, 4, 12, 9]), "p": 2},
                    {"id": 2, "s": _part(4, [12, 0, 14, 3]), "o": _part(5, [12, 2, 14, 5]), "p": 3},
                    {"id": 3, "s": _part(6, [1, 1, 3, 3]), "o": _part(2, [5, 2, 8, 4]), "p": 2},
                ],
                "negatives": [{"s": _part(0, [0, 0, 4, 8], 90), "o": _part(3, [4, 4, 12, 9], 91)}],
            },
        ],
    )


def test_load_annotations_empty_file(tmp_path: Path) -> None:
    path = tmp_path / "empty.jsonl"
    path.write_text("", encoding="utf-8")

    dataset = load_annotations(path)

    assert len(dataset) == 0
    assert dataset.image_ids == []


def test_load_annotations_single_triplet_without_header(tmp_path: Path) -> None:
    triplet = _triplet(7, _part(0, [0, 0, 1, 1]), _part(2, [1, 1, 2, 2]), 4)
    path = _write_lines(tmp_path / "one.jsonl", [{"image_id": 3, "triplets": [triplet]}])

    dataset = load_annotations(path)

    assert len(dataset) == 1
    record = dataset.by_id[7]
    assert record.combo == (0, 4, 2)
    assert dataset.label_space.n_objects == 3
    assert dataset.label_space.n_predicates == 5
    assert dataset.label_space.predicate_classes[0] == "__background__"


def test_load_annotations_kitchen_scene(tmp_path: Path) -> None:
    dataset = load_annotations(_kitchen_scene(tmp_path / "scene.jsonl"))

    assert dataset.image_ids == [1]
    assert len(dataset.images[1]) == 4
    assert [r.predicate for r in dataset.records()] == [1, 2, 3, 2]
    negative = next(dataset.negatives())
    assert negative.negative_id == 0
    assert instance_ids(negative) == (90, 91)
    assert instance_ids(dataset.by_id[3]) == (6, 7)
    assert dataset.label_space.is_valid(2, 2, 3)


def test_load_annotations_reports_line_of_bad_box(tmp_path: Path) -> None:
    path = _write_lines(
        tmp_path / "bad.jsonl",
        [
            {"image_id": 0, "triplets": []},
            {
                "image_id": 1,
                "triplets": [_triplet(0, _part(0, [2, 0, 1, 1]), _part(0, [0, 0, 1, 1]), 1)],
            },
        ],
    )

    with pytest.raises(ParseError) as excinfo:
        load_annotations(path)

    assert excinfo.value.line == 2
    assert str(excinfo.value).startswith("ingest: ")


def test_load_annotations_rejects_duplicate_triplet_ids(tmp_path: Path) -> None:
    triplet = {"id": 5, "s": _part(0, [0, 0, 1, 1]), "o": _part(0, [0, 0, 2, 2]), "p": 1}
    path = _write_lines(
        tmp_path / "dup.jsonl",
        [{"image_id": 0, "triplets": [triplet]}, {"image_id": 1, "triplets": [triplet]}],
    )

    with pytest.raises(ParseError, match="duplicate triplet_id 5"):
        load_annotations(path)


def test_load_annotations_reads_soft_labels(tmp_path: Path) -> None:
    path = _write_lines(
        tmp_path / "soft.jsonl",
        [
            {"label_space": {"object_classes": OBJECTS, "predicate_classes": PREDICATES}},
            {
                "image_id": 0,
                "triplets": [
                    {
                        "id": 0,
                        "s": _part(2, [0, 0, 1, 1]),
                        "o": _part(3, [0, 1, 2, 2]),
                        "p_soft": {"above": 0.76, "on": 0.24},
                    }
                ],
            },
        ],
    )

    record = load_annotations(path).by_id[0]

    assert record.label == SoftLabel(((2, 0.24), (4, 0.76)))
    assert record.predicate == 4


def test_dump_annotations_round_trips(tmp_path: Path) -> None:
    original = load_annotations(_kitchen_scene(tmp_path / "scene.jsonl"))
    relabeled = original.relabel({1: SoftLabel(((2, 0.24), (4, 0.76)))})

    dump_annotations(relabeled, tmp_path / "out.jsonl")
    reloaded = load_annotations(tmp_path / "out.jsonl", relabeled.label_space)

    assert reloaded == relabeled


def test_load_predictions_aggregates_per_combo(tmp_path: Path) -> None:
    dataset = load_annotations(_kitchen_scene(tmp_path / "scene.jsonl"))
    v1 = [0.1, 0.1, 0.6, 0.1, 0.1]
    v3 = [0.1, 0.1, 0.2, 0.1, 0.5]
    path = _write_lines(
        tmp_path / "dump.jsonl",
        [
            {"triplet_id": 0, "vector": [0.0, 1.0, 0.0, 0.0, 0.0]},
            {"triplet_id": 1, "vector": v1},
            {"triplet_id": 3, "vector": v3},
            {"negative_id": 0, "vector": [0.7, 0.1, 0.1, 0.1, 0.0]},
        ],
    )

    dump = load_predictions(path, dataset)

    # triplets 1 and 3 differ in subject class, so each is its own combo
    assert dump.per_combo[(2, 2, 3)].support == 1
    np.testing.assert_allclose(dump.per_combo[(2, 2, 3)].mean, v1)
    np.testing.assert_allclose(dump.per_negative[0], [0.7, 0.1, 0.1, 0.1, 0.0])


def test_load_predictions_mean_and_support_of_shared_combo(tmp_path: Path) -> None:
    box_a, box_b = [0, 0, 1, 1], [1, 1, 2, 2]
    path = _write_lines(
        tmp_path / "ann.jsonl",
        [
            {
                "image_id": 0,
                "triplets": [
                    {"id": 0, "s": _part(0, box_a), "o": _part(1, box_b), "p": 1},
                    {"id": 1, "s": _part(0, box_b), "o": _part(1, box_a), "p": 1},
                    {"id": 2, "s": _part(1, box_a), "o": _part(0, box_b), "p": 2},
                ],
            }
        ],
    )
    dataset = load_annotations(path)
    vectors = {0: [0.0, 0.8, 0.2], 1: [0.0, 0.4, 0.6], 2: [0.0, 0.0, 1.0]}
    dump_path = _write_lines(
        tmp_path / "dump.jsonl",
        [{"triplet_id": t, "vector": v} for t, v in vectors.items()],
    )

    dump = load_predictions(dump_path, dataset)

    assert {combo: stats.support for combo, stats in dump.per_combo.items()} == {
        (0, 1, 1): 2,
        (1, 2, 0): 1,
    }
    np.testing.assert_allclose(dump.per_combo[(0, 1, 1)].mean, [0.0, 0.6, 0.4])
    np.testing.assert_allclose(dump.per_combo[(1, 2, 0)].mean, vectors[2])


def test_load_predictions_renormalizes_small_drift(
    tmp_path: Path, caplog: pytest.LogCaptureFixture
) -> None:
    dataset = load_annotations(_kitchen_scene(tmp_path / "scene.jsonl"))
    path = _write_lines(
        tmp_path / "dump.jsonl", [{"triplet_id": 0, "vector": [0.0, 0.50002, 0.5, 0.0, 0.0]}]
    )

    with caplog.at_level(logging.WARNING):
        dump = load_predictions(path, dataset)

    assert dump.per_triplet[0].sum() == pytest.approx(1.0, abs=1e-12)
    assert "Renormalizing" in caplog.text


def test_load_predictions_rejects_bad_vectors(tmp_path: Path) -> None:
    dataset = load_annotations(_kitchen_scene(tmp_path / "scene.jsonl"))

    short = _write_lines(tmp_path / "short.jsonl", [{"triplet_id": 0, "vector": [0.5, 0.5]}])
    with pytest.raises(ValidationError, match="expected 5 entries"):
        load_predictions(short, dataset)

    unknown = _write_lines(
        tmp_path / "unknown.jsonl", [{"triplet_id": 42, "vector": [1.0, 0, 0, 0, 0]}]
    )
    with pytest.raises(ValidationError, match="unknown triplet_id 42"):
        load_predictions(unknown, dataset)

    off = _write_lines(tmp_path / "off.jsonl", [{"triplet_id": 0, "vector": [0.5, 0.6, 0, 0, 0]}])
    with pytest.raises(ValidationError, match="not 1"):
        load_predictions(off, dataset)


def test_write_predictions_round_trips(tmp_path: Path) -> None:
    dataset = load_annotations(_kitchen_scene(tmp_path / "scene.jsonl"))
    path = _write_lines(
        tmp_path / "dump.jsonl",
        [
            {"triplet_id": 2, "vector": [0.0, 0.0, 0.25, 0.75, 0.0]},
            {"negative_id": 0, "vector": [1.0, 0.0, 0.0, 0.0, 0.0]},
        ],
    )
    dump = load_predictions(path, dataset)

    write_predictions(dump, tmp_path / "copy.jsonl")
    again = load_predictions(tmp_path / "copy.jsonl", dataset)

    np.testing.assert_array_equal(again.per_triplet[2], dump.per_triplet[2])
    np.testing.assert_array_equal(again.per_negative[0], dump.per_negative[0])


def test_features_empty_store_keeps_dim(tmp_path: Path) -> None:
    path = tmp_path / "empty.bin"
    path.write_bytes(struct.pack("<4sIII", FEATURE_MAGIC, 1, 1024, 0))

    store = load_features(path)

    assert len(store) == 0
    assert store.dim == 1024


def test_features_round_trip_two_rows(tmp_path: Path) -> None:
    store = FeatureStore.from_arrays([4, 9], [1, 0], np.array([[1, 2, 3, 4], [0.5, 0, -1, 2]]))

    write_features(store, tmp_path / "feats.bin")
    loaded = load_features(tmp_path / "feats.bin")

    assert len(loaded) == 2
    assert loaded.rows[9].class_index == 0
    np.testing.assert_array_equal(loaded.vector(4), [1.0, 2.0, 3.0, 4.0])


def test_features_reject_nan_rows_and_truncation(tmp_path: Path) -> None:
    header = struct.pack("<4sIII", FEATURE_MAGIC, 1, 2, 1)
    row = struct.pack("<QI2f", 0, 0, float("nan"), 1.0)
    (tmp_path / "nan.bin").write_bytes(header + row)
    (tmp_path / "short.bin").write_bytes(header + row[:-2])

    with pytest.raises(ParseError, match="non-finite"):
        load_features(tmp_path / "nan.bin")
    with pytest.raises(ParseError, match="truncated"):
        load_features(tmp_path / "short.bin")


def test_feature_store_missing_instance_raises() -> None:
    with pytest.raises(ValidationError, match="no features for instance 1"):
        FeatureStore.from_arrays([0], [0], np.zeros((1, 3))).vector(1)


def test_dataset_extend_consumes_negatives(tmp_path: Path) -> None:
    dataset = load_annotations(_kitchen_scene(tmp_path / "scene.jsonl"))
    negative = next(dataset.negatives())
    added = TripletRecord(
        triplet_id=10,
        image_id=1,
        subject_class=negative.subject_class,
        subject_box=negative.subject_box,
        object_class=negative.object_class,
        object_box=BBox(4, 4, 12, 9),
        label=SoftLabel.one_hot(2),
    )

    extended = dataset.extend([added], [negative.negative_id])

    assert len(extended) == 5
    assert list(extended.negatives()) == []
    assert extended.label_space == dataset.label_space


def test_even_soft_label_keeps_its_tie_winner_on_disk(tmp_path: Path) -> None:
    original = load_annotations(_kitchen_scene(tmp_path / "scene.jsonl"))
    relabeled = original.relabel({1: SoftLabel.from_mapping({2: 0.5, 4: 0.5}, preferred=4)})

    dump_annotations(relabeled, tmp_path / "out.jsonl")
    reloaded = load_annotations(tmp_path / "out.jsonl", relabeled.label_space)

    assert reloaded.by_id[1].predicate == 4
    assert reloaded.by_id[1].label.as_dict() == {2: 0.5, 4: 0.5}
