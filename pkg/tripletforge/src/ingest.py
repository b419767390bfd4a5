from __future__ import annotations

import json
import logging
import struct
from collections import defaultdict
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Any

import numpy as np

from tripletforge.src.core import (
    BBox,
    LabelSpace,
    ParseError,
    SoftLabel,
    TripletRecord,
    ValidationError,
    build_label_space,
)

LOGGER = logging.getLogger(__name__)

FEATURE_MAGIC = b"TFRG"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sIII")
# Stored vectors must sum to 1 within this; up to RENORMALIZE_TOLERANCE they are rescaled.
VECTOR_TOLERANCE = 1e-6
RENORMALIZE_TOLERANCE = 1e-4


@dataclass(frozen=True)
class NegativePair:
    """Object pair in an image with no annotated relation."""

    negative_id: int
    image_id: int
    subject_class: int
    subject_box: BBox
    object_class: int
    object_box: BBox
    subject_instance: int | None = None
    object_instance: int | None = None


def instance_ids(record: TripletRecord | NegativePair) -> tuple[int, int]:
    """Feature-store instance ids of the subject and object of a pair.

    Triplet ``t`` without explicit instances uses ``2t`` and ``2t + 1``.
    """
    if isinstance(record, TripletRecord):
        subject = record.subject_instance
        obj = record.object_instance
        return (
            2 * record.triplet_id if subject is None else subject,
            2 * record.triplet_id + 1 if obj is None else obj,
        )
    if record.subject_instance is None or record.object_instance is None:
        raise ValidationError("ingest", f"negative {record.negative_id} has no instance ids")
    return record.subject_instance, record.object_instance


@dataclass(frozen=True)
class Dataset:
    """Validated annotations: triplets and negative pairs grouped by image."""

    label_space: LabelSpace
    images: Mapping[int, tuple[TripletRecord, ...]]
    negative_pairs: Mapping[int, tuple[NegativePair, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        seen: set[int] = set()
        space = self.label_space
        for image_id, records in self.images.items():
            for record in records:
                if record.image_id != image_id:
                    raise ValidationError(
                        "ingest", f"triplet {record.triplet_id} filed under image {image_id}"
                    )
                if record.triplet_id in seen:
                    raise ValidationError("ingest", f"duplicate triplet_id {record.triplet_id}")
                seen.add(record.triplet_id)
                _check_classes(space, record.subject_class, record.object_class, record.triplet_id)
                for predicate in record.label.support:
                    if not space.has_predicate(predicate):
                        raise ValidationError(
                            "ingest",
                            f"triplet {record.triplet_id} predicate {predicate} out of range",
                        )
        negative_ids: set[int] = set()
        for image_id, pairs in self.negative_pairs.items():
            for pair in pairs:
                if pair.image_id != image_id or pair.negative_id in negative_ids:
                    raise ValidationError("ingest", f"bad negative pair {pair.negative_id}")
                negative_ids.add(pair.negative_id)
                _check_classes(space, pair.subject_class, pair.object_class, pair.negative_id)

    @classmethod
    def from_records(
        cls,
        label_space: LabelSpace,
        records: Iterable[TripletRecord],
        negatives: Iterable[NegativePair] = (),
    ) -> Dataset:
        images: dict[int, list[TripletRecord]] = defaultdict(list)
        for record in records:
            images[record.image_id].append(record)
        negative_pairs: dict[int, list[NegativePair]] = defaultdict(list)
        for pair in negatives:
            negative_pairs[pair.image_id].append(pair)
        return cls(
            label_space=label_space,
            images={
                image_id: tuple(sorted(items, key=lambda r: r.triplet_id))
                for image_id, items in sorted(images.items())
            },
            negative_pairs={
                image_id: tuple(sorted(items, key=lambda n: n.negative_id))
                for image_id, items in sorted(negative_pairs.items())
            },
        )

    def records(self) -> Iterator[TripletRecord]:
        for image_id in sorted(self.images):
            yield from self.images[image_id]

    def negatives(self) -> Iterator[NegativePair]:
        for image_id in sorted(self.negative_pairs):
            yield from self.negative_pairs[image_id]

    @cached_property
    def by_id(self) -> dict[int, TripletRecord]:
        return {record.triplet_id: record for record in self.records()}

    @property
    def image_ids(self) -> list[int]:
        return sorted(set(self.images) | set(self.negative_pairs))

    @property
    def max_triplet_id(self) -> int:
        return max(self.by_id, default=-1)

    def __len__(self) -> int:
        return len(self.by_id)

    def predicate_counts(self) -> dict[int, int]:
        """Hard-label instance count of every non-background predicate."""
        counts = {p: 0 for p in range(1, self.label_space.n_predicates)}
        for record in self.records():
            if record.predicate in counts:
                counts[record.predicate] += 1
        return counts

    def relabel(self, labels: Mapping[int, SoftLabel]) -> Dataset:
        """Copy with the given triplets' labels replaced; the label space is kept."""
        unknown = set(labels) - set(self.by_id)
        if unknown:
            raise ValidationError("ingest", f"cannot relabel unknown triplets {sorted(unknown)}")
        records = (
            replace(r, label=labels[r.triplet_id]) if r.triplet_id in labels else r
            for r in self.records()
        )
        return Dataset.from_records(self.label_space, records, self.negatives())

    def extend(
        self, new_records: Iterable[TripletRecord], consumed_negatives: Iterable[int] = ()
    ) -> Dataset:
        """Copy with ``new_records`` added and the listed negative pairs removed."""
        consumed = set(consumed_negatives)
        return Dataset.from_records(
            self.label_space,
            [*self.records(), *new_records],
            (n for n in self.negatives() if n.negative_id not in consumed),
        )


def _check_classes(space: LabelSpace, subject: int, obj: int, ident: int) -> None:
    if not space.has_object(subject) or not space.has_object(obj):
        raise ValidationError("ingest", f"entry {ident} references an object class out of range")


@dataclass(frozen=True)
class ComboStats:
    mean: np.ndarray
    support: int


@dataclass(frozen=True)
class PredictionDump:
    """Post-softmax predicate vectors of a biased model over the training set."""

    n_predicates: int
    per_triplet: Mapping[int, np.ndarray]
    per_combo: Mapping[tuple[int, int, int], ComboStats]
    per_negative: Mapping[int, np.ndarray]
    triplet_combos: Mapping[int, tuple[int, int, int]]

    @classmethod
    def from_vectors(
        cls,
        dataset: Dataset,
        per_triplet: Mapping[int, Iterable[float]],
        per_negative: Mapping[int, Iterable[float]] | None = None,
        *,
        source: str = "<memory>",
    ) -> PredictionDump:
        """Validate vectors against ``dataset`` and aggregate per ground-truth combo."""
        n = dataset.label_space.n_predicates
        by_id = dataset.by_id
        negative_ids = {pair.negative_id for pair in dataset.negatives()}
        triplets: dict[int, np.ndarray] = {}
        for triplet_id, raw in per_triplet.items():
            if triplet_id not in by_id:
                raise ValidationError("ingest", f"{source}: unknown triplet_id {triplet_id}")
            triplets[triplet_id] = _checked_vector(raw, n, f"{source}: triplet {triplet_id}")
        negatives: dict[int, np.ndarray] = {}
        for negative_id, raw in (per_negative or {}).items():
            if negative_id not in negative_ids:
                raise ValidationError("ingest", f"{source}: unknown negative_id {negative_id}")
            negatives[negative_id] = _checked_vector(raw, n, f"{source}: negative {negative_id}")

        combos = {tid: by_id[tid].combo for tid in triplets}
        grouped: dict[tuple[int, int, int], list[int]] = defaultdict(list)
        for triplet_id in sorted(triplets):
            grouped[combos[triplet_id]].append(triplet_id)
        per_combo = {
            combo: ComboStats(
                mean=np.mean(np.stack([triplets[t] for t in ids]), axis=0),
                support=len(ids),
            )
            for combo, ids in sorted(grouped.items())
        }
        return cls(
            n_predicates=n,
            per_triplet=triplets,
            per_combo=per_combo,
            per_negative=negatives,
            triplet_combos=combos,
        )

    def vector(self, triplet_id: int) -> np.ndarray:
        try:
            return self.per_triplet[triplet_id]
        except KeyError as exc:
            raise ValidationError(
                "ingest", f"no prediction vector for triplet {triplet_id}"
            ) from exc


def _checked_vector(raw: Iterable[float], n: int, where: str) -> np.ndarray:
    vector = np.asarray(list(raw), dtype=np.float64)
    if vector.shape != (n,):
        raise ValidationError("ingest", f"{where}: expected {n} entries, got {vector.size}")
    if not np.all(np.isfinite(vector)) or np.any(vector < 0.0):
        raise ValidationError("ingest", f"{where}: entries must be finite and >= 0")
    total = float(vector.sum())
    drift = abs(total - 1.0)
    if drift > RENORMALIZE_TOLERANCE:
        raise ValidationError("ingest", f"{where}: vector sums to {total!r}, not 1")
    if drift > VECTOR_TOLERANCE:
        LOGGER.warning("Renormalizing %s (sum=%.8f)", where, total)
        vector = vector / total
    return vector


@dataclass(frozen=True)
class FeatureRow:
    class_index: int
    vector: np.ndarray


@dataclass(frozen=True)
class FeatureStore:
    """Per-instance object features with their class labels."""

    dim: int
    rows: Mapping[int, FeatureRow]

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ValidationError("ingest", f"feature dim must be >= 1, got {self.dim}")
        for instance_id, row in self.rows.items():
            if row.vector.shape != (self.dim,):
                raise ValidationError("ingest", f"instance {instance_id} has wrong feature dim")
            if not np.all(np.isfinite(row.vector)):
                raise ValidationError("ingest", f"instance {instance_id} has non-finite features")

    @classmethod
    def from_arrays(
        cls, ids: Iterable[int], classes: Iterable[int], vectors: np.ndarray
    ) -> FeatureStore:
        matrix = np.asarray(vectors, dtype=np.float64)
        rows: dict[int, FeatureRow] = {}
        for instance_id, class_index, vector in zip(ids, classes, matrix, strict=True):
            if int(instance_id) in rows:
                raise ValidationError("ingest", f"duplicate feature instance {instance_id}")
            rows[int(instance_id)] = FeatureRow(int(class_index), vector.copy())
        return cls(dim=int(matrix.shape[1]), rows=rows)

    def __len__(self) -> int:
        return len(self.rows)

    def vector(self, instance_id: int) -> np.ndarray:
        try:
            return self.rows[instance_id].vector
        except KeyError as exc:
            raise ValidationError("ingest", f"no features for instance {instance_id}") from exc

    def matrix(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(ids, classes, vectors)`` sorted by instance id."""
        ids = np.array(sorted(self.rows), dtype=np.int64)
        classes = np.array([self.rows[int(i)].class_index for i in ids], dtype=np.int64)
        if ids.size == 0:
            return ids, classes, np.zeros((0, self.dim), dtype=np.float64)
        vectors = np.stack([self.rows[int(i)].vector for i in ids])
        return ids, classes, vectors


# --- annotations -----------------------------------------------------------


def load_annotations(path: str | Path, label_space: LabelSpace | None = None) -> Dataset:
    """Parse a JSON-lines annotation file into a validated :class:`Dataset`.

    An optional first line ``{"label_space": {...}}`` names the classes and
    enables range checks. Without it (and without ``label_space``) names are
    synthesized and sizes are inferred from the largest index seen.
    """
    source = str(path)
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header: dict[str, Any] | None = None
    parsed: list[tuple[int, dict[str, Any]]] = []
    for line_no, text in enumerate(lines, start=1):
        if not text.strip():
            continue
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError("ingest", source, f"invalid JSON: {exc.msg}", line=line_no) from exc
        if not isinstance(payload, dict):
            raise ParseError("ingest", source, "expected a JSON object", line=line_no)
        if "label_space" in payload:
            if parsed or header is not None:
                raise ParseError("ingest", source, "label_space must come first", line=line_no)
            header = payload["label_space"]
            continue
        parsed.append((line_no, payload))

    objects, predicates = _resolve_names(source, header, label_space, parsed)
    records: list[TripletRecord] = []
    negatives: list[NegativePair] = []
    seen_images: set[int] = set()
    seen_triplets: set[int] = set()
    next_negative = 0
    for line_no, payload in parsed:
        try:
            image_id = int(payload["image_id"])
            if image_id in seen_images:
                raise ValueError(f"duplicate image_id {image_id}")
            seen_images.add(image_id)
            for item in payload.get("triplets", []):
                record = parse_triplet(item, image_id, objects, predicates)
                if record.triplet_id in seen_triplets:
                    raise ValueError(f"duplicate triplet_id {record.triplet_id}")
                seen_triplets.add(record.triplet_id)
                records.append(record)
            for item in payload.get("negatives", []):
                negatives.append(_parse_negative(item, next_negative, image_id, objects))
                next_negative += 1
        except ParseError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError("ingest", source, _describe(exc), line=line_no) from exc

    space = label_space or build_label_space(objects, predicates, records)
    dataset = Dataset.from_records(space, records, negatives)
    LOGGER.info(
        "Loaded %d triplets and %d negative pairs over %d images from %s",
        len(records),
        len(negatives),
        len(seen_images),
        source,
    )
    return dataset


def _describe(exc: Exception) -> str:
    if isinstance(exc, KeyError):
        return f"missing field {exc.args[0]!r}"
    if isinstance(exc, ValidationError):
        return exc.message
    return str(exc)


def _resolve_names(
    source: str,
    header: Mapping[str, Any] | None,
    label_space: LabelSpace | None,
    parsed: list[tuple[int, dict[str, Any]]],
) -> tuple[tuple[str, ...], tuple[str, ...]]:
    if label_space is not None:
        return label_space.object_classes, label_space.predicate_classes
    if header is not None:
        try:
            return tuple(header["object_classes"]), tuple(header["predicate_classes"])
        except (KeyError, TypeError) as exc:
            raise ParseError("ingest", source, "label_space header is malformed", line=1) from exc
    max_object = -1
    max_predicate = 0
    for _, payload in parsed:
        for item in payload.get("triplets", []):
            if not isinstance(item, dict):
                continue
            for part in ("s", "o"):
                cls = item.get(part, {}).get("cls")
                if isinstance(cls, int):
                    max_object = max(max_object, cls)
            if isinstance(item.get("p"), int):
                max_predicate = max(max_predicate, item["p"])
        for item in payload.get("negatives", []):
            if isinstance(item, dict):
                for part in ("s", "o"):
                    cls = item.get(part, {}).get("cls")
                    if isinstance(cls, int):
                        max_object = max(max_object, cls)
    objects = tuple(f"obj_{i}" for i in range(max_object + 1))
    predicates = ("__background__", *(f"pred_{i}" for i in range(1, max_predicate + 1)))
    return objects, predicates


def _parse_box(raw: Any) -> BBox:
    if not isinstance(raw, list) or len(raw) != 4:
        raise ValueError(f"box must be a list of 4 numbers, got {raw!r}")
    try:
        return BBox(*(float(v) for v in raw))
    except ValidationError as exc:
        raise ValueError(exc.message) from exc


def parse_part(
    raw: Mapping[str, Any], objects: tuple[str, ...]
) -> tuple[int, BBox, int | None]:
    cls = raw["cls"]
    if not isinstance(cls, int) or not (0 <= cls < len(objects)):
        raise ValueError(f"object class {cls!r} out of range")
    instance = raw.get("inst")
    return cls, _parse_box(raw["box"]), None if instance is None else int(instance)


def parse_triplet(
    raw: Mapping[str, Any], image_id: int, objects: tuple[str, ...], predicates: tuple[str, ...]
) -> TripletRecord:
    s_cls, s_box, s_inst = parse_part(raw["s"], objects)
    o_cls, o_box, o_inst = parse_part(raw["o"], objects)
    if "p_soft" in raw:
        mapping: dict[int, float] = {}
        # The first listed predicate wins ties.
        first: int | None = None
        for name, prob in raw["p_soft"].items():
            if name not in predicates:
                raise ValueError(f"unknown predicate name {name!r}")
            cls = predicates.index(name)
            mapping[cls] = float(prob)
            if first is None:
                first = cls
        try:
            label = SoftLabel.from_mapping(mapping, preferred=first)
        except ValidationError as exc:
            raise ValueError(exc.message) from exc
    else:
        predicate = raw["p"]
        if not isinstance(predicate, int) or not (1 <= predicate < len(predicates)):
            raise ValueError(f"predicate {predicate!r} out of range")
        label = SoftLabel.one_hot(predicate)
    return TripletRecord(
        triplet_id=int(raw["id"]),
        image_id=image_id,
        subject_class=s_cls,
        subject_box=s_box,
        object_class=o_cls,
        object_box=o_box,
        label=label,
        subject_instance=s_inst,
        object_instance=o_inst,
    )


def _parse_negative(
    raw: Mapping[str, Any], negative_id: int, image_id: int, objects: tuple[str, ...]
) -> NegativePair:
    s_cls, s_box, s_inst = parse_part(raw["s"], objects)
    o_cls, o_box, o_inst = parse_part(raw["o"], objects)
    return NegativePair(
        negative_id=negative_id,
        image_id=image_id,
        subject_class=s_cls,
        subject_box=s_box,
        object_class=o_cls,
        object_box=o_box,
        subject_instance=s_inst,
        object_instance=o_inst,
    )


def _part_json(cls: int, box: BBox, instance: int | None) -> dict[str, Any]:
    part: dict[str, Any] = {"cls": cls, "box": box.as_list()}
    if instance is not None:
        part["inst"] = instance
    return part


def triplet_json(record: TripletRecord, predicates: tuple[str, ...]) -> dict[str, Any]:
    item: dict[str, Any] = {
        "id": record.triplet_id,
        "s": _part_json(record.subject_class, record.subject_box, record.subject_instance),
        "o": _part_json(record.object_class, record.object_box, record.object_instance),
    }
    if record.label.is_hard:
        item["p"] = record.label.top
    else:
        item["p_soft"] = {predicates[c]: prob for c, prob in record.label.ordered()}
    return item


def dump_annotations(dataset: Dataset, path: str | Path) -> None:
    """Write ``dataset`` in the annotation format, header first.

    Negative ids are implicit (file order), so negatives are written in id order.
    """
    space = dataset.label_space
    lines = [
        json.dumps(
            {
                "label_space": {
                    "object_classes": list(space.object_classes),
                    "predicate_classes": list(space.predicate_classes),
                }
            }
        )
    ]
    for image_id in dataset.image_ids:
        payload = {
            "image_id": image_id,
            "triplets": [
                triplet_json(r, space.predicate_classes) for r in dataset.images.get(image_id, ())
            ],
            "negatives": [
                {
                    "s": _part_json(n.subject_class, n.subject_box, n.subject_instance),
                    "o": _part_json(n.object_class, n.object_box, n.object_instance),
                }
                for n in dataset.negative_pairs.get(image_id, ())
            ],
        }
        lines.append(json.dumps(payload))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# --- predictions -----------------------------------------------------------


def load_predictions(path: str | Path, dataset: Dataset) -> PredictionDump:
    """Parse a prediction dump; per-combo means are computed here, never stored."""
    source = str(path)
    per_triplet: dict[int, list[float]] = {}
    per_negative: dict[int, list[float]] = {}
    text = Path(path).read_text(encoding="utf-8")
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            payload = json.loads(line)
            vector = payload["vector"]
            if not isinstance(vector, list):
                raise TypeError("vector must be a list")
            if "triplet_id" in payload:
                per_triplet[int(payload["triplet_id"])] = vector
            elif "negative_id" in payload:
                per_negative[int(payload["negative_id"])] = vector
            else:
                raise KeyError("triplet_id")
        except json.JSONDecodeError as exc:
            raise ParseError("ingest", source, f"invalid JSON: {exc.msg}", line=line_no) from exc
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError("ingest", source, _describe(exc), line=line_no) from exc
    dump = PredictionDump.from_vectors(dataset, per_triplet, per_negative, source=source)
    LOGGER.info(
        "Loaded %d triplet and %d negative prediction vectors (%d combos) from %s",
        len(dump.per_triplet),
        len(dump.per_negative),
        len(dump.per_combo),
        source,
    )
    return dump


def write_predictions(dump: PredictionDump, path: str | Path) -> None:
    lines = [
        json.dumps({"triplet_id": tid, "vector": dump.per_triplet[tid].tolist()})
        for tid in sorted(dump.per_triplet)
    ]
    lines.extend(
        json.dumps({"negative_id": nid, "vector": dump.per_negative[nid].tolist()})
        for nid in sorted(dump.per_negative)
    )
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


# --- features --------------------------------------------------------------


def _row_dtype(dim: int) -> np.dtype[Any]:
    return np.dtype([("id", "<u8"), ("cls", "<u4"), ("vec", "<f4", (dim,))])


def load_features(path: str | Path) -> FeatureStore:
    """Read the little-endian ``TFRG`` feature file."""
    source = str(path)
    data = Path(path).read_bytes()
    if len(data) < _FEATURE_HEADER.size:
        raise ParseError("ingest", source, "truncated header", offset=len(data))
    magic, version, dim, count = _FEATURE_HEADER.unpack_from(data, 0)
    if magic != FEATURE_MAGIC:
        raise ParseError("ingest", source, f"bad magic {magic!r}", offset=0)
    if version != FEATURE_VERSION:
        raise ParseError("ingest", source, f"unsupported version {version}", offset=4)
    if dim < 1:
        raise ParseError("ingest", source, "feature dim must be >= 1", offset=8)
    dtype = _row_dtype(dim)
    expected = _FEATURE_HEADER.size + count * dtype.itemsize
    if len(data) != expected:
        problem = "truncated" if len(data) < expected else "trailing bytes after"
        raise ParseError(
            "ingest",
            source,
            f"{problem} {count} rows of dim {dim}",
            offset=min(len(data), expected),
        )
    rows = np.frombuffer(data, dtype=dtype, count=count, offset=_FEATURE_HEADER.size)
    vectors = rows["vec"].astype(np.float64).reshape(count, dim)
    bad = np.flatnonzero(~np.all(np.isfinite(vectors), axis=1))
    if bad.size:
        offset = _FEATURE_HEADER.size + int(bad[0]) * dtype.itemsize
        raise ParseError("ingest", source, f"row {int(bad[0])} is non-finite", offset=offset)
    if count == 0:
        return FeatureStore(dim=dim, rows={})
    try:
        store = FeatureStore.from_arrays(
            (int(i) for i in rows["id"]), (int(c) for c in rows["cls"]), vectors
        )
    except ValidationError as exc:
        raise ParseError("ingest", source, exc.message) from exc
    LOGGER.info("Loaded %d feature rows of dim %d from %s", count, dim, source)
    return store


def write_features(store: FeatureStore, path: str | Path) -> None:
    ids, classes, vectors = store.matrix()
    rows = np.zeros(len(ids), dtype=_row_dtype(store.dim))
    rows["id"] = ids
    rows["cls"] = classes
    rows["vec"] = vectors.astype(np.float32)
    header = _FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, store.dim, len(ids))
    Path(path).write_bytes(header + rows.tobytes())
