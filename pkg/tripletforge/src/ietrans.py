from __future__ import annotations

import json
import logging
from collections import defaultdict
from collections.abc import Iterable, Mapping
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from tripletforge.src.core import (
    BACKGROUND,
    ParseError,
    SoftLabel,
    TripletRecord,
    ValidationError,
    percent_count,
)
from tripletforge.src.ingest import Dataset, PredictionDump, parse_triplet, triplet_json
from tripletforge.src.telemetry import METRICS

LOGGER = logging.getLogger(__name__)

ParentChildMap = Mapping[int, frozenset[int]]


@dataclass(frozen=True)
class TransferConfig:
    """Internal/external transfer parameters (percentages and affinity threshold)."""

    k_i: float = 70.0
    k_e: float = 100.0
    aff_threshold: float = 0.1

    def __post_init__(self) -> None:
        for name in ("k_i", "k_e"):
            value = getattr(self, name)
            if not (0.0 <= value <= 100.0):
                raise ValidationError("ietrans", f"{name} must be in [0, 100], got {value}")
        if not (0.0 <= self.aff_threshold <= 1.0):
            raise ValidationError(
                "ietrans", f"aff_threshold must be in [0, 1], got {self.aff_threshold}"
            )


@dataclass(frozen=True)
class TransferDecision:
    """Reassignment of one triplet from a general source to an informative target."""

    triplet_id: int
    source: int
    target: int
    score: float

    def __post_init__(self) -> None:
        if self.source == self.target:
            raise ValidationError("ietrans", f"triplet {self.triplet_id}: source equals target")
        if BACKGROUND in (self.source, self.target):
            raise ValidationError(
                "ietrans", f"triplet {self.triplet_id}: background cannot be transferred"
            )


def _check_percent(name: str, value: float) -> None:
    if not (0.0 <= value <= 100.0):
        raise ValidationError("ietrans", f"{name} must be in [0, 100], got {value}")


def affinities(dump: PredictionDump, counts: Mapping[int, int]) -> dict[tuple[int, int], float]:
    """Mean probability mass on ``q`` over instances labeled ``p``, for rarer ``q``."""
    by_source: dict[int, list[np.ndarray]] = defaultdict(list)
    for triplet_id in sorted(dump.per_triplet):
        source = dump.triplet_combos[triplet_id][1]
        if source != BACKGROUND:
            by_source[source].append(dump.per_triplet[triplet_id])
    result: dict[tuple[int, int], float] = {}
    for source, vectors in sorted(by_source.items()):
        mean = np.mean(np.stack(vectors), axis=0)
        for target in range(1, dump.n_predicates):
            if target != source and counts.get(target, 0) < counts.get(source, 0):
                result[(source, target)] = float(mean[target])
    return result


def build_parent_child(
    dump: PredictionDump, counts: Mapping[int, int], aff_threshold: float = 0.1
) -> dict[int, frozenset[int]]:
    """Link each informative predicate to the general predicate that absorbs it.

    The parent of ``q`` is the more frequent ``p`` with the highest affinity
    above ``aff_threshold``; ties go to the lower ``p``.
    """
    best: dict[int, tuple[float, int]] = {}
    for (source, target), score in affinities(dump, counts).items():
        if score <= aff_threshold:
            continue
        current = best.get(target)
        if current is None or (-score, source) < (-current[0], current[1]):
            best[target] = (score, source)
    children: dict[int, set[int]] = defaultdict(set)
    for target, (_, source) in best.items():
        children[source].add(target)
    mapping = {source: frozenset(targets) for source, targets in sorted(children.items())}
    LOGGER.info(
        "Linked %d informative predicates to %d general predicates (threshold=%.3f)",
        len(best),
        len(mapping),
        aff_threshold,
    )
    return mapping


def internal_transfer(
    dataset: Dataset, dump: PredictionDump, pc_map: ParentChildMap, k_i: float
) -> list[TransferDecision]:
    """Select the top ``k_i``% instances of each general predicate for reassignment.

    Per (source, target) pair, instances labeled with the source are ranked
    by descending target probability (ties by ascending triplet id) and the
    floor of ``k_i``% is kept. A triplet chosen by several targets keeps the
    one with the highest probability, ties to the lower target index.
    """
    _check_percent("k_i", k_i)
    by_source: dict[int, list[int]] = defaultdict(list)
    for record in dataset.records():
        if record.triplet_id in dump.per_triplet:
            by_source[record.predicate].append(record.triplet_id)

    chosen: dict[int, TransferDecision] = {}
    for source in sorted(pc_map):
        pool = by_source.get(source, [])
        for target in sorted(pc_map[source]):
            ranked = sorted(pool, key=lambda t: (-dump.per_triplet[t][target], t))
            for triplet_id in ranked[: percent_count(k_i, len(ranked))]:
                decision = TransferDecision(
                    triplet_id=triplet_id,
                    source=source,
                    target=target,
                    score=float(dump.per_triplet[triplet_id][target]),
                )
                current = chosen.get(triplet_id)
                if current is None or (-decision.score, target) < (-current.score, current.target):
                    chosen[triplet_id] = decision
    decisions = [chosen[t] for t in sorted(chosen)]
    METRICS.transfer_decisions_total.labels(kind="internal").inc(len(decisions))
    LOGGER.info("Internal transfer: %d decisions at k_i=%.1f", len(decisions), k_i)
    return decisions


def external_transfer(dataset: Dataset, dump: PredictionDump, k_e: float) -> list[TripletRecord]:
    """Label the top ``k_e``% of no-relation pairs with their best foreground predicate.

    Pairs whose overall argmax is background are not eligible. New triplet
    ids continue above the dataset maximum in ranking order.
    """
    _check_percent("k_e", k_e)
    pool: list[tuple[float, int, int]] = []
    for pair in dataset.negatives():
        vector = dump.per_negative.get(pair.negative_id)
        if vector is None or int(np.argmax(vector)) == BACKGROUND:
            continue
        foreground = vector[1:]
        predicate = int(np.argmax(foreground)) + 1
        pool.append((float(foreground.max()), pair.negative_id, predicate))
    pool.sort(key=lambda item: (-item[0], item[1]))
    selected = pool[: percent_count(k_e, len(pool))]

    negatives = {pair.negative_id: pair for pair in dataset.negatives()}
    next_id = dataset.max_triplet_id + 1
    new_records: list[TripletRecord] = []
    for offset, (_, negative_id, predicate) in enumerate(selected):
        pair = negatives[negative_id]
        new_records.append(
            TripletRecord(
                triplet_id=next_id + offset,
                image_id=pair.image_id,
                subject_class=pair.subject_class,
                subject_box=pair.subject_box,
                object_class=pair.object_class,
                object_box=pair.object_box,
                label=SoftLabel.one_hot(predicate),
                subject_instance=pair.subject_instance,
                object_instance=pair.object_instance,
            )
        )
    METRICS.transfer_decisions_total.labels(kind="external").inc(len(new_records))
    LOGGER.info(
        "External transfer: %d of %d eligible negative pairs labeled at k_e=%.1f",
        len(new_records),
        len(pool),
        k_e,
    )
    return new_records


def consumed_negatives(dataset: Dataset, external: Iterable[TripletRecord]) -> list[int]:
    """Negative ids whose pair became one of the ``external`` triplets."""
    keys = {
        (r.image_id, r.subject_class, r.subject_box, r.object_class, r.object_box)
        for r in external
    }
    return [
        n.negative_id
        for n in dataset.negatives()
        if (n.image_id, n.subject_class, n.subject_box, n.object_class, n.object_box) in keys
    ]


def apply_transfers(
    dataset: Dataset,
    decisions: Iterable[TransferDecision],
    external: Iterable[TripletRecord] = (),
) -> Dataset:
    """Dataset with decisions as one-hot targets and external triplets merged."""
    relabeled = dataset.relabel({d.triplet_id: SoftLabel.one_hot(d.target) for d in decisions})
    extra = list(external)
    if not extra:
        return relabeled
    return relabeled.extend(extra, consumed_negatives(dataset, extra))


def run_transfer(
    dataset: Dataset, dump: PredictionDump, config: TransferConfig
) -> tuple[list[TransferDecision], list[TripletRecord]]:
    pc_map = build_parent_child(dump, dataset.predicate_counts(), config.aff_threshold)
    decisions = internal_transfer(dataset, dump, pc_map, config.k_i)
    external = external_transfer(dataset, dump, config.k_e)
    return decisions, external


def write_decisions(decisions: Iterable[TransferDecision], path: str | Path) -> None:
    lines = [
        json.dumps(
            {"triplet_id": d.triplet_id, "source": d.source, "target": d.target, "score": d.score}
        )
        for d in decisions
    ]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def load_decisions(path: str | Path) -> list[TransferDecision]:
    source = str(path)
    decisions: list[TransferDecision] = []
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            payload = json.loads(line)
            decisions.append(
                TransferDecision(
                    triplet_id=int(payload["triplet_id"]),
                    source=int(payload["source"]),
                    target=int(payload["target"]),
                    score=float(payload["score"]),
                )
            )
        except ValidationError as exc:
            raise ParseError("ietrans", source, exc.message, line=line_no) from exc
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ParseError("ietrans", source, f"malformed decision: {exc}", line=line_no) from exc
    return decisions


def write_external(
    records: Iterable[TripletRecord], predicates: tuple[str, ...], path: str | Path
) -> None:
    lines = [
        json.dumps({"image_id": r.image_id, **triplet_json(r, predicates)}) for r in records
    ]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def load_external(path: str | Path, dataset: Dataset) -> list[TripletRecord]:
    """Read external-transfer triplets written by :func:`write_external`."""
    source = str(path)
    space = dataset.label_space
    records: list[TripletRecord] = []
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            payload = json.loads(line)
            records.append(
                parse_triplet(
                    payload,
                    int(payload["image_id"]),
                    space.object_classes,
                    space.predicate_classes,
                )
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ParseError("ietrans", source, f"malformed triplet: {exc}", line=line_no) from exc
    return records
