from __future__ import annotations

import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from enum import StrEnum

from tripletforge.src.core import SoftLabel, ValidationError, percent_count
from tripletforge.src.ietrans import TransferDecision
from tripletforge.src.ingest import Dataset, PredictionDump
from tripletforge.src.telemetry import METRICS

LOGGER = logging.getLogger(__name__)


class QMode(StrEnum):
    ONE_MINUS_MINMAX = "one-minus-minmax"
    MINMAX = "minmax"
    NAIVE = "naive"


def parse_q_mode(value: QMode | str) -> QMode:
    try:
        return QMode(value)
    except ValueError as exc:
        raise ValidationError("soft_transfer", f"unknown q_mode {value!r}") from exc


@dataclass(frozen=True)
class SoftTransferConfig:
    k_s: float = 10.0
    # Used instead of k_s when training with per-class reweighting.
    k_s_reweight: float = 30.0
    q_mode: QMode = QMode.ONE_MINUS_MINMAX

    def __post_init__(self) -> None:
        for name in ("k_s", "k_s_reweight"):
            value = getattr(self, name)
            if not (0.0 <= value <= 100.0):
                raise ValidationError("soft_transfer", f"{name} must be in [0, 100], got {value}")
        object.__setattr__(self, "q_mode", parse_q_mode(self.q_mode))


@dataclass(frozen=True)
class ReliabilityRanking:
    """Decisions ordered by ascending reliability; ``selected`` is the bottom ``k_s``%."""

    entries: tuple[tuple[int, float], ...]
    k_s: float
    selected: tuple[tuple[int, float], ...]

    def __post_init__(self) -> None:
        keys = [(score, tid) for tid, score in self.entries]
        if keys != sorted(keys):
            raise ValidationError("soft_transfer", "ranking entries must be sorted ascending")
        if self.selected != self.entries[: percent_count(self.k_s, len(self.entries))]:
            raise ValidationError("soft_transfer", "selected must be the bottom k_s% prefix")


def reliability_score(dump: PredictionDump, decision: TransferDecision) -> float:
    """Biased-model probability of the target minus that of the source."""
    vector = dump.vector(decision.triplet_id)
    return float(vector[decision.target] - vector[decision.source])


def rank_decisions(
    dump: PredictionDump, decisions: Iterable[TransferDecision], k_s: float
) -> ReliabilityRanking:
    scored = sorted(
        ((d.triplet_id, reliability_score(dump, d)) for d in decisions),
        key=lambda item: (item[1], item[0]),
    )
    entries = tuple(scored)
    return ReliabilityRanking(
        entries=entries, k_s=k_s, selected=entries[: percent_count(k_s, len(entries))]
    )


def minmax_scale(scores: Sequence[float]) -> list[float]:
    """Linear min-max scaling to [0, 1]; a constant list maps to all zeros."""
    if not scores:
        raise ValidationError("soft_transfer", "cannot scale an empty score list")
    low = min(scores)
    high = max(scores)
    if high == low:
        return [0.0] * len(scores)
    span = high - low
    return [(score - low) / span for score in scores]


def soft_label(q_value: float, source: int, target: int) -> SoftLabel:
    """Two-class label: target ``1/(1+Q)``, source ``Q/(1+Q)``."""
    if not (0.0 <= q_value <= 1.0):
        raise ValidationError("soft_transfer", f"Q must be in [0, 1], got {q_value}")
    if source == target:
        raise ValidationError("soft_transfer", "source and target must differ")
    target_mass = 1.0 / (1.0 + q_value)
    return SoftLabel.from_mapping(
        {target: target_mass, source: 1.0 - target_mass}, preferred=target
    )


def plan_soft_labels(
    dump: PredictionDump,
    decisions: Sequence[TransferDecision],
    k_s: float,
    q_mode: QMode | str = QMode.ONE_MINUS_MINMAX,
) -> dict[int, SoftLabel]:
    """Label of every decision's triplet after Soft Transfer.

    Scaling spans only the selected bottom ``k_s``% of reliability scores.
    Unselected decisions keep the full one-hot transfer. The naive mode
    splits every decision evenly without ranking.
    """
    mode = parse_q_mode(q_mode)
    if mode is QMode.NAIVE:
        METRICS.soft_labels_total.labels(q_mode=mode.value).inc(len(decisions))
        return {d.triplet_id: soft_label(1.0, d.source, d.target) for d in decisions}

    labels = {d.triplet_id: SoftLabel.one_hot(d.target) for d in decisions}
    ranking = rank_decisions(dump, decisions, k_s)
    if not ranking.selected:
        return labels
    by_id = {d.triplet_id: d for d in decisions}
    scaled = minmax_scale([score for _, score in ranking.selected])
    for (triplet_id, _), q_prime in zip(ranking.selected, scaled, strict=True):
        q_value = 1.0 - q_prime if mode is QMode.ONE_MINUS_MINMAX else q_prime
        decision = by_id[triplet_id]
        labels[triplet_id] = soft_label(q_value, decision.source, decision.target)
    METRICS.soft_labels_total.labels(q_mode=mode.value).inc(len(ranking.selected))
    return labels


def apply_soft_transfer(
    dataset: Dataset,
    dump: PredictionDump,
    decisions: Sequence[TransferDecision],
    k_s: float,
    q_mode: QMode | str = QMode.ONE_MINUS_MINMAX,
) -> Dataset:
    """Dataset with internal-transfer decisions applied, the least reliable ones softened."""
    labels = plan_soft_labels(dump, decisions, k_s, q_mode)
    softened = sum(1 for label in labels.values() if not label.is_hard)
    LOGGER.info(
        "Soft transfer: %d of %d decisions softened (k_s=%.1f, q_mode=%s)",
        softened,
        len(labels),
        k_s,
        parse_q_mode(q_mode).value,
    )
    return dataset.relabel(labels)
