from __future__ import annotations

import json
import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from tripletforge.src.core import LabelSpace, ParseError, ValidationError
from tripletforge.src.ingest import PredictionDump

LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class SamplerEntry:
    """Candidate object classes for one (subject, predicate) pair and their weights."""

    candidates: tuple[int, ...]
    difficulty: tuple[float, ...]
    probabilities: tuple[float, ...]
    uniform_fallback: bool

    def __post_init__(self) -> None:
        if not self.candidates:
            raise ValidationError("mp_sampler", "sampler entry needs at least one candidate")
        if not (len(self.candidates) == len(self.difficulty) == len(self.probabilities)):
            raise ValidationError("mp_sampler", "entry lists must have equal lengths")
        if any(d < 0.0 for d in self.difficulty):
            raise ValidationError("mp_sampler", "difficulty scores must be >= 0")
        if abs(sum(self.probabilities) - 1.0) > 1e-9:
            raise ValidationError("mp_sampler", "probabilities must sum to 1")


@dataclass(frozen=True)
class SamplerTable:
    entries: Mapping[tuple[int, int], SamplerEntry]

    def __contains__(self, key: object) -> bool:
        return key in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def entry(self, subject_class: int, predicate: int) -> SamplerEntry:
        try:
            return self.entries[(subject_class, predicate)]
        except KeyError as exc:
            raise ValidationError(
                "mp_sampler", f"no sampler entry for subject {subject_class}, predicate {predicate}"
            ) from exc


def candidates(label_space: LabelSpace, subject_class: int, predicate: int) -> list[int]:
    """Object classes completing (subject, predicate) to a valid triple, ascending."""
    found = sorted(
        o for s, p, o in label_space.valid_triples if s == subject_class and p == predicate
    )
    if not found:
        raise ValidationError(
            "mp_sampler", f"no candidates for subject {subject_class}, predicate {predicate}"
        )
    return found


def difficulty(
    dump: PredictionDump, subject_class: int, predicate: int, object_class: int
) -> float:
    """Gap between the combo-mean top-1 score and the ground-truth predicate's score."""
    stats = dump.per_combo.get((subject_class, predicate, object_class))
    if stats is None:
        raise ValidationError(
            "mp_sampler", f"combo {(subject_class, predicate, object_class)} absent from dump"
        )
    return float(stats.mean.max() - stats.mean[predicate])


def probabilities(difficulties: Sequence[float]) -> tuple[list[float], bool]:
    """Normalize difficulties; returns ``(distribution, uniform_fallback)``."""
    if not difficulties:
        raise ValidationError("mp_sampler", "cannot normalize an empty difficulty list")
    total = float(sum(difficulties))
    if total <= 0.0:
        return [1.0 / len(difficulties)] * len(difficulties), True
    return [d / total for d in difficulties], False


def build_sampler(label_space: LabelSpace, dump: PredictionDump) -> SamplerTable:
    """Sampler over every (subject, predicate) pair of the valid triples.

    Combos without biased-model support are left out of the candidates; a
    pair with no supported candidate gets no entry.
    """
    pairs = sorted({(s, p) for s, p, _ in label_space.valid_triples})
    entries: dict[tuple[int, int], SamplerEntry] = {}
    dropped = 0
    for subject_class, predicate in pairs:
        supported: list[int] = []
        scores: list[float] = []
        for object_class in candidates(label_space, subject_class, predicate):
            if (subject_class, predicate, object_class) not in dump.per_combo:
                dropped += 1
                continue
            supported.append(object_class)
            scores.append(difficulty(dump, subject_class, predicate, object_class))
        if not supported:
            continue
        distribution, fallback = probabilities(scores)
        entries[(subject_class, predicate)] = SamplerEntry(
            candidates=tuple(supported),
            difficulty=tuple(scores),
            probabilities=tuple(distribution),
            uniform_fallback=fallback,
        )
    if dropped:
        LOGGER.warning("Dropped %d valid combos without biased-model predictions", dropped)
    LOGGER.info("Built MP-sampler with %d (subject, predicate) entries", len(entries))
    return SamplerTable(entries=entries)


def draw(
    table: SamplerTable, subject_class: int, predicate: int, rng: np.random.Generator
) -> int:
    """Draw one object class; consumes exactly one uniform from ``rng``."""
    entry = table.entry(subject_class, predicate)
    cumulative = np.cumsum(entry.probabilities)
    index = int(np.searchsorted(cumulative, rng.random(), side="right"))
    return entry.candidates[min(index, len(entry.candidates) - 1)]


def sampler_to_json(table: SamplerTable) -> dict[str, Any]:
    return {
        "entries": [
            {
                "subject": s,
                "predicate": p,
                "candidates": list(entry.candidates),
                "d": list(entry.difficulty),
                "p": list(entry.probabilities),
                "uniform_fallback": entry.uniform_fallback,
            }
            for (s, p), entry in sorted(table.entries.items())
        ]
    }


def write_sampler(table: SamplerTable, path: str | Path) -> None:
    Path(path).write_text(json.dumps(sampler_to_json(table), indent=2) + "\n", encoding="utf-8")


def load_sampler(path: str | Path) -> SamplerTable:
    source = str(path)
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        entries = {
            (int(item["subject"]), int(item["predicate"])): SamplerEntry(
                candidates=tuple(int(c) for c in item["candidates"]),
                difficulty=tuple(float(d) for d in item["d"]),
                probabilities=tuple(float(p) for p in item["p"]),
                uniform_fallback=bool(item["uniform_fallback"]),
            )
            for item in payload["entries"]
        }
    except ValidationError as exc:
        raise ParseError("mp_sampler", source, exc.message) from exc
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ParseError("mp_sampler", source, f"malformed sampler: {exc}") from exc
    return SamplerTable(entries=entries)
