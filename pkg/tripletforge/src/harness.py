"""Desk-scale synthetic experiments for the transfer and augmentation pipeline.

A long-tailed relation dataset is generated from class-conditional
Gaussians with confusable predicate pairs and missing annotations. A small
relation head stands in for the scene-graph model: trained on the raw
labels it provides the biased predictions, and trained on each dataset
variant it produces the numbers of the comparison table.
"""

from __future__ import annotations

import json
import logging
import math
import re
from collections import defaultdict
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from enum import StrEnum
from pathlib import Path
from typing import Any

import numpy as np

from tripletforge.src.core import (
    BACKGROUND,
    BBox,
    Group,
    LabelSpace,
    SoftLabel,
    TrainingDivergedError,
    TripletRecord,
    ValidationError,
    build_label_space,
    substream,
)
from tripletforge.src.featgen import ConditionTable, GanConfig, GanState, fit_feature_generator
from tripletforge.src.fsta import (
    BatchImage,
    FeatureResolver,
    FstaConfig,
    ObjectSource,
    gt_proposals,
    plan_step,
    predicate_geometry,
)
from tripletforge.src.ietrans import (
    TransferConfig,
    TransferDecision,
    apply_transfers,
    consumed_negatives,
    run_transfer,
)
from tripletforge.src.ingest import (
    Dataset,
    FeatureStore,
    NegativePair,
    PredictionDump,
    instance_ids,
)
from tripletforge.src.metrics import EvalConfig, EvalReport, PredictedRelation, evaluate
from tripletforge.src.mlp import Activation, Mlp, backward, forward
from tripletforge.src.mp_sampler import SamplerTable, build_sampler
from tripletforge.src.soft_transfer import SoftTransferConfig, apply_soft_transfer

LOGGER = logging.getLogger(__name__)

_RESAMPLE = re.compile(r"^resample\((\d+)\)$")


@dataclass(frozen=True)
class SynthSpec:
    """Generator settings for a synthetic long-tailed relation dataset.

    Predicate ``p`` (1-based) has relative frequency ``p ** -tail_exponent``.
    Each confusion pair ``(p, q, rate)`` makes ``q`` share ``p``'s object
    classes, places its object ``confusion_shift`` subject widths to the
    right of ``p``'s, and relabels a ``rate`` share of ``q`` instances as
    ``p``. Predicates outside a pair never share a class combo.
    """

    n_object_classes: int = 12
    n_predicates: int = 9
    tail_exponent: float = 1.2
    confusion_pairs: tuple[tuple[int, int, float], ...] = (
        (1, 4, 0.6),
        (2, 6, 0.6),
        (3, 8, 0.6),
    )
    confusion_shift: float = 0.5
    combos_per_predicate: int = 3
    feature_dim: int = 16
    class_separation: float = 2.0
    noise_scale: float = 1.0
    n_train: int = 5000
    n_test_per_predicate: int = 100
    triplets_per_image: int = 4
    missing_rate: float = 0.1
    negatives_per_image: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(
            self,
            "confusion_pairs",
            tuple((int(p), int(q), float(r)) for p, q, r in self.confusion_pairs),
        )
        positive = (
            "n_object_classes",
            "combos_per_predicate",
            "feature_dim",
            "n_train",
            "n_test_per_predicate",
            "triplets_per_image",
        )
        for name in positive:
            if getattr(self, name) < 1:
                raise ValidationError("harness", f"{name} must be >= 1")
        if self.n_predicates < 3:
            raise ValidationError("harness", "need at least 3 predicates for head/body/tail")
        if min(self.tail_exponent, self.noise_scale, self.confusion_shift) < 0.0:
            raise ValidationError("harness", "exponent, noise and confusion shift must be >= 0")
        if self.class_separation <= 0.0:
            raise ValidationError("harness", "class_separation must be > 0")
        if not (0.0 <= self.missing_rate < 1.0):
            raise ValidationError("harness", "missing_rate must be in [0, 1)")
        if self.negatives_per_image < 0:
            raise ValidationError("harness", "negatives_per_image must be >= 0")
        informative: set[int] = set()
        for general, specific, rate in self.confusion_pairs:
            if not (1 <= general < specific <= self.n_predicates):
                raise ValidationError(
                    "harness", f"confusion pair ({general}, {specific}) must be rarer-after-general"
                )
            if not (0.0 <= rate <= 1.0):
                raise ValidationError("harness", f"confusion rate {rate} must be in [0, 1]")
            if specific in informative or general in informative:
                raise ValidationError("harness", "a predicate may appear in one confusion pair")
            informative.add(specific)
        families = self.n_predicates - len(self.confusion_pairs)
        if families * self.combos_per_predicate > self.n_object_classes**2:
            raise ValidationError("harness", "more combos per predicate than class pairs")

    @property
    def parents(self) -> dict[int, tuple[int, float]]:
        """Informative predicate -> (general predicate, confusion rate)."""
        return {q: (p, rate) for p, q, rate in self.confusion_pairs}

    def frequencies(self) -> np.ndarray:
        ranks = np.arange(1, self.n_predicates + 1, dtype=np.float64)
        weights = ranks ** (-self.tail_exponent)
        return weights / weights.sum()


@dataclass(frozen=True)
class SynthBundle:
    spec: SynthSpec
    train: Dataset
    test: Dataset
    features: FeatureStore
    # Latent predicate of every labeled train triplet and of every unlabeled true relation.
    latent: Mapping[int, int]
    missing_latent: Mapping[int, int]


@dataclass(frozen=True)
class _Geometry:
    offsets: np.ndarray
    log_sizes: np.ndarray


def _object_box(
    subject: BBox, predicate: int, geometry: _Geometry, rng: np.random.Generator
) -> BBox:
    width = subject.width * math.exp(geometry.log_sizes[predicate, 0] + rng.normal(0.0, 0.1))
    height = subject.height * math.exp(geometry.log_sizes[predicate, 1] + rng.normal(0.0, 0.1))
    cx = (subject.x1 + subject.x2) / 2 + subject.width * (
        geometry.offsets[predicate, 0] + rng.normal(0.0, 0.15)
    )
    cy = (subject.y1 + subject.y2) / 2 + subject.height * (
        geometry.offsets[predicate, 1] + rng.normal(0.0, 0.15)
    )
    return BBox(cx - width / 2, cy - height / 2, cx + width / 2, cy + height / 2)


def _subject_box(rng: np.random.Generator) -> BBox:
    x, y = rng.uniform(0.0, 400.0, size=2)
    w, h = rng.uniform(40.0, 120.0, size=2)
    return BBox(float(x), float(y), float(x + w), float(y + h))


def synth_generate(spec: SynthSpec) -> SynthBundle:
    """Synthetic train/test datasets, object features and the latent labels."""
    rng = substream(spec.seed, "harness.synth")
    n_pred = spec.n_predicates
    parents = spec.parents

    n_obj = spec.n_object_classes
    all_pairs = [(s, o) for s in range(n_obj) for o in range(n_obj)]
    combos: dict[int, list[tuple[int, int]]] = {}
    shuffled = rng.permutation(len(all_pairs))
    families = [p for p in range(1, n_pred + 1) if p not in parents]
    per_family = spec.combos_per_predicate
    for position, p in enumerate(families):
        block = shuffled[position * per_family : (position + 1) * per_family]
        combos[p] = [all_pairs[int(i)] for i in sorted(block)]
    offsets = rng.uniform(-1.5, 1.5, size=(n_pred + 1, 2))
    log_sizes = rng.uniform(-0.6, 0.6, size=(n_pred + 1, 2))
    for q, (p, _) in parents.items():
        combos[q] = list(combos[p])
        offsets[q] = offsets[p] + np.array([spec.confusion_shift, 0.0])
        log_sizes[q] = log_sizes[p]
    geometry = _Geometry(offsets=offsets, log_sizes=log_sizes)
    means = rng.normal(0.0, spec.class_separation, size=(spec.n_object_classes, spec.feature_dim))

    ids: list[int] = []
    classes: list[int] = []
    vectors: list[np.ndarray] = []

    def add_instance(instance_id: int, cls: int) -> None:
        ids.append(instance_id)
        classes.append(cls)
        vectors.append(means[cls] + rng.normal(0.0, spec.noise_scale, size=spec.feature_dim))

    n_test = spec.n_test_per_predicate * n_pred
    next_instance = 2 * (spec.n_train + n_test)
    frequencies = spec.frequencies()

    train_records: list[TripletRecord] = []
    negatives: list[NegativePair] = []
    latent: dict[int, int] = {}
    missing_latent: dict[int, int] = {}
    latent_predicates = rng.choice(np.arange(1, n_pred + 1), size=spec.n_train, p=frequencies)
    image_id = 0
    for start in range(0, spec.n_train, spec.triplets_per_image):
        for triplet_id in range(start, min(start + spec.triplets_per_image, spec.n_train)):
            predicate = int(latent_predicates[triplet_id])
            s_cls, o_cls = combos[predicate][int(rng.integers(len(combos[predicate])))]
            s_box = _subject_box(rng)
            o_box = _object_box(s_box, predicate, geometry, rng)
            if rng.random() < spec.missing_rate:
                negative_id = len(negatives)
                s_inst, o_inst = next_instance, next_instance + 1
                next_instance += 2
                add_instance(s_inst, s_cls)
                add_instance(o_inst, o_cls)
                negatives.append(
                    NegativePair(negative_id, image_id, s_cls, s_box, o_cls, o_box, s_inst, o_inst)
                )
                missing_latent[negative_id] = predicate
                continue
            observed = predicate
            if predicate in parents and rng.random() < parents[predicate][1]:
                observed = parents[predicate][0]
            add_instance(2 * triplet_id, s_cls)
            add_instance(2 * triplet_id + 1, o_cls)
            latent[triplet_id] = predicate
            train_records.append(
                TripletRecord(
                    triplet_id, image_id, s_cls, s_box, o_cls, o_box, SoftLabel.one_hot(observed)
                )
            )
        for _ in range(spec.negatives_per_image):
            s_cls, o_cls = (int(c) for c in rng.integers(spec.n_object_classes, size=2))
            s_box = _subject_box(rng)
            angle = rng.uniform(0.0, 2.0 * math.pi)
            distance = rng.uniform(3.0, 5.0)
            dx = distance * s_box.width * math.cos(angle)
            dy = distance * s_box.height * math.sin(angle)
            o_box = BBox(s_box.x1 + dx, s_box.y1 + dy, s_box.x2 + dx, s_box.y2 + dy)
            s_inst, o_inst = next_instance, next_instance + 1
            next_instance += 2
            add_instance(s_inst, s_cls)
            add_instance(o_inst, o_cls)
            negatives.append(
                NegativePair(len(negatives), image_id, s_cls, s_box, o_cls, o_box, s_inst, o_inst)
            )
        image_id += 1

    object_names = tuple(f"object_{i}" for i in range(spec.n_object_classes))
    predicate_names = ("__background__", *(f"predicate_{p}" for p in range(1, n_pred + 1)))
    space = build_label_space(object_names, predicate_names, train_records)
    train = Dataset.from_records(space, train_records, negatives)

    test_predicates = np.repeat(np.arange(1, n_pred + 1), spec.n_test_per_predicate)
    rng.shuffle(test_predicates)
    test_records: list[TripletRecord] = []
    for offset, raw_predicate in enumerate(test_predicates):
        predicate = int(raw_predicate)
        triplet_id = spec.n_train + offset
        if offset % spec.triplets_per_image == 0 and offset:
            image_id += 1
        s_cls, o_cls = combos[predicate][int(rng.integers(len(combos[predicate])))]
        s_box = _subject_box(rng)
        o_box = _object_box(s_box, predicate, geometry, rng)
        add_instance(2 * triplet_id, s_cls)
        add_instance(2 * triplet_id + 1, o_cls)
        test_records.append(
            TripletRecord(
                triplet_id, image_id, s_cls, s_box, o_cls, o_box, SoftLabel.one_hot(predicate)
            )
        )
    test = Dataset.from_records(space, test_records)
    store = FeatureStore.from_arrays(ids, classes, np.stack(vectors))
    LOGGER.info(
        "Synthesized %d train triplets, %d negatives (%d missing relations), %d test triplets",
        len(train_records),
        len(negatives),
        len(missing_latent),
        len(test_records),
    )
    return SynthBundle(
        spec=spec,
        train=train,
        test=test,
        features=store,
        latent=latent,
        missing_latent=missing_latent,
    )


# --- relation head -------------------------------------------------------------


def pair_features(
    store: FeatureStore, subject: int, obj: int, subject_box: BBox, object_box: BBox
) -> np.ndarray:
    """``[f_s, f_p, f_o]`` with the pair geometry as the predicate feature."""
    return np.concatenate(
        [store.vector(subject), predicate_geometry(subject_box, object_box), store.vector(obj)]
    )


@dataclass
class RelationHead:
    """Pair encoder (affine + LeakyReLU) followed by an affine softmax over predicates."""

    net: Mlp

    @classmethod
    def initialize(
        cls, input_dim: int, hidden: int, n_predicates: int, rng: np.random.Generator
    ) -> RelationHead:
        return cls(
            Mlp.initialize(
                [input_dim, hidden, n_predicates], [Activation.LEAKY_RELU, Activation.SOFTMAX], rng
            )
        )

    def predict(self, x: np.ndarray) -> np.ndarray:
        probs, _ = forward(self.net, x)
        return probs

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.predict(x)


def soft_cross_entropy(
    probs: np.ndarray, targets: np.ndarray, class_weights: np.ndarray | None = None
) -> tuple[float, np.ndarray]:
    """Mean of ``sum_c w_c * label(c) * -ln p_c`` and its gradient w.r.t. the logits."""
    weighted = targets if class_weights is None else targets * class_weights[None, :]
    n = probs.shape[0]
    log_p = np.log(np.maximum(probs, np.finfo(np.float64).tiny))
    loss = float(-np.sum(weighted * log_p) / n)
    grad = (probs * weighted.sum(axis=1, keepdims=True) - weighted) / n
    return loss, grad


def class_weights(dataset: Dataset) -> np.ndarray:
    """Inverse-frequency weights (mean count / count); background keeps weight 1."""
    counts = dataset.predicate_counts()
    present = [c for c in counts.values() if c > 0]
    mean = float(np.mean(present)) if present else 1.0
    weights = np.ones(dataset.label_space.n_predicates, dtype=np.float64)
    for predicate, count in counts.items():
        weights[predicate] = mean / max(count, 1)
    return weights


@dataclass(frozen=True)
class HarnessConfig:
    epochs: int = 10
    lr: float = 0.5
    hidden: int = 32
    batch_images: int = 8
    reweight: bool = False
    k: tuple[int, ...] = (5, 10)
    # Duplicate only images with more than one tail triplet instead of at least one.
    resample_strict: bool = False
    # Synthetic confusion pairs reach parent affinities near 0.05.
    transfer: TransferConfig = field(default_factory=lambda: TransferConfig(aff_threshold=0.025))
    soft: SoftTransferConfig = field(default_factory=lambda: SoftTransferConfig(k_s=100.0))
    fsta: FstaConfig = field(default_factory=lambda: FstaConfig(alpha=1.0))
    gan: GanConfig = field(
        default_factory=lambda: GanConfig(
            d_z=16,
            feature_dim=16,
            cond_dim=8,
            hidden=64,
            lr=1e-2,
            batch=32,
            max_iter=300,
            eval_every=50,
            eval_samples=20,
            pretrain_epochs=10,
            pretrain_batch=32,
        )
    )
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.lr <= 0.0 or self.hidden < 1 or self.batch_images < 1:
            raise ValidationError("harness", "epochs >= 0, lr > 0, hidden and batch_images >= 1")
        object.__setattr__(self, "k", tuple(int(k) for k in self.k))
        EvalConfig(k=self.k)


@dataclass(frozen=True)
class PlanSource:
    """Everything the training loop needs to plan and resolve artificial triplets."""

    label_space: LabelSpace
    sampler: SamplerTable | None
    resolver: FeatureResolver
    config: FstaConfig


@dataclass(frozen=True)
class _Rows:
    x: np.ndarray
    y: np.ndarray
    by_image: dict[int, np.ndarray]


def _training_rows(dataset: Dataset, store: FeatureStore) -> _Rows:
    n_pred = dataset.label_space.n_predicates
    xs: list[np.ndarray] = []
    ys: list[np.ndarray] = []
    by_image: dict[int, list[int]] = defaultdict(list)
    for record in dataset.records():
        subject, obj = instance_ids(record)
        by_image[record.image_id].append(len(xs))
        xs.append(pair_features(store, subject, obj, record.subject_box, record.object_box))
        ys.append(record.label.dense(n_pred))
    for pair in dataset.negatives():
        subject, obj = instance_ids(pair)
        by_image[pair.image_id].append(len(xs))
        xs.append(pair_features(store, subject, obj, pair.subject_box, pair.object_box))
        ys.append(SoftLabel.one_hot(BACKGROUND).dense(n_pred))
    if not xs:
        raise ValidationError("harness", "training dataset is empty")
    return _Rows(
        x=np.stack(xs),
        y=np.stack(ys),
        by_image={i: np.array(rows, dtype=np.int64) for i, rows in by_image.items()},
    )


def fit_relation_head(
    dataset: Dataset,
    store: FeatureStore,
    cfg: HarnessConfig,
    plan_source: PlanSource | None = None,
) -> RelationHead:
    """Minibatch SGD over image batches.

    Each step minimizes the (optionally reweighted) soft-label cross-entropy
    of the batch, plus ``alpha`` times the unweighted cross-entropy of the
    artificial triplets planned for the same images.
    """
    rows = _training_rows(dataset, store)
    n_pred = dataset.label_space.n_predicates
    head = RelationHead.initialize(
        rows.x.shape[1], cfg.hidden, n_pred, substream(cfg.seed, "harness.head.init")
    )
    weights = class_weights(dataset) if cfg.reweight else None
    order_rng = substream(cfg.seed, "harness.train")
    plan_rng = substream(cfg.seed, "harness.fsta")
    augment = plan_source is not None and plan_source.config.alpha > 0.0
    images = sorted(rows.by_image)
    batch_images = {
        image_id: BatchImage(image_id, gt_proposals(records), records)
        for image_id, records in dataset.images.items()
    }
    step = 0
    for epoch in range(cfg.epochs):
        shuffled = [images[int(i)] for i in order_rng.permutation(len(images))]
        for start in range(0, len(shuffled), cfg.batch_images):
            chunk = shuffled[start : start + cfg.batch_images]
            index = np.concatenate([rows.by_image[i] for i in chunk])
            probs, cache = forward(head.net, rows.x[index])
            loss, grad = soft_cross_entropy(probs, rows.y[index], weights)
            grads, _ = backward(head.net, cache, grad, from_preactivation=True)
            if augment and plan_source is not None:
                plan = plan_step(
                    step,
                    [batch_images[i] for i in chunk if i in batch_images],
                    plan_source.label_space,
                    plan_source.sampler,
                    plan_source.config,
                    plan_rng,
                )
                artificial = plan_source.resolver.resolve(plan)
                if len(artificial):
                    at_probs, at_cache = forward(head.net, artificial.stacked())
                    targets = np.eye(n_pred)[artificial.predicates]
                    at_loss, at_grad = soft_cross_entropy(at_probs, targets)
                    alpha = plan_source.config.alpha
                    at_grads, _ = backward(
                        head.net, at_cache, alpha * at_grad, from_preactivation=True
                    )
                    grads = [
                        replace(g, weight=g.weight + a.weight, bias=g.bias + a.bias)
                        for g, a in zip(grads, at_grads, strict=True)
                    ]
                    loss += alpha * at_loss
            if not math.isfinite(loss):
                raise TrainingDivergedError("relation head loss", step)
            head.net.sgd_step(grads, cfg.lr)
            step += 1
        LOGGER.debug("Relation head epoch %d done (%d steps)", epoch, step)
    return head


def produce_biased_dump(
    dataset: Dataset, store: FeatureStore, cfg: HarnessConfig
) -> tuple[PredictionDump, RelationHead]:
    """Train on the raw labels and record post-softmax outputs on the training set."""
    head = fit_relation_head(dataset, store, replace(cfg, reweight=False))
    records = list(dataset.records())
    negatives = list(dataset.negatives())
    per_triplet: dict[int, np.ndarray] = {}
    per_negative: dict[int, np.ndarray] = {}
    if records:
        x = np.stack(
            [
                pair_features(store, *instance_ids(r), r.subject_box, r.object_box)
                for r in records
            ]
        )
        per_triplet = dict(zip((r.triplet_id for r in records), head.predict(x), strict=True))
    if negatives:
        x = np.stack(
            [
                pair_features(store, *instance_ids(n), n.subject_box, n.object_box)
                for n in negatives
            ]
        )
        per_negative = dict(zip((n.negative_id for n in negatives), head.predict(x), strict=True))
    dump = PredictionDump.from_vectors(dataset, per_triplet, per_negative, source="biased-model")
    return dump, head


def predict_relations(
    head: RelationHead, dataset: Dataset, store: FeatureStore
) -> list[PredictedRelation]:
    """Scored relations over every ordered pair of ground-truth objects per image."""
    relations: list[PredictedRelation] = []
    for image_id, records in sorted(dataset.images.items()):
        proposals = gt_proposals(records)
        pairs = [(s, o) for s in proposals for o in proposals if s.instance_id != o.instance_id]
        if not pairs:
            continue
        x = np.stack(
            [pair_features(store, s.instance_id, o.instance_id, s.box, o.box) for s, o in pairs]
        )
        probs = head.predict(x)
        for (s, o), row in zip(pairs, probs, strict=True):
            # Only the top foreground predicate survives the graph constraint.
            predicate = int(np.argmax(row[1:])) + 1
            relations.append(
                PredictedRelation(
                    image_id=image_id,
                    subject_class=s.class_index,
                    subject_box=s.box,
                    object_class=o.class_index,
                    object_box=o.box,
                    predicate=predicate,
                    score=float(row[predicate]),
                )
            )
    return relations


def train_unbiased(
    dataset: Dataset,
    store: FeatureStore,
    test: Dataset,
    cfg: HarnessConfig,
    plan_source: PlanSource | None = None,
) -> tuple[RelationHead, EvalReport]:
    """Train a fresh head on a dataset variant and evaluate it on ``test``."""
    head = fit_relation_head(dataset, store, cfg, plan_source)
    report = evaluate(
        predict_relations(head, test, store),
        test,
        EvalConfig(k=cfg.k),
        label_space=dataset.label_space,
    )
    return head, report


def resample_dataset(dataset: Dataset, n: int, *, strict: bool = False) -> Dataset:
    """Append ``n`` copies of every image holding tail triplets.

    An image qualifies with at least one tail triplet, or more than one when
    ``strict``. Copies get fresh image and triplet ids and keep the original
    feature instances.
    """
    if n < 0:
        raise ValidationError("harness", f"resample count must be >= 0, got {n}")
    space = dataset.label_space
    threshold = 2 if strict else 1
    next_triplet = dataset.max_triplet_id + 1
    next_image = max(dataset.image_ids, default=-1) + 1
    copies: list[TripletRecord] = []
    for image_id in sorted(dataset.images):
        records = dataset.images[image_id]
        tails = sum(1 for r in records if space.groups.get(r.predicate) is Group.TAIL)
        if tails < threshold:
            continue
        for _ in range(n):
            for record in records:
                subject, obj = instance_ids(record)
                copies.append(
                    replace(
                        record,
                        triplet_id=next_triplet,
                        image_id=next_image,
                        subject_instance=subject,
                        object_instance=obj,
                    )
                )
                next_triplet += 1
            next_image += 1
    LOGGER.info("Resampling added %d triplet copies", len(copies))
    return dataset.extend(copies)


# --- comparison matrix ---------------------------------------------------------


class VariantKind(StrEnum):
    RAW = "raw"
    IETRANS = "ietrans"
    SOFT = "soft"
    FSTA = "fsta"
    FULL = "full"
    RESAMPLE = "resample"


@dataclass(frozen=True)
class Variant:
    kind: VariantKind
    resample_n: int = 0

    @classmethod
    def parse(cls, text: str) -> Variant:
        text = text.strip()
        match = _RESAMPLE.match(text)
        if match:
            return cls(VariantKind.RESAMPLE, int(match.group(1)))
        try:
            kind = VariantKind(text)
        except ValueError as exc:
            raise ValidationError("harness", f"unknown variant {text!r}") from exc
        if kind is VariantKind.RESAMPLE:
            raise ValidationError("harness", "resample needs a count, e.g. resample(2)")
        return cls(kind)

    @property
    def name(self) -> str:
        if self.kind is VariantKind.RESAMPLE:
            return f"resample({self.resample_n})"
        return self.kind.value

    @property
    def uses_fsta(self) -> bool:
        return self.kind in (VariantKind.FSTA, VariantKind.FULL)


@dataclass
class SeedContext:
    """Per-seed artifacts shared by every variant of the matrix."""

    bundle: SynthBundle
    dump: PredictionDump
    decisions: list[TransferDecision]
    external: list[TripletRecord]
    sampler: SamplerTable
    generator: GanState | None = None


def prepare_seed(spec: SynthSpec, cfg: HarnessConfig, *, with_generator: bool) -> SeedContext:
    bundle = synth_generate(spec)
    dump, _ = produce_biased_dump(bundle.train, bundle.features, cfg)
    decisions, external = run_transfer(bundle.train, dump, cfg.transfer)
    sampler = build_sampler(bundle.train.label_space, dump)
    generator = None
    if with_generator:
        train_instances = sorted(
            {i for r in bundle.train.records() for i in instance_ids(r)}
        )
        objects = FeatureStore(
            dim=bundle.features.dim,
            rows={i: bundle.features.rows[i] for i in train_instances},
        )
        gan_cfg = replace(cfg.gan, feature_dim=objects.dim, seed=cfg.seed)
        conditions = ConditionTable.synthesize(
            bundle.train.label_space.n_objects, gan_cfg.cond_dim, cfg.seed
        )
        generator = fit_feature_generator(objects, conditions, gan_cfg)
    return SeedContext(bundle, dump, decisions, external, sampler, generator)


def variant_dataset(ctx: SeedContext, variant: Variant, cfg: HarnessConfig) -> Dataset:
    raw = ctx.bundle.train
    if variant.kind is VariantKind.RAW:
        return raw
    if variant.kind in (VariantKind.SOFT, VariantKind.FULL):
        k_s = cfg.soft.k_s_reweight if cfg.reweight else cfg.soft.k_s
        softened = apply_soft_transfer(raw, ctx.dump, ctx.decisions, k_s, cfg.soft.q_mode)
        return softened.extend(ctx.external, consumed_negatives(raw, ctx.external))
    transferred = apply_transfers(raw, ctx.decisions, ctx.external)
    if variant.kind is VariantKind.RESAMPLE:
        return resample_dataset(transferred, variant.resample_n, strict=cfg.resample_strict)
    return transferred


def run_variant(ctx: SeedContext, variant: Variant, cfg: HarnessConfig) -> EvalReport:
    dataset = variant_dataset(ctx, variant, cfg)
    plan_source = None
    if variant.uses_fsta:
        plan_source = PlanSource(
            label_space=dataset.label_space,
            sampler=ctx.sampler,
            resolver=FeatureResolver(
                ctx.bundle.features, ctx.generator, substream(cfg.seed, "harness.generate")
            ),
            config=cfg.fsta,
        )
    _, report = train_unbiased(dataset, ctx.bundle.features, ctx.bundle.test, cfg, plan_source)
    return report


def report_cells(report: EvalReport) -> dict[str, float | None]:
    cells: dict[str, float | None] = {}
    for k in report.k:
        mr = report.mean_recall[k]
        cells[f"R@{k}"] = report.recall[k]
        cells[f"mR@{k}"] = mr.overall
        cells[f"mR@{k}/head"] = mr.head
        cells[f"mR@{k}/body"] = mr.body
        cells[f"mR@{k}/tail"] = mr.tail
        cells[f"F1@{k}"] = report.f1[k]
        cells[f"A@{k}"] = report.avg[k]
    return cells


def summarize(values: Sequence[float | None]) -> tuple[float | None, float | None]:
    """Mean and sample standard deviation (0 for one value); None entries are skipped."""
    present = [v for v in values if v is not None]
    if not present:
        return None, None
    sd = float(np.std(present, ddof=1)) if len(present) > 1 else 0.0
    return float(np.mean(present)), sd


@dataclass(frozen=True)
class ComparisonRow:
    variant: str
    n_seeds: int
    cells: dict[str, tuple[float | None, float | None]]


@dataclass(frozen=True)
class ComparisonTable:
    columns: tuple[str, ...]
    rows: tuple[ComparisonRow, ...]

    def to_json(self) -> dict[str, Any]:
        return {
            "columns": list(self.columns),
            "rows": [
                {
                    "variant": row.variant,
                    "n_seeds": row.n_seeds,
                    "cells": {
                        column: {"mean": row.cells[column][0], "sd": row.cells[column][1]}
                        for column in self.columns
                    },
                }
                for row in self.rows
            ],
        }

    def to_markdown(self) -> str:
        def fmt(cell: tuple[float | None, float | None]) -> str:
            mean, sd = cell
            return "n/a" if mean is None else f"{mean:.4f} ± {sd:.4f}"

        lines = [
            "| variant | " + " | ".join(self.columns) + " |",
            "|---|" + "---|" * len(self.columns),
        ]
        for row in self.rows:
            lines.append(
                f"| {row.variant} | " + " | ".join(fmt(row.cells[c]) for c in self.columns) + " |"
            )
        return "\n".join(lines) + "\n"


def run_matrix(
    spec: SynthSpec,
    variants: Sequence[Variant],
    seeds: Iterable[int],
    cfg: HarnessConfig,
) -> ComparisonTable:
    """Every variant trained and evaluated under every seed; mean ± sd per metric."""
    seed_list = list(seeds)
    if not variants or not seed_list:
        raise ValidationError("harness", "need at least one variant and one seed")
    with_generator = cfg.fsta.object_source is ObjectSource.MP_SAMPLER and any(
        v.uses_fsta for v in variants
    )
    runs: list[list[dict[str, float | None]]] = [[] for _ in variants]
    for seed in seed_list:
        seed_cfg = replace(cfg, seed=seed)
        ctx = prepare_seed(replace(spec, seed=seed), seed_cfg, with_generator=with_generator)
        for position, variant in enumerate(variants):
            runs[position].append(report_cells(run_variant(ctx, variant, seed_cfg)))
            LOGGER.info("Finished variant %s for seed %d", variant.name, seed)
    columns = tuple(runs[0][0])
    rows = tuple(
        ComparisonRow(
            variant=variant.name,
            n_seeds=len(seed_list),
            cells={c: summarize([run[c] for run in results]) for c in columns},
        )
        for variant, results in zip(variants, runs, strict=True)
    )
    return ComparisonTable(columns=columns, rows=rows)


def write_table(table: ComparisonTable, path: str | Path) -> None:
    """Markdown for ``.md`` paths, JSON otherwise."""
    target = Path(path)
    if target.suffix == ".md":
        target.write_text(table.to_markdown(), encoding="utf-8")
    else:
        payload = json.dumps(table.to_json(), indent=2, sort_keys=True)
        target.write_text(payload + "\n", encoding="utf-8")
