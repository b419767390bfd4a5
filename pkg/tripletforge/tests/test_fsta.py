from __future__ import annotations

import itertools
import math
from pathlib import Path

import numpy as np
import pytest

from tripletforge.src.core import BBox, Group, ValidationError
from tripletforge.src.fsta import (
    ArtificialBatch,
    ArtificialKind,
    ArtificialTriplet,
    AugmentationPlan,
    BatchImage,
    CandidateTriplet,
    FeatureResolver,
    FstaConfig,
    ObjectSource,
    Proposal,
    enum_s_prime_po,
    enum_spo_prime,
    enum_spo_prime_swap,
    gt_proposals,
    l_at,
    load_plan_entries,
    plan_step,
    predicate_geometry,
    sample_pairs,
    undersample,
    write_plans,
)
from tripletforge.src.ingest import Dataset, FeatureStore
from tripletforge.src.mp_sampler import SamplerEntry, SamplerTable
from tripletforge.tests import builders

MAN, HORSE, BIKE, HAT = 0, 1, 2, 3
ON, RIDING, WEARING = 1, 2, 3
GROUPS = {ON: Group.HEAD, RIDING: Group.BODY, WEARING: Group.TAIL}


def _street() -> Dataset:
    """Image 0 holds one triplet per group; image 1 only widens the valid triples."""
    records = [
        builders.record(0, MAN, ON, HORSE),
        builders.record(1, MAN, RIDING, BIKE),
        builders.record(2, MAN, WEARING, HAT),
        builders.record(3, MAN, ON, BIKE, image=1),
    ]
    return builders.dataset(records, n_objects=4, n_predicates=4, groups=GROUPS)


def _image(data: Dataset, image_id: int = 0) -> BatchImage:
    records = data.images[image_id]
    return BatchImage(image_id, gt_proposals(records), records)


def _sampler() -> SamplerTable:
    def entry(*objects: int) -> SamplerEntry:
        share = 1.0 / len(objects)
        return SamplerEntry(objects, (share,) * len(objects), (share,) * len(objects), False)

    return SamplerTable(
        entries={
            (MAN, ON): entry(HORSE, BIKE),
            (MAN, RIDING): entry(BIKE),
            (MAN, WEARING): entry(HAT),
        }
    )


def _plan(
    data: Dataset, cfg: FstaConfig, sampler: SamplerTable | None, *, seed: int = 0, step: int = 0
) -> AugmentationPlan:
    rng = np.random.default_rng(seed)
    return plan_step(step, [_image(data)], data.label_space, sampler, cfg, rng)


def _spo(base: int, predicate: int) -> ArtificialTriplet:
    return ArtificialTriplet(
        kind=ArtificialKind.SPO_PRIME,
        base_triplet_id=base,
        predicate=predicate,
        subject_class=MAN,
        subject_instance=0,
        object_class=HORSE,
        object_instance=1,
        subject_box=builders.box(0),
        object_box=builders.box(1),
    )


def test_config_validation() -> None:
    swap = FstaConfig(object_source="swap")  # type: ignore[arg-type]
    assert swap.object_source is ObjectSource.SWAP
    with pytest.raises(ValidationError, match="n_t"):
        FstaConfig(n_t=0)
    with pytest.raises(ValidationError, match="unknown object_source"):
        FstaConfig(object_source="random")  # type: ignore[arg-type]


def test_gt_proposals_one_per_instance() -> None:
    data = _street()

    proposals = gt_proposals(data.images[0])

    assert [p.instance_id for p in proposals] == [0, 1, 2, 3, 4, 5]
    assert [p.class_index for p in proposals] == [MAN, HORSE, MAN, BIKE, MAN, HAT]


def test_sample_pairs_keeps_only_matching_pairs() -> None:
    data = _street()

    pool = sample_pairs(_image(data), FstaConfig(n_t=10), np.random.default_rng(0))

    assert [(c.subject.instance_id, c.obj.instance_id) for c in pool] == [(0, 1), (2, 3), (4, 5)]
    assert [(c.triplet_id, c.predicate) for c in pool] == [(0, ON), (1, RIDING), (2, WEARING)]


def test_sample_pairs_draws_without_replacement_like_oracle() -> None:
    data = _street()

    chosen = sample_pairs(_image(data), FstaConfig(n_t=2), np.random.default_rng(5))

    oracle = sorted(np.random.default_rng(5).choice(3, size=2, replace=False).tolist())
    assert [c.triplet_id for c in chosen] == oracle


def test_sample_pairs_respects_iou_threshold() -> None:
    record = builders.record(0, MAN, ON, HORSE, subject_box=BBox(0.0, 0.0, 2.0, 2.0))
    shifted = builders.record(
        1, MAN, ON, HORSE, subject_box=BBox(1.0, 0.0, 3.0, 2.0), object_box=builders.box(1)
    )
    image = BatchImage(0, gt_proposals([shifted]), (record,))

    # subject IoU is 1/3
    assert sample_pairs(image, FstaConfig(s_iou=0.7), np.random.default_rng(0)) == []
    assert len(sample_pairs(image, FstaConfig(s_iou=0.3), np.random.default_rng(0))) == 1


def test_enum_spo_prime_draws_from_sampler_candidates() -> None:
    data = _street()
    pool = sample_pairs(_image(data), FstaConfig(n_t=10), np.random.default_rng(0))
    partial = SamplerTable(entries={(MAN, ON): _sampler().entry(MAN, ON)})

    entries = enum_spo_prime(pool, partial, np.random.default_rng(1))

    assert len(entries) == 1
    assert entries[0].generated_object
    assert entries[0].object_class in {HORSE, BIKE}
    assert entries[0].subject_instance == 0


def test_enum_s_prime_po_tail_only_swaps_subjects() -> None:
    data = _street()
    pool = sample_pairs(_image(data), FstaConfig(n_t=10), np.random.default_rng(0))

    tail_only = enum_s_prime_po(pool, data.label_space, FstaConfig())
    every = enum_s_prime_po(pool, data.label_space, FstaConfig(tail_only_s_po=False))

    assert [(e.base_triplet_id, e.donor_triplet_id) for e in tail_only] == [(2, 0), (2, 1)]
    assert [e.subject_instance for e in tail_only] == [0, 2]
    assert all(e.object_instance == 5 for e in tail_only)
    assert len(every) == 6


def test_undersample_keeps_head_fraction() -> None:
    space = _street().label_space
    entries = [_spo(i, ON) for i in range(1000)] + [_spo(i, WEARING) for i in range(1000, 1100)]

    kept = undersample(entries, space, 0.2, np.random.default_rng(3))

    head = sum(1 for e in kept if e.predicate == ON)
    assert head / 1000 == pytest.approx(0.2, abs=0.05)
    assert sum(1 for e in kept if e.predicate == WEARING) == 100
    assert undersample(entries, space, 0.0, np.random.default_rng(3)) == entries[1000:]
    assert undersample(entries, space, 1.0, np.random.default_rng(3)) == entries


def test_undersampling_shifts_group_proportions() -> None:
    space = _street().label_space
    stream = (
        [_spo(i, ON) for i in range(70)]
        + [_spo(i, RIDING) for i in range(70, 84)]
        + [_spo(i, WEARING) for i in range(84, 99)]
    )
    rng = np.random.default_rng(11)
    totals = dict.fromkeys((ON, RIDING, WEARING), 0)

    for _ in range(1000):
        for entry in undersample(stream, space, 0.2, rng):
            totals[entry.predicate] += 1

    kept = sum(totals.values())
    shares = [totals[p] / kept for p in (ON, RIDING, WEARING)]
    np.testing.assert_allclose(shares, [0.326, 0.326, 0.349], atol=0.02)


def test_plan_step_composes_both_directions() -> None:
    data = _street()

    plan = _plan(data, FstaConfig(n_t=10, undersample=False), _sampler())

    kinds = [t.kind for t in plan.triplets]
    assert kinds == [ArtificialKind.SPO_PRIME] * 3 + [ArtificialKind.S_PRIME_PO] * 2
    assert plan.group_counts == {Group.HEAD: 1, Group.BODY: 1, Group.TAIL: 3}
    assert all(data.label_space.is_valid(*t.combo) for t in plan.triplets)  # type: ignore[arg-type]
    assert plan.triplets[1].object_class == BIKE
    assert plan.triplets[2].object_class == HAT


def test_plan_step_is_deterministic_under_seed() -> None:
    data = _street()
    cfg = FstaConfig(n_t=2, u_h=0.5)

    first = _plan(data, cfg, _sampler(), seed=9, step=4)
    second = _plan(data, cfg, _sampler(), seed=9, step=4)

    assert first == second


def test_plan_step_without_reverse_direction_or_with_swaps() -> None:
    data = _street()
    swap = FstaConfig(
        n_t=10, object_source=ObjectSource.SWAP, bidirectional=False, undersample=False
    )

    one_way = _plan(data, FstaConfig(n_t=10, bidirectional=False, undersample=False), _sampler())
    swapped = _plan(data, swap, None)

    assert {t.kind for t in one_way.triplets} == {ArtificialKind.SPO_PRIME}
    (entry,) = swapped.triplets
    assert (entry.base_triplet_id, entry.object_instance, entry.donor_triplet_id) == (0, 3, 1)
    with pytest.raises(ValidationError, match="needs a sampler table"):
        _plan(data, FstaConfig(), None)


def test_plan_rejects_undrawn_objects() -> None:
    pending = ArtificialTriplet(
        kind=ArtificialKind.SPO_PRIME,
        base_triplet_id=0,
        predicate=ON,
        subject_class=MAN,
        subject_instance=0,
        object_class=None,
        object_instance=None,
        subject_box=builders.box(0),
        object_box=builders.box(1),
    )

    with pytest.raises(ValidationError, match="undrawn"):
        AugmentationPlan(step=0, triplets=(pending,), group_counts={Group.HEAD: 1})


def test_predicate_geometry_reference_values() -> None:
    box = BBox(0.0, 0.0, 2.0, 4.0)

    np.testing.assert_allclose(predicate_geometry(box, box), [0, 0, 0, 0, 1, 1])
    beside = predicate_geometry(box, BBox(2.0, 0.0, 6.0, 4.0))
    np.testing.assert_allclose(beside, [1.5, 0.0, math.log(2.0), 0.0, 0.0, 0.0])


def test_feature_resolver_uses_real_and_generated_objects() -> None:
    data = _street()
    vectors = np.repeat(np.arange(6.0)[:, None], 2, axis=1)
    store = FeatureStore.from_arrays(range(6), [0] * 6, vectors)
    swap = FstaConfig(
        n_t=10, object_source=ObjectSource.SWAP, bidirectional=False, undersample=False
    )

    batch = FeatureResolver(store).resolve(_plan(data, swap, None))

    np.testing.assert_array_equal(batch.subjects, [[0.0, 0.0]])
    np.testing.assert_array_equal(batch.objects, [[3.0, 3.0]])
    assert batch.geometry.shape == (1, 6)
    assert batch.stacked().shape == (1, 10)

    generated = _plan(data, FstaConfig(n_t=10, bidirectional=False, undersample=False), _sampler())
    with pytest.raises(ValidationError, match="loaded generator"):
        FeatureResolver(store).resolve(generated)


def test_l_at_is_mean_negative_log_probability() -> None:
    batch = ArtificialBatch(
        subjects=np.zeros((2, 2)),
        geometry=np.zeros((2, 6)),
        objects=np.zeros((2, 2)),
        predicates=np.array([ON, WEARING]),
    )

    uniform = l_at(batch, lambda rows: np.full((rows.shape[0], 4), 0.25))
    assert uniform == pytest.approx(math.log(4.0))
    with pytest.raises(ValidationError, match="output range"):
        l_at(batch, lambda rows: np.full((rows.shape[0], 2), 0.5))
    empty = ArtificialBatch(np.zeros((0, 2)), np.zeros((0, 6)), np.zeros((0, 2)), np.zeros(0))
    assert l_at(empty, lambda rows: rows) == 0.0


def test_plan_file_round_trip(tmp_path: Path) -> None:
    plan = _plan(_street(), FstaConfig(n_t=10, undersample=False), _sampler(), step=7)
    path = tmp_path / "plan.jsonl"

    write_plans([plan], path)

    assert load_plan_entries(path) == [(7, entry) for entry in plan.triplets]


def _random_candidates(
    rng: np.random.Generator,
) -> tuple[Dataset, list[CandidateTriplet]]:
    """Random records over 4 object classes and 4 predicates; candidates may share a triplet."""
    groups = {1: Group.HEAD, 2: Group.BODY, 3: Group.TAIL, 4: Group.TAIL}
    records = [
        builders.record(
            t, int(rng.integers(4)), int(rng.integers(1, 5)), int(rng.integers(4))
        )
        for t in range(int(rng.integers(3, 9)))
    ]
    data = builders.dataset(records, n_objects=4, n_predicates=5, groups=groups)
    candidates = []
    for index in range(int(rng.integers(2, 7))):
        base = records[int(rng.integers(len(records)))]
        candidates.append(
            CandidateTriplet(
                image_id=0,
                subject=Proposal(2 * index, int(rng.integers(4)), base.subject_box),
                obj=Proposal(2 * index + 1, int(rng.integers(4)), base.object_box),
                predicate=base.predicate,
                triplet_id=base.triplet_id,
            )
        )
    return data, candidates


@pytest.mark.parametrize("seed", range(25))
def test_subject_swaps_match_pairwise_enumeration(seed: int) -> None:
    data, candidates = _random_candidates(np.random.default_rng(seed))
    space = data.label_space

    for tail_only in (True, False):
        found = enum_s_prime_po(candidates, space, FstaConfig(tail_only_s_po=tail_only))

        expected = [
            (base.triplet_id, donor.triplet_id, donor.subject.instance_id, base.obj.instance_id)
            for base, donor in itertools.product(candidates, candidates)
            if base.triplet_id != donor.triplet_id
            and (not tail_only or space.groups[base.predicate] is Group.TAIL)
            and (donor.subject.class_index, base.predicate, base.obj.class_index)
            in space.valid_triples
        ]
        assert [
            (e.base_triplet_id, e.donor_triplet_id, e.subject_instance, e.object_instance)
            for e in found
        ] == expected
        assert all(e.kind is ArtificialKind.S_PRIME_PO for e in found)


@pytest.mark.parametrize("seed", range(25))
def test_object_swaps_match_pairwise_enumeration(seed: int) -> None:
    data, candidates = _random_candidates(np.random.default_rng(100 + seed))
    space = data.label_space

    found = enum_spo_prime_swap(candidates, space)

    expected = [
        (base.triplet_id, donor.triplet_id, donor.obj.class_index, donor.obj.instance_id)
        for base, donor in itertools.product(candidates, candidates)
        if base.triplet_id != donor.triplet_id
        and (base.subject.class_index, base.predicate, donor.obj.class_index)
        in space.valid_triples
    ]
    assert [
        (e.base_triplet_id, e.donor_triplet_id, e.object_class, e.object_instance) for e in found
    ] == expected


@pytest.mark.parametrize("seed", range(25))
def test_generated_objects_cover_exactly_the_sampler_keys(seed: int) -> None:
    rng = np.random.default_rng(200 + seed)
    _, candidates = _random_candidates(rng)
    keys = {(s, p) for s in range(4) for p in range(1, 5) if rng.random() < 0.5}
    entries: dict[tuple[int, int], SamplerEntry] = {}
    for key in sorted(keys):
        objects = tuple(int(o) for o in sorted(rng.choice(4, int(rng.integers(1, 4)), False)))
        weights = rng.dirichlet(np.ones(len(objects)))
        entries[key] = SamplerEntry(objects, tuple(weights), tuple(weights), False)
    sampler = SamplerTable(entries=entries)

    found = enum_spo_prime(candidates, sampler, rng)

    covered = [c for c in candidates if (c.subject.class_index, c.predicate) in keys]
    assert [(e.base_triplet_id, e.subject_instance) for e in found] == [
        (c.triplet_id, c.subject.instance_id) for c in covered
    ]
    for entry, base in zip(found, covered, strict=True):
        assert entry.generated_object
        assert entry.object_class in entries[(base.subject.class_index, base.predicate)].candidates
        assert (entry.subject_box, entry.object_box) == (base.subject.box, base.obj.box)


def test_generated_object_classes_follow_sampler_weights() -> None:
    data = _street()
    pool = sample_pairs(_image(data), FstaConfig(n_t=10), np.random.default_rng(0))
    on_horse = [c for c in pool if c.predicate == ON]
    sampler = SamplerTable(
        entries={(MAN, ON): SamplerEntry((HORSE, BIKE), (0.2, 0.8), (0.2, 0.8), False)}
    )

    found = enum_spo_prime(on_horse * 4000, sampler, np.random.default_rng(3))

    share = sum(1 for e in found if e.object_class == BIKE) / len(found)
    assert share == pytest.approx(0.8, abs=0.03)
