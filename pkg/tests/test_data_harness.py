import numpy as np
import pytest
import torch

from conftest import tiny_adapter, tiny_encoder
from modaltune.data_harness import (Cohort, CohortSpec, CohortSplit,
                                    build_world, generate_cohort,
                                    modality_complementarity, ood_protocol,
                                    pool_pan_cancer, prepare_cohort,
                                    split_cohort)
from modaltune.text_targets import RARE


def spec_of(site="alpha", n=120, seed=5, **kw):
    base = dict(site=site, n_patients=n, d_img=16, n_genes=60, n_pathways=10,
                marker_pathways=(0, 1, 2), risk_pathways=(3, 4), seed=seed,
                world_seed=9)
    base.update(kw)
    return CohortSpec(**base)


class TestSpecValidation:
    def test_censoring_target_bounds(self):
        with pytest.raises(ValueError):
            spec_of(censoring_target=1.0)
        with pytest.raises(ValueError):
            spec_of(censoring_target=-0.1)

    def test_pathway_indices_validated(self):
        with pytest.raises(ValueError):
            spec_of(marker_pathways=(99,))

    def test_n_img_range_validated(self):
        with pytest.raises(ValueError):
            spec_of(n_img_range=(0, 4))


class TestGeneration:
    def test_same_spec_bitwise_identical(self):
        a = generate_cohort(spec_of())
        b = generate_cohort(spec_of())
        for pa, pb in zip(a.patients, b.patients):
            assert torch.equal(pa.bag.features, pb.bag.features)
            assert np.array_equal(pa.expression.values, pb.expression.values)
            assert pa.record.survival_months == pb.record.survival_months
            assert pa.record.subtype_raw == pb.record.subtype_raw

    def test_different_seed_differs(self):
        a = generate_cohort(spec_of(seed=5))
        b = generate_cohort(spec_of(seed=6))
        assert not torch.equal(a.patients[0].bag.features,
                               b.patients[0].bag.features)

    def test_censoring_fraction_near_target(self):
        cohort = generate_cohort(spec_of(n=500, censoring_target=0.3))
        assert abs(cohort.achieved_censoring() - 0.3) <= 0.05

    def test_zero_censoring_target(self):
        cohort = generate_cohort(spec_of(n=60, censoring_target=0.0))
        assert cohort.achieved_censoring() == 0.0

    def test_marker_mean_shift_significant(self):
        cohort = generate_cohort(spec_of(n=500))
        world = cohort.world
        marker = world.marker_patterns[0] != 0
        by_class = {0: [], 1: []}
        for p in cohort.patients:
            c = int(p.latents["class"])
            # project marker genes onto the class-0 pattern direction
            by_class[c].append(
                p.expression.values[marker] @ world.marker_patterns[0][marker])
        a, b = np.array(by_class[0]), np.array(by_class[1])
        t = abs(a.mean() - b.mean()) / np.sqrt(a.var() / len(a) + b.var() / len(b))
        assert t > 5.0

    def test_bag_sizes_within_range(self):
        cohort = generate_cohort(spec_of(n=50, n_img_range=(4, 9)))
        sizes = [p.bag.features.shape[0] for p in cohort.patients]
        assert min(sizes) >= 4 and max(sizes) <= 9

    def test_order_independence_of_patient_content(self):
        # patient draws derive from (seed, id), not generation order
        full = generate_cohort(spec_of(n=40))
        small = generate_cohort(spec_of(n=10))
        for pa, pb in zip(small.patients, full.patients[:10]):
            assert torch.equal(pa.bag.features, pb.bag.features)


class TestSplit:
    def test_exact_sizes_at_100(self):
        cohort = generate_cohort(spec_of(n=100))
        split = split_cohort(cohort.patients, seed=3)
        assert len(split.train_ids) == 68
        assert len(split.val_ids) == 12
        assert len(split.test_ids) == 20

    def test_disjoint_exhaustive(self):
        cohort = generate_cohort(spec_of(n=97))
        split = split_cohort(cohort.patients, seed=3)
        ids = split.train_ids + split.val_ids + split.test_ids
        assert len(ids) == 97
        assert len(set(ids)) == 97

    def test_per_class_proportions_within_one(self):
        cohort = generate_cohort(spec_of(n=200))
        split = split_cohort(cohort.patients, seed=3)
        strata = {}
        for p in cohort.patients:
            label = p.record.subtype_group or RARE
            strata.setdefault(label, []).append(p.patient_id)
        train = set(split.train_ids)
        for label, members in strata.items():
            if len(members) < 3:
                continue
            got = sum(1 for m in members if m in train)
            expected = 0.68 * len(members)
            assert abs(got - expected) <= 1.0 + 1e-9, (label, got, expected)

    def test_small_stratum_falls_back_global(self):
        cohort = generate_cohort(spec_of(n=60, rare_fraction=0.0))
        # force a 2-member stratum
        cohort.patients[0].record.subtype_group = "vanishing subtype"
        cohort.patients[1].record.subtype_group = "vanishing subtype"
        with pytest.warns(UserWarning):
            split_cohort(cohort.patients, seed=3)

    def test_too_small_cohort_rejected(self):
        cohort = generate_cohort(spec_of(n=30))
        with pytest.raises(ValueError):
            split_cohort(cohort.patients[:10], seed=3)

    def test_rare_never_in_probe_labels(self):
        prepared = prepare_cohort(spec_of(n=200), rare_threshold=10)
        for part in ("val", "test"):
            patients, labels = prepared.probe_patients(part)
            assert all(p.record.class_index is not None for p in patients)
            rare_ids = {p.patient_id for p in prepared.cohort.patients
                        if p.record.class_index is None}
            assert rare_ids.isdisjoint({p.patient_id for p in patients})


class TestFinalize:
    def test_rare_threshold_boundary(self):
        prepared = prepare_cohort(spec_of(n=200), rare_threshold=10)
        train_ids = set(prepared.split.train_ids)
        counts = {}
        for p in prepared.cohort.patients:
            if p.patient_id in train_ids and p.record.subtype_group is not None:
                g = p.record.subtype_group
                counts[g] = counts.get(g, 0) + 1
        assert all(c >= 10 for c in counts.values())
        assert prepared.class_names == sorted(counts)

    def test_duration_bins_fit_on_train_only(self):
        prepared = prepare_cohort(spec_of(n=120), rare_threshold=10)
        train_ids = set(prepared.split.train_ids)
        train_durations = sorted(p.record.survival_months
                                 for p in prepared.cohort.patients
                                 if p.patient_id in train_ids)
        n = len(train_durations)
        expected_first = train_durations[-(-n // 4) - 1]
        assert prepared.bins.edges[0] == expected_first

    def test_all_records_binned(self):
        prepared = prepare_cohort(spec_of(n=120), rare_threshold=10)
        assert all(p.record.duration_bin in (0, 1, 2, 3)
                   for p in prepared.cohort.patients)


class TestPooling:
    def test_two_sites_of_100_pool_to_136(self):
        a = prepare_cohort(spec_of(site="a", n=100, seed=5), rare_threshold=10)
        b = prepare_cohort(spec_of(site="b", n=100, seed=6), rare_threshold=10)
        pooled = pool_pan_cancer([a, b], seed=1)
        assert len(pooled) == 136

    def test_duplicate_ids_rejected(self):
        a = prepare_cohort(spec_of(site="a", n=100, seed=5), rare_threshold=10)
        with pytest.raises(ValueError):
            pool_pan_cancer([a, a], seed=1)

    def test_single_site_rejected(self):
        a = prepare_cohort(spec_of(site="a", n=100, seed=5), rare_threshold=10)
        with pytest.raises(ValueError):
            pool_pan_cancer([a], seed=1)

    def test_interleave_is_seeded_permutation(self):
        a = prepare_cohort(spec_of(site="a", n=100, seed=5), rare_threshold=10)
        b = prepare_cohort(spec_of(site="b", n=100, seed=6), rare_threshold=10)
        p1 = [p.patient_id for p in pool_pan_cancer([a, b], seed=1)]
        p2 = [p.patient_id for p in pool_pan_cancer([a, b], seed=1)]
        p3 = [p.patient_id for p in pool_pan_cancer([a, b], seed=2)]
        assert p1 == p2
        assert p1 != p3
        assert sorted(p1) == sorted(p3)

    def test_per_site_bins_differ(self):
        a = prepare_cohort(spec_of(site="a", n=100, seed=5), rare_threshold=10)
        b = prepare_cohort(spec_of(site="b", n=100, seed=6), rare_threshold=10)
        assert a.bins.edges != b.bins.edges


class TestOodProtocol:
    def test_overlap_with_seen_patients_rejected(self):
        prepared = prepare_cohort(spec_of(n=60), rare_threshold=6)
        frozen = tiny_encoder(d_img=16)
        adapter = tiny_adapter(prepared.cohort.world)
        seen = {prepared.cohort.patients[0].patient_id}
        with pytest.raises(ValueError):
            ood_protocol(adapter, frozen, prepared, seen_patient_ids=seen)

    def test_protocol_runs_without_tuning(self):
        prepared = prepare_cohort(spec_of(n=80), rare_threshold=6)
        frozen = tiny_encoder(d_img=16)
        adapter = tiny_adapter(prepared.cohort.world)
        before = {k: v.detach().clone() for k, v in adapter.state_dict().items()}
        metrics = ood_protocol(adapter, frozen, prepared, seen_patient_ids=set())
        assert set(metrics) == {"balanced_accuracy", "majority_balanced_accuracy",
                                "c_index"}
        for k, v in adapter.state_dict().items():
            assert torch.equal(v, before[k])


class TestComplementarity:
    def test_planted_signal_complementary_at_default_scale(self):
        prepared = prepare_cohort(CohortSpec(site="comp", seed=11, world_seed=12))
        scores = modality_complementarity(prepared)
        assert scores["expression"] >= 0.75
        assert scores["image"] >= 0.75
        assert scores["expression"] < 1.0
        assert scores["image"] < 1.0
        assert scores["concat"] > max(scores["expression"], scores["image"])
