import math

import numpy as np
import pytest
import torch

from conftest import tiny_adapter, tiny_encoder, tiny_world
from modaltune.data_harness import generate_cohort, prepare_cohort
from modaltune.evaluation import DegenerateTaskError
from modaltune.numerics import NumericError, grad_check
from modaltune.text_targets import (DurationBins, Projector, StubTextEncoder,
                                    build_text_targets)
from modaltune.trainer import (Checkpoint, DirectLabelHeads, TrainConfig,
                               TrainSample, kl_alignment_loss, load_checkpoint,
                               lr_at, select_checkpoint, train)


def build_training_setup(n_patients=30, epochs=2, **cfg_kw):
    spec, world = tiny_world(n_patients=n_patients)
    prepared = prepare_cohort(spec, world, rare_threshold=4)
    frozen = tiny_encoder()
    adapter = tiny_adapter(world)
    enc = StubTextEncoder(dim=24)
    proj = Projector(24, 12, seed=3)
    samples = [
        TrainSample(patient=p,
                    targets=build_text_targets(p.record, prepared.bins, enc, proj),
                    site=spec.site, class_index=p.record.class_index,
                    duration_bin=p.record.duration_bin, event=p.record.event)
        for p in prepared.patients_in("train")
    ]
    cfg = TrainConfig(epochs=epochs, max_lr=1e-3, warmup_epochs=0, seed=7,
                      **cfg_kw)
    return adapter, frozen, samples, cfg, proj, prepared


class TestKlLoss:
    def test_identical_vectors_zero_loss(self):
        z = [torch.tensor([0.3, -0.2, 0.9]) for _ in range(3)]
        assert float(kl_alignment_loss(z, [t.clone() for t in z])) == pytest.approx(0.0)

    def test_two_bin_closed_form(self):
        z = [torch.tensor([1.0, 0.0])]
        y = [torch.tensor([0.0, 1.0])]
        # KL(softmax(1,0) || softmax(0,1)) = sigma(1) - sigma(-1) = tanh(1/2)
        assert float(kl_alignment_loss(z, y)) == pytest.approx(math.tanh(0.5),
                                                               abs=1e-7)

    def test_nonnegative_on_random_pairs(self):
        gen = torch.Generator().manual_seed(5)
        for _ in range(1000):
            z = [torch.randn(6, generator=gen)]
            y = [torch.randn(6, generator=gen)]
            assert float(kl_alignment_loss(z, y)) >= 0.0

    def test_zero_norm_rejected(self):
        with pytest.raises(NumericError):
            kl_alignment_loss([torch.zeros(3)], [torch.ones(3)])

    def test_gradients_only_into_z(self):
        z = torch.tensor([1.0, -0.5, 0.2], requires_grad=True)
        y = torch.tensor([0.5, 0.5, -0.2], requires_grad=True)
        loss = kl_alignment_loss([z], [y])
        loss.backward()
        assert z.grad is not None and z.grad.abs().sum() > 0
        assert y.grad is None or y.grad.abs().sum() == 0

    def test_gradient_matches_finite_differences_through_normalization(self):
        gen = torch.Generator().manual_seed(9)
        z = torch.randn(8, generator=gen, dtype=torch.float64, requires_grad=True)
        y = torch.randn(8, generator=gen, dtype=torch.float64)
        report = grad_check(lambda: kl_alignment_loss([z], [y]), {"z": z},
                            eps=1e-6)
        assert report.max_rel_err < 1e-6

    def test_width_mismatch_rejected(self):
        with pytest.raises(ValueError):
            kl_alignment_loss([torch.ones(3)], [torch.ones(4)])


class TestLrSchedule:
    def test_step_zero_is_zero(self):
        assert lr_at(0, 100, 10, 1e-4) == 0.0

    def test_warmup_end_is_max(self):
        assert lr_at(10, 100, 10, 1e-4) == pytest.approx(1e-4)

    def test_total_step_is_zero(self):
        assert lr_at(100, 100, 10, 1e-4) == pytest.approx(0.0, abs=1e-18)

    def test_monotone_warmup_then_decay(self):
        lrs = [lr_at(s, 100, 10, 1e-4) for s in range(101)]
        assert all(a <= b + 1e-18 for a, b in zip(lrs[:10], lrs[1:11]))
        assert all(a >= b - 1e-18 for a, b in zip(lrs[10:-1], lrs[11:]))

    def test_step_beyond_total_rejected(self):
        with pytest.raises(ValueError):
            lr_at(101, 100, 10, 1e-4)


class TestTrainConfig:
    def test_batch_size_pinned_to_one(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=2)

    def test_warmup_bounded_by_epochs(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=5, warmup_epochs=6)


class TestTraining:
    def test_overfit_single_patient_monotone(self):
        adapter, frozen, samples, _, proj, _ = build_training_setup()
        cfg = TrainConfig(epochs=50, max_lr=3e-3, warmup_epochs=0, seed=3,
                          dropout_enabled=False)
        result = train(adapter, frozen, samples[:1], cfg)
        losses = result.epoch_losses
        assert all(a >= b for a, b in zip(losses, losses[1:])), losses
        assert losses[-1] < 0.1 * losses[0]

    def test_determinism_bitwise(self):
        a1, f1, s1, cfg, p1, _ = build_training_setup()
        r1 = train(a1, f1, s1, cfg)
        a2, f2, s2, cfg2, p2, _ = build_training_setup()
        r2 = train(a2, f2, s2, cfg2)
        assert r1.epoch_losses == r2.epoch_losses
        for k, v in a1.state_dict().items():
            assert torch.equal(v, a2.state_dict()[k]), k

    def test_frozen_digest_unchanged(self):
        adapter, frozen, samples, cfg, proj, _ = build_training_setup()
        result = train(adapter, frozen, samples, cfg)
        assert result.frozen_digest_before == result.frozen_digest_after

    def test_single_task_prompt_one_forward_per_step(self):
        adapter, frozen, samples, cfg, proj, _ = build_training_setup(
            epochs=1, single_task_prompt=True)
        result = train(adapter, frozen, samples, cfg)
        assert result.n_task_forwards == len(samples)

    def test_multi_task_three_forwards_per_step(self):
        adapter, frozen, samples, cfg, proj, _ = build_training_setup(epochs=1)
        result = train(adapter, frozen, samples, cfg)
        assert result.n_task_forwards == 3 * len(samples)

    def test_checkpoint_reload_reproduces_bitwise(self):
        adapter, frozen, samples, cfg, proj, prepared = build_training_setup()
        result = train(adapter, frozen, samples, cfg)
        patient = samples[0].patient
        out_live = adapter(patient.bag, 1, frozen,
                           expression=patient.expression_tensor()).z_comb
        fresh = tiny_adapter(prepared.cohort.world)
        load_checkpoint(fresh, result.checkpoints[-1])
        out_loaded = fresh(patient.bag, 1, frozen,
                           expression=patient.expression_tensor()).z_comb
        assert torch.equal(out_live, out_loaded)

    def test_task_prompts_receive_distinct_gradients(self):
        adapter, frozen, samples, cfg, proj, _ = build_training_setup(epochs=1)
        before = adapter.prompt_bank.prompts.detach().clone()
        train(adapter, frozen, samples, cfg)
        after = adapter.prompt_bank.prompts.detach()
        deltas = (after - before).norm(dim=1)
        assert (deltas > 0).all()
        assert not torch.allclose(after[0], after[1])

    def test_nan_loss_aborts_with_context(self):
        adapter, frozen, samples, cfg, proj, _ = build_training_setup(epochs=1)
        bad = samples[0]
        bad.targets.projected = torch.zeros_like(bad.targets.projected)
        with pytest.raises(NumericError):
            train(adapter, frozen, [bad], cfg)


class TestDirectLabelHeads:
    def test_single_class_rejected(self):
        with pytest.raises(DegenerateTaskError):
            DirectLabelHeads(8, n_classes=1)

    def test_joint_loss_gradient(self):
        heads = DirectLabelHeads(6, n_classes=3, seed=1).double()
        gen = torch.Generator().manual_seed(11)
        z_cls = torch.randn(6, generator=gen, dtype=torch.float64)
        z_surv = torch.randn(6, generator=gen, dtype=torch.float64)

        def loss():
            return (heads.classification_loss(z_cls, 1)
                    + heads.survival_loss(z_surv, 2, True))

        report = grad_check(loss, dict(heads.named_parameters()), eps=1e-6)
        assert report.max_rel_err < 1e-6

    def test_survival_loss_event_vs_censored(self):
        heads = DirectLabelHeads(4, n_classes=2, seed=2)
        z = torch.zeros(4)
        # sigmoid(0) hazards = 0.5: event in bin 1 -> -log(0.5 * 0.5)
        assert float(heads.survival_loss(z, 1, True)) == pytest.approx(
            -math.log(0.25), abs=1e-6)
        # censored in bin 1 -> survived bins 0 and 1 -> -log(0.25)
        assert float(heads.survival_loss(z, 1, False)) == pytest.approx(
            -math.log(0.25), abs=1e-6)

    def test_rare_patients_skipped_count(self):
        adapter, frozen, samples, _, proj, prepared = build_training_setup(
            n_patients=40, epochs=1)
        n_rare = sum(1 for s in samples if s.class_index is None)
        heads = DirectLabelHeads(12, n_classes=2, seed=0)
        cfg = TrainConfig(epochs=1, max_lr=1e-3, warmup_epochs=0, seed=7,
                          no_text_embedding=True)
        result = train(adapter, frozen, samples, cfg, heads=heads)
        assert result.classification_skips == n_rare

    def test_optimizer_touches_exactly_adapter_params(self):
        adapter, frozen, samples, cfg, proj, _ = build_training_setup(epochs=1)
        ids_before = {id(p) for p in adapter.parameters() if p.requires_grad}
        train(adapter, frozen, samples, cfg)
        ids_after = {id(p) for p in adapter.parameters() if p.requires_grad}
        assert ids_before == ids_after
        frozen_ids = {id(p) for p in frozen.parameters()}
        assert ids_after.isdisjoint(frozen_ids)


class TestSelectCheckpoint:
    def ck(self, epoch, ba_by_site):
        mean = float(np.mean(list(ba_by_site.values())))
        return Checkpoint(epoch=epoch, state={},
                          val_metrics={"balanced_accuracy": ba_by_site,
                                       "mean_balanced_accuracy": mean},
                          rng_cursor=0)

    def test_strictly_improving_selects_last(self):
        cks = [self.ck(e, {"a": 0.5 + 0.1 * e}) for e in range(4)]
        assert select_checkpoint(cks) == 3

    def test_tie_selects_earliest(self):
        cks = [self.ck(0, {"a": 0.6}), self.ck(1, {"a": 0.7}),
               self.ck(2, {"a": 0.7})]
        assert select_checkpoint(cks) == 1

    def test_pan_cancer_uses_site_mean(self):
        cks = [self.ck(0, {"a": 0.9, "b": 0.5}), self.ck(1, {"a": 0.7, "b": 0.8})]
        # site means: 0.70 vs 0.75 -> epoch 1, recomputable from per-site values
        assert select_checkpoint(cks) == 1
        mean0 = np.mean(list(cks[0].val_metrics["balanced_accuracy"].values()))
        assert cks[0].val_metrics["mean_balanced_accuracy"] == pytest.approx(mean0)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            select_checkpoint([])
