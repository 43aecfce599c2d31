import numpy as np
import pytest
import torch

from modaltune.modal_encoders import (ClinicalFeatures, DimensionError,
                                      ModalEncoderStack, PathwayMap,
                                      PathwayCompressor, PathwayMixer,
                                      SparseMLP, TabularEncoder,
                                      concat_modalities)
from modaltune.numerics import DropoutRng, grad_check


def small_map(n_pathways=4, genes_per=3) -> PathwayMap:
    n_genes = n_pathways * genes_per
    mem = np.zeros((n_pathways, n_genes), dtype=np.float32)
    for p in range(n_pathways):
        mem[p, p * genes_per:(p + 1) * genes_per] = 1.0
    return PathwayMap(membership=mem,
                      pathway_names=[f"pw{p}" for p in range(n_pathways)])


class TestPathwayMap:
    def test_empty_pathway_rejected(self):
        mem = np.zeros((2, 4), dtype=np.float32)
        mem[0, 0] = 1.0
        with pytest.raises(ValueError):
            PathwayMap(membership=mem, pathway_names=["a", "b"])

    def test_non_binary_rejected(self):
        mem = np.full((1, 2), 0.5, dtype=np.float32)
        with pytest.raises(ValueError):
            PathwayMap(membership=mem, pathway_names=["a"])

    def test_csv_round_trip(self, tmp_path):
        pm = small_map()
        genes = [f"g{i}" for i in range(pm.n_genes)]
        pm.to_csv(tmp_path / "pw.csv", genes)
        back = PathwayMap.from_csv(tmp_path / "pw.csv", genes)
        assert np.array_equal(back.membership, pm.membership)
        assert back.pathway_names == pm.pathway_names

    def test_unknown_gene_rejected(self, tmp_path):
        (tmp_path / "pw.csv").write_text("pathway,gene\np0,gX\n")
        with pytest.raises(ValueError):
            PathwayMap.from_csv(tmp_path / "pw.csv", ["g0"])


class TestSparseMLP:
    def test_non_member_gene_leaves_row_unchanged(self):
        pm = small_map()
        smlp = SparseMLP(pm, d_out=6, generator=torch.Generator().manual_seed(3))
        x = torch.randn(pm.n_genes, generator=torch.Generator().manual_seed(4))
        base = smlp(x)
        x2 = x.clone()
        x2[5] += 10.0  # gene 5 belongs to pathway 1 only
        bumped = smlp(x2)
        assert torch.equal(base[0], bumped[0])
        assert torch.equal(base[2], bumped[2])
        assert torch.equal(base[3], bumped[3])
        assert not torch.equal(base[1], bumped[1])

    def test_identity_map_single_layer_depends_on_own_gene(self):
        mem = np.eye(3, dtype=np.float32)
        pm = PathwayMap(membership=mem, pathway_names=["a", "b", "c"])
        smlp = SparseMLP(pm, d_out=2, depth=1,
                         generator=torch.Generator().manual_seed(5))
        x = torch.tensor([1.0, 2.0, 3.0])
        base = smlp(x)
        x2 = torch.tensor([1.0, 9.0, 3.0])
        bumped = smlp(x2)
        assert torch.equal(base[0], bumped[0])
        assert torch.equal(base[2], bumped[2])
        assert not torch.equal(base[1], bumped[1])

    def test_masked_weight_gradient_exactly_zero(self):
        pm = small_map()
        smlp = SparseMLP(pm, d_out=4, generator=torch.Generator().manual_seed(7))
        x = torch.randn(pm.n_genes, generator=torch.Generator().manual_seed(8))
        loss = (smlp(x) ** 2).sum()
        loss.backward()
        grad = smlp.w1.grad
        assert grad is not None
        assert torch.all(grad[smlp.mask == 0] == 0)
        assert torch.any(grad[smlp.mask == 1] != 0)

    def test_gradient_matches_finite_differences(self):
        pm = small_map(n_pathways=2, genes_per=2)
        smlp = SparseMLP(pm, d_out=3, hidden=2,
                         generator=torch.Generator().manual_seed(9)).double()
        x = torch.randn(4, dtype=torch.float64,
                        generator=torch.Generator().manual_seed(10))
        params = dict(smlp.named_parameters())
        report = grad_check(lambda: (smlp(x) ** 2).sum(), params, eps=1e-6)
        assert report.max_rel_err < 1e-6


class TestMixer:
    def test_token_mixing_is_position_sensitive(self):
        gen = torch.Generator().manual_seed(11)
        mixer = PathwayMixer(n_pathways=5, d_gp=6, d_model=8, generator=gen)
        x = torch.randn(5, 6, generator=gen)
        perm = torch.tensor([4, 3, 2, 1, 0])
        mixed_then_permuted = mixer(x)[perm]
        permuted_then_mixed = mixer(x[perm])
        assert not torch.allclose(mixed_then_permuted, permuted_then_mixed)

    def test_output_shape(self):
        gen = torch.Generator().manual_seed(13)
        mixer = PathwayMixer(n_pathways=8, d_gp=16, d_model=64, generator=gen)
        assert mixer(torch.randn(8, 16, generator=gen)).shape == (8, 64)

    def test_eval_mode_bitwise_deterministic(self):
        gen = torch.Generator().manual_seed(15)
        mixer = PathwayMixer(n_pathways=4, d_gp=6, d_model=8, generator=gen)
        x = torch.randn(4, 6, generator=gen)
        assert torch.equal(mixer(x, rng=None), mixer(x, rng=None))

    def test_gradient_matches_finite_differences(self):
        gen = torch.Generator().manual_seed(17)
        mixer = PathwayMixer(n_pathways=3, d_gp=4, d_model=5, n_layers=1,
                             generator=gen).double()
        x = torch.randn(3, 4, dtype=torch.float64, generator=gen,
                        requires_grad=True)
        params = {"x": x, **dict(mixer.named_parameters())}
        report = grad_check(lambda: (mixer(x) ** 2).sum(), params, eps=1e-6)
        assert report.max_rel_err < 1e-3


class TestCompressor:
    def test_paper_scale_shape(self):
        gen = torch.Generator().manual_seed(19)
        comp = PathwayCompressor(331, 64, generator=gen)
        out = comp(torch.randn(331, 8, generator=gen))
        assert out.shape == (64, 8)

    def test_averaging_weights_give_mean_token(self):
        comp = PathwayCompressor(4, 2)
        with torch.no_grad():
            comp.weight.fill_(0.25)
        x = torch.randn(4, 6, generator=torch.Generator().manual_seed(21))
        out = comp(x)
        assert torch.allclose(out[0], x.mean(dim=0), atol=1e-6)
        assert torch.allclose(out[1], x.mean(dim=0), atol=1e-6)

    def test_gradient_matches_finite_differences(self):
        gen = torch.Generator().manual_seed(23)
        comp = PathwayCompressor(4, 2, generator=gen).double()
        x = torch.randn(4, 3, dtype=torch.float64, generator=gen)
        report = grad_check(lambda: (comp(x) ** 2).sum(),
                            dict(comp.named_parameters()), eps=1e-6)
        assert report.max_rel_err < 1e-6


class TestTabularEncoder:
    def test_all_masked_record_is_bias_path(self):
        gen = torch.Generator().manual_seed(25)
        enc = TabularEncoder(3, 8, generator=gen)
        rec = ClinicalFeatures(patient_id="p", values=np.zeros(3),
                               presence_mask=np.zeros(3))
        out = enc(rec)
        from modaltune.numerics import gelu, linear

        bias_path = linear(gelu(enc.b1.reshape(1, -1)), enc.w2, enc.b2)
        assert torch.allclose(out, bias_path, atol=1e-7)

    def test_shape(self):
        enc = TabularEncoder(3, 8, generator=torch.Generator().manual_seed(27))
        rec = ClinicalFeatures(patient_id="p", values=np.array([1.0, 2.0, 0.0]),
                               presence_mask=np.array([1.0, 1.0, 0.0]))
        assert enc(rec).shape == (1, 8)

    def test_masked_entries_must_be_zero(self):
        with pytest.raises(ValueError):
            ClinicalFeatures(patient_id="p", values=np.array([1.0, 2.0]),
                             presence_mask=np.array([1.0, 0.0]))

    def test_gradient_matches_finite_differences(self):
        gen = torch.Generator().manual_seed(29)
        enc = TabularEncoder(3, 4, generator=gen).double()
        rec = ClinicalFeatures(patient_id="p",
                               values=np.array([1.0, -0.5, 2.0]))
        report = grad_check(lambda: (enc(rec) ** 2).sum(),
                            dict(enc.named_parameters()), eps=1e-6)
        assert report.max_rel_err < 1e-6


class TestConcat:
    def test_single_modality_identity(self):
        x = torch.randn(4, 8, generator=torch.Generator().manual_seed(31))
        assert torch.equal(concat_modalities([x]), x)

    def test_transcriptomics_plus_clinical_row_count(self):
        t = torch.zeros(64, 8)
        c = torch.zeros(1, 8)
        assert concat_modalities([t, c]).shape == (65, 8)

    def test_order_is_row_permutation(self):
        gen = torch.Generator().manual_seed(33)
        a = torch.randn(2, 4, generator=gen)
        b = torch.randn(3, 4, generator=gen)
        ab = concat_modalities([a, b])
        ba = concat_modalities([b, a])
        assert torch.equal(ab, torch.cat([ba[3:], ba[:3]], dim=0))

    def test_empty_list_rejected(self):
        with pytest.raises(ValueError):
            concat_modalities([])

    def test_width_mismatch_rejected(self):
        with pytest.raises(DimensionError):
            concat_modalities([torch.zeros(2, 4), torch.zeros(2, 5)])


class TestStack:
    def test_eval_replay_bitwise(self):
        pm = small_map()
        stack = ModalEncoderStack(pm, d_gp=6, d_model=8, n_tokens=3,
                                  generator=torch.Generator().manual_seed(35))
        x = torch.randn(pm.n_genes, generator=torch.Generator().manual_seed(36))
        assert torch.equal(stack(x), stack(x))

    def test_train_dropout_replays_by_key(self):
        pm = small_map()
        stack = ModalEncoderStack(pm, d_gp=6, d_model=8, n_tokens=3,
                                  generator=torch.Generator().manual_seed(37))
        x = torch.randn(pm.n_genes, generator=torch.Generator().manual_seed(38))
        a = stack(x, rng=DropoutRng(seed=1, step=5))
        b = stack(x, rng=DropoutRng(seed=1, step=5))
        assert torch.equal(a, b)

    def test_all_outputs_have_model_width(self):
        pm = small_map()
        stack = ModalEncoderStack(pm, d_gp=6, d_model=8, n_tokens=3, n_clinical=2,
                                  generator=torch.Generator().manual_seed(39))
        rec = ClinicalFeatures(patient_id="p", values=np.array([1.0, 0.5]))
        out = stack(torch.randn(pm.n_genes,
                                generator=torch.Generator().manual_seed(40)),
                    clinical=rec)
        assert out.shape == (4, 8)  # 3 pathway tokens + 1 clinical token
