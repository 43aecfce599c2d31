import numpy as np
import pytest
import torch

from conftest import random_bag, tiny_encoder
from modaltune.numerics import AttentionParams, DimensionError, attention
from modaltune.slide_encoder import (EncoderConfig, FeatureBag, block_forward,
                                     dilated_attention, dilated_mask,
                                     embed_patches, encode_without_adapter,
                                     init_frozen, prepend_cls)


class TestEncoderConfig:
    def test_layers_divisible_by_blocks(self):
        with pytest.raises(ValueError):
            EncoderConfig(n_layers=7, n_blocks=3)

    def test_dilated_lists_validated(self):
        with pytest.raises(ValueError):
            EncoderConfig(attention_mode="dilated", segment_lengths=[8],
                          dilation_ratios=[1, 2])
        with pytest.raises(ValueError):
            EncoderConfig(attention_mode="dilated", segment_lengths=[9],
                          dilation_ratios=[2])

    def test_paper_scale_block_arithmetic(self):
        cfg = EncoderConfig(d_model=768, n_layers=12, n_blocks=3, n_heads=16,
                            ff_dim=3072)
        assert cfg.layers_per_block == 4


class TestEmbedPatches:
    def test_zero_bag_zero_output(self):
        frozen = tiny_encoder()
        bag = FeatureBag(patient_id="z", features=torch.zeros(4, 8))
        assert torch.equal(embed_patches(bag, frozen), torch.zeros(4, 16))

    def test_single_patch_shape(self):
        frozen = tiny_encoder()
        out = embed_patches(random_bag(n_img=1), frozen)
        assert out.shape == (1, 16)

    def test_matches_independent_matmul_f64(self):
        frozen = tiny_encoder()
        bag = random_bag(n_img=6)
        out = embed_patches(bag, frozen)
        expected = (bag.features.double() @ frozen.patch_proj_w.double()
                    + frozen.patch_proj_b.double())
        assert np.allclose(out.numpy(), expected.numpy(), atol=1e-6)

    def test_width_mismatch(self):
        frozen = tiny_encoder()
        with pytest.raises(DimensionError):
            embed_patches(FeatureBag(patient_id="w", features=torch.zeros(2, 9)),
                          frozen)

    def test_no_gradient_into_frozen(self):
        frozen = tiny_encoder()
        out = embed_patches(random_bag(), frozen)
        assert not out.requires_grad


class TestPrependCls:
    def test_single_patch_guard(self):
        frozen = tiny_encoder()
        out = prepend_cls(embed_patches(random_bag(n_img=1), frozen), frozen)
        assert out.shape == (2, 16)
        assert torch.equal(out[0], frozen.cls_token[0])

    def test_double_application_rejected(self):
        frozen = tiny_encoder()
        out = prepend_cls(embed_patches(random_bag(), frozen), frozen)
        with pytest.raises(ValueError):
            prepend_cls(out, frozen)

    def test_rows_preserved_bitwise(self):
        frozen = tiny_encoder()
        f = embed_patches(random_bag(n_img=4), frozen)
        out = prepend_cls(f, frozen)
        assert torch.equal(out[1:], f)


class TestBlockForward:
    def test_zero_weights_residual_identity(self):
        frozen = tiny_encoder()
        with torch.no_grad():
            for p in frozen.parameters():
                p.zero_()
        x = torch.randn(5, 16, generator=torch.Generator().manual_seed(2))
        out = block_forward(x, 0, frozen)
        assert torch.equal(out, x)

    def test_layers_per_block_counter(self):
        frozen = tiny_encoder(d_model=16, n_layers=12, n_blocks=3, n_heads=2,
                              ff_dim=16)
        x = torch.randn(3, 16, generator=torch.Generator().manual_seed(4))
        for b in range(3):
            log: list[int] = []
            block_forward(x, b, frozen, call_log=log)
            assert log == list(range(b * 4, b * 4 + 4))

    def test_dense_equals_degenerate_dilated(self):
        bag = random_bag(n_img=6)
        dense = tiny_encoder()
        dilated = tiny_encoder(attention_mode="dilated", segment_lengths=[64],
                               dilation_ratios=[1])
        a = encode_without_adapter(bag, dense)
        b = encode_without_adapter(bag, dilated)
        assert torch.allclose(a, b, atol=1e-5)

    def test_bad_block_index(self):
        frozen = tiny_encoder()
        with pytest.raises(ValueError):
            block_forward(torch.zeros(2, 16), 5, frozen)

    def test_shape_invariant_per_block(self):
        frozen = tiny_encoder()
        f = prepend_cls(embed_patches(random_bag(n_img=7), frozen), frozen)
        for b in range(frozen.cfg.n_blocks):
            f = block_forward(f, b, frozen)
            assert f.shape == (8, 16)


class TestDilatedAttention:
    def brute_force_mask(self, n, segment_len, ratio):
        m = np.zeros((n, n), dtype=bool)
        for i in range(n):
            for j in range(n):
                same_segment = i // segment_len == j // segment_len
                same_residue = i % ratio == j % ratio
                m[i, j] = (same_segment and same_residue) or i == 0 or j == 0
        return m

    def test_mask_matches_brute_force(self):
        mask = dilated_mask(8, segment_len=4, ratio=2)
        assert np.array_equal(mask.numpy(), self.brute_force_mask(8, 4, 2))

    @pytest.mark.parametrize("n,seg,ratio", [(5, 4, 2), (9, 3, 3), (12, 6, 2)])
    def test_mask_matches_brute_force_params(self, n, seg, ratio):
        assert np.array_equal(dilated_mask(n, seg, ratio).numpy(),
                              self.brute_force_mask(n, seg, ratio))

    def test_degenerate_equals_dense(self):
        gen = torch.Generator().manual_seed(6)
        p = AttentionParams(8, n_heads=2, generator=gen)
        f = torch.randn(5, 8, generator=gen)
        out_dil, _ = dilated_attention(f, segment_len=8, ratio=1, params=p)
        out_dense, _ = attention(f, f, p)
        assert torch.allclose(out_dil, out_dense, atol=1e-5)

    def test_cross_segment_weight_is_zero(self):
        gen = torch.Generator().manual_seed(8)
        p = AttentionParams(8, n_heads=2, generator=gen)
        f = torch.randn(8, 8, generator=gen)
        _, weights = dilated_attention(f, segment_len=4, ratio=2, params=p)
        # token 1 (segment 0) vs token 5 (segment 1): no attention either way
        assert torch.all(weights[:, 1, 5] == 0)
        assert torch.all(weights[:, 5, 1] == 0)
        # same segment, different stride residue
        assert torch.all(weights[:, 1, 2] == 0)

    def test_bad_segment_len(self):
        p = AttentionParams(8, n_heads=2)
        with pytest.raises(ValueError):
            dilated_attention(torch.zeros(4, 8), segment_len=0, ratio=1, params=p)


class TestFrozenContract:
    def test_same_seed_same_digest(self):
        assert tiny_encoder(seed=5).content_digest() == tiny_encoder(seed=5).content_digest()

    def test_different_seed_different_digest(self):
        assert tiny_encoder(seed=5).content_digest() != tiny_encoder(seed=6).content_digest()

    def test_parameters_require_no_grad(self):
        frozen = tiny_encoder()
        assert all(not p.requires_grad for p in frozen.parameters())

    def test_forward_builds_no_graph(self):
        frozen = tiny_encoder()
        out = encode_without_adapter(random_bag(), frozen)
        assert out.grad_fn is None
