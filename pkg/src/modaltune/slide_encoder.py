"""Frozen transformer slide encoder.

Patch features are projected to the model width, a frozen [CLS] token is
prepended, and the encoder's layers are exposed in blocks so an adapter can
interleave with them. Weights never receive gradients; a content digest
makes that checkable.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import torch
from torch import Tensor, nn

from .numerics import (AttentionParams, DimensionError, NumericError,
                       attention, check_finite, gelu, layer_norm, linear)


@dataclass
class FeatureBag:
    """One patient's bag of patch feature vectors."""

    patient_id: str
    features: Tensor  # (N_img, D_img)
    slide_ids: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise DimensionError("feature bag must be (N_img >= 1, D_img)")
        check_finite(self.features, f"feature bag {self.patient_id}")


@dataclass
class EncoderConfig:
    d_model: int = 64
    n_layers: int = 6
    n_blocks: int = 3
    n_heads: int = 4
    ff_dim: int = 128
    attention_mode: str = "dense"  # dense | dilated
    segment_lengths: list[int] = field(default_factory=list)
    dilation_ratios: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.n_layers % self.n_blocks != 0:
            raise ValueError(
                f"n_layers {self.n_layers} not divisible by n_blocks {self.n_blocks}")
        if self.attention_mode not in ("dense", "dilated"):
            raise ValueError(f"unknown attention_mode {self.attention_mode!r}")
        if self.attention_mode == "dilated":
            if not self.segment_lengths or \
                    len(self.segment_lengths) != len(self.dilation_ratios):
                raise ValueError("dilated mode needs equal-length segment/ratio lists")
            for s, r in zip(self.segment_lengths, self.dilation_ratios):
                if s < 1:
                    raise ValueError("segment lengths must be >= 1")
                if s % r != 0:
                    raise ValueError(f"ratio {r} does not divide segment length {s}")

    @property
    def layers_per_block(self) -> int:
        return self.n_layers // self.n_blocks


class FrozenEncoder(nn.Module):
    """Immutable slide-encoder weights plus the [CLS] token and patch projection."""

    def __init__(self, cfg: EncoderConfig, d_img: int, seed: int) -> None:
        super().__init__()
        self.cfg = cfg
        self.d_img = d_img
        self.seed = seed
        gen = torch.Generator().manual_seed(seed)
        d = cfg.d_model
        scale = 1.0 / d ** 0.5

        def uni(*shape) -> nn.Parameter:
            return nn.Parameter(torch.empty(*shape).uniform_(-scale, scale, generator=gen))

        self.patch_proj_w = uni(d_img, d)
        self.patch_proj_b = nn.Parameter(torch.zeros(d))
        self.cls_token = uni(1, d)
        self.layers = nn.ModuleList()
        for i in range(cfg.n_layers):
            layer = nn.Module()
            layer.ln1_g = nn.Parameter(torch.ones(d))
            layer.ln1_b = nn.Parameter(torch.zeros(d))
            layer.attn = AttentionParams(d, cfg.n_heads, generator=gen)
            layer.ln2_g = nn.Parameter(torch.ones(d))
            layer.ln2_b = nn.Parameter(torch.zeros(d))
            layer.ff_w1 = uni(d, cfg.ff_dim)
            layer.ff_b1 = nn.Parameter(torch.zeros(cfg.ff_dim))
            layer.ff_w2 = uni(cfg.ff_dim, d)
            layer.ff_b2 = nn.Parameter(torch.zeros(d))
            self.layers.append(layer)
        for p in self.parameters():
            p.requires_grad_(False)

    def content_digest(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.named_parameters()):
            h.update(name.encode("utf-8"))
            h.update(p.detach().to(torch.float32).numpy().tobytes())
        return h.hexdigest()


def init_frozen(cfg: EncoderConfig, d_img: int, seed: int) -> FrozenEncoder:
    """Seeded stand-in for pre-trained weights; deterministic per seed."""
    return FrozenEncoder(cfg, d_img, seed)


def embed_patches(bag: FeatureBag, frozen: FrozenEncoder) -> Tensor:
    if bag.features.shape[1] != frozen.d_img:
        raise DimensionError(
            f"bag width {bag.features.shape[1]} != encoder D_img {frozen.d_img}")
    return linear(bag.features, frozen.patch_proj_w, frozen.patch_proj_b)


def prepend_cls(f_img: Tensor, frozen: FrozenEncoder) -> Tensor:
    if f_img.shape[1] != frozen.cfg.d_model:
        raise DimensionError("prepend_cls: width mismatch")
    if getattr(f_img, "_has_cls", False):
        raise ValueError("prepend_cls: sequence already carries a [CLS] row")
    out = torch.cat([frozen.cls_token, f_img], dim=0)
    out._has_cls = True
    return out


def dilated_mask(n: int, segment_len: int, ratio: int) -> Tensor:
    """Boolean attention mask for segment-dilated attention.

    Positions are split into segments of `segment_len`; within a segment,
    positions sharing a stride-`ratio` residue attend among themselves.
    Row/column 0 is the [CLS] position and participates everywhere.
    """
    if segment_len < 1:
        raise ValueError("segment_len must be >= 1")
    if segment_len % ratio != 0:
        raise ValueError(f"ratio {ratio} does not divide segment length {segment_len}")
    idx = torch.arange(n)
    same_segment = (idx[:, None] // segment_len) == (idx[None, :] // segment_len)
    same_residue = (idx[:, None] % ratio) == (idx[None, :] % ratio)
    mask = same_segment & same_residue
    mask[0, :] = True
    mask[:, 0] = True
    return mask


def dilated_attention(f: Tensor, segment_len: int, ratio: int,
                      params: AttentionParams) -> tuple[Tensor, Tensor]:
    mask = dilated_mask(f.shape[0], segment_len, ratio)
    return attention(f, f, params, mask=mask)


def _layer_mask(cfg: EncoderConfig, layer_idx: int, n: int) -> Tensor | None:
    if cfg.attention_mode == "dense":
        return None
    k = layer_idx % len(cfg.segment_lengths)
    return dilated_mask(n, cfg.segment_lengths[k], cfg.dilation_ratios[k])


def block_forward(f: Tensor, block_idx: int, frozen: FrozenEncoder,
                  call_log: list[int] | None = None,
                  trace: dict | None = None) -> Tensor:
    """Run one block of pre-norm transformer layers (attention + feedforward)."""
    cfg = frozen.cfg
    if not 0 <= block_idx < cfg.n_blocks:
        raise ValueError(f"block_idx {block_idx} outside 0..{cfg.n_blocks - 1}")
    n = f.shape[0]
    first = block_idx * cfg.layers_per_block
    for li in range(first, first + cfg.layers_per_block):
        layer = frozen.layers[li]
        normed = layer_norm(f, layer.ln1_g, layer.ln1_b)
        attn_out, weights = attention(normed, normed, layer.attn,
                                      mask=_layer_mask(cfg, li, n))
        f = f + attn_out
        normed = layer_norm(f, layer.ln2_g, layer.ln2_b)
        ff = linear(gelu(linear(normed, layer.ff_w1, layer.ff_b1)),
                    layer.ff_w2, layer.ff_b2)
        f = f + ff
        if not torch.isfinite(f).all():
            raise NumericError(f"non-finite activations after encoder layer {li}")
        if call_log is not None:
            call_log.append(li)
        if trace is not None:
            trace.setdefault("encoder_self_attention", {})[li] = weights.detach()
    return f


def encode_without_adapter(bag: FeatureBag, frozen: FrozenEncoder) -> Tensor:
    """Plain frozen-encoder run; returns the final [CLS] row (the baseline z_img)."""
    f = prepend_cls(embed_patches(bag, frozen), frozen)
    for b in range(frozen.cfg.n_blocks):
        f = block_forward(f, b, frozen)
    return f[0]
