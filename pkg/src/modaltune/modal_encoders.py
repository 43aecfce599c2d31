"""Encoders that turn extra modalities into width-D token sets.

Transcriptomics goes pathway-masked MLP -> mixer -> compression; clinical
tabular data goes through a small MLP producing a single token. Encoded
tokens from all modalities are concatenated row-wise.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor, nn

from .numerics import (DimensionError, DropoutRng, MLPBlock, check_finite,
                       gelu, layer_norm, linear)


@dataclass
class PathwayMap:
    """Sparse binary gene -> pathway membership."""

    membership: np.ndarray  # (N_gp, N_g) of {0,1}
    pathway_names: list[str]

    def __post_init__(self) -> None:
        self.membership = np.asarray(self.membership, dtype=np.float32)
        if self.membership.ndim != 2:
            raise DimensionError("membership must be (N_gp, N_g)")
        if not np.isin(self.membership, (0.0, 1.0)).all():
            raise ValueError("membership entries must be 0 or 1")
        empty = np.where(self.membership.sum(axis=1) == 0)[0]
        if empty.size:
            names = [self.pathway_names[i] for i in empty]
            raise ValueError(f"pathways with no member genes: {names}")
        if len(self.pathway_names) != self.membership.shape[0]:
            raise DimensionError("pathway_names length != membership rows")

    @property
    def n_pathways(self) -> int:
        return self.membership.shape[0]

    @property
    def n_genes(self) -> int:
        return self.membership.shape[1]

    @classmethod
    def from_csv(cls, path, gene_names: list[str]) -> "PathwayMap":
        """Load `pathway,gene` membership pairs against a known gene order."""
        gene_idx = {g: i for i, g in enumerate(gene_names)}
        pathways: dict[str, set[int]] = {}
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["pathway", "gene"]:
                raise ValueError(f"pathway map header must be pathway,gene, got {reader.fieldnames}")
            for row in reader:
                gene = row["gene"]
                if gene not in gene_idx:
                    raise ValueError(f"unknown gene {gene!r} in pathway map")
                pathways.setdefault(row["pathway"], set()).add(gene_idx[gene])
        names = sorted(pathways)
        mem = np.zeros((len(names), len(gene_names)), dtype=np.float32)
        for p, name in enumerate(names):
            for g in pathways[name]:
                mem[p, g] = 1.0
        return cls(membership=mem, pathway_names=names)

    def to_csv(self, path, gene_names: list[str]) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["pathway", "gene"])
            for p, name in enumerate(self.pathway_names):
                for g in np.where(self.membership[p] > 0)[0]:
                    writer.writerow([name, gene_names[g]])


@dataclass
class ExpressionVector:
    patient_id: str
    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float32)
        if not np.isfinite(self.values).all():
            raise ValueError(f"non-finite expression for {self.patient_id}")


@dataclass
class ClinicalFeatures:
    patient_id: str
    values: np.ndarray
    presence_mask: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.presence_mask is None:
            self.presence_mask = np.ones_like(self.values)
        self.presence_mask = np.asarray(self.presence_mask, dtype=np.float32)
        if self.presence_mask.shape != self.values.shape:
            raise DimensionError("presence mask shape != values shape")
        if np.any(self.values[self.presence_mask == 0] != 0):
            raise ValueError("masked-out clinical entries must be zero")


class SparseMLP(nn.Module):
    """Pathway-masked MLP: each pathway row sees only its member genes.

    depth=1 is a single masked linear layer (hidden == d_out); depth=2 adds
    a per-row dense layer after a GELU. The mask multiplies the weight in
    the forward pass, so masked entries get exactly zero gradient.
    """

    def __init__(self, pathway_map: PathwayMap, d_out: int, hidden: int = 8,
                 depth: int = 2, generator: torch.Generator | None = None) -> None:
        super().__init__()
        if depth not in (1, 2):
            raise ValueError("SparseMLP depth must be 1 or 2")
        self.depth = depth
        self.n_pathways = pathway_map.n_pathways
        h = d_out if depth == 1 else hidden
        self.hidden = h
        n_g = pathway_map.n_genes
        mask = torch.from_numpy(pathway_map.membership)  # (N_gp, N_g)
        self.register_buffer("mask", mask.repeat_interleave(h, dim=0))  # (N_gp*h, N_g)
        scale = 1.0 / max(1.0, float(n_g)) ** 0.5
        w1 = torch.empty(self.n_pathways * h, n_g)
        if generator is None:
            w1.zero_()
        else:
            w1.uniform_(-scale, scale, generator=generator)
        self.w1 = nn.Parameter(w1)
        self.b1 = nn.Parameter(torch.zeros(self.n_pathways * h))
        if depth == 2:
            w2 = torch.empty(h, d_out)
            if generator is None:
                w2.zero_()
            else:
                w2.uniform_(-(1.0 / h ** 0.5), 1.0 / h ** 0.5, generator=generator)
            self.w2 = nn.Parameter(w2)
            self.b2 = nn.Parameter(torch.zeros(d_out))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 1 or x.shape[0] != self.mask.shape[1]:
            raise DimensionError("expression length does not match pathway map")
        h = (self.w1 * self.mask) @ x + self.b1
        h = h.reshape(self.n_pathways, self.hidden)
        if self.depth == 1:
            return h
        return linear(gelu(h), self.w2, self.b2)


class PathwayMixer(nn.Module):
    """Token/channel-mixing layers over pathway rows, then projection to D."""

    def __init__(self, n_pathways: int, d_gp: int, d_model: int,
                 n_layers: int = 3, expansion: float = 0.5, dropout: float = 0.25,
                 generator: torch.Generator | None = None) -> None:
        super().__init__()
        self.n_layers = n_layers
        self.blocks = nn.ModuleList()
        for i in range(n_layers):
            blk = nn.Module()
            blk.ln_token_g = nn.Parameter(torch.ones(d_gp))
            blk.ln_token_b = nn.Parameter(torch.zeros(d_gp))
            blk.token_mlp = MLPBlock(n_pathways, expansion, dropout,
                                     layer_id=f"mixer{i}.token", generator=generator)
            blk.ln_chan_g = nn.Parameter(torch.ones(d_gp))
            blk.ln_chan_b = nn.Parameter(torch.zeros(d_gp))
            blk.chan_mlp = MLPBlock(d_gp, expansion, dropout,
                                    layer_id=f"mixer{i}.channel", generator=generator)
            self.blocks.append(blk)
        scale = 1.0 / d_gp ** 0.5
        w = torch.empty(d_gp, d_model)
        if generator is None:
            w.zero_()
        else:
            w.uniform_(-scale, scale, generator=generator)
        self.proj_w = nn.Parameter(w)
        self.proj_b = nn.Parameter(torch.zeros(d_model))

    def forward(self, f_gp: Tensor, rng: DropoutRng | None = None) -> Tensor:
        x = f_gp
        for blk in self.blocks:
            normed = layer_norm(x, blk.ln_token_g, blk.ln_token_b)
            x = x + blk.token_mlp(normed.transpose(0, 1), rng).transpose(0, 1)
            normed = layer_norm(x, blk.ln_chan_g, blk.ln_chan_b)
            x = x + blk.chan_mlp(normed, rng)
        return linear(x, self.proj_w, self.proj_b)


class PathwayCompressor(nn.Module):
    """Linear map across the pathway axis: (N_gp, D) -> (N_t, D)."""

    def __init__(self, n_pathways: int, n_tokens: int,
                 generator: torch.Generator | None = None) -> None:
        super().__init__()
        scale = 1.0 / n_pathways ** 0.5
        w = torch.empty(n_tokens, n_pathways)
        if generator is None:
            w.zero_()
        else:
            w.uniform_(-scale, scale, generator=generator)
        self.weight = nn.Parameter(w)

    def forward(self, f: Tensor) -> Tensor:
        return self.weight @ f


class TabularEncoder(nn.Module):
    """2-layer MLP turning one clinical record into a single width-D token."""

    def __init__(self, n_features: int, d_model: int,
                 generator: torch.Generator | None = None) -> None:
        super().__init__()
        self.n_features = n_features
        scale = 1.0 / max(1.0, float(n_features)) ** 0.5
        w1 = torch.empty(n_features, d_model)
        w2 = torch.empty(d_model, d_model)
        if generator is None:
            w1.zero_()
            w2.zero_()
        else:
            w1.uniform_(-scale, scale, generator=generator)
            w2.uniform_(-(1.0 / d_model ** 0.5), 1.0 / d_model ** 0.5, generator=generator)
        self.w1 = nn.Parameter(w1)
        self.b1 = nn.Parameter(torch.zeros(d_model))
        self.w2 = nn.Parameter(w2)
        self.b2 = nn.Parameter(torch.zeros(d_model))

    def forward(self, record: ClinicalFeatures) -> Tensor:
        x = torch.from_numpy(record.values * record.presence_mask).to(self.w1.dtype)
        if x.shape[0] != self.n_features:
            raise DimensionError("clinical feature length mismatch")
        h = gelu(x @ self.w1 + self.b1)
        return (h @ self.w2 + self.b2).reshape(1, -1)


def concat_modalities(tokens: list[Tensor]) -> Tensor:
    """Row-stack per-modality token sets in their declared order."""
    if not tokens:
        raise ValueError("concat_modalities: empty modality list")
    width = tokens[0].shape[1]
    for t in tokens:
        if t.shape[1] != width:
            raise DimensionError("modal token widths differ")
    return torch.cat(tokens, dim=0)


class ModalEncoderStack(nn.Module):
    """Transcriptomics (and optionally clinical) encoders feeding the adapter."""

    def __init__(self, pathway_map: PathwayMap, d_gp: int, d_model: int,
                 n_tokens: int, smlp_hidden: int = 8, smlp_depth: int = 2,
                 mixer_layers: int = 3, mixer_expansion: float = 0.5,
                 mixer_dropout: float = 0.25, n_clinical: int = 0,
                 generator: torch.Generator | None = None) -> None:
        super().__init__()
        self.n_tokens = n_tokens
        self.smlp = SparseMLP(pathway_map, d_gp, hidden=smlp_hidden,
                              depth=smlp_depth, generator=generator)
        self.mixer = PathwayMixer(pathway_map.n_pathways, d_gp, d_model,
                                  n_layers=mixer_layers, expansion=mixer_expansion,
                                  dropout=mixer_dropout, generator=generator)
        self.compressor = PathwayCompressor(pathway_map.n_pathways, n_tokens,
                                            generator=generator)
        self.tabular = (TabularEncoder(n_clinical, d_model, generator=generator)
                        if n_clinical else None)

    @property
    def total_tokens(self) -> int:
        return self.n_tokens + (1 if self.tabular is not None else 0)

    def forward(self, expression: Tensor,
                clinical: ClinicalFeatures | None = None,
                rng: DropoutRng | None = None) -> Tensor:
        f_gp = self.smlp(expression)
        f_gp = self.mixer(f_gp, rng)
        parts = [self.compressor(f_gp)]
        if self.tabular is not None:
            if clinical is None:
                raise ValueError("clinical encoder configured but no record given")
            parts.append(self.tabular(clinical))
        out = concat_modalities(parts)
        return check_finite(out, "modal encoder output")
