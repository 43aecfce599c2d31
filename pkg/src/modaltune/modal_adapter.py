"""Cross-attention adapter interleaved with the frozen slide encoder.

Per encoder block, an injector adds gated multi-modal context to the image
stream and an extractor pulls post-block image features back into the modal
tokens. Task prompts condition the modal stream; the fused output is one
vector per task.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import Tensor, nn

from .modal_encoders import ClinicalFeatures, ModalEncoderStack
from .numerics import (AttentionParams, DropoutRng, MLPBlock, attention,
                       check_finite, layer_norm, linear)
from .slide_encoder import (FeatureBag, FrozenEncoder, block_forward,
                            embed_patches, prepend_cls)


@dataclass
class AdapterConfig:
    d_model: int = 64
    n_blocks: int = 3
    n_heads: int = 4
    ff_ratio: float = 0.25
    dropout: float = 0.1
    d_final: int = 32
    n_tasks: int = 3
    fusion_ratio: float = 1.0  # hidden width of the output-fusion MLP, as ratio of D
    single_modal: bool = False
    model_side_projector_dim: int | None = None  # set to D_text for model-side mode


class TaskPromptBank(nn.Module):
    """T learnable 1xD prompt vectors, one per downstream task."""

    def __init__(self, n_tasks: int, d_model: int,
                 generator: torch.Generator | None = None) -> None:
        super().__init__()
        self.n_tasks = n_tasks
        scale = 1.0 / d_model ** 0.5
        p = torch.empty(n_tasks, d_model)
        if generator is None:
            p.zero_()
        else:
            p.uniform_(-scale, scale, generator=generator)
        self.prompts = nn.Parameter(p)

    def prompt(self, task_idx: int) -> Tensor:
        if not 1 <= task_idx <= self.n_tasks:
            raise ValueError(f"task index {task_idx} outside 1..{self.n_tasks}")
        return self.prompts[task_idx - 1].reshape(1, -1)


def attach_task_prompt(f_mm0: Tensor, task_idx: int, bank: TaskPromptBank) -> Tensor:
    """Append the task prompt as the final row of the modal token set."""
    return torch.cat([f_mm0, bank.prompt(task_idx)], dim=0)


class InjectorBlock(nn.Module):
    """Gated cross-attention from modal tokens into the image stream."""

    def __init__(self, d_model: int, n_heads: int,
                 generator: torch.Generator | None = None) -> None:
        super().__init__()
        self.gamma = nn.Parameter(torch.zeros(d_model))
        self.attn = AttentionParams(d_model, n_heads, generator=generator)
        self.ln_q_g = nn.Parameter(torch.ones(d_model))
        self.ln_q_b = nn.Parameter(torch.zeros(d_model))
        self.ln_kv_g = nn.Parameter(torch.ones(d_model))
        self.ln_kv_b = nn.Parameter(torch.zeros(d_model))


def inject(f_img: Tensor, f_mm: Tensor, block: InjectorBlock) -> tuple[Tensor, Tensor]:
    """Image stream update: F_img + gamma * CrossAttn(LN(F_img), LN(F_mm))."""
    q = layer_norm(f_img, block.ln_q_g, block.ln_q_b)
    kv = layer_norm(f_mm, block.ln_kv_g, block.ln_kv_b)
    ctx, weights = attention(q, kv, block.attn)
    return f_img + block.gamma * ctx, weights


class ExtractorBlock(nn.Module):
    """Cross-attention from the image stream back into modal tokens."""

    def __init__(self, d_model: int, n_heads: int, ff_ratio: float,
                 dropout: float, layer_id: str,
                 generator: torch.Generator | None = None) -> None:
        super().__init__()
        self.cross = AttentionParams(d_model, n_heads, generator=generator)
        self.ln_q_g = nn.Parameter(torch.ones(d_model))
        self.ln_q_b = nn.Parameter(torch.zeros(d_model))
        self.ln_kv_g = nn.Parameter(torch.ones(d_model))
        self.ln_kv_b = nn.Parameter(torch.zeros(d_model))
        self.ln_mlp_g = nn.Parameter(torch.ones(d_model))
        self.ln_mlp_b = nn.Parameter(torch.zeros(d_model))
        self.mlp = MLPBlock(d_model, ff_ratio, dropout,
                            layer_id=f"{layer_id}.mlp", generator=generator)
        self.self_attn = AttentionParams(d_model, n_heads, generator=generator)
        # Start with near-uniform attention in the modal stream: input-dependent
        # mixing is then learned rather than imposed by the random init, which
        # otherwise scrambles modal information before training begins.
        with torch.no_grad():
            for attn in (self.cross, self.self_attn):
                attn.w_q.mul_(0.1)
                attn.w_k.mul_(0.1)


def extract(f_mm: Tensor, f_img_next: Tensor, block: ExtractorBlock,
            rng: DropoutRng | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """Modal stream update: residual cross-attention, then MLP + self-attention."""
    q = layer_norm(f_mm, block.ln_q_g, block.ln_q_b)
    kv = layer_norm(f_img_next, block.ln_kv_g, block.ln_kv_b)
    ctx, cross_weights = attention(q, kv, block.cross)
    f_hat = f_mm + ctx
    pre_self = f_hat + block.mlp(layer_norm(f_hat, block.ln_mlp_g, block.ln_mlp_b), rng)
    out, self_weights = attention(pre_self, pre_self, block.self_attn)
    return out, cross_weights, self_weights


@dataclass
class AdapterOutput:
    z_img: Tensor
    z_task: Tensor
    z_mm: Tensor
    z_comb: Tensor
    attention_trace: dict | None = None


class ModalAdapter(nn.Module):
    """All trainable state: injectors, extractors, prompts, encoders, fusion."""

    def __init__(self, cfg: AdapterConfig,
                 modal_stack: ModalEncoderStack | None, seed: int) -> None:
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(seed)
        d = cfg.d_model
        if cfg.single_modal:
            n_tokens = modal_stack.total_tokens if modal_stack is not None else 0
            if n_tokens <= 0:
                raise ValueError("single_modal mode needs a token count (via modal_stack)")
            scale = 1.0 / d ** 0.5
            self.modal_tokens = nn.Parameter(
                torch.empty(n_tokens, d).uniform_(-scale, scale, generator=gen))
            self.modal_stack = None
        else:
            if modal_stack is None:
                raise ValueError("modal_stack required unless single_modal is set")
            self.modal_stack = modal_stack
            self.modal_tokens = None
        self.prompt_bank = TaskPromptBank(cfg.n_tasks, d, generator=gen)
        self.injectors = nn.ModuleList(
            [InjectorBlock(d, cfg.n_heads, generator=gen) for _ in range(cfg.n_blocks)])
        self.extractors = nn.ModuleList(
            [ExtractorBlock(d, cfg.n_heads, cfg.ff_ratio, cfg.dropout,
                            layer_id=f"extract{i}", generator=gen)
             for i in range(cfg.n_blocks)])
        self.fuse_ln_g = nn.Parameter(torch.ones(d))
        self.fuse_ln_b = nn.Parameter(torch.zeros(d))
        self.fuse_mlp = MLPBlock(d, cfg.fusion_ratio, cfg.dropout,
                                 out_dim=cfg.d_final, layer_id="fusion.mlp",
                                 generator=gen)
        if cfg.model_side_projector_dim is not None:
            scale = 1.0 / cfg.d_final ** 0.5
            self.out_proj = nn.Parameter(
                torch.empty(cfg.d_final, cfg.model_side_projector_dim)
                .uniform_(-scale, scale, generator=gen))
        else:
            self.out_proj = None

    @property
    def output_dim(self) -> int:
        if self.out_proj is not None:
            return self.out_proj.shape[1]
        return self.cfg.d_final

    def modal_tokens_for(self, expression: Tensor | None,
                         clinical: ClinicalFeatures | None,
                         rng: DropoutRng | None) -> Tensor:
        if self.cfg.single_modal:
            return self.modal_tokens
        if expression is None:
            raise ValueError("expression input required in multi-modal mode")
        return self.modal_stack(expression, clinical, rng)

    def fuse(self, z_img: Tensor, z_mm: Tensor, z_task: Tensor,
             rng: DropoutRng | None = None) -> Tensor:
        return fuse_outputs(z_img, z_mm, z_task, self, rng)

    def forward(self, bag: FeatureBag, task_idx: int, frozen: FrozenEncoder,
                expression: Tensor | None = None,
                clinical: ClinicalFeatures | None = None,
                rng: DropoutRng | None = None,
                trace: dict | None = None,
                modal_tokens_override: Tensor | None = None) -> AdapterOutput:
        f_img = prepend_cls(embed_patches(bag, frozen), frozen)
        if modal_tokens_override is not None:
            f_mm0 = modal_tokens_override
        else:
            f_mm0 = self.modal_tokens_for(expression, clinical, rng)
        f_mm = attach_task_prompt(f_mm0, task_idx, self.prompt_bank)
        for i in range(self.cfg.n_blocks):
            f_hat, inj_w = inject(f_img, f_mm, self.injectors[i])
            f_img = block_forward(f_hat, i, frozen, trace=trace)
            f_mm, cross_w, self_w = extract(f_mm, f_img, self.extractors[i], rng)
            if trace is not None:
                trace.setdefault("injector", {})[i] = inj_w.detach()
                trace.setdefault("extractor_cross", {})[i] = cross_w.detach()
                trace.setdefault("extractor_self", {})[i] = self_w.detach()
        z_img = f_img[0]
        z_task = f_mm[-1]
        z_mm = f_mm[:-1].mean(dim=0)
        z_comb = self.fuse(z_img, z_mm, z_task, rng)
        check_finite(z_comb, f"adapter output (task {task_idx})")
        return AdapterOutput(z_img=z_img, z_task=z_task, z_mm=z_mm,
                             z_comb=z_comb, attention_trace=trace)


def fuse_outputs(z_img: Tensor, z_mm: Tensor, z_task: Tensor,
                 adapter: ModalAdapter, rng: DropoutRng | None = None) -> Tensor:
    """Combine the three task-tailored vectors: MLP(LN(z_img + z_mm + z_task))."""
    s = (z_img + z_mm + z_task).reshape(1, -1)
    out = adapter.fuse_mlp(layer_norm(s, adapter.fuse_ln_g, adapter.fuse_ln_b), rng)
    if adapter.out_proj is not None:
        out = linear(out, adapter.out_proj)
    return out.reshape(-1)


def single_modal_substitute(adapter: ModalAdapter, n_tokens: int,
                            seed: int = 0) -> ModalAdapter:
    """Swap the modal encoders for n_tokens freshly trainable token vectors."""
    gen = torch.Generator().manual_seed(seed)
    d = adapter.cfg.d_model
    scale = 1.0 / d ** 0.5
    adapter.modal_stack = None
    adapter.modal_tokens = nn.Parameter(
        torch.empty(n_tokens, d).uniform_(-scale, scale, generator=gen))
    adapter.cfg.single_modal = True
    return adapter


def trainable_parameter_count(adapter: ModalAdapter) -> int:
    """Effective trainable parameter count (masked S-MLP entries excluded)."""
    total = 0
    for name, p in adapter.named_parameters():
        if not p.requires_grad:
            continue
        if name.endswith("smlp.w1") and adapter.modal_stack is not None:
            total += int(adapter.modal_stack.smlp.mask.sum().item())
        else:
            total += p.numel()
    return total
