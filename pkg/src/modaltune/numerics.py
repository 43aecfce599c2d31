"""Differentiable kernels shared by every model component.

All ops operate on 2-D torch tensors (rows = tokens, cols = features) and
are written so that analytic gradients can be verified against central
finite differences via :func:`grad_check`. Default precision is float32
for training; float64 is used when verifying gradients.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn


class DimensionError(ValueError):
    """Raised when tensor shapes do not satisfy an op's contract."""


class NumericError(RuntimeError):
    """Raised when a non-finite value shows up where finiteness is required."""


def tensor2d(data, rows: int | None = None, cols: int | None = None,
             dtype: torch.dtype = torch.float32, requires_grad: bool = False) -> Tensor:
    """Build a validated 2-D tensor (row-major data, finite entries)."""
    t = torch.as_tensor(data, dtype=dtype)
    if rows is not None and cols is not None:
        if t.numel() != rows * cols:
            raise DimensionError(f"data length {t.numel()} != rows*cols = {rows * cols}")
        t = t.reshape(rows, cols)
    if t.ndim != 2:
        raise DimensionError(f"expected a 2-D tensor, got shape {tuple(t.shape)}")
    check_finite(t, "tensor2d input")
    if requires_grad:
        t.requires_grad_(True)
    return t


def check_finite(t: Tensor, where: str) -> Tensor:
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite values in {where}")
    return t


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """y = x @ weight + bias, with weight of shape (in_dim, out_dim)."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(
            f"linear: input width {x.shape[-1]} != weight in-dim {weight.shape[0]}")
    if bias is not None and x.ndim == 2:
        return torch.addmm(bias, x, weight)
    y = x @ weight
    if bias is not None:
        y = y + bias
    return y


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be > 0")
    return torch.nn.functional.layer_norm(x, (x.shape[-1],), gain, bias, eps)


def softmax(v: Tensor, dim: int = -1) -> Tensor:
    """Shift-invariant softmax (max subtracted before exponentiation)."""
    shifted = v - v.max(dim=dim, keepdim=True).values
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    return torch.nn.functional.gelu(x, approximate="tanh")


class AttentionParams(nn.Module):
    """Multi-head attention projections (square, bias-free).

    n_heads * head_dim must equal the model width; the four projections map
    width -> width. Bias-free per the standard scaled-dot-product
    formulation.
    """

    def __init__(self, dim: int, n_heads: int,
                 generator: torch.Generator | None = None,
                 init_scale: float | None = None,
                 dtype: torch.dtype = torch.float32) -> None:
        super().__init__()
        if dim % n_heads != 0:
            raise DimensionError(f"width {dim} not divisible by n_heads {n_heads}")
        self.dim = dim
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        scale = (1.0 / math.sqrt(dim)) if init_scale is None else init_scale
        for name in ("w_q", "w_k", "w_v", "w_o"):
            w = torch.empty(dim, dim, dtype=dtype)
            if generator is None:
                w.zero_()
            else:
                w.uniform_(-scale, scale, generator=generator)
            self.register_parameter(name, nn.Parameter(w))

    def forward(self, q_in: Tensor, kv_in: Tensor,
                mask: Tensor | None = None) -> tuple[Tensor, Tensor]:
        return attention(q_in, kv_in, self, mask=mask)


def attention(q_in: Tensor, kv_in: Tensor, params: AttentionParams,
              mask: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Scaled dot-product multi-head attention with output projection.

    q_in: (N_q, D), kv_in: (N_k, D). Returns the projected output (N_q, D)
    and the per-head attention weights (n_heads, N_q, N_k). `mask` is an
    optional boolean (N_q, N_k) matrix; False entries receive zero weight.
    """
    if q_in.shape[-1] != params.dim or kv_in.shape[-1] != params.dim:
        raise DimensionError(
            f"attention: widths {q_in.shape[-1]}/{kv_in.shape[-1]} != {params.dim}")
    n_q, n_k = q_in.shape[0], kv_in.shape[0]
    h, d_h = params.n_heads, params.head_dim

    def split(t: Tensor, n: int) -> Tensor:
        return (t.reshape(n, h, d_h)).permute(1, 0, 2)  # (h, n, d_h)

    q = split(q_in @ params.w_q, n_q)
    k = split(kv_in @ params.w_k, n_k)
    v = split(kv_in @ params.w_v, n_k)
    scores = (q @ k.transpose(-1, -2)) / math.sqrt(d_h)  # (h, N_q, N_k)
    if mask is not None:
        scores = scores.masked_fill(~mask, float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    out = weights @ v  # (h, N_q, d_h)
    out = out.permute(1, 0, 2).reshape(n_q, h * d_h)
    return out @ params.w_o, weights


def stable_stream_seed(*parts) -> int:
    """Stable 63-bit seed from a tuple of ints/strings (replayable streams)."""
    h = hashlib.sha256()
    for p in parts:
        h.update(str(p).encode("utf-8"))
        h.update(b"\0")
    return int.from_bytes(h.digest()[:8], "little") & (2**63 - 1)


@dataclass
class DropoutRng:
    """Counter-based dropout stream: mask depends only on (seed, layer, step)."""

    seed: int
    step: int = 0

    def mask(self, shape: tuple[int, ...], rate: float, layer_id: str,
             dtype: torch.dtype) -> Tensor:
        gen = torch.Generator()
        gen.manual_seed(stable_stream_seed(self.seed, layer_id, self.step))
        keep = (torch.rand(shape, generator=gen, dtype=torch.float32) >= rate)
        return keep.to(dtype) / (1.0 - rate)


def dropout(x: Tensor, rate: float, layer_id: str,
            rng: DropoutRng | None) -> Tensor:
    """Inverted dropout; identity when rng is None (eval mode) or rate == 0."""
    if rng is None or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate {rate} outside [0, 1)")
    return x * rng.mask(tuple(x.shape), rate, layer_id, x.dtype)


class MLPBlock(nn.Module):
    """linear -> GELU -> dropout -> linear, with configurable hidden ratio."""

    def __init__(self, dim: int, hidden_ratio: float, dropout_rate: float,
                 out_dim: int | None = None, layer_id: str = "mlp",
                 generator: torch.Generator | None = None,
                 dtype: torch.dtype = torch.float32) -> None:
        super().__init__()
        if hidden_ratio <= 0:
            raise ValueError("hidden_ratio must be > 0")
        hidden = max(1, int(round(dim * hidden_ratio)))
        out_dim = dim if out_dim is None else out_dim
        self.dropout_rate = dropout_rate
        self.layer_id = layer_id
        scale = 1.0 / math.sqrt(dim)

        def init(r: int, c: int) -> nn.Parameter:
            w = torch.empty(r, c, dtype=dtype)
            if generator is None:
                w.zero_()
            else:
                w.uniform_(-scale, scale, generator=generator)
            return nn.Parameter(w)

        self.w1 = init(dim, hidden)
        self.b1 = nn.Parameter(torch.zeros(hidden, dtype=dtype))
        self.w2 = init(hidden, out_dim)
        self.b2 = nn.Parameter(torch.zeros(out_dim, dtype=dtype))

    def forward(self, x: Tensor, rng: DropoutRng | None = None) -> Tensor:
        h = gelu(linear(x, self.w1, self.b1))
        h = dropout(h, self.dropout_rate, self.layer_id, rng)
        return linear(h, self.w2, self.b2)


@dataclass
class GradReport:
    """Result of a finite-difference gradient check."""

    max_rel_err: float
    per_param: dict[str, float]

    def ok(self, tol: float) -> bool:
        return self.max_rel_err < tol


def grad_check(f, params: dict[str, Tensor], eps: float = 1e-5) -> GradReport:
    """Compare analytic gradients of scalar f() against central differences.

    `params` maps names to leaf tensors with requires_grad=True that f reads.
    Relative error is computed per parameter block as
    max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-12),
    which keeps the comparison meaningful when individual entries vanish.
    """
    if eps <= 0:
        raise ValueError("grad_check eps must be > 0")
    for name, p in params.items():
        if not p.requires_grad:
            raise ValueError(f"parameter {name!r} does not require grad")

    value = f()
    if value.ndim != 0:
        raise ValueError("grad_check expects a scalar-valued computation")
    if not torch.isfinite(value):
        raise NumericError("grad_check: f() returned a non-finite value")
    grads = torch.autograd.grad(value, list(params.values()), allow_unused=True)

    # Central differences cannot resolve gradients below the rounding noise of
    # two f evaluations; differences under this floor count as agreement.
    machine_eps = torch.finfo(value.dtype).eps
    fd_floor = 50.0 * machine_eps * max(1.0, abs(float(value.detach()))) / (2.0 * eps)

    per_param: dict[str, float] = {}
    for (name, p), g in zip(params.items(), grads):
        analytic = torch.zeros_like(p) if g is None else g.detach()
        numeric = torch.zeros_like(p)
        flat = p.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            f_plus = float(f().detach())
            flat[i] = orig - eps
            f_minus = float(f().detach())
            flat[i] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise NumericError(f"grad_check: non-finite f while perturbing {name}")
            nflat[i] = (f_plus - f_minus) / (2.0 * eps)
        diff = (analytic - numeric).abs().max().item()
        scale = max(analytic.abs().max().item(), numeric.abs().max().item(), 1e-12)
        per_param[name] = 0.0 if diff <= fd_floor else diff / scale
    worst = max(per_param.values()) if per_param else 0.0
    return GradReport(max_rel_err=worst, per_param=per_param)
