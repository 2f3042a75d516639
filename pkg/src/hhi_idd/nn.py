"""Tensor primitives, gradients and the Adam optimizer.

Tensors are 32-bit ``torch.Tensor`` objects and torch's dynamic autograd
tape records the forward pass. This module adds the pieces the denoiser
needs on top of that: shape-checked pointwise convolution, multi-head
attention with inspectable weights, layer norm, a gradient map that names
non-finite parameters, a hand-rolled Adam and a finite-difference gradient
checker.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import torch
from torch import nn

from .errors import ConfigError, NonFiniteError, ShapeError

log = logging.getLogger(__name__)

DTYPE = torch.float32


def check_finite(x: torch.Tensor, where: str) -> torch.Tensor:
    if not bool(torch.isfinite(x).all()):
        raise NonFiniteError(f"non-finite values produced by {where}")
    return x


def conv1d_pointwise(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Kernel-size-1 convolution: ``out[n,o,l] = sum_i w[o,i] x[n,i,l] + b[o]``."""
    if x.dim() != 3 or w.dim() != 2 or b.dim() != 1:
        raise ShapeError(f"conv1d_pointwise expects x[N,C,L], w[O,C], b[O]; got "
                         f"{tuple(x.shape)}, {tuple(w.shape)}, {tuple(b.shape)}")
    if x.shape[1] != w.shape[1] or w.shape[0] != b.shape[0]:
        raise ShapeError(f"channel mismatch: x has {x.shape[1]} channels, w is "
                         f"{tuple(w.shape)}, b is {tuple(b.shape)}")
    return torch.einsum("oi,nil->nol", w, x) + b[None, :, None]


def attention_weights(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    scale = 1.0 / math.sqrt(q.shape[-1])
    return torch.softmax(torch.matmul(q, k.transpose(-1, -2)) * scale, dim=-1)


def multi_head_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    heads: int,
    proj: Mapping[str, torch.Tensor],
    return_weights: bool = False,
):
    """Scaled dot-product attention over ``heads`` heads.

    ``q, k, v`` are ``[batch, tokens, dim]``. ``proj`` holds the input
    projections ``wq, bq, wk, bk, wv, bv`` and the output projection
    ``wo, bo`` (weights are ``[dim_out, dim_in]``).
    """
    if q.dim() != 3 or k.shape != v.shape or q.shape[0] != k.shape[0] or q.shape[2] != k.shape[2]:
        raise ShapeError(f"attention shapes disagree: q{tuple(q.shape)} k{tuple(k.shape)} v{tuple(v.shape)}")
    batch, n_q, dim = q.shape
    if heads < 1 or dim % heads:
        raise ConfigError(f"model dim {dim} is not divisible by {heads} heads")
    hd = dim // heads

    def split(x, w, b):
        y = torch.nn.functional.linear(x, w, b)
        return y.reshape(batch, x.shape[1], heads, hd).transpose(1, 2)

    qh = split(q, proj["wq"], proj["bq"])
    kh = split(k, proj["wk"], proj["bk"])
    vh = split(v, proj["wv"], proj["bv"])
    if return_weights:
        weights = attention_weights(qh, kh)  # [batch, heads, n_q, n_k]
        out = torch.matmul(weights, vh)
    else:
        # same arithmetic, fused kernel
        out = torch.nn.functional.scaled_dot_product_attention(qh, kh, vh)
    out = out.transpose(1, 2).reshape(batch, n_q, dim)
    out = torch.nn.functional.linear(out, proj["wo"], proj["bo"])
    if return_weights:
        return out, weights
    return out


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    if x.shape[-1] < 1 or gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm over last dim of {tuple(x.shape)} needs gain/bias of that size")
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps) * gain + bias


class PointwiseConv1d(nn.Module):
    def __init__(self, c_in: int, c_out: int, zero_init: bool = False):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(c_out, c_in))
        self.bias = nn.Parameter(torch.zeros(c_out))
        if zero_init:
            nn.init.zeros_(self.weight)
        else:
            nn.init.kaiming_normal_(self.weight)

    def forward(self, x):
        return conv1d_pointwise(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x):
        return layer_norm(x, self.gain, self.bias)


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"model dim {dim} is not divisible by {heads} heads")
        self.heads = heads
        bound = 1.0 / math.sqrt(dim)
        for name in ("q", "k", "v", "o"):
            w = nn.Parameter(torch.empty(dim, dim).uniform_(-bound, bound))
            setattr(self, "w" + name, w)
            setattr(self, "b" + name, nn.Parameter(torch.zeros(dim)))

    def projections(self):
        return {n: getattr(self, n) for n in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}

    def forward(self, x, return_weights=False):
        return multi_head_attention(x, x, x, self.heads, self.projections(), return_weights)


def backward(loss: torch.Tensor, params: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Gradients of a scalar ``loss`` w.r.t. every named parameter.

    Parameters the loss does not depend on get a zero gradient.
    """
    if loss.numel() != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    check_finite(loss, "loss")
    names = list(params)
    tensors = [params[n] for n in names]
    grads = torch.autograd.grad(loss.reshape(()), tensors, allow_unused=True)
    out = {}
    for name, p, g in zip(names, tensors, grads):
        g = torch.zeros_like(p) if g is None else g
        check_finite(g, f"backward of parameter {name!r}")
        out[name] = g
    return out


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def adam_step(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor], state: AdamState) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if not bool(torch.isfinite(g).all()):
            raise NonFiniteError(f"adam_step: gradient of parameter {name!r} contains NaN/Inf")
        if g.shape != params[name].shape:
            raise ShapeError(f"adam_step: gradient of {name!r} has shape {tuple(g.shape)}, "
                             f"parameter has {tuple(params[name].shape)}")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    with torch.no_grad():
        for name, g in grads.items():
            p = params[name]
            m = state.m.setdefault(name, torch.zeros_like(p))
            v = state.v.setdefault(name, torch.zeros_like(p))
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            p.sub_(state.lr * (m / c1) / (torch.sqrt(v / c2) + state.eps))
    return state


def grad_check(
    model: nn.Module,
    loss_fn: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor] = (),
    step: float = 1e-3,
    tolerance: float | None = None,
) -> float:
    """Compare autograd gradients against central finite differences.

    ``loss_fn(model, *inputs)`` must be deterministic. Both the analytic
    gradients and the finite differences are taken on a 64-bit copy, so
    parameters whose true gradient is zero (e.g. attention key biases) are
    not drowned in 32-bit rounding. The error of each parameter tensor is
    ``max|analytic - fd| / max(max|analytic|, max|fd|, 1e-8)`` and the
    worst tensor's error is returned.
    """
    ref = copy.deepcopy(model).double()
    ref_inputs = [x.double() if torch.is_tensor(x) and x.is_floating_point() else x for x in inputs]
    ref_params = dict(ref.named_parameters())
    analytic = backward(loss_fn(ref, *ref_inputs), ref_params)
    worst, worst_name = 0.0, None
    with torch.no_grad():
        for name, p in ref_params.items():
            flat = p.view(-1)
            fd = torch.empty(flat.numel(), dtype=torch.float64)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = loss_fn(ref, *ref_inputs).item()
                flat[i] = orig - step
                down = loss_fn(ref, *ref_inputs).item()
                flat[i] = orig
                fd[i] = (up - down) / (2 * step)
            a = analytic[name].detach().double().reshape(-1)
            scale = max(a.abs().max().item(), fd.abs().max().item(), 1e-8)
            err = (a - fd).abs().max().item() / scale
            if err > worst:
                worst, worst_name = err, name
    if tolerance is not None and worst > tolerance:
        log.warning("grad_check: worst relative error %.3g in %s exceeds %.3g", worst, worst_name, tolerance)
    return worst
