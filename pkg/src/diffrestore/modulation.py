"""Mixture-of-adaptive-modulators block.

Fuses low-quality and reference token streams by cross-attention, derives a
token-wise degradation map, routes each token over K modulation experts, and
applies elementwise affine modulation x_out = (1 + gamma) * x + beta.  Every
projection that produces a gamma or beta starts at zero, so a freshly built
block is the identity on its primary input.
"""
from __future__ import annotations

import torch
from torch import nn

from .backbone import MultiHeadAttention


def _zero_linear(din: int, dout: int) -> nn.Linear:
    lin = nn.Linear(din, dout)
    nn.init.zeros_(lin.weight)
    nn.init.zeros_(lin.bias)
    return lin


def modulate(x_in: torch.Tensor, gamma: torch.Tensor,
             beta: torch.Tensor) -> torch.Tensor:
    """Elementwise affine transform (1 + gamma) * x_in + beta."""
    if x_in.shape != gamma.shape or x_in.shape != beta.shape:
        raise ValueError("x_in, gamma, beta must share a shape")
    return (1.0 + gamma) * x_in + beta


class MixtureModulator(nn.Module):
    """Three-step conditional modulator over [N, C] token tensors.

    Step 1: x_attn = crossAttn(q=x_lq, kv=x_ref); modulate x_in by zero-init
    maps of x_attn; derive degradation map D from x_attn.
    Step 2: modulate by zero-init maps of the reference tokens.
    Step 3: per-token expert weights w = softmax(MLP(D)); gamma/beta are the
    w-weighted sums of per-expert linear maps of x_lq; modulate once more.
    """

    def __init__(self, dim: int, num_heads: int = 4, num_experts: int = 3,
                 router_hidden: int | None = None):
        super().__init__()
        if num_experts < 1:
            raise ValueError("need at least one expert")
        self.dim = dim
        self.num_experts = num_experts
        self.fusion = MultiHeadAttention(dim, num_heads)
        self.attn_gamma = _zero_linear(dim, dim)
        self.attn_beta = _zero_linear(dim, dim)
        self.deg_proj = nn.Linear(dim, dim)
        hidden = dim if router_hidden is None else router_hidden
        self.router = nn.Sequential(
            nn.Linear(dim, hidden), nn.SiLU(), nn.Linear(hidden, num_experts))
        self.ref_gamma = _zero_linear(dim, dim)
        self.ref_beta = _zero_linear(dim, dim)
        self.expert_gamma = nn.ModuleList(
            _zero_linear(dim, dim) for _ in range(num_experts))
        self.expert_beta = nn.ModuleList(
            _zero_linear(dim, dim) for _ in range(num_experts))

    def fuse_cross_attention(self, x_lq: torch.Tensor,
                             x_ref: torch.Tensor) -> torch.Tensor:
        if x_lq.shape != x_ref.shape:
            raise ValueError("x_lq and x_ref must share N and C")
        return self.fusion(x_lq, x_ref)

    def degradation_map(self, x_attn: torch.Tensor) -> torch.Tensor:
        return self.deg_proj(x_attn)

    def route(self, d: torch.Tensor) -> torch.Tensor:
        """Row-simplex expert weights, shape [N, K]."""
        return torch.softmax(self.router(d), dim=-1)

    def expert_modulation(self, x_lq: torch.Tensor,
                          w: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Weighted expert outputs: gamma(i) = sum_k w(i,k) * Net_k_gamma(x_lq(i))."""
        if w.shape != (x_lq.shape[0], self.num_experts):
            raise ValueError(
                f"weights {tuple(w.shape)} do not match {self.num_experts} experts")
        gammas = torch.stack([net(x_lq) for net in self.expert_gamma])  # [K, N, C]
        betas = torch.stack([net(x_lq) for net in self.expert_beta])
        wk = w.t().unsqueeze(-1)  # [K, N, 1]
        return (wk * gammas).sum(0), (wk * betas).sum(0)

    def am_condition(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        """Modulate x by per-token (gamma, beta) read off the condition tokens."""
        if x.shape != cond.shape:
            raise ValueError("x and cond must share N and C")
        return modulate(x, self.ref_gamma(cond), self.ref_beta(cond))

    def forward(self, x_in: torch.Tensor, x_lq: torch.Tensor,
                x_ref: torch.Tensor) -> torch.Tensor:
        if not (x_in.shape == x_lq.shape == x_ref.shape):
            raise ValueError("x_in, x_lq, x_ref must share N and C")
        x_attn = self.fuse_cross_attention(x_lq, x_ref)
        x = modulate(x_in, self.attn_gamma(x_attn), self.attn_beta(x_attn))
        d = self.degradation_map(x_attn)
        x = self.am_condition(x, x_ref)
        w = self.route(d)
        gamma, beta = self.expert_modulation(x_lq, w)
        return modulate(x, gamma, beta)


def moam_forward(x_in: torch.Tensor, x_lq: torch.Tensor, x_ref: torch.Tensor,
                 params: MixtureModulator) -> torch.Tensor:
    """Functional alias for :meth:`MixtureModulator.forward`."""
    return params(x_in, x_lq, x_ref)
