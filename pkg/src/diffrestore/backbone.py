"""A small text-to-image diffusion transformer used as the frozen base model.

Tokens flow latent -> patchify -> AdaLN-conditioned transformer blocks with
text cross-attention -> zero-initialized output head -> unpatchify.  A control
branch can inject an additive residual after every block.  The final
projection starts at zero so a freshly built model predicts zero noise.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import torch
from torch import nn


@dataclass(frozen=True)
class BackboneConfig:
    latent_hw: int = 16
    latent_channels: int = 4
    patch_size: int = 2
    hidden_dim: int = 64
    num_blocks: int = 4
    num_heads: int = 4
    text_dim: int = 64
    max_text_tokens: int = 32

    def __post_init__(self):
        if self.latent_hw % self.patch_size != 0:
            raise ValueError("latent_hw must be divisible by patch_size")
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError("hidden_dim must be divisible by num_heads")

    @property
    def grid_side(self) -> int:
        return self.latent_hw // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid_side ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2 * self.latent_channels


@dataclass
class TokenGrid:
    """N x C visual tokens laid out on a grid_h x grid_w grid."""

    tokens: torch.Tensor
    grid_h: int
    grid_w: int

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] != self.grid_h * self.grid_w:
            raise ValueError(
                f"tokens {tuple(self.tokens.shape)} inconsistent with grid "
                f"{self.grid_h}x{self.grid_w}")
        if not torch.isfinite(self.tokens).all():
            raise ValueError("tokens contain non-finite values")

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


@dataclass
class TextTokens:
    """Text embeddings with a validity mask; masked tokens are ignored."""

    embeddings: torch.Tensor
    mask: torch.Tensor

    def __post_init__(self):
        if self.embeddings.ndim != 2 or self.mask.shape != self.embeddings.shape[:1]:
            raise ValueError("mask length must equal the number of text tokens")

    @property
    def num_tokens(self) -> int:
        return self.embeddings.shape[0]


def space_to_patches(latent: torch.Tensor, patch_size: int) -> torch.Tensor:
    """Rearrange [H, W, ch] into [N, p*p*ch] patch rows (no projection)."""
    h, w, ch = latent.shape
    p = patch_size
    if h % p != 0 or w % p != 0:
        raise ValueError(f"latent {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = latent.reshape(gh, p, gw, p, ch)
    return x.permute(0, 2, 1, 3, 4).reshape(gh * gw, p * p * ch)


def patches_to_space(patches: torch.Tensor, grid_h: int, grid_w: int,
                     patch_size: int, out_channels: int) -> torch.Tensor:
    """Exact inverse of :func:`space_to_patches`."""
    p = patch_size
    n, d = patches.shape
    if n != grid_h * grid_w:
        raise ValueError(f"{n} patches cannot fill a {grid_h}x{grid_w} grid")
    if d != p * p * out_channels:
        raise ValueError(
            f"patch dim {d} != patch_size^2 * out_channels = {p * p * out_channels}")
    x = patches.reshape(grid_h, grid_w, p, p, out_channels)
    return x.permute(0, 2, 1, 3, 4).reshape(grid_h * p, grid_w * p, out_channels)


def patchify(latent: torch.Tensor, patch_size: int, proj=None) -> TokenGrid:
    """Tokenize a latent; ``proj`` maps raw patch rows to the hidden width."""
    h, w, _ = latent.shape
    raw = space_to_patches(latent, patch_size)
    tokens = proj(raw) if proj is not None else raw
    return TokenGrid(tokens=tokens, grid_h=h // patch_size, grid_w=w // patch_size)


def unpatchify(grid: TokenGrid, patch_size: int, out_channels: int) -> torch.Tensor:
    return patches_to_space(grid.tokens, grid.grid_h, grid.grid_w,
                            patch_size, out_channels)


def timestep_embed(t: int, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of a step index; dim must be even."""
    if t < 0:
        raise ValueError("t must be >= 0")
    if dim % 2 != 0:
        raise ValueError("embedding dim must be even")
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = float(t) * freqs
    return torch.cat([torch.cos(args), torch.sin(args)]).float()


class TextEmbedder(nn.Module):
    """Whitespace tokenizer over a hashed vocabulary with learned embeddings.

    Stands in for a real text encoder at toy scale; captions from any source
    (template or MLLM-style) enter the model through this table.
    """

    def __init__(self, text_dim: int, vocab_size: int = 1024,
                 max_tokens: int = 32):
        super().__init__()
        self.vocab_size = vocab_size
        self.max_tokens = max_tokens
        self.table = nn.Embedding(vocab_size, text_dim)

    def token_ids(self, text: str) -> list[int]:
        words = text.split()[: self.max_tokens]
        return [zlib.crc32(w.encode("utf-8")) % self.vocab_size for w in words]

    def encode(self, text: str) -> TextTokens:
        ids = self.token_ids(text)
        dtype = self.table.weight.dtype
        if not ids:
            emb = torch.zeros(0, self.table.embedding_dim, dtype=dtype)
            return TextTokens(embeddings=emb, mask=torch.zeros(0, dtype=torch.bool))
        idx = torch.tensor(ids, dtype=torch.long)
        return TextTokens(embeddings=self.table(idx),
                          mask=torch.ones(len(ids), dtype=torch.bool))


class MultiHeadAttention(nn.Module):
    """Softmax attention over an explicit key/value set.

    With an empty (or fully masked) key set the output is exactly zero, so a
    block with no text contributes nothing through its cross-attention path.
    """

    def __init__(self, dim: int, num_heads: int, kv_dim: int | None = None):
        super().__init__()
        if dim % num_heads != 0:
            raise ValueError("dim must be divisible by num_heads")
        kv_dim = dim if kv_dim is None else kv_dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(kv_dim, dim)
        self.v_proj = nn.Linear(kv_dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, kv: torch.Tensor,
                mask: torch.Tensor | None = None) -> torch.Tensor:
        n = x.shape[0]
        if kv.shape[0] == 0 or (mask is not None and not bool(mask.any())):
            return torch.zeros_like(x)
        hd, nh = self.head_dim, self.num_heads
        q = self.q_proj(x).reshape(n, nh, hd).transpose(0, 1)
        k = self.k_proj(kv).reshape(kv.shape[0], nh, hd).transpose(0, 1)
        v = self.v_proj(kv).reshape(kv.shape[0], nh, hd).transpose(0, 1)
        att = (q @ k.transpose(1, 2)) / math.sqrt(hd)
        if mask is not None:
            att = att.masked_fill(~mask.reshape(1, 1, -1), float("-inf"))
        w = torch.softmax(att, dim=-1)
        out = (w @ v).transpose(0, 1).reshape(n, nh * hd)
        return self.out_proj(out)


class DiTBlock(nn.Module):
    """Pre-norm transformer block with timestep modulation and text cross-attention.

    Residual form: x + selfAttn(adaLN(x; t)) then + crossAttn(., text) then
    + MLP(adaLN(.)).  The modulation projection starts at zero so the block
    initially applies plain layer norm.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        dim = cfg.hidden_dim
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, cfg.num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, cfg.num_heads, kv_dim=cfg.text_dim)
        self.norm3 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))
        self.ada = nn.Linear(dim, 4 * dim)
        nn.init.zeros_(self.ada.weight)
        nn.init.zeros_(self.ada.bias)

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor,
                text: TextTokens | None = None) -> torch.Tensor:
        ga, ba, gm, bm = self.ada(torch.nn.functional.silu(t_emb)).chunk(4)
        h = self.norm1(x) * (1.0 + ga) + ba
        x = x + self.self_attn(h, h)
        if text is not None:
            x = x + self.cross_attn(self.norm2(x), text.embeddings, text.mask)
        x = x + self.mlp(self.norm3(x) * (1.0 + gm) + bm)
        return x


class DiTBackbone(nn.Module):
    """Latent noise predictor eps(z_t, t, text) with per-block residual inputs."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        dim = cfg.hidden_dim
        self.patch_proj = nn.Linear(cfg.patch_dim, dim)
        self.pos_embed = nn.Parameter(0.02 * torch.randn(cfg.num_tokens, dim))
        self.t_mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))
        self.blocks = nn.ModuleList(DiTBlock(cfg) for _ in range(cfg.num_blocks))
        self.norm_final = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, cfg.patch_dim)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def embed_latent(self, z_t: torch.Tensor) -> TokenGrid:
        return patchify(z_t, self.cfg.patch_size, proj=self.patch_proj)

    def embed_timestep(self, t: int) -> torch.Tensor:
        sin = timestep_embed(t, self.cfg.hidden_dim).to(self.pos_embed.dtype)
        return self.t_mlp(sin)

    def forward(self, z_t: torch.Tensor, t: int,
                text: TextTokens | None = None,
                residuals: list[torch.Tensor] | None = None) -> torch.Tensor:
        cfg = self.cfg
        if tuple(z_t.shape) != (cfg.latent_hw, cfg.latent_hw, cfg.latent_channels):
            raise ValueError(f"latent shape {tuple(z_t.shape)} does not match config")
        if residuals is not None and len(residuals) != cfg.num_blocks:
            raise ValueError(
                f"expected {cfg.num_blocks} residuals, got {len(residuals)}")
        grid = self.embed_latent(z_t)
        x = grid.tokens + self.pos_embed
        t_emb = self.embed_timestep(t)
        for i, block in enumerate(self.blocks):
            x = block(x, t_emb, text)
            if residuals is not None:
                x = x + residuals[i]
        out = self.head(self.norm_final(x))
        return patches_to_space(out, grid.grid_h, grid.grid_w,
                                cfg.patch_size, cfg.latent_channels)
