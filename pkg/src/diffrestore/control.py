"""Control branch and end-to-end restoration.

The branch holds trainable copies of the backbone blocks, one mixture
modulator per block to blend low-quality and reference token streams, and
zero-initialized output projections whose results are added back into the
frozen backbone after each block.  Fresh control parameters therefore leave
the backbone's predictions untouched.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .backbone import DiTBackbone, TextEmbedder, TextTokens, TokenGrid, patchify
from .modulation import MixtureModulator, _zero_linear
from .schedule import DiffusionSchedule, GuidanceConfig, sample


def to_tensor(img) -> torch.Tensor:
    if isinstance(img, torch.Tensor):
        return img.float()
    return torch.from_numpy(np.asarray(img, dtype=np.float32))


def _check_image(img: torch.Tensor):
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got {tuple(img.shape)}")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")


def bicubic_up(img: torch.Tensor, scale: int = 4) -> torch.Tensor:
    """Bicubic upsample of an HxWxC image, clamped to [0, 1]."""
    x = img.permute(2, 0, 1).unsqueeze(0)
    y = F.interpolate(x, scale_factor=scale, mode="bicubic", align_corners=False)
    return y.squeeze(0).permute(1, 2, 0).clamp(0.0, 1.0)


class BicubicRemover(nn.Module):
    """Identity degradation remover: plain x4 bicubic upsampling."""

    def __init__(self, scale: int = 4):
        super().__init__()
        self.scale = scale

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        _check_image(img)
        return bicubic_up(img, self.scale)


class ConvRemover(nn.Module):
    """Small trainable remover: bicubic upsample plus a learned residual.

    The last convolution starts at zero, so an untrained remover reproduces
    the bicubic baseline exactly.
    """

    def __init__(self, scale: int = 4, width: int = 16):
        super().__init__()
        self.scale = scale
        self.conv1 = nn.Conv2d(3, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)
        self.conv3 = nn.Conv2d(width, 3, 3, padding=1)
        nn.init.zeros_(self.conv3.weight)
        nn.init.zeros_(self.conv3.bias)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        _check_image(img)
        base = bicubic_up(img, self.scale)
        x = base.permute(2, 0, 1).unsqueeze(0)
        h = F.silu(self.conv1(x))
        h = F.silu(self.conv2(h))
        out = x + self.conv3(h)
        return out.squeeze(0).permute(1, 2, 0).clamp(0.0, 1.0)


class ConditionEncoder(nn.Module):
    """Image to token grid: non-overlapping patches through a linear map."""

    def __init__(self, image_hw: int, patch_size: int, hidden_dim: int,
                 channels: int = 3):
        super().__init__()
        if image_hw % patch_size != 0:
            raise ValueError("image_hw must be divisible by patch_size")
        self.image_hw = image_hw
        self.patch_size = patch_size
        self.channels = channels
        self.proj = nn.Linear(patch_size * patch_size * channels, hidden_dim)

    def forward(self, img: torch.Tensor) -> TokenGrid:
        if tuple(img.shape) != (self.image_hw, self.image_hw, self.channels):
            raise ValueError(
                f"image shape {tuple(img.shape)} does not match encoder "
                f"({self.image_hw}, {self.image_hw}, {self.channels})")
        return patchify(img, self.patch_size, proj=self.proj)


def encode_condition(img: torch.Tensor, encoder: ConditionEncoder) -> TokenGrid:
    return encoder(img)


class IdentityAutoencoder:
    """Latent space equals pixel space; decode clamps to the image range."""

    def encode(self, img: torch.Tensor) -> torch.Tensor:
        return img

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return z.clamp(0.0, 1.0)


class ControlBranch(nn.Module):
    """Trainable copies of backbone blocks + per-block modulators and taps."""

    def __init__(self, backbone: DiTBackbone, num_experts: int = 3):
        super().__init__()
        cfg = backbone.cfg
        self.cfg = cfg
        self.blocks = nn.ModuleList(copy.deepcopy(b) for b in backbone.blocks)
        # copies stay trainable even when taken from a frozen backbone
        for p in self.blocks.parameters():
            p.requires_grad_(True)
        self.moams = nn.ModuleList(
            MixtureModulator(cfg.hidden_dim, cfg.num_heads, num_experts)
            for _ in range(cfg.num_blocks))
        self.out_projections = nn.ModuleList(
            _zero_linear(cfg.hidden_dim, cfg.hidden_dim)
            for _ in range(cfg.num_blocks))


def init_control_from_backbone(backbone: DiTBackbone,
                               num_experts: int = 3) -> ControlBranch:
    return ControlBranch(backbone, num_experts=num_experts)


def control_forward(backbone: DiTBackbone, control: ControlBranch,
                    z_t: torch.Tensor, t: int, text: TextTokens | None,
                    x_lq: TokenGrid, x_ref: TokenGrid) -> list[torch.Tensor]:
    """Per-block additive residuals for the backbone.

    Block embeddings come from the (frozen) backbone stem; each copied block
    output is fused with the conditioning streams and tapped through its
    zero-initialized projection.
    """
    cfg = backbone.cfg
    if x_lq.tokens.shape != (cfg.num_tokens, cfg.hidden_dim):
        raise ValueError("x_lq tokens do not match the backbone geometry")
    if x_ref.tokens.shape != (cfg.num_tokens, cfg.hidden_dim):
        raise ValueError("x_ref tokens do not match the backbone geometry")
    h = backbone.embed_latent(z_t).tokens + backbone.pos_embed
    t_emb = backbone.embed_timestep(t)
    residuals = []
    for block, moam, proj in zip(control.blocks, control.moams,
                                 control.out_projections):
        h = block(h, t_emb, text)
        h = moam(h, x_lq.tokens, x_ref.tokens)
        residuals.append(proj(h))
    return residuals


@dataclass
class RestorationModel:
    """Everything restore() needs, bundled."""

    backbone: DiTBackbone
    control: ControlBranch
    remover: nn.Module
    encoder: ConditionEncoder
    sched: DiffusionSchedule
    autoencoder: IdentityAutoencoder = field(default_factory=IdentityAutoencoder)
    text: TextEmbedder | None = None
    prompt: str = "a clean high quality photo"
    negative_prompt: str = ""

    def encode_text(self, caption: str) -> TextTokens | None:
        if self.text is None:
            return None
        return self.text.encode(caption)


def restore(i_lq, bundle: RestorationModel,
            guidance: GuidanceConfig) -> np.ndarray:
    """Sample a x4 restoration of ``i_lq`` guided by the control branch."""
    cfg = bundle.backbone.cfg
    lq = to_tensor(i_lq)
    _check_image(lq)
    scale = getattr(bundle.remover, "scale", 4)
    if lq.shape[0] * scale != cfg.latent_hw or lq.shape[1] * scale != cfg.latent_hw:
        raise ValueError(
            f"LQ {tuple(lq.shape[:2])} x{scale} does not match the model's "
            f"{cfg.latent_hw}x{cfg.latent_hw} output size")
    guidance.validate(bundle.sched)
    with torch.no_grad():
        i_ref = bundle.remover(lq)
        x_ref = bundle.encoder(i_ref)
        x_lq = bundle.encoder(bicubic_up(lq, scale))
        text_pos = bundle.encode_text(bundle.prompt)
        text_neg = bundle.encode_text(bundle.negative_prompt)

        def model(z_t, t, cond_text):
            residuals = control_forward(bundle.backbone, bundle.control,
                                        z_t, t, cond_text, x_lq, x_ref)
            return bundle.backbone(z_t, t, cond_text, residuals=residuals)

        shape = (cfg.latent_hw, cfg.latent_hw, cfg.latent_channels)
        z = sample(model, text_pos, text_neg, guidance, bundle.sched, shape,
                   like=bundle.backbone.pos_embed)
        out = bundle.autoencoder.decode(z)
    return out.detach().cpu().numpy().astype(np.float32)
