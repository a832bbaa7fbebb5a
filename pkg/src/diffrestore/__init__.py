"""Desk-scale diffusion-transformer image restoration toolkit.

Pieces: a patch-token generative backbone, a control branch with
mixture-of-modulator conditioning for restoration, a second-order
degradation synthesizer, a prompt-bank curation pipeline, reference
metrics, and a training/eval harness behind the `diffrestore` CLI.
"""

__version__ = "0.1.0"

from .backbone import BackboneConfig, DiTBackbone, TextEmbedder, TextTokens
from .config import RunConfig, ModelSection, ConfigError, load_config
from .control import (ConditionEncoder, ControlBranch, ConvRemover,
                      IdentityAutoencoder, RestorationModel, bicubic_up,
                      control_forward, restore, to_tensor)
from .curation import (ClassifierConfig, CurationConfig, FilterVerdict,
                       PromptBank, QualityClassifier, StubMLLMClient,
                       Text2Image, curate, dual_prompt_finetune_step,
                       finetune_parameters, generate_candidates,
                       img2img_negative, init_prompt_bank, mllm_screen,
                       train_quality_classifier)
from .degrade import (DegradationRecipe, DegradeConfig, PairRecord,
                      build_dataset, load_image, make_pair, read_manifest,
                      replay_pair, save_image)
from .metrics import (ScoreTable, compute_pair_metrics, psnr, rgb_to_y,
                      ssim_y, topk_ratio, vote_percentage, write_report)
from .modulation import MixtureModulator, moam_forward, modulate
from .schedule import (DiffusionSchedule, GuidanceConfig, add_noise,
                       cfg_combine, diffusion_loss, make_schedule, sample)
from .train import (build_backbone, build_restoration, evaluate,
                    load_backbone_checkpoint, load_restoration_checkpoint,
                    save_backbone_checkpoint, save_restoration_checkpoint,
                    train_backbone, train_prompt_bank, train_restoration)

__all__ = [
    "BackboneConfig", "DiTBackbone", "TextEmbedder", "TextTokens",
    "RunConfig", "ModelSection", "ConfigError", "load_config",
    "ConditionEncoder", "ControlBranch", "ConvRemover",
    "IdentityAutoencoder", "RestorationModel", "bicubic_up",
    "control_forward", "restore", "to_tensor",
    "ClassifierConfig", "CurationConfig", "FilterVerdict", "PromptBank",
    "QualityClassifier", "StubMLLMClient", "Text2Image", "curate",
    "dual_prompt_finetune_step", "finetune_parameters",
    "generate_candidates", "img2img_negative", "init_prompt_bank",
    "mllm_screen", "train_quality_classifier",
    "DegradationRecipe", "DegradeConfig", "PairRecord", "build_dataset",
    "load_image", "make_pair", "read_manifest", "replay_pair", "save_image",
    "ScoreTable", "compute_pair_metrics", "psnr", "rgb_to_y", "ssim_y",
    "topk_ratio", "vote_percentage", "write_report",
    "MixtureModulator", "moam_forward", "modulate",
    "DiffusionSchedule", "GuidanceConfig", "add_noise", "cfg_combine",
    "diffusion_loss", "make_schedule", "sample",
    "build_backbone", "build_restoration", "evaluate",
    "load_backbone_checkpoint", "load_restoration_checkpoint",
    "save_backbone_checkpoint", "save_restoration_checkpoint",
    "train_backbone", "train_prompt_bank", "train_restoration",
]
