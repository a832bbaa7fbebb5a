"""Training-data curation: dual-prompt generation, scoring, and screening.

The pipeline turns a text-to-image model into a source of clean training
images: learned positive/negative prompt tokens steer generation, a small
classifier scores each candidate, and an assistant client double-checks the
survivors.  Every candidate gets a verdict in the output manifest whether or
not it is kept.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
from scipy.special import expit
from torch import nn

from .backbone import DiTBackbone, TextEmbedder, TextTokens
from .degrade import save_image
from .schedule import (DiffusionSchedule, GuidanceConfig, _noise_like,
                       add_noise, ddpm_step, diffusion_loss, sample)

# Representative negative style prompt.  The wording is a tunable default,
# not a fixed contract; callers are expected to adjust it per domain.
DEFAULT_NEGATIVE_STYLE = (
    "cartoon, painting, illustration, sketch, anime, render, low quality, "
    "blurry, noisy, jpeg artifacts, watermark, text, logo, oversaturated, "
    "over-smooth, dirty"
)

DEFAULT_IMG2IMG_STRENGTH = 0.6

CAPTION_SOURCES = ("mllm", "template", "human")


@dataclass(frozen=True)
class CaptionRecord:
    """A caption attached to an image, tagged with where it came from."""

    image_id: str
    caption: str
    source: str

    def __post_init__(self):
        if not self.image_id:
            raise ValueError("image_id must be non-empty")
        if not self.caption.strip():
            raise ValueError("caption must be non-empty")
        if self.source not in CAPTION_SOURCES:
            raise ValueError(
                f"source must be one of {CAPTION_SOURCES}, got {self.source!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def template_caption(image_id: str, subject: str) -> CaptionRecord:
    """Deterministic fallback caption for images without a described subject."""
    return CaptionRecord(image_id=image_id, caption=f"a photo of {subject}",
                         source="template")


@dataclass
class Text2Image:
    """Text-conditioned generator bundle used throughout curation."""

    backbone: DiTBackbone
    embedder: TextEmbedder
    sched: DiffusionSchedule

    def latent_shape(self) -> tuple[int, int, int]:
        cfg = self.backbone.cfg
        return (cfg.latent_hw, cfg.latent_hw, cfg.latent_channels)


class PromptBank(nn.Module):
    """Learned positive and negative prompt tokens shared across scenes.

    The positive tokens are appended to per-scene text embeddings on the
    conditional stream; the negative tokens form the unconditional stream.
    An empty bank leaves generation identical to the base model.
    """

    def __init__(self, pos_tokens: torch.Tensor, neg_tokens: torch.Tensor,
                 pos_init_text: str = "", neg_init_text: str = ""):
        super().__init__()
        for name, tok in (("pos_tokens", pos_tokens), ("neg_tokens", neg_tokens)):
            if tok.dim() != 2:
                raise ValueError(f"{name} must be 2-d (count, dim), got "
                                 f"{tuple(tok.shape)}")
        if pos_tokens.shape[1] != neg_tokens.shape[1]:
            raise ValueError("pos/neg token dims differ: "
                             f"{pos_tokens.shape[1]} vs {neg_tokens.shape[1]}")
        self.pos_tokens = nn.Parameter(pos_tokens.detach().clone())
        self.neg_tokens = nn.Parameter(neg_tokens.detach().clone())
        self.pos_init_text = pos_init_text
        self.neg_init_text = neg_init_text

    @property
    def dim(self) -> int:
        return self.pos_tokens.shape[1]

    def positive_condition(self, scene: TextTokens | None = None) -> TextTokens:
        """Scene embeddings (if any) followed by the learned positive tokens."""
        m = self.pos_tokens.shape[0]
        mask = torch.ones(m, dtype=torch.bool)
        if scene is None:
            return TextTokens(embeddings=self.pos_tokens, mask=mask)
        if scene.embeddings.shape[-1] != self.dim:
            raise ValueError("scene embedding dim does not match the bank: "
                             f"{scene.embeddings.shape[-1]} vs {self.dim}")
        return TextTokens(
            embeddings=torch.cat([scene.embeddings, self.pos_tokens], dim=0),
            mask=torch.cat([scene.mask, mask], dim=0))

    def negative_condition(self) -> TextTokens:
        n = self.neg_tokens.shape[0]
        return TextTokens(embeddings=self.neg_tokens,
                          mask=torch.ones(n, dtype=torch.bool))


def _cycled_rows(emb: torch.Tensor, count: int, dim: int) -> torch.Tensor:
    if count == 0 or emb.shape[0] == 0:
        return torch.zeros(count, dim)
    idx = torch.arange(count) % emb.shape[0]
    return emb[idx].detach().clone()


def init_prompt_bank(num_pos: int = 8, num_neg: int = 8, *,
                     pos_init_text: str, neg_init_text: str,
                     embedder: TextEmbedder) -> PromptBank:
    """Bank whose tokens start from the embeddings of two seed texts.

    Seed embeddings are cycled (or truncated) to the requested counts, so a
    short seed text still fills every slot.  An empty seed text yields zero
    vectors for that side.
    """
    if num_pos < 0 or num_neg < 0:
        raise ValueError("token counts must be non-negative")
    dim = embedder.table.embedding_dim
    pos = _cycled_rows(embedder.encode(pos_init_text).embeddings, num_pos, dim)
    neg = _cycled_rows(embedder.encode(neg_init_text).embeddings, num_neg, dim)
    return PromptBank(pos, neg, pos_init_text=pos_init_text,
                      neg_init_text=neg_init_text)


def img2img_negative(img: torch.Tensor, strength: float, neg_style_text: str,
                     model: Text2Image, sched: DiffusionSchedule,
                     rng: np.random.Generator) -> torch.Tensor:
    """Re-render an image toward a degraded style for negative examples.

    The image is noised for ``floor(strength * T)`` of the ``T`` schedule
    steps, then denoised under the style prompt.  strength 0 returns the
    input unchanged; strength 1 ignores the input entirely and synthesizes
    from pure noise.  DEFAULT_IMG2IMG_STRENGTH is the recommended setting.
    """
    if not (0.0 <= strength <= 1.0):
        raise ValueError(f"strength must be in [0, 1], got {strength}")
    cfg = model.backbone.cfg
    expect = (cfg.latent_hw, cfg.latent_hw, cfg.latent_channels)
    if tuple(img.shape) != expect:
        raise ValueError(f"image shape {tuple(img.shape)} != {expect}")
    if not torch.isfinite(img).all():
        raise ValueError("image must be finite")
    n = int(math.floor(strength * sched.num_steps))
    if n == 0:
        return img
    with torch.no_grad():
        text = model.embedder.encode(neg_style_text)
        if n >= sched.num_steps:
            # fully re-noised: start from N(0, I), independent of the input
            z = _noise_like(img, rng)
        else:
            z = add_noise(img, n - 1, _noise_like(img, rng), sched)
        for t in range(n - 1, -1, -1):
            eps_hat = model.backbone(z, t, text)
            z = ddpm_step(z, eps_hat, t, sched, rng)
        return z.clamp(0.0, 1.0)


def finetune_parameters(bank: PromptBank,
                        backbone: DiTBackbone) -> list[nn.Parameter]:
    """Parameters updated during dual-prompt finetuning.

    Only the bank embeddings and the text-path key/value projections are
    included; an optimizer built over this list leaves the rest of the
    model untouched.
    """
    params: list[nn.Parameter] = [bank.pos_tokens, bank.neg_tokens]
    for block in backbone.blocks:
        attn = block.cross_attn
        params += [attn.k_proj.weight, attn.k_proj.bias,
                   attn.v_proj.weight, attn.v_proj.bias]
    return params


def dual_prompt_finetune_step(batch: dict, bank: PromptBank,
                              model: Text2Image,
                              optimizer: torch.optim.Optimizer,
                              rng: np.random.Generator) -> float:
    """One optimization step over labeled images.

    ``batch`` is a dict with "images" and matching "labels" ("pos" or
    "neg"); each image is conditioned on its side of the bank.  Only the
    parameters held by ``optimizer`` move (see finetune_parameters).
    Returns the scalar loss for the step.
    """
    images = batch.get("images", [])
    labels = batch.get("labels", [])
    if len(images) == 0:
        raise ValueError("batch must be non-empty")
    if len(images) != len(labels):
        raise ValueError(f"{len(images)} images but {len(labels)} labels")
    conds = {"pos": bank.positive_condition(),
             "neg": bank.negative_condition()}
    optimizer.zero_grad()
    losses = []
    for img, label in zip(images, labels):
        if label not in conds:
            raise ValueError(f"label must be 'pos' or 'neg', got {label!r}")
        losses.append(diffusion_loss(model.backbone, img, conds[label],
                                     model.sched, rng))
    loss = torch.stack(losses).mean()
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def generate_candidates(bank: PromptBank, model: Text2Image,
                        scene_texts: Sequence[str],
                        guidance: GuidanceConfig,
                        sched: DiffusionSchedule | None = None
                        ) -> list[np.ndarray]:
    """Sample one candidate image per scene text.

    The conditional stream is the scene embedding followed by the positive
    bank tokens; the negative stream is the negative bank tokens.  Each
    scene gets its own rng stream derived from ``guidance.seed`` and its
    index, so the full set is reproducible and items can be regenerated
    independently.
    """
    if len(scene_texts) == 0:
        raise ValueError("scene_texts must be non-empty")
    sched = model.sched if sched is None else sched
    shape = model.latent_shape()
    like = torch.zeros(0, dtype=torch.float32)
    out = []
    with torch.no_grad():
        neg = bank.negative_condition()
        for i, text in enumerate(scene_texts):
            cond = bank.positive_condition(model.embedder.encode(text))
            seed_i = int(np.random.SeedSequence(
                [guidance.seed, i]).generate_state(1, dtype=np.uint64)[0])
            g = dataclasses.replace(guidance, seed=seed_i)
            z = sample(model.backbone, cond, neg, g, sched, shape, like=like)
            out.append(z.clamp(0.0, 1.0).numpy().astype(np.float32))
    return out


@dataclass
class ClassifierConfig:
    lr: float = 0.5
    steps: int = 400
    l2: float = 1e-3

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.steps <= 0:
            raise ValueError(f"steps must be positive, got {self.steps}")
        if self.l2 < 0:
            raise ValueError(f"l2 must be non-negative, got {self.l2}")


def _image_features(image) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise ValueError("image must be finite")
    return arr.reshape(-1)


@dataclass
class QualityClassifier:
    """Logistic scorer over flattened image features."""

    weights: np.ndarray
    bias: float
    mean: np.ndarray
    scale: np.ndarray

    def score(self, image) -> float:
        f = _image_features(image)
        if f.shape != self.weights.shape:
            raise ValueError(f"feature size {f.shape[0]} != "
                             f"{self.weights.shape[0]} seen in training")
        z = (f - self.mean) / self.scale
        return float(expit(z @ self.weights + self.bias))

    def scores(self, images: Sequence) -> np.ndarray:
        return np.array([self.score(im) for im in images], dtype=np.float64)


def train_quality_classifier(pos_images: Sequence, neg_images: Sequence,
                             config: ClassifierConfig | None = None
                             ) -> QualityClassifier:
    """Fit the logistic scorer by full-batch gradient descent.

    Training is deterministic: zero init, fixed step count, no sampling.
    """
    config = ClassifierConfig() if config is None else config
    if len(pos_images) == 0 or len(neg_images) == 0:
        raise ValueError("need at least one image of each class")
    feats = [_image_features(im) for im in list(pos_images) + list(neg_images)]
    sizes = {f.shape[0] for f in feats}
    if len(sizes) != 1:
        raise ValueError(f"images disagree on feature size: {sorted(sizes)}")
    x = np.stack(feats)
    y = np.concatenate([np.ones(len(pos_images)), np.zeros(len(neg_images))])
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale = np.where(scale < 1e-12, 1.0, scale)
    xs = (x - mean) / scale
    w = np.zeros(xs.shape[1])
    b = 0.0
    for _ in range(config.steps):
        p = expit(xs @ w + b)
        err = p - y
        w -= config.lr * (xs.T @ err / len(y) + config.l2 * w)
        b -= config.lr * float(err.mean())
    return QualityClassifier(weights=w, bias=b, mean=mean, scale=scale)


TEXT_FILTER_PROMPT = (
    "You are an AI language assistant, and you are analyzing a series of "
    "text prompts. Your task is to identify whether these text prompts "
    "contain any inappropriate content such as personal privacy violations "
    "or NSFW material. Delete any inappropriate text prompts and return the "
    "remaining ones in their original format."
)

IMAGE_FILTER_PROMPT = (
    "You are an AI visual assistant, and you are analyzing a single image. "
    "Your task is to check the image for any anomalies, irregularities, or "
    "content that does not align with common sense or normal expectations. "
    "Additionally, identify any inappropriate content such as personal "
    "privacy violations or NSFW material. If the image does not contain any "
    "of the aforementioned issues, it has passed the inspection. Please "
    "determine whether this image has passed the inspection (answer yes/no) "
    "and provide your reasoning."
)

SCREEN_TEMPLATES = ("image_filter", "text_filter")


class MLLMTransportError(RuntimeError):
    """The screening backend could not be reached for one item.

    Carries the item id so a caller can retry just that item.
    """

    def __init__(self, item_id: str, message: str = ""):
        self.item_id = item_id
        super().__init__(message or f"transport failure while screening "
                                    f"{item_id!r}")


class MLLMClient(Protocol):
    """Narrow screening interface: text plus optional image in, text out.

    ``item_id`` is an out-of-band correlation hint; real backends may
    ignore it.
    """

    def request(self, prompt: str, image=None, item_id: str | None = None
                ) -> str: ...


class StubMLLMClient:
    """Offline client with canned responses, for tests and dry runs.

    Configured from a dict or JSON file with keys:

    - ``default``: response for items without an override
    - ``overrides``: map from item id to response text
    - ``errors``: item ids that fail with a transport error
    """

    def __init__(self, spec: dict | str | os.PathLike):
        if not isinstance(spec, dict):
            spec = json.loads(Path(spec).read_text())
        self.default = spec.get("default", "yes")
        self.overrides = dict(spec.get("overrides", {}))
        self.errors = set(spec.get("errors", []))
        self.calls: list[str | None] = []

    def request(self, prompt: str, image=None, item_id: str | None = None
                ) -> str:
        self.calls.append(item_id)
        if item_id in self.errors:
            raise ConnectionError(f"stub transport failure for {item_id!r}")
        return self.overrides.get(item_id, self.default)


@dataclass(frozen=True)
class ScreenResult:
    """Outcome of screening one item.

    ``passed`` is None when the response could not be parsed; callers must
    not keep undecided items.
    """

    image_id: str
    passed: bool | None
    reason: str


def _parse_yes_no(text: str) -> tuple[bool | None, str]:
    s = text.strip()
    low = s.lower()
    if low.startswith("yes"):
        return True, s
    if low.startswith("no"):
        return False, s
    return None, f"undecided: unparseable response {s[:80]!r}"


def mllm_screen(items: Sequence[tuple[str, object]], client: MLLMClient,
                template: str = "image_filter") -> list[ScreenResult]:
    """Screen items through an assistant client.

    ``items`` holds (item_id, payload) pairs; payloads are images for the
    image filter and caption strings for the text filter.  The request body
    embeds the full filter template.  Transport failures raise
    MLLMTransportError with the item id so the caller can retry that item;
    unparseable responses come back as undecided rather than kept.
    """
    if template not in SCREEN_TEMPLATES:
        raise ValueError(f"template must be one of {SCREEN_TEMPLATES}, "
                         f"got {template!r}")
    results = []
    for item_id, payload in items:
        if template == "image_filter":
            prompt, image = IMAGE_FILTER_PROMPT, payload
        else:
            prompt, image = f"{TEXT_FILTER_PROMPT}\n\n{payload}", None
        try:
            response = client.request(prompt, image=image, item_id=item_id)
        except MLLMTransportError:
            raise
        except (ConnectionError, TimeoutError, OSError) as exc:
            raise MLLMTransportError(item_id, str(exc)) from exc
        if template == "image_filter":
            passed, reason = _parse_yes_no(response)
        else:
            # the text filter returns the surviving prompts; an item passes
            # when its text comes back
            kept = str(payload).strip() in response
            passed = kept
            reason = response.strip() if kept else "deleted by text filter"
        results.append(ScreenResult(image_id=item_id, passed=passed,
                                    reason=reason))
    return results


@dataclass(frozen=True)
class FilterVerdict:
    """Keep/drop decision for one candidate.

    ``mllm_pass`` is None when the screener was never consulted (the
    classifier already rejected the item).  Unparseable screening responses
    are recorded as a failed pass with an "undecided" reason, so they are
    never kept.  ``kept`` always equals
    ``classifier_prob >= threshold and mllm_pass is not False``.
    """

    image_id: str
    classifier_prob: float
    mllm_pass: bool | None
    mllm_reason: str
    kept: bool

    def __post_init__(self):
        if not self.image_id:
            raise ValueError("image_id must be non-empty")
        if not (0.0 <= self.classifier_prob <= 1.0):
            raise ValueError(f"classifier_prob must be in [0, 1], got "
                             f"{self.classifier_prob}")

    @classmethod
    def decide(cls, image_id: str, classifier_prob: float, threshold: float,
               mllm_pass: bool | None, mllm_reason: str = "") -> "FilterVerdict":
        kept = classifier_prob >= threshold and mllm_pass is not False
        return cls(image_id=image_id, classifier_prob=classifier_prob,
                   mllm_pass=mllm_pass, mllm_reason=mllm_reason, kept=kept)

    def consistent_with(self, threshold: float) -> bool:
        return self.kept == (self.classifier_prob >= threshold
                             and self.mllm_pass is not False)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "FilterVerdict":
        return cls(**json.loads(line))


@dataclass
class CurationConfig:
    out_dir: str
    scene_texts: tuple[str, ...]
    threshold: float = 0.5
    omega: float = 4.5
    steps: int = 25
    seed: int = 0

    def __post_init__(self):
        self.scene_texts = tuple(self.scene_texts)
        if len(self.scene_texts) == 0:
            raise ValueError("scene_texts must be non-empty")
        if not (0.0 <= self.threshold <= 1.0):
            raise ValueError(f"threshold must be in [0, 1], got "
                             f"{self.threshold}")


def curate(bank: PromptBank, model: Text2Image,
           classifier: QualityClassifier, client: MLLMClient,
           config: CurationConfig) -> list[FilterVerdict]:
    """Generate, score, screen, and write kept images plus a verdict manifest.

    Only candidates above the classifier threshold reach the screening
    client.  Every candidate gets a manifest line, appended as soon as its
    verdict is known, so an interrupted run resumes where it stopped
    (candidates are regenerated deterministically, but already-recorded
    verdicts are reused and not re-screened).
    """
    out = Path(config.out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.jsonl"
    done: dict[str, FilterVerdict] = {}
    if manifest.exists():
        for line in manifest.read_text().splitlines():
            if line.strip():
                v = FilterVerdict.from_json(line)
                done[v.image_id] = v
    guidance = GuidanceConfig(omega=config.omega, steps=config.steps,
                              seed=config.seed)
    images = generate_candidates(bank, model, config.scene_texts, guidance)
    verdicts = []
    with manifest.open("a") as fh:
        for i, img in enumerate(images):
            image_id = f"cand_{i:06d}"
            if image_id in done:
                verdicts.append(done[image_id])
                continue
            prob = classifier.score(img)
            if prob >= config.threshold:
                res = mllm_screen([(image_id, img)], client, "image_filter")[0]
                # undecided screening never keeps an item
                mllm_pass = False if res.passed is None else res.passed
                reason = res.reason
            else:
                mllm_pass, reason = None, ""
            v = FilterVerdict.decide(image_id, prob, config.threshold,
                                     mllm_pass, reason)
            if v.kept:
                save_image(str(out / "images" / f"{image_id}.png"), img)
            fh.write(v.to_json() + "\n")
            fh.flush()
            verdicts.append(v)
    return verdicts
