"""Training loops, experiment manifests, bundle checkpoints, evaluation.

Every run appends JSON lines to a run log, starting with a config snapshot
before any model state is touched.  All randomness flows from one top-level
seed through labeled per-component streams, and training steps draw from
per-step streams so an interrupted run resumes on the exact same noise.
"""

from __future__ import annotations

import dataclasses
import json
import time
import zlib
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .backbone import DiTBackbone, TextEmbedder, TextTokens
from .checkpoint import (load_checkpoint, load_module_arrays, module_arrays,
                         save_checkpoint)
from .config import (ConfigError, ModelSection, RunConfig, config_to_dict,
                     require_path)
from .control import (ConditionEncoder, ConvRemover, IdentityAutoencoder,
                      RestorationModel, bicubic_up, control_forward,
                      init_control_from_backbone, to_tensor)
from .curation import (CurationConfig, PromptBank, StubMLLMClient, Text2Image,
                       curate, dual_prompt_finetune_step, finetune_parameters,
                       init_prompt_bank, train_quality_classifier)
from .degrade import load_image, read_manifest
from .metrics import compute_pair_metrics, write_report
from .schedule import diffusion_loss, make_schedule

RUN_LOG = "run.jsonl"


def stream(seed: int, label: str, step: int | None = None
           ) -> np.random.Generator:
    """Deterministic rng stream derived from the run seed and a label."""
    parts = [int(seed), zlib.crc32(label.encode("utf-8"))]
    if step is not None:
        parts.append(int(step))
    return np.random.default_rng(np.random.SeedSequence(parts))


def torch_seed(seed: int, label: str) -> None:
    """Seed torch's global generator from a labeled stream."""
    torch.manual_seed(int(stream(seed, label).integers(0, 2**31)))


class ExperimentManifest:
    """Append-only JSONL log of one run."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, record: dict) -> None:
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.flush()

    @staticmethod
    def read(path: str | Path) -> list[dict]:
        with open(path) as fh:
            return [json.loads(line) for line in fh if line.strip()]

    @staticmethod
    def comparable(records: list[dict]) -> list[dict]:
        """Records with volatile fields (timestamps) removed."""
        return [{k: v for k, v in r.items() if k != "time"} for r in records]

    @staticmethod
    def loss_curve(records: list[dict], event: str = "loss"
                   ) -> list[tuple[int, float]]:
        return [(r["step"], r["loss"]) for r in records
                if r.get("event") == event]


def start_run(out_dir: str | Path, command: str,
              config: RunConfig) -> ExperimentManifest:
    # the start record lands before any model state is created or written
    manifest = ExperimentManifest(Path(out_dir) / RUN_LOG)
    manifest.append({"event": "start", "command": command,
                     "version": __version__, "seed": config.train.seed,
                     "config": config_to_dict(config), "time": time.time()})
    return manifest


# ------------------------------------------------------------- checkpointing

def _prefixed(prefix: str, arrays: dict) -> dict:
    return {f"{prefix}.{k}": v for k, v in arrays.items()}


def _select(arrays: dict, prefix: str) -> dict:
    head = prefix + "."
    return {k[len(head):]: v for k, v in arrays.items() if k.startswith(head)}


def _model_dict(model: ModelSection, sched_kind: str,
                sched_steps: int) -> dict:
    out = dataclasses.asdict(model)
    out["sched_kind"] = sched_kind
    out["sched_steps"] = int(sched_steps)
    return out


def _model_section(config: dict) -> ModelSection:
    fields = {f.name for f in dataclasses.fields(ModelSection)}
    return ModelSection(**{k: v for k, v in config.items() if k in fields})


def _expect_kind(path, config: dict, kind: str) -> None:
    if config.get("kind") != kind:
        raise ConfigError(f"{path}: not a {kind} checkpoint "
                          f"(kind={config.get('kind')!r})")


def build_backbone(model: ModelSection, seed: int = 0
                   ) -> tuple[DiTBackbone, TextEmbedder]:
    torch_seed(seed, "backbone-init")
    net = DiTBackbone(model.backbone_config())
    embedder = TextEmbedder(text_dim=model.text_dim,
                            max_tokens=model.text_max_tokens)
    return net, embedder


def save_backbone_checkpoint(path: str | Path, net: DiTBackbone,
                             embedder: TextEmbedder, config: dict) -> None:
    arrays = _prefixed("backbone", module_arrays(net))
    arrays.update(_prefixed("text", module_arrays(embedder)))
    save_checkpoint(str(path), {"kind": "backbone", **config}, arrays)


def load_backbone_checkpoint(path: str | Path
                             ) -> tuple[DiTBackbone, TextEmbedder, dict]:
    config, arrays = load_checkpoint(str(path))
    _expect_kind(path, config, "backbone")
    model = _model_section(config)
    net = DiTBackbone(model.backbone_config())
    embedder = TextEmbedder(text_dim=model.text_dim,
                            max_tokens=model.text_max_tokens)
    load_module_arrays(net, _select(arrays, "backbone"))
    load_module_arrays(embedder, _select(arrays, "text"))
    return net, embedder, config


def build_restoration(model: ModelSection, net: DiTBackbone,
                      embedder: TextEmbedder, sched_kind: str = "cosine",
                      sched_steps: int = 50) -> RestorationModel:
    control = init_control_from_backbone(net, num_experts=model.num_experts)
    remover = ConvRemover(scale=model.scale, width=model.remover_width)
    encoder = ConditionEncoder(image_hw=model.latent_hw,
                               patch_size=model.patch_size,
                               hidden_dim=model.hidden_dim,
                               channels=model.latent_channels)
    sched = make_schedule(int(sched_steps), sched_kind)
    return RestorationModel(backbone=net, control=control, remover=remover,
                            encoder=encoder, sched=sched,
                            autoencoder=IdentityAutoencoder(), text=embedder,
                            prompt=model.prompt,
                            negative_prompt=model.negative_prompt)


def save_restoration_checkpoint(path: str | Path, bundle: RestorationModel,
                                config: dict,
                                extra_arrays: dict | None = None) -> None:
    arrays = _prefixed("backbone", module_arrays(bundle.backbone))
    arrays.update(_prefixed("control", module_arrays(bundle.control)))
    arrays.update(_prefixed("remover", module_arrays(bundle.remover)))
    arrays.update(_prefixed("encoder", module_arrays(bundle.encoder)))
    arrays.update(_prefixed("text", module_arrays(bundle.text)))
    arrays.update(extra_arrays or {})
    save_checkpoint(str(path), {"kind": "restoration", **config}, arrays)


def load_restoration_checkpoint(path: str | Path
                                ) -> tuple[RestorationModel, dict]:
    config, arrays = load_checkpoint(str(path))
    _expect_kind(path, config, "restoration")
    model = _model_section(config)
    net = DiTBackbone(model.backbone_config())
    embedder = TextEmbedder(text_dim=model.text_dim,
                            max_tokens=model.text_max_tokens)
    bundle = build_restoration(model, net, embedder,
                               config.get("sched_kind", "cosine"),
                               config.get("sched_steps", 50))
    load_module_arrays(bundle.backbone, _select(arrays, "backbone"))
    load_module_arrays(bundle.control, _select(arrays, "control"))
    load_module_arrays(bundle.remover, _select(arrays, "remover"))
    load_module_arrays(bundle.encoder, _select(arrays, "encoder"))
    load_module_arrays(bundle.text, _select(arrays, "text"))
    return bundle, config


def save_prompts_checkpoint(path: str | Path, bank: PromptBank,
                            model: Text2Image, config: dict) -> None:
    arrays = _prefixed("backbone", module_arrays(model.backbone))
    arrays.update(_prefixed("text", module_arrays(model.embedder)))
    arrays.update(_prefixed("bank", module_arrays(bank)))
    save_checkpoint(str(path), {"kind": "prompts", **config}, arrays)


def load_prompts_checkpoint(path: str | Path
                            ) -> tuple[PromptBank, Text2Image, dict]:
    config, arrays = load_checkpoint(str(path))
    _expect_kind(path, config, "prompts")
    model = _model_section(config)
    net = DiTBackbone(model.backbone_config())
    embedder = TextEmbedder(text_dim=model.text_dim,
                            max_tokens=model.text_max_tokens)
    load_module_arrays(net, _select(arrays, "backbone"))
    load_module_arrays(embedder, _select(arrays, "text"))
    bank = PromptBank(torch.from_numpy(arrays["bank.pos_tokens"].copy()),
                      torch.from_numpy(arrays["bank.neg_tokens"].copy()),
                      pos_init_text=config.get("pos_init_text", ""),
                      neg_init_text=config.get("neg_init_text", ""))
    sched = make_schedule(int(config.get("sched_steps", 50)),
                          config.get("sched_kind", "cosine"))
    return bank, Text2Image(net, embedder, sched), config


def optimizer_arrays(opt: torch.optim.Optimizer,
                     named: dict[str, torch.nn.Parameter]) -> dict:
    """Adam moments as checkpoint arrays, keyed by parameter name."""
    out = {}
    for name, p in named.items():
        state = opt.state.get(p)
        if not state:
            continue
        step = state["step"]
        out[f"opt.{name}.t"] = np.float32(
            float(step.item()) if torch.is_tensor(step) else float(step))
        out[f"opt.{name}.m"] = state["exp_avg"].detach().numpy()
        out[f"opt.{name}.v"] = state["exp_avg_sq"].detach().numpy()
    return out


def load_optimizer_arrays(opt: torch.optim.Optimizer,
                          named: dict[str, torch.nn.Parameter],
                          arrays: dict) -> None:
    for name, p in named.items():
        key = f"opt.{name}.t"
        if key not in arrays:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(arrays[key])),
            "exp_avg": torch.from_numpy(arrays[f"opt.{name}.m"].copy()),
            "exp_avg_sq": torch.from_numpy(arrays[f"opt.{name}.v"].copy()),
        }


# ------------------------------------------------------------------ datasets

def list_images(path: Path) -> list[Path]:
    return sorted(p for p in path.glob("*.png"))


def load_hq_images(data_dir: str | Path) -> list[torch.Tensor]:
    """HQ tensors from a degradation dataset dir or a plain PNG dir."""
    root = Path(data_dir)
    manifest = root / "manifest.jsonl"
    if manifest.is_file():
        paths = [root / r.hq_path for r in read_manifest(str(manifest))]
    else:
        paths = list_images(root)
    if not paths:
        raise ConfigError(f"no images found under {data_dir}")
    return [to_tensor(load_image(str(p))) for p in paths]


def load_labeled_images(data_dir: str | Path
                        ) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Positive and negative example images from pos/ and neg/ subdirs."""
    root = Path(data_dir)
    pos = [load_image(str(p)) for p in list_images(root / "pos")]
    neg = [load_image(str(p)) for p in list_images(root / "neg")]
    if not pos or not neg:
        raise ConfigError(f"need non-empty pos/ and neg/ image dirs "
                          f"under {data_dir}")
    return pos, neg


class PairDataset:
    """In-memory HQ/LQ tensor pairs from a degradation manifest."""

    def __init__(self, data_dir: str | Path):
        root = Path(data_dir)
        manifest = root / "manifest.jsonl"
        if not manifest.is_file():
            raise ConfigError(f"no manifest.jsonl under {data_dir}")
        records = read_manifest(str(manifest))
        if not records:
            raise ConfigError(f"empty dataset manifest under {data_dir}")
        self.hq = [to_tensor(load_image(str(root / r.hq_path)))
                   for r in records]
        self.lq = [to_tensor(load_image(str(root / r.lq_path)))
                   for r in records]

    def __len__(self) -> int:
        return len(self.hq)

    def batch(self, rng: np.random.Generator, n: int):
        idx = rng.integers(0, len(self.hq), size=n)
        return [(self.hq[int(i)], self.lq[int(i)]) for i in idx]


def _check_latent_images(images, model: ModelSection, what: str) -> None:
    expect = (model.latent_hw, model.latent_hw, model.latent_channels)
    for img in images:
        if tuple(img.shape) != expect:
            raise ConfigError(f"{what} image shape {tuple(img.shape)} does "
                              f"not match the model's {expect}")


def _out_dir(config: RunConfig) -> Path:
    if not config.paths.get("out"):
        raise ConfigError("missing required path for output directory")
    return Path(config.paths["out"])


# ------------------------------------------------------------ training loops

def _text_for_step(embedder: TextEmbedder, prompt: str, dropout: float,
                   rng: np.random.Generator) -> TextTokens:
    use = prompt if float(rng.random()) >= dropout else ""
    return embedder.encode(use)


def train_backbone(config: RunConfig) -> ExperimentManifest:
    """Pretrain the generative backbone on clean images.

    A fresh backbone's zero-initialized head predicts zeros and passes no
    gradient to anything upstream, so the restoration stage needs this
    pretraining pass first.  Conditioning uses the configured prompt with
    dropout to the empty prompt so guided sampling sees both streams.
    """
    data_dir = require_path(config.paths.get("data"), "training data")
    out_dir = _out_dir(config)
    images = load_hq_images(data_dir)
    _check_latent_images(images, config.model, "training")
    manifest = start_run(out_dir, "train-backbone", config)
    seed = config.train.seed
    net, embedder = build_backbone(config.model, seed)
    sched = make_schedule(config.schedule.num_steps, config.schedule.kind)
    opt = config.optimizer.build(list(net.parameters())
                                 + list(embedder.parameters()))
    cfg_dict = _model_dict(config.model, config.schedule.kind,
                           config.schedule.num_steps)
    final = out_dir / "backbone.ckpt"
    for step in range(config.train.steps):
        rng = stream(seed, "train-backbone", step)
        idx = rng.integers(0, len(images), size=config.train.batch_size)
        opt.zero_grad()
        total = 0.0
        for i in idx:
            text = _text_for_step(embedder, config.model.prompt,
                                  config.train.text_dropout, rng)
            total = total + diffusion_loss(net, images[int(i)], text, sched,
                                           rng)
        loss = total / len(idx)
        loss.backward()
        opt.step()
        if step % config.train.log_every == 0 or step == config.train.steps - 1:
            manifest.append({"event": "loss", "step": step,
                             "loss": float(loss.detach())})
        if (config.train.checkpoint_every
                and (step + 1) % config.train.checkpoint_every == 0
                and step + 1 < config.train.steps):
            p = out_dir / f"backbone_step{step + 1:06d}.ckpt"
            save_backbone_checkpoint(p, net, embedder, cfg_dict)
            manifest.append({"event": "checkpoint", "step": step + 1,
                             "path": str(p)})
    save_backbone_checkpoint(final, net, embedder, cfg_dict)
    manifest.append({"event": "checkpoint", "step": config.train.steps,
                     "path": str(final)})
    manifest.append({"event": "done", "steps": config.train.steps,
                     "time": time.time()})
    return manifest


def _restoration_loss(bundle: RestorationModel, hq: torch.Tensor,
                      lq: torch.Tensor, text: TextTokens,
                      rng: np.random.Generator):
    x_lq = bundle.encoder(bicubic_up(lq, bundle.remover.scale))
    x_ref = bundle.encoder(bundle.remover(lq))

    def model_fn(z_t, t, cond):
        residuals = control_forward(bundle.backbone, bundle.control, z_t, t,
                                    cond, x_lq, x_ref)
        return bundle.backbone(z_t, t, cond, residuals=residuals)

    return diffusion_loss(model_fn, bundle.autoencoder.encode(hq), text,
                          bundle.sched, rng)


def _pretrain_remover(bundle: RestorationModel, dataset: PairDataset,
                      config: RunConfig, manifest: ExperimentManifest) -> None:
    """Fit the degradation remover by direct MSE against the HQ side."""
    steps = config.train.remover_steps
    opt = torch.optim.Adam(bundle.remover.parameters(),
                           lr=config.train.remover_lr)
    seed = config.train.seed
    for step in range(steps):
        rng = stream(seed, "train-remover", step)
        opt.zero_grad()
        total = 0.0
        for hq, lq in dataset.batch(rng, config.train.batch_size):
            total = total + torch.mean((bundle.remover(lq) - hq) ** 2)
        loss = total / config.train.batch_size
        loss.backward()
        opt.step()
        if step % config.train.log_every == 0 or step == steps - 1:
            manifest.append({"event": "remover_loss", "step": step,
                             "loss": float(loss.detach())})


def train_restoration(config: RunConfig) -> ExperimentManifest:
    """Train the control branch and conditioning encoder on paired data.

    The pretrained backbone and text embedder stay frozen.  The optional
    remover pre-phase fits the reference-image cleaner by direct MSE, then
    freezes it.  Resume by pointing paths.resume at a checkpoint from the
    same run; per-step noise streams make the continued loss curve match an
    uninterrupted run.
    """
    data_dir = require_path(config.paths.get("data"), "training data")
    out_dir = _out_dir(config)
    resume_path = config.paths.get("resume")
    if resume_path:
        require_path(resume_path, "resume checkpoint")
    else:
        require_path(config.paths.get("backbone"), "backbone checkpoint")
    dataset = PairDataset(data_dir)
    manifest = start_run(out_dir, "train-restore", config)
    if resume_path:
        manifest.append({"event": "resume", "path": str(resume_path)})
        bundle, ckpt_config = load_restoration_checkpoint(resume_path)
        start_step = int(ckpt_config.get("trained_steps", 0))
    else:
        net, embedder, _ = load_backbone_checkpoint(config.paths["backbone"])
        torch_seed(config.train.seed, "control-init")
        bundle = build_restoration(config.model, net, embedder,
                                   config.schedule.kind,
                                   config.schedule.num_steps)
        start_step = 0
    for p in bundle.backbone.parameters():
        p.requires_grad_(False)
    for p in bundle.text.parameters():
        p.requires_grad_(False)
    if start_step == 0:
        _pretrain_remover(bundle, dataset, config, manifest)
    for p in bundle.remover.parameters():
        p.requires_grad_(False)
    trainable = {f"control.{n}": p
                 for n, p in bundle.control.named_parameters()}
    trainable.update({f"encoder.{n}": p
                      for n, p in bundle.encoder.named_parameters()})
    opt = config.optimizer.build(list(trainable.values()))
    if resume_path:
        _, arrays = load_checkpoint(str(resume_path))
        load_optimizer_arrays(opt, trainable, arrays)
    cfg_dict = _model_dict(config.model, config.schedule.kind,
                           config.schedule.num_steps)
    with torch.no_grad():
        text_pos = bundle.text.encode(bundle.prompt)
        text_neg = bundle.text.encode(bundle.negative_prompt)
    seed = config.train.seed
    final = out_dir / "restoration.ckpt"

    def save_at(path: Path, steps_done: int) -> None:
        save_restoration_checkpoint(
            path, bundle, {**cfg_dict, "trained_steps": steps_done},
            extra_arrays=optimizer_arrays(opt, trainable))

    for step in range(start_step, config.train.steps):
        rng = stream(seed, "train-restore", step)
        opt.zero_grad()
        total = 0.0
        for hq, lq in dataset.batch(rng, config.train.batch_size):
            use_pos = float(rng.random()) >= config.train.text_dropout
            text = text_pos if use_pos else text_neg
            total = total + _restoration_loss(bundle, hq, lq, text, rng)
        loss = total / config.train.batch_size
        loss.backward()
        opt.step()
        if step % config.train.log_every == 0 or step == config.train.steps - 1:
            manifest.append({"event": "loss", "step": step,
                             "loss": float(loss.detach())})
        if (config.train.checkpoint_every
                and (step + 1) % config.train.checkpoint_every == 0
                and step + 1 < config.train.steps):
            p = out_dir / f"restoration_step{step + 1:06d}.ckpt"
            save_at(p, step + 1)
            manifest.append({"event": "checkpoint", "step": step + 1,
                             "path": str(p)})
    save_at(final, config.train.steps)
    manifest.append({"event": "checkpoint", "step": config.train.steps,
                     "path": str(final)})
    manifest.append({"event": "done", "steps": config.train.steps,
                     "time": time.time()})
    return manifest


def train_prompt_bank(config: RunConfig) -> ExperimentManifest:
    """Finetune learned prompt tokens on labeled good/bad images.

    Loads a pretrained backbone, seeds a prompt bank from the configured
    texts, and runs dual-prompt steps over pos/ and neg/ images.  Only the
    bank and the text-path key/value projections move.
    """
    data_dir = require_path(config.paths.get("data"), "labeled image data")
    backbone_path = require_path(config.paths.get("backbone"),
                                 "backbone checkpoint")
    out_dir = _out_dir(config)
    pos, neg = load_labeled_images(data_dir)
    _check_latent_images(pos + neg, config.model, "labeled")
    manifest = start_run(out_dir, "train-prompts", config)
    net, embedder, _ = load_backbone_checkpoint(backbone_path)
    bank = init_prompt_bank(config.prompts.num_pos, config.prompts.num_neg,
                            pos_init_text=config.prompts.pos_init_text,
                            neg_init_text=config.prompts.neg_init_text,
                            embedder=embedder)
    sched = make_schedule(config.schedule.num_steps, config.schedule.kind)
    model = Text2Image(net, embedder, sched)
    opt = config.optimizer.build(finetune_parameters(bank, net))
    pool = ([(to_tensor(img), "pos") for img in pos]
            + [(to_tensor(img), "neg") for img in neg])
    seed = config.train.seed
    for step in range(config.train.steps):
        rng = stream(seed, "train-prompts", step)
        idx = rng.integers(0, len(pool), size=config.train.batch_size)
        batch = {"images": [pool[int(i)][0] for i in idx],
                 "labels": [pool[int(i)][1] for i in idx]}
        loss = dual_prompt_finetune_step(batch, bank, model, opt, rng)
        if step % config.train.log_every == 0 or step == config.train.steps - 1:
            manifest.append({"event": "loss", "step": step, "loss": loss})
    cfg_dict = _model_dict(config.model, config.schedule.kind,
                           config.schedule.num_steps)
    cfg_dict.update({"num_pos": config.prompts.num_pos,
                     "num_neg": config.prompts.num_neg,
                     "pos_init_text": config.prompts.pos_init_text,
                     "neg_init_text": config.prompts.neg_init_text})
    final = out_dir / "prompts.ckpt"
    save_prompts_checkpoint(final, bank, model, cfg_dict)
    manifest.append({"event": "checkpoint", "step": config.train.steps,
                     "path": str(final)})
    manifest.append({"event": "done", "steps": config.train.steps,
                     "time": time.time()})
    return manifest


def run_curate(config: RunConfig) -> ExperimentManifest:
    """Generate candidates and keep the ones both filters accept.

    Needs a prompts checkpoint, labeled classifier examples, and optionally
    a JSON response spec for the offline screening client (every item is
    approved when no spec is given).
    """
    prompts_path = require_path(config.paths.get("prompts"),
                                "prompts checkpoint")
    classifier_dir = require_path(config.paths.get("classifier_data"),
                                  "classifier example data")
    if not config.curate.scene_texts:
        raise ConfigError("curate.scene_texts must be non-empty")
    spec_path = config.paths.get("mllm_spec")
    if spec_path:
        require_path(spec_path, "screening response spec")
    out_dir = _out_dir(config)
    manifest = start_run(out_dir, "curate", config)
    bank, model, _ = load_prompts_checkpoint(prompts_path)
    pos, neg = load_labeled_images(classifier_dir)
    classifier = train_quality_classifier(pos, neg)
    client = StubMLLMClient(spec_path if spec_path else {"default": "yes"})
    cur = CurationConfig(out_dir=str(out_dir),
                         scene_texts=config.curate.scene_texts,
                         threshold=config.curate.threshold,
                         omega=config.guidance.omega,
                         steps=config.guidance.steps,
                         seed=config.guidance.seed)
    verdicts = curate(bank, model, classifier, client, cur)
    kept = sum(v.kept for v in verdicts)
    manifest.append({"event": "curated", "candidates": len(verdicts),
                     "kept": kept})
    manifest.append({"event": "done", "time": time.time()})
    return manifest


# ---------------------------------------------------------------- evaluation

def evaluate(pred_dir: str | Path, gt_dir: str | Path,
             external: dict | None = None,
             out_path: str | Path | None = None) -> dict:
    """Filename-matched metric report over two image directories.

    Unmatched files are skipped and listed; identical pairs surface as the
    +inf PSNR sentinel, counted separately so averages stay finite.
    """
    pred_dir = require_path(str(pred_dir), "prediction directory")
    gt_dir = require_path(str(gt_dir), "ground-truth directory")
    preds = {p.name: p for p in list_images(pred_dir)}
    gts = {p.name: p for p in list_images(gt_dir)}
    common = sorted(set(preds) & set(gts))
    warnings = {"unmatched_pred": sorted(set(preds) - set(gts)),
                "unmatched_gt": sorted(set(gts) - set(preds))}
    per_image = {}
    for name in common:
        a = load_image(str(preds[name]))
        b = load_image(str(gts[name]))
        per_image[name] = compute_pair_metrics(a, b, external=external)
    psnrs = [m["psnr"] for m in per_image.values()]
    finite = [p for p in psnrs if np.isfinite(p)]
    inf_count = len(psnrs) - len(finite)
    if psnrs and not finite:
        mean_psnr = float("inf")
    else:
        mean_psnr = float(np.mean(finite)) if finite else 0.0
    ssims = [m["ssim_y"] for m in per_image.values()]
    report = {
        "per_image": per_image,
        "aggregate": {
            "count": len(common),
            "mean_psnr": mean_psnr,
            "psnr_inf_count": inf_count,
            "mean_ssim_y": float(np.mean(ssims)) if ssims else 0.0,
        },
        "warnings": warnings,
        "warning_count": len(warnings["unmatched_pred"])
                         + len(warnings["unmatched_gt"]),
    }
    if out_path is not None:
        write_report(str(out_path), report)
    return report
