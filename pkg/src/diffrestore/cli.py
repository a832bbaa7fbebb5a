"""Command line front end.

One subcommand per pipeline stage.  Exit codes: 0 on success, 2 for
configuration problems (bad flags, missing files, invalid settings), 1 for
runtime failures.  Settings come from an optional JSON config file; any
flag given on the command line wins over the file.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import (PAPER_SCALE_PRESET, ConfigError, apply_overrides,
                     config_from_dict, config_to_dict, load_config,
                     require_path)
from .degrade import DegradeConfig, build_dataset, load_image, save_image
from .schedule import GuidanceConfig
from .train import (evaluate, load_restoration_checkpoint, run_curate,
                    train_backbone, train_prompt_bank, train_restoration)

IMAGE_PATTERNS = ("*.png", "*.jpg", "*.jpeg")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffrestore",
        description="degradation synthesis, restoration training, prompt "
                    "curation, and evaluation")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("init-config",
                       help="write a config file with default settings")
    p.add_argument("--out", help="output JSON path (default: stdout)")
    p.add_argument("--paper-scale", action="store_true",
                   help="use full-scale model/training settings (documented "
                        "reference; far beyond desk-scale budgets)")

    p = sub.add_parser("degrade",
                       help="synthesize a paired HQ/LQ training dataset")
    p.add_argument("--src", required=True, help="directory of source images")
    p.add_argument("--out", required=True, help="dataset output directory")
    p.add_argument("--n-pairs", type=int, default=100)
    p.add_argument("--crop", type=int, default=64,
                   help="HQ patch side in pixels")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="JSON config (degrade section)")

    for name, help_text in (
            ("train-backbone", "pretrain the generative backbone on clean "
                               "images"),
            ("train-restore", "train the control branch on paired data"),
            ("train-prompts", "finetune prompt tokens on labeled images")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--data", help="training data directory")
        p.add_argument("--out", help="run output directory")
        p.add_argument("--steps", type=int, help="training steps")
        p.add_argument("--batch-size", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--set", action="append", default=[],
                       metavar="KEY=VALUE",
                       help="override any dotted config key")
        if name != "train-backbone":
            p.add_argument("--backbone", help="pretrained backbone "
                                              "checkpoint")
        if name == "train-restore":
            p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("curate", help="generate candidates and keep the "
                                      "ones both filters accept")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--prompts", help="prompts checkpoint")
    p.add_argument("--classifier-data",
                   help="directory with pos/ and neg/ example images")
    p.add_argument("--mllm-spec", help="JSON canned responses for the "
                                       "offline screening client")
    p.add_argument("--out", help="output directory")
    p.add_argument("--scene", action="append",
                   help="scene text (repeatable)")
    p.add_argument("--threshold", type=float,
                   help="classifier keep threshold")
    p.add_argument("--omega", type=float, help="guidance scale")
    p.add_argument("--steps", type=int, help="sampler steps")
    p.add_argument("--seed", type=int, help="sampler seed")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("restore", help="restore one low-quality image")
    p.add_argument("--in", dest="in_path", required=True,
                   help="low-quality input image")
    p.add_argument("--ckpt", required=True, help="restoration checkpoint")
    p.add_argument("--out", required=True, help="output PNG path")
    p.add_argument("--omega", type=float, default=4.5)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval", help="metric report over matched filenames")
    p.add_argument("--pred", required=True, help="predictions directory")
    p.add_argument("--gt", required=True, help="ground truth directory")
    p.add_argument("--out", help="report JSON path")
    return parser


def _set_overrides(pairs: list[str]) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects KEY=VALUE, got {pair!r}")
        key, _, raw = pair.partition("=")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _train_config(args, extra: dict):
    config = load_config(args.config)
    overrides = {"paths.data": args.data, "paths.out": args.out,
                 "train.steps": args.steps,
                 "train.batch_size": args.batch_size,
                 "optimizer.lr": args.lr, "train.seed": args.seed}
    overrides.update(extra)
    overrides.update(_set_overrides(args.set))
    return apply_overrides(config, overrides)


def _merge_preset(base: dict, preset: dict) -> dict:
    out = {k: dict(v) if isinstance(v, dict) else v for k, v in base.items()}
    for section, values in preset.items():
        out.setdefault(section, {}).update(values)
    return out


def _cmd_init_config(args) -> int:
    data = config_to_dict(config_from_dict({}))
    if args.paper_scale:
        data = _merge_preset(data, PAPER_SCALE_PRESET)
        config_from_dict(data)  # still has to validate
    text = json.dumps(data, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_degrade(args) -> int:
    config = load_config(args.config)
    src = require_path(args.src, "source image directory")
    if args.n_pairs < 1:
        raise ConfigError(f"--n-pairs must be >= 1, got {args.n_pairs}")
    if args.crop < 4:
        raise ConfigError(f"--crop must be >= 4, got {args.crop}")
    try:
        degrade_config = DegradeConfig(**config.degrade)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"degrade section: {exc}") from exc
    paths = sorted(p for pat in IMAGE_PATTERNS for p in src.glob(pat))
    if not paths:
        raise ConfigError(f"no source images under {src}")
    sources = [load_image(str(p)) for p in paths]
    records = build_dataset(sources, args.out, args.n_pairs, args.crop,
                            args.seed, degrade_config)
    print(f"wrote {len(records)} pairs under {args.out}")
    return 0


def _cmd_train_backbone(args) -> int:
    train_backbone(_train_config(args, {}))
    return 0


def _cmd_train_restore(args) -> int:
    train_restoration(_train_config(args, {
        "paths.backbone": args.backbone, "paths.resume": args.resume}))
    return 0


def _cmd_train_prompts(args) -> int:
    train_prompt_bank(_train_config(args, {
        "paths.backbone": args.backbone}))
    return 0


def _cmd_curate(args) -> int:
    config = load_config(args.config)
    overrides = {"paths.prompts": args.prompts,
                 "paths.classifier_data": args.classifier_data,
                 "paths.mllm_spec": args.mllm_spec,
                 "paths.out": args.out,
                 "curate.scene_texts": args.scene,
                 "curate.threshold": args.threshold,
                 "guidance.omega": args.omega,
                 "guidance.steps": args.steps,
                 "guidance.seed": args.seed}
    overrides.update(_set_overrides(args.set))
    run_curate(apply_overrides(config, overrides))
    return 0


def _cmd_restore(args) -> int:
    from .control import restore

    in_path = require_path(args.in_path, "input image")
    require_path(args.ckpt, "restoration checkpoint")
    bundle, _ = load_restoration_checkpoint(args.ckpt)
    img = load_image(str(in_path))
    cfg = bundle.backbone.cfg
    scale = bundle.remover.scale
    if (img.shape[0] * scale, img.shape[1] * scale) != (cfg.latent_hw,
                                                        cfg.latent_hw):
        raise ConfigError(
            f"input {img.shape[0]}x{img.shape[1]} x{scale} does not match "
            f"the model's {cfg.latent_hw}x{cfg.latent_hw} output size")
    guidance = GuidanceConfig(omega=args.omega, steps=args.steps,
                              seed=args.seed)
    try:
        guidance.validate(bundle.sched)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = restore(img, bundle, guidance)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_image(args.out, out)
    print(f"wrote {args.out}")
    return 0


def _cmd_eval(args) -> int:
    report = evaluate(args.pred, args.gt, out_path=args.out)
    agg = report["aggregate"]
    print(json.dumps({"count": agg["count"], "mean_psnr": agg["mean_psnr"],
                      "psnr_inf_count": agg["psnr_inf_count"],
                      "mean_ssim_y": agg["mean_ssim_y"],
                      "warning_count": report["warning_count"]}))
    for name in report["warnings"]["unmatched_pred"]:
        print(f"warning: no ground truth for {name}", file=sys.stderr)
    for name in report["warnings"]["unmatched_gt"]:
        print(f"warning: no prediction for {name}", file=sys.stderr)
    return 0


_COMMANDS = {
    "init-config": _cmd_init_config,
    "degrade": _cmd_degrade,
    "train-backbone": _cmd_train_backbone,
    "train-restore": _cmd_train_restore,
    "train-prompts": _cmd_train_prompts,
    "curate": _cmd_curate,
    "restore": _cmd_restore,
    "eval": _cmd_eval,
}


def cli(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code
        return code if isinstance(code, int) else (0 if code is None else 2)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    raise SystemExit(cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
