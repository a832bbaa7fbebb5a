"""Small end-to-end restoration run: synthesize pairs, train, compare.

Builds a procedural-texture dataset, pretrains a compact backbone on the
clean crops, trains the degradation remover and the control branch, then
restores held-out images and prints PSNR / SSIM against the bicubic
baseline.  Finishes in a few minutes on a laptop CPU; the tuned full-size
recipe lives in tests/test_acceptance.py (restoration-beats-bicubic test).

Usage: python scripts/restoration_demo.py [--out OUT_DIR]
"""

import argparse
import dataclasses
import time

import cv2
import numpy as np
import torch

from diffrestore.config import ModelSection
from diffrestore.control import (ConditionEncoder, ControlBranch, ConvRemover,
                                 RestorationModel, bicubic_up, control_forward,
                                 restore, to_tensor)
from diffrestore.degrade import (DegradeConfig, build_dataset, load_image,
                                 read_manifest)
from diffrestore.metrics import psnr, ssim_y
from diffrestore.schedule import GuidanceConfig, diffusion_loss, make_schedule
from diffrestore.train import build_backbone


class CenteredCodec:
    """Zero-mean pixel latents; keeps the sampling prior near the data."""

    def encode(self, img):
        return (img - 0.5) * 2.0

    def decode(self, z):
        return z / 2.0 + 0.5


def make_sources(n=10, side=48, seed=42):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        coarse = rng.uniform(0.15, 0.85, size=(4, 4, 3)).astype(np.float32)
        img = cv2.resize(coarse, (side, side), interpolation=cv2.INTER_CUBIC)
        out.append(np.clip(img, 0.0, 1.0))
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="out/restoration_demo",
                    help="dataset / artifact directory")
    ap.add_argument("--pairs", type=int, default=120)
    args = ap.parse_args()
    t0 = time.time()

    dcfg = DegradeConfig(blur_sigma=(0.5, 1.0), resize_scale=(0.25, 0.26),
                         noise_sigma=(0.15, 50.0 / 255.0),
                         jpeg_quality=(30, 40), gaussian_noise_prob=1.0,
                         second_order_prob=0.0)
    build_dataset(make_sources(), args.out, n_pairs=args.pairs, crop=32,
                  seed=5, config=dcfg)
    recs = read_manifest(args.out + "/manifest.jsonl")
    pairs = [(load_image(args.out + "/" + r.hq_path),
              load_image(args.out + "/" + r.lq_path)) for r in recs]
    train_pairs, held = pairs[:-10], pairs[-10:]
    print(f"dataset: {len(train_pairs)} train / {len(held)} held-out "
          f"({time.time() - t0:.0f}s)")

    codec = CenteredCodec()
    sched = make_schedule(200, "linear")
    cfg = ModelSection(latent_hw=32, latent_channels=3, patch_size=4,
                       hidden_dim=64, num_blocks=2, num_heads=4, text_dim=8)
    net, _ = build_backbone(cfg, seed=0)
    prng = np.random.default_rng(0)

    opt = torch.optim.Adam(net.parameters(), lr=1e-3)
    sch = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=1200,
                                                     eta_min=1e-4)
    for step in range(1200):
        opt.zero_grad()
        idx = prng.integers(0, len(train_pairs), size=4)
        ls = [diffusion_loss(net,
                             codec.encode(torch.from_numpy(train_pairs[i][0])),
                             None, sched, prng) for i in idx]
        loss = torch.stack(ls).mean()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(net.parameters(), 1.0)
        opt.step()
        sch.step()
    print(f"backbone pretrained, loss {float(loss.detach()):.4f} "
          f"({time.time() - t0:.0f}s)")

    torch.manual_seed(1)
    remover = ConvRemover(scale=4, width=32)
    ropt = torch.optim.Adam(remover.parameters(), lr=5e-3)
    for step in range(600):
        idx = prng.integers(0, len(train_pairs), size=8)
        ropt.zero_grad()
        ls = [((remover(to_tensor(train_pairs[i][1]))
                - torch.from_numpy(train_pairs[i][0])) ** 2).mean()
              for i in idx]
        torch.stack(ls).mean().backward()
        ropt.step()
    print(f"remover trained ({time.time() - t0:.0f}s)")

    torch.manual_seed(2)
    control = ControlBranch(net, num_experts=3)
    encoder = ConditionEncoder(cfg.latent_hw, cfg.patch_size, cfg.hidden_dim)
    for p in net.parameters():
        p.requires_grad_(False)
    for p in remover.parameters():
        p.requires_grad_(False)
    params = list(control.parameters()) + list(encoder.parameters())
    copt = torch.optim.Adam(params, lr=1e-3)
    csch = torch.optim.lr_scheduler.CosineAnnealingLR(copt, T_max=2000,
                                                      eta_min=5e-5)
    for step in range(2000):
        copt.zero_grad()
        idx = prng.integers(0, len(train_pairs), size=3)
        ls = []
        for i in idx:
            hq, lq = train_pairs[i]
            lq_t = to_tensor(lq)
            with torch.no_grad():
                ref = remover(lq_t)
            x_lq = encoder(bicubic_up(lq_t, 4))
            x_ref = encoder(ref)

            def fn(z_t, t, cond):
                res = control_forward(net, control, z_t, t, None, x_lq, x_ref)
                return net(z_t, t, residuals=res)

            ls.append(diffusion_loss(fn, codec.encode(torch.from_numpy(hq)),
                                     None, sched, prng))
        loss = torch.stack(ls).mean()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, 1.0)
        copt.step()
        csch.step()
    print(f"control branch trained, loss {float(loss.detach()):.4f} "
          f"({time.time() - t0:.0f}s)")

    bundle = RestorationModel(backbone=net, control=control, remover=remover,
                              encoder=encoder, sched=sched, autoencoder=codec)
    guid = GuidanceConfig(omega=1.0, steps=4, seed=0)
    rows = []
    for hq, lq in held:
        outs = [restore(lq, bundle, dataclasses.replace(guid, seed=s))
                for s in range(4)]
        avg = np.clip(np.mean(outs, axis=0), 0.0, 1.0)
        bic = np.clip(bicubic_up(to_tensor(lq), 4).numpy(), 0.0, 1.0)
        rows.append((psnr(avg, hq), ssim_y(avg, hq),
                     psnr(bic, hq), ssim_y(bic, hq)))
    rows = np.array(rows)
    print(f"restored: PSNR {rows[:, 0].mean():.2f}  SSIM {rows[:, 1].mean():.4f}")
    print(f"bicubic : PSNR {rows[:, 2].mean():.2f}  SSIM {rows[:, 3].mean():.4f}")
    print(f"total {time.time() - t0:.0f}s")


if __name__ == "__main__":
    main()
