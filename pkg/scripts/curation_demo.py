"""Prompt-bank finetune plus filtered generation, end to end on toy data.

Pretrains a tiny text-conditional backbone on two synthetic image classes,
finetunes a positive/negative prompt bank, trains the quality classifier,
and runs the curation loop with a canned screening client.  Prints the
keep/drop breakdown and where the manifest landed.

Usage: python scripts/curation_demo.py [--out OUT_DIR]
"""

import argparse
import time

import numpy as np
import torch

from diffrestore.backbone import BackboneConfig, DiTBackbone, TextEmbedder
from diffrestore.curation import (ClassifierConfig, CurationConfig,
                                  StubMLLMClient, Text2Image, curate,
                                  dual_prompt_finetune_step,
                                  finetune_parameters, init_prompt_bank,
                                  train_quality_classifier)
from diffrestore.schedule import diffusion_loss, make_schedule


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="out/curation_demo")
    ap.add_argument("--candidates", type=int, default=40)
    args = ap.parse_args()
    t0 = time.time()

    cfg = BackboneConfig(latent_hw=8, latent_channels=3, patch_size=4,
                         hidden_dim=32, num_blocks=2, num_heads=4, text_dim=12)
    net = DiTBackbone(cfg)
    emb = TextEmbedder(text_dim=cfg.text_dim)
    sched = make_schedule(10, "cosine")
    model = Text2Image(backbone=net, embedder=emb, sched=sched)

    ii, jj = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")
    checker = torch.from_numpy(
        np.where((ii + jj) % 2 == 0, 1.0, -1.0).astype(np.float32))[:, :, None]

    def labeled(seed, positive):
        g = torch.Generator().manual_seed(seed)
        sign = 1.0 if positive else -1.0
        base = 0.5 + 0.06 * sign * checker \
            + 0.05 * torch.randn(8, 8, 3, generator=g)
        return base.clamp(0.0, 1.0)

    with torch.no_grad():
        pos_anchor = emb.encode("bright clean photo")
        neg_anchor = emb.encode("dark murky photo")
    rng = np.random.default_rng(0)
    opt = torch.optim.Adam(net.parameters(), lr=5e-3)
    for step in range(800):
        opt.zero_grad()
        drop = step % 10 == 9
        ls = [diffusion_loss(net, labeled(step * 7 + j, True),
                             None if drop else pos_anchor, sched, rng)
              for j in range(3)]
        ls += [diffusion_loss(net, labeled(step * 7 + j, False),
                              None if drop else neg_anchor, sched, rng)
               for j in range(3, 6)]
        torch.stack(ls).mean().backward()
        opt.step()
    print(f"backbone pretrained ({time.time() - t0:.0f}s)")

    bank = init_prompt_bank(8, 8, pos_init_text="plain photo",
                            neg_init_text="plain photo", embedder=emb)
    fopt = torch.optim.AdamW(finetune_parameters(bank, net), lr=1e-2)
    frng = np.random.default_rng(1)
    for step in range(400):
        images = [labeled(9000 + step * 7 + j, j < 3) for j in range(6)]
        labels = ["pos"] * 3 + ["neg"] * 3
        dual_prompt_finetune_step({"images": images, "labels": labels},
                                  bank, model, fopt, frng)
    print(f"prompt bank finetuned ({time.time() - t0:.0f}s)")

    pos_set = [labeled(50000 + i, True) for i in range(30)]
    neg_set = [labeled(50000 + i, False) for i in range(30)]
    clf = train_quality_classifier(pos_set, neg_set,
                                   ClassifierConfig(lr=0.1, steps=100,
                                                    l2=1e-2))

    client = StubMLLMClient({"default": "yes",
                             "overrides": {"cand_000001": "no, low detail"}})
    ccfg = CurationConfig(out_dir=args.out,
                          scene_texts=tuple([""] * args.candidates),
                          threshold=0.5, omega=4.0, steps=10, seed=123)
    verdicts = curate(bank, model, clf, client, ccfg)
    kept = sum(v.kept for v in verdicts)
    below = sum(v.mllm_pass is None for v in verdicts)
    vetoed = sum(v.mllm_pass is False for v in verdicts)
    print(f"curated {len(verdicts)} candidates: kept {kept}, "
          f"classifier-rejected {below}, screen-vetoed {vetoed}")
    print(f"manifest: {args.out}/manifest.jsonl")
    print(f"total {time.time() - t0:.0f}s")


if __name__ == "__main__":
    main()
