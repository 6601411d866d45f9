"""A guided tour of the whole method on the `smoke` preset, calling the
library directly instead of the CLI.  Takes a couple of minutes on CPU.

    python3 demos/smoke_walkthrough.py [--out /tmp/walkthrough]
"""

import argparse
import os
import time

import torch

from d2g import codec as codec_mod, config, pipeline
from d2g.codec import DECODE_CALLS
from d2g.distiller import one_step_generate
from d2g.teacher import ddim_solve


def banner(text):
    print(f"\n=== {text}")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="walkthrough-out")
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)
    cfg = config.preset("smoke")
    pipeline.set_deterministic(True, cfg.seed)
    t0 = time.time()

    banner("toy data and latent codec")
    train, held = pipeline.load_data(cfg)
    codec = pipeline.build_codec(cfg, train[0])
    z = codec_mod.encode(codec, held[0][:4])
    print(f"{len(train[0])} training images {tuple(train[0].shape[1:])} -> latents {tuple(z.shape[1:])}")

    banner("teacher: a small class-conditional latent diffusion model")
    teacher = pipeline.build_teacher(cfg, codec, train)
    noise = torch.randn(4, *teacher.latent_shape, generator=torch.Generator().manual_seed(0))
    cls = torch.arange(4) % teacher.condition_arity
    many = ddim_solve(teacher, noise, cls, cfg.pairs.steps, cfg.pairs.guidance)
    print(f"schedule {teacher.schedule.kind}, {cfg.pairs.steps}-step DDIM sample std {many.std():.3f}")

    banner("noise -> solution pairs")
    shards = pipeline.build_pairs(cfg, teacher, os.path.join(args.out, "pairs"))
    print(f"{sum(len(s) for s in shards)} pairs in {len(shards)} shard(s)")

    banner("perceptual distance trained directly on latents")
    perc = pipeline.build_perceptual(cfg, codec, train, held)
    for k, v in perc.report.items():
        print(f"  {k}: {v:.3f}")

    banner("distillation: regression, then regression + GAN")
    decodes = DECODE_CALLS.count
    run = pipeline.run_distill(cfg, teacher, shards, perc.latent, stage="both")
    print(f"stage-1 probe loss {run.stage1.probe_start:.4f} -> {run.stage1.probe_end:.4f}")
    print(f"decoder calls during training: {DECODE_CALLS.count - decodes}")

    banner("one network evaluation instead of many")
    with torch.no_grad():
        one = one_step_generate(run.final, noise, cls)
    print(f"RMS(one-step, teacher {cfg.pairs.steps}-step) on 4 samples: {(one - many).pow(2).mean().sqrt():.3f}")

    banner("metrics")
    report = pipeline.evaluate(cfg, run.final, teacher, codec, perc, held, seed=cfg.seed)
    print(report.table())
    print(f"\ntotal {time.time() - t0:.0f}s")


if __name__ == "__main__":
    main()
