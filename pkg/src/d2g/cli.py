"""Command-line entry point: ``d2g <command> [options] [key=value ...]``.

Exit status: 0 success, 1 runtime failure, 2 invalid config, 3 missing
upstream artifact.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np
import torch

from . import codec as codec_mod
from . import config as config_mod
from . import distiller, evalsuite, pairgen, pipeline
from . import teacher as teacher_mod
from .errors import (ConfigError, CorruptCheckpoint, CorruptShard, DependencyError, InvalidArgument,
                     InvalidState)
from .perceptual import AugmentationSpec, bench_loss, format_records, latent_rms, reconstruct_single

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_DEPENDENCY = 0, 1, 2, 3

log = logging.getLogger("d2g")


def _need(path, flag):
    if not path:
        raise DependencyError(f"<{flag} not given>", flag)
    if not os.path.exists(path):
        raise DependencyError(path, flag)
    return path


def _prepare_out(args, cfg):
    os.makedirs(args.out, exist_ok=True)
    config_mod.write_config(cfg, os.path.join(args.out, "config.yaml"))
    handler = logging.FileHandler(os.path.join(args.out, "run.log"))
    handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
    logging.getLogger().addHandler(handler)


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)


# ------------------------------------------------------------------ commands

def cmd_train_codec(args, cfg):
    train = pipeline.load_data(cfg)[0]
    codec = pipeline.build_codec(cfg, train[0])
    path = os.path.join(args.out, "codec.cdc")
    codec_mod.save_codec(codec, path)
    held = pipeline.load_data(cfg)[1]
    _write_json(os.path.join(args.out, "codec-report.json"),
                {"heldout_psnr": codec_mod.reconstruction_psnr(codec, held[0])})
    print(path)


def cmd_train_teacher(args, cfg):
    codec = codec_mod.load_codec(_need(args.codec, "--codec"))
    train, held = pipeline.load_data(cfg)
    tm = pipeline.build_teacher(cfg, codec, train)
    path = os.path.join(args.out, "teacher.tch")
    teacher_mod.save_teacher(tm, path)
    lat = codec_mod.encode_batched(codec, held[0])
    _write_json(os.path.join(args.out, "teacher-report.json"),
                {"heldout_denoising_loss": teacher_mod.denoising_loss(tm, lat, held[1])})
    print(path)


def cmd_train_perceptual(args, cfg):
    codec = codec_mod.load_codec(_need(args.codec, "--codec"))
    train, held = pipeline.load_data(cfg)
    bundle = pipeline.build_perceptual(cfg, codec, train, held)
    pipeline.save_perceptual(bundle, args.out)
    print(json.dumps(bundle.report, sort_keys=True))


def cmd_gen_pairs(args, cfg):
    tm = teacher_mod.load_teacher(_need(args.teacher, "--teacher"))
    p = cfg.pairs
    solver = pairgen.SolverConfig(p.solver, args.steps or p.steps, p.guidance if args.cfg is None else args.cfg)
    count = args.count or p.count
    seed = p.seed if args.seed is None else args.seed
    shards = pairgen.generate_pairs(tm, count, solver, seed, tm.latent_shape, workers=args.workers or p.workers,
                                    shard_size=p.shard_size, out_dir=args.out)
    if args.verify:
        bad = []
        for shard in shards:
            bad += pairgen.verify_shard(shard, tm, k=p.verify, seed=seed)
        if bad:
            raise InvalidState(f"{len(bad)} records failed re-verification: {bad[:8]}")
        log.info("verified %d records per shard", p.verify)
    print(f"{count} pairs in {len(shards)} shard(s) under {args.out}")


def cmd_rewire(args, cfg):
    shard = pairgen.read_shard(_need(args.inp, "--in"))
    out = pairgen.rewire_pairs(shard, args.seed)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    pairgen.write_shard(out, args.out)
    config_mod.write_config(cfg, os.path.splitext(args.out)[0] + ".config.yaml")
    print(args.out)


def _load_distill_inputs(args):
    pairs_dir = _need(args.pairs, "--pairs")
    shards = pairgen.read_shards(pairs_dir)
    if not shards:
        raise DependencyError(os.path.join(pairs_dir, "pairs-*.d2gp"), "--pairs")
    tm = teacher_mod.load_teacher(_need(args.teacher, "--teacher"))
    pb = pipeline.load_perceptual(_need(args.perceptual, "--perceptual"))
    return shards, tm, pb


def cmd_distill(args, cfg):
    shards, tm, pb = _load_distill_inputs(args)
    gen = distiller.load_generator(args.init) if args.init else None
    run = pipeline.run_distill(cfg, tm, shards, pb.latent, out_dir=args.out, stage=args.stage, generator=gen)
    summary = {}
    for name, res in (("stage1", run.stage1), ("stage2", run.stage2)):
        if res is not None:
            summary[name] = {"probe_start": res.probe_start, "probe_end": res.probe_end,
                             "checkpoints": res.checkpoints}
    _write_json(os.path.join(args.out, "distill-summary.json"), summary)
    print(json.dumps(summary, sort_keys=True))


def _write_grid(images, path, cols=10):
    """Binary PPM grid of images in [-1, 1]."""
    x = ((images.clamp(-1, 1) + 1) * 127.5).round().byte().permute(0, 2, 3, 1).numpy()
    n, h, w, _ = x.shape
    rows = -(-n // cols)
    grid = np.zeros((rows * h, cols * w, 3), np.uint8)
    for i in range(n):
        r, c = divmod(i, cols)
        grid[r * h:(r + 1) * h, c * w:(c + 1) * w] = x[i]
    with open(path, "wb") as fh:
        fh.write(f"P6 {cols * w} {rows * h} 255\n".encode())
        fh.write(grid.tobytes())


def cmd_eval(args, cfg):
    G = distiller.load_generator(_need(args.generator, "--generator"))
    tm = teacher_mod.load_teacher(_need(args.teacher, "--teacher"))
    codec = codec_mod.load_codec(_need(args.codec, "--codec"))
    pb = pipeline.load_perceptual(_need(args.perceptual, "--perceptual"))
    _, held = pipeline.load_data(cfg)
    report = pipeline.evaluate(cfg, G, tm, codec, pb, held, seed=cfg.seed)
    with open(os.path.join(args.out, "metrics.json"), "w") as fh:
        fh.write(report.to_json() + "\n")
    print(report.to_json())
    print(report.table())
    if cfg.eval.grid:
        with torch.no_grad():
            lat, _ = evalsuite.generate_latents(G, 40, tm.latent_shape, tm.condition_arity, cfg.seed)
            _write_grid(codec_mod.decode_batched(codec, lat), os.path.join(args.out, "samples.ppm"))


def cmd_bench_loss(args, cfg):
    codec = codec_mod.load_codec(_need(args.codec, "--codec"))
    pb = pipeline.load_perceptual(_need(args.perceptual, "--perceptual"))
    _, held = pipeline.load_data(cfg)
    n = cfg.perceptual.bench_batch
    lat = codec_mod.encode_batched(codec, held[0][:2 * n])
    records = bench_loss(pb.latent, pb.pixel, codec, lat[:n], lat[n:2 * n], trials=cfg.perceptual.bench_trials)
    text = format_records(records)
    with open(os.path.join(args.out, "bench.jsonl"), "w") as fh:
        fh.write(text)
    print(text, end="")


def cmd_reconstruct(args, cfg):
    codec = codec_mod.load_codec(_need(args.codec, "--codec"))
    pb = pipeline.load_perceptual(_need(args.perceptual, "--perceptual"))
    _, held = pipeline.load_data(cfg)
    p = cfg.perceptual
    targets = codec_mod.encode_batched(codec, held[0][:p.reconstruct_targets])
    spec = AugmentationSpec(categories=frozenset(p.augmentations))
    rows = []
    for i, target in enumerate(targets):
        row = {"target": i}
        for mode in ("mse", "latentlpips", "e_latentlpips"):
            rec, curve = reconstruct_single(mode, target, p.reconstruct_iters, seed=i, dist=pb.latent, spec=spec,
                                            lr=p.reconstruct_lr)
            row[mode] = latent_rms(rec, target[None])
            _write_json(os.path.join(args.out, f"curve-{i}-{mode}.json"), curve)
        rows.append(row)
        print(json.dumps(row, sort_keys=True))
    _write_json(os.path.join(args.out, "reconstruct.json"), rows)


def cmd_pipeline(args, cfg):
    """Every stage in order, each artifact in its own subdirectory of --out."""
    train, held = pipeline.load_data(cfg)
    sub = lambda name: os.makedirs(os.path.join(args.out, name), exist_ok=True) or os.path.join(args.out, name)
    codec = pipeline.build_codec(cfg, train[0])
    codec_mod.save_codec(codec, os.path.join(sub("codec"), "codec.cdc"))
    tm = pipeline.build_teacher(cfg, codec, train)
    teacher_mod.save_teacher(tm, os.path.join(sub("teacher"), "teacher.tch"))
    shards = pipeline.build_pairs(cfg, tm, sub("pairs"))
    pb = pipeline.build_perceptual(cfg, codec, train, held)
    pipeline.save_perceptual(pb, sub("perceptual"))
    run = pipeline.run_distill(cfg, tm, shards, pb.latent, out_dir=sub("distill"), stage="both")
    report = pipeline.evaluate(cfg, run.final, tm, codec, pb, held, seed=cfg.seed)
    with open(os.path.join(sub("eval"), "metrics.json"), "w") as fh:
        fh.write(report.to_json() + "\n")
    print(report.to_json())
    print(report.table())


COMMANDS = {
    "train-codec": cmd_train_codec,
    "train-teacher": cmd_train_teacher,
    "gen-pairs": cmd_gen_pairs,
    "train-perceptual": cmd_train_perceptual,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "bench-loss": cmd_bench_loss,
    "reconstruct": cmd_reconstruct,
    "rewire": cmd_rewire,
    "pipeline": cmd_pipeline,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config")
    common.add_argument("--preset", choices=config_mod.PRESETS, help="start from a bundled preset")
    common.add_argument("--deterministic", action="store_true", help="force reproducible single-thread kernels")
    common.add_argument("--verbose", "-v", action="store_true")
    common.add_argument("overrides", nargs="*", metavar="key=value", help="dotted config overrides")

    ap = argparse.ArgumentParser(prog="d2g", description="one-step distillation of a toy latent diffusion teacher")
    sp = ap.add_subparsers(dest="command", required=True)

    def add(name, help_text, out=True):
        p = sp.add_parser(name, parents=[common], help=help_text)
        if out:
            p.add_argument("--out", required=True)
        return p

    add("train-codec", "train the latent autoencoder")
    p = add("train-teacher", "train the conditional diffusion teacher")
    p.add_argument("--codec")
    p = add("gen-pairs", "solve the teacher ODE from seeded noise and write pair shards")
    p.add_argument("--teacher")
    p.add_argument("--count", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--cfg", type=float, help="guidance scale")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--verify", action="store_true")
    p = add("train-perceptual", "train and calibrate pixel and latent perceptual distances")
    p.add_argument("--codec")
    p = add("distill", "regression (stage 1) and adversarial (stage 2) distillation")
    p.add_argument("--stage", choices=("1", "2", "both"))
    p.add_argument("--pairs")
    p.add_argument("--teacher")
    p.add_argument("--perceptual")
    p.add_argument("--init", help="generator checkpoint to start from")
    p = add("eval", "metric report for a generator checkpoint")
    for flag in ("--generator", "--teacher", "--codec", "--perceptual"):
        p.add_argument(flag)
    p = add("bench-loss", "time the latent and decode-then-pixel loss paths")
    p.add_argument("--codec")
    p.add_argument("--perceptual")
    p = add("reconstruct", "single-latent reconstruction probe")
    p.add_argument("--codec")
    p.add_argument("--perceptual")
    p = add("rewire", "randomly re-pair noises and targets of a shard", out=False)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    add("pipeline", "run every stage end to end")
    return ap


def resolve_config(args):
    if args.preset and args.config:
        raise ConfigError([("--preset", "give either --preset or --config, not both")])
    cfg = config_mod.preset(args.preset) if args.preset else config_mod.ExperimentConfig()
    if args.config:
        cfg = config_mod.parse_config(args.config)
    if getattr(args, "stage", None):
        args.overrides = list(args.overrides) + [f"distill.stage={args.stage}"]
    if args.deterministic:
        args.overrides = list(args.overrides) + ["deterministic=true"]
    return config_mod.apply_overrides(cfg, args.overrides)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        pipeline.set_deterministic(cfg.deterministic, cfg.seed)
        if args.command != "rewire":
            _prepare_out(args, cfg)
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (InvalidArgument, InvalidState, CorruptShard, CorruptCheckpoint, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
