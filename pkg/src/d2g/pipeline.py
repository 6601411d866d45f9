"""Config-driven builders for every stage of the toy benchmark, with an
on-disk artifact cache keyed by the configuration that produced each artifact.

The CLI commands and the experiment drivers both go through these functions.
"""

import json
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import codec as codec_mod
from . import data as data_mod
from . import distiller, evalsuite, pairgen
from . import teacher as teacher_mod
from .adversarial import MixAndMatchConfig, build_discriminator
from .errors import DependencyError
from .nets import UNetConfig
from .perceptual import (AugmentationSpec, BackboneTrainConfig, CalibratedDistance, CalibrationConfig,
                         DistortionConfig, accuracy, calibrate, load_distance, make_synthetic_2afc,
                         save_distance, train_backbone, two_afc_agreement)

log = logging.getLogger(__name__)

HELDOUT_SEED_OFFSET = 1000


def set_deterministic(flag=True, seed=0):
    """Force reproducible CPU kernels: deterministic algorithms, one thread."""
    if flag:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)


def cache_root():
    return os.environ.get("D2G_CACHE") or os.path.join(os.path.expanduser("~"), ".cache", "d2g")


def require(path):
    if not path or not os.path.exists(path):
        raise DependencyError(path or "<unset>", f"missing upstream artifact: {path}")
    return path


# --------------------------------------------------------------------- data

def load_data(cfg):
    d = cfg.data
    train = data_mod.make_dataset(d.train_images, d.image_size, seed=d.seed)
    held = data_mod.make_dataset(d.heldout_images, d.image_size, seed=d.seed + HELDOUT_SEED_OFFSET)
    return train, held


# -------------------------------------------------------------------- codec

def build_codec(cfg, images):
    c = cfg.codec
    if c.kind == "identity":
        return codec_mod.identity_codec()
    return codec_mod.train_codec(images, codec_mod.CodecTrainConfig(
        steps=c.steps, batch_size=c.batch_size, lr=c.lr, downsample_factor=c.downsample_factor,
        latent_channels=c.latent_channels, width=c.width, seed=cfg.seed))


# --------------------------------------------------------------- perceptual

@dataclass
class PerceptualBundle:
    pixel: CalibratedDistance
    latent: CalibratedDistance
    report: dict = field(default_factory=dict)


def build_perceptual(cfg, codec, train, held):
    """Pixel and latent backbones trained as classifiers, each linearly calibrated
    on synthetic 2AFC triplets; agreement measured on held-out triplets."""
    p = cfg.perceptual
    (x, y), (xv, yv) = train, held
    bcfg = BackboneTrainConfig(steps=p.backbone_steps, batch_size=p.batch_size, lr=p.lr,
                               augment=p.augment_training, seed=cfg.seed)
    lat, latv = codec_mod.encode_batched(codec, x), codec_mod.encode_batched(codec, xv)
    pixel_bb = train_backbone(x, y, "pixel", bcfg, widths=tuple(p.widths))
    latent_bb = train_backbone(lat, y, "latent", bcfg, downsample_factor=codec.downsample_factor,
                               widths=tuple(p.widths))
    n_fit = min(p.triplets, len(x))
    n_test = min(max(p.triplets // 4, 1), len(xv))
    enc = lambda im: codec_mod.encode_batched(codec, im)
    cal_cfg = CalibrationConfig(steps=p.calibration_steps, lr=p.calibration_lr, seed=cfg.seed)
    dcfg = DistortionConfig()
    report = {"pixel_accuracy": accuracy(pixel_bb, xv, yv), "latent_accuracy": accuracy(latent_bb, latv, yv)}
    dists = {}
    for name, bb, encoder in (("pixel", pixel_bb, None), ("latent", latent_bb, enc)):
        fit = make_synthetic_2afc(x[:n_fit], dcfg, seed=cfg.seed + 11, encoder=encoder)
        test = make_synthetic_2afc(xv[:n_test], dcfg, seed=cfg.seed + 12, encoder=encoder)
        dist = calibrate(bb, fit, cal_cfg)
        report[f"{name}_2afc_uncalibrated"] = two_afc_agreement(CalibratedDistance(bb), test)
        report[f"{name}_2afc_calibrated"] = two_afc_agreement(dist, test)
        dists[name] = dist
    log.info("perceptual: %s", report)
    return PerceptualBundle(dists["pixel"], dists["latent"], report)


def save_perceptual(bundle, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    save_distance(bundle.pixel, os.path.join(out_dir, "pixel.pcp"))
    save_distance(bundle.latent, os.path.join(out_dir, "latent.pcp"))
    with open(os.path.join(out_dir, "perceptual-report.json"), "w") as fh:
        json.dump(bundle.report, fh, indent=2, sort_keys=True)


def load_perceptual(out_dir):
    report_path = os.path.join(out_dir, "perceptual-report.json")
    report = json.load(open(report_path)) if os.path.exists(report_path) else {}
    return PerceptualBundle(load_distance(require(os.path.join(out_dir, "pixel.pcp"))),
                            load_distance(require(os.path.join(out_dir, "latent.pcp"))), report)


# ------------------------------------------------------------------ teacher

def teacher_net_config(cfg, codec):
    t = cfg.teacher
    return UNetConfig(in_channels=codec.latent_channels, base_channels=t.base_channels,
                      channel_mults=tuple(int(m) for m in t.channel_mults), num_res_blocks=t.num_res_blocks,
                      num_classes=data_mod.NUM_CLASSES, emb_dim=t.emb_dim, dropout=t.dropout)


def build_teacher(cfg, codec, train):
    t = cfg.teacher
    x, y = train
    latents = codec_mod.encode_batched(codec, x)
    tcfg = teacher_mod.TeacherTrainConfig(steps=t.steps, batch_size=t.batch_size, lr=t.lr, p_uncond=t.p_uncond,
                                          seed=cfg.seed, schedule=t.schedule, T=t.T)
    return teacher_mod.train_teacher(latents, y, tcfg, teacher_net_config(cfg, codec))


# -------------------------------------------------------------------- pairs

def solver_config(cfg):
    return pairgen.SolverConfig(cfg.pairs.solver, cfg.pairs.steps, cfg.pairs.guidance)


def build_pairs(cfg, teacher, out_dir=None, count=None, base_seed=None):
    p = cfg.pairs
    count = p.count if count is None else count
    base_seed = p.seed if base_seed is None else base_seed
    return pairgen.generate_pairs(teacher, count, solver_config(cfg), base_seed, teacher.latent_shape,
                                  workers=p.workers, shard_size=p.shard_size, out_dir=out_dir)


# ------------------------------------------------------------------ distill

def train_config(cfg, loss_mode=None, seed=None):
    d, a = cfg.distill, cfg.adversarial
    return distiller.TrainConfig(
        batch_size=d.batch_size, lr_g=d.lr, lr_g_stage2=d.lr_stage2, lr_d=a.lr, betas_g=tuple(d.betas),
        betas_d=tuple(a.betas), weight_decay=d.weight_decay, lambda_gan=d.lambda_gan,
        regression_weight=d.regression_weight, r1_gamma=a.r1_gamma, r1_interval=a.r1_interval,
        ema_start=d.ema_start, ema_beta=d.ema_beta, loss_mode=loss_mode or d.loss_mode, blend=d.blend,
        augmentations=tuple(d.augmentations),
        mix=MixAndMatchConfig(a.swap_latent_prob, a.swap_condition_prob, a.swap_noise_prob),
        stage1_steps=d.stage1_steps, stage2_steps=d.stage2_steps, probe_size=d.probe_size,
        checkpoint_every=d.checkpoint_every, seed=cfg.seed if seed is None else seed)


@dataclass
class DistillRun:
    stage1: distiller.DistillResult = None
    stage2: distiller.DistillResult = None

    @property
    def final(self):
        if self.stage2 is not None:
            return self.stage2.eval_generator
        return self.stage1.generator

    @property
    def log(self):
        return (self.stage1.log if self.stage1 else []) + (self.stage2.log if self.stage2 else [])


def run_distill(cfg, teacher, pairs, latent_dist, out_dir=None, stage=None, loss_mode=None, seed=None,
                generator=None):
    stage = stage or cfg.distill.stage
    tc = train_config(cfg, loss_mode, seed)
    torch.manual_seed(tc.seed)
    G = generator or distiller.generator_from_teacher(teacher)
    run = DistillRun()
    if stage in ("1", "both"):
        run.stage1 = distiller.distill_stage1(G, pairs, latent_dist, tc, out_dir)
    if stage in ("2", "both"):
        D = build_discriminator(teacher, cfg.adversarial.scales)
        run.stage2 = distiller.distill_stage2(G, D, pairs, latent_dist, tc, out_dir)
    return run


# --------------------------------------------------------------------- eval

def evaluate(cfg, G, teacher, codec, perceptual, held, seed=0):
    e = cfg.eval
    xv, _ = held
    G.eval()
    return evalsuite.evaluate(G, teacher, codec, perceptual.pixel.backbone, perceptual.latent, xv,
                              n=e.samples, k=e.k, seed=seed, diversity_n=e.diversity_n,
                              fidelity_n=e.fidelity_n, steps=e.steps, w=e.guidance)


@torch.no_grad()
def frechet_of(cfg, G, teacher, codec, perceptual, held, seed=0):
    """Fréchet proxy alone (cheaper than a full report)."""
    G.eval()
    latents, _ = evalsuite.generate_latents(G, cfg.eval.samples, teacher.latent_shape,
                                            teacher.condition_arity, seed)
    images = codec_mod.decode_batched(codec, latents).clamp(-1, 1)
    return evalsuite.fid_proxy(perceptual.pixel.backbone, held[0], images)


class TeacherSampler(torch.nn.Module):
    """Wraps the teacher's DDIM solve as a generator ``(z, c) -> x``."""

    def __init__(self, teacher, steps, w=1.0):
        super().__init__()
        self.teacher, self.steps, self.w = teacher, steps, w

    def forward(self, z, c):
        return teacher_mod.ddim_solve(self.teacher, z, c, self.steps, self.w)


# -------------------------------------------------------------------- cache

class ArtifactCache:
    """Upstream artifacts stored under ``root`` by config digest.

    Each artifact is rebuilt only when the sections it depends on change.
    """

    def __init__(self, cfg, root=None):
        self.cfg = cfg
        self.root = root or cache_root()
        os.makedirs(self.root, exist_ok=True)
        self._data = None

    def _path(self, name, sections):
        return os.path.join(self.root, f"{name}-{self.cfg.digest(*sections)}")

    def data(self):
        if self._data is None:
            self._data = load_data(self.cfg)
        return self._data

    def codec(self):
        path = self._path("codec", ("data", "codec")) + ".cdc"
        if os.path.exists(path):
            return codec_mod.load_codec(path)
        t0 = time.time()
        c = build_codec(self.cfg, self.data()[0][0])
        codec_mod.save_codec(c, path)
        log.info("codec built in %.1fs", time.time() - t0)
        return codec_mod.load_codec(path)

    def perceptual(self):
        path = self._path("perceptual", ("data", "codec", "perceptual"))
        if os.path.exists(os.path.join(path, "latent.pcp")):
            return load_perceptual(path)
        train, held = self.data()
        save_perceptual(build_perceptual(self.cfg, self.codec(), train, held), path)
        return load_perceptual(path)

    def teacher(self):
        path = self._path("teacher", ("data", "codec", "teacher")) + ".tch"
        if os.path.exists(path):
            return teacher_mod.load_teacher(path)
        t0 = time.time()
        tm = build_teacher(self.cfg, self.codec(), self.data()[0])
        teacher_mod.save_teacher(tm, path)
        log.info("teacher built in %.1fs", time.time() - t0)
        return teacher_mod.load_teacher(path)

    def pairs(self, count=None, base_seed=None):
        count = self.cfg.pairs.count if count is None else count
        base_seed = self.cfg.pairs.seed if base_seed is None else base_seed
        path = self._path("pairs", ("data", "codec", "teacher", "pairs")) + f"-n{count}-s{base_seed}"
        if os.path.isdir(path) and os.path.exists(os.path.join(path, "complete")):
            return pairgen.read_shards(path)
        shards = build_pairs(self.cfg, self.teacher(), path, count, base_seed)
        open(os.path.join(path, "complete"), "w").close()
        return shards
