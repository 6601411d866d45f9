"""Two-stage distillation of a teacher into a one-step generator.

Stage 1 regresses ``G(z, c)`` onto precomputed ODE endpoints ``x``.  Stage 2
keeps the regression term and adds the conditional GAN game against a
teacher-initialised discriminator, with single-sample lazy R1 and
mix-and-match augmentation, and maintains an EMA copy of the generator.
"""

import copy
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn

from . import checkpoint
from .adversarial import (LazyR1State, MixAndMatchConfig, generator_gan_loss, labeled_d_loss,
                          mix_and_match, single_sample_r1)
from .codec import DECODE_CALLS
from .errors import InvalidArgument, InvalidState
from .nets import UNet, UNetConfig
from .pairgen import PairShard, concat_shards
from .perceptual import AugmentationSpec, e_latent_lpips
from .teacher import eps_to_x0, make_schedule

log = logging.getLogger(__name__)

LOSS_MODES = ("mse", "pseudo_huber", "latentlpips", "e_latentlpips", "blended")
PROBE_AUG_SEED = 2 ** 31 - 1


class Generator(nn.Module):
    """epsilon-parameterised network mapping noise to a latent in one step."""

    def __init__(self, net: UNet, schedule, source=b"", latent_shape=None):
        super().__init__()
        self.net = net
        self.schedule = schedule
        self.source = bytes(source)
        self.latent_shape = tuple(latent_shape) if latent_shape else None

    def forward(self, z, c):
        return one_step_generate(self, z, c)


def generator_from_teacher(teacher):
    if teacher.net is None:
        raise InvalidArgument("generator initialisation needs a network teacher")
    net = copy.deepcopy(teacher.net)
    for p in net.parameters():
        p.requires_grad_(True)
    return Generator(net, teacher.schedule, teacher.weights_hash, teacher.latent_shape)


def random_generator(net_cfg, schedule, latent_shape=None, seed=0):
    torch.manual_seed(seed)
    return Generator(UNet(net_cfg), schedule, b"random", latent_shape)


def one_step_generate(G, z, c):
    """``(z - sigma_T eps(z, c, T)) / alpha_T``."""
    cfg = G.net.cfg
    if z.dim() != 4 or z.shape[1] != cfg.in_channels:
        raise InvalidArgument(f"expected (B, {cfg.in_channels}, H, W) noise, got {tuple(z.shape)}")
    if G.latent_shape is not None and tuple(z.shape[1:]) != G.latent_shape:
        raise InvalidArgument(f"noise shape {tuple(z.shape[1:])} != generator latent shape {G.latent_shape}")
    T = G.schedule.T
    c = torch.as_tensor(c, dtype=torch.long).reshape(-1)
    if c.numel() == 1 and z.shape[0] != 1:
        c = c.expand(z.shape[0])
    # same call convention as the teacher's denoiser, so the initial G matches 1-step DDIM bitwise
    eps = G.net(z, torch.as_tensor(T, dtype=torch.float32) / T, c)
    return eps_to_x0(z, eps, T, G.schedule)


@dataclass
class EmaState:
    shadow: dict
    beta: float = 0.999
    step: int = 0

    @classmethod
    def of(cls, module, beta=0.999):
        return cls({k: v.detach().clone() for k, v in module.state_dict().items()}, beta)


def _named(weights):
    if isinstance(weights, nn.Module):
        return weights.state_dict()
    return weights


@torch.no_grad()
def ema_update(state, weights, beta=None):
    """``shadow <- beta * shadow + (1 - beta) * weights`` elementwise."""
    beta = state.beta if beta is None else beta
    if not 0.0 <= beta <= 1.0:
        raise InvalidArgument("EMA beta must lie in [0, 1]")
    weights = _named(weights)
    if set(weights) != set(state.shadow):
        raise InvalidArgument("EMA weights do not match the shadow's parameter names")
    for k, w in weights.items():
        s = state.shadow[k]
        if s.shape != w.shape:
            raise InvalidArgument(f"EMA shape mismatch for {k}: {tuple(s.shape)} vs {tuple(w.shape)}")
        if not s.is_floating_point():
            s.copy_(w)
            continue
        s.mul_(beta).add_(w.to(s), alpha=1.0 - beta)
    state.step += 1
    return state


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr_g: float = 1e-4
    lr_g_stage2: float = 1e-5
    lr_d: float = 1e-4
    betas_g: tuple = (0.9, 0.999)
    betas_d: tuple = (0.9, 0.999)
    weight_decay: float = 0.0
    lambda_gan: float = 0.25
    regression_weight: float = 1.0
    r1_gamma: float = 0.01
    r1_interval: int = 16
    ema_start: int = 0
    ema_beta: float = 0.999
    loss_mode: str = "e_latentlpips"
    blend: float = 0.5
    augmentations: tuple = ("blit", "geometric", "cutout")
    mix: MixAndMatchConfig = field(default_factory=lambda: MixAndMatchConfig(0.1, 0.1, 0.1))
    stage1_steps: int = 500
    stage2_steps: int = 100
    probe_size: int = 64
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.mix, dict):
            self.mix = MixAndMatchConfig(**self.mix)
        self.betas_g, self.betas_d = tuple(self.betas_g), tuple(self.betas_d)
        self.augmentations = tuple(self.augmentations)
        self.validate()

    def validate(self):
        for name in ("lr_g", "lr_g_stage2", "lr_d"):
            if not getattr(self, name) > 0:
                raise InvalidArgument(f"{name} must be > 0")
        if self.lambda_gan < 0:
            raise InvalidArgument("lambda_gan must be >= 0")
        if not 0.0 <= self.ema_beta < 1.0:
            raise InvalidArgument("ema_beta must lie in [0, 1)")
        if self.loss_mode not in LOSS_MODES:
            raise InvalidArgument(f"unknown loss mode {self.loss_mode!r}")
        if self.batch_size < 1 or self.r1_interval < 1:
            raise InvalidArgument("batch_size and r1_interval must be >= 1")
        if not 0.0 <= self.blend <= 1.0:
            raise InvalidArgument("blend must lie in [0, 1]")
        if min(self.stage1_steps, self.stage2_steps) < 0:
            raise InvalidArgument("stage lengths must be >= 0")

    def to_dict(self):
        d = asdict(self)
        d["betas_g"], d["betas_d"] = list(self.betas_g), list(self.betas_d)
        d["augmentations"] = list(self.augmentations)
        return d


def pseudo_huber_constant(dim):
    return 0.03 * math.sqrt(dim)


class RegressionLoss:
    """Per-sample regression distance ``d(pred, target)`` for a loss mode."""

    def __init__(self, mode, dist=None, spec=None, blend=0.5):
        if mode not in LOSS_MODES:
            raise InvalidArgument(f"unknown loss mode {mode!r}")
        if mode in ("latentlpips", "e_latentlpips", "blended") and dist is None:
            raise InvalidArgument(f"loss mode {mode} needs a calibrated latent distance")
        self.mode, self.dist, self.blend = mode, dist, blend
        self.spec = spec or AugmentationSpec()

    def __call__(self, pred, target, seed):
        if self.mode == "mse":
            return (pred - target).pow(2).flatten(1).mean(1)
        if self.mode == "pseudo_huber":
            c = pseudo_huber_constant(pred[0].numel())
            return ((pred - target).pow(2).flatten(1).sum(1) + c * c).sqrt() - c
        if self.mode == "latentlpips":
            return self.dist(pred, target)
        e = e_latent_lpips(self.dist, self.spec, pred, target, seed)
        if self.mode == "e_latentlpips":
            return e
        return self.blend * e + (1.0 - self.blend) * self.dist(pred, target)


def make_regression_loss(config, dist=None):
    spec = AugmentationSpec.from_names(list(config.augmentations))
    return RegressionLoss(config.loss_mode, dist, spec, config.blend)


def _pair_tensors(pairs):
    if isinstance(pairs, PairShard):
        pairs = [pairs]
    if isinstance(pairs, (list, tuple)) and pairs and isinstance(pairs[0], PairShard):
        return concat_shards(list(pairs))
    if isinstance(pairs, (list, tuple)) and len(pairs) == 3:
        z, c, x = pairs
        return z, torch.as_tensor(c).long(), x
    raise InvalidArgument("pairs must be shards or a (z, c, x) triple")


def _check_pairs(G, z, c, x):
    if len(z) == 0:
        raise InvalidArgument("empty pair set")
    if z.shape != x.shape or len(c) != len(z):
        raise InvalidArgument("pair fields disagree in shape")
    if z.shape[1] != G.net.cfg.in_channels or (G.latent_shape and tuple(z.shape[1:]) != G.latent_shape):
        raise InvalidArgument(f"pair latent shape {tuple(z.shape[1:])} does not match the generator")


class _Batches:
    """Seeded minibatches drawn without replacement within each epoch."""

    def __init__(self, n, batch, seed):
        self.n, self.batch = n, min(batch, n)
        self.gen = torch.Generator().manual_seed(seed)
        self.perm, self.pos = None, n

    def next(self):
        if self.pos + self.batch > self.n:
            self.perm, self.pos = torch.randperm(self.n, generator=self.gen), 0
        idx = self.perm[self.pos:self.pos + self.batch]
        self.pos += self.batch
        return idx


@dataclass
class DistillResult:
    generator: Generator
    ema: Generator = None
    log: list = field(default_factory=list)
    probe_start: float = float("nan")
    probe_end: float = float("nan")
    checkpoints: list = field(default_factory=list)

    @property
    def eval_generator(self):
        return self.ema if self.ema is not None else self.generator


def _probe(G, loss, z, c, x, seed):
    with torch.no_grad():
        return float(loss(G(z, c), x, (seed, PROBE_AUG_SEED)).mean())


def _probe_set(n, size, seed):
    g = torch.Generator().manual_seed(seed + 7)
    return torch.randperm(n, generator=g)[:min(size, n)]


def _emit(records, rec, log_file):
    records.append(rec)
    if log_file is not None:
        log_file.write(json.dumps(rec, sort_keys=True) + "\n")


def _adam(params, lr, betas, wd):
    return torch.optim.Adam(params, lr=lr, betas=betas, weight_decay=wd)


def distill_stage1(G, pairs, dist, config=None, out_dir=None, lr=None):
    """Regression-only training.  Returns a :class:`DistillResult`."""
    config = config or TrainConfig()
    z, c, x = _pair_tensors(pairs)
    _check_pairs(G, z, c, x)
    loss = make_regression_loss(config, dist)
    probe = _probe_set(len(z), config.probe_size, config.seed)
    decodes = DECODE_CALLS.count
    result = DistillResult(G)
    result.probe_start = _probe(G, loss, z[probe], c[probe], x[probe], config.seed)
    if config.stage1_steps == 0:
        result.probe_end = result.probe_start
        return result
    opt = _adam(G.parameters(), lr or config.lr_g, config.betas_g, config.weight_decay)
    batches = _Batches(len(z), config.batch_size, config.seed)
    log_file = _open_log(out_dir, "stage1")
    G.train()
    try:
        for step in range(config.stage1_steps):
            idx = batches.next()
            value = loss(G(z[idx], c[idx]), x[idx], (config.seed, step)).mean() * config.regression_weight
            opt.zero_grad(set_to_none=True)
            value.backward()
            opt.step()
            _emit(result.log, {"stage": 1, "step": step, "regression": value.item()}, log_file)
            _maybe_checkpoint(result, G, out_dir, "stage1", step, config)
    finally:
        if log_file:
            log_file.close()
    result.probe_end = _probe(G, loss, z[probe], c[probe], x[probe], config.seed)
    if DECODE_CALLS.count != decodes:
        raise InvalidState("the codec decoder was invoked during distillation")
    if out_dir:
        result.checkpoints.append(save_generator(G, os.path.join(out_dir, "generator-stage1.gen")))
    return result


def distill_stage2(G, D, pairs, dist, config=None, out_dir=None):
    """Joint regression + adversarial fine-tuning with lazy single-sample R1."""
    config = config or TrainConfig()
    if config.lambda_gan < 0:
        raise InvalidArgument("lambda_gan must be >= 0")
    z, c, x = _pair_tensors(pairs)
    _check_pairs(G, z, c, x)
    loss = make_regression_loss(config, dist)
    probe = _probe_set(len(z), config.probe_size, config.seed)
    num_classes = G.net.cfg.num_classes
    decodes = DECODE_CALLS.count
    result = DistillResult(G)
    result.probe_start = _probe(G, loss, z[probe], c[probe], x[probe], config.seed)
    opt_g = _adam(G.parameters(), config.lr_g_stage2, config.betas_g, config.weight_decay)
    opt_d = _adam(D.parameters(), config.lr_d, config.betas_d, config.weight_decay)
    r1_state = LazyR1State(config.r1_gamma, config.r1_interval)
    ema = EmaState.of(G, config.ema_beta)
    batches = _Batches(len(z), config.batch_size, config.seed)
    log_file = _open_log(out_dir, "stage2")
    G.train()
    D.train()
    try:
        for step in range(config.stage2_steps):
            idx = batches.next()
            zb, cb, xb = z[idx], c[idx], x[idx]

            # discriminator step
            with torch.no_grad():
                fake = G(zb, cb)
            mixed = mix_and_match({"z": zb, "c": cb, "x_fake": fake, "x_real": xb}, config.mix,
                                  seed=(config.seed, step), num_classes=num_classes)
            d_loss = labeled_d_loss(D(mixed.c, mixed.z, mixed.x), mixed.labels)
            r1 = single_sample_r1(D, cb, zb, xb, config.r1_gamma, r1_state)
            opt_d.zero_grad(set_to_none=True)
            (d_loss + r1).backward()
            opt_d.step()

            # generator step
            fake = G(zb, cb)
            reg = loss(fake, xb, (config.seed, step)).mean() * config.regression_weight
            if config.lambda_gan > 0:
                D.requires_grad_(False)
                g_adv = generator_gan_loss(D(cb, zb, fake))
                D.requires_grad_(True)
                total = reg + config.lambda_gan * g_adv
            else:
                g_adv = torch.zeros(())
                total = reg
            opt_g.zero_grad(set_to_none=True)
            total.backward()
            opt_g.step()

            if step >= config.ema_start:
                ema_update(ema, G)
            else:
                ema = EmaState.of(G, config.ema_beta)
            _emit(result.log, {"stage": 2, "step": step, "d_loss": d_loss.item(), "g_loss": g_adv.item(),
                               "regression": reg.item(), "r1": r1.item()}, log_file)
            _maybe_checkpoint(result, G, out_dir, "stage2", step, config)
    finally:
        if log_file:
            log_file.close()
    if DECODE_CALLS.count != decodes:
        raise InvalidState("the codec decoder was invoked during distillation")
    result.ema = copy.deepcopy(G)
    result.ema.load_state_dict(ema.shadow)
    result.ema.eval()
    result.probe_end = _probe(result.ema, loss, z[probe], c[probe], x[probe], config.seed)
    if out_dir:
        result.checkpoints.append(save_generator(G, os.path.join(out_dir, "generator-stage2.gen")))
        result.checkpoints.append(save_generator(result.ema, os.path.join(out_dir, "generator-ema.gen")))
        from .adversarial import save_discriminator
        save_discriminator(D, os.path.join(out_dir, "discriminator.dsc"))
    return result


def _open_log(out_dir, stage):
    if not out_dir:
        return None
    os.makedirs(out_dir, exist_ok=True)
    return open(os.path.join(out_dir, f"train-{stage}.jsonl"), "w")


def _maybe_checkpoint(result, G, out_dir, stage, step, config):
    if out_dir and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
        path = os.path.join(out_dir, f"generator-{stage}-{step + 1:06d}.gen")
        result.checkpoints.append(save_generator(G, path))


def save_generator(G, path):
    meta = {"net": G.net.cfg.to_dict(), "schedule_kind": G.schedule.kind, "T": G.schedule.T,
            "source": G.source.hex(), "latent_shape": list(G.latent_shape) if G.latent_shape else None}
    checkpoint.save(path, checkpoint.GENERATOR_MAGIC, G.net.state_dict(), meta)
    return path


def load_generator(path):
    meta, state, _ = checkpoint.load(path, checkpoint.GENERATOR_MAGIC)
    net = UNet(UNetConfig.from_dict(meta["net"]))
    net.load_state_dict(state)
    return Generator(net, make_schedule(meta["schedule_kind"], meta["T"]), bytes.fromhex(meta["source"]),
                     meta.get("latent_shape"))
