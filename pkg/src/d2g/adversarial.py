"""Teacher-initialised conditional U-Net discriminator, non-saturating GAN
losses, single-sample lazy R1 and mix-and-match augmentation."""

import copy
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint
from .errors import InvalidArgument, InvalidState
from .nets import UNet, UNetConfig

log = logging.getLogger(__name__)

HEAD_KINDS = ("skip", "bottleneck", "combined")


@dataclass
class MultiScaleLogits:
    """``scales[k]`` maps head kind -> (B, 1, H, W) logit map; scale 0 is the finest."""
    scales: list

    def maps(self):
        return [s[k] for s in self.scales for k in HEAD_KINDS]

    def __len__(self):
        return len(self.scales)

    def select(self, mask):
        return MultiScaleLogits([{k: v[mask] for k, v in s.items()} for s in self.scales])

    def total(self):
        """Sum of every logit over every head, scale and location, per sample."""
        return sum(m.flatten(1).sum(1) for m in self.maps())

    def all_finite(self):
        return all(bool(torch.isfinite(m).all()) for m in self.maps())


class Discriminator(nn.Module):
    def __init__(self, net_cfg: UNetConfig, scales=None):
        super().__init__()
        self.unet = UNet(net_cfg)
        levels = self.unet.levels
        scales = levels if scales is None else int(scales)
        if not 1 <= scales <= levels:
            raise InvalidArgument(f"scales must lie in [1, {levels}], got {scales}")
        self.scales = scales
        c = net_cfg.in_channels
        chs = self.unet.level_channels

        self.z_proj = nn.Conv2d(c, c, 1)
        nn.init.zeros_(self.z_proj.weight)
        nn.init.zeros_(self.z_proj.bias)
        # resized x enters every encoder level below the first through a zero-init 1x1
        self.inject = nn.ModuleList([nn.Conv2d(c, chs[i - 1], 1) for i in range(1, levels)])
        for m in self.inject:
            nn.init.zeros_(m.weight)
            nn.init.zeros_(m.bias)

        # heads for the `scales` finest decoder levels, finest first
        self.heads = nn.ModuleList()
        for level in range(scales):
            up_ch = chs[level + 1] if level + 1 < levels else chs[-1]
            self.heads.append(nn.ModuleDict({
                "skip": nn.Conv2d(chs[level], 1, 1),
                "bottleneck": nn.Conv2d(up_ch, 1, 1),
                "combined": nn.Conv2d(chs[level], 1, 1),
            }))

    @property
    def head_count(self):
        return 3 * len(self.heads)

    def backbone_parameters(self):
        return self.unet.named_parameters()

    def forward(self, c, z, x, t=0.0):
        if z.shape != x.shape:
            raise InvalidArgument(f"z {tuple(z.shape)} and x {tuple(x.shape)} differ in shape")
        if x.dim() != 4 or x.shape[1] != self.unet.cfg.in_channels:
            raise InvalidArgument(f"expected (B, {self.unet.cfg.in_channels}, H, W), got {tuple(x.shape)}")
        if x.shape[-1] % 2 ** (self.unet.levels - 1) or x.shape[-2] % 2 ** (self.unet.levels - 1):
            raise InvalidArgument(f"spatial size {tuple(x.shape[-2:])} not divisible by the U-Net depth")
        c = torch.as_tensor(c, dtype=torch.long).reshape(-1)
        if c.numel() == 1 and x.shape[0] != 1:
            c = c.expand(x.shape[0])
        if c.shape[0] != x.shape[0]:
            raise InvalidArgument("condition batch does not match latent batch")
        h = x + self.z_proj(z)
        inject = [None] + [proj(F.avg_pool2d(x, 2 ** (i + 1))) for i, proj in enumerate(self.inject)]
        _, taps = self.unet(h, t, c, inject=inject, return_taps=True)
        taps = taps[::-1]  # finest first
        scales = []
        for level, heads in enumerate(self.heads):
            skip, up, comb = taps[level]
            scales.append({"skip": heads["skip"](skip), "bottleneck": heads["bottleneck"](up),
                           "combined": heads["combined"](comb)})
        return MultiScaleLogits(scales)


def build_discriminator(teacher, scales=None):
    """Discriminator whose U-Net starts as an exact copy of the teacher's network."""
    net = getattr(teacher, "net", None)
    if net is None or not isinstance(net, UNet):
        raise InvalidArgument("discriminator initialisation needs a network teacher")
    state = net.state_dict()
    for k, v in state.items():
        if not torch.isfinite(v).all():
            raise InvalidArgument(f"teacher weight {k} is not finite")
    d = Discriminator(copy.deepcopy(net.cfg), scales)
    d.unet.load_state_dict(state)
    for p in d.parameters():
        p.requires_grad_(True)
    return d


def disc_forward(D, c, z, x, t=0.0):
    return D(c, z, x, t)


def _as_maps(logits):
    if isinstance(logits, MultiScaleLogits):
        return logits.maps()
    if torch.is_tensor(logits):
        return [logits]
    return list(logits)


def _mean_over_maps(maps, fn):
    # each head map weighs equally; positions are averaged inside a map
    return sum(fn(m).mean() for m in maps) / len(maps)


def gan_losses(real_logits, fake_logits):
    """Non-saturating losses ``(d_loss, g_loss)`` in softplus form.

    ``-log sigmoid(l) = softplus(-l)`` and ``-log(1 - sigmoid(l)) = softplus(l)``.
    """
    real, fake = _as_maps(real_logits), _as_maps(fake_logits)
    d_loss = _mean_over_maps(real, lambda m: F.softplus(-m)) + _mean_over_maps(fake, F.softplus)
    g_loss = _mean_over_maps(fake, lambda m: F.softplus(-m))
    return d_loss, g_loss


def labeled_d_loss(logits, labels):
    """Discriminator loss for a batch with per-sample real (1) / fake (0) labels."""
    labels = torch.as_tensor(labels).bool()
    if isinstance(logits, MultiScaleLogits):
        real, fake = logits.select(labels), logits.select(~labels)
    else:
        real, fake = logits[labels], logits[~labels]
    parts = []
    if labels.any():
        parts.append(_mean_over_maps(_as_maps(real), lambda m: F.softplus(-m)))
    if (~labels).any():
        parts.append(_mean_over_maps(_as_maps(fake), F.softplus))
    return sum(parts)


def generator_gan_loss(fake_logits):
    return _mean_over_maps(_as_maps(fake_logits), lambda m: F.softplus(-m))


@dataclass
class LazyR1State:
    gamma: float = 0.01
    interval: int = 16
    step: int = 0

    def due(self):
        return self.step % self.interval == 0


def _logit_sum(out):
    if isinstance(out, MultiScaleLogits):
        return out.total().sum()
    return sum(m.sum() for m in _as_maps(out))


def single_sample_r1(D, c, z, x_real, gamma=None, interval_state=None, index=0):
    """``(gamma/2) * |grad_x sum D(c, z, x)|^2`` on one batch element.

    With ``interval_state`` the penalty is only evaluated when the state is due
    and is then multiplied by the interval; the state's step always advances.
    ``D`` is any callable ``(c, z, x) -> logits``.
    """
    if not torch.is_grad_enabled():
        raise InvalidState("R1 needs gradient tracking, which is disabled")
    state = interval_state
    if gamma is None:
        gamma = state.gamma if state is not None else 1.0
    scale = 1.0
    if state is not None:
        due = state.due()
        state.step += 1
        if not due:
            return x_real.new_zeros(())
        scale = float(state.interval)
    xi = x_real[index:index + 1].detach().requires_grad_(True)
    ci = torch.as_tensor(c).reshape(-1)
    ci = ci[index:index + 1] if ci.numel() > 1 else ci
    zi = z[index:index + 1] if z is not None else None
    total = _logit_sum(D(ci, zi, xi))
    if not total.requires_grad:
        return x_real.new_zeros(())
    (grad,) = torch.autograd.grad(total, xi, create_graph=True)
    return 0.5 * gamma * scale * grad.pow(2).sum()


@dataclass
class MixAndMatchConfig:
    swap_latent_prob: float = 0.0
    swap_condition_prob: float = 0.0
    swap_noise_prob: float = 0.0

    def __post_init__(self):
        probs = (self.swap_latent_prob, self.swap_condition_prob, self.swap_noise_prob)
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise InvalidArgument("mix-and-match probabilities must lie in [0, 1]")
        if sum(probs) > 1.0 + 1e-12:
            raise InvalidArgument("mix-and-match swaps are exclusive; probabilities must sum to <= 1")

    @property
    def enabled(self):
        return self.swap_latent_prob + self.swap_condition_prob + self.swap_noise_prob > 0


SWAP_NONE, SWAP_LATENT, SWAP_CONDITION, SWAP_NOISE = 0, 1, 2, 3


@dataclass
class MixedBatch:
    """Discriminator batch: fake rows first, then the (possibly swapped) real rows."""
    z: torch.Tensor
    c: torch.Tensor
    x: torch.Tensor
    labels: torch.Tensor          # 1 real, 0 fake
    swaps: np.ndarray = field(default=None)  # per real slot, SWAP_* code


def _other_index(rng, i, n):
    j = int(rng.integers(n - 1))
    return j + (j >= i)


def mix_and_match(batch, cfg, seed, num_classes=None):
    """Build the discriminator batch from ``{z, c, x_fake, x_real}``.

    Each real slot independently becomes at most one kind of mismatch
    (latent, then condition, then noise) with the configured probabilities;
    a mismatched slot is labelled fake.
    """
    z, c, x_fake, x_real = batch["z"], torch.as_tensor(batch["c"]).long(), batch["x_fake"], batch["x_real"]
    n = x_real.shape[0]
    if not (z.shape == x_fake.shape == x_real.shape) or c.shape[0] != n:
        raise InvalidArgument("mix-and-match batch fields disagree in shape")
    if cfg.enabled and n < 2:
        raise InvalidArgument("mix-and-match swaps need a batch of at least 2")
    rng = np.random.default_rng(seed)
    u = rng.uniform(size=n)
    p1 = cfg.swap_latent_prob
    p2 = p1 + cfg.swap_condition_prob
    p3 = p2 + cfg.swap_noise_prob
    swaps = np.where(u < p1, SWAP_LATENT, np.where(u < p2, SWAP_CONDITION, np.where(u < p3, SWAP_NOISE, SWAP_NONE)))
    if num_classes is None:
        num_classes = int(c.max()) + 1
    rz, rc, rx = z.clone(), c.clone(), x_real.clone()
    for i in range(n):
        if swaps[i] == SWAP_LATENT:
            rx[i] = x_real[_other_index(rng, i, n)]
        elif swaps[i] == SWAP_CONDITION:
            if num_classes < 2:
                raise InvalidArgument("condition swaps need at least 2 classes")
            rc[i] = (int(c[i]) + 1 + int(rng.integers(num_classes - 1))) % num_classes
        elif swaps[i] == SWAP_NOISE:
            rz[i] = z[_other_index(rng, i, n)]
    labels = torch.cat([torch.zeros(n), torch.from_numpy((swaps == SWAP_NONE).astype(np.float32))])
    return MixedBatch(torch.cat([z, rz]), torch.cat([c, rc]), torch.cat([x_fake, rx]), labels, swaps)


def save_discriminator(D, path):
    meta = {"net": D.unet.cfg.to_dict(), "scales": D.scales}
    return checkpoint.save(path, checkpoint.DISCRIMINATOR_MAGIC, D.state_dict(), meta)


def load_discriminator(path):
    meta, state, _ = checkpoint.load(path, checkpoint.DISCRIMINATOR_MAGIC)
    D = Discriminator(UNetConfig.from_dict(meta["net"]), meta["scales"])
    D.load_state_dict(state)
    return D
