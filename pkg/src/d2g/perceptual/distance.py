"""Calibrated perceptual distance on backbone features, synthetic 2AFC data and
the linear calibration fit."""

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .. import checkpoint
from ..errors import InvalidArgument
from .augment import IDENTITY_SPEC, apply_augmentation, sample_augmentation
from .backbone import BackboneConfig, FeatureBackbone, freeze

log = logging.getLogger(__name__)


def _unit_normalize(f, eps=1e-10):
    return f / (f.pow(2).sum(dim=1, keepdim=True).sqrt() + eps)


class CalibratedDistance(nn.Module):
    """Frozen backbone plus non-negative per-layer, per-channel weights.

    ``forward(x0, x1)`` returns one distance per batch element.
    """

    def __init__(self, backbone: FeatureBackbone, weights=None):
        super().__init__()
        self.backbone = freeze(backbone)
        chans = backbone.channels
        if weights is None:
            weights = [torch.ones(c) for c in chans]
        self.weights = nn.ParameterList([nn.Parameter(w.detach().clone().float(), requires_grad=False) for w in weights])

    @property
    def input_channels(self):
        return self.backbone.input_channels

    def layer_terms(self, x0, x1):
        """Per-layer, per-channel spatially averaged squared normalized differences, (B, sum C_l)."""
        f0, f1 = self.backbone.taps(x0), self.backbone.taps(x1)
        return torch.cat([(_unit_normalize(a) - _unit_normalize(b)).pow(2).mean(dim=(2, 3)) for a, b in zip(f0, f1)], dim=1)

    def flat_weights(self):
        return torch.cat(list(self.weights))

    def forward(self, x0, x1):
        if x0.shape != x1.shape:
            raise InvalidArgument(f"shape mismatch {tuple(x0.shape)} vs {tuple(x1.shape)}")
        if x0.dim() != 4 or x0.shape[1] != self.input_channels:
            raise InvalidArgument(f"expected (B, {self.input_channels}, H, W) input, got {tuple(x0.shape)}")
        f0, f1 = self.backbone.taps(x0), self.backbone.taps(x1)
        total = 0.0
        for w, a, b in zip(self.weights, f0, f1):
            diff = (_unit_normalize(a) - _unit_normalize(b)).pow(2)
            total = total + (diff * w.to(diff).view(1, -1, 1, 1)).sum(dim=1).mean(dim=(1, 2))
        return total


def latent_lpips(dist, x0, x1):
    """Per-sample calibrated distance between two latent batches."""
    return dist(x0, x1)


def e_latent_lpips(dist, spec, x0, x1, seed):
    """Distance after one shared random augmentation drawn from (spec, seed)."""
    if x0.shape != x1.shape:
        raise InvalidArgument(f"shape mismatch {tuple(x0.shape)} vs {tuple(x1.shape)}")
    op = sample_augmentation(spec, seed, batch=x0.shape[0])
    a0, a1 = apply_augmentation(op, x0, x1)
    return dist(a0, a1)


@dataclass
class TwoAFCTriplet:
    reference: torch.Tensor
    variant_a: torch.Tensor
    variant_b: torch.Tensor
    label: int  # 0: variant_a is closer, 1: variant_b is closer
    kind: str = ""


@dataclass
class DistortionConfig:
    kinds: tuple = ("noise", "blur", "contrast", "warp")
    noise_levels: tuple = (0.01, 0.05, 0.1, 0.2, 0.3)
    blur_levels: tuple = (0.3, 0.6, 1.0, 1.5, 2.0)
    contrast_levels: tuple = (0.05, 0.1, 0.2, 0.35, 0.5)
    warp_levels: tuple = (0.02, 0.05, 0.1, 0.15, 0.2)
    # level lists share one severity scale (index i of every kind is comparable),
    # so a fraction of triplets may compare two different distortion kinds
    cross_kind_prob: float = 0.5


def _blur(img, sigma):
    if sigma <= 0:
        return img
    r = max(1, int(np.ceil(2 * sigma)))
    k = torch.exp(-torch.arange(-r, r + 1, dtype=torch.float32) ** 2 / (2 * sigma ** 2))
    k = k / k.sum()
    c = img.shape[0]
    x = img[None]
    x = F.conv2d(F.pad(x, (r, r, 0, 0), mode="replicate"), k.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
    x = F.conv2d(F.pad(x, (0, 0, r, r), mode="replicate"), k.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)
    return x[0]


def distort(img, kind, level, rng):
    if kind == "noise":
        return img + torch.from_numpy(rng.normal(0, level, img.shape).astype(np.float32))
    if kind == "blur":
        return _blur(img, level)
    if kind == "contrast":
        sign = rng.choice([-1.0, 1.0])
        return (img - img.mean()) * (1 + sign * level) + img.mean()
    if kind == "warp":
        h, w = img.shape[-2:]
        field = torch.from_numpy(rng.normal(0, 1, (1, 2, 3, 3)).astype(np.float32))
        field = F.interpolate(field, size=(h, w), mode="bicubic", align_corners=True) * level
        base = F.affine_grid(torch.eye(2, 3)[None], [1, 1, h, w], align_corners=False)
        grid = base + field.permute(0, 2, 3, 1)
        return F.grid_sample(img[None], grid, mode="bilinear", padding_mode="border", align_corners=False)[0]
    raise InvalidArgument(f"unknown distortion {kind!r}")


def make_synthetic_2afc(images, config=None, seed=0, encoder=None):
    """One triplet per image from two distortions at distinct severities; the
    milder one is labelled closer.  Both variants use the same distortion kind
    unless the triplet is drawn as cross-kind, in which case severity indices
    are compared on the shared scale.  Pairs of equal severity are dropped.
    ``encoder`` maps the three pixel images to the distance's domain.
    """
    config = config or DistortionConfig()
    if images is None or len(images) == 0:
        raise InvalidArgument("2AFC construction needs images")
    rng = np.random.default_rng(seed)
    levels = {"noise": config.noise_levels, "blur": config.blur_levels,
              "contrast": config.contrast_levels, "warp": config.warp_levels}
    out = []
    for img in images:
        ka = config.kinds[rng.integers(len(config.kinds))]
        kb = ka
        if len(config.kinds) > 1 and rng.uniform() < config.cross_kind_prob:
            kb = config.kinds[rng.integers(len(config.kinds))]
        ia, ib = rng.integers(len(levels[ka])), rng.integers(len(levels[kb]))
        va = distort(img, ka, float(levels[ka][ia]), rng)
        vb = distort(img, kb, float(levels[kb][ib]), rng)
        if ia == ib or (ka == kb and levels[ka][ia] == levels[kb][ib]):
            continue
        kind = ka if ka == kb else f"{ka}/{kb}"
        out.append(TwoAFCTriplet(img, va, vb, int(ib < ia), kind))
    if encoder is not None and out:
        ref = encoder(torch.stack([t.reference for t in out]))
        a = encoder(torch.stack([t.variant_a for t in out]))
        b = encoder(torch.stack([t.variant_b for t in out]))
        out = [TwoAFCTriplet(r, x, y, t.label, t.kind) for r, x, y, t in zip(ref, a, b, out)]
    return out


def stack_triplets(triplets):
    ref = torch.stack([t.reference for t in triplets])
    a = torch.stack([t.variant_a for t in triplets])
    b = torch.stack([t.variant_b for t in triplets])
    y = torch.tensor([t.label for t in triplets])
    return ref, a, b, y


def agreement_from_distances(da, db, labels):
    """2AFC agreement; ties score one half."""
    labels = torch.as_tensor(labels)
    pred_b = (db < da).float()
    tie = (da == db).float()
    hit = torch.where(labels == 1, pred_b, 1 - pred_b - tie)
    return (hit + 0.5 * tie).mean().item()


@torch.no_grad()
def two_afc_agreement(dist, triplets, batch=256):
    ref, a, b, y = stack_triplets(triplets)
    da = torch.cat([dist(ref[i:i + batch], a[i:i + batch]) for i in range(0, len(ref), batch)])
    db = torch.cat([dist(ref[i:i + batch], b[i:i + batch]) for i in range(0, len(ref), batch)])
    return agreement_from_distances(da, db, y)


@dataclass
class CalibrationConfig:
    steps: int = 400
    lr: float = 0.05
    val_fraction: float = 0.25
    seed: int = 0


@torch.no_grad()
def _terms(dist, ref, x, batch=256):
    return torch.cat([dist.layer_terms(ref[i:i + batch], x[i:i + batch]) for i in range(0, len(ref), batch)])


def calibrate(backbone, triplets, config=None):
    """Fit non-negative linear weights on the backbone's layer terms.

    Logistic fit of the label on ``d_b - d_a`` with projected Adam (weights
    clamped at zero), starting from unit weights.  The weights scoring best on
    an internal validation split are kept; the unit-weight start is itself a
    candidate, so the fit never ends below the uncalibrated distance there.
    """
    config = config or CalibrationConfig()
    if not triplets:
        raise InvalidArgument("calibration needs at least one triplet")
    base = CalibratedDistance(backbone)
    ref, a, b, y = stack_triplets(triplets)
    ta, tb = _terms(base, ref, a), _terms(base, ref, b)
    n = len(y)
    perm = torch.randperm(n, generator=torch.Generator().manual_seed(config.seed))
    n_val = int(round(n * config.val_fraction)) if n >= 8 else 0
    val, trn = perm[:n_val], perm[n_val:]
    yf = y.float()

    w = torch.ones(ta.shape[1], requires_grad=True)
    opt = torch.optim.Adam([w], lr=config.lr)

    def score(weights, idx):
        if len(idx) == 0:
            return 0.0
        return agreement_from_distances(ta[idx] @ weights, tb[idx] @ weights, y[idx])

    eval_idx = val if n_val else trn
    best_w, best = w.detach().clone(), score(w.detach(), eval_idx)
    for _ in range(config.steps):
        margin = (tb[trn] - ta[trn]) @ w  # > 0 when a is closer (label 0)
        loss = F.binary_cross_entropy_with_logits(-margin, yf[trn])
        opt.zero_grad()
        loss.backward()
        opt.step()
        with torch.no_grad():
            w.clamp_(min=0.0)
            if w.sum() == 0:
                continue
            s = score(w.detach(), eval_idx)
            if s > best:
                best, best_w = s, w.detach().clone()
    if best_w.sum() == 0:
        best_w = torch.ones_like(best_w)
    splits = torch.split(best_w, backbone.channels)
    log.info("calibration: internal agreement %.4f", best)
    return CalibratedDistance(backbone, list(splits))


def save_distance(dist, path):
    state = dict(dist.backbone.state_dict())
    for i, w in enumerate(dist.weights):
        state[f"calibration.{i}"] = w.detach()
    meta = {"backbone": dist.backbone.cfg.to_dict()}
    return checkpoint.save(path, checkpoint.PERCEPTUAL_MAGIC, state, meta)


def load_distance(path):
    meta, state, _ = checkpoint.load(path, checkpoint.PERCEPTUAL_MAGIC)
    backbone = FeatureBackbone(BackboneConfig.from_dict(meta["backbone"]))
    weights = [state.pop(f"calibration.{i}") for i in range(len(backbone.channels))]
    missing = backbone.load_state_dict(state, strict=False)
    bad = [k for k in missing.missing_keys if not k.endswith("num_batches_tracked")]
    if bad:
        raise InvalidArgument(f"perceptual checkpoint missing {bad}")
    return CalibratedDistance(backbone, weights)
