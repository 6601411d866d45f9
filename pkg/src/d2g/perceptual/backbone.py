"""VGG-style feature backbone with five feature taps and a classifier head.

The pixel variant pools after each of the first four stages.  The latent
variant drops the leading pools to compensate for the codec's downsampling,
so both see comparable receptive fields.
"""

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import InvalidArgument
from .augment import AugmentationSpec, apply_augmentation, sample_augmentation

log = logging.getLogger(__name__)

TAP_NAMES = ("tap1", "tap2", "tap3", "tap4", "tap5")


@dataclass
class BackboneConfig:
    domain: str = "pixel"
    input_channels: int = 3
    widths: tuple = (16, 32, 48, 64, 64)
    num_classes: int = 10
    removed_pools: int = 0

    def to_dict(self):
        return {**self.__dict__, "widths": list(self.widths)}

    @classmethod
    def from_dict(cls, d):
        return cls(**{**d, "widths": tuple(d["widths"])})


class FeatureBackbone(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        if cfg.domain not in ("pixel", "latent"):
            raise InvalidArgument(f"unknown domain {cfg.domain!r}")
        self.cfg = cfg
        self.stages = nn.ModuleList()
        prev = cfg.input_channels
        for i, w in enumerate(cfg.widths):
            convs = 1 if i == 0 else 2
            layers = []
            for _ in range(convs):
                layers += [nn.Conv2d(prev, w, 3, padding=1), nn.BatchNorm2d(w), nn.ReLU()]
                prev = w
            self.stages.append(nn.Sequential(*layers))
        # pool after stage i (i < 4) unless it is one of the removed leading pools
        self.pool_after = [i < len(cfg.widths) - 1 and i >= cfg.removed_pools for i in range(len(cfg.widths))]
        self.classifier_head = nn.Linear(cfg.widths[-1], cfg.num_classes)

    @property
    def domain(self):
        return self.cfg.domain

    @property
    def input_channels(self):
        return self.cfg.input_channels

    @property
    def layers(self):
        return list(TAP_NAMES)

    @property
    def channels(self):
        return list(self.cfg.widths)

    def taps(self, x):
        feats = []
        h = x
        for i, stage in enumerate(self.stages):
            h = stage(h)
            feats.append(h)
            if self.pool_after[i]:
                h = F.max_pool2d(h, 2)
        return feats

    def embed(self, x):
        """Penultimate features (global-average-pooled last tap)."""
        return self.taps(x)[-1].mean(dim=(2, 3))

    def forward(self, x):
        return self.classifier_head(self.embed(x))


def make_backbone(domain="pixel", input_channels=None, num_classes=10, widths=(16, 32, 48, 64, 64), downsample_factor=1):
    if domain == "pixel":
        input_channels = input_channels or 3
        removed = 0
    else:
        input_channels = input_channels or 4
        removed = int(round(math.log2(downsample_factor)))
    return FeatureBackbone(BackboneConfig(domain, input_channels, tuple(widths), num_classes, removed))


@dataclass
class BackboneTrainConfig:
    steps: int = 1500
    batch_size: int = 64
    lr: float = 2e-3
    weight_decay: float = 5e-4
    augment: bool = True
    seed: int = 0


# flips, small shifts and scale jitter: the usual classifier-training recipe
TRAIN_AUGMENTATION = dict(categories=frozenset({"blit", "geometric"}), quarter_turns=False,
                          translate_int=0.125, scale_std=0.15, rotate_max=0.0, aniso_std=0.0,
                          translate_frac=0.0)


def train_backbone(inputs, labels, domain="pixel", config=None, downsample_factor=1, widths=(16, 32, 48, 64, 64)):
    """Train the backbone as a classifier on (inputs, labels); returns it frozen in eval mode."""
    config = config or BackboneTrainConfig()
    labels = torch.as_tensor(labels).long()
    if labels.numel() == 0 or labels.unique().numel() < 2:
        raise InvalidArgument("backbone training needs labels spanning at least 2 classes")
    num_classes = int(labels.max()) + 1
    torch.manual_seed(config.seed)
    net = make_backbone(domain, inputs.shape[1], num_classes, widths, downsample_factor)
    train_spec = AugmentationSpec(**TRAIN_AUGMENTATION)
    gen = torch.Generator().manual_seed(config.seed + 1)
    opt = torch.optim.AdamW(net.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(config.steps, 1))
    net.train()
    for step in range(config.steps):
        idx = torch.randint(0, len(inputs), (config.batch_size,), generator=gen)
        xb = inputs[idx]
        if config.augment:
            op = sample_augmentation(train_spec, (config.seed, step), batch=len(idx))
            xb = apply_augmentation(op, xb, xb)[0]
        loss = F.cross_entropy(net(xb), labels[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        if step % 500 == 0:
            log.info("%s backbone step %d loss %.4f", domain, step, loss.item())
    return freeze(net)


def freeze(net):
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


@torch.no_grad()
def accuracy(net, inputs, labels, batch=512):
    preds = torch.cat([net(inputs[i:i + batch]).argmax(1) for i in range(0, len(inputs), batch)])
    return (preds == torch.as_tensor(labels)).float().mean().item()
