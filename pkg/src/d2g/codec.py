"""Latent codec: a small deterministic autoencoder (or an identity codec for
pixel-space mode) defining the pixel <-> latent boundary.

Every call to :func:`decode` increments ``DECODE_CALLS`` so training code can
assert that it never leaves latent space.
"""

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint
from .errors import InvalidArgument

log = logging.getLogger(__name__)


class _DecodeCounter:
    def __init__(self):
        self.count = 0

    def reset(self):
        self.count = 0


DECODE_CALLS = _DecodeCounter()


class Encoder(nn.Module):
    def __init__(self, factor, latent_channels, width=32):
        super().__init__()
        layers = [nn.Conv2d(3, width, 3, padding=1), nn.SiLU()]
        for _ in range(int(round(math.log2(factor)))):
            layers += [nn.Conv2d(width, width, 4, stride=2, padding=1), nn.SiLU()]
        layers += [nn.Conv2d(width, width, 3, padding=1), nn.SiLU(), nn.Conv2d(width, latent_channels, 1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class Decoder(nn.Module):
    def __init__(self, factor, latent_channels, width=32):
        super().__init__()
        layers = [nn.Conv2d(latent_channels, width, 3, padding=1), nn.SiLU()]
        for _ in range(int(round(math.log2(factor)))):
            layers += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(width, width, 3, padding=1), nn.SiLU()]
        layers += [nn.Conv2d(width, width, 3, padding=1), nn.SiLU(), nn.Conv2d(width, 3, 1)]
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        return self.net(z)


class Codec(nn.Module):
    """Learned or identity codec.  Latents are rescaled by ``latent_scale`` so
    they have roughly unit variance over the training set."""

    def __init__(self, kind="learned", downsample_factor=2, latent_channels=4, width=32):
        super().__init__()
        if kind not in ("learned", "identity"):
            raise InvalidArgument(f"unknown codec kind {kind!r}")
        self.kind = kind
        if kind == "identity":
            downsample_factor, latent_channels = 1, 3
        elif downsample_factor < 1 or downsample_factor & (downsample_factor - 1):
            raise InvalidArgument("downsample factor must be a power of two")
        self.downsample_factor = downsample_factor
        self.latent_channels = latent_channels
        self.width = width
        self.register_buffer("latent_scale", torch.ones(()))
        if kind == "learned":
            self.encoder = Encoder(downsample_factor, latent_channels, width)
            self.decoder = Decoder(downsample_factor, latent_channels, width)

    def encode_raw(self, images):
        return self.encoder(images)

    def decode_raw(self, latents):
        return self.decoder(latents)


def identity_codec():
    return Codec("identity")


def encode(codec, images):
    f = codec.downsample_factor
    if images.shape[-1] % f or images.shape[-2] % f:
        raise InvalidArgument(f"image dims {tuple(images.shape[-2:])} not divisible by {f}")
    if codec.kind == "identity":
        return images
    return codec.encode_raw(images) * codec.latent_scale


def decode(codec, latents):
    if latents.shape[-3] != codec.latent_channels:
        raise InvalidArgument(f"latent has {latents.shape[-3]} channels, codec expects {codec.latent_channels}")
    DECODE_CALLS.count += 1
    if codec.kind == "identity":
        return latents
    return codec.decode_raw(latents / codec.latent_scale)


@torch.no_grad()
def encode_batched(codec, images, batch=256):
    return torch.cat([encode(codec, images[i:i + batch]) for i in range(0, len(images), batch)])


@torch.no_grad()
def decode_batched(codec, latents, batch=256):
    return torch.cat([decode(codec, latents[i:i + batch]) for i in range(0, len(latents), batch)])


def psnr(a, b, data_range=2.0):
    mse = F.mse_loss(a, b).item()
    return float("inf") if mse == 0 else 10.0 * math.log10(data_range ** 2 / mse)


@torch.no_grad()
def reconstruction_psnr(codec, images):
    return psnr(decode_batched(codec, encode_batched(codec, images)), images)


@dataclass
class CodecTrainConfig:
    steps: int = 3000
    batch_size: int = 64
    lr: float = 2e-3
    downsample_factor: int = 2
    latent_channels: int = 4
    width: int = 32
    seed: int = 0


def train_codec(images, config=None):
    """Reconstruction-trained autoencoder (plain MSE, no KL term)."""
    config = config or CodecTrainConfig()
    if images is None or len(images) == 0:
        raise InvalidArgument("codec training needs a nonempty image set")
    torch.manual_seed(config.seed)
    codec = Codec("learned", config.downsample_factor, config.latent_channels, config.width)
    gen = torch.Generator().manual_seed(config.seed + 1)
    opt = torch.optim.Adam(codec.parameters(), lr=config.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(config.steps, 1))
    codec.train()
    for step in range(config.steps):
        idx = torch.randint(0, len(images), (config.batch_size,), generator=gen)
        x = images[idx]
        loss = F.mse_loss(codec.decode_raw(codec.encode_raw(x)), x)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        if step % 1000 == 0:
            log.info("codec step %d mse %.5f", step, loss.item())
    codec.eval()
    with torch.no_grad():
        raw = torch.cat([codec.encode_raw(images[i:i + 256]) for i in range(0, len(images), 256)])
        std = raw.std().item()
        codec.latent_scale.fill_(1.0 / std if std > 0 else 1.0)
    for p in codec.parameters():
        p.requires_grad_(False)
    return codec


def save_codec(codec, path):
    meta = {
        "kind": codec.kind,
        "downsample_factor": codec.downsample_factor,
        "latent_channels": codec.latent_channels,
        "width": codec.width,
    }
    return checkpoint.save(path, checkpoint.CODEC_MAGIC, codec.state_dict(), meta)


def load_codec(path):
    meta, state, _ = checkpoint.load(path, checkpoint.CODEC_MAGIC)
    codec = Codec(meta["kind"], meta["downsample_factor"], meta["latent_channels"], meta["width"])
    codec.load_state_dict(state)
    codec.eval()
    for p in codec.parameters():
        p.requires_grad_(False)
    return codec
