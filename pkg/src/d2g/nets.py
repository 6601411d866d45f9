"""Small conditional U-Net shared by the teacher, the one-step generator and the
discriminator backbone.

The forward pass can optionally accept per-level additive injections into the
encoder and return the decoder-side feature taps the discriminator reads out.
"""

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class UNetConfig:
    in_channels: int = 4
    base_channels: int = 32
    channel_mults: tuple = (1, 2, 2)
    num_res_blocks: int = 2
    num_classes: int = 10
    emb_dim: int = 128
    dropout: float = 0.0

    def to_dict(self):
        d = asdict(self)
        d["channel_mults"] = list(self.channel_mults)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["channel_mults"] = tuple(d["channel_mults"])
        return cls(**d)


def timestep_embedding(t, dim, max_period=10000.0):
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=1)


def _groups(ch):
    for g in (8, 4, 2, 1):
        if ch % g == 0:
            return g
    return 1


class ResBlock(nn.Module):
    def __init__(self, in_ch, out_ch, emb_dim, dropout=0.0):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb = nn.Linear(emb_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.drop = nn.Dropout(dropout)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(self.drop(F.silu(self.norm2(h))))
        return self.skip(x) + h


class UNet(nn.Module):
    """epsilon-predicting U-Net conditioned on a (continuous) timestep and a class index.

    Class index ``num_classes`` is the reserved null condition.
    """

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        chs = [cfg.base_channels * m for m in cfg.channel_mults]
        self.levels = len(chs)
        self.level_channels = chs
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.base_channels, cfg.emb_dim), nn.SiLU(), nn.Linear(cfg.emb_dim, cfg.emb_dim)
        )
        self.class_emb = nn.Embedding(cfg.num_classes + 1, cfg.emb_dim)
        self.conv_in = nn.Conv2d(cfg.in_channels, chs[0], 3, padding=1)

        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = chs[0]
        for i, ch in enumerate(chs):
            blocks = nn.ModuleList()
            for _ in range(cfg.num_res_blocks):
                blocks.append(ResBlock(prev, ch, cfg.emb_dim, cfg.dropout))
                prev = ch
            self.down.append(blocks)
            if i < self.levels - 1:
                self.downsample.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))

        self.mid = nn.ModuleList([
            ResBlock(prev, prev, cfg.emb_dim, cfg.dropout),
            ResBlock(prev, prev, cfg.emb_dim, cfg.dropout),
        ])

        # decoder level i (from deepest) consumes concat(upsampled h, skip_i)
        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i in reversed(range(self.levels)):
            ch = chs[i]
            blocks = nn.ModuleList()
            in_ch = prev + ch
            for _ in range(cfg.num_res_blocks):
                blocks.append(ResBlock(in_ch, ch, cfg.emb_dim, cfg.dropout))
                in_ch = ch
            self.up.append(blocks)
            if i > 0:
                self.upsample.append(nn.Conv2d(ch, ch, 3, padding=1))
            prev = ch

        self.norm_out = nn.GroupNorm(_groups(chs[0]), chs[0])
        self.conv_out = nn.Conv2d(chs[0], cfg.in_channels, 3, padding=1)

    def embed(self, t, c):
        if not torch.is_tensor(t):
            t = torch.tensor(t, dtype=torch.float32)
        t = t.float().reshape(-1)
        if t.numel() == 1 and c.shape[0] != 1:
            t = t.expand(c.shape[0])
        temb = self.time_mlp(timestep_embedding(t * 1000.0, self.cfg.base_channels).to(self.time_mlp[0].weight.dtype))
        return temb + self.class_emb(c)

    def forward(self, x, t, c, inject=None, return_taps=False):
        """``t`` is a noise-level coordinate in [0, 1] (index / T).

        ``inject[i]``, when given, is added to the activations entering encoder
        level ``i``.  With ``return_taps`` the per-decoder-level triples
        ``(skip, upsampled, combined)`` are returned alongside the output.
        """
        emb = self.embed(t, c)
        h = self.conv_in(x)
        skips = []
        for i, blocks in enumerate(self.down):
            if inject is not None and inject[i] is not None:
                h = h + inject[i]
            for blk in blocks:
                h = blk(h, emb)
            skips.append(h)
            if i < self.levels - 1:
                h = self.downsample[i](h)
        for blk in self.mid:
            h = blk(h, emb)

        taps = []
        for j, blocks in enumerate(self.up):
            level = self.levels - 1 - j
            if j > 0:
                h = F.interpolate(h, scale_factor=2.0, mode="nearest")
                h = self.upsample[j - 1](h)
            skip = skips[level]
            up = h
            h = torch.cat([up, skip], dim=1)
            for blk in blocks:
                h = blk(h, emb)
            taps.append((skip, up, h))
        out = self.conv_out(F.silu(self.norm_out(h)))
        if return_taps:
            return out, taps
        return out
