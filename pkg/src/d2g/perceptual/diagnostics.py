"""Single-latent reconstruction probe and the loss-path micro-benchmark."""

import json
import statistics
import time

import torch
import torch.nn.functional as F

from ..codec import decode
from ..errors import InvalidArgument
from .augment import AugmentationSpec
from .distance import e_latent_lpips, latent_lpips


def reconstruct_single(loss, target, iters, seed=0, dist=None, spec=None, lr=0.05, init_scale=1.0):
    """Optimize a randomly initialised latent towards ``target`` under ``loss``.

    ``loss`` is one of ``"mse"``, ``"latentlpips"`` or ``"e_latentlpips"``
    (the latter draws a fresh augmentation from ``spec`` every iteration).
    Returns ``(recovered, curve)``; ``curve[i]`` is the loss at iteration ``i``.
    """
    if iters < 1:
        raise InvalidArgument("iters must be >= 1")
    if loss not in ("mse", "latentlpips", "e_latentlpips"):
        raise InvalidArgument(f"unknown loss {loss!r}")
    if loss != "mse" and dist is None:
        raise InvalidArgument(f"{loss} needs a calibrated distance")
    target = target if target.dim() == 4 else target[None]
    gen = torch.Generator().manual_seed(seed)
    x = (torch.randn(target.shape, generator=gen) * init_scale).requires_grad_(True)
    opt = torch.optim.Adam([x], lr=lr)
    spec = spec or AugmentationSpec()
    curve = []
    for it in range(iters):
        if loss == "mse":
            value = F.mse_loss(x, target)
        elif loss == "latentlpips":
            value = latent_lpips(dist, x, target).mean()
        else:
            value = e_latent_lpips(dist, spec, x, target, seed=(seed, it)).mean()
        opt.zero_grad(set_to_none=True)
        value.backward()
        opt.step()
        curve.append(float(value.item()))
    return x.detach(), curve


def latent_rms(a, b):
    return (a - b).pow(2).mean().sqrt().item()


class _SavedBytes:
    """Counts bytes of tensors autograd saves for backward (activation memory)."""

    def __init__(self):
        self.total = 0

    def pack(self, t):
        self.total += t.numel() * t.element_size()
        return t

    @staticmethod
    def unpack(t):
        return t


def _time_path(fn, trials, warmup):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(trials):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1000.0)
    counter = _SavedBytes()
    with torch.autograd.graph.saved_tensors_hooks(counter.pack, counter.unpack):
        fn()
    return statistics.median(times), counter.total


def bench_loss(latent_dist, pixel_dist, codec, latents_a, latents_b, spec=None, trials=20, warmup=3):
    """Time one forward+backward of each perceptual loss path at matched batch.

    ``pixel``: decode both latents, pixel-domain calibrated distance.
    ``latent``: E-LatentLPIPS directly on the latents.
    Returns a list of records ``{path, batch, median_ms, peak_bytes}``; peak
    bytes are the activation bytes saved for backward.
    """
    if trials < 20:
        raise InvalidArgument("bench_loss needs at least 20 trials")
    spec = spec or AugmentationSpec()
    batch = latents_a.shape[0]
    step = {"i": 0}

    def pixel_path():
        x = latents_a.detach().requires_grad_(True)
        d = pixel_dist(decode(codec, x), decode(codec, latents_b)).mean()
        d.backward()

    def latent_path():
        x = latents_a.detach().requires_grad_(True)
        step["i"] += 1
        d = e_latent_lpips(latent_dist, spec, x, latents_b, seed=step["i"]).mean()
        d.backward()

    records = []
    for name, fn in (("pixel", pixel_path), ("latent", latent_path)):
        median_ms, peak = _time_path(fn, trials, warmup)
        records.append({"path": name, "batch": batch, "median_ms": median_ms, "peak_bytes": peak})
    return records


def format_records(records):
    """Line-delimited JSON, one record per line."""
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
