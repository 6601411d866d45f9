"""Differentiable augmentations applied identically to a pair of latents.

Four families: ``blit`` (horizontal flip, 90-degree rotation, integer
translation), ``geometric`` (isotropic scale, arbitrary rotation, anisotropic
scale, fractional translation, one bilinear resample), ``color`` (brightness,
saturation, contrast) and ``cutout`` (one zero-filled rectangle).

Parameters are sampled per batch element, so one :class:`AugmentationOp`
covers a whole minibatch of pairs.
"""

import math
from dataclasses import dataclass, field, fields

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import InvalidArgument

CATEGORIES = ("blit", "geometric", "color", "cutout")


@dataclass(frozen=True)
class AugmentationSpec:
    categories: frozenset = frozenset(CATEGORIES)
    # blit
    translate_int: float = 0.125          # max |shift| as a fraction of size
    quarter_turns: bool = True            # include 90-degree rotations
    # geometric
    scale_std: float = 0.2                # log2 std of isotropic scale
    rotate_max: float = math.pi           # radians
    aniso_std: float = 0.2                # log2 std of anisotropic scale
    translate_frac: float = 0.125
    # color
    brightness: float = 0.2               # additive, uniform in [-b, b]
    saturation: tuple = (0.5, 1.5)
    contrast: tuple = (0.5, 1.5)
    # cutout
    cutout_size: tuple = (0.25, 0.5)
    apply_probabilities: dict = field(default_factory=lambda: {c: 1.0 for c in CATEGORIES})

    def __post_init__(self):
        cats = frozenset(self.categories)
        object.__setattr__(self, "categories", cats)
        bad = cats - set(CATEGORIES)
        if bad:
            raise InvalidArgument(f"unknown augmentation categories {sorted(bad)}")
        for c, p in self.apply_probabilities.items():
            if not 0.0 <= p <= 1.0:
                raise InvalidArgument(f"apply probability for {c} must lie in [0, 1]")
        for name in ("saturation", "contrast", "cutout_size"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise InvalidArgument(f"empty range for {name}")
        if min(self.translate_int, self.scale_std, self.rotate_max, self.aniso_std,
               self.translate_frac, self.brightness) < 0:
            raise InvalidArgument("augmentation magnitudes must be non-negative")

    @classmethod
    def from_names(cls, names, **kw):
        if isinstance(names, str):
            names = [n for n in names.replace("+", ",").split(",") if n and n != "identity"]
        return cls(categories=frozenset(names), **kw)

    def to_dict(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = sorted(v) if f.name == "categories" else (list(v) if isinstance(v, tuple) else v)
        return out


IDENTITY_SPEC = AugmentationSpec(categories=frozenset())


@dataclass
class AugmentationOp:
    """Sampled parameters, one row per batch element (``None`` = family not applied)."""
    batch: int
    flip: np.ndarray = None          # bool (B,)
    rot90: np.ndarray = None         # int (B,) in 0..3
    shift: np.ndarray = None         # float (B, 2) (dy, dx) as a fraction of size, rounded to whole pixels
    rotation: np.ndarray = None      # float (B,) radians
    affine: np.ndarray = None        # float (B, 2, 3), output->input normalized coords
    brightness: np.ndarray = None
    saturation: np.ndarray = None
    contrast: np.ndarray = None
    cutout: np.ndarray = None        # float (B, 4): center y, center x, height, width as fractions
    differentiable: bool = True

    @property
    def is_identity(self):
        return all(getattr(self, n) is None for n in
                   ("flip", "rot90", "shift", "affine", "brightness", "saturation", "contrast", "cutout"))

    def __eq__(self, other):
        if not isinstance(other, AugmentationOp) or self.batch != other.batch:
            return False
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if (a is None) != (b is None):
                return False
            if a is not None and not np.array_equal(a, b):
                return False
        return True


def sample_augmentation(spec, seed, batch=1):
    rng = np.random.default_rng(seed)
    op = AugmentationOp(batch=batch)
    probs = spec.apply_probabilities
    # one uniform draw per category keeps streams aligned across specs
    gates = {c: rng.uniform(size=batch) < probs.get(c, 1.0) for c in CATEGORIES}

    blit = (rng.uniform(size=batch) < 0.5, rng.integers(0, 4, size=batch),
            rng.uniform(-1, 1, size=(batch, 2)) * spec.translate_int)
    if "blit" in spec.categories and gates["blit"].any():
        g = gates["blit"]
        op.flip = blit[0] & g
        op.rot90 = np.where(g, blit[1], 0) if spec.quarter_turns else np.zeros(batch, dtype=np.int64)
        op.shift = np.where(g[:, None], blit[2], 0.0)

    iso = np.exp2(rng.normal(0, 1, size=batch) * spec.scale_std)
    rot = rng.uniform(-1, 1, size=batch) * spec.rotate_max
    aniso = np.exp2(rng.normal(0, 1, size=batch) * spec.aniso_std)
    trans = rng.uniform(-1, 1, size=(batch, 2)) * spec.translate_frac
    if "geometric" in spec.categories and gates["geometric"].any():
        g = gates["geometric"]
        iso, rot, aniso = np.where(g, iso, 1.0), np.where(g, rot, 0.0), np.where(g, aniso, 1.0)
        trans = np.where(g[:, None], trans, 0.0)
        op.rotation = rot
        op.affine = _affine_matrices(iso, rot, aniso, trans)

    bri = rng.uniform(-1, 1, size=batch) * spec.brightness
    sat = rng.uniform(*spec.saturation, size=batch)
    con = rng.uniform(*spec.contrast, size=batch)
    if "color" in spec.categories and gates["color"].any():
        g = gates["color"]
        op.brightness = np.where(g, bri, 0.0)
        op.saturation = np.where(g, sat, 1.0)
        op.contrast = np.where(g, con, 1.0)

    size = rng.uniform(*spec.cutout_size, size=(batch, 2))
    center = rng.uniform(0, 1, size=(batch, 2))
    if "cutout" in spec.categories and gates["cutout"].any():
        g = gates["cutout"]
        op.cutout = np.concatenate([center, np.where(g[:, None], size, 0.0)], axis=1)
    return op


def _affine_matrices(iso, rot, aniso, trans):
    """Inverse maps (output -> input, normalized coords) for affine_grid."""
    mats = []
    for s, r, a, t in zip(iso, rot, aniso, trans):
        scale = np.diag([s * a, s / a])
        c, sn = math.cos(r), math.sin(r)
        fwd = np.array([[c, -sn], [sn, c]]) @ scale
        inv = np.linalg.inv(fwd)
        # forward: p_out = fwd @ p_in + t  =>  p_in = inv @ (p_out - t)
        mats.append(np.concatenate([inv, -(inv @ t[::-1])[:, None]], axis=1))
    return np.stack(mats)


def _broadcast(arr, batch):
    if arr.shape[0] == batch:
        return arr
    if arr.shape[0] == 1:
        return np.repeat(arr, batch, axis=0)
    raise InvalidArgument(f"augmentation sampled for batch {arr.shape[0]}, applied to batch {batch}")


def _blit(x, op):
    n, _, h, w = x.shape
    flip, rot, shift = (_broadcast(a, n) for a in (op.flip, op.rot90, op.shift))
    yy, xx = np.mgrid[0:h, 0:w]
    index = np.empty((n, h * w), dtype=np.int64)
    valid = np.empty((n, h * w), dtype=bool)
    for i in range(n):
        # output pixel (y, x) reads input pixel obtained by undoing translate, rot90, flip
        sy = yy - int(round(shift[i, 0] * h))
        sx = xx - int(round(shift[i, 1] * w))
        for _ in range(int(rot[i]) % 4):
            # quarter turn; assumes a square grid
            sy, sx = sx, (w - 1) - sy
        if flip[i]:
            sx = (w - 1) - sx
        ok = (sy >= 0) & (sy < h) & (sx >= 0) & (sx < w)
        index[i] = np.where(ok, sy * w + sx, 0).reshape(-1)
        valid[i] = ok.reshape(-1)
    idx = torch.from_numpy(index).to(x.device)[:, None, :].expand(n, x.shape[1], h * w)
    out = torch.gather(x.reshape(n, x.shape[1], h * w), 2, idx)
    mask = torch.from_numpy(valid).to(x)[:, None, :]
    return (out * mask).reshape(x.shape)


def _geometric(x, op):
    theta = torch.from_numpy(_broadcast(op.affine, x.shape[0])).to(x)
    grid = F.affine_grid(theta, list(x.shape), align_corners=False)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros", align_corners=False)


def _color(x, op):
    n = x.shape[0]
    view = lambda a: torch.from_numpy(_broadcast(a, n)).to(x).view(-1, 1, 1, 1)
    x = x + view(op.brightness)
    m = x.mean(dim=1, keepdim=True)
    x = (x - m) * view(op.saturation) + m
    m = x.mean(dim=(1, 2, 3), keepdim=True)
    return (x - m) * view(op.contrast) + m


def cutout_mask(op, n, h, w):
    cut = _broadcast(op.cutout, n)
    yy = (torch.arange(h, dtype=torch.float64) + 0.5) / h
    xx = (torch.arange(w, dtype=torch.float64) + 0.5) / w
    masks = []
    for cy, cx, ch, cw in cut:
        iny = (yy - cy).abs() < ch / 2
        inx = (xx - cx).abs() < cw / 2
        masks.append(1.0 - (iny[:, None] & inx[None, :]).double())
    return torch.stack(masks)[:, None]


def _apply_one(x, op):
    if op.flip is not None:
        x = _blit(x, op)
    if op.affine is not None:
        x = _geometric(x, op)
    if op.brightness is not None:
        x = _color(x, op)
    if op.cutout is not None:
        x = x * cutout_mask(op, x.shape[0], x.shape[2], x.shape[3]).to(x)
    return x


def apply_augmentation(op, x0, x1):
    """Transform both inputs with the same sampled parameters."""
    if x0.shape != x1.shape:
        raise InvalidArgument(f"shape mismatch {tuple(x0.shape)} vs {tuple(x1.shape)}")
    if op.is_identity:
        return x0, x1
    return _apply_one(x0, op), _apply_one(x1, op)
