"""Procedural toy image dataset: ten classes of coloured glyphs on graded
backgrounds.  Every class is multi-modal (random position, size, palette
entry and background).  Palettes overlap between neighbouring classes and some
images carry a small distractor blob, so colour alone does not identify the
class.  Images are RGB in [-1, 1].
"""

import numpy as np
import torch

NUM_CLASSES = 10
CLASS_NAMES = (
    "disk", "square", "triangle", "ring", "cross",
    "hbars", "vbars", "diagonal", "dots", "checker",
)
COLORS = np.array([
    [0.9, 0.2, 0.2], [0.9, 0.6, 0.1], [0.2, 0.8, 0.3], [0.1, 0.5, 0.9], [0.8, 0.2, 0.8],
    [0.9, 0.9, 0.2], [0.2, 0.9, 0.9], [0.95, 0.95, 0.95], [0.5, 0.9, 0.2], [0.95, 0.5, 0.3],
])
# class k draws from colours k and k+1, so every colour is shared by two classes
PALETTES = np.stack([COLORS, np.roll(COLORS, -1, axis=0)], axis=1)
DISTRACTOR_PROB = 0.3


def _glyph(cls, size, rng):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    r = rng.uniform(0.22, 0.36) * size
    cy, cx = rng.uniform(r, size - r, size=2)
    dy, dx = (yy - cy) / r, (xx - cx) / r
    if cls == 0:
        m = dy ** 2 + dx ** 2 <= 1
    elif cls == 1:
        m = (np.abs(dy) <= 0.8) & (np.abs(dx) <= 0.8)
    elif cls == 2:
        m = (dy <= 0.8) & (dy >= -0.9 + 1.7 * np.abs(dx))
    elif cls == 3:
        d = dy ** 2 + dx ** 2
        m = (d <= 1) & (d >= 0.35)
    elif cls == 4:
        m = ((np.abs(dy) <= 0.3) | (np.abs(dx) <= 0.3)) & (np.abs(dy) <= 1) & (np.abs(dx) <= 1)
    elif cls == 5:
        period = rng.integers(3, 5)
        m = ((yy.astype(int) // (period // 2 + 1)) % 2 == 0) & (np.abs(dx) <= 1.2)
    elif cls == 6:
        period = rng.integers(3, 5)
        m = ((xx.astype(int) // (period // 2 + 1)) % 2 == 0) & (np.abs(dy) <= 1.2)
    elif cls == 7:
        sgn = rng.choice([-1.0, 1.0])
        m = np.abs(dy - sgn * dx) <= 0.45
    elif cls == 8:
        m = ((dy + 0.5) ** 2 + (dx + 0.5) ** 2 <= 0.25) | ((dy - 0.5) ** 2 + (dx - 0.5) ** 2 <= 0.25)
    else:
        cell = max(2, size // 4)
        m = ((yy.astype(int) // cell + xx.astype(int) // cell) % 2 == 0) & (np.abs(dy) <= 1.3) & (np.abs(dx) <= 1.3)
    return m.astype(np.float64)


def render(cls, size, rng):
    """One (3, size, size) image of class ``cls`` in [-1, 1]."""
    mode = rng.integers(0, 2)
    color = np.clip(PALETTES[cls, mode] + rng.normal(0, 0.05, 3), 0, 1)
    yy, xx = (np.mgrid[0:size, 0:size] + 0.5) / size
    lo, hi = rng.uniform(0.0, 0.35, 3), rng.uniform(0.0, 0.35, 3)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = 0.5 + 0.5 * (np.cos(angle) * (xx - 0.5) + np.sin(angle) * (yy - 0.5)) * 1.4
    bg = lo[:, None, None] + (hi - lo)[:, None, None] * np.clip(ramp, 0, 1)[None]
    mask = _glyph(cls, size, rng)
    img = bg * (1 - mask) + color[:, None, None] * mask
    if rng.uniform() < DISTRACTOR_PROB:
        r = rng.uniform(0.06, 0.12) * size
        cy, cx = rng.uniform(0, size, 2)
        blob = ((yy * size - cy) ** 2 + (xx * size - cx) ** 2 <= r * r).astype(np.float64)
        tint = COLORS[rng.integers(len(COLORS))]
        img = img * (1 - blob) + tint[:, None, None] * blob
    img = img + rng.normal(0, 0.04, img.shape)
    return np.clip(img * 2 - 1, -1, 1).astype(np.float32)


def make_dataset(n, size=16, seed=0, classes=None):
    """``n`` images and labels, labels cycling uniformly over ``classes``."""
    rng = np.random.default_rng(seed)
    classes = list(range(NUM_CLASSES)) if classes is None else list(classes)
    labels = np.array([classes[i % len(classes)] for i in range(n)], dtype=np.int64)
    rng.shuffle(labels)
    imgs = np.stack([render(int(c), size, rng) for c in labels]) if n else np.zeros((0, 3, size, size), np.float32)
    return torch.from_numpy(imgs), torch.from_numpy(labels)
