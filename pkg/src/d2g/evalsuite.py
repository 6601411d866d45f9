"""Small-scale sample-quality metrics: Fréchet distance on classifier features,
k-NN precision/recall, condition alignment, diversity and trajectory fidelity."""

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .errors import InvalidArgument
from .teacher import ddim_solve

SHRINKAGE = 1e-3


@dataclass
class FeatureStats:
    mean: np.ndarray
    covariance: np.ndarray
    count: int

    @classmethod
    def from_features(cls, feats, shrinkage=0.0):
        f = np.asarray(feats.detach().cpu() if torch.is_tensor(feats) else feats, dtype=np.float64)
        if f.ndim != 2 or f.shape[0] < 2:
            raise InvalidArgument("feature statistics need at least 2 samples of 1-D features")
        cov = np.atleast_2d(np.cov(f, rowvar=False))
        cov = 0.5 * (cov + cov.T)
        if shrinkage:
            cov = cov + shrinkage * np.eye(cov.shape[0])
        return cls(f.mean(0), cov, f.shape[0])

    @property
    def dim(self):
        return self.mean.shape[0]


def _psd_sqrt(m):
    vals, vecs = np.linalg.eigh(0.5 * (m + m.T))
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(a, b):
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    The trace of the product root is taken as ``Tr((S_a^½ S_b S_a^½)^½)``,
    with negative eigenvalues clamped to zero.
    """
    if a.dim != b.dim:
        raise InvalidArgument(f"feature dims differ: {a.dim} vs {b.dim}")
    diff = a.mean - b.mean
    ra = _psd_sqrt(a.covariance)
    inner = ra @ b.covariance @ ra
    vals = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    tr_root = np.sqrt(np.clip(vals, 0.0, None)).sum()
    value = diff @ diff + np.trace(a.covariance) + np.trace(b.covariance) - 2.0 * tr_root
    return float(max(value, 0.0))


@torch.no_grad()
def extract_features(feature_model, images, batch=256):
    feature_model.eval()
    return torch.cat([feature_model.embed(images[i:i + batch]) for i in range(0, len(images), batch)])


def fid_proxy(feature_model, real, fake, shrinkage="auto"):
    """Fréchet distance between Gaussian fits of ``feature_model.embed`` features.

    With ``shrinkage="auto"`` a ``1e-3`` ridge is added to both covariances
    when either set has fewer than twice as many samples as feature dims.
    """
    fr, ff = extract_features(feature_model, real), extract_features(feature_model, fake)
    dim = fr.shape[1]
    small = min(len(fr), len(ff)) < 2 * dim
    if shrinkage == "auto":
        shrinkage = SHRINKAGE if small else 0.0
    if small and not shrinkage:
        raise InvalidArgument(f"sets of {len(fr)}/{len(ff)} samples are too small for {dim}-d features "
                              "without shrinkage")
    return frechet_distance(FeatureStats.from_features(fr, shrinkage), FeatureStats.from_features(ff, shrinkage))


def _kth_radius(x, k):
    d = torch.cdist(x, x)
    # column 0 of the sorted row is the point itself
    return d.sort(dim=1).values[:, k]


def _coverage(points, centers, radii):
    d = torch.cdist(points, centers)
    return (d <= radii[None, :]).any(dim=1).double().mean().item()


@torch.no_grad()
def precision_recall(real_feats, fake_feats, k=3):
    real = torch.as_tensor(real_feats, dtype=torch.float64)
    fake = torch.as_tensor(fake_feats, dtype=torch.float64)
    if not 1 <= k < min(len(real), len(fake)):
        raise InvalidArgument(f"k={k} must lie in [1, {min(len(real), len(fake))})")
    precision = _coverage(fake, real, _kth_radius(real, k))
    recall = _coverage(real, fake, _kth_radius(fake, k))
    return precision, recall


@torch.no_grad()
def alignment_score(classifier, generated, conds, batch=256):
    """Fraction of samples the classifier assigns to their conditioning class."""
    classifier.eval()
    conds = torch.as_tensor(conds).long()
    preds = torch.cat([classifier(generated[i:i + batch]).argmax(1) for i in range(0, len(generated), batch)])
    return (preds == conds).double().mean().item()


def _noise(n, shape, seed):
    return torch.randn((n, *shape), generator=torch.Generator().manual_seed(seed))


@torch.no_grad()
def diversity_score(G, c, n, dist, latent_shape, seed=0):
    """Mean pairwise distance among ``n`` outputs of ``G`` at a fixed condition."""
    if n < 2:
        raise InvalidArgument("diversity needs n >= 2")
    z = _noise(n, latent_shape, seed)
    out = G(z, torch.full((n,), int(c), dtype=torch.long))
    i, j = torch.triu_indices(n, n, offset=1)
    return dist(out[i], out[j]).double().mean().item()


@torch.no_grad()
def trajectory_fidelity(G, teacher, conds, n, dist, latent_shape, steps=50, w=1.0, seed=0):
    """Mean distance between ``G(z, c)`` and the teacher's DDIM endpoint from the same noise."""
    if n < 1:
        raise InvalidArgument("trajectory fidelity needs n >= 1")
    z = _noise(n, latent_shape, seed)
    conds = torch.as_tensor(conds).long().reshape(-1)
    c = conds.repeat(math.ceil(n / len(conds)))[:n]
    ref = ddim_solve(teacher, z, c, steps, w)
    return dist(G(z, c), ref).double().mean().item()


@dataclass
class MetricReport:
    frechet: float
    precision: float
    recall: float
    alignment: float
    diversity: float
    trajectory_fidelity: float
    counts: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("frechet", "precision", "recall", "alignment", "diversity", "trajectory_fidelity"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise InvalidArgument(f"metric {name} is not finite")
        for name in ("precision", "recall", "alignment"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InvalidArgument(f"metric {name} outside [0, 1]")
        if self.frechet < 0 or self.diversity < 0 or self.trajectory_fidelity < 0:
            raise InvalidArgument("distances must be non-negative")

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    def table(self):
        rows = [("frechet", self.frechet), ("precision", self.precision), ("recall", self.recall),
                ("alignment", self.alignment), ("diversity", self.diversity),
                ("trajectory_fidelity", self.trajectory_fidelity)]
        rows += sorted(self.extra.items())
        width = max(len(r[0]) for r in rows)
        lines = [f"{name.ljust(width)}  {value:.6g}" for name, value in rows]
        lines += [f"{('n_' + k).ljust(width)}  {v}" for k, v in sorted(self.counts.items())]
        return "\n".join(lines)


@torch.no_grad()
def generate_latents(G, n, latent_shape, num_classes, seed=0, batch=256):
    """Seeded noise with classes cycling over ``num_classes``."""
    z = _noise(n, latent_shape, seed)
    c = torch.arange(n) % num_classes
    return torch.cat([G(z[i:i + batch], c[i:i + batch]) for i in range(0, n, batch)]), c


@torch.no_grad()
def evaluate(G, teacher, codec, classifier, latent_dist, real_images, n=512, k=3, seed=0,
             diversity_n=8, fidelity_n=64, steps=50, w=1.0):
    """Full report for generator ``G``; ``classifier`` is the pixel backbone,
    also used as the feature model."""
    from .codec import decode_batched

    shape = teacher.latent_shape
    latents, c = generate_latents(G, n, shape, teacher.condition_arity, seed)
    images = decode_batched(codec, latents).clamp(-1, 1)
    frechet = fid_proxy(classifier, real_images, images)
    precision, recall = precision_recall(extract_features(classifier, real_images),
                                         extract_features(classifier, images), k)
    alignment = alignment_score(classifier, images, c)
    classes = range(teacher.condition_arity)
    diversity = float(np.mean([diversity_score(G, cls, diversity_n, latent_dist, shape, seed + 1 + cls)
                               for cls in classes]))
    fidelity = trajectory_fidelity(G, teacher, list(classes), fidelity_n, latent_dist, shape, steps, w, seed + 100)
    return MetricReport(frechet, precision, recall, alignment, diversity, fidelity,
                        counts={"real": len(real_images), "fake": n, "fidelity": fidelity_n,
                                "diversity_per_class": diversity_n})
