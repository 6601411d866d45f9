import json
import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings, strategies as st
from scipy import linalg

from d2g.distiller import generator_from_teacher, random_generator
from d2g.errors import InvalidArgument
from d2g.evalsuite import (FeatureStats, MetricReport, alignment_score, diversity_score, fid_proxy,
                           frechet_distance, precision_recall, trajectory_fidelity)
from d2g.teacher import ddim_solve


def _stats(mean, cov):
    return FeatureStats(np.atleast_1d(np.asarray(mean, float)), np.atleast_2d(np.asarray(cov, float)), 100)


def test_frechet_hand_cases():
    assert frechet_distance(_stats([0.0], [[1.0]]), _stats([3.0], [[1.0]])) == pytest.approx(9.0, abs=1e-6)
    assert frechet_distance(_stats([0.0], [[1.0]]), _stats([0.0], [[4.0]])) == pytest.approx(1.0, abs=1e-6)
    a = FeatureStats.from_features(np.random.default_rng(0).normal(size=(50, 4)))
    assert frechet_distance(a, a) == pytest.approx(0.0, abs=1e-6)


def _scipy_frechet(a, b):
    root = linalg.sqrtm(a.covariance @ b.covariance).real
    d = a.mean - b.mean
    return d @ d + np.trace(a.covariance + b.covariance - 2 * root)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10 ** 6), dim=st.integers(1, 6))
def test_frechet_against_scipy_and_symmetric(seed, dim):
    rng = np.random.default_rng(seed)
    fa = rng.normal(size=(40, dim))
    fb = rng.normal(size=(40, dim)) * rng.uniform(0.5, 2, dim) + rng.normal(size=dim)
    a, b = FeatureStats.from_features(fa), FeatureStats.from_features(fb)
    assert frechet_distance(a, b) == pytest.approx(_scipy_frechet(a, b), rel=1e-5, abs=1e-6)
    assert frechet_distance(a, b) == pytest.approx(frechet_distance(b, a), rel=1e-6, abs=1e-8)
    q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    ra, rb = FeatureStats.from_features(fa @ q), FeatureStats.from_features(fb @ q)
    assert frechet_distance(ra, rb) == pytest.approx(frechet_distance(a, b), abs=1e-5)


class _Identity(nn.Module):
    def embed(self, x):
        return x.flatten(1)

    def forward(self, x):
        return x.flatten(1)


def test_fid_proxy_self_and_shift():
    x = torch.randn(200, 3, 2, 2)
    assert fid_proxy(_Identity(), x, x) <= 1e-4
    assert fid_proxy(_Identity(), x, x + 5.0) > fid_proxy(_Identity(), x, x + 0.1) > fid_proxy(_Identity(), x, x)
    with pytest.raises(InvalidArgument):
        fid_proxy(_Identity(), x[:10], x[:10], shrinkage=0.0)


def test_precision_recall_cases():
    rng = np.random.default_rng(0)
    x = torch.from_numpy(rng.normal(size=(60, 3)))
    for k in (1, 3, 10):
        assert precision_recall(x, x, k) == (1.0, 1.0)
    assert precision_recall(x, x + 1000.0, 3) == (0.0, 0.0)
    with pytest.raises(InvalidArgument):
        precision_recall(x, x, 60)


def _brute_force_pr(real, fake, k):
    def radii(s):
        d = np.linalg.norm(s[:, None] - s[None], axis=-1)
        return np.sort(d, axis=1)[:, k]

    def cov(p, c, r):
        d = np.linalg.norm(p[:, None] - c[None], axis=-1)
        return np.mean([(row <= r).any() for row in d])

    return cov(fake, real, radii(real)), cov(real, fake, radii(fake))


def test_mode_drop_precision_recall():
    rng = np.random.default_rng(1)
    centers = np.array([[0, 0], [20, 0], [0, 20], [20, 20]], float)
    real = np.concatenate([c + rng.normal(size=(50, 2)) for c in centers])
    fake = centers[0] + rng.normal(size=(80, 2))
    p, r = precision_recall(torch.from_numpy(real), torch.from_numpy(fake), 3)
    bp, br = _brute_force_pr(real, fake, 3)
    assert p == pytest.approx(bp) and r == pytest.approx(br)
    assert p > 0.9 and r < 0.5


class _Oracle(nn.Module):
    """Classifier that reads the label off the first pixel."""

    def forward(self, x):
        return nn.functional.one_hot(x[:, 0, 0, 0].long(), 4).float()


def test_alignment_cases():
    labels = torch.arange(200) % 4
    imgs = torch.zeros(200, 1, 2, 2)
    imgs[:, 0, 0, 0] = labels.float()
    assert alignment_score(_Oracle(), imgs, labels) == 1.0
    assert alignment_score(_Oracle(), imgs, (labels + 1) % 4) == 0.0
    perm = labels[torch.randperm(200, generator=torch.Generator().manual_seed(0))]
    assert abs(alignment_score(_Oracle(), imgs, perm) - 0.25) < 3 * math.sqrt(0.25 * 0.75 / 200) + 0.05


class _Const(nn.Module):
    def forward(self, z, c):
        return torch.ones_like(z)


class _TeacherWrap(nn.Module):
    def __init__(self, teacher, steps, sigma=0.0):
        super().__init__()
        self.teacher, self.steps, self.sigma = teacher, steps, sigma

    def forward(self, z, c):
        x = ddim_solve(self.teacher, z, c, self.steps)
        if self.sigma:
            x = x + self.sigma * torch.randn(x.shape, generator=torch.Generator().manual_seed(99))
        return x


def test_diversity(tiny_teacher, tiny_dist):
    shape = tiny_teacher.latent_shape
    assert diversity_score(_Const(), 0, 5, tiny_dist, shape) == 0.0
    G = _TeacherWrap(tiny_teacher, 4)
    z = torch.randn((2, *shape), generator=torch.Generator().manual_seed(3))
    want = tiny_dist(G(z[:1], torch.tensor([1])), G(z[1:], torch.tensor([1]))).item()
    assert diversity_score(G, 1, 2, tiny_dist, shape, seed=3) == pytest.approx(want, rel=1e-6)
    assert diversity_score(G, 1, 4, tiny_dist, shape) > 0
    with pytest.raises(InvalidArgument):
        diversity_score(G, 1, 1, tiny_dist, shape)


def test_trajectory_fidelity(tiny_teacher, tiny_dist):
    shape = tiny_teacher.latent_shape
    exact = _TeacherWrap(tiny_teacher, 5)
    assert trajectory_fidelity(exact, tiny_teacher, [0, 1], 6, tiny_dist, shape, steps=5) == 0.0
    vals = [trajectory_fidelity(_TeacherWrap(tiny_teacher, 5, s), tiny_teacher, [0, 1], 6, tiny_dist, shape, steps=5)
            for s in (0.1, 0.5, 1.0)]
    assert 0 < vals[0] < vals[1] < vals[2]


def test_report_validation_and_rendering():
    r = MetricReport(1.0, 0.5, 0.5, 0.9, 0.1, 0.2, counts={"real": 10})
    assert json.loads(r.to_json())["frechet"] == 1.0
    assert "trajectory_fidelity" in r.table()
    with pytest.raises(InvalidArgument):
        MetricReport(float("nan"), 0.5, 0.5, 0.9, 0.1, 0.2)
    with pytest.raises(InvalidArgument):
        MetricReport(1.0, 1.5, 0.5, 0.9, 0.1, 0.2)


@pytest.mark.desk
def test_desk_student_beats_random_generator(desk):
    from d2g import distiller

    teacher = desk.cache.teacher()
    student = distiller.load_generator(desk.stage1()["generator"]).eval()
    rand = random_generator(teacher.net.cfg, teacher.schedule, teacher.latent_shape, seed=1).eval()
    dist = desk.cache.perceptual().latent
    f = lambda G: trajectory_fidelity(G, teacher, list(range(10)), 32, dist, teacher.latent_shape, steps=50)
    assert f(student) < f(rand)
