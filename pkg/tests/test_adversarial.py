import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings, strategies as st

from d2g.adversarial import (SWAP_NONE, LazyR1State, MixAndMatchConfig, build_discriminator, disc_forward,
                             gan_losses, generator_gan_loss, labeled_d_loss, load_discriminator, mix_and_match,
                             save_discriminator, single_sample_r1)
from d2g.errors import InvalidArgument, InvalidState
from d2g.nets import UNetConfig
from d2g.teacher import analytic_gaussian_teacher, make_schedule, untrained_teacher


@pytest.fixture
def deep_teacher():
    cfg = UNetConfig(in_channels=4, base_channels=8, channel_mults=(1, 2, 2), num_res_blocks=1, num_classes=3,
                     emb_dim=16)
    return untrained_teacher(cfg, make_schedule("vp_cosine", 50), latent_shape=(4, 16, 16), seed=1)


def _inputs(n=2, shape=(4, 16, 16), seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randint(0, 3, (n,), generator=g), torch.randn(n, *shape, generator=g), torch.randn(n, *shape, generator=g)


def test_copy_contract_and_head_count(deep_teacher):
    D = build_discriminator(deep_teacher, scales=3)
    for k, v in deep_teacher.net.state_dict().items():
        assert torch.equal(D.unet.state_dict()[k], v), k
    assert D.head_count == 9
    out = disc_forward(D, *_inputs())
    assert len(out.maps()) == 9
    assert [s["skip"].shape[-1] for s in out.scales] == [16, 8, 4]


def test_z_ignored_at_init(deep_teacher):
    D = build_discriminator(deep_teacher, scales=2).eval()
    c, z, x = _inputs()
    a = D(c, z, x).maps()
    b = D(c, torch.randn_like(z), x).maps()
    assert all(torch.equal(p, q) for p, q in zip(a, b))
    assert all(torch.equal(p, q) for p, q in zip(a, D(c, z, x).maps()))


def test_every_head_gets_gradient(deep_teacher):
    D = build_discriminator(deep_teacher, scales=3)
    D(*_inputs()).total().sum().backward()
    for name, p in D.heads.named_parameters():
        assert p.grad is not None and p.grad.norm() > 0, name


def test_rejects_non_network_teacher():
    with pytest.raises(InvalidArgument):
        build_discriminator(analytic_gaussian_teacher(torch.zeros(4, 8, 8), 1.0))


def test_shape_checks(deep_teacher):
    D = build_discriminator(deep_teacher, scales=1)
    c, z, x = _inputs()
    with pytest.raises(InvalidArgument):
        D(c, z[:, :, :8], x)
    with pytest.raises(InvalidArgument):
        D(c, torch.zeros(2, 4, 10, 10), torch.zeros(2, 4, 10, 10))


def test_checkpoint_round_trip(deep_teacher, tmp_path):
    D = build_discriminator(deep_teacher, scales=2).eval()
    save_discriminator(D, tmp_path / "d.dsc")
    back = load_discriminator(tmp_path / "d.dsc").eval()
    c, z, x = _inputs()
    assert all(torch.equal(a, b) for a, b in zip(D(c, z, x).maps(), back(c, z, x).maps()))


# ------------------------------------------------------------------ losses

def test_gan_losses_at_zero():
    zero = [torch.zeros(2, 1, 4, 4), torch.zeros(2, 1, 2, 2)]
    d, g = gan_losses(zero, zero)
    assert abs(d.item() - 2 * math.log(2)) < 1e-6 and abs(g.item() - math.log(2)) < 1e-6


def test_gan_losses_limits_and_stability():
    big = torch.full((2, 1, 4, 4), 100.0)
    d, g = gan_losses(big, -big)
    assert d.item() < 1e-30 and torch.isfinite(g)
    d, g = gan_losses(-big, big)
    assert torch.isfinite(d) and torch.isfinite(g)
    d, _ = gan_losses(torch.full((1, 1, 2, 2), 30.0), torch.full((1, 1, 2, 2), -30.0))
    assert d.item() < 1e-12


@settings(max_examples=40, deadline=None)
@given(r=st.floats(-20, 20), f=st.floats(-20, 20))
def test_gan_losses_match_log_sigmoid(r, f):
    d, g = gan_losses(torch.tensor([[r]], dtype=torch.float64), torch.tensor([[f]], dtype=torch.float64))
    sig = lambda v: 1 / (1 + math.exp(-v))
    assert d.item() == pytest.approx(-math.log(sig(r)) - math.log(sig(-f)), rel=1e-9, abs=1e-12)
    assert g.item() == pytest.approx(-math.log(sig(f)), rel=1e-9, abs=1e-12)


def test_labeled_loss_matches_split():
    logits = torch.randn(6, 1, 3, 3)
    labels = torch.tensor([0, 0, 0, 1, 1, 1.0])
    d, _ = gan_losses(logits[3:], logits[:3])
    assert torch.allclose(labeled_d_loss(logits, labels), d)
    assert torch.allclose(generator_gan_loss(logits[:3]), gan_losses(logits[3:], logits[:3])[1])


# ---------------------------------------------------------------------- R1

class _Linear(nn.Module):
    def __init__(self, w):
        super().__init__()
        self.w = w

    def forward(self, c, z, x):
        return (x * self.w).flatten(1).sum(1, keepdim=True)


def test_r1_linear_exact():
    w = torch.randn(1, 3, 4, 4, dtype=torch.float64)
    x = torch.randn(5, 3, 4, 4, dtype=torch.float64)
    r1 = single_sample_r1(_Linear(w), torch.zeros(5), None, x, gamma=2.0)
    assert abs(r1.item() - w.pow(2).sum().item()) < 1e-6


def test_r1_constant_is_zero():
    const = lambda c, z, x: torch.ones(x.shape[0], 1, 2, 2)
    assert single_sample_r1(const, torch.zeros(2), None, torch.randn(2, 3, 4, 4), gamma=1.0).item() == 0.0


def test_r1_finite_difference(deep_teacher):
    D = build_discriminator(deep_teacher, scales=2).double().eval()
    c, z, x = _inputs(1, (4, 16, 16), seed=3)
    z, x = z.double(), x.double()
    gamma = 0.3
    r1 = single_sample_r1(D, c, z, x, gamma=gamma).item()
    f = lambda xx: D(c, z, xx).total().sum().item()
    grad = torch.zeros_like(x).reshape(-1)
    eps = 1e-5
    flat = x.reshape(-1)
    for i in range(flat.numel()):
        e = torch.zeros_like(flat)
        e[i] = eps
        grad[i] = (f((flat + e).view_as(x)) - f((flat - e).view_as(x))) / (2 * eps)
    fd = 0.5 * gamma * grad.pow(2).sum().item()
    assert abs(fd - r1) / r1 < 1e-3


def test_lazy_r1_pattern():
    w = torch.randn(1, 2, 2, 2)
    D = _Linear(w)
    state = LazyR1State(gamma=2.0, interval=4)
    vals = [single_sample_r1(D, torch.zeros(1), None, torch.randn(1, 2, 2, 2), interval_state=state).item()
            for _ in range(9)]
    p = w.pow(2).sum().item()
    assert vals == pytest.approx([4 * p, 0, 0, 0, 4 * p, 0, 0, 0, 4 * p], rel=1e-6)


def test_r1_needs_grad():
    with torch.no_grad(), pytest.raises(InvalidState):
        single_sample_r1(_Linear(torch.ones(1)), torch.zeros(1), None, torch.randn(1, 1))


# ------------------------------------------------------------ mix & match

def _batch(n=8, seed=0):
    g = torch.Generator().manual_seed(seed)
    return {"z": torch.randn(n, 2, 2, 2, generator=g), "c": torch.arange(n) % 3,
            "x_fake": torch.randn(n, 2, 2, 2, generator=g), "x_real": torch.randn(n, 2, 2, 2, generator=g)}


def test_mix_noop():
    b = _batch()
    m = mix_and_match(b, MixAndMatchConfig(), seed=0)
    n = len(b["z"])
    assert torch.equal(m.x, torch.cat([b["x_fake"], b["x_real"]]))
    assert torch.equal(m.z, torch.cat([b["z"], b["z"]])) and torch.equal(m.c, torch.cat([b["c"], b["c"]]))
    assert torch.equal(m.labels, torch.cat([torch.zeros(n), torch.ones(n)]))


def test_full_latent_swap():
    b = _batch()
    n = len(b["z"])
    m = mix_and_match(b, MixAndMatchConfig(swap_latent_prob=1.0), seed=1)
    assert torch.all(m.labels[n:] == 0)
    for i in range(n):
        row = m.x[n + i]
        assert not torch.equal(row, b["x_real"][i])
        assert any(torch.equal(row, b["x_real"][j]) for j in range(n) if j != i)


def test_swap_rate_monte_carlo():
    b = _batch(4)
    cfg = MixAndMatchConfig(swap_condition_prob=0.25)
    trials, hits = 2500, 0
    for s in range(trials):
        hits += int((mix_and_match(b, cfg, seed=s).swaps != SWAP_NONE).sum())
    n = trials * 4
    assert abs(hits / n - 0.25) <= 3 * math.sqrt(0.25 * 0.75 / n)


@settings(max_examples=40, deadline=None)
@given(p=st.tuples(st.floats(0, 0.33), st.floats(0, 0.33), st.floats(0, 0.33)), seed=st.integers(0, 10 ** 6))
def test_mix_labels_track_swaps(p, seed):
    b = _batch(6)
    m = mix_and_match(b, MixAndMatchConfig(*p), seed=seed, num_classes=3)
    n = 6
    assert torch.all(m.labels[:n] == 0)
    assert torch.equal(m.labels[n:], torch.from_numpy((m.swaps == SWAP_NONE).astype(np.float32)))
    for i in np.flatnonzero(m.swaps == SWAP_NONE):
        assert torch.equal(m.x[n + i], b["x_real"][i]) and torch.equal(m.z[n + i], b["z"][i])
        assert m.c[n + i] == b["c"][i]


def test_mix_validation():
    with pytest.raises(InvalidArgument):
        MixAndMatchConfig(0.5, 0.4, 0.2)
    with pytest.raises(InvalidArgument):
        MixAndMatchConfig(-0.1)
    with pytest.raises(InvalidArgument):
        mix_and_match(_batch(1), MixAndMatchConfig(0.1), seed=0)
