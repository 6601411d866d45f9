import copy
import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from d2g.adversarial import MixAndMatchConfig, build_discriminator
from d2g.codec import DECODE_CALLS
from d2g.distiller import (EmaState, Generator, RegressionLoss, TrainConfig, distill_stage1, distill_stage2,
                           ema_update, generator_from_teacher, load_generator, one_step_generate,
                           pseudo_huber_constant, random_generator, save_generator)
from d2g.errors import InvalidArgument
from d2g.pairgen import SolverConfig, generate_pairs
from d2g.teacher import DiffusionSchedule, ddim_solve


def _weights_equal(a, b):
    return all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))


@pytest.fixture
def pairs(tiny_teacher):
    return generate_pairs(tiny_teacher, 96, SolverConfig("ddim", 4), 0, shard_size=64)


def _cfg(**kw):
    base = dict(batch_size=8, lr_g=1e-3, lr_g_stage2=1e-3, stage1_steps=6, stage2_steps=6, probe_size=16,
                r1_interval=2, mix=MixAndMatchConfig(0.1, 0.1, 0.1))
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------- generator

def test_generator_equals_single_step_ddim(tiny_teacher):
    G = generator_from_teacher(tiny_teacher)
    z = torch.randn(3, *tiny_teacher.latent_shape)
    c = torch.tensor([0, 1, 2])
    with torch.no_grad():
        assert torch.equal(G(z, c), ddim_solve(tiny_teacher, z, c, 1, 1.0))
        assert torch.equal(G(z, c), one_step_generate(G, z, c))


def test_zero_eps_formula(tiny_net_cfg):
    sched = DiffusionSchedule("test", 1, np.array([1.0, 0.141]), np.array([0.0, 0.99]))
    G = random_generator(tiny_net_cfg, sched)
    torch.nn.init.zeros_(G.net.conv_out.weight)
    torch.nn.init.zeros_(G.net.conv_out.bias)
    z = torch.randn(2, 4, 8, 8)
    with torch.no_grad():
        assert torch.allclose(G(z, 0), z / 0.141, rtol=1e-6)


def test_generator_checks_and_checkpoint(tiny_teacher, tmp_path):
    G = generator_from_teacher(tiny_teacher)
    with pytest.raises(InvalidArgument):
        G(torch.randn(1, 4, 4, 4), 0)
    save_generator(G, tmp_path / "g.gen")
    back = load_generator(tmp_path / "g.gen")
    z = torch.randn(2, *tiny_teacher.latent_shape)
    with torch.no_grad():
        assert torch.equal(G(z, 1), back(z, 1))
    assert back.source == G.source


# ---------------------------------------------------------------- losses

def test_regression_modes(tiny_dist):
    a, b = torch.randn(2, 4, 8, 8), torch.randn(2, 4, 8, 8)
    assert torch.allclose(RegressionLoss("mse")(a, b, 0), (a - b).pow(2).mean(dim=(1, 2, 3)))
    c = pseudo_huber_constant(256)
    ph = RegressionLoss("pseudo_huber")(a, b, 0)
    assert torch.allclose(ph, ((a - b).pow(2).sum(dim=(1, 2, 3)) + c * c).sqrt() - c)
    assert torch.all(RegressionLoss("e_latentlpips", tiny_dist)(a, a, 3) == 0)
    with pytest.raises(InvalidArgument):
        RegressionLoss("latentlpips")


# ---------------------------------------------------------------- stage 1

def test_stage1_zero_steps_noop(tiny_teacher, pairs, tiny_dist):
    G = generator_from_teacher(tiny_teacher)
    before = copy.deepcopy(G)
    res = distill_stage1(G, pairs, tiny_dist, _cfg(stage1_steps=0))
    assert _weights_equal(before, res.generator)


def test_stage1_lowers_probe_loss_without_decoding(tiny_teacher, pairs, tiny_dist, tmp_path):
    G = generator_from_teacher(tiny_teacher)
    decodes = DECODE_CALLS.count
    res = distill_stage1(G, pairs, tiny_dist, _cfg(stage1_steps=60, loss_mode="mse", lr_g=1e-4), out_dir=tmp_path)
    assert res.probe_end < res.probe_start
    assert DECODE_CALLS.count == decodes
    lines = [json.loads(l) for l in open(tmp_path / "train-stage1.jsonl")]
    assert [l["step"] for l in lines] == list(range(60))
    assert (tmp_path / "generator-stage1.gen").exists()


def test_stage1_deterministic(tiny_teacher, pairs, tiny_dist):
    runs = [distill_stage1(generator_from_teacher(tiny_teacher), pairs, tiny_dist, _cfg()) for _ in range(2)]
    assert _weights_equal(runs[0].generator, runs[1].generator)
    assert [r["regression"] for r in runs[0].log] == [r["regression"] for r in runs[1].log]


# ---------------------------------------------------------------- stage 2

def test_lambda_zero_matches_stage1(tiny_teacher, pairs, tiny_dist):
    cfg = _cfg(lambda_gan=0.0)
    G1 = distill_stage1(generator_from_teacher(tiny_teacher), pairs, tiny_dist, cfg, lr=cfg.lr_g_stage2).generator
    G2 = generator_from_teacher(tiny_teacher)
    D = build_discriminator(tiny_teacher, 1)
    D0 = copy.deepcopy(D)
    res = distill_stage2(G2, D, pairs, tiny_dist, cfg)
    assert _weights_equal(G1, res.generator)
    assert not _weights_equal(D0, D)


def test_stage2_log_and_lazy_r1(tiny_teacher, pairs, tiny_dist, tmp_path):
    cfg = _cfg(stage2_steps=6, r1_interval=3, r1_gamma=1.0)
    res = distill_stage2(generator_from_teacher(tiny_teacher), build_discriminator(tiny_teacher, 2), pairs,
                         tiny_dist, cfg, out_dir=tmp_path)
    assert len(res.log) == 6
    for rec in res.log:
        assert {"d_loss", "g_loss", "regression", "r1"} <= set(rec)
        assert all(math.isfinite(rec[k]) for k in ("d_loss", "g_loss", "regression", "r1"))
        assert (rec["r1"] != 0) == (rec["step"] % 3 == 0)
    for name in ("generator-stage2.gen", "generator-ema.gen", "discriminator.dsc", "train-stage2.jsonl"):
        assert (tmp_path / name).exists()
    assert res.ema is not None and res.eval_generator is res.ema


def test_negative_lambda_rejected():
    with pytest.raises(InvalidArgument):
        TrainConfig(lambda_gan=-1)


# ------------------------------------------------------------------- EMA

def test_ema_limits():
    w = {"a": torch.randn(3)}
    s = EmaState({"a": torch.zeros(3)}, beta=0.0)
    ema_update(s, w)
    assert torch.equal(s.shadow["a"], w["a"])
    s = EmaState({"a": torch.ones(3)}, beta=1.0)
    ema_update(s, w)
    assert torch.equal(s.shadow["a"], torch.ones(3))


@settings(max_examples=40, deadline=None)
@given(beta=st.floats(0.0, 0.999), k=st.integers(1, 30), s0=st.floats(-5, 5), w=st.floats(-5, 5))
def test_ema_geometric_series(beta, k, s0, w):
    s = EmaState({"p": torch.tensor([s0], dtype=torch.float64)}, beta=beta)
    for _ in range(k):
        ema_update(s, {"p": torch.tensor([w], dtype=torch.float64)})
    want = s0 * beta ** k + w * (1 - beta ** k)
    assert abs(s.shadow["p"].item() - want) < 1e-6
    assert s.step == k


def test_ema_mismatch_rejected():
    with pytest.raises(InvalidArgument):
        ema_update(EmaState({"a": torch.zeros(2)}), {"b": torch.zeros(2)})


@pytest.mark.desk
def test_desk_stage1_probe_improves(desk):
    r = desk.stage1()
    assert r["probe_end"] < r["probe_start"]
