import os

import pytest
import torch

from d2g import config, pipeline
from d2g.nets import UNetConfig
from d2g.perceptual import CalibratedDistance, make_backbone
from d2g.teacher import make_schedule, untrained_teacher

torch.set_num_threads(1)

TINY_SHAPE = (4, 8, 8)


@pytest.fixture
def tiny_net_cfg():
    return UNetConfig(in_channels=4, base_channels=8, channel_mults=(1, 2), num_res_blocks=1,
                      num_classes=3, emb_dim=16)


@pytest.fixture
def tiny_teacher(tiny_net_cfg):
    return untrained_teacher(tiny_net_cfg, make_schedule("vp_cosine", 50), latent_shape=TINY_SHAPE, seed=0)


@pytest.fixture
def tiny_dist():
    torch.manual_seed(0)
    bb = make_backbone("latent", 4, num_classes=3, widths=(4, 6, 6, 8, 8), downsample_factor=2)
    bb.eval()
    return CalibratedDistance(bb)


@pytest.fixture(scope="session")
def desk():
    """Experiments on the desk preset; upstream artifacts come from (or are
    built into) the shared cache under $D2G_CACHE."""
    from d2g.experiments import Experiments

    cfg = config.preset("desk")
    pipeline.set_deterministic(True, cfg.seed)
    return Experiments(cfg)


def pytest_configure(config):
    config.addinivalue_line("markers", "desk: needs the desk-preset artifacts (built on first use)")
