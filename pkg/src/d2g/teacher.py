"""Toy conditional diffusion teacher: noise schedules, the epsilon-parameterized
denoiser, classifier-free guidance and deterministic ODE solvers.

All solvers work on the discrete schedule tables.  Internally DDIM and Heun are
expressed in the scaled coordinates ``x / alpha`` and ``sigma / alpha`` in which
the probability-flow ODE reads ``dx~/ds~ = eps``; DDIM is the Euler method
there, Heun its second-order trapezoidal correction.
"""

import copy
import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint
from .errors import DivisionDegenerate, InvalidArgument
from .nets import UNet, UNetConfig

log = logging.getLogger(__name__)

SCHEDULE_KINDS = ("vp_cosine", "vp_linear", "edm")
VP_COSINE_MIN_ALPHA = 0.05
VP_LINEAR_BETA = (0.1, 20.0)
EDM_SIGMA_MIN, EDM_SIGMA_MAX, EDM_RHO = 0.002, 80.0, 7.0


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    kind: str
    num_steps: int
    alphas: np.ndarray
    sigmas: np.ndarray

    @property
    def T(self):
        return self.num_steps

    def alpha(self, t):
        return float(self.alphas[int(t)])

    def sigma(self, t):
        return float(self.sigmas[int(t)])

    def scaled_sigma(self, t):
        """sigma_t / alpha_t, the noise level in variance-exploding coordinates."""
        return float(self.sigmas[int(t)] / self.alphas[int(t)])

    def continuous_t(self, scaled_sigma):
        """Fractional step index (in [0, T]) whose sigma/alpha equals ``scaled_sigma``."""
        table = self.sigmas / self.alphas
        return float(np.interp(scaled_sigma, table, np.arange(self.num_steps + 1)))

    def __eq__(self, other):
        return (
            isinstance(other, DiffusionSchedule)
            and self.kind == other.kind
            and self.num_steps == other.num_steps
            and np.array_equal(self.alphas, other.alphas)
            and np.array_equal(self.sigmas, other.sigmas)
        )


def make_schedule(kind="vp_cosine", T=1000):
    if kind not in SCHEDULE_KINDS:
        raise InvalidArgument(f"unknown schedule kind {kind!r}")
    if int(T) != T or T < 2:
        raise InvalidArgument(f"schedule needs T >= 2, got {T}")
    T = int(T)
    tau = np.arange(T + 1, dtype=np.float64) / T
    if kind == "vp_cosine":
        theta = tau * np.arccos(VP_COSINE_MIN_ALPHA)
        alphas, sigmas = np.cos(theta), np.sin(theta)
    elif kind == "vp_linear":
        b0, b1 = VP_LINEAR_BETA
        log_abar = -(b0 * tau + 0.5 * (b1 - b0) * tau ** 2)
        alphas = np.exp(0.5 * log_abar)
        sigmas = np.sqrt(-np.expm1(log_abar))
    else:
        # Karras grid for t = 1..T, clean data at t = 0; stored in VP-normalized form.
        i = np.arange(T, dtype=np.float64) / (T - 1)
        lo, hi = EDM_SIGMA_MIN ** (1 / EDM_RHO), EDM_SIGMA_MAX ** (1 / EDM_RHO)
        s = np.concatenate([[0.0], (lo + i * (hi - lo)) ** EDM_RHO])
        alphas = 1.0 / np.sqrt(1.0 + s ** 2)
        sigmas = s * alphas
    alphas[0], sigmas[0] = 1.0, 0.0
    return DiffusionSchedule(kind, T, alphas, sigmas)


class TeacherModel:
    """An epsilon-predictor bound to its schedule.

    ``denoiser(x_t, c, t)`` takes a latent batch, class indices (``num_classes``
    is the null condition) and a step index; it may also accept fractional
    indices, which is what :func:`reference_solve` relies on.
    """

    def __init__(self, denoiser, schedule, condition_arity, weights_hash=b"\0" * 32, net=None,
                 latent_shape=None):
        self.denoiser = denoiser
        self.latent_shape = tuple(latent_shape) if latent_shape is not None else None
        self.schedule = schedule
        self.condition_arity = int(condition_arity)
        self.weights_hash = weights_hash
        self.net = net

    @property
    def null_condition(self):
        return self.condition_arity

    def eps(self, x_t, c, t):
        c = _as_cond(c, x_t.shape[0])
        return self.denoiser(x_t, c, t)

    __call__ = eps


def _as_cond(c, batch):
    if not torch.is_tensor(c):
        c = torch.as_tensor(c, dtype=torch.long)
    c = c.long().reshape(-1)
    if c.numel() == 1 and batch != 1:
        c = c.expand(batch)
    return c


class _NetDenoiser:
    def __init__(self, net, T):
        self.net = net
        self.T = T

    def __call__(self, x_t, c, t):
        return self.net(x_t, torch.as_tensor(t, dtype=torch.float32) / self.T, c)


def teacher_from_net(net, schedule, latent_shape=None):
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    digest = checkpoint.weights_digest(net.state_dict())
    return TeacherModel(_NetDenoiser(net, schedule.T), schedule, net.cfg.num_classes, digest, net=net,
                        latent_shape=latent_shape)


class _GaussianDenoiser:
    def __init__(self, mu, s, schedule):
        self.mu = mu
        self.s2 = float(s) ** 2
        self.schedule = schedule

    def __call__(self, x_t, c, t):
        a, sg = _interp_coeffs(self.schedule, t)
        return sg * (x_t - a * self.mu) / (a * a * self.s2 + sg * sg)


def analytic_gaussian_teacher(mu, s, schedule=None, condition_arity=10):
    """Exact epsilon-optimum for data ~ N(mu, s^2 I); the condition is ignored."""
    if not s > 0:
        raise InvalidArgument(f"scale must be positive, got {s}")
    schedule = schedule or make_schedule("vp_cosine", 1000)
    mu = torch.as_tensor(mu, dtype=torch.float32)
    tag = np.array([float(s)] + mu.reshape(-1).tolist(), dtype="<f4").tobytes()
    return TeacherModel(_GaussianDenoiser(mu, s, schedule), schedule, condition_arity,
                        hashlib.sha256(tag).digest(), latent_shape=tuple(mu.shape) or None)


def _interp_coeffs(schedule, t):
    """(alpha, sigma) at a possibly fractional step index.

    Fractional indices interpolate in the scaled-sigma domain so the VP identity
    is preserved.  A batched ``t`` yields (B, 1, 1, 1) tensors.
    """
    if torch.is_tensor(t) and t.numel() > 1:
        pairs = [_interp_coeffs(schedule, float(v)) for v in t.reshape(-1)]
        a = torch.tensor([p[0] for p in pairs], dtype=torch.float32).view(-1, 1, 1, 1)
        s = torch.tensor([p[1] for p in pairs], dtype=torch.float32).view(-1, 1, 1, 1)
        return a, s
    t = float(t.reshape(-1)[0]) if torch.is_tensor(t) else float(t)
    if t == int(t):
        return schedule.alpha(t), schedule.sigma(t)
    table = schedule.sigmas / schedule.alphas
    st = float(np.interp(t, np.arange(schedule.T + 1), table))
    a = 1.0 / np.sqrt(1.0 + st * st)
    return float(a), float(st * a)


def eps_to_x0(x_t, eps, t, schedule):
    a, s = schedule.alpha(t), schedule.sigma(t)
    if a == 0:
        raise DivisionDegenerate(f"alpha_{t} = 0")
    return (x_t - s * eps) / a


def cfg_eps(model, x_t, c, t, w=1.0):
    """Classifier-free guided prediction eps_u + w (eps_c - eps_u)."""
    c = _as_cond(c, x_t.shape[0])
    if bool((c == model.null_condition).any()):
        raise InvalidArgument("the null condition cannot be guided")
    if w < 0:
        raise InvalidArgument("guidance scale must be >= 0")
    if w == 1:
        return model.eps(x_t, c, t)
    null = torch.full_like(c, model.null_condition)
    e_u = model.eps(x_t, null, t)
    if w == 0:
        return e_u
    e_c = model.eps(x_t, c, t)
    return e_u + w * (e_c - e_u)


def step_indices(T, steps):
    """Uniform stride over [T .. 0], both endpoints included."""
    if steps < 1 or steps > T:
        raise InvalidArgument(f"steps must lie in [1, {T}], got {steps}")
    return [int(v) for v in np.round(np.linspace(T, 0, steps + 1))]


@torch.no_grad()
def ddim_solve(model, z, c, steps, w=1.0):
    sched = model.schedule
    ts = step_indices(sched.T, steps)
    x = z
    for t, t_next in zip(ts[:-1], ts[1:]):
        eps = cfg_eps(model, x, c, t, w)
        x0 = eps_to_x0(x, eps, t, sched)
        if t_next == 0:
            x = x0
        else:
            x = sched.alpha(t_next) * x0 + sched.sigma(t_next) * eps
    return x


@torch.no_grad()
def heun_solve(model, z, c, steps, w=1.0):
    sched = model.schedule
    if sched.kind != "edm":
        raise InvalidArgument("heun_solve needs an edm-kind schedule")
    ts = step_indices(sched.T, steps)
    xs = z / sched.alpha(ts[0])
    for t, t_next in zip(ts[:-1], ts[1:]):
        s, s_next = sched.scaled_sigma(t), sched.scaled_sigma(t_next)
        d = cfg_eps(model, xs * sched.alpha(t), c, t, w)
        x_euler = xs + (s_next - s) * d
        if t_next == 0:
            xs = x_euler
        else:
            d2 = cfg_eps(model, x_euler * sched.alpha(t_next), c, t_next, w)
            xs = xs + (s_next - s) * 0.5 * (d + d2)
    return xs


@torch.no_grad()
def reference_solve(model, z, c, n_steps=10_000, w=1.0, rho=7.0):
    """Dense RK4 integration of the probability-flow ODE, used as an oracle.

    Integrates ``dx~/ds~ = eps`` from ``s~_T`` down to 0 on a rho-warped grid
    (dense near the data end), with ``eps`` evaluated at fractional step indices.
    Runs in float64.
    """
    sched = model.schedule
    s_max = sched.scaled_sigma(sched.T)
    u = np.linspace(0.0, 1.0, n_steps + 1)
    grid = (s_max ** (1 / rho) * (1 - u)) ** rho
    grid[-1] = 0.0
    table = sched.sigmas / sched.alphas
    idx = np.arange(sched.T + 1)

    def f(xs, st):
        t = float(np.interp(st, table, idx))
        a = 1.0 / np.sqrt(1.0 + st * st)
        return cfg_eps(model, xs * a, c, t, w).double()

    xs = z.double() / sched.alpha(sched.T)
    for s0, s1 in zip(grid[:-1], grid[1:]):
        h = s1 - s0
        k1 = f(xs, s0)
        k2 = f(xs + 0.5 * h * k1, s0 + 0.5 * h)
        k3 = f(xs + 0.5 * h * k2, s0 + 0.5 * h)
        k4 = f(xs + h * k3, s1)
        xs = xs + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return xs


def gaussian_flow_endpoint(z, mu, s, schedule):
    """Closed-form ODE endpoint for N(mu, s^2 I) data starting from x_T = z."""
    a, sg = schedule.alpha(schedule.T), schedule.sigma(schedule.T)
    mu = torch.as_tensor(mu, dtype=z.dtype)
    return mu + (z - a * mu) * s / np.sqrt(a * a * s * s + sg * sg)


@dataclass
class TeacherTrainConfig:
    steps: int = 2000
    batch_size: int = 64
    lr: float = 2e-3
    p_uncond: float = 0.1
    ema_beta: float = 0.999
    seed: int = 0
    schedule: str = "vp_cosine"
    T: int = 1000
    net: dict = field(default_factory=dict)


def _noisy_batch(x0, sched, gen):
    n = x0.shape[0]
    t = torch.randint(1, sched.T + 1, (n,), generator=gen)
    eps = torch.randn(x0.shape, generator=gen)
    a = torch.as_tensor(sched.alphas, dtype=torch.float32)[t].view(-1, 1, 1, 1)
    s = torch.as_tensor(sched.sigmas, dtype=torch.float32)[t].view(-1, 1, 1, 1)
    return a * x0 + s * eps, t, eps


@torch.no_grad()
def denoising_loss(model, latents, labels, seed=1234, draws=1):
    """Mean eps-MSE over fixed seeded (t, eps) draws; comparable across models."""
    gen = torch.Generator().manual_seed(seed)
    total = 0.0
    for _ in range(draws):
        x_t, t, eps = _noisy_batch(latents, model.schedule, gen)
        pred = model.denoiser(x_t, labels, t)
        total += F.mse_loss(pred, eps).item()
    return total / draws


def train_teacher(latents, labels, config=None, net_config=None):
    """Train the toy U-Net denoiser; returns a frozen TeacherModel.

    ``latents`` is an (N, C, H, W) tensor and ``labels`` an (N,) long tensor
    with values below the class count.  Conditions are dropped to the null
    index with probability ``config.p_uncond``.
    """
    config = config or TeacherTrainConfig()
    if latents is None or len(latents) == 0:
        raise InvalidArgument("teacher training needs a nonempty dataset")
    net_config = net_config or UNetConfig(in_channels=latents.shape[1], **config.net)
    labels = torch.as_tensor(labels).long()
    if int(labels.max()) >= net_config.num_classes or int(labels.min()) < 0:
        raise InvalidArgument("condition index out of range")
    sched = make_schedule(config.schedule, config.T)
    torch.manual_seed(config.seed)
    net = UNet(net_config)
    gen = torch.Generator().manual_seed(config.seed + 1)
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    ema = copy.deepcopy(net)
    n = latents.shape[0]
    net.train()
    for step in range(config.steps):
        idx = torch.randint(0, n, (config.batch_size,), generator=gen)
        x0, c = latents[idx], labels[idx].clone()
        drop = torch.rand(c.shape, generator=gen) < config.p_uncond
        c[drop] = net_config.num_classes
        x_t, t, eps = _noisy_batch(x0, sched, gen)
        # linear warmup, then cosine decay to a tenth of the peak rate
        progress = step / max(config.steps, 1)
        lr = config.lr * min(1.0, (step + 1) / 100) * (0.55 + 0.45 * np.cos(np.pi * progress))
        for g in opt.param_groups:
            g["lr"] = lr
        loss = F.mse_loss(net(x_t, t.float() / sched.T, c), eps)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        beta = min(config.ema_beta, (1 + step) / (10 + step))
        with torch.no_grad():
            for pe, p in zip(ema.parameters(), net.parameters()):
                pe.lerp_(p, 1.0 - beta)
        if step % 500 == 0:
            log.info("teacher step %d loss %.4f", step, loss.item())
    return teacher_from_net(ema if config.steps else net, sched, tuple(latents.shape[1:]))


def untrained_teacher(net_config, schedule, latent_shape=None, seed=0):
    torch.manual_seed(seed)
    return teacher_from_net(UNet(net_config), schedule, latent_shape)


def save_teacher(model, path):
    meta = {
        "schedule_kind": model.schedule.kind,
        "T": model.schedule.T,
        "condition_arity": model.condition_arity,
        "net": model.net.cfg.to_dict(),
        "latent_shape": list(model.latent_shape) if model.latent_shape else None,
    }
    return checkpoint.save(path, checkpoint.TEACHER_MAGIC, model.net.state_dict(), meta)


def load_teacher(path):
    meta, state, _ = checkpoint.load(path, checkpoint.TEACHER_MAGIC)
    net = UNet(UNetConfig.from_dict(meta["net"]))
    net.load_state_dict(state)
    return teacher_from_net(net, make_schedule(meta["schedule_kind"], meta["T"]), meta.get("latent_shape"))


def clone_net(model):
    """A trainable deep copy of a teacher's network."""
    net = copy.deepcopy(model.net)
    for p in net.parameters():
        p.requires_grad_(True)
    return net
