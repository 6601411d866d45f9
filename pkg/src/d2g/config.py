"""Experiment configuration: typed sections, YAML I/O, dotted overrides and
presets.  Validation collects every violation before failing."""

import copy
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields

import yaml

from .errors import ConfigError

PRESETS = ("smoke", "desk", "ablation")
LOSS_MODES = ("mse", "pseudo_huber", "latentlpips", "e_latentlpips", "blended")
AUG_NAMES = ("blit", "geometric", "color", "cutout")


def _check(cond, path, msg, out):
    if not cond:
        out.append((path, msg))


@dataclass
class DataConfig:
    image_size: int = 32
    train_images: int = 4000
    heldout_images: int = 1000
    seed: int = 0

    def check(self, p, out):
        _check(self.image_size >= 8, f"{p}.image_size", "must be >= 8", out)
        _check(self.train_images >= 2, f"{p}.train_images", "must be >= 2", out)
        _check(self.heldout_images >= 2, f"{p}.heldout_images", "must be >= 2", out)


@dataclass
class CodecConfig:
    kind: str = "learned"
    downsample_factor: int = 2
    latent_channels: int = 4
    width: int = 32
    steps: int = 2000
    batch_size: int = 64
    lr: float = 2e-3

    def check(self, p, out):
        _check(self.kind in ("learned", "identity"), f"{p}.kind", "must be learned or identity", out)
        f = self.downsample_factor
        _check(f >= 1 and f & (f - 1) == 0, f"{p}.downsample_factor", "must be a power of two", out)
        _check(self.latent_channels >= 1, f"{p}.latent_channels", "must be >= 1", out)
        _check(self.steps >= 0, f"{p}.steps", "must be >= 0", out)
        _check(self.batch_size >= 1, f"{p}.batch_size", "must be >= 1", out)
        _check(self.lr > 0, f"{p}.lr", "must be > 0", out)


@dataclass
class TeacherConfig:
    schedule: str = "vp_cosine"
    T: int = 1000
    base_channels: int = 32
    channel_mults: list = field(default_factory=lambda: [1, 2, 2])
    num_res_blocks: int = 1
    emb_dim: int = 128
    dropout: float = 0.0
    steps: int = 4000
    batch_size: int = 64
    lr: float = 2e-3
    p_uncond: float = 0.1

    def check(self, p, out):
        _check(self.schedule in ("vp_cosine", "vp_linear", "edm"), f"{p}.schedule",
               "must be vp_cosine, vp_linear or edm", out)
        _check(self.T >= 2, f"{p}.T", "must be >= 2", out)
        _check(self.base_channels >= 1, f"{p}.base_channels", "must be >= 1", out)
        _check(len(self.channel_mults) >= 1 and all(int(m) >= 1 for m in self.channel_mults),
               f"{p}.channel_mults", "must be a nonempty list of positive ints", out)
        _check(self.num_res_blocks >= 1, f"{p}.num_res_blocks", "must be >= 1", out)
        _check(0.0 <= self.dropout < 1.0, f"{p}.dropout", "must lie in [0, 1)", out)
        _check(self.steps >= 0, f"{p}.steps", "must be >= 0", out)
        _check(self.lr > 0, f"{p}.lr", "must be > 0", out)
        _check(0.0 <= self.p_uncond <= 1.0, f"{p}.p_uncond", "must lie in [0, 1]", out)


@dataclass
class PairsConfig:
    count: int = 4096
    solver: str = "ddim"
    steps: int = 50
    guidance: float = 1.0
    shard_size: int = 4096
    workers: int = 1
    verify: int = 16
    seed: int = 0

    def check(self, p, out):
        _check(self.count >= 1, f"{p}.count", "must be >= 1", out)
        _check(self.solver in ("ddim", "heun"), f"{p}.solver", "must be ddim or heun", out)
        _check(self.steps >= 1, f"{p}.steps", "must be >= 1", out)
        _check(self.guidance >= 0, f"{p}.guidance", "must be >= 0", out)
        _check(self.shard_size >= 64 and self.shard_size % 64 == 0, f"{p}.shard_size",
               "must be a positive multiple of 64", out)
        _check(self.workers >= 1, f"{p}.workers", "must be >= 1", out)
        _check(self.verify >= 0, f"{p}.verify", "must be >= 0", out)


@dataclass
class PerceptualConfig:
    widths: list = field(default_factory=lambda: [16, 32, 48, 64, 64])
    backbone_steps: int = 2000
    batch_size: int = 64
    lr: float = 2e-3
    augment_training: bool = True
    triplets: int = 2000
    calibration_steps: int = 400
    calibration_lr: float = 0.05
    augmentations: list = field(default_factory=lambda: list(AUG_NAMES))
    reconstruct_iters: int = 1000
    reconstruct_targets: int = 5
    reconstruct_lr: float = 0.05
    bench_batch: int = 32
    bench_trials: int = 20

    def check(self, p, out):
        _check(len(self.widths) == 5 and all(int(w) >= 1 for w in self.widths), f"{p}.widths",
               "must list 5 positive widths", out)
        _check(self.backbone_steps >= 0, f"{p}.backbone_steps", "must be >= 0", out)
        _check(self.triplets >= 1, f"{p}.triplets", "must be >= 1", out)
        _check(self.calibration_lr > 0, f"{p}.calibration_lr", "must be > 0", out)
        _check(set(self.augmentations) <= set(AUG_NAMES), f"{p}.augmentations",
               f"entries must come from {list(AUG_NAMES)}", out)
        _check(self.reconstruct_iters >= 1, f"{p}.reconstruct_iters", "must be >= 1", out)
        _check(self.bench_trials >= 20, f"{p}.bench_trials", "must be >= 20", out)


@dataclass
class AdversarialConfig:
    scales: int = 2
    r1_gamma: float = 0.01
    r1_interval: int = 16
    swap_latent_prob: float = 0.1
    swap_condition_prob: float = 0.1
    swap_noise_prob: float = 0.1
    lr: float = 1e-4
    betas: list = field(default_factory=lambda: [0.9, 0.999])

    def check(self, p, out):
        _check(self.scales >= 1, f"{p}.scales", "must be >= 1", out)
        _check(self.r1_gamma >= 0, f"{p}.r1_gamma", "must be >= 0", out)
        _check(self.r1_interval >= 1, f"{p}.r1_interval", "must be >= 1", out)
        probs = (self.swap_latent_prob, self.swap_condition_prob, self.swap_noise_prob)
        for name, v in zip(("swap_latent_prob", "swap_condition_prob", "swap_noise_prob"), probs):
            _check(0.0 <= v <= 1.0, f"{p}.{name}", "must lie in [0, 1]", out)
        _check(sum(probs) <= 1.0, f"{p}.swap_latent_prob", "swap probabilities must sum to <= 1", out)
        _check(self.lr > 0, f"{p}.lr", "must be > 0", out)
        _check(len(self.betas) == 2 and all(0 <= b < 1 for b in self.betas), f"{p}.betas",
               "must be two values in [0, 1)", out)


@dataclass
class DistillConfig:
    stage: str = "both"
    loss_mode: str = "e_latentlpips"
    blend: float = 0.5
    augmentations: list = field(default_factory=lambda: ["blit", "geometric", "cutout"])
    batch_size: int = 32
    lr: float = 2e-4
    lr_stage2: float = 2e-5
    betas: list = field(default_factory=lambda: [0.9, 0.999])
    weight_decay: float = 0.0
    lambda_gan: float = 0.25
    regression_weight: float = 1.0
    ema_start: int = 0
    ema_beta: float = 0.99
    stage1_steps: int = 1000
    stage2_steps: int = 200
    probe_size: int = 64
    checkpoint_every: int = 0

    def check(self, p, out):
        _check(self.stage in ("1", "2", "both"), f"{p}.stage", "must be 1, 2 or both", out)
        _check(self.loss_mode in LOSS_MODES, f"{p}.loss_mode", f"must be one of {list(LOSS_MODES)}", out)
        _check(0.0 <= self.blend <= 1.0, f"{p}.blend", "must lie in [0, 1]", out)
        _check(set(self.augmentations) <= set(AUG_NAMES), f"{p}.augmentations",
               f"entries must come from {list(AUG_NAMES)}", out)
        _check(self.batch_size >= 1, f"{p}.batch_size", "must be >= 1", out)
        _check(self.lr > 0, f"{p}.lr", "must be > 0", out)
        _check(self.lr_stage2 > 0, f"{p}.lr_stage2", "must be > 0", out)
        _check(len(self.betas) == 2 and all(0 <= b < 1 for b in self.betas), f"{p}.betas",
               "must be two values in [0, 1)", out)
        _check(self.lambda_gan >= 0, f"{p}.lambda_gan", "must be >= 0", out)
        _check(0.0 <= self.ema_beta < 1.0, f"{p}.ema_beta", "must lie in [0, 1)", out)
        _check(self.ema_start >= 0, f"{p}.ema_start", "must be >= 0", out)
        _check(self.stage1_steps >= 0, f"{p}.stage1_steps", "must be >= 0", out)
        _check(self.stage2_steps >= 0, f"{p}.stage2_steps", "must be >= 0", out)
        _check(self.probe_size >= 1, f"{p}.probe_size", "must be >= 1", out)


@dataclass
class EvalConfig:
    samples: int = 1000
    k: int = 3
    diversity_n: int = 8
    fidelity_n: int = 64
    steps: int = 50
    guidance: float = 1.0
    grid: bool = True

    def check(self, p, out):
        _check(self.samples >= 2, f"{p}.samples", "must be >= 2", out)
        _check(1 <= self.k < self.samples, f"{p}.k", "must lie in [1, samples)", out)
        _check(self.diversity_n >= 2, f"{p}.diversity_n", "must be >= 2", out)
        _check(self.fidelity_n >= 1, f"{p}.fidelity_n", "must be >= 1", out)
        _check(self.steps >= 1, f"{p}.steps", "must be >= 1", out)


SECTIONS = {
    "data": DataConfig, "codec": CodecConfig, "teacher": TeacherConfig, "pairs": PairsConfig,
    "perceptual": PerceptualConfig, "adversarial": AdversarialConfig, "distill": DistillConfig,
    "eval": EvalConfig,
}


@dataclass
class ExperimentConfig:
    seed: int = 0
    deterministic: bool = False
    data: DataConfig = field(default_factory=DataConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    pairs: PairsConfig = field(default_factory=PairsConfig)
    perceptual: PerceptualConfig = field(default_factory=PerceptualConfig)
    adversarial: AdversarialConfig = field(default_factory=AdversarialConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def digest(self, *sections):
        """Short hash of the named sections (plus the global seed)."""
        d = self.to_dict()
        payload = {"seed": d["seed"], **{s: d[s] for s in sections}}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def _coerce(value, default, path, out):
    """Coerce a parsed YAML value to the type of the field default."""
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        out.append((path, f"expected a boolean, got {value!r}"))
        return default
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            out.append((path, f"expected an integer, got {value!r}"))
            return default
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            out.append((path, f"expected a number, got {value!r}"))
            return default
        return float(value)
    if isinstance(default, str):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return str(value)
        if not isinstance(value, str):
            out.append((path, f"expected a string, got {value!r}"))
            return default
        return value
    if isinstance(default, list):
        if isinstance(value, str):
            value = [v for v in value.replace("+", ",").split(",") if v]
        if not isinstance(value, (list, tuple)):
            out.append((path, f"expected a list, got {value!r}"))
            return default
        return list(value)
    return value


def _build_section(cls, raw, path, out):
    obj = cls()
    if raw is None:
        return obj
    if not isinstance(raw, dict):
        out.append((path, "expected a mapping"))
        return obj
    names = {f.name for f in fields(cls)}
    for key, value in raw.items():
        if key not in names:
            out.append((f"{path}.{key}", "unknown key"))
            continue
        setattr(obj, key, _coerce(value, getattr(obj, key), f"{path}.{key}", out))
    return obj


def from_dict(raw):
    """Validated :class:`ExperimentConfig` from a plain mapping; defaults fill gaps."""
    out = []
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError([("<root>", "config must be a mapping")])
    cfg = ExperimentConfig()
    for key, value in raw.items():
        if key in SECTIONS:
            setattr(cfg, key, _build_section(SECTIONS[key], value, key, out))
        elif key in ("seed", "deterministic"):
            setattr(cfg, key, _coerce(value, getattr(cfg, key), key, out))
        else:
            out.append((key, "unknown key"))
    for name in SECTIONS:
        getattr(cfg, name).check(name, out)
    if out:
        raise ConfigError(out)
    return cfg


def parse_config(path):
    if not os.path.exists(path):
        raise ConfigError([("<file>", f"config file not found: {path}")])
    with open(path) as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError([("<file>", f"unparseable YAML: {exc}")]) from None
    return from_dict(raw)


def write_config(cfg, path):
    from .checkpoint import atomic_write_bytes
    atomic_write_bytes(path, cfg.to_yaml().encode())
    return path


def apply_overrides(cfg, overrides):
    """Apply ``section.key=value`` strings (values parsed as YAML scalars/lists)."""
    raw = cfg.to_dict()
    out = []
    for item in overrides or ():
        if "=" not in item:
            out.append((item, "override must look like key=value"))
            continue
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = raw
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                out.append((key, "unknown key"))
                node = None
                break
            node = node[part]
        if node is None:
            continue
        if parts[-1] not in node:
            out.append((key, "unknown key"))
            continue
        node[parts[-1]] = yaml.safe_load(text) if text.strip() else ""
    try:
        cfg = from_dict(raw)
    except ConfigError as exc:
        out += exc.violations
    if out:
        raise ConfigError(out)
    return cfg


_PRESET_OVERRIDES = {
    "smoke": {
        "data": {"image_size": 32, "train_images": 512, "heldout_images": 256},
        "codec": {"steps": 300, "width": 24},
        "teacher": {"base_channels": 16, "channel_mults": [1, 2], "emb_dim": 64, "steps": 200, "batch_size": 32},
        "pairs": {"count": 256, "steps": 10, "shard_size": 128, "verify": 4},
        "perceptual": {"widths": [8, 16, 24, 32, 32], "backbone_steps": 150, "triplets": 200,
                       "calibration_steps": 50, "reconstruct_iters": 50, "reconstruct_targets": 2},
        "adversarial": {"r1_interval": 4},
        "distill": {"batch_size": 16, "stage1_steps": 40, "stage2_steps": 16, "probe_size": 32},
        "eval": {"samples": 256, "diversity_n": 4, "fidelity_n": 16, "steps": 10},
    },
    "desk": {"pairs": {"count": 4000}},
    "ablation": {
        "distill": {"stage": "1"},
    },
}


def preset(name):
    if name not in PRESETS:
        raise ConfigError([("preset", f"unknown preset {name!r}; choose from {list(PRESETS)}")])
    return from_dict(copy.deepcopy(_PRESET_OVERRIDES[name]))


ABLATION_LOSS_MODES = ("e_latentlpips", "latentlpips", "pseudo_huber", "mse")
ABLATION_SEEDS = (0, 1, 2)
