"""Noise -> ODE-solution pair datasets: deterministic generation, the binary
shard format, verification and the rewiring negative control.

Shard layout (little-endian, no padding)::

    b"D2G-PAIR" | u32 version | u64 count | u16 C, H, W | u8 solver id |
    u16 steps | f32 guidance | 32-byte teacher hash |
    count x (u64 seed | u32 cond | z: C*H*W f32 | x: C*H*W f32)

Solver ids: 0 = ddim, 1 = heun.  Bit 0x80 of the solver byte marks a rewired
shard, whose x no longer follows from its z.

Record ``i`` draws its condition and noise from a Philox stream keyed by
``record_seed(base_seed, i)``.  Records are solved in fixed blocks of
``GEN_BLOCK`` consecutive indices so the arithmetic, and therefore every output
byte, is independent of how blocks are spread over workers.
"""

import hashlib
import logging
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, replace

import multiprocessing as mp
import numpy as np
import torch

from .errors import CorruptShard, InvalidArgument
from .teacher import ddim_solve, heun_solve

log = logging.getLogger(__name__)

MAGIC = b"D2G-PAIR"
VERSION = 1
HEADER = struct.Struct("<8sIQHHHBHf32s")
SOLVER_IDS = {"ddim": 0, "heun": 1}
SOLVER_NAMES = {v: k for k, v in SOLVER_IDS.items()}
REWIRED_FLAG = 0x80
GEN_BLOCK = 64
DEFAULT_SHARD_SIZE = 4096


@dataclass(frozen=True)
class SolverConfig:
    solver: str = "ddim"
    steps: int = 50
    guidance: float = 1.0


@dataclass
class PairRecord:
    record_seed: int
    z: torch.Tensor
    c: int
    x: torch.Tensor
    solver: str
    steps: int
    guidance: float
    teacher_hash: bytes


@dataclass
class PairShard:
    """Columnar storage of records; ``records`` yields :class:`PairRecord` views."""
    seeds: np.ndarray            # uint64 (N,)
    conds: np.ndarray            # int64 (N,)
    z: torch.Tensor              # float32 (N, C, H, W)
    x: torch.Tensor
    solver: str = "ddim"
    steps: int = 50
    guidance: float = 1.0
    teacher_hash: bytes = b"\0" * 32
    rewired: bool = False
    first_index: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.seeds)

    @property
    def record_count(self):
        return len(self.seeds)

    @property
    def latent_shape(self):
        return tuple(self.z.shape[1:])

    @property
    def header(self):
        return {
            "magic": MAGIC, "version": VERSION, "record_count": len(self),
            "latent_shape": self.latent_shape, "solver": self.solver, "steps": self.steps,
            "guidance": self.guidance, "teacher_hash": self.teacher_hash, "rewired": self.rewired,
        }

    @property
    def records(self):
        for i in range(len(self)):
            yield self.record(i)

    def record(self, i):
        return PairRecord(int(self.seeds[i]), self.z[i], int(self.conds[i]), self.x[i],
                          self.solver, self.steps, self.guidance, self.teacher_hash)

    def conds_tensor(self):
        return torch.from_numpy(self.conds.astype(np.int64))

    def equals(self, other):
        """Field-for-field bitwise equality."""
        return (
            self.header == other.header
            and np.array_equal(self.seeds, other.seeds)
            and np.array_equal(self.conds, other.conds)
            and _bits_equal(self.z, other.z)
            and _bits_equal(self.x, other.x)
        )


def _bits_equal(a, b):
    return a.shape == b.shape and a.numpy().tobytes() == b.numpy().tobytes()


def record_seed(base_seed, index):
    digest = hashlib.blake2b(struct.pack("<QQ", base_seed & (2 ** 64 - 1), index), digest_size=8).digest()
    return struct.unpack("<Q", digest)[0]


def record_stream(seed):
    return np.random.Generator(np.random.Philox(key=int(seed)))


def draw_record(seed, latent_shape, num_classes):
    """(condition, z) for one record seed: z is drawn first, then the condition."""
    rng = record_stream(seed)
    z = rng.standard_normal(latent_shape, dtype=np.float32)
    c = int(rng.integers(num_classes))
    return c, z


def _check_solver(teacher, cfg):
    if cfg.solver not in SOLVER_IDS:
        raise InvalidArgument(f"unknown solver {cfg.solver!r}")
    if cfg.solver == "heun" and teacher.schedule.kind != "edm":
        raise InvalidArgument("heun solver needs an edm-kind teacher schedule")
    if cfg.steps < 1 or cfg.steps > teacher.schedule.T:
        raise InvalidArgument(f"solver steps {cfg.steps} outside [1, {teacher.schedule.T}]")
    if cfg.guidance < 0:
        raise InvalidArgument("guidance must be >= 0")


def solve(teacher, z, c, cfg):
    fn = ddim_solve if cfg.solver == "ddim" else heun_solve
    return fn(teacher, z, c, cfg.steps, cfg.guidance)


@contextmanager
def _single_thread():
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(prev)


def _solve_block(teacher, z, conds, cfg):
    z = torch.from_numpy(np.ascontiguousarray(z))
    c = torch.as_tensor(np.asarray(conds), dtype=torch.long)
    return solve(teacher, z, c, cfg).float()


_WORKER = {}


def _worker_init(teacher):
    torch.set_num_threads(1)
    _WORKER["teacher"] = teacher


def _worker_block(args):
    return _solve_block(_WORKER["teacher"], *args)


def _plan(count, base_seed, latent_shape, num_classes, cond_list):
    seeds = np.array([record_seed(base_seed, i) for i in range(count)], dtype=np.uint64)
    conds = np.empty(count, dtype=np.int64)
    z = np.empty((count, *latent_shape), dtype=np.float32)
    for i, s in enumerate(seeds):
        conds[i], z[i] = draw_record(int(s), latent_shape, num_classes)
        if cond_list is not None:
            conds[i] = int(cond_list[i % len(cond_list)])
    return seeds, conds, z


def generate_pairs(teacher, count, solver_cfg=None, base_seed=0, latent_shape=None, cond_list=None,
                   workers=1, shard_size=DEFAULT_SHARD_SIZE, out_dir=None):
    """Generate ``count`` pairs; returns the list of shards (also written to
    ``out_dir`` as ``pairs-00000.d2gp`` ... when given)."""
    solver_cfg = solver_cfg or SolverConfig()
    if count < 1:
        raise InvalidArgument("count must be >= 1")
    if shard_size % GEN_BLOCK:
        raise InvalidArgument(f"shard size must be a multiple of {GEN_BLOCK}")
    _check_solver(teacher, solver_cfg)
    latent_shape = latent_shape or teacher.latent_shape
    if latent_shape is None:
        raise InvalidArgument("latent_shape is required for teachers that do not declare one")
    latent_shape = tuple(int(v) for v in latent_shape)
    seeds, conds, z_all = _plan(count, base_seed, latent_shape, teacher.condition_arity, cond_list)

    jobs = [(z_all[i:i + GEN_BLOCK], conds[i:i + GEN_BLOCK], solver_cfg)
            for i in range(0, count, GEN_BLOCK)]
    if workers <= 1:
        with _single_thread():
            results = [_solve_block(teacher, *job) for job in jobs]
    else:
        ctx = mp.get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx,
                                 initializer=_worker_init, initargs=(teacher,)) as pool:
            results = list(pool.map(_worker_block, jobs))
    z = torch.from_numpy(z_all)
    x = torch.cat(results)

    shards = []
    for start in range(0, count, shard_size):
        sl = slice(start, min(start + shard_size, count))
        shards.append(PairShard(seeds[sl].copy(), conds[sl].copy(), z[sl].clone(), x[sl].clone(),
                                solver_cfg.solver, solver_cfg.steps, float(np.float32(solver_cfg.guidance)),
                                bytes(teacher.weights_hash), False, start))
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        for k, shard in enumerate(shards):
            write_shard(shard, os.path.join(out_dir, f"pairs-{k:05d}.d2gp"))
    return shards


def encode_shard(shard):
    c, h, w = shard.latent_shape
    solver_id = SOLVER_IDS[shard.solver] | (REWIRED_FLAG if shard.rewired else 0)
    head = HEADER.pack(MAGIC, VERSION, len(shard), c, h, w, solver_id, shard.steps,
                       shard.guidance, bytes(shard.teacher_hash).ljust(32, b"\0")[:32])
    n = len(shard)
    rec = np.zeros(n, dtype=np.dtype([("seed", "<u8"), ("cond", "<u4"),
                                      ("z", "<f4", (c * h * w,)), ("x", "<f4", (c * h * w,))]))
    rec["seed"] = shard.seeds
    rec["cond"] = shard.conds
    rec["z"] = shard.z.reshape(n, -1).numpy()
    rec["x"] = shard.x.reshape(n, -1).numpy()
    return head + rec.tobytes()


def decode_shard(data, name="<bytes>"):
    if len(data) < HEADER.size:
        raise CorruptShard(f"{name}: truncated header")
    magic, version, count, c, h, w, solver_id, steps, guidance, thash = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CorruptShard(f"{name}: bad magic {magic!r}")
    if version != VERSION:
        raise CorruptShard(f"{name}: unsupported version {version}")
    solver = SOLVER_NAMES.get(solver_id & ~REWIRED_FLAG)
    if solver is None:
        raise CorruptShard(f"{name}: unknown solver id {solver_id}")
    d = c * h * w
    rec_size = 8 + 4 + 8 * d
    body = len(data) - HEADER.size
    if body != count * rec_size:
        raise CorruptShard(f"{name}: payload holds {body} bytes, header declares {count} records of {rec_size}")
    dt = np.dtype([("seed", "<u8"), ("cond", "<u4"), ("z", "<f4", (d,)), ("x", "<f4", (d,))])
    rec = np.frombuffer(data, dtype=dt, count=count, offset=HEADER.size)
    return PairShard(
        rec["seed"].astype(np.uint64), rec["cond"].astype(np.int64),
        torch.from_numpy(rec["z"].astype(np.float32).reshape(count, c, h, w)),
        torch.from_numpy(rec["x"].astype(np.float32).reshape(count, c, h, w)),
        solver, steps, guidance, thash, bool(solver_id & REWIRED_FLAG),
    )


def write_shard(shard, path):
    from .checkpoint import atomic_write_bytes
    atomic_write_bytes(path, encode_shard(shard))
    return path


def read_shard(path):
    with open(path, "rb") as fh:
        return decode_shard(fh.read(), os.fspath(path))


def list_shards(directory):
    return sorted(os.path.join(directory, f) for f in os.listdir(directory) if f.endswith(".d2gp"))


def read_shards(directory):
    return [read_shard(p) for p in list_shards(directory)]


def verify_shard(shard, teacher, k=16, seed=0, first_index=None):
    """Re-solve the generation blocks of ``k`` random records and compare x bitwise.

    Returns the list of mismatching record positions (empty when consistent).
    ``first_index`` is the global index of the shard's first record (a multiple
    of the shard size), needed to recover block boundaries.
    """
    if shard.rewired:
        raise InvalidArgument("rewired shards cannot be verified against a teacher")
    if bytes(shard.teacher_hash) != bytes(teacher.weights_hash):
        raise InvalidArgument("shard was generated by a different teacher")
    first = shard.first_index if first_index is None else first_index
    cfg = SolverConfig(shard.solver, shard.steps, shard.guidance)
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(shard), size=min(k, len(shard)), replace=False)
    bad = []
    done = {}
    for p in sorted(int(v) for v in picks):
        g = first + p
        b0 = (g // GEN_BLOCK) * GEN_BLOCK - first
        if b0 not in done:
            sl = slice(max(b0, 0), min(b0 + GEN_BLOCK, len(shard)))
            z = np.stack([draw_record(int(v), shard.latent_shape, teacher.condition_arity)[1]
                          for v in shard.seeds[sl]])
            with _single_thread():
                done[b0] = _solve_block(teacher, z, shard.conds[sl], cfg)
        if shard.x[p].numpy().tobytes() != done[b0][p - max(b0, 0)].numpy().tobytes():
            bad.append(p)
    return bad


def rewire_pairs(shard, seed):
    """Randomly re-pair z's with x's (a uniform permutation, sampled without
    replacement).  Seeds and conditions stay with their z."""
    if len(shard) < 2:
        raise InvalidArgument("rewiring needs at least 2 records")
    perm = np.random.default_rng(seed).permutation(len(shard))
    return replace(shard, x=shard.x[torch.from_numpy(perm)].clone(), rewired=True,
                   meta={**shard.meta, "permutation": perm})


def concat_shards(shards):
    """(z, c, x) tensors over a list of shards, after checking shapes agree."""
    if not shards:
        raise InvalidArgument("empty shard set")
    shape = shards[0].latent_shape
    if any(s.latent_shape != shape for s in shards):
        raise InvalidArgument("shards disagree on latent shape")
    z = torch.cat([s.z for s in shards])
    c = torch.cat([s.conds_tensor() for s in shards])
    x = torch.cat([s.x for s in shards])
    return z, c, x


def merge_shards(shards, n=None):
    """One shard holding the first ``n`` records (all by default) of ``shards``."""
    z, c, x = concat_shards(shards)
    n = len(z) if n is None else int(n)
    if not 1 <= n <= len(z):
        raise InvalidArgument(f"requested {n} records from a pool of {len(z)}")
    head = shards[0]
    return PairShard(np.concatenate([s.seeds for s in shards])[:n].copy(), c[:n].numpy().copy(),
                     z[:n].clone(), x[:n].clone(), head.solver, head.steps, head.guidance,
                     head.teacher_hash, any(s.rewired for s in shards), head.first_index)
