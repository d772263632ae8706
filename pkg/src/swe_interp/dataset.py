"""Random oscillatory initial data, paired coarse/fine runs, and the binary dataset file.

File layout (little-endian)::

    b"SWE1"  u32 version
    u32 M_c, M_f, N, count    f64 dt, f, g    u64 seed
    count x { f64 alpha, beta, pos   u32 k   f64[N*3M_f] x_c   f64[N*3M_f] x_f }

A ``<file>.manifest`` sidecar repeats the configuration as key=value lines.
"""
from __future__ import annotations

import hashlib
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import PhysicsParams, State, Trajectory, energy_drift, simulate
from .fe_core import FieldP1, build_mesh, interpolate_p0
from .transfer import MeshPair, prolong_trajectory

log = logging.getLogger(__name__)

MAGIC = b"SWE1"
FORMAT_VERSION = 1
TRAIN_FRACTION_TENTHS = 7
DRIFT_TOLERANCE = 1e-10

_HEADER = struct.Struct("<4sIIIII3dQ")
_SAMPLE = struct.Struct("<3dI")

# per-purpose random streams derived from the user seed
STREAM_DATA, STREAM_INIT, STREAM_SHUFFLE, STREAM_EVAL = range(4)


def rng_for(seed: int, purpose: int, *index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(purpose, *index)))


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SampleParams:
    alpha: float
    beta: float
    pos: float
    k: int


def sample_params(rng: np.random.Generator) -> SampleParams:
    alpha = rng.uniform(0.5, 2.0)
    beta = rng.normal(100.0, 6.0)
    pos = rng.uniform(1.0, 2.0)
    k = int(rng.integers(4, 10, endpoint=True))
    return SampleParams(float(alpha), float(beta), float(pos), k)


def initial_pressure(params: SampleParams, x):
    """alpha * (exp(-beta (x - pos)^2) + sin(2 pi k (x - pos)) / 10)."""
    d = np.asarray(x, dtype=np.float64) - params.pos
    return params.alpha * (np.exp(-params.beta * d * d) + 0.1 * np.sin(2.0 * np.pi * params.k * d))


def initial_state(params: SampleParams, mesh) -> State:
    zero = FieldP1(mesh, np.zeros(mesh.num_elements))
    return State(zero, zero, interpolate_p0(lambda x: initial_pressure(params, x), mesh))


@dataclass(frozen=True)
class DatasetConfig:
    coarse_elems: int = 75
    fine_elems: int = 300
    num_levels: int = 10
    physics: PhysicsParams = field(default_factory=PhysicsParams)

    def __post_init__(self):
        if self.num_levels < 1:
            raise ValueError(f"need at least one time level, got {self.num_levels}")

    @property
    def mesh_pair(self) -> MeshPair:
        return MeshPair(build_mesh(self.coarse_elems), build_mesh(self.fine_elems))

    @property
    def dimension(self) -> int:
        return 3 * self.fine_elems


@dataclass(frozen=True)
class TrajectoryPair:
    x_c: Trajectory
    x_f: Trajectory
    params: SampleParams


def generate_pair(params: SampleParams, pair: MeshPair, n_steps: int,
                  physics: PhysicsParams, check_drift: bool = True) -> TrajectoryPair:
    coarse = simulate(initial_state(params, pair.coarse), n_steps, physics)
    fine = simulate(initial_state(params, pair.fine), n_steps, physics)
    if check_drift and n_steps > 0:
        for traj in (coarse, fine):
            drift = energy_drift(traj, physics.g)
            if drift > DRIFT_TOLERANCE:
                raise AssertionError(f"energy drift {drift:.3e} on M={traj.mesh.num_elements} for {params}")
    return TrajectoryPair(prolong_trajectory(coarse, pair), fine, params)


@dataclass
class Dataset:
    config: DatasetConfig
    seed: int
    pairs: list

    @property
    def count(self) -> int:
        return len(self.pairs)

    @property
    def split_index(self) -> int:
        return TRAIN_FRACTION_TENTHS * self.count // 10

    @property
    def train(self) -> list:
        return self.pairs[:self.split_index]

    @property
    def validation(self) -> list:
        return self.pairs[self.split_index:]

    def arrays(self, which: str = "all"):
        """Stacked (x_c, x_f) arrays of shape (count, N, D)."""
        pairs = {"all": self.pairs, "train": self.train, "validation": self.validation}[which]
        n, d = self.config.num_levels, self.config.dimension
        if not pairs:
            return np.zeros((0, n, d)), np.zeros((0, n, d))
        return (np.stack([p.x_c.data for p in pairs]), np.stack([p.x_f.data for p in pairs]))

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.config == other.config and self.seed == other.seed
                and self.count == other.count
                and all(a.params == b.params and np.array_equal(a.x_c.data, b.x_c.data)
                        and np.array_equal(a.x_f.data, b.x_f.data)
                        for a, b in zip(self.pairs, other.pairs)))


def generate_dataset(count: int = 1000, seed: int = 0, config: DatasetConfig | None = None,
                     threads: int = 1) -> Dataset:
    """Each sample draws from its own stream (seed, index), so threading cannot change the output."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    config = config or DatasetConfig()
    pair = config.mesh_pair
    n_steps = config.num_levels - 1

    def one(i):
        return generate_pair(sample_params(rng_for(seed, STREAM_DATA, i)), pair, n_steps, config.physics)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            pairs = list(pool.map(one, range(count)))
    else:
        pairs = [one(i) for i in range(count)]
    return Dataset(config, seed, pairs)


def manifest_text(ds: Dataset) -> str:
    cfg = ds.config
    lines = [
        ("format", "SWE1"), ("version", FORMAT_VERSION),
        ("coarse_elems", cfg.coarse_elems), ("fine_elems", cfg.fine_elems),
        ("num_levels", cfg.num_levels), ("dimension", cfg.dimension), ("count", ds.count),
        ("train", ds.split_index), ("validation", ds.count - ds.split_index),
        ("dt", repr(cfg.physics.dt)), ("coriolis", repr(cfg.physics.coriolis)),
        ("g", repr(cfg.physics.g)), ("seed", ds.seed),
    ]
    return "".join(f"{k}={v}\n" for k, v in lines)


def save_dataset(ds: Dataset, path) -> Path:
    path = Path(path)
    cfg = ds.config
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, cfg.coarse_elems, cfg.fine_elems, cfg.num_levels,
                          ds.count, cfg.physics.dt, cfg.physics.coriolis, cfg.physics.g, ds.seed)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            for p in ds.pairs:
                sp = p.params
                fh.write(_SAMPLE.pack(sp.alpha, sp.beta, sp.pos, sp.k))
                fh.write(np.ascontiguousarray(p.x_c.data, dtype="<f8").tobytes())
                fh.write(np.ascontiguousarray(p.x_f.data, dtype="<f8").tobytes())
        Path(str(path) + ".manifest").write_text(manifest_text(ds))
    except OSError as exc:
        raise OSError(f"could not write dataset to {path}: {exc}") from exc
    return path


def load_dataset(path) -> Dataset:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"could not read dataset {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise DatasetFormatError(f"{path}: truncated header")
    magic, version, mc, mf, n, count, dt, f, g, seed = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    config = DatasetConfig(mc, mf, n, PhysicsParams(coriolis=f, g=g, dt=dt))
    pair = config.mesh_pair
    block = n * 3 * mf
    expected = _HEADER.size + count * (_SAMPLE.size + 2 * 8 * block)
    if len(raw) != expected:
        raise DatasetFormatError(f"{path}: size {len(raw)} does not match header (expected {expected})")
    pairs = []
    off = _HEADER.size
    for _ in range(count):
        alpha, beta, pos, k = _SAMPLE.unpack_from(raw, off)
        off += _SAMPLE.size
        xc = np.frombuffer(raw, "<f8", block, off).reshape(n, 3 * mf).astype(np.float64)
        off += 8 * block
        xf = np.frombuffer(raw, "<f8", block, off).reshape(n, 3 * mf).astype(np.float64)
        off += 8 * block
        pairs.append(TrajectoryPair(Trajectory(pair.fine, xc), Trajectory(pair.fine, xf),
                                    SampleParams(alpha, beta, pos, k)))
    return Dataset(config, seed, pairs)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
