"""
Procedural multi-domain benchmark: primitive shapes, domain styles, the three
task-pair generators, augmentation and corpus building.
"""

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from config.settings import worker_count
from modules.errors import ConfigError, InvalidInputError
from modules.geometry import (
    IDENTITY_ROTATION,
    apply_rotation,
    as_cloud,
    farthest_point_sample,
    normalize_unit_sphere,
    random_rotation,
    resize_cyclic,
)

logger = logging.getLogger("DomainGenerator")

N_POINTS = 1024
TASKS = ("reconstruction", "denoising", "registration")
KINDS = ("sphere", "box", "cylinder", "table_composite", "chair_composite")
DENSITY_PROFILES = ("uniform", "surface-clustered")


# ==============================
# TYPES
# ==============================
@dataclass(frozen=True)
class DomainStyle:
    name: str
    density_profile: str = "uniform"
    noise_sigma: float = 0.0
    occlusion_fraction: float = 0.0
    resolution_jitter: tuple = (1.0, 1.0)

    def __post_init__(self):
        if self.density_profile not in DENSITY_PROFILES:
            raise InvalidInputError(f"unknown density profile '{self.density_profile}'")
        if self.noise_sigma < 0:
            raise InvalidInputError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not 0.0 <= self.occlusion_fraction < 0.5:
            raise InvalidInputError(
                f"occlusion_fraction must lie in [0, 0.5), got {self.occlusion_fraction}"
            )
        low, high = self.resolution_jitter
        if not 0.0 < low <= high:
            raise InvalidInputError(f"bad resolution_jitter range {self.resolution_jitter}")

    def to_dict(self):
        return {
            "name": self.name,
            "density_profile": self.density_profile,
            "noise_sigma": self.noise_sigma,
            "occlusion_fraction": self.occlusion_fraction,
            "resolution_jitter": list(self.resolution_jitter),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            name=data["name"],
            density_profile=data["density_profile"],
            noise_sigma=float(data["noise_sigma"]),
            occlusion_fraction=float(data["occlusion_fraction"]),
            resolution_jitter=tuple(float(v) for v in data["resolution_jitter"]),
        )


STYLE_REGISTRY = {
    s.name: s
    for s in (
        DomainStyle("clean-dense"),
        DomainStyle("clean-clustered", density_profile="surface-clustered"),
        DomainStyle("scan-noisy-occluded", noise_sigma=0.02, occlusion_fraction=0.25,
                    resolution_jitter=(0.8, 1.0)),
        DomainStyle("low-res-jittered", noise_sigma=0.01, resolution_jitter=(0.25, 0.5)),
    )
}


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task_id not in TASKS:
            raise InvalidInputError(f"unknown task '{self.task_id}', expected one of {TASKS}")
        p = self.params
        if self.task_id == "reconstruction" and not 8 <= p.get("sparse_count", 128):
            raise InvalidInputError(f"sparse_count must be >= 8, got {p['sparse_count']}")
        if self.task_id == "denoising" and p.get("sigma", 0.05) < 0:
            raise InvalidInputError(f"sigma must be >= 0, got {p['sigma']}")
        if self.task_id == "registration" and not 0 < p.get("max_angle", np.pi / 4) <= np.pi:
            raise InvalidInputError(f"max_angle must lie in (0, pi], got {p['max_angle']}")


@dataclass
class SamplePair:
    input: np.ndarray
    target: np.ndarray
    domain: str
    task: str
    sample_id: int
    params: dict = field(default_factory=dict)


@dataclass
class DomainDataset:
    domain: DomainStyle
    split: str
    pairs: dict = field(default_factory=dict)  # task -> [SamplePair]

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise InvalidInputError(f"split must be 'train' or 'test', got '{self.split}'")

    @property
    def name(self):
        return self.domain.name

    @property
    def tasks(self):
        return [t for t in TASKS if self.pairs.get(t)]

    def pairs_for(self, task):
        return self.pairs.get(task, [])

    def all_pairs(self):
        return [p for t in TASKS for p in self.pairs.get(t, [])]

    def __len__(self):
        return sum(len(v) for v in self.pairs.values())


@dataclass
class BenchmarkConfig:
    sources: tuple = ("clean-dense", "clean-clustered", "scan-noisy-occluded")
    target: str = "low-res-jittered"
    tasks: tuple = TASKS
    n_train: int = 200
    n_test: int = 50
    n_points: int = N_POINTS
    kinds: tuple = KINDS
    sparse_count: int = 128
    noise_sigma: float = 0.05
    max_angle: float = np.pi / 4
    augment: bool = True
    seed: int = 0
    styles: dict = field(default_factory=lambda: dict(STYLE_REGISTRY))

    def task_spec(self, task):
        params = {
            "reconstruction": {"sparse_count": self.sparse_count},
            "denoising": {"sigma": self.noise_sigma},
            "registration": {"max_angle": self.max_angle},
        }[task]
        return TaskSpec(task, params)

    def validate(self):
        if len(self.sources) < 2:
            raise ConfigError(f"need at least 2 source styles, got {list(self.sources)}")
        if len(set(self.sources)) != len(self.sources):
            raise ConfigError(f"duplicate source styles in {list(self.sources)}")
        if self.target in self.sources:
            raise ConfigError(f"target style '{self.target}' is also a source style")
        for name in (*self.sources, self.target):
            if name not in self.styles:
                raise ConfigError(f"unknown style '{name}', known: {sorted(self.styles)}")
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError(f"n_train and n_test must be >= 1, got {self.n_train}, {self.n_test}")
        if not self.tasks:
            raise ConfigError("need at least one task")
        for task in self.tasks:
            if task not in TASKS:
                raise ConfigError(f"unknown task '{task}', expected one of {TASKS}")
            try:
                self.task_spec(task)
            except InvalidInputError as e:
                raise ConfigError(str(e)) from e
        for kind in self.kinds:
            if kind not in KINDS:
                raise ConfigError(f"unknown primitive kind '{kind}'")
        if self.n_points < 64:
            raise ConfigError(f"n_points must be >= 64, got {self.n_points}")
        if "reconstruction" in self.tasks and self.sparse_count > self.n_points:
            raise ConfigError(f"sparse_count {self.sparse_count} exceeds n_points {self.n_points}")


@dataclass
class Benchmark:
    source: list           # train split of every source style
    source_test: list      # test split of every source style
    target: DomainDataset  # held-out style, test split

    def all_datasets(self):
        return [*self.source, *self.source_test, self.target]


# ==============================
# SEEDS
# ==============================
def derive_seed(*parts):
    """Stable 63-bit seed from any sequence of printable parts."""
    digest = hashlib.blake2b("/".join(str(p) for p in parts).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


# ==============================
# PRIMITIVES
# ==============================
def _box_parts(center, size):
    """The six faces of an axis-aligned box as (area, sampler-args)."""
    faces = []
    for axis in range(3):
        other = [a for a in range(3) if a != axis]
        area = size[other[0]] * size[other[1]]
        for sign in (-1.0, 1.0):
            faces.append((area, ("face", np.array(center, float), np.array(size, float), axis, sign)))
    return faces


def _sample_face(rng, n, center, size, axis, sign):
    pts = center + (rng.uniform(-0.5, 0.5, size=(n, 3)) * size)
    pts[:, axis] = center[axis] + sign * size[axis] / 2.0
    return pts


def _cylinder_parts(radius, height):
    lateral = 2 * np.pi * radius * height
    cap = np.pi * radius ** 2
    return [
        (lateral, ("lateral", radius, height)),
        (cap, ("cap", radius, height, 1.0)),
        (cap, ("cap", radius, height, -1.0)),
    ]


def _sample_part(rng, n, part):
    kind = part[0]
    if kind == "face":
        return _sample_face(rng, n, *part[1:])
    if kind == "lateral":
        _, radius, height = part
        theta = rng.uniform(0, 2 * np.pi, n)
        z = rng.uniform(-height / 2, height / 2, n)
        return np.stack([radius * np.cos(theta), radius * np.sin(theta), z], axis=1)
    if kind == "cap":
        _, radius, height, sign = part
        theta = rng.uniform(0, 2 * np.pi, n)
        r = radius * np.sqrt(rng.uniform(0, 1, n))
        return np.stack([r * np.cos(theta), r * np.sin(theta), np.full(n, sign * height / 2)], axis=1)
    raise InvalidInputError(f"unknown part '{kind}'")


def _sample_parts(rng, n, parts):
    areas = np.array([a for a, _ in parts], dtype=np.float64)
    counts = rng.multinomial(n, areas / areas.sum())
    chunks = [_sample_part(rng, c, spec) for c, (_, spec) in zip(counts, parts) if c > 0]
    pts = np.concatenate(chunks, axis=0)
    return pts[rng.permutation(n)]


def _legs(rng, top_z, half_x, half_y, thickness):
    legs = []
    for sx in (-1, 1):
        for sy in (-1, 1):
            center = (sx * (half_x - thickness), sy * (half_y - thickness), top_z / 2)
            legs += _box_parts(center, (thickness, thickness, top_z))
    return legs


def _balanced_sphere(rng, n):
    """Points on the unit sphere whose centroid is zero: antipodal pairs, plus a
    120-degree triple in a random great circle when n is odd."""
    half = rng.normal(size=((n - 3) // 2 if n % 2 else n // 2, 3))
    half /= np.linalg.norm(half, axis=1, keepdims=True)
    parts = [half, -half]
    if n % 2:
        u, v = np.linalg.qr(rng.normal(size=(3, 2)))[0].T
        theta = np.array([0.0, 2.0, 4.0]) * np.pi / 3.0
        parts.append(np.cos(theta)[:, None] * u + np.sin(theta)[:, None] * v)
    return rng.permutation(np.concatenate(parts))


def generate_primitive(kind, n, seed):
    if kind not in KINDS:
        raise InvalidInputError(f"unknown primitive kind '{kind}', expected one of {KINDS}")
    if n < 64:
        raise InvalidInputError(f"need n >= 64 points, got {n}")
    rng = np.random.default_rng(derive_seed("primitive", kind, n, seed))

    if kind == "sphere":
        pts = _balanced_sphere(rng, n)
    elif kind == "box":
        size = rng.uniform(0.5, 1.5, size=3)
        pts = _sample_parts(rng, n, _box_parts((0.0, 0.0, 0.0), size))
    elif kind == "cylinder":
        pts = _sample_parts(rng, n, _cylinder_parts(rng.uniform(0.3, 0.8), rng.uniform(0.6, 1.8)))
    elif kind == "table_composite":
        hx, hy = rng.uniform(0.5, 0.9), rng.uniform(0.3, 0.7)
        leg_h, top_t, leg_t = rng.uniform(0.5, 0.9), rng.uniform(0.05, 0.1), rng.uniform(0.05, 0.1)
        parts = _box_parts((0.0, 0.0, leg_h + top_t / 2), (2 * hx, 2 * hy, top_t))
        parts += _legs(rng, leg_h, hx, hy, leg_t)
        pts = _sample_parts(rng, n, parts)
    else:  # chair_composite
        half = rng.uniform(0.3, 0.5)
        leg_h, seat_t, leg_t = rng.uniform(0.4, 0.6), rng.uniform(0.05, 0.1), rng.uniform(0.04, 0.08)
        back_h = rng.uniform(0.5, 0.9)
        parts = _box_parts((0.0, 0.0, leg_h + seat_t / 2), (2 * half, 2 * half, seat_t))
        parts += _box_parts((0.0, half - seat_t / 2, leg_h + seat_t + back_h / 2),
                            (2 * half, seat_t, back_h))
        parts += _legs(rng, leg_h, half, half, leg_t)
        pts = _sample_parts(rng, n, parts)

    return normalize_unit_sphere(pts)


# ==============================
# STYLE
# ==============================
def resample(cloud, factor, profile, rng):
    """Resolution change; factor 1.0 with a uniform profile is the identity."""
    pts = as_cloud(cloud)
    n = pts.shape[0]
    m = max(8, int(round(factor * n)))
    if profile == "uniform":
        if m == n:
            return pts
        if m < n:
            return pts[np.sort(rng.choice(n, size=m, replace=False))]
        return pts[np.sort(rng.choice(n, size=m, replace=True))]
    # surface-clustered: density concentrated around a few anchors
    anchors = pts[rng.choice(n, size=4, replace=False)]
    d2 = ((pts[:, None, :] - anchors[None, :, :]) ** 2).sum(-1).min(axis=1)
    weights = np.exp(-d2 / 0.1)
    weights /= weights.sum()
    return pts[np.sort(rng.choice(n, size=m, replace=True, p=weights))]


def occlude(cloud, fraction, rng):
    """Remove the `fraction` of points beyond a random half-space cut."""
    pts = as_cloud(cloud)
    if fraction <= 0.0:
        return pts
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    proj = pts @ direction
    threshold = np.quantile(proj, 1.0 - fraction)
    return pts[proj <= threshold]


def jitter(cloud, sigma, rng):
    pts = as_cloud(cloud)
    if sigma <= 0.0:
        return pts
    return pts + rng.normal(0.0, sigma, size=pts.shape)


def pad_or_trim(cloud, n, rng):
    pts = as_cloud(cloud)
    if pts.shape[0] == n:
        return pts
    if pts.shape[0] > n:
        return pts[np.sort(rng.choice(pts.shape[0], size=n, replace=False))]
    return resize_cyclic(pts, n)


def stylize(cloud, style, seed, n_points=N_POINTS):
    rng = np.random.default_rng(derive_seed("stylize", style.name, seed))
    pts = as_cloud(cloud)
    factor = rng.uniform(*style.resolution_jitter) if style.resolution_jitter[0] != style.resolution_jitter[1] \
        else style.resolution_jitter[0]
    pts = resample(pts, factor, style.density_profile, rng)
    pts = occlude(pts, style.occlusion_fraction, rng)
    pts = jitter(pts, style.noise_sigma, rng)
    pts = normalize_unit_sphere(pts)
    return pad_or_trim(pts, n_points, rng)


# ==============================
# TASK PAIRS
# ==============================
def make_reconstruction_pair(cloud, sparse_count, seed, domain="", sample_id=0):
    target = as_cloud(cloud)
    n = target.shape[0]
    if sparse_count < 8:
        raise InvalidInputError(f"sparse_count must be >= 8, got {sparse_count}")
    if sparse_count > n:
        raise InvalidInputError(f"sparse_count {sparse_count} exceeds cloud size {n}")
    idx = farthest_point_sample(target, sparse_count, seed)
    return SamplePair(
        input=resize_cyclic(target[idx], n),
        target=target,
        domain=domain,
        task="reconstruction",
        sample_id=sample_id,
        params={"sparse_count": int(sparse_count), "seed": int(seed)},
    )


def denoising_noise(shape, sigma, seed):
    """The exact noise realization used by make_denoising_pair."""
    rng = np.random.default_rng(derive_seed("denoising", seed))
    return rng.normal(0.0, sigma, size=shape) if sigma > 0 else np.zeros(shape)


def make_denoising_pair(cloud, sigma, seed, domain="", sample_id=0):
    target = as_cloud(cloud)
    if sigma < 0:
        raise InvalidInputError(f"sigma must be >= 0, got {sigma}")
    return SamplePair(
        input=target + denoising_noise(target.shape, sigma, seed),
        target=target,
        domain=domain,
        task="denoising",
        sample_id=sample_id,
        params={"sigma": float(sigma), "seed": int(seed)},
    )


def make_registration_pair(cloud, max_angle, seed, domain="", sample_id=0):
    target = as_cloud(cloud)
    rot = random_rotation(seed, max_angle)
    return SamplePair(
        input=apply_rotation(target, rot),
        target=target,
        domain=domain,
        task="registration",
        sample_id=sample_id,
        params={
            "max_angle": float(max_angle),
            "seed": int(seed),
            "axis": rot.axis.tolist(),
            "angle": rot.angle,
        },
    )


def make_pair(task_spec, cloud, seed, domain="", sample_id=0):
    p = task_spec.params
    if task_spec.task_id == "reconstruction":
        return make_reconstruction_pair(cloud, p["sparse_count"], seed, domain, sample_id)
    if task_spec.task_id == "denoising":
        return make_denoising_pair(cloud, p["sigma"], seed, domain, sample_id)
    return make_registration_pair(cloud, p["max_angle"], seed, domain, sample_id)


def augment(pair, seed, max_angle=np.radians(10.0), scale_range=(0.9, 1.1), jitter_sigma=0.01):
    """Shared rotation + scale on input and target; jitter on the input only."""
    rng = np.random.default_rng(derive_seed("augment", seed))
    rot = random_rotation(int(rng.integers(2 ** 62)), max_angle) if max_angle > 0 else IDENTITY_ROTATION
    scale = float(rng.uniform(*scale_range)) if scale_range[0] != scale_range[1] else float(scale_range[0])

    target = apply_rotation(pair.target, rot) * scale
    inp = apply_rotation(pair.input, rot) * scale
    inp = jitter(inp, jitter_sigma, rng)
    params = dict(pair.params)
    params["augment"] = {"axis": rot.axis.tolist(), "angle": rot.angle, "scale": scale,
                         "jitter_sigma": float(jitter_sigma)}
    return SamplePair(input=inp, target=target, domain=pair.domain, task=pair.task,
                      sample_id=pair.sample_id, params=params)


# ==============================
# BENCHMARK
# ==============================
def _build_pair(config, style, task, split, index, sample_id):
    seed = derive_seed(config.seed, style.name, task, split, index)
    kind = config.kinds[index % len(config.kinds)]
    clean = generate_primitive(kind, config.n_points, seed)
    styled = stylize(clean, style, seed, n_points=config.n_points)
    pair = make_pair(config.task_spec(task), styled, seed, style.name, sample_id)
    if config.augment and split == "train":
        pair = augment(pair, seed)
    pair.params["kind"] = kind
    return pair


def build_benchmark(config):
    config.validate()
    jobs = []
    sample_id = 0
    layout = [(name, split) for name in config.sources for split in ("train", "test")]
    layout.append((config.target, "test"))
    for name, split in layout:
        count = config.n_train if split == "train" else config.n_test
        for task in config.tasks:
            for i in range(count):
                jobs.append((name, split, task, i, sample_id))
                sample_id += 1

    logger.info(f"🏗️ Generating {len(jobs)} sample pairs over {len(layout)} domain splits")
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        pairs = list(pool.map(
            lambda job: _build_pair(config, config.styles[job[0]], job[2], job[1], job[3], job[4]),
            jobs,
        ))

    datasets = {key: DomainDataset(config.styles[key[0]], key[1]) for key in layout}
    for (name, split, task, _, _), pair in zip(jobs, pairs):
        datasets[(name, split)].pairs.setdefault(task, []).append(pair)

    bench = Benchmark(
        source=[datasets[(n, "train")] for n in config.sources],
        source_test=[datasets[(n, "test")] for n in config.sources],
        target=datasets[(config.target, "test")],
    )
    logger.info(
        f"✅ Benchmark ready: sources={list(config.sources)} target={config.target} "
        f"tasks={list(config.tasks)}"
    )
    return bench
