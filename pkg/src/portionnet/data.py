"""Synthetic food-portion dataset with analytic ground truth.

Each class is a (shape kind, density tier, size bucket) combination. A sample
draws an isotropic size jitter, so the top-down silhouette plus the class
colour fully determine volume and energy, which keeps RGB-only prediction
feasible while the point cloud carries the same information geometrically.

Units: meters for geometry, mL for volume, kcal for energy.
"""
from __future__ import annotations

import colorsys
import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from portionnet.config import DataConfig
from portionnet.errors import ConfigError, IntegrityError

KINDS = ("box", "ellipsoid", "cylinder")
M3_TO_ML = 1e6

# Per-kind extents as multiples of the characteristic size.
#   box: full side lengths; ellipsoid: semi-axes; cylinder: (semi-axis x, semi-axis y, height)
_ASPECT = {
    "box": (1.0, 0.8, 0.6),
    "ellipsoid": (0.5, 0.4, 0.35),
    "cylinder": (0.45, 0.45, 0.4),
}

INDEX_FILE = "index.json"
LAYOUT_VERSION = 1


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    extents: tuple[float, float, float]
    density: float
    class_id: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown shape kind {self.kind!r}; expected one of {KINDS}")
        if len(self.extents) != 3 or any(not e > 0 for e in self.extents):
            raise ConfigError(f"extents must be three positive reals, got {self.extents}")
        if not self.density > 0:
            raise ConfigError(f"density must be positive, got {self.density}")

    def bbox_dims(self) -> np.ndarray:
        a, b, c = self.extents
        if self.kind == "box":
            return np.array([a, b, c])
        if self.kind == "ellipsoid":
            return np.array([2 * a, 2 * b, 2 * c])
        return np.array([2 * a, 2 * b, c])

    def scaled(self, s: float) -> "ShapeSpec":
        return ShapeSpec(self.kind, tuple(float(e * s) for e in self.extents), self.density, self.class_id)


@dataclass
class FoodSample:
    image: np.ndarray  # H x W x 3, float32 in [0, 1]
    points: np.ndarray  # N x 3, float32, meters, centered
    bbox_dims: np.ndarray  # (3,), float32, meters
    class_id: int
    volume: float  # mL
    energy: float  # kcal
    kind: str = ""
    density: float = 0.0
    sample_id: int = 0

    def __post_init__(self):
        if not (self.volume > 0 and self.energy > 0):
            raise ConfigError("volume and energy must be positive")
        if np.any(self.bbox_dims <= 0):
            raise ConfigError("bbox_dims must be positive")


@dataclass
class Dataset:
    samples: list[FoodSample]
    class_count: int
    split: Literal["train", "val", "test", "all"] = "all"
    config: DataConfig | None = field(default=None, repr=False)

    def __post_init__(self):
        for s in self.samples:
            if not 0 <= s.class_id < self.class_count:
                raise ConfigError(f"sample {s.sample_id}: class_id {s.class_id} outside [0, {self.class_count})")

    def __len__(self):
        return len(self.samples)

    def arrays(self) -> dict[str, np.ndarray]:
        """Stack samples into batch arrays (images are returned channels-first)."""
        return {
            "images": np.stack([s.image for s in self.samples]).transpose(0, 3, 1, 2).copy(),
            "points": np.stack([s.points for s in self.samples]),
            "bbox": np.stack([s.bbox_dims for s in self.samples]),
            "labels": np.array([s.class_id for s in self.samples], dtype=np.int64),
            "volume": np.array([s.volume for s in self.samples], dtype=np.float64),
            "energy": np.array([s.energy for s in self.samples], dtype=np.float64),
        }


def analytic_volume(spec: ShapeSpec) -> float:
    """Exact volume of the solid in mL."""
    a, b, c = spec.extents
    if spec.kind == "box":
        v = a * b * c
    elif spec.kind == "ellipsoid":
        v = 4.0 / 3.0 * math.pi * a * b * c
    elif spec.kind == "cylinder":
        v = math.pi * a * b * c
    else:  # pragma: no cover - ShapeSpec validates kind
        raise ConfigError(f"unknown shape kind {spec.kind!r}")
    return v * M3_TO_ML


def _ellipse_perimeter(a: float, b: float) -> float:
    from scipy.special import ellipe

    hi, lo = max(a, b), min(a, b)
    return 4.0 * hi * ellipe(1.0 - (lo / hi) ** 2)


def _sample_box(rng, extents, n):
    a, b, c = extents
    areas = np.array([b * c, b * c, a * c, a * c, a * b, a * b])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    half = np.array([a, b, c]) / 2
    pts = (rng.random((n, 3)) - 0.5) * np.array([a, b, c])
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    pts[np.arange(n), axis] = sign * half[axis]
    return pts


def _sample_ellipsoid(rng, extents, n):
    # sphere directions mapped to the ellipsoid, accepted in proportion to the local area element
    a, b, c = extents
    scale = np.array([a, b, c])
    bound = 1.0 / min(a, b, c)
    out = []
    need = n
    while need > 0:
        u = rng.standard_normal((2 * need + 16, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        g = np.sqrt((u[:, 0] / a) ** 2 + (u[:, 1] / b) ** 2 + (u[:, 2] / c) ** 2)
        keep = rng.random(len(u)) < g / bound
        out.append(u[keep] * scale)
        need -= int(keep.sum())
    return np.concatenate(out)[:n]


def _sample_cylinder(rng, extents, n):
    a, b, h = extents
    cap = math.pi * a * b
    side = _ellipse_perimeter(a, b) * h
    where = rng.choice(3, size=n, p=np.array([cap, cap, side]) / (2 * cap + side))
    pts = np.empty((n, 3))

    n_cap = int(np.sum(where < 2))
    r = np.sqrt(rng.random(n_cap))
    t = rng.random(n_cap) * 2 * math.pi
    caps = where < 2
    pts[caps, 0] = a * r * np.cos(t)
    pts[caps, 1] = b * r * np.sin(t)
    pts[caps, 2] = np.where(where[caps] == 0, h / 2, -h / 2)

    n_side = n - n_cap
    bound = max(a, b)
    thetas = []
    got = 0
    while got < n_side:
        th = rng.random(2 * (n_side - got) + 16) * 2 * math.pi
        ds = np.sqrt((a * np.sin(th)) ** 2 + (b * np.cos(th)) ** 2)
        th = th[rng.random(len(th)) < ds / bound]
        thetas.append(th)
        got += len(th)
    th = np.concatenate(thetas)[:n_side] if n_side else np.empty(0)
    side_mask = ~caps
    pts[side_mask, 0] = a * np.cos(th)
    pts[side_mask, 1] = b * np.sin(th)
    pts[side_mask, 2] = (rng.random(n_side) - 0.5) * h
    return pts


_SAMPLERS = {"box": _sample_box, "ellipsoid": _sample_ellipsoid, "cylinder": _sample_cylinder}


def sample_point_cloud(spec: ShapeSpec, n_points: int, seed: int) -> np.ndarray:
    """Uniform surface samples of ``spec``, centered at the origin, float64 (N, 3)."""
    if n_points < 64:
        raise ConfigError(f"n_points must be >= 64 (largest pooling resolution reachable), got {n_points}")
    rng = np.random.default_rng(seed)
    return _SAMPLERS[spec.kind](rng, spec.extents, n_points)


def class_color(class_id: int) -> np.ndarray:
    hue = (class_id * 0.6180339887498949) % 1.0
    return np.array(colorsys.hsv_to_rgb(hue, 0.8, 0.95))


def render_coverage(spec: ShapeSpec, resolution: int, frame_size: float = 0.3, supersample: int = 4) -> np.ndarray:
    """Fractional pixel coverage of the top-down orthographic silhouette, (H, W) in [0, 1]."""
    if resolution < 32:
        raise ConfigError(f"resolution must be >= 32, got {resolution}")
    n = resolution * supersample
    centers = (np.arange(n) + 0.5) / n * frame_size - frame_size / 2
    x = centers[None, :]
    y = centers[:, None]
    a, b, _ = spec.extents
    if spec.kind == "box":
        inside = (np.abs(x) <= a / 2) & (np.abs(y) <= b / 2)
    else:
        inside = (x / a) ** 2 + (y / b) ** 2 <= 1.0
    return inside.reshape(resolution, supersample, resolution, supersample).mean(axis=(1, 3))


def render_rgb(spec: ShapeSpec, resolution: int, frame_size: float = 0.3) -> np.ndarray:
    """Silhouette filled with the class colour over a black background, (H, W, 3) in [0, 1]."""
    cov = render_coverage(spec, resolution, frame_size)
    return cov[:, :, None] * class_color(spec.class_id)[None, None, :]


def class_specs(config: DataConfig) -> list[ShapeSpec]:
    """Base (unjittered) ShapeSpec of every class, in class-id order."""
    combos = list(itertools.product(config.kinds, config.density_tiers, config.size_buckets))
    if config.class_count > len(combos):
        raise ConfigError(f"class_count {config.class_count} exceeds {len(combos)} combinations")
    specs = []
    for cid, (kind, density, size) in enumerate(combos[: config.class_count]):
        extents = tuple(float(r * size) for r in _ASPECT[kind])
        specs.append(ShapeSpec(kind, extents, float(density), cid))
    return specs


def make_sample(base: ShapeSpec, config: DataConfig, index: int) -> FoodSample:
    rng = np.random.default_rng([config.seed, base.class_id, index])
    lo, hi = config.size_jitter
    spec = base.scaled(rng.uniform(lo, hi))
    volume = analytic_volume(spec)
    cloud_seed = int(rng.integers(2**63 - 1))
    return FoodSample(
        image=render_rgb(spec, config.resolution, config.frame_size).astype(np.float32),
        points=sample_point_cloud(spec, config.n_points, cloud_seed).astype(np.float32),
        bbox_dims=spec.bbox_dims().astype(np.float32),
        class_id=spec.class_id,
        volume=volume,
        energy=volume * spec.density,
        kind=spec.kind,
        density=spec.density,
        sample_id=base.class_id * config.samples_per_class + index,
    )


def generate_synthetic_dataset(config: DataConfig) -> dict[str, Dataset]:
    """Generate the full dataset and its stratified train/test split."""
    samples = []
    train_ids: set[int] = set()
    split_rng = np.random.default_rng([config.seed, 0x5EED])
    n_train = round(config.train_fraction * config.samples_per_class)
    for base in class_specs(config):
        cls_samples = [make_sample(base, config, i) for i in range(config.samples_per_class)]
        order = split_rng.permutation(config.samples_per_class)
        train_ids.update(cls_samples[i].sample_id for i in order[:n_train])
        samples.extend(cls_samples)
    return _split(samples, train_ids, config)


def _split(samples, train_ids, config) -> dict[str, Dataset]:
    c = config.class_count
    return {
        "all": Dataset(samples, c, "all", config),
        "train": Dataset([s for s in samples if s.sample_id in train_ids], c, "train", config),
        "test": Dataset([s for s in samples if s.sample_id not in train_ids], c, "test", config),
    }


# -- on-disk layout ---------------------------------------------------------


def _write_array(path: Path, arr: np.ndarray) -> str:
    blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    path.write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def save_dataset(splits: dict[str, Dataset], out_dir: str | Path) -> Path:
    """Write ``index.json`` plus one points/ and one images/ little-endian float32 file per sample."""
    out = Path(out_dir)
    (out / "points").mkdir(parents=True, exist_ok=True)
    (out / "images").mkdir(parents=True, exist_ok=True)
    train_ids = {s.sample_id for s in splits["train"].samples}
    config = splits["all"].config
    records = []
    for s in splits["all"].samples:
        pts_rel = f"points/{s.sample_id:06d}.f32"
        img_rel = f"images/{s.sample_id:06d}.f32"
        records.append(
            {
                "sample_id": s.sample_id,
                "split": "train" if s.sample_id in train_ids else "test",
                "class_id": s.class_id,
                "kind": s.kind,
                "density": s.density,
                "volume": s.volume,
                "energy": s.energy,
                "bbox_dims": [float(x) for x in s.bbox_dims],
                "points_file": pts_rel,
                "points_shape": list(s.points.shape),
                "points_sha256": _write_array(out / pts_rel, s.points),
                "image_file": img_rel,
                "image_shape": list(s.image.shape),
                "image_sha256": _write_array(out / img_rel, s.image),
            }
        )
    index = {
        "layout_version": LAYOUT_VERSION,
        "dtype": "float32-le",
        "class_count": splits["all"].class_count,
        "config": config.model_dump(mode="json") if config is not None else None,
        "samples": records,
    }
    path = out / INDEX_FILE
    path.write_text(json.dumps(index, indent=1))
    return path


def _read_array(root: Path, rel: str, shape, digest: str | None) -> np.ndarray:
    path = root / rel
    if not path.is_file():
        raise IntegrityError(f"missing array file {path}")
    blob = path.read_bytes()
    if digest is not None and hashlib.sha256(blob).hexdigest() != digest:
        raise IntegrityError(f"checksum mismatch for {path}")
    expected = int(np.prod(shape)) * 4
    if len(blob) != expected:
        raise IntegrityError(f"{path}: expected {expected} bytes, found {len(blob)}")
    return np.frombuffer(blob, dtype="<f4").reshape(shape).astype(np.float32)


def load_dataset(data_dir: str | Path) -> dict[str, Dataset]:
    root = Path(data_dir)
    index_path = root / INDEX_FILE
    if not index_path.is_file():
        raise ConfigError(f"no dataset at {root} (missing {INDEX_FILE})")
    try:
        index = json.loads(index_path.read_text())
    except json.JSONDecodeError as err:
        raise IntegrityError(f"{index_path}: {err}") from None
    if index.get("layout_version") != LAYOUT_VERSION:
        raise IntegrityError(f"unsupported dataset layout version {index.get('layout_version')}")
    config = DataConfig.model_validate(index["config"]) if index.get("config") else None
    samples, train_ids = [], set()
    for r in index["samples"]:
        samples.append(
            FoodSample(
                image=_read_array(root, r["image_file"], r["image_shape"], r.get("image_sha256")),
                points=_read_array(root, r["points_file"], r["points_shape"], r.get("points_sha256")),
                bbox_dims=np.array(r["bbox_dims"], dtype=np.float32),
                class_id=int(r["class_id"]),
                volume=float(r["volume"]),
                energy=float(r["energy"]),
                kind=r.get("kind", ""),
                density=float(r.get("density", 0.0)),
                sample_id=int(r["sample_id"]),
            )
        )
        if r["split"] == "train":
            train_ids.add(int(r["sample_id"]))
    c = int(index["class_count"])
    return {
        "all": Dataset(samples, c, "all", config),
        "train": Dataset([s for s in samples if s.sample_id in train_ids], c, "train", config),
        "test": Dataset([s for s in samples if s.sample_id not in train_ids], c, "test", config),
    }
