"""Procedural fracture data: primitive shapes, heightfield cuts, random poses.

A sample is a canonical whole cloud cut into ``N`` parts; every part is moved
by a random rotation about its own centroid plus a random shift, and the
ground-truth pose undoes that motion:
``apply_pose(stored_part, Pose(Q.T, c), c + delta)`` is the canonical part.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DatasetParseError, GenerationError
from .geometry import Pose, random_rotation_uniform

SHAPES = ("sphere", "box", "cylinder", "ellipsoid")
CUT_TYPES = ("planar", "sine", "parabolic", "square")

BOX_HALF_EXTENTS = np.array([1.0, 0.7, 0.45])
ELLIPSOID_AXES = np.array([1.0, 0.7, 0.5])
CYLINDER_RADIUS, CYLINDER_HALF_HEIGHT = 0.6, 0.8

# Heightfield reference axis for the first cut of every object. It is tilted
# away from the primitives' symmetry axes so box fragments have a unique
# canonical pose.
DEFAULT_CUT_AXIS = (1.0, 2.0, 3.0)

MAX_CUT_RETRIES = 50


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def _random_unit(rng, size):
    v = rng.standard_normal((size, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def box_face_areas(half=BOX_HALF_EXTENTS):
    a, b, c = 2 * np.asarray(half, dtype=np.float64)
    # faces normal to x, y, z; each appears twice
    return np.array([b * c, a * c, a * b])


def sample_shape(shape_type: str, m: int, rng: np.random.Generator) -> np.ndarray:
    """``m`` points uniformly distributed on a primitive's surface.

    Every primitive is centered and scaled so its farthest surface point lies
    on the unit sphere.
    """
    if m < 256:
        raise ConfigError(f"shapes need at least 256 points, got {m}")
    if shape_type == "sphere":
        pts = _random_unit(rng, m)
    elif shape_type == "box":
        half = BOX_HALF_EXTENTS
        areas = np.repeat(box_face_areas(half), 2)
        face = rng.choice(6, size=m, p=areas / areas.sum())
        pts = rng.uniform(-1.0, 1.0, size=(m, 3)) * half
        axis = face // 2
        sign = np.where(face % 2 == 0, -1.0, 1.0)
        pts[np.arange(m), axis] = sign * half[axis]
        pts /= np.linalg.norm(half)
    elif shape_type == "cylinder":
        r, h = CYLINDER_RADIUS, CYLINDER_HALF_HEIGHT
        side, cap = 2 * np.pi * r * 2 * h, np.pi * r * r
        kind = rng.choice(3, size=m, p=np.array([side, cap, cap]) / (side + 2 * cap))
        theta = rng.uniform(0, 2 * np.pi, m)
        rad = np.where(kind == 0, r, r * np.sqrt(rng.uniform(0, 1, m)))
        z = np.where(kind == 0, rng.uniform(-h, h, m), np.where(kind == 1, -h, h))
        pts = np.stack([rad * np.cos(theta), rad * np.sin(theta), z], 1) / np.hypot(r, h)
    elif shape_type == "ellipsoid":
        a, b, c = ELLIPSOID_AXES
        # map the unit sphere and accept by the relative area element
        g_max = max(b * c, a * c, a * b)
        out = []
        while sum(len(o) for o in out) < m:
            u = _random_unit(rng, 2 * m)
            g = np.sqrt((b * c * u[:, 0]) ** 2 + (a * c * u[:, 1]) ** 2 + (a * b * u[:, 2]) ** 2)
            keep = rng.uniform(0, g_max, 2 * m) < g
            out.append(u[keep] * ELLIPSOID_AXES)
        pts = np.concatenate(out)[:m] / a
    else:
        raise ConfigError(f"unknown shape type {shape_type!r}")
    return pts


def orthonormal_basis(axis):
    """Two unit vectors completing ``axis`` to a right-handed frame."""
    w = _unit(axis)
    helper = np.eye(3)[np.argmin(np.abs(w))]
    u = _unit(np.cross(w, helper))
    v = np.cross(w, u)
    return u, v


def heightfield(cut_type: str, params: dict, u, v):
    c = params.get("c", 0.0)
    if cut_type == "planar":
        return np.full_like(u, c)
    if cut_type == "sine":
        return params["a"] * np.sin(params["omega"] * u + params["phi"]) + c
    if cut_type == "parabolic":
        return params["a"] * (u * u + v * v) + c
    if cut_type == "square":
        return params["a"] * np.sign(np.sin(params["omega"] * u)) + c
    raise ConfigError(f"unknown cut type {cut_type!r}")


def below_heightfield(P, cut_type, params, axis):
    """Boolean mask of points with ``p . axis < h(u, v)``."""
    w = _unit(axis)
    bu, bv = orthonormal_basis(w)
    P = np.asarray(P, dtype=np.float64)
    return P @ w < heightfield(cut_type, params, P @ bu, P @ bv)


def heightfield_cut(P, cut_type, params, axis):
    """Split ``P`` into the parts below (A) and above (B) a heightfield."""
    mask = below_heightfield(P, cut_type, params, axis)
    return P[mask], P[~mask]


def draw_cut_params(cut_type, rng, P, axis):
    """Random heightfield parameters with the offset placed inside ``P``."""
    s = np.asarray(P, dtype=np.float64) @ _unit(axis)
    params = {"c": float(s.mean() + rng.uniform(-0.5, 0.5) * s.std())}
    if cut_type == "sine":
        params.update(a=float(rng.uniform(0.05, 0.15)), omega=float(rng.uniform(2.0, 6.0)), phi=float(rng.uniform(0, 2 * np.pi)))
    elif cut_type == "parabolic":
        params.update(a=float(rng.uniform(-0.4, 0.4)))
    elif cut_type == "square":
        params.update(a=float(rng.uniform(0.05, 0.15)), omega=float(rng.uniform(2.0, 5.0)))
    elif cut_type != "planar":
        raise ConfigError(f"unknown cut type {cut_type!r}")
    return params


def random_cut(P, idx, cut_type, rng, axis, n_min):
    """Cut the points ``P[idx]``; retries parameters until both sides keep ``n_min``."""
    for _ in range(MAX_CUT_RETRIES):
        params = draw_cut_params(cut_type, rng, P[idx], axis)
        mask = below_heightfield(P[idx], cut_type, params, axis)
        if n_min <= mask.sum() <= len(idx) - n_min:
            return idx[mask], idx[~mask]
    raise GenerationError(f"{cut_type} cut left fewer than {n_min} points on one side after {MAX_CUT_RETRIES} tries")


def recursive_multicut(P, N, rng, cut_type="planar", axis=DEFAULT_CUT_AXIS, n_min=64):
    """Cut ``P`` into ``N`` parts by repeatedly splitting the largest part.

    The first cut uses ``axis``; later cuts use random axes. Returns index
    arrays into ``P``.
    """
    if not 2 <= N <= 8:
        raise ConfigError(f"number of parts must be in [2, 8], got {N}")
    parts = [np.arange(len(P))]
    cut_axis = _unit(axis) if axis is not None else _random_unit(rng, 1)[0]
    while len(parts) < N:
        largest = max(range(len(parts)), key=lambda i: len(parts[i]))
        a, b = random_cut(P, parts.pop(largest), cut_type, rng, cut_axis, n_min)
        parts += [a, b]
        cut_axis = _random_unit(rng, 1)[0]
    return parts


@dataclass
class AssemblySample:
    canonical_whole: np.ndarray  # (m, 3) float32
    parts: list  # N arrays (n, 3) float32, perturbed
    rotations: np.ndarray  # (N, 3, 3) ground truth
    translations: np.ndarray  # (N, 3) canonical centroids
    centroids: np.ndarray  # (N, 3) perturbed centroids before resampling
    cut_type: str
    shape_type: str
    part_indices: list | None = field(default=None, repr=False, compare=False)

    @property
    def num_parts(self):
        return len(self.parts)

    def gt_poses(self):
        return [Pose(R, T) for R, T in zip(self.rotations, self.translations)]

    def reassembled(self):
        """Parts moved back by their ground-truth poses (float64)."""
        return [
            (np.asarray(p, np.float64) - c) @ R + T
            for p, R, T, c in zip(self.parts, self.rotations, self.translations, self.centroids)
        ]


def perturb(whole, part_indices, rng, n=512, translation_range=0.5, rotate=True):
    """Randomly re-pose canonical parts and record the inverse as labels.

    Each part is rotated about its canonical centroid ``c`` by a Haar-random
    ``Q``, shifted by ``delta`` uniform in ``[-t, t]^3`` and resampled to
    ``n`` points with replacement. Labels: ``R = Q.T``, ``T = c``, stored
    centroid ``c + delta``.
    """
    parts, rots, trans, cents = [], [], [], []
    for idx in part_indices:
        canon = whole[idx].astype(np.float64)
        c = canon.mean(axis=0)
        Q = random_rotation_uniform(rng) if rotate else np.eye(3)
        delta = rng.uniform(-translation_range, translation_range, 3)
        moved = (canon - c) @ Q + c + delta
        pick = rng.integers(0, len(moved), size=n)
        parts.append(moved[pick].astype(np.float32))
        rots.append(Q.T)
        trans.append(c)
        cents.append(c + delta)
    return parts, np.array(rots), np.array(trans), np.array(cents)


@dataclass
class DataConfig:
    num_samples: int = 2000
    seed: int = 0
    min_parts: int = 2
    max_parts: int = 2
    shapes: Sequence[str] = ("sphere", "box")
    cut_types: Sequence[str] = ("planar",)
    whole_points: int = 1024
    part_points: int = 512
    min_part_points: int = 64
    translation_range: float = 0.5
    cut_axis: Sequence[float] | None = DEFAULT_CUT_AXIS

    def validate(self):
        if self.num_samples < 1:
            raise ConfigError("num_samples must be >= 1")
        if not 2 <= self.min_parts <= self.max_parts <= 8:
            raise ConfigError(f"part range [{self.min_parts}, {self.max_parts}] outside [2, 8]")
        for s in self.shapes:
            if s not in SHAPES:
                raise ConfigError(f"unknown shape {s!r}")
        for c in self.cut_types:
            if c not in CUT_TYPES:
                raise ConfigError(f"unknown cut type {c!r}")
        return self


def generate_sample(cfg: DataConfig, index: int) -> AssemblySample:
    """Sample ``index`` of a dataset; depends only on ``(cfg, index)``."""
    rng = np.random.default_rng([cfg.seed, index])
    shape = str(cfg.shapes[rng.integers(len(cfg.shapes))])
    cut = str(cfg.cut_types[rng.integers(len(cfg.cut_types))])
    N = int(rng.integers(cfg.min_parts, cfg.max_parts + 1))
    whole = sample_shape(shape, cfg.whole_points, rng).astype(np.float32)
    try:
        idx = recursive_multicut(whole, N, rng, cut, cfg.cut_axis, cfg.min_part_points)
    except GenerationError as exc:
        raise GenerationError(f"seed {cfg.seed}, sample {index}: {exc}") from exc
    parts, rots, trans, cents = perturb(whole, idx, rng, cfg.part_points, cfg.translation_range)
    return AssemblySample(whole, parts, rots, trans, cents, cut, shape, part_indices=idx)


def generate_dataset(cfg: DataConfig) -> list[AssemblySample]:
    cfg.validate()
    return [generate_sample(cfg, i) for i in range(cfg.num_samples)]


# -- serialization -----------------------------------------------------------


def write_xyz(path, points):
    pts = np.asarray(points, dtype=np.float32)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.writelines(f"{x:.9g} {y:.9g} {z:.9g}\n" for x, y, z in pts.tolist())


def read_xyz(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    rows, offset = [], 0
    for line in raw.splitlines(keepends=True):
        text = line.strip()
        if text:
            fields = text.split()
            if len(fields) != 3:
                raise DatasetParseError(path, offset, f"expected 3 values, got {len(fields)}")
            try:
                rows.append([float(v) for v in fields])
            except ValueError as exc:
                raise DatasetParseError(path, offset, f"not a number: {text[:40]!r}") from exc
        offset += len(line)
    return np.array(rows, dtype=np.float32).reshape(-1, 3)


def sample_labels(sample: AssemblySample) -> dict:
    return {
        "shape_type": sample.shape_type,
        "cut_type": sample.cut_type,
        "parts": [
            {"rotation": R.reshape(-1).tolist(), "translation": T.tolist(), "centroid": c.tolist()}
            for R, T, c in zip(sample.rotations, sample.translations, sample.centroids)
        ],
    }


def write_sample(directory, sample: AssemblySample):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_xyz(d / "whole.xyz", sample.canonical_whole)
    for i, p in enumerate(sample.parts):
        write_xyz(d / f"part_{i}.xyz", p)
    (d / "labels.json").write_text(json.dumps(sample_labels(sample), indent=1))
    return ["whole.xyz", *(f"part_{i}.xyz" for i in range(sample.num_parts)), "labels.json"]


def read_sample(directory) -> AssemblySample:
    d = Path(directory)
    path = d / "labels.json"
    try:
        labels = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetParseError(path, exc.pos, exc.msg) from exc
    info = labels["parts"]
    parts = [read_xyz(d / f"part_{i}.xyz") for i in range(len(info))]
    return AssemblySample(
        canonical_whole=read_xyz(d / "whole.xyz"),
        parts=parts,
        rotations=np.array([p["rotation"] for p in info], dtype=np.float64).reshape(-1, 3, 3),
        translations=np.array([p["translation"] for p in info], dtype=np.float64).reshape(-1, 3),
        centroids=np.array([p["centroid"] for p in info], dtype=np.float64).reshape(-1, 3),
        cut_type=labels["cut_type"],
        shape_type=labels["shape_type"],
    )


def write_dataset(path, samples: Sequence[AssemblySample], cfg: DataConfig | None = None) -> dict:
    """Write samples plus ``manifest.json``; returns the manifest."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    files = {}
    for i, s in enumerate(samples):
        name = f"sample_{i:06d}"
        files[name] = write_sample(root / name, s)
    manifest = {
        "count": len(samples),
        "seed": cfg.seed if cfg else None,
        "parameters": asdict(cfg) if cfg else {},
        "samples": files,
    }
    manifest["parameters"] = json.loads(json.dumps(manifest["parameters"]))
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def read_manifest(path) -> dict:
    mpath = Path(path) / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no manifest.json in {path}")
    try:
        return json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetParseError(mpath, exc.pos, exc.msg) from exc


def read_dataset(path) -> tuple[dict, list[AssemblySample]]:
    manifest = read_manifest(path)
    root = Path(path)
    samples = [read_sample(root / name) for name in sorted(manifest["samples"])]
    if len(samples) != manifest["count"]:
        raise DatasetParseError(root / "manifest.json", 0, f"manifest lists {manifest['count']} samples, found {len(samples)}")
    return manifest, samples


def dataset_config_from_manifest(manifest) -> DataConfig:
    params = dict(manifest.get("parameters") or {})
    return DataConfig(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in params.items()})


def list_dataset_files(path):
    root = Path(path)
    return sorted(p.relative_to(root).as_posix() for p in root.rglob("*") if p.is_file())
