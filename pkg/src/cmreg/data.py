"""Cloud ingestion, synthetic shapes, and the registration pair protocol.

Registration pairs are manufactured from a base cloud by cropping to a
random half-space, adding clipped Gaussian noise, and displacing the source
by the inverse of a uniformly sampled rigid transform, so that the stored
ground truth exactly aligns the uncorrupted geometry.  Everything is a pure
function of (inputs, seed).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .geometry import RigidTransform, apply_transform, euler_to_matrix, invert

REGIMES = ("clean", "partial", "noisy", "low_overlap")


class ParseError(ValueError):
    def __init__(self, message: str, line: int = 0):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


@dataclass(frozen=True)
class RegistrationSample:
    source: np.ndarray  # N x 3
    target: np.ndarray  # M x 3
    gt: RigidTransform  # maps source onto the target frame
    regime: str
    seed: int


@dataclass(frozen=True)
class ProtocolConfig:
    rot_range_deg: float = 45.0
    trans_range: float = 0.5
    keep_fraction: float = 0.75
    noise_sigma: float = 0.01
    noise_clip: float = 0.05


def normalize_cloud(points: np.ndarray) -> np.ndarray:
    """Center at the centroid and scale so the farthest point has radius 1."""
    points = np.asarray(points, dtype=np.float64)
    centered = points - points.mean(axis=0)
    r = np.linalg.norm(centered, axis=1).max()
    if r > 0:
        centered = centered / r
    return centered


# -- file loading -------------------------------------------------------


def _sample_mesh_surface(vertices: np.ndarray, faces: np.ndarray,
                         n_points: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform area-weighted sampling over triangles."""
    a, b, c = vertices[faces[:, 0]], vertices[faces[:, 1]], vertices[faces[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    total = areas.sum()
    if total <= 0:
        raise ParseError("mesh has zero total area")
    face_idx = rng.choice(len(faces), size=n_points, p=areas / total)
    u = rng.random(n_points)
    v = rng.random(n_points)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    fa, fb, fc = a[face_idx], b[face_idx], c[face_idx]
    return fa + u[:, None] * (fb - fa) + v[:, None] * (fc - fa)


def _parse_off(lines: list) -> tuple:
    rows = [(i + 1, ln.strip()) for i, ln in enumerate(lines)]
    rows = [(n, ln) for n, ln in rows if ln and not ln.startswith("#")]
    if not rows:
        raise ParseError("empty file")
    pos = 0
    header_line, header = rows[0]
    if header.startswith("OFF"):
        rest = header[3:].strip()
        if rest:
            counts = rest.split()
        else:
            pos = 1
            if pos >= len(rows):
                raise ParseError("missing count line", header_line)
            counts = rows[pos][1].split()
    else:
        raise ParseError("missing OFF header", header_line)
    if len(counts) < 2:
        raise ParseError("malformed count line", rows[pos][0])
    n_verts, n_faces = int(counts[0]), int(counts[1])
    if n_verts < 3:
        raise ParseError("fewer than 3 vertices", rows[pos][0])
    body = rows[pos + 1:]
    if len(body) < n_verts + n_faces:
        raise ParseError("truncated OFF body", body[-1][0] if body else rows[pos][0])
    vert_rows = []
    for lineno, ln in body[:n_verts]:
        try:
            vert_rows.append([float(x) for x in ln.split()[:3]])
        except ValueError:
            raise ParseError(f"non-numeric vertex in {ln!r}", lineno)
    verts = np.array(vert_rows)
    faces = []
    for lineno, ln in body[n_verts:n_verts + n_faces]:
        parts = ln.split()
        if int(parts[0]) != 3:
            raise ParseError(f"non-triangle face with {parts[0]} vertices", lineno)
        faces.append([int(p) for p in parts[1:4]])
    return verts, np.array(faces, dtype=np.int64)


def _parse_ply(lines: list) -> tuple:
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing ply header", 1)
    n_verts = n_faces = 0
    body_start = None
    for i, ln in enumerate(lines[1:], start=2):
        tok = ln.split()
        if not tok:
            continue
        if tok[0] == "format" and tok[1] != "ascii":
            raise ParseError("only ascii PLY is supported", i)
        if tok[0] == "element" and tok[1] == "vertex":
            n_verts = int(tok[2])
        if tok[0] == "element" and tok[1] == "face":
            n_faces = int(tok[2])
        if tok[0] == "end_header":
            body_start = i
            break
    if body_start is None:
        raise ParseError("missing end_header")
    if n_verts < 3:
        raise ParseError("fewer than 3 vertices", body_start)
    body = [ln.split() for ln in lines[body_start:] if ln.strip()]
    if len(body) < n_verts + n_faces:
        raise ParseError("truncated PLY body", body_start)
    verts = np.array([[float(x) for x in row[:3]] for row in body[:n_verts]])
    faces = []
    for j, row in enumerate(body[n_verts:n_verts + n_faces]):
        if int(row[0]) != 3:
            raise ParseError(f"non-triangle face with {row[0]} vertices", body_start + n_verts + j + 1)
        faces.append([int(p) for p in row[1:4]])
    return verts, np.array(faces, dtype=np.int64)


def load_cloud(path, fmt: str = None, n_points: int = 128, seed: int = 0) -> np.ndarray:
    """Load OFF / ASCII-PLY / XYZ, resample to n_points, normalize.

    Meshes are sampled uniformly by triangle area; point files are randomly
    subsampled or padded by resampling.
    """
    if fmt is None:
        fmt = os.path.splitext(str(path))[1].lstrip(".").upper() or "XYZ"
    fmt = fmt.upper()
    with open(path) as fh:
        lines = fh.read().splitlines()
    rng = np.random.default_rng(seed)
    if fmt == "OFF":
        verts, faces = _parse_off(lines)
        points = _sample_mesh_surface(verts, faces, n_points, rng) if len(faces) else verts
    elif fmt == "PLY":
        verts, faces = _parse_ply(lines)
        points = _sample_mesh_surface(verts, faces, n_points, rng) if len(faces) else verts
    elif fmt == "XYZ":
        rows = []
        for lineno, ln in enumerate(lines, start=1):
            ln = ln.strip()
            if not ln or ln.startswith("#"):
                continue
            parts = ln.split()
            if len(parts) < 3:
                raise ParseError(f"expected 3 coordinates, got {len(parts)}", lineno)
            try:
                rows.append([float(x) for x in parts[:3]])
            except ValueError:
                raise ParseError(f"non-numeric coordinate in {ln!r}", lineno)
        if not rows:
            raise ParseError("empty file")
        points = np.array(rows)
    else:
        raise ParseError(f"unknown format {fmt!r}")
    if len(points) != n_points:
        idx = rng.choice(len(points), size=n_points, replace=len(points) < n_points)
        points = points[idx]
    return normalize_cloud(points)


# -- synthetic shapes ---------------------------------------------------


def synth_shape(kind: str, n_points: int = 128, seed: int = 0) -> np.ndarray:
    """Deterministic surface sampling of a primitive, normalized to unit sphere."""
    if n_points < 16:
        raise ValueError("n_points must be >= 16")
    rng = np.random.default_rng(seed)
    if kind == "sphere":
        v = rng.normal(size=(n_points, 3))
        points = v / np.linalg.norm(v, axis=1, keepdims=True)
    elif kind == "cube":
        face = rng.integers(0, 6, size=n_points)
        uv = rng.uniform(-1, 1, size=(n_points, 2))
        points = np.zeros((n_points, 3))
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        for i in range(n_points):
            others = [a for a in range(3) if a != axis[i]]
            points[i, axis[i]] = sign[i]
            points[i, others[0]] = uv[i, 0]
            points[i, others[1]] = uv[i, 1]
    elif kind == "torus":
        theta = rng.uniform(0, 2 * math.pi, n_points)
        phi = rng.uniform(0, 2 * math.pi, n_points)
        R0, r0 = 1.0, 0.35
        points = np.stack([(R0 + r0 * np.cos(phi)) * np.cos(theta),
                           r0 * np.sin(phi),
                           (R0 + r0 * np.cos(phi)) * np.sin(theta)], axis=1)
    elif kind == "gaussian_blobs":
        centers = rng.uniform(-1, 1, size=(4, 3))
        which = rng.integers(0, 4, size=n_points)
        points = centers[which] + 0.15 * rng.normal(size=(n_points, 3))
    else:
        raise ValueError(f"unknown shape kind {kind!r}")
    return normalize_cloud(points)


SHAPE_KINDS = ("sphere", "cube", "torus", "gaussian_blobs")


def shape_bank(n_shapes: int = 8, n_points: int = 128, seed: int = 0) -> list:
    """A small fixed roster of synthetic shapes standing in for a dataset."""
    return [synth_shape(SHAPE_KINDS[i % len(SHAPE_KINDS)], n_points, seed=seed * 1000 + i)
            for i in range(n_shapes)]


# -- perturbation protocol ----------------------------------------------


def sample_rigid(seed: int, rot_range_deg: float = 45.0, trans_range: float = 0.5) -> RigidTransform:
    """Uniform Euler angles in [0, rot_range] per axis, translation in the box."""
    if rot_range_deg < 0 or trans_range < 0:
        raise ValueError("ranges must be nonnegative")
    rng = np.random.default_rng(seed)
    angles = rng.uniform(0.0, rot_range_deg, size=3)
    t = rng.uniform(-trans_range, trans_range, size=3)
    return RigidTransform(euler_to_matrix(angles), t)


def partial_crop(points: np.ndarray, keep_fraction: float, direction_seed: int) -> np.ndarray:
    """Keep the ceil(f*N) points farthest along a random unit direction."""
    if not 0 < keep_fraction <= 1:
        raise ValueError("keep_fraction must be in (0, 1]")
    points = np.asarray(points, dtype=np.float64)
    if keep_fraction == 1.0:
        return points.copy()
    rng = np.random.default_rng(direction_seed)
    v = rng.normal(size=3)
    v /= np.linalg.norm(v)
    n_keep = math.ceil(keep_fraction * len(points))
    proj = points @ v
    order = np.argsort(-proj, kind="stable")
    keep = np.sort(order[:n_keep])
    return points[keep]


def add_noise(points: np.ndarray, sigma: float, clip: float, seed: int) -> np.ndarray:
    """Add per-coordinate Gaussian(0, sigma^2) noise clipped to [-clip, clip]."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if clip <= 0:
        raise ValueError("clip must be positive")
    points = np.asarray(points, dtype=np.float64)
    if sigma == 0:
        return points.copy()
    rng = np.random.default_rng(seed)
    noise = np.clip(rng.normal(0.0, sigma, size=points.shape), -clip, clip)
    return points + noise


def make_sample(base_cloud: np.ndarray, regime: str, seed: int,
                cfg: ProtocolConfig = ProtocolConfig()) -> RegistrationSample:
    """Build a registration pair with exact ground truth from one base cloud.

    Target = (noise o crop)(base); source = the same recipe with independent
    sub-seeds, displaced by gt^-1 so that applying gt registers it back onto
    the target's frame.  Regimes: clean (no corruption), partial (shared
    crop direction), noisy (crop + noise), low_overlap (independent crop
    directions + noise).
    """
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}")
    base = np.asarray(base_cloud, dtype=np.float64)
    gt = sample_rigid(seed * 7 + 1, cfg.rot_range_deg, cfg.trans_range)
    if regime == "clean":
        src_geom, tgt = base.copy(), base.copy()
    else:
        shared_dir = seed * 7 + 2
        src_dir = shared_dir if regime != "low_overlap" else seed * 7 + 3
        tgt = partial_crop(base, cfg.keep_fraction, shared_dir)
        src_geom = partial_crop(base, cfg.keep_fraction, src_dir)
        if regime in ("noisy", "low_overlap"):
            tgt = add_noise(tgt, cfg.noise_sigma, cfg.noise_clip, seed * 7 + 4)
            src_geom = add_noise(src_geom, cfg.noise_sigma, cfg.noise_clip, seed * 7 + 5)
    source = apply_transform(invert(gt), src_geom)
    return RegistrationSample(source=source, target=tgt, gt=gt, regime=regime, seed=seed)


# -- serialization ------------------------------------------------------


def save_sample(sample: RegistrationSample, out_dir) -> None:
    """Write a sample as XYZ files plus a JSON ground-truth sidecar."""
    os.makedirs(out_dir, exist_ok=True)
    for name, cloud in (("source", sample.source), ("target", sample.target)):
        with open(os.path.join(out_dir, f"{name}.xyz"), "w") as fh:
            for p in cloud:
                fh.write(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r}\n")
    sidecar = {
        "rotation": [float(x) for x in sample.gt.rotation.reshape(-1)],
        "translation": [float(x) for x in sample.gt.translation],
        "regime": sample.regime,
        "seed": sample.seed,
    }
    with open(os.path.join(out_dir, "gt.json"), "w") as fh:
        json.dump(sidecar, fh, indent=2)


def load_sample(in_dir) -> RegistrationSample:
    clouds = {}
    for name in ("source", "target"):
        with open(os.path.join(in_dir, f"{name}.xyz")) as fh:
            clouds[name] = np.array([[float(x) for x in ln.split()] for ln in fh if ln.strip()])
    with open(os.path.join(in_dir, "gt.json")) as fh:
        sidecar = json.load(fh)
    gt = RigidTransform(np.array(sidecar["rotation"]).reshape(3, 3),
                        np.array(sidecar["translation"]))
    return RegistrationSample(source=clouds["source"], target=clouds["target"],
                              gt=gt, regime=sidecar["regime"], seed=sidecar["seed"])
