"""Rigid-motion math, neighborhoods, overlap detection, pose solving, metrics.

All functions are pure and operate on plain numpy arrays.  Rotations use the
intrinsic Z-Y-X Euler convention in degrees throughout (yaw about z, then
pitch about the new y, then roll about the new x).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_ORTHO_TOL = 1e-9


class DegenerateGeometryError(ValueError):
    """Pose estimation input is rank deficient (e.g. collinear points)."""


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray  # 3x3, proper orthogonal
    translation: np.ndarray  # 3-vector

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {R.shape}")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9):
            raise ValueError("rotation is not orthogonal")
        if not math.isclose(float(np.linalg.det(R)), 1.0, abs_tol=1e-9):
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))


def apply_transform(tf: RigidTransform, points: np.ndarray) -> np.ndarray:
    """Map each point p to R p + t."""
    points = np.asarray(points, dtype=np.float64)
    return points @ tf.rotation.T + tf.translation


def compose(outer: RigidTransform, inner: RigidTransform) -> RigidTransform:
    """The transform applying `inner` first, then `outer`."""
    return RigidTransform(outer.rotation @ inner.rotation,
                          outer.rotation @ inner.translation + outer.translation)


def invert(tf: RigidTransform) -> RigidTransform:
    Rt = tf.rotation.T
    return RigidTransform(Rt, -Rt @ tf.translation)


# -- Euler conversions --------------------------------------------------


def euler_to_matrix(angles_deg) -> np.ndarray:
    """Intrinsic Z-Y-X rotation from (yaw_z, pitch_y, roll_x) in degrees."""
    z, y, x = np.radians(np.asarray(angles_deg, dtype=np.float64))
    cz, sz = math.cos(z), math.sin(z)
    cy, sy = math.cos(y), math.sin(y)
    cx, sx = math.cos(x), math.sin(x)
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    return Rz @ Ry @ Rx


def matrix_to_euler(R: np.ndarray) -> tuple:
    """Inverse of euler_to_matrix; returns (yaw_z, pitch_y, roll_x) degrees.

    At gimbal lock (|pitch| within 1e-6 deg of 90) the roll is fixed to 0 by
    convention and yaw absorbs the remaining rotation.
    """
    R = np.asarray(R, dtype=np.float64)
    sy = -R[2, 0]
    sy = min(1.0, max(-1.0, sy))
    pitch = math.asin(sy)
    if abs(abs(math.degrees(pitch)) - 90.0) < 1e-6:
        # gimbal lock: only yaw +/- roll is observable; put it all in yaw
        yaw = math.atan2(-R[0, 1], R[1, 1])
        roll = 0.0
    else:
        yaw = math.atan2(R[1, 0], R[0, 0])
        roll = math.atan2(R[2, 1], R[2, 2])
    return (math.degrees(yaw), math.degrees(pitch), math.degrees(roll))


# -- neighborhoods and overlap ------------------------------------------


def knn(points: np.ndarray, k: int) -> np.ndarray:
    """Exact k nearest neighbors (self excluded) per point, ascending distance.

    Ties break toward the lower index.  Brute force; K is desk scale.
    """
    points = np.asarray(points, dtype=np.float64)
    K = points.shape[0]
    if k >= K:
        raise ValueError(f"knn: k={k} must be < number of points {K}")
    sq = np.sum(points ** 2, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * points @ points.T
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")
    return order[:, :k]


@dataclass(frozen=True)
class OverlapMasks:
    source_overlap: np.ndarray  # bool, len N
    target_overlap: np.ndarray  # bool, len M
    threshold: float


def overlap_select(source: np.ndarray, target: np.ndarray,
                   gt: RigidTransform, threshold: float) -> OverlapMasks:
    """Mark points whose nearest cross-cloud distance under gt is < threshold."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    moved = apply_transform(gt, source)
    d = np.linalg.norm(moved[:, None, :] - np.asarray(target, dtype=np.float64)[None, :, :], axis=2)
    return OverlapMasks(source_overlap=d.min(axis=1) < threshold,
                        target_overlap=d.min(axis=0) < threshold,
                        threshold=float(threshold))


# -- pose estimation ----------------------------------------------------


def weighted_svd(src: np.ndarray, dst: np.ndarray, weights: np.ndarray) -> RigidTransform:
    """Weighted least-squares rigid transform mapping src onto dst (Kabsch).

    Minimizes sum_i w_i ||R src_i + t - dst_i||^2.  Weights are normalized
    internally; a reflection solution is corrected by flipping the last
    singular direction.  Collinear input raises DegenerateGeometryError.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError(f"weighted_svd: bad shapes {src.shape} vs {dst.shape}")
    if src.shape[0] < 3:
        raise ValueError("weighted_svd: need at least 3 correspondences")
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weighted_svd: weights must be nonnegative with positive sum")
    w = w / w.sum()
    cs = w @ src
    cd = w @ dst
    src_c = src - cs
    dst_c = dst - cd
    H = (w[:, None] * src_c).T @ dst_c
    U, S, Vt = np.linalg.svd(H)
    if S[1] < 1e-12 * max(S[0], 1e-300):
        raise DegenerateGeometryError("weighted_svd: correspondences are (near) collinear")
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d])
    R = Vt.T @ D @ U.T
    t = cd - R @ cs
    return RigidTransform(R, t)


@dataclass(frozen=True)
class ICPResult:
    transform: RigidTransform
    iterations: int
    converged: bool
    mse: float


def icp_baseline(source: np.ndarray, target: np.ndarray,
                 max_iter: int = 50, convergence_eps: float = 1e-10) -> ICPResult:
    """Classic nearest-neighbor ICP with an (unweighted) SVD step per iteration."""
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if source.size == 0 or target.size == 0:
        raise ValueError("icp_baseline: clouds must be non-empty")
    current = RigidTransform.identity()
    prev_mse = np.inf
    mse = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        moved = apply_transform(current, source)
        d = np.linalg.norm(moved[:, None, :] - target[None, :, :], axis=2)
        nn = d.argmin(axis=1)
        mse = float(np.mean(d[np.arange(len(moved)), nn] ** 2))
        if abs(prev_mse - mse) < convergence_eps:
            return ICPResult(current, it, True, mse)
        prev_mse = mse
        try:
            step = weighted_svd(moved, target[nn], np.ones(len(moved)))
        except DegenerateGeometryError:
            return ICPResult(current, it, False, mse)
        current = compose(step, current)
    return ICPResult(current, it, False, mse)


# -- error metrics ------------------------------------------------------


@dataclass(frozen=True)
class RegistrationError:
    rmse_rot_deg: float
    mae_rot_deg: float
    rmse_trans: float
    mae_trans: float


def _wrap_deg(d: np.ndarray) -> np.ndarray:
    return (d + 180.0) % 360.0 - 180.0


def rotation_axis_errors(predicted: RigidTransform, ground_truth: RigidTransform) -> np.ndarray:
    """Per-axis Euler angle differences (degrees), wrapped to [-180, 180)."""
    ep = np.array(matrix_to_euler(predicted.rotation))
    eg = np.array(matrix_to_euler(ground_truth.rotation))
    return _wrap_deg(ep - eg)


def registration_error(predicted: RigidTransform, ground_truth: RigidTransform) -> RegistrationError:
    """Anisotropic per-axis rotation/translation errors for a single pair."""
    return aggregate_errors([(predicted, ground_truth)])


def aggregate_errors(pairs) -> RegistrationError:
    """RMSE and MAE over all axes of all (predicted, ground_truth) pairs."""
    rot = np.concatenate([rotation_axis_errors(p, g) for p, g in pairs])
    trans = np.concatenate([p.translation - g.translation for p, g in pairs])
    return RegistrationError(
        rmse_rot_deg=float(np.sqrt(np.mean(rot ** 2))),
        mae_rot_deg=float(np.mean(np.abs(rot))),
        rmse_trans=float(np.sqrt(np.mean(trans ** 2))),
        mae_trans=float(np.mean(np.abs(trans))),
    )


def rotation_geodesic_deg(a: np.ndarray, b: np.ndarray) -> float:
    """Geodesic angle between two rotation matrices, in degrees.

    Uses 2 asin(|a-b|_F / (2 sqrt 2)), which stays accurate for tiny angles
    where the trace/acos form loses half the significant digits.
    """
    s = np.linalg.norm(a - b) / (2.0 * math.sqrt(2.0))
    return math.degrees(2.0 * math.asin(min(1.0, s)))
