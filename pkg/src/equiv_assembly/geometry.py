"""Rotation and distance helpers shared by data generation, losses and metrics.

Point clouds are row-vector arrays of shape ``(n, 3)`` and poses act by right
multiplication: a part ``P`` with centroid ``c`` is re-posed as
``(P - c) @ R + T``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ContractError

UNIFORM_MEAN_GEODESIC = np.pi / 2 + 2 / np.pi  # E[angle] for Haar-random rotations


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)], -1),
            np.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)], -1),
            np.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)], -1),
        ],
        -2,
    )


def random_rotation_uniform(rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Haar-uniform rotation(s) from a normalized Gaussian quaternion."""
    shape = (4,) if size is None else (size, 4)
    return quaternion_to_matrix(rng.standard_normal(shape))


def rot_x(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def rot_y(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def rot_z(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def is_rotation(R, atol: float = 1e-5) -> bool:
    R = np.asarray(R, dtype=np.float64)
    eye = np.broadcast_to(np.eye(3), R.shape)
    return bool(
        np.allclose(np.swapaxes(R, -1, -2) @ R, eye, atol=atol)
        and np.allclose(np.linalg.det(R), 1.0, atol=atol)
    )


def geodesic(Ra, Rb) -> np.ndarray:
    """Angle in radians of ``Ra @ Rb.T``; broadcasts over leading dims.

    Equal to ``arccos((tr(Ra Rb^T) - 1) / 2)``, evaluated as ``atan2`` of the
    sine (from the skew part) and the cosine so small angles keep full
    precision instead of the ~1e-8 floor of arccos near 1.
    """
    Ra = np.asarray(Ra, dtype=np.float64)
    Rb = np.asarray(Rb, dtype=np.float64)
    M = Ra @ np.swapaxes(Rb, -1, -2)
    cos = (np.trace(M, axis1=-2, axis2=-1) - 1.0) / 2.0
    sin = np.linalg.norm(M - np.swapaxes(M, -1, -2), axis=(-2, -1)) / (2.0 * np.sqrt(2.0))
    return np.arctan2(sin, np.clip(cos, -1.0, 1.0))


def matrix_from_euler(angles_deg) -> np.ndarray:
    """Intrinsic X-Y-Z: ``R = Rx(rx) @ Ry(ry) @ Rz(rz)``."""
    a = np.deg2rad(np.asarray(angles_deg, dtype=np.float64))
    cx, cy, cz = np.cos(a[..., 0]), np.cos(a[..., 1]), np.cos(a[..., 2])
    sx, sy, sz = np.sin(a[..., 0]), np.sin(a[..., 1]), np.sin(a[..., 2])
    return np.stack(
        [
            np.stack([cy * cz, -cy * sz, sy], -1),
            np.stack([cx * sz + sx * sy * cz, cx * cz - sx * sy * sz, -sx * cy], -1),
            np.stack([sx * sz - cx * sy * cz, sx * cz + cx * sy * sz, cx * cy], -1),
        ],
        -2,
    )


def euler_from_matrix(R, gimbal_tol: float = 1e-6) -> np.ndarray:
    """Intrinsic X-Y-Z angles in degrees, each wrapped to (-180, 180].

    At gimbal lock (|ry| = 90 deg) the decomposition is not unique and rz is
    set to zero.
    """
    R = np.asarray(R, dtype=np.float64)
    sy = np.clip(R[..., 0, 2], -1.0, 1.0)
    ry = np.arcsin(sy)
    locked = np.abs(sy) > 1.0 - gimbal_tol
    rx = np.where(locked, np.arctan2(R[..., 1, 0] * np.sign(sy), R[..., 1, 1]), np.arctan2(-R[..., 1, 2], R[..., 2, 2]))
    rz = np.where(locked, 0.0, np.arctan2(-R[..., 0, 1], R[..., 0, 0]))
    out = np.rad2deg(np.stack([rx, ry, rz], -1))
    return np.where(out <= -180.0, out + 360.0, out)


def wrap_degrees(delta):
    """Map angle differences to (-180, 180]."""
    delta = np.asarray(delta, dtype=np.float64)
    out = np.mod(delta + 180.0, 360.0) - 180.0
    return np.where(out == -180.0, 180.0, out)


def pairwise_sq_dists(P: torch.Tensor, Q: torch.Tensor) -> torch.Tensor:
    """``(..., n, m)`` squared distances by explicit differences."""
    diff = P.unsqueeze(-2) - Q.unsqueeze(-3)
    return (diff * diff).sum(-1)


def chamfer(P: torch.Tensor, Q: torch.Tensor) -> torch.Tensor:
    """Squared-distance chamfer with a mean over each direction.

    Accepts leading batch dimensions; returns one value per cloud pair.
    """
    if P.shape[-2] == 0 or Q.shape[-2] == 0:
        raise ContractError("chamfer of an empty point cloud")
    d = pairwise_sq_dists(P, Q)
    return d.min(dim=-1).values.mean(-1) + d.min(dim=-2).values.mean(-1)


def knn_indices(x: torch.Tensor, k: int) -> torch.Tensor:
    """Indices of the ``k`` nearest other points for every point.

    ``x`` is ``(..., n, d)``. Distances are evaluated in float64 and ties go
    to the lowest index. Returns ``(..., n, k)`` int64.
    """
    n = x.shape[-2]
    if k >= n:
        raise ContractError(f"k={k} needs at least k+1 points, got {n}")
    with torch.no_grad():
        xd = x.detach().to(torch.float64)
        sq = (xd * xd).sum(-1)
        d = sq.unsqueeze(-1) + sq.unsqueeze(-2) - 2.0 * (xd @ xd.transpose(-1, -2))
        d.diagonal(dim1=-2, dim2=-1).fill_(float("inf"))
        # k-th smallest distance, then keep everything closer plus the
        # lowest-index points at exactly that distance
        kth = torch.topk(d, k, dim=-1, largest=False).values[..., -1:]
        closer = d < kth
        tied = d == kth
        need = k - closer.sum(-1, keepdim=True)
        keep = closer | (tied & (torch.cumsum(tied, dim=-1) <= need))
        idx = keep.nonzero()[:, -1].reshape(*d.shape[:-1], k)  # ascending index
        order = torch.sort(torch.gather(d, -1, idx), dim=-1, stable=True).indices
        return torch.gather(idx, -1, order)


def apply_pose(P, R, T, centroid):
    """``(P - centroid) @ R + T``; works on numpy arrays and torch tensors."""
    return (P - centroid) @ R + T


def inverse_pose(R, T, centroid):
    """Pose that undoes ``apply_pose(., R, T, centroid)``.

    Returned as ``(R_inv, T_inv, centroid_inv)`` for the same call shape.
    """
    return R.T, centroid, T


@dataclass
class Pose:
    """Rotation ``R`` (3x3, acting on row vectors) and translation ``T``."""

    R: np.ndarray
    T: np.ndarray

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.T = np.asarray(self.T, dtype=np.float64).reshape(3)

    def is_valid(self, atol: float = 1e-5) -> bool:
        return is_rotation(self.R, atol)
