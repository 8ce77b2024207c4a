"""Gaussian and camera primitives.

Axis convention (used everywhere in the package):

* World frame is right-handed with **+z up**.  An orbit camera at azimuth
  ``a`` and elevation ``e`` sits at ``r * (cos e sin a, -cos e cos a, sin e)``,
  so azimuth 0 / elevation 0 looks along +y from ``(0, -r, 0)`` and
  elevation 90 is directly above the origin.  Azimuth increases
  counter-clockwise seen from above.
* Camera frame follows the pinhole/OpenCV layout: +x right, +y down,
  +z forward (toward the origin for orbit cameras).
* Pixel ``(row i, col j)`` covers ``[j, j+1) x [i, i+1)``; its center is at
  ``(j + 0.5, i + 0.5)``.  The principal point is the image center.

All math runs in float64.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from typing import NamedTuple

import numpy as np

from .errors import ContractViolation, DegenerateRotationError

PARAM_NAMES = ("positions", "log_scales", "rotations", "colors_dc", "opacity_logits")
NEAR_PLANE = 0.01
COV2D_DILATION = 0.3


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass(eq=False)
class GaussianCloud:
    """A set of N anisotropic 3D Gaussians with degree-0 color.

    All parameters are stored pre-activation: scales as logs, opacity as a
    logit, rotation as an unnormalized ``(w, x, y, z)`` quaternion.
    """

    positions: np.ndarray  # (N, 3)
    log_scales: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4)
    colors_dc: np.ndarray  # (N, 3)
    opacity_logits: np.ndarray  # (N,)

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.log_scales = np.ascontiguousarray(self.log_scales, dtype=np.float64).reshape(-1, 3)
        self.rotations = np.ascontiguousarray(self.rotations, dtype=np.float64).reshape(-1, 4)
        self.colors_dc = np.ascontiguousarray(self.colors_dc, dtype=np.float64).reshape(-1, 3)
        self.opacity_logits = np.ascontiguousarray(self.opacity_logits, dtype=np.float64).reshape(-1)
        n = len(self.positions)
        for f in fields(self):
            if len(getattr(self, f.name)) != n:
                raise ContractViolation(
                    f"field {f.name} has {len(getattr(self, f.name))} rows, expected {n}"
                )

    def __len__(self) -> int:
        return len(self.positions)

    @classmethod
    def empty(cls) -> GaussianCloud:
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0))

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def unit_rotations(self) -> np.ndarray:
        norms = np.linalg.norm(self.rotations, axis=1, keepdims=True)
        return self.rotations / norms

    def params(self) -> dict[str, np.ndarray]:
        """Parameter arrays keyed by name (views, not copies)."""
        return {name: getattr(self, name) for name in PARAM_NAMES}

    @classmethod
    def from_params(cls, params: dict[str, np.ndarray]) -> GaussianCloud:
        return cls(**{name: params[name] for name in PARAM_NAMES})

    def copy(self) -> GaussianCloud:
        return GaussianCloud(**{k: v.copy() for k, v in self.params().items()})

    def subset(self, index) -> GaussianCloud:
        return GaussianCloud(**{k: v[index] for k, v in self.params().items()})

    def concat(self, other: GaussianCloud) -> GaussianCloud:
        return GaussianCloud(
            **{k: np.concatenate([v, getattr(other, k)]) for k, v in self.params().items()}
        )

    def equals(self, other: GaussianCloud) -> bool:
        """Bitwise equality of every parameter array."""
        return len(self) == len(other) and all(
            np.array_equal(v, getattr(other, k)) for k, v in self.params().items()
        )


@dataclass(frozen=True)
class Camera:
    """Orbit camera looking at the world origin. Angles in degrees."""

    azimuth: float
    elevation: float
    radius: float = 4.0
    fov_y: float = 33.8
    width: int = 64
    height: int = 64

    def __post_init__(self):
        if not 0.0 < self.fov_y < 180.0:
            raise ContractViolation(f"fov_y must be in (0, 180), got {self.fov_y}")
        if self.width < 1 or self.height < 1:
            raise ContractViolation(f"image size must be >= 1, got {self.width}x{self.height}")
        if not self.radius > 0.0:
            raise ContractViolation(f"radius must be positive, got {self.radius}")

    @property
    def focal(self) -> float:
        return self.height / (2.0 * math.tan(math.radians(self.fov_y) / 2.0))

    @property
    def center(self) -> np.ndarray:
        a = math.radians(self.azimuth)
        e = math.radians(self.elevation)
        return self.radius * np.array(
            [math.cos(e) * math.sin(a), -math.cos(e) * math.cos(a), math.sin(e)]
        )

    def resized(self, width: int, height: int) -> Camera:
        return replace(self, width=int(width), height=int(height))

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


class Intrinsics(NamedTuple):
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int


def camera_matrices(cam: Camera) -> tuple[np.ndarray, Intrinsics]:
    """World-to-camera 4x4 transform and pinhole intrinsics."""
    a = math.radians(cam.azimuth)
    center = cam.center
    forward = -center / np.linalg.norm(center)
    # Right vector from azimuth alone stays defined at the poles.
    right = np.array([math.cos(a), math.sin(a), 0.0])
    down = np.cross(forward, right)
    down /= np.linalg.norm(down)
    rot = np.stack([right, down, forward])
    w2c = np.eye(4)
    w2c[:3, :3] = rot
    w2c[:3, 3] = -rot @ center
    f = cam.focal
    return w2c, Intrinsics(f, f, cam.width / 2.0, cam.height / 2.0, cam.width, cam.height)


def quat_to_rotation_batch(q: np.ndarray) -> np.ndarray:
    """(N, 4) quaternions ``(w, x, y, z)`` to (N, 3, 3) rotation matrices."""
    q = np.asarray(q, dtype=np.float64).reshape(-1, 4)
    norms = np.linalg.norm(q, axis=1)
    if np.any(norms <= 1e-12):
        raise DegenerateRotationError("quaternion norm <= 1e-12")
    w, x, y, z = (q / norms[:, None]).T
    rot = np.empty((len(q), 3, 3))
    rot[:, 0, 0] = 1 - 2 * (y * y + z * z)
    rot[:, 0, 1] = 2 * (x * y - w * z)
    rot[:, 0, 2] = 2 * (x * z + w * y)
    rot[:, 1, 0] = 2 * (x * y + w * z)
    rot[:, 1, 1] = 1 - 2 * (x * x + z * z)
    rot[:, 1, 2] = 2 * (y * z - w * x)
    rot[:, 2, 0] = 2 * (x * z - w * y)
    rot[:, 2, 1] = 2 * (y * z + w * x)
    rot[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return rot


def quat_to_rotation(q) -> np.ndarray:
    """Rotation matrix of a single quaternion ``(w, x, y, z)``.

    The quaternion is normalized first, so any positive multiple gives the
    same matrix.

    Raises:
        DegenerateRotationError: if ``|q| <= 1e-12``.
    """
    return quat_to_rotation_batch(np.asarray(q, dtype=np.float64).reshape(1, 4))[0]


def covariance_3d_batch(log_scales: np.ndarray, q: np.ndarray) -> np.ndarray:
    rot = quat_to_rotation_batch(q)
    m = rot * np.exp(np.asarray(log_scales, dtype=np.float64).reshape(-1, 3))[:, None, :]
    return m @ m.transpose(0, 2, 1)


def covariance_3d(log_scale, q) -> np.ndarray:
    """``R S S^T R^T`` for one Gaussian."""
    return covariance_3d_batch(np.reshape(log_scale, (1, 3)), np.reshape(q, (1, 4)))[0]


class ProjectedGaussian(NamedTuple):
    mean_2d: np.ndarray
    cov_2d: np.ndarray
    depth: float
    culled: bool


def project_batch(means: np.ndarray, cov3d: np.ndarray, cam: Camera,
                  dilation: float = COV2D_DILATION, near: float = NEAR_PLANE):
    """EWA projection of many Gaussians.

    Returns ``(mean_2d, cov_2d, depth, cam_points, jac, in_front)``; the
    Jacobian and camera-space points are reused by the backward pass.
    """
    w2c, K = camera_matrices(cam)
    rot = w2c[:3, :3]
    pts = np.asarray(means, dtype=np.float64).reshape(-1, 3) @ rot.T + w2c[:3, 3]
    x, y, z = pts.T
    in_front = z > near
    zs = np.where(in_front, z, 1.0)
    inv_z = 1.0 / zs
    mean_2d = np.stack([K.fx * x * inv_z + K.cx, K.fy * y * inv_z + K.cy], axis=1)
    jac = np.zeros((len(pts), 2, 3))
    jac[:, 0, 0] = K.fx * inv_z
    jac[:, 0, 2] = -K.fx * x * inv_z * inv_z
    jac[:, 1, 1] = K.fy * inv_z
    jac[:, 1, 2] = -K.fy * y * inv_z * inv_z
    m = jac @ rot
    cov_2d = m @ cov3d @ m.transpose(0, 2, 1)
    cov_2d = 0.5 * (cov_2d + cov_2d.transpose(0, 2, 1))
    cov_2d[:, 0, 0] += dilation
    cov_2d[:, 1, 1] += dilation
    return mean_2d, cov_2d, z, pts, jac, in_front


def project_gaussian(mean, cov3d, cam: Camera, dilation: float = COV2D_DILATION,
                     near: float = NEAR_PLANE) -> ProjectedGaussian:
    """Project one 3D Gaussian to pixel space.

    Points at depth <= ``near`` come back with ``culled=True`` rather than
    raising.
    """
    mean_2d, cov_2d, depth, _, _, in_front = project_batch(
        np.reshape(mean, (1, 3)), np.reshape(cov3d, (1, 3, 3)), cam, dilation, near
    )
    return ProjectedGaussian(mean_2d[0], cov_2d[0], float(depth[0]), not bool(in_front[0]))


def evaluate_gaussian_2d(x, mean_2d, cov_2d) -> float:
    """Unnormalized 2D Gaussian ``exp(-0.5 d^T cov^-1 d)``."""
    d = np.asarray(x, dtype=np.float64) - np.asarray(mean_2d, dtype=np.float64)
    return float(np.exp(-0.5 * d @ np.linalg.solve(np.asarray(cov_2d, dtype=np.float64), d)))
