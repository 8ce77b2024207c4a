"""Differentiable rasterization of a GaussianCloud.

Forward: cull, depth-sort (stable on point index), bin into 16x16 tiles and
alpha-blend front to back.  Backward: replay each pixel's blending from the
per-pixel stopping index and walk it back to front.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from . import _raster
from .core import COV2D_DILATION, NEAR_PLANE, Camera, GaussianCloud, camera_matrices
from .errors import ContractViolation, DegenerateRotationError

ALPHA_MAX = 0.99
T_MIN = 1e-4
TILE_SIZE = 16


@dataclass(eq=False)
class _Projection:
    """Per-Gaussian screen-space quantities shared by forward and backward."""

    valid: np.ndarray  # (N,) bool
    mean2d: np.ndarray  # (N, 2)
    cov2d: np.ndarray  # (N, 3) as (xx, xy, yy)
    conic: np.ndarray  # (N, 3)
    opac: np.ndarray  # (N,)
    feat: np.ndarray  # (N, C)
    cam_points: np.ndarray  # (N, 3)
    jac: np.ndarray  # (N, 2, 3)
    rotation: np.ndarray  # (N, 3, 3) world rotation of each Gaussian
    w2c: np.ndarray  # (4, 4)
    offsets: np.ndarray
    ids: np.ndarray
    tiles_x: int


@dataclass(eq=False)
class ContributionRecord:
    """Per-pixel ordered contributors in CSR form.

    Pixel ``p = i * width + j`` owns entries ``offsets[p]:offsets[p + 1]`` of
    ``gaussian``, ``alpha`` and ``transmittance`` (value before blending).
    """

    offsets: np.ndarray
    gaussian: np.ndarray
    alpha: np.ndarray
    transmittance: np.ndarray
    width: int

    def pixel(self, i: int, j: int) -> list[tuple[int, float, float]]:
        p = i * self.width + j
        sl = slice(self.offsets[p], self.offsets[p + 1])
        return list(zip(self.gaussian[sl].tolist(), self.alpha[sl].tolist(),
                        self.transmittance[sl].tolist()))


@dataclass(eq=False)
class RenderOutput:
    """Blended image plus what the backward pass needs to replay it.

    ``extra`` holds any feature channels beyond RGB (used by the
    learnable-variance ablation); ``None`` for plain renders.
    """

    image: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W)
    final_transmittance: np.ndarray  # (H, W)
    n_last: np.ndarray  # (H, W) one past the last tile-list entry visited
    extra: np.ndarray | None
    camera: Camera
    background: np.ndarray
    alpha_max: float
    t_min: float
    n_points: int
    _proj: _Projection | None

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @property
    def visible(self) -> np.ndarray:
        """Per-point mask: in front of the camera and overlapping the image."""
        if self._proj is None:
            return np.zeros(self.n_points, dtype=bool)
        return self._proj.valid

    def contribution_record(self) -> ContributionRecord:
        h, w = self.height, self.width
        if self._proj is None:
            return ContributionRecord(np.zeros(h * w + 1, dtype=np.int64), np.zeros(0, dtype=np.int64),
                                      np.zeros(0), np.zeros(0), w)
        p = self._proj
        offs, gid, alphas, trans = _raster.record(
            p.offsets, p.ids, p.mean2d, p.conic, p.opac, self.n_last, h, w, TILE_SIZE, p.tiles_x,
            self.alpha_max)
        return ContributionRecord(offs, gid, alphas, trans, w)


@dataclass(eq=False)
class ParamGradients:
    """Gradients with the same shapes as the GaussianCloud fields.

    ``means_2d`` is the gradient w.r.t. projected centers in normalized
    device units (pixels scaled by half the image size); densification
    statistics are accumulated from it.
    """

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    colors_dc: np.ndarray
    opacity_logits: np.ndarray
    means_2d: np.ndarray
    extra: np.ndarray | None = None

    def params(self) -> dict[str, np.ndarray]:
        return {
            "positions": self.positions,
            "log_scales": self.log_scales,
            "rotations": self.rotations,
            "colors_dc": self.colors_dc,
            "opacity_logits": self.opacity_logits,
        }

    @classmethod
    def zeros(cls, n: int, n_extra: int = 0) -> ParamGradients:
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)),
                   np.zeros(n), np.zeros((n, 2)), np.zeros((n, n_extra)) if n_extra else None)


def _features(cloud: GaussianCloud, extra_features) -> np.ndarray:
    feat = np.clip(cloud.colors_dc, 0.0, 1.0)
    if extra_features is not None:
        extra = np.asarray(extra_features, dtype=np.float64).reshape(len(cloud), -1)
        feat = np.concatenate([feat, extra], axis=1)
    return np.ascontiguousarray(feat)


def _project(cloud: GaussianCloud, cam: Camera, feat: np.ndarray) -> _Projection:
    w2c, k = camera_matrices(cam)
    if np.any(np.linalg.norm(cloud.rotations, axis=1) <= 1e-12):
        raise DegenerateRotationError("quaternion norm <= 1e-12")
    mean2d, cov2d, conic, depth, bounds, valid, rot, jac, pts = _raster.preprocess(
        cloud.positions, cloud.log_scales, cloud.rotations, w2c, k.fx, k.fy, k.cx, k.cy,
        cam.width, cam.height, NEAR_PLANE, COV2D_DILATION)
    vidx = np.flatnonzero(valid)
    order = vidx[np.argsort(depth[vidx], kind="stable")]
    tiles_x = -(-cam.width // TILE_SIZE)
    tiles_y = -(-cam.height // TILE_SIZE)
    offsets, ids = _raster.bin_tiles(order, bounds[:, 0], bounds[:, 1], bounds[:, 2], bounds[:, 3],
                                     TILE_SIZE, tiles_x, tiles_x * tiles_y)
    return _Projection(valid, mean2d, cov2d, conic, cloud.opacities, feat, pts, jac, rot, w2c,
                       offsets, ids, tiles_x)


def render(cloud: GaussianCloud, cam: Camera, background=(1.0, 1.0, 1.0), *,
           extra_features=None, extra_background=None, alpha_max: float = ALPHA_MAX,
           t_min: float = T_MIN) -> RenderOutput:
    """Alpha-blend ``cloud`` as seen from ``cam`` over ``background``.

    Colors are clipped to [0, 1] before blending.  ``extra_features`` (N, K)
    are blended alongside RGB with ``extra_background`` (default zeros) and
    returned in ``RenderOutput.extra``.  Pass ``t_min=0`` to disable early
    termination.
    """
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    h, w = cam.height, cam.width
    feat = _features(cloud, extra_features)
    n_extra = feat.shape[1] - 3
    bg_full = bg
    if n_extra:
        ebg = np.zeros(n_extra) if extra_background is None else np.asarray(extra_background, float).reshape(n_extra)
        bg_full = np.concatenate([bg, ebg])
    if len(cloud) == 0:
        out = np.broadcast_to(bg_full, (h, w, len(bg_full))).copy()
        return RenderOutput(out[..., :3].copy(), np.zeros((h, w)), np.ones((h, w)),
                            np.zeros((h, w), dtype=np.int64), out[..., 3:].copy() if n_extra else None,
                            cam, bg, alpha_max, t_min, 0, None)
    proj = _project(cloud, cam, feat)
    out, final_t, n_last = _raster.forward(
        proj.offsets, proj.ids, proj.mean2d, proj.conic, proj.opac, feat, bg_full, h, w,
        TILE_SIZE, proj.tiles_x, alpha_max, t_min)
    return RenderOutput(np.ascontiguousarray(out[..., :3]), 1.0 - final_t, final_t, n_last,
                        np.ascontiguousarray(out[..., 3:]) if n_extra else None,
                        cam, bg_full, alpha_max, t_min, len(cloud), proj)


def render_at_ratio(cloud: GaussianCloud, cam: Camera, background=(1.0, 1.0, 1.0),
                    ratio: float = 1.0, **kwargs) -> RenderOutput:
    """Render at ``round(ratio * size)`` with the vertical field of view unchanged."""
    if not 0.0 < ratio <= 1.0:
        raise ContractViolation(f"ratio must be in (0, 1], got {ratio}")
    return render(cloud, scaled_camera(cam, ratio), background, **kwargs)


def scaled_camera(cam: Camera, ratio: float) -> Camera:
    if ratio == 1.0:
        return cam
    return cam.resized(max(1, math.floor(ratio * cam.width + 0.5)),
                       max(1, math.floor(ratio * cam.height + 0.5)))


def render_backward(cloud: GaussianCloud, cam: Camera, background, output: RenderOutput,
                    grad_image, grad_extra=None) -> ParamGradients:
    """Gradients of a scalar loss w.r.t. every stored cloud parameter.

    ``grad_image`` is dL/d(output.image); the background gets no gradient.
    """
    grad_image = np.asarray(grad_image, dtype=np.float64)
    if grad_image.shape != output.image.shape:
        raise ContractViolation(f"grad_image shape {grad_image.shape} != image {output.image.shape}")
    if output.n_points != len(cloud) or output.camera != cam:
        raise ContractViolation("render output was produced from a different cloud or camera")
    n = len(cloud)
    n_extra = 0 if output.extra is None else output.extra.shape[2]
    grads = ParamGradients.zeros(n, n_extra)
    if n == 0 or output._proj is None:
        return grads
    if n_extra:
        if grad_extra is None:
            grad_extra = np.zeros_like(output.extra)
        grad_out = np.concatenate([grad_image, np.asarray(grad_extra, float).reshape(output.extra.shape)], axis=2)
    else:
        grad_out = grad_image
    p = output._proj
    h, w = output.height, output.width
    n_tiles = len(p.offsets) - 1
    n_chunks = max(1, min(n_tiles, numba.get_num_threads()))
    buf = _raster.backward(p.offsets, p.ids, p.mean2d, p.conic, p.opac, p.feat, output.background,
                           output.n_last, np.ascontiguousarray(grad_out), h, w, TILE_SIZE, p.tiles_x,
                           output.alpha_max, n_chunks)
    acc = buf[0] if n_chunks == 1 else buf.sum(axis=0)

    d_feat = acc[:, 6:]
    color_live = (cloud.colors_dc > 0.0) & (cloud.colors_dc < 1.0)
    grads.colors_dc = d_feat[:, :3] * color_live
    if n_extra:
        grads.extra = d_feat[:, 3:].copy()
    opac = p.opac
    grads.opacity_logits = acc[:, 5] * opac * (1.0 - opac)

    grads.means_2d = acc[:, 0:2] * np.array([0.5 * w, 0.5 * h])
    grads.positions, grads.log_scales, grads.rotations = _raster.chain_backward(
        acc, p.valid, p.cov2d, p.jac, p.cam_points, p.rotation, cloud.log_scales, cloud.rotations,
        p.w2c, cam.focal, cam.focal)

    invalid = ~p.valid
    if invalid.any():
        for arr in (grads.positions, grads.log_scales, grads.rotations, grads.colors_dc,
                    grads.opacity_logits, grads.means_2d):
            arr[invalid] = 0.0
        if grads.extra is not None:
            grads.extra[invalid] = 0.0
    return grads
