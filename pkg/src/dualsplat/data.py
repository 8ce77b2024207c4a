"""Synthetic multi-view pseudo-labels with controllable cross-view inconsistency.

A ground-truth scene is built from primitives as a GaussianCloud.  Each
training view renders its own perturbed copy of that scene, so views
disagree mostly along silhouettes and textured regions, which is where
generated multi-view frames tend to conflict.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
from scipy.ndimage import binary_dilation, binary_erosion

from .core import Camera, GaussianCloud, logit
from .errors import ContractViolation
from .render import render

DEFAULT_AMPLITUDES = (0.0, -20.0, 40.0)
HELDOUT_SEED = 20240917
HELDOUT_ELEVATION = 60.0


@dataclass(frozen=True)
class OrbitSpec:
    """Uniform azimuth sweep with sinusoidal elevation."""

    frames_per_orbit: int = 21
    elevation_amplitude: float = 0.0
    phase: float = 0.0
    radius: float = 4.0
    fov_y: float = 33.8

    def __post_init__(self):
        if self.frames_per_orbit < 1:
            raise ContractViolation(f"frames_per_orbit must be >= 1, got {self.frames_per_orbit}")


@dataclass(frozen=True)
class Primitive:
    kind: str  # "sphere" | "box" | "blob"
    center: tuple
    size: object  # sphere radius, box half-extent (scalar or 3), blob radii (3)
    color: tuple

    def extent(self) -> np.ndarray:
        size = np.broadcast_to(np.asarray(self.size, dtype=np.float64), (3,))
        return size

    def bounding_radius(self) -> float:
        c = np.linalg.norm(np.asarray(self.center, dtype=np.float64))
        e = self.extent()
        if self.kind == "box":
            return float(c + np.linalg.norm(e))
        return float(c + e.max())


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple
    gaussians_per_primitive: int = 1500
    texture_noise: float = 0.05
    scale_factor: float = 0.7

    def __post_init__(self):
        if len(self.primitives) < 1:
            raise ContractViolation("primitives: at least one primitive is required")
        for i, p in enumerate(self.primitives):
            if p.kind not in ("sphere", "box", "blob"):
                raise ContractViolation(f"primitives[{i}].kind: unknown primitive {p.kind!r}")
            if len(p.center) != 3 or len(p.color) != 3:
                raise ContractViolation(f"primitives[{i}]: center and color need 3 components")
            if np.any(p.extent() <= 0):
                raise ContractViolation(f"primitives[{i}].size: must be positive")
            if p.bounding_radius() > 1.0 + 1e-9:
                raise ContractViolation(f"primitives[{i}]: extends outside the unit sphere")
        if self.gaussians_per_primitive < 1:
            raise ContractViolation("gaussians_per_primitive: must be >= 1")
        if self.texture_noise < 0:
            raise ContractViolation("texture_noise: must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> SceneSpec:
        known = {"primitives", "gaussians_per_primitive", "texture_noise", "scale_factor"}
        unknown = set(d) - known
        if unknown:
            raise ContractViolation(f"{sorted(unknown)[0]}: unknown scene field")
        if "primitives" not in d:
            raise ContractViolation("primitives: missing")
        prims = []
        for i, p in enumerate(d["primitives"]):
            try:
                prims.append(Primitive(p["kind"], tuple(p["center"]), p["size"], tuple(p["color"])))
            except KeyError as e:
                raise ContractViolation(f"primitives[{i}].{e.args[0]}: missing") from None
        rest = {k: v for k, v in d.items() if k != "primitives"}
        return cls(tuple(prims), **rest)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["primitives"] = [asdict(p) for p in self.primitives]
        return d


@dataclass(frozen=True)
class InconsistencySpec:
    geometry_jitter: float = 0.0
    color_jitter: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.geometry_jitter < 0 or self.color_jitter < 0:
            raise ContractViolation("jitter standard deviations must be >= 0")

    @property
    def consistent(self) -> bool:
        return self.geometry_jitter == 0 and self.color_jitter == 0


@dataclass(eq=False)
class Frame:
    """One pseudo-label; ``image`` is premultiplied by ``alpha`` (i.e. over black)."""

    camera: Camera
    image: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W)
    orbit_id: int
    file_name: str = ""


@dataclass(eq=False)
class PseudoDataset:
    frames: list
    orbits: list
    inconsistency: InconsistencySpec
    heldout: list = field(default_factory=list)
    scene: GaussianCloud | None = None
    scene_spec: SceneSpec | None = None
    scene_seed: int = 0
    heldout_seed: int = HELDOUT_SEED

    def __post_init__(self):
        self._cache = {}

    def __len__(self) -> int:
        return len(self.frames)

    def indices_for_orbits(self, orbit_ids) -> np.ndarray:
        ids = set(orbit_ids)
        return np.array([i for i, f in enumerate(self.frames) if f.orbit_id in ids], dtype=np.int64)

    def label(self, index: int, ratio: float = 1.0, background=(1.0, 1.0, 1.0)) -> np.ndarray:
        """Pseudo-label composited over ``background`` at the given resolution ratio."""
        premult, alpha = self.label_layers(index, ratio)
        bg = np.asarray(background, dtype=np.float64).reshape(1, 1, 3)
        return premult + bg * (1.0 - alpha)[..., None]

    def label_layers(self, index: int, ratio: float = 1.0):
        key = (index, ratio)
        if key not in self._cache:
            f = self.frames[index]
            if ratio == 1.0:
                self._cache[key] = (f.image, f.alpha)
            else:
                h = max(1, math.floor(ratio * f.camera.height + 0.5))
                w = max(1, math.floor(ratio * f.camera.width + 0.5))
                self._cache[key] = (area_resample(f.image, h, w), area_resample(f.alpha, h, w))
        return self._cache[key]


@lru_cache(maxsize=64)
def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) matrix of overlap fractions."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        lo, hi = o * scale, (o + 1) * scale
        for i in range(int(math.floor(lo)), min(n_in, int(math.ceil(hi)))):
            m[o, i] = min(hi, i + 1) - max(lo, i)
    return m / m.sum(axis=1, keepdims=True)


def area_resample(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Area-average resampling of an (H, W[, C]) array."""
    img = np.asarray(img, dtype=np.float64)
    if img.shape[:2] == (height, width):
        return img
    mh = _area_matrix(img.shape[0], height)
    mw = _area_matrix(img.shape[1], width)
    return np.einsum("oh,hw...,pw->op...", mh, img, mw)


def orbit_cameras(spec: OrbitSpec, width: int = 64, height: int = 64) -> list[Camera]:
    """Frame k of n: azimuth ``360 k / n + phase``, elevation ``amplitude * sin(360 k / n)``."""
    n = spec.frames_per_orbit
    cams = []
    for k in range(n):
        theta = 360.0 * k / n
        cams.append(Camera(theta + spec.phase, spec.elevation_amplitude * math.sin(math.radians(theta)),
                           spec.radius, spec.fov_y, width, height))
    return cams


def default_orbits(frames_per_orbit: int = 21) -> list[OrbitSpec]:
    return [OrbitSpec(frames_per_orbit, a) for a in DEFAULT_AMPLITUDES]


def heldout_cameras(n: int, seed: int = HELDOUT_SEED, width: int = 64, height: int = 64,
                    radius: float = 4.0, fov_y: float = 33.8) -> list[Camera]:
    """Evaluation views: uniform azimuths, elevations uniform in [-60, 60]."""
    if n < 1:
        raise ContractViolation(f"n must be >= 1, got {n}")
    elev = np.random.default_rng(seed).uniform(-HELDOUT_ELEVATION, HELDOUT_ELEVATION, n)
    return [Camera(360.0 * k / n, float(elev[k]), radius, fov_y, width, height) for k in range(n)]


def _sample_surface(p: Primitive, n: int, rng: np.random.Generator):
    """Points on the primitive surface and the surface area."""
    c = np.asarray(p.center, dtype=np.float64)
    e = p.extent()
    if p.kind in ("sphere", "blob"):
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        a, b, cc = e
        # Knud Thomsen approximation of the ellipsoid area (exact for spheres)
        q = 1.6075
        area = 4 * math.pi * (((a * b) ** q + (a * cc) ** q + (b * cc) ** q) / 3) ** (1 / q)
        return c + d * e, area
    face_areas = np.array([e[1] * e[2], e[0] * e[2], e[0] * e[1]] * 2) * 4.0
    face = rng.choice(6, size=n, p=face_areas / face_areas.sum())
    uv = rng.uniform(-1.0, 1.0, size=(n, 3))
    axis = face % 3
    sign = np.where(face < 3, 1.0, -1.0)
    uv[np.arange(n), axis] = sign
    return c + uv * e, float(face_areas.sum())


def make_scene(spec: SceneSpec, seed: int = 0) -> GaussianCloud:
    """Ground-truth cloud: small isotropic Gaussians on each primitive surface."""
    rng = np.random.default_rng(seed)
    parts = []
    n = spec.gaussians_per_primitive
    for p in spec.primitives:
        pts, area = _sample_surface(p, n, rng)
        scale = spec.scale_factor * math.sqrt(area / n)
        color = np.asarray(p.color, dtype=np.float64) + spec.texture_noise * rng.normal(size=(n, 3))
        parts.append(GaussianCloud(
            positions=pts,
            log_scales=np.full((n, 3), math.log(scale)),
            rotations=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
            colors_dc=np.clip(color, 0.0, 1.0),
            opacity_logits=np.full(n, float(logit(0.98))),
        ))
    cloud = parts[0]
    for p in parts[1:]:
        cloud = cloud.concat(p)
    return cloud


def standard_scene_spec(gaussians_per_primitive: int = 1500, texture_noise: float = 0.05) -> SceneSpec:
    """One sphere and one box, the acceptance scene."""
    return SceneSpec(
        primitives=(
            Primitive("sphere", (-0.35, 0.05, 0.0), 0.4, (0.85, 0.25, 0.2)),
            Primitive("box", (0.4, -0.05, 0.0), 0.25, (0.2, 0.4, 0.85)),
        ),
        gaussians_per_primitive=gaussians_per_primitive,
        texture_noise=texture_noise,
    )


def perturb_scene(scene: GaussianCloud, inc: InconsistencySpec, view_index: int) -> GaussianCloud:
    """Per-view copy of ``scene`` with Gaussian-level position and color noise."""
    if inc.consistent:
        return scene
    rng = np.random.default_rng([inc.seed, view_index])
    out = scene.copy()
    if inc.geometry_jitter > 0:
        out.positions = out.positions + rng.normal(0.0, inc.geometry_jitter, size=out.positions.shape)
    if inc.color_jitter > 0:
        out.colors_dc = np.clip(out.colors_dc + rng.normal(0.0, inc.color_jitter, size=out.colors_dc.shape),
                                0.0, 1.0)
    return out


def render_label(scene: GaussianCloud, cam: Camera):
    """Premultiplied color (over black) and accumulated alpha."""
    out = render(scene, cam, (0.0, 0.0, 0.0))
    return out.image, out.alpha


def render_pseudo_labels(scene: GaussianCloud, orbits, inc: InconsistencySpec, *, width: int = 64,
                         height: int = 64, n_heldout: int = 36, heldout_seed: int = HELDOUT_SEED,
                         scene_spec: SceneSpec | None = None, scene_seed: int = 0) -> PseudoDataset:
    """Render every orbit frame from its own perturbed copy of ``scene``."""
    frames = []
    for oid, spec in enumerate(orbits):
        for cam in orbit_cameras(spec, width, height):
            idx = len(frames)
            img, alpha = render_label(perturb_scene(scene, inc, idx), cam)
            frames.append(Frame(cam, img, alpha, oid, f"frame_{idx:03d}.png"))
    held = heldout_cameras(n_heldout, heldout_seed, width, height, orbits[0].radius, orbits[0].fov_y)
    return PseudoDataset(frames, list(orbits), inc, held, scene, scene_spec, scene_seed, heldout_seed)


def make_dataset(scene_spec: SceneSpec | None = None, *, geometry_jitter: float = 0.02,
                 color_jitter: float = 0.0, seed: int = 0, scene_seed: int = 0, width: int = 64,
                 height: int = 64, frames_per_orbit: int = 21, n_heldout: int = 36) -> PseudoDataset:
    """Scene plus three default orbits (0, -20, 40 degree amplitudes)."""
    spec = scene_spec or standard_scene_spec()
    scene = make_scene(spec, scene_seed)
    inc = InconsistencySpec(geometry_jitter, color_jitter, seed)
    return render_pseudo_labels(scene, default_orbits(frames_per_orbit), inc, width=width, height=height,
                                n_heldout=n_heldout, scene_spec=spec, scene_seed=scene_seed)


def silhouette_regions(alpha: np.ndarray, band: int = 2, threshold: float = 0.5):
    """Boolean ``(band, interior)`` masks from an alpha map.

    The band is ``band`` px wide and straddles the silhouette: half of it on
    the last object pixels, half on the first background pixels.  The
    interior is the object minus everything within ``band`` px of its edge.
    """
    mask = alpha > threshold
    inside = max(1, band // 2)
    outside = max(1, band - inside)
    ring_in = mask & ~binary_erosion(mask, iterations=inside, border_value=0)
    ring_out = binary_dilation(mask, iterations=outside) & ~mask
    interior = binary_erosion(mask, iterations=band, border_value=0)
    return ring_in | ring_out, interior


def label_disagreement(scene: GaussianCloud, cameras, inc: InconsistencySpec, band: int = 2) -> float:
    """Mean |label_a - label_b| over silhouette bands for two independent views of the same pose.

    Each pose is rendered from two differently perturbed copies of the scene,
    the disagreement two overlapping views would show about one region.
    """
    total, count = 0.0, 0
    for k, cam in enumerate(cameras):
        clean_alpha = render(scene, cam, (0.0, 0.0, 0.0)).alpha
        region, _ = silhouette_regions(clean_alpha, band)
        a = perturb_scene(scene, inc, 2 * k)
        b = perturb_scene(scene, inc, 2 * k + 1)
        ia = render(a, cam, (1.0, 1.0, 1.0)).image
        ib = render(b, cam, (1.0, 1.0, 1.0)).image
        diff = np.abs(ia - ib).mean(axis=2)
        total += diff[region].sum()
        count += int(region.sum())
    return total / max(count, 1)
