"""Analytic ray-cast scenes with exact depth.

The camera sits at the origin looking down +z with y pointing down. Rays are
parameterized as ``t * (x/z, y/z, 1)`` so the hit parameter ``t`` *is* the
z-depth stored in depth maps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..camera import CameraIntrinsics

MATERIALS = ("opaque", "transparent", "reflective")
MATERIAL_CODE = {name: i for i, name in enumerate(MATERIALS)}
TRANSPARENT_ALPHA = 0.35
AMBIENT = 0.2


@dataclass
class Primitive:
    """Base: subclasses return ``(t, normal)`` for rays shaped (..., 3)."""

    material: str = "opaque"
    albedo: tuple = (0.7, 0.7, 0.7)

    def __post_init__(self):
        if self.material not in MATERIALS:
            raise ValueError(f"unknown material {self.material!r}")

    def intersect(self, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError


@dataclass
class Plane(Primitive):
    point: tuple = (0.0, 0.0, 1.0)
    normal: tuple = (0.0, 0.0, -1.0)

    def intersect(self, dirs):
        n = np.asarray(self.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(np.abs(denom) > 1e-12, (np.asarray(self.point) @ n) / denom, np.inf)
        t = np.where(t > 0, t, np.inf)
        return t, np.broadcast_to(n, dirs.shape)


@dataclass
class Sphere(Primitive):
    center: tuple = (0.0, 0.0, 1.0)
    radius: float = 0.1

    def intersect(self, dirs):
        c = np.asarray(self.center, dtype=np.float64)
        a = np.einsum("...i,...i->...", dirs, dirs)
        b = dirs @ c
        disc = b * b - a * (c @ c - self.radius ** 2)
        root = np.sqrt(np.maximum(disc, 0.0))
        near, far = (b - root) / a, (b + root) / a
        t = np.where(near > 0, near, far)
        t = np.where((disc >= 0) & (t > 0), t, np.inf)
        hit = dirs * np.where(np.isfinite(t), t, 0.0)[..., None]
        return t, (hit - c) / self.radius


@dataclass
class Box(Primitive):
    """Box rotated by ``yaw`` radians about the camera y axis."""

    center: tuple = (0.0, 0.0, 1.0)
    half_extents: tuple = (0.1, 0.1, 0.1)
    yaw: float = 0.0

    def _rotation(self) -> np.ndarray:
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])

    def intersect(self, dirs):
        rot = self._rotation()
        origin = rot.T @ (-np.asarray(self.center, dtype=np.float64))
        d = dirs @ rot  # rows are R^T d
        h = np.asarray(self.half_extents, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-h - origin) / d
            t2 = (h - origin) / d
        t1 = np.where(np.isnan(t1), -np.inf, t1)
        t2 = np.where(np.isnan(t2), np.inf, t2)
        lo, hi = np.minimum(t1, t2), np.maximum(t1, t2)
        t_enter, t_exit = lo.max(axis=-1), hi.min(axis=-1)
        axis = lo.argmax(axis=-1)
        t = np.where((t_exit >= t_enter) & (t_enter > 0), t_enter, np.inf)
        local = np.zeros(dirs.shape)
        sign = -np.sign(np.take_along_axis(d, axis[..., None], axis=-1))[..., 0]
        np.put_along_axis(local, axis[..., None], sign[..., None], axis=-1)
        return t, local @ rot.T


@dataclass
class Cylinder(Primitive):
    """Capped cylinder whose axis is parallel to the camera y axis."""

    center: tuple = (0.0, 0.0, 1.0)
    radius: float = 0.05
    half_height: float = 0.1

    def intersect(self, dirs):
        cx, cy, cz = (float(v) for v in self.center)
        dx, dy, dz = dirs[..., 0], dirs[..., 1], dirs[..., 2]
        a = dx * dx + dz * dz
        b = dx * cx + dz * cz
        disc = b * b - a * (cx * cx + cz * cz - self.radius ** 2)
        root = np.sqrt(np.maximum(disc, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            side = (b - root) / a
        y_side = side * dy
        side_ok = (disc >= 0) & (side > 0) & (np.abs(y_side - cy) <= self.half_height)
        t_side = np.where(side_ok, side, np.inf)

        t_cap = np.full(dx.shape, np.inf)
        cap_normal_y = np.zeros(dx.shape)
        for cap_y, ny in ((cy - self.half_height, -1.0), (cy + self.half_height, 1.0)):
            with np.errstate(divide="ignore", invalid="ignore"):
                tc = np.where(np.abs(dy) > 1e-12, cap_y / dy, np.inf)
            with np.errstate(invalid="ignore"):
                inside = (dx * tc - cx) ** 2 + (dz * tc - cz) ** 2 <= self.radius ** 2
            ok = (tc > 0) & inside & (tc < t_cap)
            t_cap = np.where(ok, tc, t_cap)
            cap_normal_y = np.where(ok, ny, cap_normal_y)

        use_side = t_side <= t_cap
        t = np.where(use_side, t_side, t_cap)
        hit = dirs * np.where(np.isfinite(t), t, 0.0)[..., None]
        side_n = np.stack([(hit[..., 0] - cx) / self.radius, np.zeros(dx.shape),
                           (hit[..., 2] - cz) / self.radius], axis=-1)
        cap_n = np.stack([np.zeros(dx.shape), cap_normal_y, np.zeros(dx.shape)], axis=-1)
        return t, np.where(use_side[..., None], side_n, cap_n)


@dataclass
class SceneSpec:
    height: int
    width: int
    intrinsics: CameraIntrinsics
    background: Plane
    objects: list = field(default_factory=list)
    light_dir: tuple = (-0.3, -0.5, -1.0)  # direction from surface toward the light

    @property
    def primitives(self) -> list:
        return [self.background, *self.objects]

    def validate(self) -> "SceneSpec":
        self.intrinsics.validate(self.height, self.width)
        if self.background.material != "opaque":
            raise ValueError("the support surface must be opaque")
        return self


@dataclass
class RenderResult:
    rgb: np.ndarray               # (h, w, 3) float64 in [0, 1]
    depth: np.ndarray             # (h, w) float64 meters, exact
    material: np.ndarray          # (h, w) uint8 codes from MATERIAL_CODE
    background_depth: np.ndarray  # depth of the first surface behind the front hit
    primitive_id: np.ndarray      # (h, w) index into SceneSpec.primitives


def camera_rays(intrinsics: CameraIntrinsics, height: int, width: int) -> np.ndarray:
    sx, sy = intrinsics.ray_slopes(height, width)
    return np.stack([sx, sy, np.ones((height, width))], axis=-1)


def _shade(albedo, normal, dirs, light, material):
    n = normal / np.maximum(np.linalg.norm(normal, axis=-1, keepdims=True), 1e-12)
    facing = np.einsum("...i,...i->...", n, dirs) > 0
    n = np.where(facing[..., None], -n, n)
    lambert = np.clip(n @ light, 0.0, None)
    color = np.asarray(albedo)[None, None, :] * (AMBIENT + (1.0 - AMBIENT) * lambert)[..., None]
    if material == "reflective":
        view = -dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
        refl = 2.0 * lambert[..., None] * n - light
        spec = np.clip(np.einsum("...i,...i->...", refl, view), 0.0, None) ** 20
        color = color + 0.6 * spec[..., None]
    return color


def render_scene(spec: SceneSpec) -> RenderResult:
    """Ray-cast every pixel; transparent surfaces blend over what lies behind them."""
    spec.validate()
    h, w = spec.height, spec.width
    dirs = camera_rays(spec.intrinsics, h, w)
    light = np.asarray(spec.light_dir, dtype=np.float64)
    light = light / np.linalg.norm(light)
    prims = spec.primitives

    ts, normals = zip(*(p.intersect(dirs) for p in prims))
    ts = np.stack(ts)
    front = np.argmin(ts, axis=0)
    depth = np.take_along_axis(ts, front[None], axis=0)[0]
    no_hit = ~np.isfinite(depth)
    bg_depth_fallback = float(spec.background.point[2])
    depth = np.where(no_hit, bg_depth_fallback, depth)
    front = np.where(no_hit, 0, front)

    behind_ts = ts.copy()
    np.put_along_axis(behind_ts, front[None], np.inf, axis=0)
    behind = np.argmin(behind_ts, axis=0)
    behind_depth = np.take_along_axis(behind_ts, behind[None], axis=0)[0]
    behind_depth = np.where(np.isfinite(behind_depth), behind_depth, bg_depth_fallback)

    colors = [_shade(p.albedo, nrm, dirs, light, p.material) for p, nrm in zip(prims, normals)]
    colors = np.stack(colors)
    front_color = np.take_along_axis(colors, front[None, ..., None], axis=0)[0]
    behind_color = np.take_along_axis(colors, behind[None, ..., None], axis=0)[0]

    codes = np.array([MATERIAL_CODE[p.material] for p in prims], dtype=np.uint8)
    material = codes[front]
    transparent = material == MATERIAL_CODE["transparent"]
    rgb = np.where(transparent[..., None],
                   TRANSPARENT_ALPHA * front_color + (1.0 - TRANSPARENT_ALPHA) * behind_color,
                   front_color)
    background_depth = np.where(material == MATERIAL_CODE["opaque"], depth, behind_depth)
    return RenderResult(rgb=np.clip(rgb, 0.0, 1.0), depth=depth, material=material,
                        background_depth=background_depth, primitive_id=front)


def random_scene(rng: np.random.Generator, height: int = 64, width: int = 64,
                 intrinsics: Optional[CameraIntrinsics] = None, max_tries: int = 50) -> SceneSpec:
    """A tilted opaque support plane plus 2-4 objects, at least one non-opaque and visible."""
    intrinsics = intrinsics or CameraIntrinsics.default_for(height, width)
    for _ in range(max_tries):
        z0 = rng.uniform(1.05, 1.25)
        a, b = rng.uniform(-0.15, 0.15, size=2)
        background = Plane(material="opaque", albedo=tuple(rng.uniform(0.3, 0.8, size=3)),
                           point=(0.0, 0.0, z0), normal=(-a, -b, 1.0))
        objects = []
        for i in range(int(rng.integers(2, 5))):
            material = "transparent" if i == 0 else str(rng.choice(MATERIALS, p=[0.4, 0.35, 0.25]))
            if i == 0 and rng.random() < 0.3:
                material = "reflective"
            z = rng.uniform(0.55, 0.95)
            span = 0.4 * z * width / intrinsics.fx
            x, y = rng.uniform(-span, span, size=2)
            albedo = tuple(rng.uniform(0.2, 1.0, size=3))
            kind = int(rng.integers(0, 3))
            if kind == 0:
                obj = Sphere(material=material, albedo=albedo, center=(x, y, z), radius=rng.uniform(0.08, 0.17))
            elif kind == 1:
                obj = Box(material=material, albedo=albedo, center=(x, y, z),
                          half_extents=tuple(rng.uniform(0.05, 0.12, size=3)), yaw=rng.uniform(-0.8, 0.8))
            else:
                obj = Cylinder(material=material, albedo=albedo, center=(x, y, z),
                               radius=rng.uniform(0.05, 0.1), half_height=rng.uniform(0.08, 0.16))
            objects.append(obj)
        light = (rng.uniform(-0.5, 0.5), rng.uniform(-0.8, -0.2), -1.0)
        spec = SceneSpec(height, width, intrinsics, background, objects, light)
        result = render_scene(spec)
        if np.any(result.material != MATERIAL_CODE["opaque"]):
            return spec
    raise RuntimeError("could not place a visible non-opaque object")
