"""Procedural indoor scenes with exact RGB-D ground truth."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.spatial import ConvexHull

from .geometry import Frame, Intrinsics, Plane, Pose, look_at

Albedo = Callable[[np.ndarray, np.ndarray], np.ndarray]


def sinusoid_albedo(base, amp=0.15, periods=(0.9, 0.7), phase=0.0) -> Albedo:
    base = np.asarray(base, dtype=np.float64)

    def fn(a, b):
        wave = np.sin(2 * np.pi * a / periods[0] + phase) * np.cos(2 * np.pi * b / periods[1])
        return np.clip(base[None, :] + amp * wave[:, None] * np.array([1.0, 0.8, 0.6])[None, :], 0, 1)
    return fn


def constant_albedo(rgb) -> Albedo:
    rgb = np.asarray(rgb, dtype=np.float64)

    def fn(a, b):
        return np.broadcast_to(rgb, (len(a), 3)).copy()
    return fn


@dataclass
class Rectangle:
    """Bounded planar patch ``center + a*axis_u + b*axis_v``, ``|a|<=half_u``, ``|b|<=half_v``."""

    plane: Plane
    center: np.ndarray
    axis_u: np.ndarray
    axis_v: np.ndarray
    half_u: float
    half_v: float
    albedo: Albedo


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    albedo: Albedo


@dataclass
class Box:
    center: np.ndarray
    half_extent: np.ndarray
    albedo: Albedo


@dataclass
class Light:
    direction: np.ndarray = field(default_factory=lambda: np.array([0.3, 0.8, -0.5]))  # towards the light
    ambient: float = 0.35
    diffuse: float = 0.65


@dataclass
class SceneSpec:
    planes: list[Rectangle]
    props: list  # Sphere | Box
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    light: Light = field(default_factory=Light)

    @property
    def centroid(self) -> np.ndarray:
        return 0.5 * (self.bbox_min + self.bbox_max)

    def without_plane(self, index: int) -> "SceneSpec":
        planes = [p for i, p in enumerate(self.planes) if i != index]
        return SceneSpec(planes, list(self.props), self.bbox_min, self.bbox_max, self.light)

    def with_prop(self, index: int, prop) -> "SceneSpec":
        props = list(self.props)
        props[index] = prop
        return SceneSpec(list(self.planes), props, self.bbox_min, self.bbox_max, self.light)


def _rect(normal, offset, center, axis_u, axis_v, hu, hv, albedo) -> Rectangle:
    return Rectangle(Plane.canonical(normal, offset), np.asarray(center, float), np.asarray(axis_u, float),
                     np.asarray(axis_v, float), hu, hv, albedo)


def box_room(with_props: bool = True) -> SceneSpec:
    """Five-walled room (open towards -z) with a sphere and a box on the floor."""
    X, Y, Z0, Z1 = 1.5, 1.0, -0.5, 3.0
    zc, zh = 0.5 * (Z0 + Z1), 0.5 * (Z1 - Z0)
    ex, ey, ez = np.eye(3)
    walls = [
        _rect(ez, Z1, (0, 0, Z1), ex, ey, X, Y, sinusoid_albedo((0.75, 0.62, 0.45), periods=(1.1, 0.8))),
        _rect(-ex, X, (-X, 0, zc), ez, ey, zh, Y, sinusoid_albedo((0.35, 0.55, 0.7), periods=(1.3, 0.9), phase=0.5)),
        _rect(ex, X, (X, 0, zc), ez, ey, zh, Y, sinusoid_albedo((0.6, 0.7, 0.4), periods=(1.2, 1.0), phase=1.0)),
        _rect(-ey, Y, (0, -Y, zc), ex, ez, X, zh, sinusoid_albedo((0.55, 0.45, 0.4), periods=(0.9, 1.2), phase=2.0)),
        _rect(ey, Y, (0, Y, zc), ex, ez, X, zh, sinusoid_albedo((0.85, 0.85, 0.8), amp=0.08, periods=(1.5, 1.5))),
    ]
    props = []
    if with_props:
        props = [
            Sphere(np.array([-0.55, -0.6, 2.0]), 0.35, sinusoid_albedo((0.8, 0.3, 0.3), amp=0.12, periods=(0.5, 0.5))),
            Box(np.array([0.65, -0.75, 2.2]), np.array([0.25, 0.25, 0.25]), constant_albedo((0.3, 0.4, 0.8))),
        ]
    return SceneSpec(walls, props, np.array([-1.6, -1.1, -0.6]), np.array([1.6, 1.1, 3.2]))


def single_wall(z: float = 2.0, half: float = 3.0) -> SceneSpec:
    wall = _rect((0, 0, 1), z, (0, 0, z), (1, 0, 0), (0, 1, 0), half, half,
                 sinusoid_albedo((0.6, 0.6, 0.6)))
    return SceneSpec([wall], [], np.array([-1.0, -1.0, 0.5]), np.array([1.0, 1.0, z + 1.0]))


def corner_scene(x_wall: float = 0.0, z_wall: float = 3.0) -> SceneSpec:
    """Two walls meeting at a crease: ``x = x_wall`` (for x <= ...) and ``z = z_wall``."""
    ex, ey, ez = np.eye(3)
    walls = [
        _rect(ex, x_wall, (x_wall, 0, z_wall - 2.0), ez, ey, 2.0, 3.0, sinusoid_albedo((0.5, 0.6, 0.7))),
        _rect(ez, z_wall, (x_wall - 3.0, 0, z_wall), ex, ey, 3.0, 3.0, sinusoid_albedo((0.7, 0.6, 0.5))),
    ]
    return SceneSpec(walls, [], np.array([x_wall - 4.0, -2.0, 0.0]), np.array([x_wall + 0.5, 2.0, z_wall + 0.5]))


def default_intrinsics(width: int = 64, height: int = 64, fov_deg: float = 70.0) -> Intrinsics:
    f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
    return Intrinsics(f, f, width / 2.0, height / 2.0, width, height)


# -- ray casting -------------------------------------------------------------------


def _hit_rectangle(o, dirs, rect: Rectangle):
    n = rect.plane.normal
    den = dirs @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (rect.plane.offset - o @ n) / den
    x = o + t[:, None] * dirs
    rel = x - rect.center
    a = rel @ rect.axis_u
    b = rel @ rect.axis_v
    ok = (np.abs(den) > 1e-12) & (t > 0) & (np.abs(a) <= rect.half_u) & (np.abs(b) <= rect.half_v)
    return np.where(ok, t, np.inf), a, b


def _hit_sphere(o, dirs, s: Sphere):
    oc = o - s.center
    A = np.einsum("ij,ij->i", dirs, dirs)
    B = 2 * dirs @ oc
    C = oc @ oc - s.radius ** 2
    disc = B * B - 4 * A * C
    sq = np.sqrt(np.maximum(disc, 0))
    t0 = (-B - sq) / (2 * A)
    t1 = (-B + sq) / (2 * A)
    t = np.where(t0 > 0, t0, t1)
    return np.where((disc >= 0) & (t > 0), t, np.inf)


def _hit_box(o, dirs, b: Box):
    lo, hi = b.center - b.half_extent, b.center + b.half_extent
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (lo - o) * inv
        tb = (hi - o) * inv
    tmin = np.nanmax(np.minimum(ta, tb), axis=1)
    tmax = np.nanmin(np.maximum(ta, tb), axis=1)
    t = np.where(tmin > 0, tmin, tmax)
    return np.where((tmax >= tmin) & (t > 0), t, np.inf)


def raytrace(spec: SceneSpec, pose: Pose, intrinsics: Intrinsics) -> dict:
    """Exact colour, z-depth, ground-truth plane ids and object ids for a camera.

    Rays use camera directions with unit z component, so hit parameters are
    z-depths directly.  Object ids: planes ``1..P``, props ``P+1..``, 0 = miss.
    """
    h, w = intrinsics.shape
    uv = intrinsics.pixel_centers().reshape(-1, 2)
    dc = np.stack([(uv[:, 0] - intrinsics.cx) / intrinsics.fx,
                   (uv[:, 1] - intrinsics.cy) / intrinsics.fy, np.ones(len(uv))], axis=-1)
    dirs = dc @ pose.rotation.T
    o = pose.translation
    n_pix = len(dirs)
    best = np.full(n_pix, np.inf)
    obj = np.zeros(n_pix, dtype=np.int32)
    coords = np.zeros((n_pix, 2))
    for i, rect in enumerate(spec.planes):
        t, a, b = _hit_rectangle(o, dirs, rect)
        closer = t < best
        best[closer] = t[closer]
        obj[closer] = i + 1
        coords[closer, 0] = a[closer]
        coords[closer, 1] = b[closer]
    P = len(spec.planes)
    for j, prop in enumerate(spec.props):
        t = _hit_sphere(o, dirs, prop) if isinstance(prop, Sphere) else _hit_box(o, dirs, prop)
        closer = t < best
        best[closer] = t[closer]
        obj[closer] = P + 1 + j

    hit = np.isfinite(best)
    depth = np.where(hit, best, 0.0)
    x = o + depth[:, None] * dirs
    unit = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    color = np.zeros((n_pix, 3))
    normal = np.zeros((n_pix, 3))
    for i, rect in enumerate(spec.planes):
        m = obj == i + 1
        if m.any():
            color[m] = rect.albedo(coords[m, 0], coords[m, 1])
            normal[m] = rect.plane.normal
    for j, prop in enumerate(spec.props):
        m = obj == P + 1 + j
        if not m.any():
            continue
        if isinstance(prop, Sphere):
            nrm = (x[m] - prop.center) / prop.radius
            color[m] = prop.albedo(x[m, 0] + x[m, 2], x[m, 1])
        else:
            rel = (x[m] - prop.center) / prop.half_extent
            ax = np.argmax(np.abs(rel), axis=1)
            nrm = np.zeros((m.sum(), 3))
            nrm[np.arange(len(ax)), ax] = np.sign(rel[np.arange(len(ax)), ax])
            color[m] = prop.albedo(x[m, 0], x[m, 1])
        normal[m] = nrm
    facing = np.where((np.einsum("ij,ij->i", normal, unit) > 0)[:, None], -normal, normal)
    L = spec.light.direction / np.linalg.norm(spec.light.direction)
    shade = spec.light.ambient + spec.light.diffuse * np.maximum(facing @ L, 0.0)
    color = np.clip(color * shade[:, None], 0, 1)
    color[~hit] = 0.0
    semantic = np.where(obj <= P, obj, 0).astype(np.int32)
    return {
        "color": color.reshape(h, w, 3),
        "depth": depth.reshape(h, w),
        "semantic": semantic.reshape(h, w),
        "object": obj.reshape(h, w),
    }


def raytrace_frame(spec: SceneSpec, pose: Pose, intrinsics: Intrinsics, timestamp: int = 0) -> Frame:
    out = raytrace(spec, pose, intrinsics)
    return Frame(out["color"], out["depth"], out["semantic"], pose, intrinsics, timestamp)


# -- trajectories -----------------------------------------------------------------


def arc_poses(n: int = 20, spread: float = 0.8) -> list[Pose]:
    """Training cameras on a shallow arc near the open side, sweeping left to right."""
    poses = []
    for s in np.linspace(-1.0, 1.0, n):
        eye = np.array([spread * s, 0.05 * math.sin(3 * math.pi * s), 0.25 - 0.15 * s * s])
        target = np.array([0.6 * s, -0.05, 2.6])
        poses.append(look_at(eye, target))
    return poses


def slerp_pose(a: Pose, b: Pose, alpha: float) -> Pose:
    from scipy.spatial.transform import Rotation, Slerp
    rots = Rotation.from_matrix(np.stack([a.rotation, b.rotation]))
    R = Slerp([0.0, 1.0], rots)([alpha]).as_matrix()[0]
    from .geometry import orthonormalize
    return Pose(orthonormalize(R), (1 - alpha) * a.translation + alpha * b.translation)


def emit_trajectory(train_poses: list[Pose], kind: str, n: int, margin: float = 0.3,
                    look_distance: float = 2.5) -> list[Pose]:
    """Evaluation cameras relative to the training trajectory.

    ``interpolation``: midpoints between consecutive training poses.
    ``extrapolation``: convex-hull vertices of the training positions pushed
    ``margin`` metres outward from the position centroid while keeping their
    original look-at target.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if kind == "interpolation":
        if len(train_poses) < 2:
            raise ValueError("interpolation needs at least two training poses")
        mids = [slerp_pose(a, b, 0.5) for a, b in zip(train_poses[:-1], train_poses[1:])]
        pick = np.linspace(0, len(mids) - 1, n).round().astype(int) if n < len(mids) else np.arange(len(mids))
        out = [mids[i] for i in pick]
        while len(out) < n:  # more views requested than gaps: use quarter points
            k = len(out) % (len(train_poses) - 1)
            out.append(slerp_pose(train_poses[k], train_poses[k + 1], 0.25))
        return out
    if kind != "extrapolation":
        raise ValueError(f"unknown trajectory kind {kind!r}")
    pos = np.stack([p.translation for p in train_poses])
    centroid = pos.mean(axis=0)
    hull = _hull_vertices(pos)
    pick = [hull[i] for i in np.linspace(0, len(hull) - 1, n).round().astype(int)] if n < len(hull) \
        else [hull[i % len(hull)] for i in range(n)]
    out = []
    for i in pick:
        p = train_poses[i]
        out_dir = pos[i] - centroid
        norm = np.linalg.norm(out_dir)
        out_dir = out_dir / norm if norm > 1e-9 else -p.rotation[:, 2]
        target = p.translation + look_distance * p.rotation[:, 2]
        if margin == 0:
            out.append(p)
        else:
            out.append(look_at(p.translation + margin * out_dir, target, up=-p.rotation[:, 1]))
    return out


def _hull_vertices(pos: np.ndarray) -> list[int]:
    """Indices of convex-hull vertices in the horizontal (x, z) plane, in hull order."""
    if len(pos) < 3:
        return list(range(len(pos)))
    xz = pos[:, [0, 2]]
    try:
        return [int(i) for i in ConvexHull(xz).vertices]
    except Exception:  # collinear positions
        order = np.argsort(xz[:, 0])
        return [int(order[0]), int(order[-1])]


def add_depth_noise(frame: Frame, sigma: float, seed: int = 0) -> Frame:
    out = frame.copy()
    if sigma == 0:
        return out
    rng = np.random.default_rng(seed)
    valid = out.depth > 0
    noisy = out.depth[valid] + rng.normal(0.0, sigma, valid.sum())
    out.depth[valid] = np.maximum(noisy, 0.01)
    return out


def synthesize(spec: SceneSpec, poses: list[Pose], intrinsics: Intrinsics,
               noise: float = 0.0, seed: int = 0) -> list[Frame]:
    frames = []
    for i, pose in enumerate(poses):
        fr = raytrace_frame(spec, pose, intrinsics, timestamp=i)
        if noise > 0:
            fr = add_depth_noise(fr, noise, seed=seed + i)
        frames.append(fr)
    return frames
