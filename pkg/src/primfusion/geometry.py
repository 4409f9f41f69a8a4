"""Camera, ray and plane primitives shared by every stage of the pipeline.

Conventions used throughout the package:

* pinhole camera, no distortion, OpenCV axes (x right, y down, z forward);
* a pose maps camera coordinates to world coordinates, ``x_w = R x_c + t``;
* continuous pixel coordinates put pixel centres at ``(col + 0.5, row + 0.5)``;
* depth is z-depth along the optical axis, not distance along the ray.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

ORTHO_TOL = 1e-6
PARALLEL_EPS = 1e-9


class GeometryError(ValueError):
    pass


class InvalidDepthError(GeometryError):
    pass


class OutOfBoundsError(GeometryError):
    pass


def _as_vec3(v) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64).reshape(3)
    return a


@dataclass(frozen=True)
class Pose:
    """Rigid world-from-camera transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = _as_vec3(self.translation)
        if not np.allclose(R.T @ R, np.eye(3), atol=ORTHO_TOL):
            raise GeometryError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise GeometryError("rotation determinant is not +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        return cls(orthonormalize(m[:3, :3]), m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        R = self.rotation @ other.rotation
        return Pose(orthonormalize(R), self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt.copy(), -Rt @ self.translation)

    @property
    def center(self) -> np.ndarray:
        return self.translation

    def to_world(self, pts_cam: np.ndarray) -> np.ndarray:
        return np.asarray(pts_cam) @ self.rotation.T + self.translation

    def to_camera(self, pts_world: np.ndarray) -> np.ndarray:
        return (np.asarray(pts_world) - self.translation) @ self.rotation


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (polar decomposition via SVD)."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=np.float64))
    Q = U @ Vt
    if np.linalg.det(Q) < 0:
        U[:, -1] *= -1
        Q = U @ Vt
    return Q


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> Pose:
    """Camera at ``eye`` looking at ``target``; image-up follows world ``up``."""
    eye = _as_vec3(eye)
    z = _as_vec3(target) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, _as_vec3(up))
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        raise GeometryError("view direction parallel to up vector")
    x /= nx
    y = np.cross(z, x)
    return Pose(np.stack([x, y, z], axis=1), eye)


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point outside image")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def contains(self, u) -> bool:
        return 0.0 <= u[0] < self.width and 0.0 <= u[1] < self.height

    def pixel_centers(self) -> np.ndarray:
        """(H, W, 2) continuous coordinates of every pixel centre."""
        cols = np.arange(self.width) + 0.5
        rows = np.arange(self.height) + 0.5
        uu, vv = np.meshgrid(cols, rows)
        return np.stack([uu, vv], axis=-1)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = _as_vec3(self.origin)
        d = _as_vec3(self.direction)
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise GeometryError("ray direction must be unit length")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass(frozen=True)
class Plane:
    """Infinite plane ``normal · x = offset`` with ``offset >= 0``."""

    normal: np.ndarray
    offset: float
    id: int = 0
    support_count: int = 0
    alive: bool = True

    def __post_init__(self):
        n = _as_vec3(self.normal)
        norm = np.linalg.norm(n)
        if norm == 0:
            raise GeometryError("zero plane normal")
        if abs(norm - 1.0) > 1e-6:
            raise GeometryError("plane normal must be unit length")
        if self.offset < 0:
            raise GeometryError("plane offset must be non-negative")
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "offset", float(self.offset))

    @classmethod
    def canonical(cls, normal, offset: float, **kw) -> "Plane":
        """Normalise ``normal`` and flip the pair so that ``offset >= 0``."""
        n = _as_vec3(normal)
        norm = np.linalg.norm(n)
        n, offset = n / norm, offset / norm
        if offset < 0:
            n, offset = -n, -offset
        return cls(n, offset, **kw)

    def signed_distance(self, x) -> np.ndarray:
        return np.asarray(x) @ self.normal - self.offset


@dataclass
class Frame:
    """Posed RGB-D observation plus its semantic index image.

    Arrays are owned by the frame; pipeline stages rewrite ``semantic`` in place
    (globalisation, plane removal).
    """

    color: np.ndarray
    depth: np.ndarray
    semantic: np.ndarray
    pose: Pose
    intrinsics: Intrinsics
    timestamp: int = 0

    def __post_init__(self):
        h, w = self.intrinsics.shape
        if self.depth.shape != (h, w) or self.semantic.shape != (h, w):
            raise GeometryError("depth/semantic shape does not match intrinsics")
        if self.color.shape != (h, w, 3):
            raise GeometryError("color shape does not match intrinsics")
        if np.any(self.depth < 0):
            raise GeometryError("negative depth")

    @classmethod
    def from_depth(cls, depth, pose, intrinsics, color=None, timestamp=0) -> "Frame":
        depth = np.asarray(depth, dtype=np.float64)
        if color is None:
            color = np.zeros(depth.shape + (3,))
        return cls(np.asarray(color, dtype=np.float64), depth, np.zeros(depth.shape, dtype=np.int32),
                   pose, intrinsics, timestamp)

    def copy(self) -> "Frame":
        return Frame(self.color.copy(), self.depth.copy(), self.semantic.copy(),
                     self.pose, self.intrinsics, self.timestamp)


class Projection(NamedTuple):
    uv: np.ndarray
    depth: float
    in_front: bool


def backproject(u, depth: float, intrinsics: Intrinsics, pose: Pose) -> np.ndarray:
    if not depth > 0:
        raise InvalidDepthError(f"depth must be positive, got {depth}")
    u = np.asarray(u, dtype=np.float64)
    if not intrinsics.contains(u):
        raise OutOfBoundsError(f"pixel {tuple(u)} outside image")
    xc = np.array([(u[0] - intrinsics.cx) / intrinsics.fx * depth,
                   (u[1] - intrinsics.cy) / intrinsics.fy * depth,
                   depth])
    return pose.rotation @ xc + pose.translation


def project(x, intrinsics: Intrinsics, pose: Pose) -> Projection:
    xc = pose.rotation.T @ (_as_vec3(x) - pose.translation)
    z = float(xc[2])
    if z <= 0:
        return Projection(np.array([np.nan, np.nan]), z, False)
    uv = np.array([intrinsics.fx * xc[0] / z + intrinsics.cx,
                   intrinsics.fy * xc[1] / z + intrinsics.cy])
    return Projection(uv, z, True)


def backproject_image(depth: np.ndarray, intrinsics: Intrinsics, pose: Pose,
                      mask: Optional[np.ndarray] = None) -> np.ndarray:
    """World points for the pixels selected by ``mask`` (default: depth > 0), row-major."""
    if mask is None:
        mask = depth > 0
    rows, cols = np.nonzero(mask)
    z = depth[rows, cols]
    xc = np.stack([(cols + 0.5 - intrinsics.cx) / intrinsics.fx * z,
                   (rows + 0.5 - intrinsics.cy) / intrinsics.fy * z,
                   z], axis=-1)
    return pose.to_world(xc)


def project_points(x: np.ndarray, intrinsics: Intrinsics, pose: Pose):
    """Vectorised projection: returns (u, v, z) arrays; u/v are NaN where z <= 0."""
    xc = pose.to_camera(x)
    z = xc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(z > 0, intrinsics.fx * xc[..., 0] / z + intrinsics.cx, np.nan)
        v = np.where(z > 0, intrinsics.fy * xc[..., 1] / z + intrinsics.cy, np.nan)
    return u, v, z


def camera_rays(intrinsics: Intrinsics, pose: Pose):
    """Per-pixel world ray origins/unit directions plus the z-component of each
    unit direction in camera coordinates (converts ray distance to z-depth)."""
    uv = intrinsics.pixel_centers().reshape(-1, 2)
    dc = np.stack([(uv[:, 0] - intrinsics.cx) / intrinsics.fx,
                   (uv[:, 1] - intrinsics.cy) / intrinsics.fy,
                   np.ones(len(uv))], axis=-1)
    norm = np.linalg.norm(dc, axis=-1, keepdims=True)
    dc = dc / norm
    dirs = dc @ pose.rotation.T
    origins = np.broadcast_to(pose.translation, dirs.shape).copy()
    return origins, dirs, dc[:, 2].copy()


def intersect_ray_plane(ray: Ray, plane: Plane):
    """Analytic ray/plane hit; ``None`` when parallel or behind the origin."""
    denom = float(ray.direction @ plane.normal)
    if abs(denom) < PARALLEL_EPS:
        return None
    t = (plane.offset - float(ray.origin @ plane.normal)) / denom
    if not t > 0:
        return None
    return ray.at(t), t
