"""Tri-state semantic voxel volume: fusion, pruning, deletion and edits.

Labels: ``-1`` empty (E), ``0`` dense/volumetric (D), ``m >= 1`` primitive
voxel (P) carrying global plane id ``m``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import Frame, Pose
from .registry import Registry

EMPTY = -1
DENSE = 0
NO_CHANGE = -2

VOLUME_MAGIC = b"PARFVS1\x00"
_HEADER = struct.Struct("<8s3i3dd")


class UnknownPlaneError(KeyError):
    pass


@dataclass
class SemanticVolume:
    labels: np.ndarray  # (nx, ny, nz) int32, indexed [ix, iy, iz]
    origin: np.ndarray  # world position of the grid's min corner
    voxel_size: float
    epoch: int = 0

    @classmethod
    def empty(cls, bbox_min, bbox_max, voxel_size: float) -> "SemanticVolume":
        bbox_min = np.asarray(bbox_min, dtype=np.float64)
        bbox_max = np.asarray(bbox_max, dtype=np.float64)
        dims = np.maximum(np.ceil((bbox_max - bbox_min) / voxel_size - 1e-9).astype(int), 1)
        return cls(np.full(tuple(dims), EMPTY, dtype=np.int32), bbox_min.copy(), float(voxel_size))

    @classmethod
    def with_resolution(cls, bbox_min, bbox_max, resolution: int = 256) -> "SemanticVolume":
        """Cubic voxels; the longest bbox side gets ``resolution`` voxels."""
        bbox_min = np.asarray(bbox_min, dtype=np.float64)
        bbox_max = np.asarray(bbox_max, dtype=np.float64)
        vs = float(np.max(bbox_max - bbox_min)) / resolution
        return cls.empty(bbox_min, bbox_max, vs)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.labels.shape)

    @property
    def psi(self) -> float:
        return math.sqrt(3.0) * self.voxel_size

    @property
    def bbox_min(self) -> np.ndarray:
        return self.origin

    @property
    def bbox_max(self) -> np.ndarray:
        return self.origin + np.array(self.dims) * self.voxel_size

    def centers_along(self, axis: int) -> np.ndarray:
        return self.origin[axis] + (np.arange(self.dims[axis]) + 0.5) * self.voxel_size

    def center(self, idx) -> np.ndarray:
        return self.origin + (np.asarray(idx, dtype=np.float64) + 0.5) * self.voxel_size

    def voxel_of(self, x) -> Optional[tuple[int, int, int]]:
        i = np.floor((np.asarray(x, dtype=np.float64) - self.origin) / self.voxel_size).astype(int)
        if np.any(i < 0) or np.any(i >= np.array(self.dims)):
            return None
        return tuple(int(v) for v in i)

    def counts(self) -> dict[str, int]:
        lab = self.labels
        return {"E": int((lab == EMPTY).sum()), "D": int((lab == DENSE).sum()),
                "P": int((lab >= 1).sum())}

    def copy(self) -> "SemanticVolume":
        return SemanticVolume(self.labels.copy(), self.origin.copy(), self.voxel_size, self.epoch)

    # -- checkpoint ------------------------------------------------------------

    def save(self, path) -> None:
        nx, ny, nz = self.dims
        header = _HEADER.pack(VOLUME_MAGIC, nx, ny, nz, *self.origin.tolist(), self.voxel_size)
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(self.labels.ravel(order="F"), dtype="<i4").tobytes())

    @classmethod
    def load(cls, path) -> "SemanticVolume":
        raw = Path(path).read_bytes()
        magic, nx, ny, nz, ox, oy, oz, vs = _HEADER.unpack_from(raw)
        if magic != VOLUME_MAGIC:
            raise ValueError(f"{path}: not a semantic volume checkpoint")
        data = np.frombuffer(raw, dtype="<i4", offset=_HEADER.size, count=nx * ny * nz)
        labels = data.reshape((nx, ny, nz), order="F").astype(np.int32)
        return cls(np.ascontiguousarray(labels), np.array([ox, oy, oz]), vs)


@dataclass
class FusionStats:
    """Voxel label transitions for one fused frame, keyed ``"E->P"`` etc."""

    transitions: dict[str, int] = field(default_factory=dict)
    touched: int = 0

    @property
    def changed(self) -> int:
        return sum(v for k, v in self.transitions.items() if k[0] != k[-1])


def _kind(labels: np.ndarray) -> np.ndarray:
    return np.where(labels < 0, 0, np.where(labels == 0, 1, 2))


def _pixel_plane_depth(frame: Frame, registry: Registry) -> np.ndarray:
    """z-depth where each primitive pixel's ray meets its plane (NaN otherwise)."""
    intr, pose = frame.intrinsics, frame.pose
    h, w = intr.shape
    sem = frame.semantic
    out = np.full((h, w), np.nan)
    prim = sem > 0
    if not prim.any():
        return out
    normals, offsets, alive = registry.plane_table()
    rows, cols = np.nonzero(prim)
    ids = sem[rows, cols]
    ok = (ids < len(alive)) & alive[np.minimum(ids, len(alive) - 1)]
    rows, cols, ids = rows[ok], cols[ok], ids[ok]
    # camera ray with unit z component, so the hit parameter is z-depth directly
    dc = np.stack([(cols + 0.5 - intr.cx) / intr.fx, (rows + 0.5 - intr.cy) / intr.fy,
                   np.ones(len(rows))], axis=-1)
    dw = dc @ pose.rotation.T
    n = normals[ids]
    denom = np.einsum("ij,ij->i", dw, n)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = (offsets[ids] - n @ pose.translation) / denom
    z[(np.abs(denom) < 1e-9) | ~(z > 0)] = np.nan
    out[rows, cols] = z
    return out


def _classify(z, depth_obs, plane_depth, prim, B1, B2, depth_guided=False):
    """Per-voxel new label code given its camera depth and its pixel's data.

    Bands are half-open ``[lower, upper)``.  Returns codes: NO_CHANGE, EMPTY,
    DENSE, or 1 to mark "primitive" (caller substitutes the plane id).
    """
    code = np.full(z.shape, NO_CHANGE, dtype=np.int32)
    nonprim = ~prim
    if depth_guided:
        # the raw depth plays the plane's role: empty in front, dense on and behind
        code[nonprim & (z >= depth_obs - B2) & (z < depth_obs + B1)] = DENSE
        code[nonprim & (z < depth_obs - B2)] = EMPTY
    else:
        code[nonprim & (z >= depth_obs - B1) & (z < depth_obs + B1)] = DENSE
    pd = np.where(prim, plane_depth, np.nan)
    rel = z - pd
    with np.errstate(invalid="ignore"):
        code[prim & (rel >= -B2) & (rel < B2)] = 1
        code[prim & (rel >= B2) & (rel < B1)] = DENSE
        code[prim & (rel < -B2)] = EMPTY
    return code


def classify_voxel(x, frame: Frame, registry: Registry, psi: float,
                   depth_guided: bool = False) -> Optional[int]:
    """New label for the voxel centred at ``x`` from one frame, or None (no change).

    With ``depth_guided`` a non-primitive pixel is banded like a primitive pixel
    whose plane depth is the observed depth, except that the voxels on the
    surface become D: E in front of ``I_D - B2``, D on ``[I_D - B2, I_D + B1)``.
    """
    intr, pose = frame.intrinsics, frame.pose
    xc = pose.rotation.T @ (np.asarray(x, dtype=np.float64) - pose.translation)
    z = xc[2]
    if z <= 0:
        return None
    u = intr.fx * xc[0] / z + intr.cx
    v = intr.fy * xc[1] / z + intr.cy
    if not (0 <= u < intr.width and 0 <= v < intr.height):
        return None
    col, row = int(math.floor(u)), int(math.floor(v))
    d_obs = frame.depth[row, col]
    if not d_obs > 0:
        return None
    B1, B2 = 6.0 * psi, psi
    m = int(frame.semantic[row, col])
    if m > 0 and m in registry and registry.get(m).alive:
        plane = registry.get(m)
        ray = pose.rotation @ np.array([(col + 0.5 - intr.cx) / intr.fx,
                                        (row + 0.5 - intr.cy) / intr.fy, 1.0])
        denom = float(ray @ plane.normal)
        if abs(denom) < 1e-9:
            return None
        s = (plane.offset - float(plane.normal @ pose.translation)) / denom
        if not s > 0:
            return None
        rel = z - s
        if -B2 <= rel < B2:
            return m
        if B2 <= rel < B1:
            return DENSE
        if rel < -B2:
            return EMPTY
        return None
    if depth_guided:
        if z < d_obs - B2:
            return EMPTY
        return DENSE if z < d_obs + B1 else None
    if d_obs - B1 <= z < d_obs + B1:
        return DENSE
    return None


def fuse_frame(vol: SemanticVolume, frame: Frame, registry: Registry,
               depth_guided: bool = False) -> FusionStats:
    """Fuse one globalised frame into ``vol`` in place (see ``classify_voxel``)."""
    intr, pose = frame.intrinsics, frame.pose
    h, w = intr.shape
    psi = vol.psi
    B1, B2 = 6.0 * psi, psi
    depth = frame.depth
    sem = frame.semantic.astype(np.int64)
    _, _, alive = registry.plane_table()
    sem_ok = (sem > 0) & (sem < len(alive))
    sem_alive = np.zeros_like(sem_ok)
    sem_alive[sem_ok] = alive[sem[sem_ok]]
    plane_depth = _pixel_plane_depth(frame, registry)
    dead_ids = np.array([p.id for p in registry.planes if not p.alive], dtype=np.int64)

    nx, ny, nz = vol.dims
    xs, ys, zs = (vol.centers_along(a) for a in range(3))
    R, t = pose.rotation, pose.translation
    stats = np.zeros((3, 3), dtype=np.int64)
    touched = 0
    if not (depth > 0).any():
        return FusionStats(_stats_dict(stats), 0)

    yy, zz = np.meshgrid(ys, zs, indexing="ij")
    base = np.stack([np.zeros_like(yy), yy, zz], axis=-1) - t  # (ny, nz, 3)
    base_c = base @ R  # camera coords without the x contribution
    for ix in range(nx):
        xc = base_c + (xs[ix]) * R[0]  # R^T applied to (x, 0, 0) is x * R[0, :]
        z = xc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = intr.fx * xc[..., 0] / z + intr.cx
            v = intr.fy * xc[..., 1] / z + intr.cy
        inside = (z > 0) & (u >= 0) & (u < w) & (v >= 0) & (v < h)
        if not inside.any():
            continue
        col = np.where(inside, np.floor(np.where(inside, u, 0)), 0).astype(np.int64)
        row = np.where(inside, np.floor(np.where(inside, v, 0)), 0).astype(np.int64)
        d_obs = depth[row, col]
        valid = inside & (d_obs > 0)
        if not valid.any():
            continue
        prim = valid & sem_alive[row, col]
        code = _classify(z, d_obs, plane_depth[row, col], prim, B1, B2, depth_guided)
        code[~valid] = NO_CHANGE
        code[prim & np.isnan(plane_depth[row, col])] = NO_CHANGE
        new = np.where(code == 1, sem[row, col], code).astype(np.int32)

        old = vol.labels[ix]
        if dead_ids.size:
            demote = valid & np.isin(old, dead_ids)
            old = np.where(demote, DENSE, old).astype(np.int32)
        result = old.copy()
        write_p = new >= 1
        write_d = (new == DENSE) & (old < 1)
        write_e = new == EMPTY
        result[write_p] = new[write_p]
        result[write_d] = DENSE
        result[write_e] = EMPTY

        touched += int(valid.sum())
        before, after = _kind(vol.labels[ix][valid]), _kind(result[valid])
        np.add.at(stats, (before, after), 1)
        vol.labels[ix] = result
    vol.epoch += 1
    return FusionStats(_stats_dict(stats), touched)


def _stats_dict(stats):
    names = "EDP"
    return {f"{names[i]}->{names[j]}": int(stats[i, j]) for i in range(3) for j in range(3)}


def prune_voxels(vol: SemanticVolume, field, density_threshold: float = 0.01,
                 chunk: int = 65536) -> int:
    """Demote D voxels whose centre density is below the threshold to E."""
    idx = np.argwhere(vol.labels == DENSE)
    if len(idx) == 0:
        return 0
    pruned = 0
    for s in range(0, len(idx), chunk):
        part = idx[s:s + chunk]
        sigma = field.density(vol.center(part))
        low = part[sigma < density_threshold]
        vol.labels[low[:, 0], low[:, 1], low[:, 2]] = EMPTY
        pruned += len(low)
    if pruned:
        vol.epoch += 1
    return pruned


def delete_primitive(vol: SemanticVolume, plane_id: int, registry: Optional[Registry] = None) -> int:
    if plane_id < 1:
        raise ValueError("plane ids start at 1")
    mask = vol.labels == plane_id
    count = int(mask.sum())
    known = registry is not None and plane_id in registry
    if count == 0 and not known:
        raise UnknownPlaneError(plane_id)
    vol.labels[mask] = EMPTY
    if known:
        registry.kill(plane_id)
    vol.epoch += 1
    return count


# -- editing -------------------------------------------------------------------


@dataclass
class EditState:
    """Editing volume plus its rigid transforms.

    ``edit_labels[v] = k`` means samples inside voxel ``v`` are mapped by
    transform ``k`` (1-based) before the field is queried, and the semantic
    label driving the march is read from ``reference_labels`` at the mapped
    position.  ``reference_labels`` is the semantic volume as it was when the
    first transform edit was recorded.
    """

    edit_labels: np.ndarray
    transforms: list[np.ndarray] = field(default_factory=list)  # each 3x4 [R | t]
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    voxel_size: float = 1.0
    reference_labels: Optional[np.ndarray] = None

    @classmethod
    def for_volume(cls, vol: SemanticVolume) -> "EditState":
        return cls(np.zeros(vol.dims, dtype=np.int32), [], vol.origin.copy(), vol.voxel_size)

    @property
    def is_identity(self) -> bool:
        return not self.transforms or not self.edit_labels.any()

    def transform_array(self) -> np.ndarray:
        if not self.transforms:
            return np.zeros((1, 3, 4))
        return np.stack([np.eye(3, 4)] + list(self.transforms))

    def add_transform(self, T) -> int:
        T = np.asarray(T, dtype=np.float64)
        T = T[:3, :4] if T.shape[0] == 4 else T.reshape(3, 4)
        R = T[:, :3]
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1) > 1e-6:
            raise ValueError("edit transforms must be rigid")
        self.transforms.append(T.copy())
        return len(self.transforms)

    def label_at(self, x) -> int:
        i = np.floor((np.asarray(x, dtype=np.float64) - self.origin) / self.voxel_size).astype(int)
        if np.any(i < 0) or np.any(i >= np.array(self.edit_labels.shape)):
            return 0
        return int(self.edit_labels[tuple(i)])


def apply_edit(edit: EditState, x, d):
    x = np.asarray(x, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    k = edit.label_at(x)
    if k == 0:
        return x, d
    T = edit.transforms[k - 1]
    return T[:, :3] @ x + T[:, 3], T[:, :3] @ d


def _rigid_inverse(T: np.ndarray) -> np.ndarray:
    R, t = T[:3, :3], T[:3, 3]
    out = np.zeros((3, 4))
    out[:, :3] = R.T
    out[:, 3] = -R.T @ t
    return out


def _ensure_reference(vol: SemanticVolume, edit: EditState):
    if edit.reference_labels is None:
        edit.reference_labels = vol.labels.copy()


def _map_centers(vol, idx, T):
    c = vol.center(idx)
    return c @ T[:3, :3].T + T[:3, 3]


def _indices_of(vol, pts):
    i = np.floor((pts - vol.origin) / vol.voxel_size).astype(np.int64)
    ok = np.all((i >= 0) & (i < np.array(vol.dims)), axis=1)
    return i, ok


def _record_move(vol: SemanticVolume, edit: EditState, source_mask: np.ndarray, T, clear_labels):
    """Shared body of region/primitive moves: mark destination voxels, clear source."""
    T = np.asarray(T, dtype=np.float64)
    T = T[:3, :4] if T.shape[0] == 4 else T.reshape(3, 4)
    inv = _rigid_inverse(T)
    _ensure_reference(vol, edit)
    k = edit.add_transform(inv)
    # destination: voxels whose pre-image centre lands in the source set
    src_idx = np.argwhere(source_mask)
    if len(src_idx) == 0:
        return k, 0
    lo = src_idx.min(axis=0)
    hi = src_idx.max(axis=0) + 1
    corners = np.array([[a, b, c] for a in (lo[0], hi[0]) for b in (lo[1], hi[1]) for c in (lo[2], hi[2])])
    world = vol.origin + corners * vol.voxel_size
    moved = world @ T[:3, :3].T + T[:3, 3]
    dlo = np.maximum(np.floor((moved.min(0) - vol.origin) / vol.voxel_size).astype(int) - 1, 0)
    dhi = np.minimum(np.ceil((moved.max(0) - vol.origin) / vol.voxel_size).astype(int) + 1, vol.dims)
    grid = np.stack(np.meshgrid(*[np.arange(a, b) for a, b in zip(dlo, dhi)], indexing="ij"), -1).reshape(-1, 3)
    pre = _map_centers(vol, grid, inv)
    pi, ok = _indices_of(vol, pre)
    hit = np.zeros(len(grid), dtype=bool)
    hit[ok] = source_mask[pi[ok, 0], pi[ok, 1], pi[ok, 2]]
    dest = grid[hit]
    # source voxels stop rendering where nothing is moved into them
    clear = source_mask & np.isin(vol.labels, clear_labels)
    clear[dest[:, 0], dest[:, 1], dest[:, 2]] = False
    vol.labels[clear] = EMPTY
    edit.edit_labels[dest[:, 0], dest[:, 1], dest[:, 2]] = k
    vol.epoch += 1
    return k, len(dest)


def transform_region(vol: SemanticVolume, edit: EditState, aabb_min, aabb_max, T) -> int:
    """Rigidly move the non-primitive content of an axis-aligned box."""
    lo = np.asarray(aabb_min, dtype=np.float64)
    hi = np.asarray(aabb_max, dtype=np.float64)
    xs, ys, zs = (vol.centers_along(a) for a in range(3))
    mx = (xs >= lo[0]) & (xs <= hi[0])
    my = (ys >= lo[1]) & (ys <= hi[1])
    mz = (zs >= lo[2]) & (zs <= hi[2])
    box = mx[:, None, None] & my[None, :, None] & mz[None, None, :]
    ref = edit.reference_labels if edit.reference_labels is not None else vol.labels
    source = box & (ref == DENSE)
    k, _ = _record_move(vol, edit, source, T, [DENSE])
    return k


def transform_primitive(vol: SemanticVolume, edit: EditState, plane_id: int, T) -> int:
    ref = edit.reference_labels if edit.reference_labels is not None else vol.labels
    source = ref == plane_id
    if not source.any():
        raise UnknownPlaneError(plane_id)
    k, _ = _record_move(vol, edit, source, T, [plane_id])
    return k


def save_edit(edit: EditState, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    SemanticVolume(edit.edit_labels, edit.origin, edit.voxel_size).save(d / "edit_volume.bin")
    if edit.reference_labels is not None:
        SemanticVolume(edit.reference_labels, edit.origin, edit.voxel_size).save(d / "reference.bin")
    lines = [" ".join(f"{v:.17g}" for v in T.ravel()) for T in edit.transforms]
    (d / "transforms.txt").write_text("\n".join(lines) + ("\n" if lines else ""))


def load_edit(directory) -> EditState:
    d = Path(directory)
    ev = SemanticVolume.load(d / "edit_volume.bin")
    ref = SemanticVolume.load(d / "reference.bin").labels if (d / "reference.bin").exists() else None
    transforms = [np.array([float(v) for v in line.split()]).reshape(3, 4)
                  for line in (d / "transforms.txt").read_text().splitlines() if line.strip()]
    return EditState(ev.labels, transforms, ev.origin, ev.voxel_size, ref)
