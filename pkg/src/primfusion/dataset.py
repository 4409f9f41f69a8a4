"""On-disk posed RGB-D datasets.

Layout::

    color/%06d.png      8-bit RGB
    depth/%06d.png      16-bit millimetres, 0 = invalid
    poses.txt           index + 16 row-major values of world-from-camera
    intrinsics.txt      fx fy cx cy width height
    semantic/%06d.png   optional 16-bit plane ids (written for outputs only)
    splits.txt          optional "index split" lines (train / interpolation / extrapolation)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .geometry import Frame, Intrinsics, Pose


class DatasetError(ValueError):
    pass


def write_color(path, img) -> None:
    arr = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def read_color(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_depth(path, depth) -> None:
    mm = np.round(np.asarray(depth, dtype=np.float64) * 1000.0)
    if np.any(mm > 65535):
        raise DatasetError(f"{path}: depth beyond 65.535 m cannot be stored")
    Image.fromarray(np.clip(mm, 0, 65535).astype(np.uint16)).save(path)


def read_depth(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float64) / 1000.0


def write_index_image(path, labels) -> None:
    Image.fromarray(np.asarray(labels).astype(np.uint16)).save(path)


def read_index_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im).astype(np.int32)


def write_f32(path, arr) -> None:
    """Raw little-endian float32, channel-planar (C, H, W)."""
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 3:
        a = np.moveaxis(a, -1, 0)
    np.ascontiguousarray(a, dtype="<f4").tofile(path)


def read_f32(path, shape) -> np.ndarray:
    a = np.fromfile(path, dtype="<f4").astype(np.float64)
    a = a.reshape(shape)
    return np.moveaxis(a, 0, -1) if a.ndim == 3 else a


def format_pose_line(index: int, pose: Pose) -> str:
    return " ".join([str(index)] + [f"{v:.17g}" for v in pose.matrix().ravel()])


def read_poses(path) -> dict[int, Pose]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 17:
            raise DatasetError(f"{path}:{n}: expected index + 16 values, got {len(parts)} fields")
        out[int(parts[0])] = Pose.from_matrix(np.array([float(v) for v in parts[1:]]).reshape(4, 4))
    return out


def write_intrinsics(path, intr: Intrinsics) -> None:
    Path(path).write_text(f"{intr.fx:.17g} {intr.fy:.17g} {intr.cx:.17g} {intr.cy:.17g} "
                          f"{intr.width} {intr.height}\n")


def read_intrinsics(path) -> Intrinsics:
    parts = Path(path).read_text().split()
    if len(parts) != 6:
        raise DatasetError(f"{path}: expected 'fx fy cx cy width height'")
    fx, fy, cx, cy = (float(v) for v in parts[:4])
    return Intrinsics(fx, fy, cx, cy, int(parts[4]), int(parts[5]))


@dataclass
class DatasetDir:
    root: Path
    intrinsics: Intrinsics
    poses: dict[int, Pose]
    splits: dict[int, str] = field(default_factory=dict)

    @classmethod
    def open(cls, root) -> "DatasetDir":
        root = Path(root)
        if not (root / "poses.txt").exists() or not (root / "intrinsics.txt").exists():
            raise DatasetError(f"{root}: not a dataset directory (missing poses.txt or intrinsics.txt)")
        intr = read_intrinsics(root / "intrinsics.txt")
        poses = read_poses(root / "poses.txt")
        splits = {}
        if (root / "splits.txt").exists():
            for line in (root / "splits.txt").read_text().splitlines():
                if line.strip():
                    i, s = line.split()
                    splits[int(i)] = s
        ds = cls(root, intr, poses, splits)
        ds.validate()
        return ds

    @property
    def indices(self) -> list[int]:
        return sorted(self.poses)

    def split(self, name: Optional[str]) -> list[int]:
        if name is None or name == "all":
            return self.indices
        if not self.splits:
            return self.indices if name == "train" else []
        return [i for i in self.indices if self.splits.get(i) == name]

    def validate(self) -> None:
        colors = sorted((self.root / "color").glob("*.png"))
        depths = sorted((self.root / "depth").glob("*.png"))
        if len(colors) != len(self.poses) or len(depths) != len(self.poses):
            raise DatasetError(f"{self.root}: {len(colors)} color, {len(depths)} depth and "
                               f"{len(self.poses)} pose entries do not match")

    def frame(self, index: int) -> Frame:
        color = read_color(self.root / "color" / f"{index:06d}.png")
        depth = read_depth(self.root / "depth" / f"{index:06d}.png")
        if color.shape[:2] != self.intrinsics.shape or depth.shape != self.intrinsics.shape:
            raise DatasetError(f"frame {index}: image size does not match intrinsics")
        return Frame(color, depth, np.zeros(depth.shape, dtype=np.int32), self.poses[index],
                     self.intrinsics, index)

    def frames(self, split: Optional[str] = None) -> list[Frame]:
        return [self.frame(i) for i in self.split(split)]


def write_dataset(root, frames: Sequence[Frame], splits: Optional[Sequence[str]] = None,
                  write_semantic: bool = False) -> DatasetDir:
    root = Path(root)
    (root / "color").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(exist_ok=True)
    if write_semantic:
        (root / "semantic").mkdir(exist_ok=True)
    if not frames:
        raise DatasetError("no frames to write")
    intr = frames[0].intrinsics
    lines = []
    for i, fr in enumerate(frames):
        if fr.intrinsics != intr:
            raise DatasetError("all frames must share one set of intrinsics")
        write_color(root / "color" / f"{i:06d}.png", fr.color)
        write_depth(root / "depth" / f"{i:06d}.png", fr.depth)
        if write_semantic:
            write_index_image(root / "semantic" / f"{i:06d}.png", fr.semantic)
        lines.append(format_pose_line(i, fr.pose))
    (root / "poses.txt").write_text("\n".join(lines) + "\n")
    write_intrinsics(root / "intrinsics.txt", intr)
    if splits is not None:
        (root / "splits.txt").write_text("".join(f"{i} {s}\n" for i, s in enumerate(splits)))
    return DatasetDir.open(root)
