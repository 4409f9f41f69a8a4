"""Global plane list maintained across frames."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .detector import DegenerateInputError, LocalDetection, fit_plane_pca
from .geometry import Frame, Plane, backproject_image


def plane_distance(a: Plane, b: Plane) -> float:
    """Distance between the closest-to-origin points of two planes."""
    return float(np.linalg.norm(a.offset * a.normal - b.offset * b.normal))


@dataclass
class Registry:
    planes: list[Plane] = field(default_factory=list)
    merge_threshold: float = 0.01
    normal_threshold: float = 0.1
    history_window: int = 10
    max_revalidation_samples: int = 2048
    seed: int = 0

    def __post_init__(self):
        self._rng = np.random.default_rng(self.seed)

    def __len__(self):
        return len(self.planes)

    def get(self, pid: int) -> Plane:
        if not 1 <= pid <= len(self.planes):
            raise KeyError(pid)
        return self.planes[pid - 1]

    def __contains__(self, pid) -> bool:
        return isinstance(pid, (int, np.integer)) and 1 <= pid <= len(self.planes)

    @property
    def alive(self) -> list[Plane]:
        return [p for p in self.planes if p.alive]

    def alive_ids(self) -> np.ndarray:
        return np.array([p.id for p in self.planes if p.alive], dtype=np.int64)

    def add(self, plane: Plane) -> Plane:
        p = replace(plane, id=len(self.planes) + 1, alive=True)
        self.planes.append(p)
        return p

    def kill(self, pid: int) -> None:
        self.planes[pid - 1] = replace(self.planes[pid - 1], alive=False)

    def closest(self, plane: Plane) -> tuple[int, float]:
        """(id, distance) of the nearest alive plane, (0, inf) when none."""
        best_id, best = 0, np.inf
        for p in self.planes:
            if not p.alive:
                continue
            dist = plane_distance(plane, p)
            if dist < best:
                best_id, best = p.id, dist
        return best_id, best

    def plane_table(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Dense arrays indexed by plane id (row 0 unused): normals, offsets, alive."""
        n = len(self.planes) + 1
        normals = np.zeros((n, 3))
        offsets = np.zeros(n)
        alive = np.zeros(n, dtype=bool)
        for p in self.planes:
            normals[p.id] = p.normal
            offsets[p.id] = p.offset
            alive[p.id] = p.alive
        return normals, offsets, alive

    def merge_detection(self, det: LocalDetection, frame: Frame) -> Frame:
        """Map local plane ids to global ids, registering unseen planes.

        ``frame.semantic`` is rewritten in place and the frame returned.
        """
        local = det.semantic if det.semantic is not None else frame.semantic
        out = np.zeros_like(local, dtype=np.int32)
        for k, plane in enumerate(det.planes, start=1):
            gid, dist = self.closest(plane)
            if dist > self.merge_threshold:
                gid = self.add(replace(plane, support_count=int((local == k).sum()))).id
            out[local == k] = gid
        frame.semantic = out
        return frame

    def revalidate_normals(self, recent_frames: list[Frame]) -> list[int]:
        if len(recent_frames) > self.history_window:
            recent_frames = recent_frames[-self.history_window:]
        removed = []
        for plane in self.planes:
            if not plane.alive:
                continue
            chunks = []
            for fr in recent_frames:
                mask = (fr.semantic == plane.id) & (fr.depth > 0)
                if mask.any():
                    chunks.append(backproject_image(fr.depth, fr.intrinsics, fr.pose, mask))
            if not chunks:
                continue
            pts = np.concatenate(chunks)
            if len(pts) > self.max_revalidation_samples:
                idx = self._rng.choice(len(pts), self.max_revalidation_samples, replace=False)
                pts = pts[np.sort(idx)]
            if len(pts) < 3:
                continue
            try:
                fitted, _ = fit_plane_pca(pts)
            except DegenerateInputError:
                continue
            nt = fitted.normal
            if nt @ plane.normal < 0:
                nt = -nt
            if np.linalg.norm(nt - plane.normal) > self.normal_threshold:
                self.kill(plane.id)
                removed.append(plane.id)
        if removed:
            for fr in recent_frames:
                fr.semantic[np.isin(fr.semantic, removed)] = 0
        return removed

    # -- text serialisation: ``id nx ny nz d alive`` per line -----------------

    def dumps(self) -> str:
        lines = []
        for p in self.planes:
            n = p.normal
            lines.append(f"{p.id} {n[0]:.9g} {n[1]:.9g} {n[2]:.9g} {p.offset:.9g} {int(p.alive)}")
        return "\n".join(lines) + ("\n" if lines else "")

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str, **kw) -> "Registry":
        reg = cls(**kw)
        for i, line in enumerate(l for l in text.splitlines() if l.strip()):
            parts = line.split()
            pid = int(parts[0])
            if pid != i + 1:
                raise ValueError(f"plane ids must be consecutive from 1, got {pid} at line {i + 1}")
            n = np.array([float(v) for v in parts[1:4]])
            n /= np.linalg.norm(n)
            reg.planes.append(Plane(n, max(float(parts[4]), 0.0), id=pid, alive=bool(int(parts[5]))))
        return reg

    @classmethod
    def load(cls, path, **kw) -> "Registry":
        return cls.loads(Path(path).read_text(), **kw)


def merge_detection(reg: Registry, det: LocalDetection, frame: Frame) -> Frame:
    return reg.merge_detection(det, frame)


def revalidate_normals(reg: Registry, recent_frames: list[Frame]) -> list[int]:
    return reg.revalidate_normals(recent_frames)
