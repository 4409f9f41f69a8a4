"""Frame-by-frame reconstruction front end: detect, merge, re-validate, fuse."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .detector import DetectorConfig, detect_frame
from .geometry import Frame
from .registry import Registry
from .volume import FusionStats, SemanticVolume, fuse_frame


@dataclass(frozen=True)
class FusionConfig:
    voxel_size: float = 0.05
    use_planes: bool = True  # False builds the dense-only (all D) ablation volume
    # non-primitive pixels carve E in front of their observed depth and mark D
    # only on and behind it (the depth-guided sampling ablation)
    depth_guided: bool = False
    history_window: int = 10
    merge_threshold: float = 0.01
    normal_threshold: float = 0.1


@dataclass
class Reconstruction:
    registry: Registry
    volume: SemanticVolume
    frames: list[Frame] = field(default_factory=list)
    stats: list[FusionStats] = field(default_factory=list)
    removed: list[int] = field(default_factory=list)

    def ingest(self, frame: Frame, detector: Optional[DetectorConfig], use_planes: bool = True,
               depth_guided: bool = False) -> FusionStats:
        """Run the per-frame pipeline on a copy of ``frame`` and keep the result.

        The stored frame carries global plane ids in ``semantic`` (all zero when
        planes are disabled).
        """
        fr = frame.copy()
        if use_planes:
            det = detect_frame(fr, detector or DetectorConfig())
            self.registry.merge_detection(det, fr)
        else:
            fr.semantic = np.zeros(fr.depth.shape, dtype=np.int32)
        self.frames.append(fr)
        window = self.registry.history_window
        if use_planes and len(self.frames) % window == 0:
            self.removed += self.registry.revalidate_normals(self.frames[-window:])
        stats = fuse_frame(self.volume, fr, self.registry, depth_guided)
        self.stats.append(stats)
        return stats


def new_reconstruction(bbox_min, bbox_max, cfg: FusionConfig = FusionConfig(), seed: int = 0) -> Reconstruction:
    reg = Registry(merge_threshold=cfg.merge_threshold, normal_threshold=cfg.normal_threshold,
                   history_window=cfg.history_window, seed=seed)
    vol = SemanticVolume.empty(bbox_min, bbox_max, cfg.voxel_size)
    return Reconstruction(reg, vol)


def reconstruct(frames: Iterable[Frame], bbox_min, bbox_max, cfg: FusionConfig = FusionConfig(),
                detector: Optional[DetectorConfig] = None, seed: int = 0) -> Reconstruction:
    rec = new_reconstruction(bbox_min, bbox_max, cfg, seed)
    for fr in frames:
        rec.ingest(fr, detector, cfg.use_planes, cfg.depth_guided)
    return rec


def subsample(frames: list, every: int) -> list:
    """Keep one of every ``every`` frames (observation-sparsity experiments)."""
    if every < 1:
        raise ValueError("sparsity must be >= 1")
    return list(frames[::every])
