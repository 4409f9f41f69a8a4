"""Losses, the optimisation loop and the incremental fuse-then-train driver.

Three sampling modes share one loop:

``primitive``
    hybrid marching over the fused E/D/P volume (the method itself);
``dense``
    the same field trained on a volume fused with planes disabled, so every
    observed surface is covered by D voxels;
``depth``
    direct depth guidance: planes disabled and every pixel fused at its raw
    depth, so rays sample only on and behind the observed surfaces and the
    space in front of them is carved empty, in training and rendering alike.

``fusion_for`` gives the fusion settings for each mode.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .detector import DetectorConfig
from .field import EncodingConfig, MLPConfig, RadianceField
from .geometry import Frame, camera_rays
from .metrics import mse_to_psnr, psnr, ssim
from .pipeline import FusionConfig, Reconstruction, new_reconstruction
from .registry import Registry
from .render import KIND_P, RaySamples, RenderConfig, composite, composite_backward, march_rays, render_image
from .volume import SemanticVolume, prune_voxels

SAMPLING_MODES = ("primitive", "dense", "depth")
LOG_COLUMNS = ["step", "wall_time_s", "L_c", "L_d", "L_s", "L_reg", "lr", "psnr_train", "psnr_holdout"]


class EmptyBatchError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message: str, ray: int):
        super().__init__(message)
        self.ray = ray


@dataclass(frozen=True)
class TrainConfig:
    lambda1: float = 1.0  # depth
    lambda2: float = 0.04  # semantic
    lambda3: float = 0.001  # opacity regulariser
    lr_start: float = 1e-2
    lr_end: float = 3e-4
    rays_per_batch: int = 8192
    iters_per_epoch: int = 1000
    epochs: int = 5
    prune_every: int = 500
    prune_threshold: float = 0.01
    mode: str = "batch"  # batch | incremental
    incremental_rate: float = 10.0  # simulated frames per second
    sim_step_time: float = 0.01  # simulated seconds charged per training step
    sampling: str = "primitive"
    reg_variant: str = "printed"  # printed: -o log o; entropy: full binary entropy
    log_every: int = 100
    seed: int = 0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lr_start", "lr_end", "incremental_rate", "sim_step_time"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("rays_per_batch", "iters_per_epoch", "epochs", "prune_every", "log_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.mode not in ("batch", "incremental"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.sampling not in SAMPLING_MODES:
            raise ValueError(f"unknown sampling mode {self.sampling!r}")
        if self.reg_variant not in ("printed", "entropy"):
            raise ValueError(f"unknown reg_variant {self.reg_variant!r}")

    @property
    def total_iters(self) -> int:
        return self.iters_per_epoch * self.epochs

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def learning_rate(i: int, total: int, lr_start: float, lr_end: float) -> float:
    """Cosine annealing from ``lr_start`` at step 0 to ``lr_end`` at ``total``."""
    frac = min(max(i / total, 0.0), 1.0) if total > 0 else 1.0
    return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + math.cos(math.pi * frac))


# -- losses ----------------------------------------------------------------------


@dataclass
class LossReport:
    L_c: float
    L_d: float
    L_s: float
    L_reg: float
    L_total: float
    # per-ray gradients of L_total, handed to the compositor backward
    g_color: np.ndarray = field(repr=False, default=None)
    g_depth: np.ndarray = field(repr=False, default=None)
    g_semantic: np.ndarray = field(repr=False, default=None)
    g_opacity: np.ndarray = field(repr=False, default=None)
    n_rays: int = 0

    def row(self) -> dict:
        return {"L_c": self.L_c, "L_d": self.L_d, "L_s": self.L_s, "L_reg": self.L_reg}


def compute_losses(color, depth, semantic, opacity, c_gt, d_gt, s_gt, depth_valid, sem_valid,
                   cfg: TrainConfig = TrainConfig()) -> LossReport:
    """Weighted loss terms (means over contributing rays) and their per-ray gradients.

    ``color``/``depth``/``semantic``/``opacity`` are the composited per-ray
    predictions; depth is measured along the ray in the same units as ``d_gt``.
    """
    color = np.asarray(color, dtype=np.float64)
    n = len(color)
    if n == 0:
        raise EmptyBatchError("loss needs at least one ray")
    depth = np.asarray(depth, dtype=np.float64)
    semantic = np.asarray(semantic, dtype=np.float64)
    opacity = np.asarray(opacity, dtype=np.float64)
    depth_valid = np.asarray(depth_valid, dtype=bool)
    sem_valid = np.asarray(sem_valid, dtype=bool)

    dc = color - c_gt
    L_c = float(np.sum(dc * dc) / n)
    g_color = 2.0 * dc / n

    nd = int(depth_valid.sum())
    g_depth = np.zeros(n)
    L_d = 0.0
    if nd:
        dd = np.where(depth_valid, depth - np.where(depth_valid, d_gt, 0.0), 0.0)
        L_d = float(np.sum(dd * dd) / nd)
        g_depth = cfg.lambda1 * 2.0 * dd / nd

    ns = int(sem_valid.sum())
    g_sem = np.zeros_like(semantic)
    L_s = 0.0
    if ns:
        ds = np.where(sem_valid[:, None], semantic - np.where(sem_valid[:, None], s_gt, 0.0), 0.0)
        L_s = float(np.sum(ds * ds) / ns)
        g_sem = cfg.lambda2 * 2.0 * ds / ns

    if cfg.reg_variant == "printed":
        o = np.clip(opacity, 1e-7, 1.0)
        reg = -o * np.log(o)
        dreg = -(np.log(o) + 1.0)
    else:
        o = np.clip(opacity, 1e-7, 1.0 - 1e-7)
        reg = -o * np.log(o) - (1.0 - o) * np.log(1.0 - o)
        dreg = np.log(1.0 - o) - np.log(o)
    inside = (opacity >= 1e-7) & (opacity <= 1.0)
    if cfg.reg_variant == "entropy":
        inside &= opacity <= 1.0 - 1e-7
    L_reg = float(np.sum(reg) / n)
    g_opacity = cfg.lambda3 * np.where(inside, dreg, 0.0) / n

    total = L_c + cfg.lambda1 * L_d + cfg.lambda2 * L_s + cfg.lambda3 * L_reg
    return LossReport(L_c, L_d, L_s, L_reg, total, g_color, g_depth, g_sem, g_opacity, n)


# -- ray pool --------------------------------------------------------------------


@dataclass
class RayPool:
    """Every training pixel as a ray with its supervision targets."""

    origins: np.ndarray
    dirs: np.ndarray
    color: np.ndarray
    depth: np.ndarray  # ray distance; 0 where the pixel has no valid depth
    semantic_id: np.ndarray  # global plane id of the pixel, 0 for none
    frame_index: np.ndarray

    @classmethod
    def from_frames(cls, frames: Sequence[Frame], first_index: int = 0) -> "RayPool":
        parts = []
        for k, fr in enumerate(frames):
            o, d, zfac = camera_rays(fr.intrinsics, fr.pose)
            z = fr.depth.reshape(-1)
            parts.append((o, d, fr.color.reshape(-1, 3), np.where(z > 0, z / zfac, 0.0),
                          fr.semantic.reshape(-1).astype(np.int64), np.full(len(z), first_index + k)))
        if not parts:
            z3 = np.zeros((0, 3))
            return cls(z3, z3, z3, np.zeros(0), np.zeros(0, np.int64), np.zeros(0, np.int64))
        return cls(*(np.concatenate(p) for p in zip(*parts)))

    def __len__(self):
        return len(self.depth)

    def extend(self, other: "RayPool") -> "RayPool":
        return RayPool(*(np.concatenate([a, b]) for a, b in
                         zip((self.origins, self.dirs, self.color, self.depth, self.semantic_id, self.frame_index),
                             (other.origins, other.dirs, other.color, other.depth, other.semantic_id,
                              other.frame_index))))

    def semantic_targets(self, registry: Registry, scene_radius: float):
        """``(n, d / scene_radius)`` targets and the mask of rays that carry one."""
        normals, offsets, alive = registry.plane_table()
        ids = self.semantic_id
        ok = (ids > 0) & (ids < len(alive))
        ok[ok] = alive[ids[ok]]
        tgt = np.zeros((len(ids), 4))
        tgt[ok, :3] = normals[ids[ok]]
        tgt[ok, 3] = offsets[ids[ok]] / scene_radius
        return tgt, ok


# -- training state ----------------------------------------------------------------


@dataclass
class TrainResult:
    field: RadianceField
    volume: SemanticVolume
    registry: Registry
    log: list[dict]
    steps: int
    pruned: int = 0
    reconstruction: Optional[Reconstruction] = None

    def write_log(self, path) -> None:
        write_log(self.log, path)


def write_log(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in LOG_COLUMNS})


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (float(v) if v not in ("", None) else None) for k, v in row.items()}
                for row in csv.DictReader(fh)]


class Trainer:
    """Owns the field, the volume snapshot used for sampling and the optimiser clock."""

    def __init__(self, field: RadianceField, volume: SemanticVolume, registry: Registry,
                 cfg: TrainConfig, render_cfg: RenderConfig = RenderConfig(),
                 holdout: Sequence[Frame] = ()):
        self.field = field
        self.volume = volume
        self.registry = registry
        self.cfg = cfg
        self.render_cfg = render_cfg
        self.holdout = list(holdout)
        self.rng = np.random.default_rng(cfg.seed)
        self.pool = RayPool.from_frames([])
        self.step = 0
        self.pruned = 0
        self.log: list[dict] = []
        self._cache: Optional[RaySamples] = None
        self._cache_epoch = -1
        self._order = np.zeros(0, dtype=np.int64)
        self._cursor = 0
        self._t0 = time.perf_counter()
        self._recent: list[tuple[float, float]] = []  # (colour sse, ray count) since last log

    # -- data ----------------------------------------------------------------------

    def add_frames(self, frames: Sequence[Frame]) -> None:
        first = int(self.pool.frame_index.max()) + 1 if len(self.pool) else 0
        self.pool = self.pool.extend(RayPool.from_frames(frames, first))
        self._invalidate()
        self._reshuffle()

    def _invalidate(self):
        self._cache = None

    def _reshuffle(self):
        self._order = self.rng.permutation(len(self.pool))
        self._cursor = 0

    def _samples(self) -> RaySamples:
        if self._cache is None or self._cache_epoch != self.volume.epoch:
            s = march_rays(self.pool.origins, self.pool.dirs, self.volume, self.registry, None, self.render_cfg)
            self._cache = s
            self._cache_epoch = self.volume.epoch
            self._sem_target, self._sem_valid = self.pool.semantic_targets(self.registry, self.field.scene_radius)
        return self._cache

    def next_batch(self) -> np.ndarray:
        n = min(self.cfg.rays_per_batch, len(self.pool))
        if n == 0:
            raise EmptyBatchError("no training rays available")
        if self._cursor + n > len(self._order):
            self._reshuffle()
        idx = self._order[self._cursor:self._cursor + n]
        self._cursor += n
        return idx

    # -- optimisation ------------------------------------------------------------------

    def lr(self, step: Optional[int] = None) -> float:
        i = self.step if step is None else step
        return learning_rate(i, self.cfg.total_iters, self.cfg.lr_start, self.cfg.lr_end)

    def train_step(self, rays: Optional[np.ndarray] = None) -> LossReport:
        if not (self.volume.labels >= 0).any():
            raise ValueError("semantic volume has no D or P voxels to sample")
        rays = self.next_batch() if rays is None else np.asarray(rays, dtype=np.int64)
        samples = self._samples().select_rays(rays)
        x, d = samples.query_inputs(None)
        out, cache = self.field.forward(x, d)
        res = composite(out.sigma, out.color, out.semantic, samples.t, samples.delta, samples.offsets)
        pool = self.pool
        rep = compute_losses(res.color, res.depth, res.semantic, res.opacity,
                             pool.color[rays], pool.depth[rays], self._sem_target[rays],
                             pool.depth[rays] > 0, self._sem_valid[rays], self.cfg)
        if not math.isfinite(rep.L_total):
            bad = ~(np.isfinite(res.color).all(1) & np.isfinite(res.depth) & np.isfinite(res.opacity))
            ray = int(rays[np.argmax(bad)]) if bad.any() else int(rays[0])
            raise NonFiniteLossError(f"non-finite loss at step {self.step} (ray {ray})", ray)
        d_sigma, d_color, d_sem = composite_backward(res, rep.g_color, rep.g_depth, rep.g_semantic, rep.g_opacity)
        self.field.zero_grad()
        self.field.backward(cache, d_sigma, d_color, d_sem)
        self.field.adam_step(self.lr())
        self.step += 1
        self._recent.append((rep.L_c * rep.n_rays, rep.n_rays, rep))
        if self.step % self.cfg.prune_every == 0:
            self.pruned += prune_voxels(self.volume, self.field, self.cfg.prune_threshold)
        if self.step % self.cfg.log_every == 0 or self.step == self.cfg.total_iters:
            self._log_row()
        return rep

    def _log_row(self):
        if not self._recent:
            return
        sse = sum(r[0] for r in self._recent)
        cnt = sum(r[1] for r in self._recent)
        last = self._recent[-1][2]
        # L_c is a per-ray sum over 3 channels; PSNR uses the per-channel mean
        row = {"step": self.step, "wall_time_s": round(time.perf_counter() - self._t0, 3),
               **last.row(), "lr": self.lr(), "psnr_train": mse_to_psnr(sse / cnt / 3.0)}
        if self.holdout:
            row["psnr_holdout"] = float(np.mean([m["psnr"] for m in
                                                 evaluate_views(self, self.holdout)]))
        self.log.append(row)
        self._recent = []

    def result(self, reconstruction: Optional[Reconstruction] = None) -> TrainResult:
        return TrainResult(self.field, self.volume, self.registry, self.log, self.step, self.pruned, reconstruction)


# -- evaluation ------------------------------------------------------------------------


def render_views(field: RadianceField, volume: SemanticVolume, registry: Registry, frames: Sequence[Frame],
                 render_cfg: RenderConfig = RenderConfig(), edit=None) -> list[dict]:
    return [render_image(fr.pose, fr.intrinsics, volume, registry, field, edit, render_cfg) for fr in frames]


def evaluate_views(source, frames: Sequence[Frame], render_cfg: Optional[RenderConfig] = None) -> list[dict]:
    """Per-view PSNR/SSIM of a trainer or result against ground-truth frames."""
    rcfg = render_cfg or getattr(source, "render_cfg", RenderConfig())
    out = []
    for fr, img in zip(frames, render_views(source.field, source.volume, source.registry, frames, rcfg)):
        pred = np.clip(img["color"], 0.0, 1.0)
        out.append({"psnr": psnr(pred, fr.color), "ssim": ssim(pred, fr.color)})
    return out


# -- drivers -------------------------------------------------------------------------


def make_field(volume: SemanticVolume, seed: int = 0, encoding: EncodingConfig = EncodingConfig(),
               mlp: MLPConfig = MLPConfig()) -> RadianceField:
    return RadianceField(volume.bbox_min, volume.bbox_max, encoding, mlp, seed=seed)


def fusion_for(sampling: str, fusion: FusionConfig = FusionConfig()) -> FusionConfig:
    """Fusion settings that realise a sampling mode."""
    if sampling not in SAMPLING_MODES:
        raise ValueError(f"unknown sampling mode {sampling!r}")
    return replace(fusion, use_planes=fusion.use_planes and sampling == "primitive",
                   depth_guided=sampling == "depth")


def run_batch_training(rec: Reconstruction, cfg: TrainConfig, field: Optional[RadianceField] = None,
                       render_cfg: RenderConfig = RenderConfig(), holdout: Sequence[Frame] = (),
                       callback: Optional[Callable[[Trainer], None]] = None) -> TrainResult:
    """Train on frames that were all fused before the first step."""
    if not rec.frames:
        raise ValueError("reconstruction has no frames")
    field = field or make_field(rec.volume, cfg.seed)
    tr = Trainer(field, rec.volume, rec.registry, cfg, render_cfg, holdout)
    tr.add_frames(rec.frames)
    for _ in range(cfg.total_iters):
        tr.train_step()
        if callback is not None:
            callback(tr)
    return tr.result(rec)


def run_incremental(frames: Sequence[Frame], bbox_min, bbox_max, cfg: TrainConfig,
                    fusion: FusionConfig = FusionConfig(), detector: Optional[DetectorConfig] = None,
                    field: Optional[RadianceField] = None, render_cfg: RenderConfig = RenderConfig(),
                    holdout: Sequence[Frame] = (),
                    callback: Optional[Callable[[Trainer], None]] = None) -> TrainResult:
    """Fuse frames as they arrive on a simulated clock while training continuously.

    Frame ``k`` arrives at ``k / incremental_rate`` seconds; every training step
    advances the clock by ``sim_step_time``.  A frame is detected, merged and
    fused before the next step, so its planes and rays are available at once.
    Frames arriving after the step budget is spent are still fused.
    """
    frames = list(frames)
    if not frames:
        raise ValueError("no frames to stream")
    fusion = fusion_for(cfg.sampling, fusion)
    rec = new_reconstruction(bbox_min, bbox_max, fusion, cfg.seed)
    field = field or make_field(rec.volume, cfg.seed)
    tr = Trainer(field, rec.volume, rec.registry, cfg, render_cfg, holdout)
    arrived = 0
    for step in range(cfg.total_iters):
        clock = step * cfg.sim_step_time
        new = []
        while arrived < len(frames) and arrived / cfg.incremental_rate <= clock + 1e-12:
            rec.ingest(frames[arrived], detector, fusion.use_planes, fusion.depth_guided)
            new.append(rec.frames[-1])
            arrived += 1
        if new:
            tr.add_frames(new)
        tr.train_step()
        if callback is not None:
            callback(tr)
    while arrived < len(frames):
        rec.ingest(frames[arrived], detector, fusion.use_planes, fusion.depth_guided)
        arrived += 1
    return tr.result(rec)
