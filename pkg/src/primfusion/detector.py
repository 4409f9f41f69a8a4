"""Per-frame plane extraction from a single depth image.

Grid-cell seeding: every ``cell_size`` square of mostly-valid pixels gets a PCA
plane; flat cells are greedily merged into regions whose normals and offsets
agree, each region is refit, pixels are reassigned to the closest plane and the
survivors go through the mean-residual flatness check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter

from .geometry import Frame, Intrinsics, Plane, Pose, backproject_image


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class DetectorConfig:
    cell_size: int = 16
    flatness_threshold: float = 0.005
    min_support: int = 512
    normal_merge_angle: float = math.radians(5.0)
    offset_merge_dist: float | None = None  # defaults to 2 * flatness_threshold
    min_valid_fraction: float = 0.8
    # pixels farther than this many times the plane rms from every plane stay unlabeled
    assign_rms_factor: float = 3.0
    # expected depth noise std; when positive, planes are fitted in inverse depth
    # and membership uses along-ray residuals averaged over a small window
    depth_noise: float = 0.0
    smooth_radius: int = 2

    def __post_init__(self):
        if not self.flatness_threshold > 0:
            raise ValueError("flatness_threshold must be positive")
        if self.cell_size < 4:
            raise ValueError("cell_size must be >= 4")
        if self.min_support < self.cell_size ** 2:
            raise ValueError("min_support must be >= cell_size**2")
        if self.depth_noise < 0 or self.smooth_radius < 0:
            raise ValueError("depth_noise and smooth_radius must be non-negative")

    @property
    def merge_offset(self) -> float:
        if self.offset_merge_dist is None:
            return 2.0 * self.flatness_threshold
        return self.offset_merge_dist

    def for_noise(self, sigma: float) -> "DetectorConfig":
        """Flatness threshold widened for depth noise of std ``sigma``.

        The mean absolute residual of Gaussian noise is ``0.8 * sigma``; 1.5 sigma
        leaves headroom while still rejecting curved or mixed cells.
        """
        from dataclasses import replace
        return replace(self, flatness_threshold=self.flatness_threshold + 1.5 * sigma, depth_noise=sigma)


@dataclass
class LocalDetection:
    planes: list[Plane] = field(default_factory=list)
    semantic: np.ndarray | None = None

    def __len__(self):
        return len(self.planes)


def fit_plane_pca(points) -> tuple[Plane, float]:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 3:
        raise DegenerateInputError("need at least 3 points")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    cov = centered.T @ centered / len(pts)
    evals, evecs = np.linalg.eigh(cov)
    if evals[0] < 1e-12 and evals[1] < 1e-12:
        raise DegenerateInputError("points are collinear")
    n = evecs[:, 0]
    d = float(n @ centroid)
    if d < 0:
        n, d = -n, -d
    n = n / np.linalg.norm(n)
    rms = float(np.sqrt(np.mean((centered @ n) ** 2)))
    return Plane(n, d, support_count=len(pts)), rms


def fit_plane_inverse_depth(depth, mask, intrinsics: Intrinsics, pose: Pose) -> tuple[Plane, float]:
    """Plane fit that treats depth as the only noisy quantity.

    A camera-space plane satisfies ``1/z = a*x + b*y + c`` in normalised image
    coordinates, so the fit is a linear regression of inverse depth. Weighting by
    ``z**2`` turns inverse-depth residuals back into depth residuals. Orthogonal
    PCA is biased here because noise runs along the viewing rays, not along the
    plane normal, and the bias grows with the obliquity of the view.
    """
    rows, cols = np.nonzero(mask)
    if len(rows) < 3:
        raise DegenerateInputError("need at least 3 points")
    z = depth[rows, cols].astype(np.float64)
    A = np.stack([(cols + 0.5 - intrinsics.cx) / intrinsics.fx,
                  (rows + 0.5 - intrinsics.cy) / intrinsics.fy,
                  np.ones(len(z))], axis=1)
    if np.linalg.matrix_rank(A) < 3:
        raise DegenerateInputError("pixels are collinear")
    w = z ** 2
    for _ in range(3):
        coef = np.linalg.lstsq(A * w[:, None], w / z, rcond=None)[0]
        pred = A @ coef
        if not np.all(pred > 0):
            raise DegenerateInputError("plane passes behind the camera")
        w = 1.0 / pred ** 2
    scale = float(np.linalg.norm(coef))
    n = pose.rotation @ (coef / scale)
    d = 1.0 / scale + float(n @ pose.translation)
    if d < 0:
        n, d = -n, -d
    pts = pose.to_world(A * z[:, None])
    rms = float(np.sqrt(np.mean((pts @ n - d) ** 2)))
    return Plane(n, d, support_count=len(z)), rms


def validate_flatness(plane: Plane, points, eps1: float) -> bool:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    err = np.mean(np.abs(pts @ plane.normal - plane.offset))
    return bool(err <= eps1)


def _normals_agree(a: Plane, b: Plane, max_angle: float) -> bool:
    return abs(float(a.normal @ b.normal)) >= math.cos(max_angle)


def _same_plane(a: Plane, b: Plane, cfg: DetectorConfig) -> bool:
    if not _normals_agree(a, b, cfg.normal_merge_angle):
        return False
    sign = 1.0 if a.normal @ b.normal >= 0 else -1.0
    return abs(a.offset - sign * b.offset) <= cfg.merge_offset


def detect_planes(depth: np.ndarray, intrinsics: Intrinsics, pose: Pose,
                  cfg: DetectorConfig = DetectorConfig()) -> LocalDetection:
    h, w = depth.shape
    valid = depth > 0
    semantic = np.zeros((h, w), dtype=np.int32)
    if not valid.any():
        return LocalDetection([], semantic)

    # world coordinates of every pixel (NaN where invalid)
    pts = np.full((h, w, 3), np.nan)
    pts[valid] = backproject_image(depth, intrinsics, pose, valid)

    view = None
    if cfg.depth_noise > 0:
        def fit(mask):
            return fit_plane_inverse_depth(depth, mask, intrinsics, pose)
        rows, cols = np.nonzero(valid)
        ray_cam = np.stack([(cols + 0.5 - intrinsics.cx) / intrinsics.fx,
                            (rows + 0.5 - intrinsics.cy) / intrinsics.fy,
                            np.ones(len(rows))], axis=1)
        # world ray per valid pixel, scaled so that its camera z-component is 1
        view = (depth[valid].astype(np.float64), ray_cam @ pose.rotation.T, pose.translation)
    else:
        def fit(mask):
            return fit_plane_pca(pts[mask])

    cs = cfg.cell_size
    cells = []  # (plane, rms, row-slice, col-slice)
    for r0 in range(0, h - cs + 1, cs):
        for c0 in range(0, w - cs + 1, cs):
            cv = valid[r0:r0 + cs, c0:c0 + cs]
            if cv.mean() < cfg.min_valid_fraction:
                continue
            cmask = np.zeros((h, w), dtype=bool)
            cmask[r0:r0 + cs, c0:c0 + cs] = cv
            cp = pts[cmask]
            try:
                plane, rms = fit(cmask)
            except DegenerateInputError:
                continue
            if not validate_flatness(plane, cp, cfg.flatness_threshold):
                continue
            cells.append((plane, rms, r0, c0))

    if not cells:
        return LocalDetection([], semantic)

    # greedy region growing over the cell adjacency graph, flattest seeds first
    index = {(r0, c0): i for i, (_, _, r0, c0) in enumerate(cells)}
    region = [-1] * len(cells)
    order = sorted(range(len(cells)), key=lambda i: cells[i][1])
    regions: list[list[int]] = []
    for seed in order:
        if region[seed] >= 0:
            continue
        rid = len(regions)
        members = [seed]
        region[seed] = rid
        ref = cells[seed][0]
        stack = [seed]
        while stack:
            i = stack.pop()
            _, _, r0, c0 = cells[i]
            for dr, dc in ((cs, 0), (-cs, 0), (0, cs), (0, -cs)):
                j = index.get((r0 + dr, c0 + dc))
                if j is None or region[j] >= 0:
                    continue
                if _same_plane(ref, cells[j][0], cfg):
                    region[j] = rid
                    members.append(j)
                    stack.append(j)
        regions.append(members)

    candidates = []
    for members in regions:
        mask = np.zeros((h, w), dtype=bool)
        for i in members:
            _, _, r0, c0 = cells[i]
            mask[r0:r0 + cs, c0:c0 + cs] = True
        mask &= valid
        # cells only tile the interior of a surface, so the support test is
        # deferred until pixels have been reassigned; here a quarter suffices
        if mask.sum() < cfg.min_support // 4:
            continue
        try:
            plane, rms = fit(mask)
        except DegenerateInputError:
            continue
        candidates.append((plane, rms))

    # coplanar regions that were not adjacent in the grid collapse into one plane
    merged: list[tuple[Plane, float]] = []
    for plane, rms in candidates:
        if any(_same_plane(plane, p, cfg) for p, _ in merged):
            continue
        merged.append((plane, rms))

    planes, labels = _assign_and_refit(pts, valid, merged, cfg, fit, view)
    for k, p in enumerate(planes, start=1):
        semantic[labels == k] = k
    return LocalDetection(planes, semantic)


def _window_mean(img, valid, radius):
    """Mean of ``img`` over valid pixels in a (2r+1)^2 window."""
    size = 2 * radius + 1
    num = uniform_filter(np.where(valid, img, 0.0), size, mode="constant")
    den = uniform_filter(valid.astype(np.float64), size, mode="constant")
    return num / np.maximum(den, 1e-12)


def _assign_pixels(pts, valid, planes_rms, cfg, view=None):
    """Label each valid pixel with its closest acceptable plane (1-based, 0 = none).

    With ``view`` given (depth-noise mode) the residual is measured along the
    pixel's viewing ray, ``|z - S|`` where ``S`` is the depth at which the ray
    meets the plane. That is the axis the noise acts on and the quantity fusion
    later bands on; orthogonal distance understates it at grazing angles, where
    a pixel just below a crease can sit close to the other plane while its ray
    meets that plane far behind the true surface.
    """
    h, w = valid.shape
    vp = pts[valid]
    best = np.full(len(vp), -1)
    best_res = np.full(len(vp), np.inf)
    smooth = view is not None and cfg.smooth_radius > 0
    if view is not None:
        z, rays, cam = view
        # averaging n pixels shrinks the noise by sqrt(n); the clean flatness
        # budget plus three standard deviations of what is left
        n_win = (2 * cfg.smooth_radius + 1) ** 2
        clean_eps = max(cfg.flatness_threshold - 1.5 * cfg.depth_noise, 0.0)
        tol_depth = 2.0 * clean_eps + cfg.assign_rms_factor * cfg.depth_noise
        smooth_tol = 2.0 * clean_eps + 3.0 * cfg.depth_noise / math.sqrt(max(n_win, 1))
    for k, (plane, rms) in enumerate(planes_rms):
        if view is None:
            tol = max(2.0 * cfg.flatness_threshold, cfg.assign_rms_factor * rms)
            signed_res = vp @ plane.normal - plane.offset
        else:
            tol = tol_depth
            den = rays @ plane.normal
            with np.errstate(divide="ignore", invalid="ignore"):
                s_plane = (plane.offset - cam @ plane.normal) / den
            s_plane = np.where((np.abs(den) > 1e-9) & (s_plane > 0), s_plane, np.inf)
            signed_res = z - s_plane
        res = np.abs(signed_res)
        take = (res <= tol) & (res < best_res)
        if smooth:
            # average only over neighbours that pass the per-pixel test, so
            # pixels of an adjacent object do not leak into the mean
            signed = np.zeros((h, w))
            near = np.zeros((h, w), dtype=bool)
            near[valid] = res <= tol
            signed[valid] = np.where(near[valid], signed_res, 0.0)
            take &= np.abs(_window_mean(signed, near, cfg.smooth_radius)[valid]) <= smooth_tol
        best[take] = k
        best_res[take] = res[take]
    labels = np.zeros((h, w), dtype=np.int64)
    labels[valid] = best + 1
    return labels


def _assign_and_refit(pts, valid, planes_rms, cfg, fit, view=None, rounds: int = 2):
    """Alternate nearest-plane pixel assignment and PCA refits; returns surviving
    planes (1-based ids) and the matching label image."""
    current = list(planes_rms)
    for _ in range(rounds):
        if not current:
            break
        labels = _assign_pixels(pts, valid, current, cfg, view)
        refit = []
        for k in range(len(current)):
            mask = labels == k + 1
            if mask.sum() < cfg.min_support:
                continue
            try:
                refit.append(fit(mask))
            except DegenerateInputError:
                continue
        current = refit
    if not current:
        return [], np.zeros(valid.shape, dtype=np.int64)
    labels = _assign_pixels(pts, valid, current, cfg, view)
    planes = []
    out = np.zeros(valid.shape, dtype=np.int64)
    for k, (plane, _) in enumerate(current):
        mask = labels == k + 1
        support = pts[mask]
        if len(support) < cfg.min_support:
            continue
        if not validate_flatness(plane, support, cfg.flatness_threshold):
            continue
        pid = len(planes) + 1
        planes.append(Plane(plane.normal, plane.offset, id=pid, support_count=len(support)))
        out[mask] = pid
    return planes, out


def detect_frame(frame: Frame, cfg: DetectorConfig = DetectorConfig()) -> LocalDetection:
    return detect_planes(frame.depth, frame.intrinsics, frame.pose, cfg)
