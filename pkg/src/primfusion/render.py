"""Hybrid ray marching over the semantic volume and differentiable compositing.

E voxels are skipped, D voxels receive evenly spaced samples on a per-ray
lattice, and a run of P voxels contributes a single sample at the analytic
intersection with its plane, after which the march cursor jumps ``psi`` past
the plane along its normal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numba
import numpy as np

from .geometry import Intrinsics, Pose, Ray, camera_rays
from .registry import Registry
from .volume import EditState, SemanticVolume

KIND_D = 0
KIND_P = 1


@dataclass(frozen=True)
class RenderConfig:
    step_ratio: float = 0.5  # D-voxel step as a fraction of the voxel size
    max_steps: int = 1024  # cap on samples per ray
    delta_p: float = 1.0  # compositing thickness of primitive samples
    max_advance_psi: float = 6.0  # cap on the post-plane jump, in units of psi
    chunk: int = 8192  # rays per batch in render_image


@dataclass
class Sample:
    position: np.ndarray
    t: float
    delta: float
    kind: int
    plane_id: int = 0


@numba.njit(cache=True)
def _march_kernel(origins, dirs, labels, origin, vs, normals, offsets, alive,
                  step, psi, max_adv, max_samples, edit_labels, edit_T, ref_labels, use_edit,
                  counts, out_t, out_kind, out_pid, out_edit, out_offsets, fill):
    nx, ny, nz = labels.shape
    n_rays = origins.shape[0]
    hi = np.empty(3)
    for a in range(3):
        hi[a] = origin[a] + labels.shape[a] * vs
    for r in range(n_rays):
        o0, o1, o2 = origins[r, 0], origins[r, 1], origins[r, 2]
        d0, d1, d2 = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        o = (o0, o1, o2)
        d = (d0, d1, d2)
        # slab test
        t0, t1 = 0.0, np.inf
        miss = False
        for a in range(3):
            if abs(d[a]) < 1e-15:
                if o[a] < origin[a] or o[a] > hi[a]:
                    miss = True
            else:
                ta = (origin[a] - o[a]) / d[a]
                tb = (hi[a] - o[a]) / d[a]
                if ta > tb:
                    ta, tb = tb, ta
                t0 = max(t0, ta)
                t1 = min(t1, tb)
        n_out = 0
        base = out_offsets[r] if fill else 0
        if miss or t0 >= t1:
            if not fill:
                counts[r] = 0
            continue
        # DDA set-up at the entry point
        idx = np.empty(3, np.int64)
        stp = np.empty(3, np.int64)
        tmax = np.empty(3)
        tdel = np.empty(3)
        tin = t0 + 1e-9 * max(1.0, t0)
        for a in range(3):
            p = o[a] + tin * d[a]
            i = int(math.floor((p - origin[a]) / vs))
            i = min(max(i, 0), labels.shape[a] - 1)
            idx[a] = i
            if d[a] > 0:
                stp[a] = 1
                tmax[a] = (origin[a] + (i + 1) * vs - o[a]) / d[a]
                tdel[a] = vs / d[a]
            elif d[a] < 0:
                stp[a] = -1
                tmax[a] = (origin[a] + i * vs - o[a]) / d[a]
                tdel[a] = -vs / d[a]
            else:
                stp[a] = 0
                tmax[a] = np.inf
                tdel[a] = np.inf
        ta = t0
        cursor = t0
        run_label = 0
        run_done = False
        while ta < t1 and n_out < max_samples:
            tb = min(tmax[0], tmax[1], tmax[2], t1)
            ix, iy, iz = idx[0], idx[1], idx[2]
            k = 0
            if use_edit:
                k = edit_labels[ix, iy, iz]
            if k > 0:
                cx = origin[0] + (ix + 0.5) * vs
                cy = origin[1] + (iy + 0.5) * vs
                cz = origin[2] + (iz + 0.5) * vs
                T = edit_T[k]
                mx = T[0, 0] * cx + T[0, 1] * cy + T[0, 2] * cz + T[0, 3]
                my = T[1, 0] * cx + T[1, 1] * cy + T[1, 2] * cz + T[1, 3]
                mz = T[2, 0] * cx + T[2, 1] * cy + T[2, 2] * cz + T[2, 3]
                jx = int(math.floor((mx - origin[0]) / vs))
                jy = int(math.floor((my - origin[1]) / vs))
                jz = int(math.floor((mz - origin[2]) / vs))
                if 0 <= jx < nx and 0 <= jy < ny and 0 <= jz < nz:
                    lab = ref_labels[jx, jy, jz]
                else:
                    lab = -1
            else:
                lab = labels[ix, iy, iz]
            if lab >= 1 and not (lab < alive.shape[0] and alive[lab]):
                lab = 0  # dead plane: treated as volumetric
            if lab >= 1:
                if lab != run_label:
                    run_label = lab
                    run_done = False
                if not run_done:
                    # ray (possibly mapped by the edit transform) against plane
                    ro0, ro1, ro2 = o0, o1, o2
                    rd0, rd1, rd2 = d0, d1, d2
                    if k > 0:
                        T = edit_T[k]
                        ro0 = T[0, 0] * o0 + T[0, 1] * o1 + T[0, 2] * o2 + T[0, 3]
                        ro1 = T[1, 0] * o0 + T[1, 1] * o1 + T[1, 2] * o2 + T[1, 3]
                        ro2 = T[2, 0] * o0 + T[2, 1] * o1 + T[2, 2] * o2 + T[2, 3]
                        rd0 = T[0, 0] * d0 + T[0, 1] * d1 + T[0, 2] * d2
                        rd1 = T[1, 0] * d0 + T[1, 1] * d1 + T[1, 2] * d2
                        rd2 = T[2, 0] * d0 + T[2, 1] * d1 + T[2, 2] * d2
                    n0, n1, n2 = normals[lab, 0], normals[lab, 1], normals[lab, 2]
                    den = rd0 * n0 + rd1 * n1 + rd2 * n2
                    if abs(den) >= 1e-9:
                        th = (offsets[lab] - (ro0 * n0 + ro1 * n1 + ro2 * n2)) / den
                        reach = min(psi / abs(den), max_adv)
                        lo = max(ta, cursor)
                        # The crossing normally lies inside the run. When
                        # near-duplicate planes share a band it may fall just
                        # outside the voxels carrying this id; accept it within
                        # the band's extent along the ray (clamped to the
                        # current position) instead of passing through unsampled.
                        if th > 0 and th >= lo - reach and th < tb + 2.0 * reach:
                            ts = max(th, lo)
                            if fill:
                                j = base + n_out
                                out_t[j] = ts
                                out_kind[j] = 1
                                out_pid[j] = lab
                                out_edit[j] = k
                            n_out += 1
                            run_done = True
                            cursor = ts + reach
            else:
                run_label = 0
                run_done = False
                if lab == 0:
                    lo = max(ta, cursor)
                    kk = math.ceil((lo - t0) / step - 0.5)
                    ts = t0 + (kk + 0.5) * step
                    if ts < lo:
                        kk += 1
                        ts = t0 + (kk + 0.5) * step
                    while ts < tb and n_out < max_samples:
                        if fill:
                            j = base + n_out
                            out_t[j] = ts
                            out_kind[j] = 0
                            out_pid[j] = 0
                            out_edit[j] = k
                        n_out += 1
                        kk += 1
                        ts = t0 + (kk + 0.5) * step
            # advance to the next voxel
            ta = tb
            if tmax[0] <= tmax[1] and tmax[0] <= tmax[2]:
                a = 0
            elif tmax[1] <= tmax[2]:
                a = 1
            else:
                a = 2
            idx[a] += stp[a]
            if idx[a] < 0 or idx[a] >= labels.shape[a]:
                break
            tmax[a] += tdel[a]
        if not fill:
            counts[r] = n_out


@dataclass
class RaySamples:
    """Samples for a batch of rays in CSR layout (``offsets`` has n_rays + 1 entries)."""

    origins: np.ndarray
    dirs: np.ndarray
    offsets: np.ndarray
    t: np.ndarray
    kind: np.ndarray
    plane_id: np.ndarray
    edit_k: np.ndarray
    step: float
    delta_p: float

    @property
    def n_rays(self) -> int:
        return len(self.offsets) - 1

    @property
    def n_samples(self) -> int:
        return len(self.t)

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    @property
    def ray_index(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_rays), self.counts)

    @property
    def delta(self) -> np.ndarray:
        return np.where(self.kind == KIND_P, self.delta_p, self.step)

    def positions(self) -> np.ndarray:
        ri = self.ray_index
        return self.origins[ri] + self.t[:, None] * self.dirs[ri]

    def query_inputs(self, edit: Optional[EditState] = None):
        """World positions/directions handed to the field, edits applied."""
        ri = self.ray_index
        x = self.origins[ri] + self.t[:, None] * self.dirs[ri]
        d = self.dirs[ri].copy()
        if edit is not None and self.edit_k.any():
            T = edit.transform_array()
            sel = self.edit_k > 0
            Tk = T[self.edit_k[sel]]
            x[sel] = np.einsum("nij,nj->ni", Tk[:, :, :3], x[sel]) + Tk[:, :, 3]
            d[sel] = np.einsum("nij,nj->ni", Tk[:, :, :3], d[sel])
            d[sel] /= np.linalg.norm(d[sel], axis=1, keepdims=True)
        return x, d

    def select_rays(self, rays: np.ndarray) -> "RaySamples":
        counts = self.counts[rays]
        offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        starts = self.offsets[rays]
        take = np.repeat(starts - offsets[:-1], counts) + np.arange(offsets[-1])
        return RaySamples(self.origins[rays], self.dirs[rays], offsets, self.t[take],
                          self.kind[take], self.plane_id[take], self.edit_k[take],
                          self.step, self.delta_p)

    def to_samples(self, ray: int) -> list[Sample]:
        s, e = self.offsets[ray], self.offsets[ray + 1]
        out = []
        delta = self.delta
        for j in range(s, e):
            x = self.origins[ray] + self.t[j] * self.dirs[ray]
            out.append(Sample(x, float(self.t[j]), float(delta[j]), int(self.kind[j]), int(self.plane_id[j])))
        return out


def march_rays(origins, dirs, vol: SemanticVolume, registry: Registry,
               edit: Optional[EditState] = None, cfg: RenderConfig = RenderConfig()) -> RaySamples:
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    normals, offsets, alive = registry.plane_table()
    step = cfg.step_ratio * vol.voxel_size
    psi = vol.psi
    use_edit = edit is not None and not edit.is_identity
    if use_edit:
        edit_labels = np.ascontiguousarray(edit.edit_labels, dtype=np.int32)
        edit_T = np.ascontiguousarray(edit.transform_array())
        ref = edit.reference_labels if edit.reference_labels is not None else vol.labels
        ref = np.ascontiguousarray(ref, dtype=np.int32)
    else:
        edit_labels = np.zeros((1, 1, 1), dtype=np.int32)
        edit_T = np.zeros((1, 3, 4))
        ref = edit_labels
    n = len(origins)
    counts = np.zeros(n, dtype=np.int64)
    labels = np.ascontiguousarray(vol.labels, dtype=np.int32)
    args = (origins, dirs, labels, vol.origin.astype(np.float64), float(vol.voxel_size),
            normals, offsets, alive, float(step), float(psi), float(cfg.max_advance_psi * psi),
            int(cfg.max_steps), edit_labels, edit_T, ref, use_edit)
    empty_f = np.zeros(0)
    empty_i = np.zeros(0, dtype=np.int64)
    _march_kernel(*args, counts, empty_f, empty_i, empty_i, empty_i, np.zeros(n + 1, np.int64), False)
    ray_offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=ray_offsets[1:])
    total = int(ray_offsets[-1])
    t = np.empty(total)
    kind = np.empty(total, dtype=np.int64)
    pid = np.empty(total, dtype=np.int64)
    ek = np.empty(total, dtype=np.int64)
    _march_kernel(*args, counts, t, kind, pid, ek, ray_offsets, True)
    return RaySamples(origins, dirs, ray_offsets, t, kind, pid, ek, step, cfg.delta_p)


def march_ray(ray: Ray, vol: SemanticVolume, registry: Registry,
              edit: Optional[EditState] = None, cfg: RenderConfig = RenderConfig()) -> list[Sample]:
    rs = march_rays(ray.origin[None], ray.direction[None], vol, registry, edit, cfg)
    return rs.to_samples(0)


# -- compositing ------------------------------------------------------------------


@dataclass
class RenderResult:
    color: np.ndarray  # (R, 3)
    depth: np.ndarray  # (R,) ray distance
    semantic: np.ndarray  # (R, S)
    opacity: np.ndarray  # (R,)
    weights: np.ndarray  # flat (N,) w_i = T_i alpha_i
    transmittance: np.ndarray  # flat (N,) T_i
    offsets: np.ndarray
    t: np.ndarray
    delta: np.ndarray
    sample_color: np.ndarray
    sample_semantic: np.ndarray


def _padded_index(offsets):
    counts = np.diff(offsets)
    n_rays = len(counts)
    width = int(counts.max()) if n_rays and counts.size else 0
    width = max(width, 1)
    col = np.arange(width)
    mask = col[None, :] < counts[:, None]
    flat = np.where(mask, offsets[:-1, None] + col[None, :], 0)
    return flat, mask


def composite(sigma, color, semantic, t, delta, offsets) -> RenderResult:
    """Front-to-back alpha compositing for rays stored in CSR layout."""
    sigma = np.asarray(sigma, dtype=np.float64)
    color = np.asarray(color, dtype=np.float64).reshape(len(sigma), -1)
    semantic = np.asarray(semantic, dtype=np.float64).reshape(len(sigma), -1)
    t = np.asarray(t, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.int64)
    n_rays = len(offsets) - 1
    flat, mask = _padded_index(offsets)
    tau = np.where(mask, sigma[flat] * delta[flat], 0.0) if len(sigma) else np.zeros(mask.shape)
    excl = np.cumsum(tau, axis=1) - tau
    T = np.exp(-excl)
    alpha = -np.expm1(-tau)
    w = np.where(mask, T * alpha, 0.0)
    weights = np.zeros(len(sigma))
    trans = np.zeros(len(sigma))
    weights[flat[mask]] = w[mask]
    trans[flat[mask]] = T[mask]
    ri = np.repeat(np.arange(n_rays), np.diff(offsets))

    def acc(vals):
        out = np.zeros((n_rays,) + vals.shape[1:])
        np.add.at(out, ri, weights.reshape((-1,) + (1,) * (vals.ndim - 1)) * vals)
        return out

    return RenderResult(
        color=acc(color), depth=acc(t), semantic=acc(semantic),
        opacity=np.bincount(ri, weights=weights, minlength=n_rays).astype(np.float64),
        weights=weights, transmittance=trans, offsets=offsets, t=t, delta=delta,
        sample_color=color, sample_semantic=semantic,
    )


def composite_backward(res: RenderResult, g_color, g_depth, g_semantic, g_opacity):
    """Gradients of a scalar loss w.r.t. per-sample sigma, colour and semantic."""
    offsets = res.offsets
    n_rays = len(offsets) - 1
    n = len(res.weights)
    g_color = np.asarray(g_color, dtype=np.float64).reshape(n_rays, -1)
    g_semantic = np.asarray(g_semantic, dtype=np.float64).reshape(n_rays, -1)
    g_depth = np.asarray(g_depth, dtype=np.float64).reshape(n_rays)
    g_opacity = np.asarray(g_opacity, dtype=np.float64).reshape(n_rays)
    ri = np.repeat(np.arange(n_rays), np.diff(offsets))
    # q_i: derivative of the loss w.r.t. weight w_i
    q = (np.einsum("nc,nc->n", g_color[ri], res.sample_color)
         + g_depth[ri] * res.t
         + np.einsum("ns,ns->n", g_semantic[ri], res.sample_semantic)
         + g_opacity[ri])
    g_tau = np.zeros(n)
    if n:
        flat, mask = _padded_index(offsets)
        wq = np.where(mask, res.weights[flat] * q[flat], 0.0)
        suffix = np.cumsum(wq[:, ::-1], axis=1)[:, ::-1] - wq  # sum over later samples
        # T_{k+1} = T_k (1 - alpha_k) = T_k - w_k
        t_next = res.transmittance - res.weights
        g_tau[flat[mask]] = (t_next[flat] * q[flat] - suffix)[mask]
    d_sigma = g_tau * res.delta
    d_color = res.weights[:, None] * g_color[ri]
    d_sem = res.weights[:, None] * g_semantic[ri]
    return d_sigma, d_color, d_sem


# -- full renders -----------------------------------------------------------------


def render_rays(origins, dirs, vol, registry, field, edit=None, cfg: RenderConfig = RenderConfig()):
    samples = march_rays(origins, dirs, vol, registry, edit, cfg)
    x, d = samples.query_inputs(edit)
    if samples.n_samples:
        out = field.query(x, d)
        sigma, rgb, sem = out.sigma, out.color, out.semantic
    else:
        sigma = np.zeros(0)
        rgb = np.zeros((0, 3))
        sem = np.zeros((0, field.mlp.semantic_dim))
    res = composite(sigma, rgb, sem, samples.t, samples.delta, samples.offsets)
    return res, samples


def render_image(pose: Pose, intrinsics: Intrinsics, vol: SemanticVolume, registry: Registry,
                 field, edit: Optional[EditState] = None, cfg: RenderConfig = RenderConfig()) -> dict:
    """Render colour, z-depth, semantic and opacity images for one camera.

    Besides the four images the dict carries ``weight_p``, ``weight_d`` and
    ``weight_edit``: per-pixel opacity contributed by primitive samples,
    volumetric samples and edited samples respectively.
    """
    origins, dirs, zfac = camera_rays(intrinsics, pose)
    h, w = intrinsics.shape
    n = len(origins)
    color = np.zeros((n, 3))
    depth = np.zeros(n)
    sem = np.zeros((n, field.mlp.semantic_dim))
    opac = np.zeros(n)
    wp = np.zeros(n)
    wd = np.zeros(n)
    we = np.zeros(n)
    for s in range(0, n, cfg.chunk):
        sl = slice(s, min(s + cfg.chunk, n))
        res, samples = render_rays(origins[sl], dirs[sl], vol, registry, field, edit, cfg)
        color[sl] = res.color
        depth[sl] = res.depth * zfac[sl]
        sem[sl] = res.semantic
        opac[sl] = res.opacity
        ri = samples.ray_index
        m = len(res.opacity)
        wp[sl] = np.bincount(ri, weights=res.weights * (samples.kind == KIND_P), minlength=m)
        wd[sl] = np.bincount(ri, weights=res.weights * (samples.kind == KIND_D), minlength=m)
        we[sl] = np.bincount(ri, weights=res.weights * (samples.edit_k > 0), minlength=m)
    return {
        "color": color.reshape(h, w, 3),
        "depth": depth.reshape(h, w),
        "semantic": sem.reshape(h, w, -1),
        "opacity": opac.reshape(h, w),
        "weight_p": wp.reshape(h, w),
        "weight_d": wd.reshape(h, w),
        "weight_edit": we.reshape(h, w),
    }
