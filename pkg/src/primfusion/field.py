"""Trainable radiance field with hand-written reverse mode.

Multi-resolution dense feature grids (trilinear) feed a small ReLU MLP whose
latent drives three heads: density (exp), semantic plane logits (linear) and a
view-dependent colour branch that also sees the SH basis of the direction.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numba
import numpy as np

FIELD_MAGIC = b"PARFFP1\x00"
LOG_SIGMA_MAX = math.log(1e4)

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
         -0.4570457994644658, 1.445305721320277, -0.5900435899266435)


class NonUnitDirectionError(ValueError):
    pass


class ShapeMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class EncodingConfig:
    levels: int = 4
    base_resolution: int = 16
    per_level_scale: float = 2.0
    features_per_level: int = 2
    sh_degree: int = 3

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.base_resolution < 2:
            raise ValueError("base_resolution must be >= 2")
        if not self.per_level_scale > 1:
            raise ValueError("per_level_scale must be > 1")
        if not 0 <= self.sh_degree <= 3:
            raise ValueError("sh_degree must be in [0, 3]")

    def resolution(self, level: int) -> int:
        return int(math.floor(self.base_resolution * self.per_level_scale ** level))

    @property
    def n_features(self) -> int:
        return self.levels * self.features_per_level

    @property
    def n_sh(self) -> int:
        return (self.sh_degree + 1) ** 2


@dataclass(frozen=True)
class MLPConfig:
    hidden: int = 64
    density_layers: int = 2
    color_layers: int = 1
    semantic_dim: int = 4


def sh_basis(d: np.ndarray, degree: int) -> np.ndarray:
    """Real spherical harmonics for unit directions ``d`` (..., 3)."""
    d = np.asarray(d, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = [np.full(x.shape, SH_C0)]
    if degree >= 1:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [SH_C2[0] * x * y, SH_C2[1] * y * z, SH_C2[2] * (2 * zz - xx - yy),
                SH_C2[3] * x * z, SH_C2[4] * (xx - yy)]
    if degree >= 3:
        out += [SH_C3[0] * y * (3 * xx - yy), SH_C3[1] * x * y * z,
                SH_C3[2] * y * (4 * zz - xx - yy), SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
                SH_C3[4] * x * (4 * zz - xx - yy), SH_C3[5] * z * (xx - yy),
                SH_C3[6] * x * (xx - 3 * yy)]
    return np.stack(out, axis=-1)


def encode_direction(d, degree: int = 3) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    norm = np.linalg.norm(d, axis=-1)
    if np.any(np.abs(norm - 1.0) > 1e-3):
        raise NonUnitDirectionError("direction must be unit length")
    return sh_basis(d, degree)


@numba.njit(cache=True)
def _grid_gather(p, res, grid, out_feat, out_idx, out_w):
    """Trilinear interpolation of one level; records corner indices and weights."""
    r1 = res + 1
    F = grid.shape[1]
    for n in range(p.shape[0]):
        i0 = np.empty(3, np.int64)
        f = np.empty(3)
        for a in range(3):
            pos = p[n, a] * res
            i = int(math.floor(pos))
            if i > res - 1:
                i = res - 1
            i0[a] = i
            f[a] = pos - i
        for c in range(F):
            out_feat[n, c] = 0.0
        k = 0
        for dx in range(2):
            wx = f[0] if dx else 1.0 - f[0]
            for dy in range(2):
                wy = f[1] if dy else 1.0 - f[1]
                for dz in range(2):
                    wz = f[2] if dz else 1.0 - f[2]
                    idx = ((i0[0] + dx) * r1 + (i0[1] + dy)) * r1 + (i0[2] + dz)
                    w = wx * wy * wz
                    out_idx[n, k] = idx
                    out_w[n, k] = w
                    for c in range(F):
                        out_feat[n, c] += w * grid[idx, c]
                    k += 1


@numba.njit(cache=True)
def _grid_scatter(idx, w, g, grad):
    for n in range(idx.shape[0]):
        for k in range(idx.shape[1]):
            j = idx[n, k]
            wk = w[n, k]
            for c in range(g.shape[1]):
                grad[j, c] += wk * g[n, c]


@numba.njit(cache=True)
def _adam_kernel(p, g, m, v, lr, beta1, beta2, eps, c1, c2):
    """In-place Adam update; returns False if any parameter became non-finite."""
    ok = True
    for i in range(p.shape[0]):
        gi = g[i]
        mi = beta1 * m[i] + (1.0 - beta1) * gi
        vi = beta2 * v[i] + (1.0 - beta2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= lr * (mi / c1) / (math.sqrt(vi / c2) + eps)
        if not math.isfinite(p[i]):
            ok = False
    return ok


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class FieldOutput:
    sigma: np.ndarray  # (N,)
    color: np.ndarray  # (N, 3)
    semantic: np.ndarray  # (N, 4)


class RadianceField:
    """Parameters, forward/backward and Adam state of the field."""

    def __init__(self, bbox_min, bbox_max, encoding: EncodingConfig = EncodingConfig(),
                 mlp: MLPConfig = MLPConfig(), seed: int = 0, init: bool = True):
        self.bbox_min = np.asarray(bbox_min, dtype=np.float64)
        self.bbox_max = np.asarray(bbox_max, dtype=np.float64)
        self.encoding = encoding
        self.mlp = mlp
        self.params: dict[str, np.ndarray] = {}
        if init:
            self._init_params(np.random.default_rng(seed))
        self.zero_grad()
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0
        self.clamp_warnings = 0

    @property
    def scene_radius(self) -> float:
        return 0.5 * float(np.linalg.norm(self.bbox_max - self.bbox_min))

    # -- parameters --------------------------------------------------------------

    def _init_params(self, rng):
        enc, mlp = self.encoding, self.mlp
        for level in range(enc.levels):
            r = enc.resolution(level) + 1
            self.params[f"grid{level}"] = rng.uniform(-1e-4, 1e-4, (r, r, r, enc.features_per_level))

        def linear(name, fan_in, fan_out):
            lim = math.sqrt(6.0 / (fan_in + fan_out))
            self.params[f"{name}_w"] = rng.uniform(-lim, lim, (fan_in, fan_out))
            self.params[f"{name}_b"] = np.zeros(fan_out)

        width = enc.n_features
        for i in range(mlp.density_layers):
            linear(f"density{i}", width, mlp.hidden)
            width = mlp.hidden
        linear("sigma", width, 1)
        linear("semantic", width, mlp.semantic_dim)
        cw = width + enc.n_sh
        for i in range(mlp.color_layers):
            linear(f"color{i}", cw, mlp.hidden)
            cw = mlp.hidden
        linear("rgb", cw, 3)

    def zero_grad(self):
        grads = getattr(self, "grads", None)
        if grads is not None and grads.keys() == self.params.keys():
            for g in grads.values():
                g.fill(0.0)
        else:
            self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def copy(self) -> "RadianceField":
        out = RadianceField(self.bbox_min, self.bbox_max, self.encoding, self.mlp, init=False)
        out.params = {k: v.copy() for k, v in self.params.items()}
        out.zero_grad()
        out._m = {k: v.copy() for k, v in self._m.items()}
        out._v = {k: v.copy() for k, v in self._v.items()}
        out.step_count = self.step_count
        return out

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    # -- encoders -----------------------------------------------------------------

    def _normalize(self, x):
        p = (np.asarray(x, dtype=np.float64) - self.bbox_min) / (self.bbox_max - self.bbox_min)
        if np.any((p < 0) | (p > 1)):
            self.clamp_warnings += 1
            p = np.clip(p, 0.0, 1.0)
        return p

    def encode_position(self, x, _cache: Optional[list] = None) -> np.ndarray:
        p = np.ascontiguousarray(self._normalize(x).reshape(-1, 3))
        F = self.encoding.features_per_level
        n = len(p)
        feats = np.empty((n, self.encoding.n_features))
        for level in range(self.encoding.levels):
            grid = self.params[f"grid{level}"].reshape(-1, F)
            out = np.empty((n, F))
            idx = np.empty((n, 8), dtype=np.int64)
            w = np.empty((n, 8))
            _grid_gather(p, self.encoding.resolution(level), grid, out, idx, w)
            feats[:, level * F:(level + 1) * F] = out
            if _cache is not None:
                _cache.append((idx, w))
        return feats.reshape(np.shape(x)[:-1] + (self.encoding.n_features,))

    # -- forward / backward ---------------------------------------------------------

    def forward(self, x, d, need_cache: bool = True):
        P = self.params
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        d = np.atleast_2d(np.asarray(d, dtype=np.float64))
        cache: dict = {"grid": []}
        h = self.encode_position(x, cache["grid"])
        cache["enc"] = h
        pre_d = []
        for i in range(self.mlp.density_layers):
            z = h @ P[f"density{i}_w"] + P[f"density{i}_b"]
            pre_d.append(z)
            h = np.maximum(z, 0.0)
        cache["pre_d"] = pre_d
        latent = h
        cache["latent"] = latent
        raw = (latent @ P["sigma_w"] + P["sigma_b"])[:, 0]
        clipped = raw > LOG_SIGMA_MAX
        sigma = np.exp(np.minimum(raw, LOG_SIGMA_MAX))
        sem = latent @ P["semantic_w"] + P["semantic_b"]
        sh = encode_direction(d, self.encoding.sh_degree)
        hc = np.concatenate([latent, sh], axis=-1)
        cache["cin"] = hc
        pre_c = []
        for i in range(self.mlp.color_layers):
            z = hc @ P[f"color{i}_w"] + P[f"color{i}_b"]
            pre_c.append(z)
            hc = np.maximum(z, 0.0)
        cache["pre_c"] = pre_c
        cache["chid"] = hc
        rgb = _sigmoid(hc @ P["rgb_w"] + P["rgb_b"])
        cache.update(sigma=sigma, clipped=clipped, rgb=rgb, n=len(x))
        out = FieldOutput(sigma, rgb, sem)
        return (out, cache) if need_cache else out

    def query(self, x, d) -> FieldOutput:
        return self.forward(x, d, need_cache=False)

    def density(self, x) -> np.ndarray:
        P = self.params
        h = self.encode_position(np.atleast_2d(x))
        for i in range(self.mlp.density_layers):
            h = np.maximum(h @ P[f"density{i}_w"] + P[f"density{i}_b"], 0.0)
        raw = (h @ P["sigma_w"] + P["sigma_b"])[:, 0]
        return np.exp(np.minimum(raw, LOG_SIGMA_MAX))

    def backward(self, cache, d_sigma, d_rgb, d_sem) -> None:
        """Accumulate parameter gradients for upstream gradients on the outputs."""
        n = cache["n"]
        d_sigma = np.asarray(d_sigma, dtype=np.float64)
        d_rgb = np.asarray(d_rgb, dtype=np.float64)
        d_sem = np.asarray(d_sem, dtype=np.float64)
        if d_sigma.shape != (n,) or d_rgb.shape != (n, 3) or d_sem.shape != (n, self.mlp.semantic_dim):
            raise ShapeMismatchError("output gradients do not match the recorded forward pass")
        P, G = self.params, self.grads

        # colour branch
        rgb = cache["rgb"]
        g = d_rgb * rgb * (1.0 - rgb)
        hc = cache["chid"]
        G["rgb_w"] += hc.T @ g
        G["rgb_b"] += g.sum(0)
        g = g @ P["rgb_w"].T
        for i in reversed(range(self.mlp.color_layers)):
            z = cache["pre_c"][i]
            g = g * (z > 0)
            inp = cache["cin"] if i == 0 else np.maximum(cache["pre_c"][i - 1], 0.0)
            G[f"color{i}_w"] += inp.T @ g
            G[f"color{i}_b"] += g.sum(0)
            g = g @ P[f"color{i}_w"].T
        hidden = self.mlp.hidden if self.mlp.density_layers else self.encoding.n_features
        g_latent = g[:, :hidden]

        # density and semantic heads
        latent = cache["latent"]
        g_raw = (d_sigma * cache["sigma"] * ~cache["clipped"])[:, None]
        G["sigma_w"] += latent.T @ g_raw
        G["sigma_b"] += g_raw.sum(0)
        G["semantic_w"] += latent.T @ d_sem
        G["semantic_b"] += d_sem.sum(0)
        g = g_latent + g_raw @ P["sigma_w"].T + d_sem @ P["semantic_w"].T
        for i in reversed(range(self.mlp.density_layers)):
            z = cache["pre_d"][i]
            g = g * (z > 0)
            inp = cache["enc"] if i == 0 else np.maximum(cache["pre_d"][i - 1], 0.0)
            G[f"density{i}_w"] += inp.T @ g
            G[f"density{i}_b"] += g.sum(0)
            g = g @ P[f"density{i}_w"].T

        # scatter into the feature grids
        F = self.encoding.features_per_level
        for level, (idx, w) in enumerate(cache["grid"]):
            gl = g[:, level * F:(level + 1) * F]
            _grid_scatter(idx, w, np.ascontiguousarray(gl), G[f"grid{level}"].reshape(-1, F))

    # -- optimiser ------------------------------------------------------------------

    def adam_step(self, lr: float, beta1: float = 0.9, beta2: float = 0.99, eps: float = 1e-15):
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - beta1 ** t
        c2 = 1.0 - beta2 ** t
        for k, p in self.params.items():
            g = self.grads[k]
            m = self._m.get(k)
            if m is None:
                m = self._m[k] = np.zeros_like(p)
                self._v[k] = np.zeros_like(p)
            if not _adam_kernel(p.reshape(-1), g.reshape(-1), m.reshape(-1), self._v[k].reshape(-1),
                                lr, beta1, beta2, eps, c1, c2):
                raise FloatingPointError(f"parameter {k} became non-finite")

    # -- checkpoint -------------------------------------------------------------------

    def _meta(self):
        e, m = self.encoding, self.mlp
        return {
            "meta.bbox": np.stack([self.bbox_min, self.bbox_max]),
            "meta.encoding": np.array([e.levels, e.base_resolution, e.per_level_scale,
                                       e.features_per_level, e.sh_degree], dtype=np.float64),
            "meta.mlp": np.array([m.hidden, m.density_layers, m.color_layers, m.semantic_dim],
                                 dtype=np.float64),
        }

    def save(self, path) -> None:
        tensors = {**self._meta(), **self.params}
        with open(path, "wb") as fh:
            fh.write(FIELD_MAGIC)
            fh.write(struct.pack("<I", len(tensors)))
            for name, arr in tensors.items():
                raw = name.encode()
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)
                fh.write(struct.pack("<I", arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "RadianceField":
        raw = Path(path).read_bytes()
        if raw[:8] != FIELD_MAGIC:
            raise ValueError(f"{path}: not a field checkpoint")
        off = 8
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off:off + ln].decode()
            off += ln
            (nd,) = struct.unpack_from("<I", raw, off)
            off += 4
            shape = struct.unpack_from(f"<{nd}I", raw, off)
            off += 4 * nd
            size = int(np.prod(shape)) if nd else 1
            tensors[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float64)
            off += 4 * size
        bbox = tensors.pop("meta.bbox")
        e = tensors.pop("meta.encoding")
        m = tensors.pop("meta.mlp")
        enc = EncodingConfig(int(e[0]), int(e[1]), float(e[2]), int(e[3]), int(e[4]))
        mlp = MLPConfig(int(m[0]), int(m[1]), int(m[2]), int(m[3]))
        out = cls(bbox[0], bbox[1], enc, mlp, init=False)
        out.params = tensors
        out.zero_grad()
        return out
