"""Independent scalar re-implementations used as test oracles.

Nothing here imports the package's rendering or fusion code; inputs are plain
arrays so a shared bug cannot cancel out.
"""

import math

import numba
import numpy as np


@numba.njit(cache=True)
def fuse_labels_bruteforce(labels, origin, vs, R, t, fx, fy, cx, cy, depth, sem, normals, offsets, alive,
                           depth_guided=False):
    """One voxel at a time: project its centre, classify, apply precedence."""
    nx, ny, nz = labels.shape
    h, w = depth.shape
    psi = math.sqrt(3.0) * vs
    b1 = 6.0 * psi
    b2 = psi
    out = labels.copy()
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                px = origin[0] + (i + 0.5) * vs - t[0]
                py = origin[1] + (j + 0.5) * vs - t[1]
                pz = origin[2] + (k + 0.5) * vs - t[2]
                # camera coordinates: R^T (x - t)
                xc = R[0, 0] * px + R[1, 0] * py + R[2, 0] * pz
                yc = R[0, 1] * px + R[1, 1] * py + R[2, 1] * pz
                zc = R[0, 2] * px + R[1, 2] * py + R[2, 2] * pz
                if zc <= 0.0:
                    continue
                u = fx * xc / zc + cx
                v = fy * yc / zc + cy
                if u < 0.0 or v < 0.0 or u >= w or v >= h:
                    continue
                col = int(math.floor(u))
                row = int(math.floor(v))
                dobs = depth[row, col]
                if not dobs > 0.0:
                    continue
                old = out[i, j, k]
                if old >= 1 and not alive[old]:
                    old = 0
                m = sem[row, col]
                new = -2
                if m > 0 and alive[m]:
                    # unit-length ray through the pixel centre, then back to z-depth
                    rx = (col + 0.5 - cx) / fx
                    ry = (row + 0.5 - cy) / fy
                    nrm = math.sqrt(rx * rx + ry * ry + 1.0)
                    dx = (R[0, 0] * rx + R[0, 1] * ry + R[0, 2]) / nrm
                    dy = (R[1, 0] * rx + R[1, 1] * ry + R[1, 2]) / nrm
                    dz = (R[2, 0] * rx + R[2, 1] * ry + R[2, 2]) / nrm
                    den = normals[m, 0] * dx + normals[m, 1] * dy + normals[m, 2] * dz
                    num = offsets[m] - (normals[m, 0] * t[0] + normals[m, 1] * t[1] + normals[m, 2] * t[2])
                    s_ray = num / den if abs(den) * nrm >= 1e-9 else -1.0
                    if s_ray > 0.0:
                        rel = zc - s_ray / nrm
                        if rel >= -b2 and rel < b2:
                            new = m
                        elif rel >= b2 and rel < b1:
                            new = 0
                        elif rel < -b2:
                            new = -1
                elif depth_guided:
                    if zc < dobs - b2:
                        new = -1
                    elif zc < dobs + b1:
                        new = 0
                else:
                    if zc >= dobs - b1 and zc < dobs + b1:
                        new = 0
                if new >= 1 or new == -1:
                    out[i, j, k] = new
                elif new == 0:
                    out[i, j, k] = old if old >= 1 else 0
                else:
                    out[i, j, k] = old
    return out


def composite_scalar(sigma, color, semantic, t, delta):
    """Textbook alpha compositing of one ray, one sample at a time."""
    trans = 1.0
    c = [0.0, 0.0, 0.0]
    s = [0.0] * len(semantic[0]) if len(semantic) else []
    depth = 0.0
    opacity = 0.0
    for i in range(len(sigma)):
        alpha = 1.0 - math.exp(-sigma[i] * delta[i])
        w = trans * alpha
        for ch in range(3):
            c[ch] += w * color[i][ch]
        for ch in range(len(s)):
            s[ch] += w * semantic[i][ch]
        depth += w * t[i]
        opacity += w
        trans *= 1.0 - alpha
    return c, depth, s, opacity
