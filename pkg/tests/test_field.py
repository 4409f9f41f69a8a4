import math

import numpy as np
import pytest

from primfusion.field import (EncodingConfig, MLPConfig, NonUnitDirectionError, RadianceField, ShapeMismatchError,
                              encode_direction, sh_basis)

TOY_ENC = EncodingConfig(levels=2, base_resolution=3, per_level_scale=2.0, features_per_level=8, sh_degree=2)
TOY_MLP = MLPConfig(hidden=8, density_layers=2, color_layers=1)


def toy_field(seed=0):
    f = RadianceField((0, 0, 0), (1, 1, 1), TOY_ENC, TOY_MLP, seed=seed)
    rng = np.random.default_rng(seed + 1)
    for k, v in f.params.items():
        # larger grid features and nonzero biases so every path carries signal
        if k.startswith("grid") or k.endswith("_b"):
            v[...] = rng.normal(0, 0.5, v.shape)
    return f


def unit(rng, n):
    d = rng.normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def trilinear_oracle(grid, res, p):
    """Textbook trilinear lookup written corner by corner."""
    pos = [min(max(c, 0.0), 1.0) * res for c in p]
    i = [min(int(math.floor(c)), res - 1) for c in pos]
    f = [c - j for c, j in zip(pos, i)]
    acc = np.zeros(grid.shape[-1])
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = ((f[0] if dx else 1 - f[0]) * (f[1] if dy else 1 - f[1]) * (f[2] if dz else 1 - f[2]))
                acc += w * grid[i[0] + dx, i[1] + dy, i[2] + dz]
    return acc


def test_sh_values():
    d = np.array([[0.0, 0.0, 1.0]])
    b = encode_direction(d, 3)
    assert b.shape == (1, 16)
    assert b[0, 0] == pytest.approx(1 / (2 * math.sqrt(math.pi)))
    assert b[0, 0] == pytest.approx(0.28209479)
    assert b[0, 2] == pytest.approx(0.48860251)
    with pytest.raises(NonUnitDirectionError):
        encode_direction(np.array([[0.0, 0.0, 1.1]]))


def test_sh_orthonormal_monte_carlo():
    rng = np.random.default_rng(7)
    d = unit(rng, 1_000_000)
    Y = sh_basis(d, 3)
    gram = 4 * math.pi * (Y.T @ Y) / len(d)
    assert np.abs(gram - np.eye(16)).max() < 5e-3


def test_encoding_vertex_center_and_oracle(rng):
    f = toy_field()
    g0 = f.params["grid0"]
    res = TOY_ENC.resolution(0)
    # grid vertex (1, 2, 0) at level 0
    x = np.array([[1 / res, 2 / res, 0.0]])
    assert np.allclose(f.encode_position(x)[0, :8], g0[1, 2, 0], atol=1e-12)
    c = np.array([[0.5 / res, 0.5 / res, 0.5 / res]])
    assert np.allclose(f.encode_position(c)[0, :8], g0[:2, :2, :2].reshape(-1, 8).mean(0), atol=1e-12)
    pts = rng.uniform(0, 1, (200, 3))
    enc = f.encode_position(pts)
    for n, p in enumerate(pts):
        for level in range(TOY_ENC.levels):
            ref = trilinear_oracle(f.params[f"grid{level}"], TOY_ENC.resolution(level), p)
            assert np.abs(enc[n, level * 8:(level + 1) * 8] - ref).max() < 1e-12


def test_zero_output_layer():
    f = RadianceField((0, 0, 0), (1, 1, 1))
    for k in ("sigma_w", "sigma_b", "rgb_w", "rgb_b"):
        f.params[k][...] = 0
    out = f.query(np.array([[0.3, 0.4, 0.5]]), np.array([[0.0, 0.0, 1.0]]))
    assert out.sigma[0] == 1.0 and np.all(out.color == 0.5)


def test_semantic_is_view_independent_and_density_nonnegative(rng):
    f = toy_field()
    x = rng.uniform(0, 1, (50, 3))
    a = f.query(x, unit(rng, 50))
    b = f.query(x, unit(rng, 50))
    assert np.array_equal(a.semantic, b.semantic)
    assert np.all(a.sigma >= 0) and np.all((a.color >= 0) & (a.color <= 1))
    f.params["sigma_b"][...] = 50.0
    assert np.all(np.isfinite(f.query(x, unit(rng, 50)).sigma))


def objective(f, x, d, ws, wc, wsem):
    out = f.query(x, d)
    return float((ws * out.sigma).sum() + (wc * out.color).sum() + (wsem * out.semantic).sum())


def test_full_jacobian_against_finite_differences(rng):
    f = toy_field(3)
    x = rng.uniform(0.05, 0.95, (6, 3))
    d = unit(rng, 6)
    ws, wc, wsem = rng.normal(size=6), rng.normal(size=(6, 3)), rng.normal(size=(6, 4))
    out, cache = f.forward(x, d)
    f.zero_grad()
    f.backward(cache, ws, wc, wsem)
    h = 1e-4
    worst = 0.0
    for k, p in f.params.items():
        flat = p.reshape(-1)
        g = f.grads[k].reshape(-1)
        for i in range(flat.size):
            if k.startswith("grid") and g[i] == 0:
                continue  # feature not touched by any sample
            old = flat[i]
            flat[i] = old + h
            up = objective(f, x, d, ws, wc, wsem)
            flat[i] = old - h
            dn = objective(f, x, d, ws, wc, wsem)
            flat[i] = old
            fd = (up - dn) / (2 * h)
            scale = max(abs(fd), abs(g[i]), 1e-3)
            worst = max(worst, abs(fd - g[i]) / scale)
    assert worst < 1e-4


def test_backward_linearity_and_zero(rng):
    f = toy_field(4)
    x = rng.uniform(0, 1, (8, 3))
    d = unit(rng, 8)
    args = rng.normal(size=8), rng.normal(size=(8, 3)), rng.normal(size=(8, 4))
    _, cache = f.forward(x, d)
    f.zero_grad()
    f.backward(cache, *(np.zeros_like(a) for a in args))
    assert all(not g.any() for g in f.grads.values())
    f.backward(cache, *args)
    total = {k: g.copy() for k, g in f.grads.items()}
    acc = {k: np.zeros_like(g) for k, g in f.grads.items()}
    for n in range(8):
        _, c1 = f.forward(x[n:n + 1], d[n:n + 1])
        f.zero_grad()
        f.backward(c1, args[0][n:n + 1], args[1][n:n + 1], args[2][n:n + 1])
        for k in acc:
            acc[k] += f.grads[k]
    for k in acc:
        assert np.allclose(acc[k], total[k], atol=1e-12)
    with pytest.raises(ShapeMismatchError):
        f.backward(cache, np.zeros(3), args[1], args[2])


def test_adam_moves_toward_target(rng):
    f = toy_field(5)
    x = rng.uniform(0, 1, (64, 3))
    d = unit(rng, 64)
    target = 0.8
    losses = []
    for _ in range(50):
        out, cache = f.forward(x, d)
        r = out.color - target
        losses.append(float((r ** 2).mean()))
        f.zero_grad()
        f.backward(cache, np.zeros(64), 2 * r / r.size, np.zeros((64, 4)))
        f.adam_step(1e-2)
    assert losses[-1] < 0.1 * losses[0]


def test_checkpoint_round_trip(tmp_path, rng):
    f = toy_field(6)
    f.save(tmp_path / "f.bin")
    assert (tmp_path / "f.bin").read_bytes()[:7] == b"PARFFP1"
    g = RadianceField.load(tmp_path / "f.bin")
    x = rng.uniform(0, 1, (10, 3))
    d = unit(rng, 10)
    a, b = f.query(x, d), g.query(x, d)
    # parameters are stored as 32-bit floats
    assert np.allclose(a.color, b.color, atol=1e-5) and np.allclose(a.sigma, b.sigma, rtol=1e-4)
