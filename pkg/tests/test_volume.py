import math

import numpy as np
import pytest

from primfusion import synth
from primfusion.geometry import Frame, Plane, Pose
from primfusion.registry import Registry
from primfusion.volume import (DENSE, EMPTY, NO_CHANGE, _classify, EditState, SemanticVolume, UnknownPlaneError, apply_edit,
                               classify_voxel, delete_primitive, fuse_frame, prune_voxels, transform_region)

from oracles import fuse_labels_bruteforce

INTR = synth.default_intrinsics()
VS = 0.01
PSI = math.sqrt(3) * VS


def wall_setup(z=2.0, semantic=True):
    fr = synth.raytrace_frame(synth.single_wall(z), Pose.identity(), INTR)
    reg = Registry()
    reg.add(Plane((0, 0, 1), z))
    fr.semantic[:] = 1 if semantic else 0
    return fr, reg


def oracle_fuse(vol, frame, reg, depth_guided=False):
    normals, offsets, alive = reg.plane_table()
    p = frame.pose
    i = frame.intrinsics
    return fuse_labels_bruteforce(vol.labels, vol.origin, vol.voxel_size, p.rotation, p.translation,
                                  i.fx, i.fy, i.cx, i.cy, frame.depth, frame.semantic.astype(np.int64),
                                  normals, offsets, alive, depth_guided)


def test_psi_is_voxel_diagonal():
    assert SemanticVolume.empty((0, 0, 0), (1, 1, 1), VS).psi == pytest.approx(PSI)


def on_axis(z):
    # the principal point sits on a pixel corner; nudge onto a pixel centre
    return np.array([0.5 / INTR.fx * z, 0.5 / INTR.fy * z, z])


def test_classify_examples():
    fr, reg = wall_setup()
    assert classify_voxel((50.0, 0, 2.0), fr, reg, PSI) is None
    assert classify_voxel(on_axis(2.0), fr, reg, PSI) == 1
    assert classify_voxel(on_axis(2.0 + 3 * PSI), fr, reg, PSI) == DENSE
    assert classify_voxel(on_axis(2.0 - 2 * PSI), fr, reg, PSI) == EMPTY
    assert classify_voxel(on_axis(2.0 + 7 * PSI), fr, reg, PSI) is None
    fr.semantic[:] = 0
    assert classify_voxel(on_axis(2.0 + 7 * PSI), fr, reg, PSI) is None
    assert classify_voxel(on_axis(2.0 + 5 * PSI), fr, reg, PSI) == DENSE
    assert classify_voxel(on_axis(1.0), fr, reg, PSI) is None


def test_band_edges_are_half_open():
    fr, reg = wall_setup()
    tiny = 1e-9
    assert classify_voxel(on_axis(2.0 - PSI + tiny), fr, reg, PSI) == 1
    assert classify_voxel(on_axis(2.0 - PSI - tiny), fr, reg, PSI) == EMPTY
    assert classify_voxel(on_axis(2.0 + PSI - tiny), fr, reg, PSI) == 1
    assert classify_voxel(on_axis(2.0 + PSI + tiny), fr, reg, PSI) == DENSE
    assert classify_voxel(on_axis(2.0 + 6 * PSI + tiny), fr, reg, PSI) is None
    # exact edges, free of projection rounding
    z = np.array([-PSI, PSI, 6 * PSI, -6 * PSI, 6 * PSI])
    prim = np.array([True, True, True, False, False])
    code = _classify(z, np.zeros(5), np.zeros(5), prim, 6 * PSI, PSI)
    assert code.tolist() == [1, DENSE, NO_CHANGE, DENSE, NO_CHANGE]


def test_depth_guided_classify_examples():
    fr, reg = wall_setup(semantic=False)
    tiny = 1e-9
    assert classify_voxel(on_axis(2.0), fr, reg, PSI, depth_guided=True) == DENSE
    assert classify_voxel(on_axis(2.0 - 2 * PSI), fr, reg, PSI, depth_guided=True) == EMPTY
    assert classify_voxel(on_axis(1.0), fr, reg, PSI, depth_guided=True) == EMPTY
    assert classify_voxel(on_axis(2.0 + 5 * PSI), fr, reg, PSI, depth_guided=True) == DENSE
    assert classify_voxel(on_axis(2.0 + 7 * PSI), fr, reg, PSI, depth_guided=True) is None
    assert classify_voxel(on_axis(2.0 - PSI + tiny), fr, reg, PSI, depth_guided=True) == DENSE
    assert classify_voxel(on_axis(2.0 - PSI - tiny), fr, reg, PSI, depth_guided=True) == EMPTY
    # primitive pixels are unaffected by the flag
    fr.semantic[:] = 1
    assert classify_voxel(on_axis(2.0), fr, reg, PSI, depth_guided=True) == 1


def test_depth_guided_fusion_matches_oracle(box_frames):
    spec = synth.box_room()
    fr = box_frames[5].copy()
    fr.semantic[:] = 0
    reg = Registry()
    vol = SemanticVolume.empty(spec.bbox_min, spec.bbox_max, 0.1)
    want = oracle_fuse(vol, fr, reg, depth_guided=True)
    fuse_frame(vol, fr, reg, depth_guided=True)
    assert np.array_equal(vol.labels, want)
    c = vol.counts()
    assert c["P"] == 0 and c["D"] > 0
    # compared with plain dense fusion the band in front of the surface is carved
    plain = SemanticVolume.empty(spec.bbox_min, spec.bbox_max, 0.1)
    fuse_frame(plain, fr, reg)
    assert c["D"] < plain.counts()["D"]


def test_single_wall_shell_matches_oracle():
    fr, reg = wall_setup()
    vol = SemanticVolume.empty((-0.3, -0.3, 1.7), (0.3, 0.3, 2.3), VS)
    want = oracle_fuse(vol, fr, reg)
    fuse_frame(vol, fr, reg)
    assert np.array_equal(vol.labels, want)
    zc = vol.centers_along(2)
    column = vol.labels[30, 30]
    p = zc[column == 1]
    assert 1 <= len(p) <= 4 and np.all(np.abs(p - 2.0) < PSI)
    d = zc[column == DENSE]
    assert d.min() >= 2.0 + PSI - VS and d.max() < 2.0 + 6 * PSI
    assert np.all(column[zc < 2.0 - PSI] == EMPTY)


def test_fuse_is_idempotent(box_frames):
    from primfusion.detector import DetectorConfig, detect_planes
    reg = Registry()
    fr = box_frames[3].copy()
    reg.merge_detection(detect_planes(fr.depth, INTR, fr.pose, DetectorConfig(cell_size=8)), fr)
    spec = synth.box_room()
    vol = SemanticVolume.empty(spec.bbox_min, spec.bbox_max, 0.05)
    fuse_frame(vol, fr, reg)
    once = vol.labels.copy()
    fuse_frame(vol, fr, reg)
    assert np.array_equal(vol.labels, once)


def test_invalid_depth_leaves_volume_unchanged():
    fr, reg = wall_setup()
    fr.depth[:] = 0
    vol = SemanticVolume.empty((-0.3, -0.3, 1.7), (0.3, 0.3, 2.3), VS)
    before = vol.labels.copy()
    stats = fuse_frame(vol, fr, reg)
    assert np.array_equal(vol.labels, before) and stats.changed == 0


def test_dense_never_overwrites_primitive():
    fr, reg = wall_setup()
    vol = SemanticVolume.empty((-0.3, -0.3, 1.7), (0.3, 0.3, 2.3), VS)
    fuse_frame(vol, fr, reg)
    p_before = vol.labels == 1
    fr2, _ = wall_setup(semantic=False)
    fuse_frame(vol, fr2, reg)
    assert np.all(vol.labels[p_before] == 1)


def test_dead_plane_voxels_are_demoted_when_touched():
    fr, reg = wall_setup()
    vol = SemanticVolume.empty((-0.3, -0.3, 1.7), (0.3, 0.3, 2.3), VS)
    fuse_frame(vol, fr, reg)
    reg.kill(1)
    fr.semantic[:] = 0
    fuse_frame(vol, fr, reg)
    assert not (vol.labels == 1).any()
    assert set(np.unique(vol.labels)) <= {EMPTY, DENSE}


class ConstField:
    def __init__(self, fn):
        self.fn = fn

    def density(self, x):
        return self.fn(np.asarray(x))


def test_prune_examples():
    fr, reg = wall_setup()
    vol = SemanticVolume.empty((-0.3, -0.3, 1.7), (0.3, 0.3, 2.3), VS)
    fuse_frame(vol, fr, reg)
    n_d, n_p = vol.counts()["D"], vol.counts()["P"]
    assert prune_voxels(vol.copy(), ConstField(lambda x: np.full(len(x), 1e3))) == 0
    v0 = vol.copy()
    assert prune_voxels(v0, ConstField(lambda x: np.zeros(len(x)))) == n_d
    assert v0.counts()["D"] == 0 and v0.counts()["P"] == n_p
    # mixed field against a brute-force scan
    f = ConstField(lambda x: np.where(x[:, 0] > 0.0, 1.0, 0.001))
    want = vol.labels.copy()
    for idx in np.argwhere(vol.labels == DENSE):
        if f.density(vol.center(idx)[None])[0] < 0.01:
            want[tuple(idx)] = EMPTY
    prune_voxels(vol, f)
    assert np.array_equal(vol.labels, want)


def two_walls():
    vol = SemanticVolume.empty((0, 0, 0), (1, 1, 1), 0.1)
    reg = Registry()
    reg.add(Plane((0, 0, 1), 0.25))
    reg.add(Plane((1, 0, 0), 0.75))
    vol.labels[:, :, 2] = 1
    vol.labels[7, :, :3] = 2
    return vol, reg


def test_delete_one_of_two_walls():
    vol, reg = two_walls()
    other = vol.labels == 2
    n = delete_primitive(vol, 1, reg)
    # wall 2 overwrote 10 of wall 1's 100 voxels
    assert n == 90 and not reg.get(1).alive
    assert not (vol.labels == 1).any()
    assert np.array_equal(vol.labels == 2, other)
    with pytest.raises(UnknownPlaneError):
        delete_primitive(vol, 999, reg)


def test_apply_edit_examples(rng):
    vol = SemanticVolume.empty((-2, -2, -2), (2, 2, 2), 0.5)
    edit = EditState.for_volume(vol)
    x, d = np.array([1.0, 0, 0]), np.array([1.0, 0, 0])
    assert apply_edit(edit, x, d)[0] is x or np.array_equal(apply_edit(edit, x, d)[0], x)
    Rz = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1.0]])
    k = edit.add_transform(np.c_[Rz, np.zeros(3)])
    edit.edit_labels[:] = k
    x2, d2 = apply_edit(edit, x, d)
    assert np.allclose(x2, (0, 1, 0)) and np.allclose(d2, (0, 1, 0))
    edit2 = EditState.for_volume(vol)
    edit2.edit_labels[:] = edit2.add_transform(np.c_[np.eye(3), [0.3, -0.2, 0.1]])
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    assert np.array_equal(apply_edit(edit2, x, d)[1], d)
    with pytest.raises(ValueError):
        edit.add_transform(np.c_[2 * np.eye(3), np.zeros(3)])


def test_transform_region_moves_dense_block():
    vol = SemanticVolume.empty((0, 0, 0), (1, 1, 1), 0.1)
    vol.labels[1:3, 1:3, 1:3] = DENSE
    edit = EditState.for_volume(vol)
    T = np.c_[np.eye(3), [0.5, 0, 0]]
    k = transform_region(vol, edit, (0.1, 0.1, 0.1), (0.3, 0.3, 0.3), T)
    assert not (vol.labels[1:3, 1:3, 1:3] == DENSE).any()
    assert (edit.edit_labels[6:8, 1:3, 1:3] == k).all()
    assert (edit.edit_labels != 0).sum() == 8
    # sample in the moved block maps back into the original block
    x, _ = apply_edit(edit, vol.center((6, 1, 1)), np.array([0, 0, 1.0]))
    assert np.allclose(x, vol.center((1, 1, 1)))


def test_checkpoint_round_trip(tmp_path):
    vol, _ = two_walls()
    vol.labels[0, 0, 0] = EMPTY
    vol.save(tmp_path / "v.bin")
    back = SemanticVolume.load(tmp_path / "v.bin")
    assert np.array_equal(back.labels, vol.labels) and back.voxel_size == vol.voxel_size
    raw = (tmp_path / "v.bin").read_bytes()
    assert raw[:7] == b"PARFVS1"
    # x-fastest: the second stored label is voxel (1, 0, 0)
    first = np.frombuffer(raw[-vol.labels.size * 4:], dtype="<i4")
    assert first[1] == vol.labels[1, 0, 0] and first[vol.dims[0]] == vol.labels[0, 1, 0]
