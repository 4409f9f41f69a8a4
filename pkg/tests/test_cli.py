import csv
import math

import numpy as np
import pytest

from primfusion import synth
from primfusion.cli import main
from primfusion.dataset import read_depth
from primfusion.edits import format_matrix
from primfusion.registry import Registry


def files(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def box_data(tmp_path_factory):
    d = tmp_path_factory.mktemp("box")
    assert main(["synth", "--preset", "box-room", "--out", str(d), "--train", "20", "--eval", "10"]) == 0
    return d


def test_synth_writes_all_frames(box_data):
    assert len(list((box_data / "color").glob("*.png"))) == 30
    assert len(list((box_data / "depth").glob("*.png"))) == 30
    assert len((box_data / "poses.txt").read_text().splitlines()) == 30
    assert (box_data / "intrinsics.txt").read_text().split()[4:] == ["64", "64"]


def test_synth_is_reproducible_and_noise_only_touches_depth(box_data, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    args = ["synth", "--preset", "box-room", "--train", "20", "--eval", "10"]
    main(args + ["--out", str(a)])
    assert files(a) == files(box_data)
    main(["--seed", "0"] + args + ["--out", str(b), "--noise", "0.01"])
    fa, fb = files(a), files(b)
    assert all(fa[k] == fb[k] for k in fa if k.parts[0] == "color")
    assert any(fa[k] != fb[k] for k in fa if k.parts[0] == "depth")


def test_fuse_recovers_the_five_walls(box_data, tmp_path, box_spec):
    out = tmp_path / "fused"
    assert main(["fuse", "--data", str(box_data), "--out", str(out), "--cell-size", "8"]) == 0
    reg = Registry.load(out / "registry.txt")
    assert len(reg.alive) == 5
    for rect in box_spec.planes:
        gt = rect.plane
        best = min(reg.alive, key=lambda p: np.linalg.norm(p.normal - gt.normal))
        assert math.degrees(math.acos(min(1.0, best.normal @ gt.normal))) < 1.0
        # registry text keeps 9 significant digits
        assert abs(best.offset - gt.offset) < 5e-3
    with open(out / "fusion_report.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 20
    from primfusion.volume import SemanticVolume
    n_vox = SemanticVolume.load(out / "volume.bin").labels.size
    for r in rows:
        total = sum(int(v) for k, v in r.items() if "->" in k)
        assert total == int(r["touched"]) <= n_vox


def test_fuse_ablation_volumes(box_data, tmp_path):
    from primfusion.volume import SemanticVolume
    counts = {}
    for flag in ("--no-planes", "--depth-guided"):
        out = tmp_path / flag.strip("-")
        assert main(["fuse", "--data", str(box_data), "--out", str(out), flag]) == 0
        assert len(Registry.load(out / "registry.txt").alive) == 0
        counts[flag] = SemanticVolume.load(out / "volume.bin").counts()
    assert counts["--no-planes"]["P"] == counts["--depth-guided"]["P"] == 0
    # depth guidance carves the half of the band that lies in front of the surface
    assert counts["--depth-guided"]["D"] < counts["--no-planes"]["D"]


def test_empty_dataset_is_a_usage_error(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert main(["fuse", "--data", str(tmp_path / "empty"), "--out", str(tmp_path / "o")]) == 2
    assert "error" in capsys.readouterr().err


def test_bad_edit_script_is_a_usage_error(tmp_path, capsys):
    script = tmp_path / "bad.txt"
    script.write_text("explode 3\n")
    model = tmp_path / "m"
    model.mkdir()
    assert main(["edit-apply", "--model", str(model), "--edit", str(script), "--out", str(tmp_path / "o")]) == 2


@pytest.fixture(scope="module")
def tiny_model(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    data, fused, model = root / "data", root / "fused", root / "model"
    assert main(["synth", "--preset", "box-room", "--out", str(data), "--train", "6", "--eval", "2",
                 "--width", "64", "--height", "64"]) == 0
    assert main(["fuse", "--data", str(data), "--out", str(fused), "--cell-size", "8", "--voxel-size", "0.1"]) == 0
    assert main(["train", "--data", str(data), "--volume", str(fused), "--out", str(model),
                 "--iters", "20", "--epochs", "1", "--batch", "256", "--holdout", "1"]) == 0
    return data, model


def test_train_writes_checkpoint_and_log(tiny_model):
    _, model = tiny_model
    for name in ("field.bin", "volume.bin", "registry.txt", "log.csv"):
        assert (model / name).exists()
    header = (model / "log.csv").read_text().splitlines()[0]
    assert header.startswith("step,wall_time_s,L_c")


def test_render_and_eval(tiny_model, tmp_path, capsys):
    data, model = tiny_model
    out = tmp_path / "r"
    assert main(["render", "--model", str(model), "--data", str(data), "--out", str(out)]) == 0
    assert sorted(p.name for p in (out / "color").iterdir()) == ["000006.png", "000007.png"]
    assert (out / "semantic" / "000006.f32").stat().st_size == 4 * 4 * 64 * 64
    capsys.readouterr()
    assert main(["eval", "--pred", str(out), "--gt", str(out), "--out", str(tmp_path / "m.csv")]) == 0
    assert "99.00" in capsys.readouterr().out
    assert main(["eval", "--pred", str(out), "--gt", str(data)]) == 0


def test_empty_edit_script_is_identity(tiny_model, tmp_path):
    data, model = tiny_model
    empty = tmp_path / "empty.txt"
    empty.write_text("# nothing\n")
    a, b = tmp_path / "a", tmp_path / "b"
    main(["render", "--model", str(model), "--data", str(data), "--out", str(a)])
    main(["render", "--model", str(model), "--data", str(data), "--out", str(b), "--edit", str(empty)])
    assert files(a) == files(b)


def test_edit_apply_and_render_cameras(tiny_model, tmp_path):
    data, model = tiny_model
    reg = Registry.load(model / "registry.txt")
    back = min(reg.alive, key=lambda p: np.linalg.norm(p.normal - [0, 0, 1])).id
    script = tmp_path / "edit.txt"
    script.write_text(f"delete {back}\ntransform_region -1 -1 1.5 0 0 2.5 {format_matrix(np.eye(4))}\n")
    edited = tmp_path / "edited"
    assert main(["edit-apply", "--model", str(model), "--edit", str(script), "--out", str(edited)]) == 0
    assert not Registry.load(edited / "registry.txt").get(back).alive
    assert (edited / "edit" / "transforms.txt").read_text().count("\n") == 1
    out = tmp_path / "r"
    assert main(["render", "--model", str(edited), "--cameras", str(data / "poses.txt"),
                 "--intrinsics", str(data / "intrinsics.txt"), "--out", str(out)]) == 0
    assert len(list((out / "depth").glob("*.png"))) == 8
    assert read_depth(out / "depth" / "000000.png").shape == (64, 64)
