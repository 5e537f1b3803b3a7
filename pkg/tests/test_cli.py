import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from voxsem import io
from voxsem.cli import main
from voxsem.grid import NUM_CLASSES, GridSpec, ProbVolume, Visibility

SMALL = "n_scenes = 4\nepochs = 1\n"


def run(*argv):
    return main([str(a) for a in argv])


def tree(root: Path, skip=("resources.csv",)):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file() and p.name not in skip}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("scenes", "--n", 2, "--seed", 5, "--out", d / "sc") == 0
    (d / "default.cfg").write_text("# defaults\n")
    (d / "small.cfg").write_text(SMALL)
    scene = d / "sc" / "scene_00005"
    vis = io.load_volume(scene / "tsdf.vgrid").visibility
    spec = io.load_volume(scene / "gt.vgrid").spec
    io.write_vgrid(d / "vis.vgrid", io.KIND_LABEL, (vis != Visibility.OCCLUDED)[None].astype(np.uint8), spec)
    io.write_vgrid(d / "occ.vgrid", io.KIND_LABEL, (vis == Visibility.OCCLUDED)[None].astype(np.uint8), spec)
    probs = np.random.default_rng(0).dirichlet(np.ones(NUM_CLASSES), size=spec.dims).transpose(3, 0, 1, 2)
    io.save_volume(d / "probs.vgrid", ProbVolume.from_probs(probs, spec))
    return d


def test_usage_errors(capsys):
    assert run("bogus") == 2
    assert run("eval") == 2
    assert run("--help") == 0


def test_gradcheck_passes(capsys):
    assert run("gradcheck", "--voxels", 20) == 0
    assert "max relative error" in capsys.readouterr().out


def test_scene_files(workdir):
    scene = workdir / "sc" / "scene_00005"
    names = {p.name for p in scene.iterdir()}
    assert {"gt.vgrid", "tsdf.vgrid", "tsdf.vis.vgrid", "rf1.vgrid", "counts.vgrid", "feat.vgrid", "depth.png"} <= names
    assert (workdir / "sc" / "scene_00006").is_dir()
    assert "seed = 5" in (workdir / "sc" / "config.txt").read_text()


def test_scenes_deterministic(workdir, tmp_path):
    assert run("scenes", "--n", 2, "--seed", 5, "--out", tmp_path) == 0
    assert tree(tmp_path) == tree(workdir / "sc")


def test_tsdf_and_project_deterministic(workdir, tmp_path):
    scene = workdir / "sc" / "scene_00005"
    cfg = workdir / "default.cfg"
    outs = []
    for i in range(2):
        t, p = tmp_path / f"t{i}.vgrid", tmp_path / f"p{i}.vgrid"
        assert run("tsdf", "--depth", scene / "depth.png", "--cam", cfg, "--spec", cfg, "--out", t) == 0
        assert run("project", "--feat", scene / "feat.vgrid", "--depth", scene / "depth.png",
                   "--cam", cfg, "--spec", cfg, "--out", p) == 0
        outs.append([t.read_bytes(), io.visibility_path(t).read_bytes(), p.read_bytes()])
        assert (tmp_path / f"t{i}.vgrid.config.txt").exists()
    assert outs[0] == outs[1]
    vol = io.load_volume(tmp_path / "t0.vgrid")
    assert vol.values.shape == (16, 16, 16) and np.abs(vol.values).max() <= 1


def test_tsdf_trunc_flag(workdir, tmp_path):
    scene = workdir / "sc" / "scene_00005"
    cfg = workdir / "default.cfg"
    assert run("tsdf", "--depth", scene / "depth.png", "--cam", cfg, "--spec", cfg,
               "--trunc", 0.12, "--out", tmp_path / "t.vgrid") == 0
    assert "truncation = 0.12" in (tmp_path / "t.vgrid.config.txt").read_text()


def test_project_rejects_3d_features(workdir, tmp_path):
    scene = workdir / "sc" / "scene_00005"
    cfg = workdir / "default.cfg"
    code = run("project", "--feat", scene / "rf1.vgrid", "--depth", scene / "depth.png",
               "--cam", cfg, "--spec", cfg, "--out", tmp_path / "p.vgrid")
    assert code == 1


def test_fcm_fills_only_occluded(workdir, tmp_path):
    scene = workdir / "sc" / "scene_00005"
    out = tmp_path / "rrf.vgrid"
    assert run("fcm", "--features", scene / "rf1.vgrid", "--classes", scene / "gt.vgrid",
               "--vis", workdir / "vis.vgrid", "--occ", workdir / "occ.vgrid", "--out", out) == 0
    before = io.load_volume(scene / "rf1.vgrid").data
    after = io.load_volume(out).data
    occ = io.read_vgrid(workdir / "occ.vgrid")[1][0] != 0
    assert np.array_equal(before[:, ~occ], after[:, ~occ])


def test_eval_perfect_prediction(workdir, tmp_path, capsys):
    scene = workdir / "sc" / "scene_00005"
    out = tmp_path / "m.csv"
    assert run("eval", "--pred", scene / "gt.vgrid", "--gt", scene / "gt.vgrid",
               "--tsdf", scene / "tsdf.vgrid", "--out", out) == 0
    rows = {(r.split(",")[0], r.split(",")[1]): r.split(",")[3] for r in out.read_text().splitlines()[1:]}
    assert rows[("miou", "")] == "1.000000"
    assert rows[("sc_iou", "")] == "1.000000"
    assert rows[("ignore_label_excluded", "")] == "255"
    assert sum(k[0] == "iou" for k in rows) == NUM_CLASSES - 1


def test_eval_shape_mismatch(workdir, tmp_path, capsys):
    small = tmp_path / "small.vgrid"
    io.write_vgrid(small, io.KIND_LABEL, np.zeros((1, 8, 8, 8), np.uint8), GridSpec((8, 8, 8), 0.1))
    scene = workdir / "sc" / "scene_00005"
    code = run("eval", "--pred", small, "--gt", scene / "gt.vgrid", "--tsdf", scene / "tsdf.vgrid",
               "--out", tmp_path / "m.csv")
    err = capsys.readouterr().err
    assert code == 1
    assert "(8, 8, 8)" in err and "(16, 16, 16)" in err
    assert not (tmp_path / "m.csv").exists()


def test_hist_csv(workdir, tmp_path):
    out = tmp_path / "h.csv"
    scene = workdir / "sc" / "scene_00005"
    assert run("hist", "--probs", workdir / "probs.vgrid", "--gt", scene / "gt.vgrid",
               "--class", 1, "--bins", 10, "--out", out) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "bin,lo,hi,count" and len(lines) == 11
    gt = io.load_volume(scene / "gt.vgrid").labels
    assert sum(int(l.split(",")[3]) for l in lines[1:]) == int((gt == 1).sum())
    assert run("hist", "--probs", workdir / "probs.vgrid", "--gt", scene / "gt.vgrid",
               "--class", 99, "--out", out) == 1


def test_missing_input_reports_error(tmp_path, capsys):
    assert run("hist", "--probs", tmp_path / "nope.vgrid", "--gt", tmp_path / "nope.vgrid",
               "--class", 1, "--out", tmp_path / "h.csv") == 1
    assert "voxsem hist: error" in capsys.readouterr().err


def test_train_demo_deterministic(workdir, tmp_path):
    for i in range(2):
        assert run("train-demo", "--config", workdir / "small.cfg", "--seed", 2, "--out", tmp_path / f"r{i}") == 0
    a, b = tree(tmp_path / "r0"), tree(tmp_path / "r1")
    assert a == b
    assert Path("train_log.csv") in a and Path("params/index.csv") in a
    assert any(str(k).startswith("hist/class_") for k in a)


def test_seed_precedence(workdir, tmp_path, monkeypatch):
    monkeypatch.setenv("VOXSEM_SEED", "11")
    assert run("train-demo", "--config", workdir / "small.cfg", "--out", tmp_path / "env") == 0
    assert "seed = 11" in (tmp_path / "env" / "config.txt").read_text()
    assert run("train-demo", "--config", workdir / "small.cfg", "--seed", 3, "--out", tmp_path / "flag") == 0
    assert "seed = 3" in (tmp_path / "flag" / "config.txt").read_text()


def test_ablate_deterministic(workdir, tmp_path):
    plan = tmp_path / "plan.txt"
    plan.write_text("A: fcm=0\nB: fcm=1 reuse=0\nC: fcm=1 reuse=1 lambda1=0.5 lambda2=0.5\n")
    for i in range(2):
        assert run("ablate", "--config", workdir / "small.cfg", "--plan", plan, "--out", tmp_path / f"a{i}") == 0
    assert tree(tmp_path / "a0") == tree(tmp_path / "a1")
    rows = (tmp_path / "a0" / "ablation.csv").read_text().splitlines()
    assert rows[0].startswith("variant,fcm,reuse")
    assert [r.split(",")[0] for r in rows[1:]] == ["A", "B", "C"]
    assert rows[1].split(",")[6] == ""  # single-stage model has no refined score
    res = (tmp_path / "a0" / "resources.csv").read_text().splitlines()
    assert res[0] == "variant,wall_seconds,peak_memory_mb" and len(res) == 4


def test_ablate_empty_plan(workdir, tmp_path):
    plan = tmp_path / "plan.txt"
    plan.write_text("# nothing\n")
    assert run("ablate", "--config", workdir / "small.cfg", "--plan", plan, "--out", tmp_path / "e") == 0
    assert (tmp_path / "e" / "ablation.csv").read_text().count("\n") == 1


def test_bad_config_key(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("epoch = 3\n")
    assert run("train-demo", "--config", cfg, "--out", tmp_path / "x") == 1
    assert "epoch" in capsys.readouterr().err


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "voxsem.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "gradcheck" in proc.stdout
