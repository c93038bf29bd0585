import functools

import numpy as np
import pytest

from pointup import cli, gradcheck
from pointup.io import read_pgm, read_xyz, write_off, write_xyz
from pointup.metrics import ReferenceMesh
from pointup.neu import load_params

from conftest import fibonacci_sphere


@pytest.fixture
def sphere_file(tmp_path):
    path = tmp_path / "s.xyz"
    write_xyz(fibonacci_sphere(256), path)
    return path


def run(argv, capsys):
    code = cli.run_command([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_evaluate_self(sphere_file, capsys):
    code, out, _ = run(["evaluate", "--pred", sphere_file, "--ref", sphere_file], capsys)
    assert code == 0
    values = dict(line.replace(" ", "").split("=") for line in out.splitlines())
    assert float(values["cd"]) == 0 and float(values["hd"]) == 0


def test_evaluate_with_mesh_and_csv(tmp_path, capsys):
    pts = tmp_path / "p.xyz"
    pts.write_text("0.25 0.25 2\n2 0 1\n")
    mesh = tmp_path / "m.off"
    write_off(ReferenceMesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]), [[0, 1, 2]]), mesh)
    code, out, _ = run(["evaluate", "--pred", pts, "--ref", pts, "--ref-mesh", mesh, "--csv"], capsys)
    assert code == 0
    header, row = out.splitlines()
    assert header == "cd,hd,p2f_mean,p2f_std"
    mean = float(row.split(",")[2])
    assert mean == pytest.approx((2 + np.sqrt(2)) / 2 * 1e3, abs=1e-6)


def test_upsample_direct_emits_rate_times_n(sphere_file, tmp_path, capsys):
    out = tmp_path / "dense.xyz"
    trace = tmp_path / "trace.csv"
    argv = ["upsample", "--input", sphere_file, "--rate", 4, "--mode", "direct", "--iters", 3,
            "--views", 2, "--img-size", 16, "--out", out, "--trace", trace]
    code, text, _ = run(argv, capsys)
    assert code == 0
    assert read_xyz(out).shape == (1024, 3)
    assert text.splitlines()[0] == "points=1024"
    assert len(trace.read_text().splitlines()) == 4
    first = out.read_bytes(), trace.read_bytes(), text
    code, text, _ = run(argv, capsys)
    assert (out.read_bytes(), trace.read_bytes(), text) == first


def test_upsample_neu_and_train(tmp_path, capsys):
    rng = np.random.default_rng(0)
    patch_dir = tmp_path / "patches"
    patch_dir.mkdir()
    for i in range(2):
        write_xyz(rng.normal(size=(16, 3)), patch_dir / f"p{i}.xyz")
    params = tmp_path / "p.neup"
    small = ["--rate", 2, "--views", 2, "--img-size", 16, "--width", 4]
    code, text, _ = run(["train", "--patch-dir", patch_dir, "--out", params, "--epochs", 2, "--batch", 2] + small,
                        capsys)
    assert code == 0 and "epochs=2" in text
    assert load_params(params).rate == 2
    out = tmp_path / "d.xyz"
    code, text, _ = run(["upsample", "--input", patch_dir / "p0.xyz", "--mode", "neu", "--params", params,
                         "--out", out] + small, capsys)
    assert code == 0 and read_xyz(out).shape == (32, 3)
    code, _, err = run(["upsample", "--input", patch_dir / "p0.xyz", "--mode", "neu", "--params", params,
                        "--out", out, "--rate", 4], capsys)
    assert code == 1 and "rate" in err


def test_render_writes_views(sphere_file, tmp_path, capsys):
    out = tmp_path / "views"
    code, text, _ = run(["render", "--input", sphere_file, "--views", 3, "--size", 16, "--out", out, "--png"],
                        capsys)
    assert code == 0
    assert sorted(p.name for p in out.iterdir()) == ["view_00.pgm", "view_00.png", "view_01.pgm",
                                                     "view_01.png", "view_02.pgm", "view_02.png"]
    img = read_pgm(out / "view_00.pgm")
    assert img.shape == (16, 16) and img.max() > 0.9 and img.min() < 0.1
    first = (out / "view_01.pgm").read_bytes()
    run(["render", "--input", sphere_file, "--views", 3, "--size", 16, "--out", out], capsys)
    assert (out / "view_01.pgm").read_bytes() == first


def test_exit_codes(sphere_file, tmp_path, capsys):
    assert run([], capsys)[0] == 1
    assert run(["frobnicate"], capsys)[0] == 1
    assert run(["evaluate", "--pred", sphere_file], capsys)[0] == 1
    assert run(["evaluate", "--pred", sphere_file, "--ref", sphere_file, "--bogus"], capsys)[0] == 1
    bad = tmp_path / "bad.xyz"
    bad.write_text("0 0\n")
    code, _, err = run(["evaluate", "--pred", bad, "--ref", sphere_file], capsys)
    assert code == 2 and "line 1" in err
    assert run(["evaluate", "--pred", tmp_path / "none.xyz", "--ref", sphere_file], capsys)[0] == 2
    quad = tmp_path / "q.off"
    quad.write_text("OFF\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n")
    assert run(["evaluate", "--pred", sphere_file, "--ref", sphere_file, "--ref-mesh", quad], capsys)[0] == 2
    cfg = tmp_path / "run.cfg"
    cfg.write_text("unknown_key = 1\n")
    out = tmp_path / "o.xyz"
    assert run(["upsample", "--input", sphere_file, "--out", out, "--config", cfg], capsys)[0] == 1
    assert run(["upsample", "--input", sphere_file, "--out", out, "--set", "nokey=1"], capsys)[0] == 1
    code, _, _ = run(["upsample", "--input", sphere_file, "--out", out, "--iters", 2, "--views", 2,
                      "--img-size", 16, "--lr", "1e300"], capsys)
    assert code == 3


def test_config_file_is_used_and_flag_wins(sphere_file, tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("rate = 2\niters = 1\nviews = 2\nimg-size = 16\n")
    out = tmp_path / "o.xyz"
    assert run(["upsample", "--input", sphere_file, "--out", out, "--config", cfg], capsys)[0] == 0
    assert read_xyz(out).shape == (512, 3)
    assert run(["upsample", "--input", sphere_file, "--out", out, "--config", cfg, "--rate", 3], capsys)[0] == 0
    assert read_xyz(out).shape == (768, 3)


def test_gradcheck_failure_path(monkeypatch, capsys):
    real = gradcheck.upsampler_gradient

    def broken(*args, **kwargs):
        value, grads = real(*args, **kwargs)
        grads["head.b2"] = grads["head.b2"] * 1.5
        return value, grads

    monkeypatch.setattr(gradcheck, "upsampler_gradient", broken)
    monkeypatch.setattr(cli, "renderer_suite", functools.partial(gradcheck.renderer_suite, configs=2))
    monkeypatch.setattr(cli, "joint_suite", functools.partial(gradcheck.joint_suite, instances=1))
    code, out, err = run(["gradcheck", "--quick"], capsys)
    assert code == 3
    assert "upsampler: FAIL" in out
    assert "worst coordinate: upsampler" in err and "head.b2" in err
