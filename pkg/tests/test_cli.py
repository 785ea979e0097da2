import json
import subprocess
import sys

import numpy as np
import pytest

from kampnet import cli

TINY_SET = [
    "--set", "folds=3", "--set", "phantom.subjects=24", "--set", "phantom.size=48", "--set", "phantom.depth=4",
    "--set", "slice_stream.widths=[8, 16]", "--set", "slice_stream.blocks=[1, 1]",
    "--set", "slice_stream.input_size=24", "--set", "patch_stream.widths=[8, 12]",
    "--set", "patch_stream.blocks=[1, 1]", "--set", "patch_stream.input_size=16",
    "--set", "stage1.max_epochs=1", "--set", "stage2.max_epochs=1", "--set", "scratch.max_epochs=1",
    "--set", "svm.iterations=2000",
]


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_selftest_passes(capsys):
    code, out, _ = run(capsys, "selftest")
    assert code == 0
    errs = [float(line.split()[-1]) for line in out.splitlines() if "max rel error" in line]
    assert len(errs) == 14 and max(errs) < 1e-4


def test_generate_is_deterministic(tmp_path, capsys):
    args = ["--preset", "strong-signal", "--set", "phantom.subjects=4", "--set", "phantom.size=32"]
    hashes = []
    for name in ("a", "b"):
        code, out, _ = run(capsys, "generate", *args, "--seed", "7", "--out", str(tmp_path / name))
        assert code == 0
        hashes.append(out.split()[-1])
    assert hashes[0] == hashes[1]
    info = json.loads((tmp_path / "a" / "dataset.json").read_text())
    assert info["phantom_spec"]["seed"] == 7


def test_encode_writes_pngs(tmp_path, capsys):
    run(capsys, "generate", "--preset", "strong-signal", "--set", "phantom.subjects=2", "--set", "phantom.size=32",
        "--out", str(tmp_path / "d"))
    code, _, _ = run(capsys, "encode", str(tmp_path / "d" / "S0000.kvol"), "--out", str(tmp_path / "png"),
                     "--grayscale")
    assert code == 0
    names = sorted(p.name for p in (tmp_path / "png").iterdir())
    assert "S0000_slice1.png" in names and "S0000_patch2.png" in names and "S0000_gray0.png" in names


def test_structured_errors(tmp_path, capsys):
    code, _, err = run(capsys, "encode", str(tmp_path / "missing.kvol"), "--out", str(tmp_path))
    assert code == cli.EXIT_MISSING and err.startswith("kampnet: error: missing-file:")
    bad = tmp_path / "bad.json"
    bad.write_text('{\n "seed": 1,\n "folds": oops\n}')
    code, _, err = run(capsys, "train", "--config", str(bad))
    assert code == cli.EXIT_CONFIG and "line 3" in err and err.count("\n") == 1
    code, _, err = run(capsys, "sweep-alpha", str(tmp_path))
    assert code == cli.EXIT_MISSING


def test_train_evaluate_sweep_and_cam(tmp_path, capsys):
    out = tmp_path / "run"
    code, text, err = run(capsys, "train", "--preset", "strong-signal", *TINY_SET, "--out", str(out),
                          "--folds", "0")
    assert code == 0, err
    assert (out / "checkpoints" / "fold0_dsn.ktnsr").exists()
    assert not (out / "checkpoints" / "fold1_dsn.ktnsr").exists()
    golden = tmp_path / "golden.csv"
    code, _, err = run(capsys, "evaluate", "--preset", "strong-signal", *TINY_SET, "--out", str(out),
                       "--golden", str(golden), "--bless")
    assert code == 0, err
    code, text, err = run(capsys, "evaluate", "--preset", "strong-signal", *TINY_SET, "--out", str(out),
                          "--golden", str(golden))
    assert code == 0 and "matches" in text
    golden.write_text("fold\n")
    code, _, err = run(capsys, "evaluate", "--preset", "strong-signal", *TINY_SET, "--out", str(out),
                       "--golden", str(golden))
    assert code == 1 and "golden-mismatch" in err

    code, text, _ = run(capsys, "sweep-alpha", str(out), "--out", str(tmp_path / "sweep.csv"))
    assert code == 0
    assert (tmp_path / "sweep.csv").read_text() == (out / "alpha_sweep.csv").read_text()

    code, _, err = run(capsys, "cam", str(out / "checkpoints" / "fold0_dsn.ktnsr"), "--preset", "strong-signal",
                       *TINY_SET, "--subject", "S0002", "--out", str(tmp_path / "cam"))
    assert code == 0, err
    from PIL import Image

    heat = np.asarray(Image.open(tmp_path / "cam" / "S0002_slice1_class0_cam.png"))
    overlay = np.asarray(Image.open(tmp_path / "cam" / "S0002_slice1_class0_overlay.png"))
    assert heat.shape == (16, 16) and overlay.shape == (16, 16, 3)


def test_manifest_rerun_reproduces(tmp_path, capsys):
    out = tmp_path / "run"
    code, _, err = run(capsys, "evaluate", "--preset", "strong-signal", *TINY_SET, "--out", str(out))
    assert code == 0, err
    code, text, err = run(capsys, "evaluate", "--manifest", str(out / "run_manifest.json"),
                          "--out", str(tmp_path / "again"))
    assert code == 0, err
    assert "byte-exactly" in text
    assert (out / "summary.csv").read_bytes() == (tmp_path / "again" / "summary.csv").read_bytes()


def test_console_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "kampnet.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "selftest" in proc.stdout
