import numpy as np
import pytest

from jointfuse import SeededRng, load_pgm, save_pgm
from jointfuse.cli import main
from jointfuse.synth import make_clean_pair


@pytest.fixture
def source_images(tmp_path):
    rng = SeededRng(404)
    c1, c2 = make_clean_pair(32, rng)
    p1 = tmp_path / "clean1.pgm"
    p2 = tmp_path / "clean2.pgm"
    save_pgm(c1, p1)
    save_pgm(c2, p2)
    return p1, p2


def run(args):
    return main([str(a) for a in args])


def test_degrade_identity_noise_free_round_trip(tmp_path, source_images):
    src, _ = source_images
    out_dir = tmp_path / "out"
    assert run(["degrade", "--input", src, "--op", "id", "--sigma", "0",
                "--out-dir", out_dir]) == 0
    degraded = load_pgm(out_dir / "degraded.pgm")
    original = load_pgm(src)
    assert np.max(np.abs(degraded - original)) <= 1.0 / 255


def test_degrade_downsample_halves_dims(tmp_path, source_images):
    src, _ = source_images
    out_dir = tmp_path / "down"
    assert run(["degrade", "--input", src, "--op", "down:s=2",
                "--out-dir", out_dir]) == 0
    assert load_pgm(out_dir / "degraded.pgm").shape == (16, 16)


def test_degrade_composite_equals_two_stage(tmp_path, source_images):
    src, _ = source_images
    one_shot = tmp_path / "oneshot"
    stage1 = tmp_path / "stage1"
    stage2 = tmp_path / "stage2"
    assert run(["degrade", "--input", src, "--op", "blur:sigma=1.0+down:s=2",
                "--sigma", "0", "--out-dir", one_shot]) == 0
    assert run(["degrade", "--input", src, "--op", "blur:sigma=1.0",
                "--sigma", "0", "--out-dir", stage1]) == 0
    assert run(["degrade", "--input", stage1 / "degraded.pgm", "--op", "down:s=2",
                "--sigma", "0", "--out-dir", stage2]) == 0
    a = load_pgm(one_shot / "degraded.pgm")
    b = load_pgm(stage2 / "degraded.pgm")
    # the two-stage path quantizes the intermediate, so allow 1 LSB
    assert a.shape == (16, 16)
    assert np.max(np.abs(a - b)) <= 1.5 / 255


def test_fuse_writes_output_and_manifest(tmp_path, source_images):
    p1, p2 = source_images
    out_dir = tmp_path / "fuse"
    assert run(["fuse", "--y1", p1, "--y2", p2, "--a1", "id", "--a2", "id",
                "--seed", "5", "--out-dir", out_dir, "--trace", "steps"]) == 0
    assert load_pgm(out_dir / "fused.pgm").shape == (32, 32)
    manifest = (out_dir / "run.txt").read_text()
    assert "subcommand = fuse" in manifest
    assert "seed = 5" in manifest
    assert "T = 3" in manifest
    assert (out_dir / "steps" / "step1_fused.pgm").exists()


def test_fuse_deterministic_artifacts(tmp_path, source_images):
    p1, p2 = source_images
    out_dir = tmp_path / "a"
    args = ["fuse", "--y1", p1, "--y2", p2, "--a1", "blur:sigma=1.0",
            "--a2", "id", "--sigma-y", "0.02", "--seed", "9",
            "--out-dir", out_dir]
    assert run(args) == 0
    first = {name: (out_dir / name).read_bytes() for name in ("fused.pgm", "run.txt")}
    assert run(args) == 0
    for name, blob in first.items():
        assert (out_dir / name).read_bytes() == blob, name


def test_fuse_with_tiny_denoiser_params(tmp_path, source_images):
    p1, p2 = source_images
    train_dir = tmp_path / "train"
    assert run(["train", "--pairs", "2", "--size", "12", "--epochs", "2",
                "--batch", "2", "--a1", "id", "--a2", "id", "--sigma", "0.02",
                "--seed", "3", "--out-dir", train_dir]) == 0
    fuse_dir = tmp_path / "tinyfuse"
    assert run(["fuse", "--y1", p1, "--y2", p2, "--a1", "id", "--a2", "id",
                "--denoiser", f"tiny:{train_dir / 'params.bin'}",
                "--seed", "4", "--out-dir", fuse_dir]) == 0
    assert (fuse_dir / "fused.pgm").exists()


def test_train_writes_loss_curve(tmp_path):
    out_dir = tmp_path / "train"
    assert run(["train", "--pairs", "2", "--size", "12", "--epochs", "3",
                "--batch", "2", "--a1", "id", "--a2", "down:s=2",
                "--sigma", "0.02", "--seed", "8", "--out-dir", out_dir]) == 0
    lines = (out_dir / "loss.csv").read_text().strip().splitlines()
    assert lines[0] == "step,loss"
    assert len(lines) == 1 + 3  # one batch per epoch at these sizes


def test_eval_csv_format(tmp_path, source_images):
    p1, p2 = source_images
    fused_dir = tmp_path / "f"
    assert run(["fuse", "--y1", p1, "--y2", p2, "--out-dir", fused_dir]) == 0
    eval_dir = tmp_path / "eval"
    triple = f"{p1},{p2},{fused_dir / 'fused.pgm'}"
    assert run(["eval", "--triple", triple, "--out-dir", eval_dir]) == 0
    lines = (eval_dir / "eval.csv").read_text().strip().splitlines()
    assert lines[0] == "path,q_mi,q_abf,ssim_src1,ssim_src2"
    assert len(lines) == 2
    fields = lines[1].split(",")
    assert fields[0].endswith("fused.pgm")
    assert all(np.isfinite(float(v)) for v in fields[1:])


def test_verify_identity_exits_zero(tmp_path, capsys):
    assert run(["verify", "--a1", "id", "--a2", "id",
                "--out-dir", tmp_path / "v"]) == 0
    out = capsys.readouterr().out
    assert "condition (1)" in out
    assert "pass" in out


def test_verify_regularized_wiener_exits_three(tmp_path):
    # gamma > 0 makes conditions (1)-(2) fail at the default tolerance
    assert run(["verify", "--a1", "blur:sigma=1.0,gamma=0.05", "--a2", "id",
                "--size", "6x6", "--out-dir", tmp_path / "v"]) == 3


def test_verify_downsample_condition_four_documented(tmp_path, capsys):
    # rank-deficient case: (1)-(3) hold, (4) fails, exit stays 0 because
    # only (1)-(2) gate the exit code
    assert run(["verify", "--a1", "down:s=2", "--a2", "id",
                "--out-dir", tmp_path / "v"]) == 0
    report = (tmp_path / "v" / "verify.txt").read_text()
    lines = report.strip().splitlines()
    assert lines[0].endswith("pass")
    assert lines[1].endswith("pass")
    assert lines[2].endswith("pass")
    assert lines[3].endswith("FAIL")


def test_usage_errors_exit_one(tmp_path, source_images, capsys):
    p1, p2 = source_images
    assert run(["degrade", "--input", tmp_path / "missing.pgm",
                "--out-dir", tmp_path]) == 1
    assert run(["fuse", "--y1", p1, "--y2", p2, "--a1", "warp:x=1",
                "--out-dir", tmp_path]) == 1
    assert run(["nonsense"]) == 1
    capsys.readouterr()


def test_ablate_t_csv(tmp_path, source_images):
    p1, p2 = source_images
    out_dir = tmp_path / "ablate"
    assert run(["ablate-t", "--y1", p1, "--y2", p2, "--a1", "id", "--a2", "id",
                "--seed", "2", "--out-dir", out_dir]) == 0
    lines = (out_dir / "ablate_t.csv").read_text().strip().splitlines()
    assert lines[0] == "T,q_mi,q_abf,ssim,wall_ms"
    assert len(lines) == 6
    assert [row.split(",")[0] for row in lines[1:]] == ["1", "2", "3", "4", "5"]
