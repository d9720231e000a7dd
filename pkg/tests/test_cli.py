import hashlib
import json
from pathlib import Path

import pytest
import torch

from gsedit.cli import main

# CLI runs use tiny sizes; the oracle denoiser avoids any training.


def _run(*argv):
    return main([str(a) for a in argv])


def _tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert _run("gen-data", "--seed", 11, "--scenes", 3, "--views", 4,
                "--size", 32, "--out", out) == 0
    return out


@pytest.fixture(scope="module")
def job_file(data_dir):
    job = {
        "scene": "scene_000.json",
        "cameras": [f"s000_v{v:02d}_camera.json" for v in range(4)],
        "source_label": 1, "target_label": 2,
        "omega": 2.0, "lambda": 0.6, "num_references": 2, "seed": 5,
    }
    path = data_dir / "job.json"
    path.write_text(json.dumps(job))
    return path


def test_gen_data_writes_manifest_listing_every_file(data_dir):
    manifest = json.loads((data_dir / "manifest.json").read_text())
    assert len(manifest["scenes"]) == 3
    for entry in manifest["scenes"]:
        assert (data_dir / entry["scene"]).exists()
        for v in entry["views"]:
            for key in ("camera", "image", "depth", "alpha", "image_png", "depth_png"):
                assert (data_dir / v[key]).exists()


def test_gen_data_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert _run("gen-data", "--seed", 3, "--scenes", 2, "--views", 2,
                "--size", 32, "--out", a) == 0
    assert _run("gen-data", "--seed", 3, "--scenes", 2, "--views", 2,
                "--size", 32, "--out", b) == 0
    assert _tree_digest(a) == _tree_digest(b)


def test_render_command(tmp_path, data_dir):
    out = tmp_path / "views"
    assert _run("render", "--scene", data_dir / "scene_000.json",
                "--views", 2, "--size", 32, "--out", out) == 0
    assert (out / "view_00.png").exists()
    assert (out / "view_01_depth.gten").exists()


def test_render_missing_scene_gives_io_exit(tmp_path):
    assert _run("render", "--scene", tmp_path / "missing.json",
                "--out", tmp_path / "o") == 3


def test_edit_with_oracle_writes_artifacts_and_report(tmp_path, data_dir, job_file):
    out = tmp_path / "run"
    assert _run("edit", "--job", job_file, "--denoiser", "oracle",
                "--opt-steps", 3, "--out", out,
                "--classifier", data_dir / "classifier.json",
                "--target-label", 2) == 0
    assert (out / "edited_scene.json").exists()
    report = (out / "report.txt").read_text()
    assert "edit_magnitude" in report
    for v in range(4):
        assert (out / f"edited_{v:02d}.png").exists()


def test_edit_is_deterministic(tmp_path, job_file):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert _run("edit", "--job", job_file, "--denoiser", "oracle",
                    "--opt-steps", 2, "--out", out) == 0
    assert _tree_digest(a) == _tree_digest(b)


def test_edit_rejects_invalid_job(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"scene": "x.json"}))
    assert _run("edit", "--job", bad, "--denoiser", "oracle",
                "--out", tmp_path / "o") == 2


def test_edit_missing_scene_gives_io_exit_without_partial_scene(tmp_path):
    job = tmp_path / "job.json"
    job.write_text(json.dumps({"scene": "nope.json", "cameras": ["c.json"],
                               "source_label": 1, "target_label": 2}))
    out = tmp_path / "o"
    assert _run("edit", "--job", job, "--denoiser", "oracle", "--out", out) == 3
    assert not (out / "edited_scene.json").exists()


def test_eval_recomputes_report(tmp_path, job_file):
    out = tmp_path / "run"
    assert _run("edit", "--job", job_file, "--denoiser", "oracle",
                "--opt-steps", 2, "--out", out) == 0
    assert _run("eval", "--run", out, "--out", tmp_path / "report.txt") == 0
    recomputed = (tmp_path / "report.txt").read_text()
    original = (out / "report.txt").read_text()
    # identical metrics modulo the classifier column
    for line_a, line_b in zip(original.splitlines()[:3], recomputed.splitlines()[:3]):
        assert line_a == line_b


def test_eval_empty_directory_is_validation_error(tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert _run("eval", "--run", empty) == 2


def test_ablate_writes_four_arms_and_verdicts(tmp_path, data_dir, job_file):
    out = tmp_path / "abl"
    assert _run("ablate", "--job", job_file, "--denoiser", "oracle",
                "--opt-steps", 2, "--out", out,
                "--classifier", data_dir / "classifier.json") == 0
    for arm in ("identity", "noise", "inverted", "aligned"):
        assert (out / arm / "report.txt").exists()
    report = (out / "report.txt").read_text()
    assert "dispersion_align_on_lt_off" in report
    assert "magnitude_inverted_lt_noise" in report
    assert (out / "grid.png").exists()
    # all arms consumed identical inputs
    hashes = {ln.split(" = ")[1] for ln in report.splitlines()
              if ln.endswith(ln.split(" = ")[1]) and ".input_hash" in ln}
    assert len(hashes) == 1


def test_unknown_subcommand_is_validation_error(capsys):
    assert _run("frobnicate") == 2


def test_threads_flag_applies():
    before = torch.get_num_threads()
    try:
        assert _run("--threads", 1, "render", "--scene", "/nonexistent.json",
                    "--out", "/tmp/x") == 3
        assert torch.get_num_threads() == 1
    finally:
        torch.set_num_threads(before)
