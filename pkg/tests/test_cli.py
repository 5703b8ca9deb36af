import csv
import io
import json

import numpy as np
import pytest

from ctsynth.cli import main
from ctsynth.volume import CtVolume, SegMask, VolumeMeta, read_mvol, write_mvol

TOY = {"seed": 3, "n_volumes": 2, "volume_dims": [16, 16, 16], "T": 10,
       "steps_vae": 4, "steps_dm": 60, "steps_cn": 4}


def write_config(path, **overrides):
    cfg = dict(TOY, checkpoint_dir=str(path.parent / "ck"), **overrides)
    path.write_text(json.dumps(cfg))
    return path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """A vae -> dm -> cn toy pipeline trained through the CLI."""
    root = tmp_path_factory.mktemp("pipeline")
    cfg = write_config(root / "run.json")
    for stage in ("vae", "dm", "cn"):
        assert main(["train-toy", "--stage", stage, "--config", str(cfg)]) == 0
    return root, cfg


def test_synth_writes_pairs(tmp_path, capsys):
    code, out, _ = run(capsys, "synth", "--out", tmp_path, "--count", 2, "--dims", "8,8,8")
    assert code == 0 and json.loads(out)["count"] == 2
    ct = read_mvol(tmp_path / "phantom_001.mvol")
    mask = read_mvol(tmp_path / "phantom_001.mask.mvol")
    assert isinstance(ct, CtVolume) and isinstance(mask, SegMask) and ct.meta.dims == (8, 8, 8)


def test_stage_order_is_enforced(tmp_path, capsys):
    cfg = write_config(tmp_path / "run.json")
    code, _, err = run(capsys, "train-toy", "--stage", "cn", "--config", cfg)
    assert code == 2 and "stage order" in err
    code, _, err = run(capsys, "train-toy", "--stage", "dm", "--config", cfg)
    assert code == 2 and "stage order" in err


def test_vae_run_is_reproducible(tmp_path, capsys):
    csvs = []
    for name in ("a", "b"):
        (tmp_path / name).mkdir()
        cfg = write_config(tmp_path / name / "run.json")
        assert run(capsys, "train-toy", "--stage", "vae", "--config", cfg)[0] == 0
        csvs.append((tmp_path / name / "ck" / "vae_losses.csv").read_bytes())
        assert (tmp_path / name / "ck" / "vae_losses.png").exists()
    assert csvs[0] == csvs[1]
    rows = list(csv.DictReader(io.StringIO(csvs[0].decode())))
    assert [int(r["step"]) for r in rows] == [1, 2, 3, 4]


def test_interrupted_run_resumes_on_the_same_trajectory(tmp_path, capsys):
    full, part = tmp_path / "full", tmp_path / "part"
    for d in (full, part):
        d.mkdir()
    assert run(capsys, "train-toy", "--stage", "vae", "--config", write_config(full / "run.json"))[0] == 0
    cfg = write_config(part / "run.json")
    assert run(capsys, "train-toy", "--stage", "vae", "--config", cfg, "--stop-at", 2)[0] == 0
    assert len((part / "ck" / "vae_losses.csv").read_text().splitlines()) == 3
    assert run(capsys, "train-toy", "--stage", "vae", "--config", cfg, "--resume")[0] == 0
    assert (part / "ck" / "vae.ckpt").read_bytes() == (full / "ck" / "vae.ckpt").read_bytes()
    assert (part / "ck" / "vae_losses.csv").read_bytes() == (full / "ck" / "vae_losses.csv").read_bytes()


def test_dm_final_loss_below_initial(trained):
    root, _ = trained
    rows = list(csv.DictReader((root / "ck" / "dm_losses.csv").open()))
    losses = [float(r["loss"]) for r in rows]
    assert len(losses) == 60
    assert np.mean(losses[-10:]) < losses[0]


def test_generate_is_deterministic_and_in_range(trained, tmp_path, capsys):
    _, cfg = trained
    outs = []
    for name in ("a", "b"):
        out = tmp_path / f"{name}.mvol"
        code, text, _ = run(capsys, "generate", "--config", cfg, "--dims", "32,32,32", "--top", "chest",
                            "--bottom", "abdomen", "--seed", 11, "--output", out)
        assert code == 0
        manifest = json.loads(text)
        assert manifest["c_p"]["top"] == "chest" and manifest["checkpoints"]["control"] is None
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    ct = read_mvol(tmp_path / "a.mvol")
    assert ct.meta.dims == (32, 32, 32)
    assert ct.grid.min() >= -1000.0 and ct.grid.max() <= 1000.0


def test_generate_with_mask_uses_control_branch(trained, tmp_path, capsys):
    _, cfg = trained
    assert run(capsys, "synth", "--out", tmp_path, "--count", 1, "--dims", "32,32,32")[0] == 0
    code, text, _ = run(capsys, "generate", "--config", cfg, "--dims", "32,32,32", "--top", "chest",
                        "--bottom", "abdomen", "--seed", 11, "--mask", tmp_path / "phantom_000.mask.mvol",
                        "--output", tmp_path / "g.mvol")
    assert code == 0 and len(json.loads(text)["checkpoints"]["control"]) == 64
    code, _, err = run(capsys, "generate", "--config", cfg, "--dims", "16,16,16", "--top", "chest",
                       "--bottom", "abdomen", "--seed", 1, "--mask", tmp_path / "phantom_000.mask.mvol",
                       "--output", tmp_path / "h.mvol")
    assert code == 2 and "mask" in err


def test_generate_rejects_bad_requests(trained, tmp_path, capsys):
    _, cfg = trained
    code, _, err = run(capsys, "generate", "--config", cfg, "--dims", "32,32,32", "--top", "abdomen",
                       "--bottom", "chest", "--seed", 1, "--output", tmp_path / "x.mvol")
    assert code == 2 and "region order" in err
    code, _, err = run(capsys, "generate", "--config", cfg, "--dims", "24,32,32", "--top", "chest",
                       "--bottom", "chest", "--seed", 1, "--output", tmp_path / "x.mvol")
    assert code == 2 and "divisible" in err


def test_roundtrip_reports_tsp_equivalence(trained, tmp_path, capsys):
    root, _ = trained
    run(capsys, "synth", "--out", tmp_path, "--count", 1, "--dims", "16,16,16")
    src = tmp_path / "phantom_000.mvol"
    code, out, _ = run(capsys, "roundtrip", "--input", src, "--checkpoint", root / "ck" / "vae.ckpt", "--tsp", 1)
    rep = json.loads(out)
    assert code == 0 and rep["tsp_max_abs_diff"] == 0.0
    assert np.isfinite(rep["psnr"]) and -1 <= rep["ssim"] <= 1 and rep["l1"] >= 0
    assert isinstance(read_mvol(rep["output"]), CtVolume)
    code, out, _ = run(capsys, "roundtrip", "--input", src, "--checkpoint", root / "ck" / "vae.ckpt", "--tsp", 4)
    assert code == 0 and json.loads(out)["tsp_max_abs_diff"] <= 1e-5

    odd = tmp_path / "odd.mvol"
    write_mvol(odd, CtVolume(np.zeros((1, 1, 10, 16, 16), np.float32), VolumeMeta((10, 16, 16))))
    code, _, err = run(capsys, "roundtrip", "--input", odd, "--checkpoint", root / "ck" / "vae.ckpt")
    assert code == 2 and "round to [12, 16, 16]" in err


def test_benchmark_rows(tmp_path, capsys):
    out = tmp_path / "bench.csv"
    code, text, _ = run(capsys, "benchmark-tsp", "--chain", "conv3", "--segments", "1,4",
                        "--mode", "monolithic,sequential,parallel", "--out", out)
    assert code == 0 and out.read_text() == text
    rows = list(csv.DictReader(io.StringIO(text)))
    by = {(int(r["n_segments"]), r["mode"]): r for r in rows}
    assert float(by[1, "sequential"]["max_abs_diff_vs_monolithic"]) == 0.0
    mono = float(by[1, "monolithic"]["analytic_peak_bytes"])
    assert float(by[4, "sequential"]["analytic_peak_bytes"]) < mono
    assert by[4, "sequential"]["max_abs_diff_vs_monolithic"] == by[4, "parallel"]["max_abs_diff_vs_monolithic"]
    assert out.with_suffix(".png").exists()


def quality_files(tmp_path, organ_hu):
    dims = (4, 4, 4)
    grid = np.full(dims, 20.0, np.float32)
    labels = np.zeros(dims, np.uint16)
    grid[:2], labels[:2] = organ_hu, 1
    meta = VolumeMeta(dims)
    write_mvol(tmp_path / "ct.mvol", CtVolume(grid[None, None], meta))
    write_mvol(tmp_path / "mask.mvol", SegMask(labels, meta))
    return tmp_path / "ct.mvol", tmp_path / "mask.mvol"


@pytest.mark.parametrize("organ_hu, ranges, expect", [
    (60.0, {"1": [20, 120]}, 0),
    (300.0, {"1": [20, 120]}, 1),
    (60.0, {"7": [20, 120]}, 2),
])
def test_check_quality_exit_codes(tmp_path, capsys, organ_hu, ranges, expect):
    ct, mask = quality_files(tmp_path, organ_hu)
    (tmp_path / "r.json").write_text(json.dumps(ranges))
    code, out, _ = run(capsys, "check-quality", "--ct", ct, "--mask", mask, "--ranges", tmp_path / "r.json")
    assert code == expect
    report = json.loads(out)
    if expect == 1:
        assert report["violations"] == [{"label": 1, "median": 300.0, "lo": 20.0, "hi": 120.0}]
    if expect == 2:
        assert "nothing checked" in report["error"]


def test_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"seed": 0, "lr": 1}))
    code, _, err = run(capsys, "train-toy", "--stage", "vae", "--config", bad)
    assert code == 2 and "unknown config keys" in err
    bad.write_text(json.dumps({"seed": 0, "data_dir": str(tmp_path / "missing")}))
    code, _, err = run(capsys, "train-toy", "--stage", "vae", "--config", bad)
    assert code == 2 and "does not exist" in err
