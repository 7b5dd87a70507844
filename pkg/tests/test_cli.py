import json

import numpy as np
import pytest

from riunet.cli import CLASS_COLORS, main
from riunet.formats import read_labeled_cloud, read_ppm, read_range_image
from riunet.metrics import read_metrics_file

SMALL = ["--width", "64", "--height", "16"]
TOY = ["--depth-levels", "2", "--base-features", "8"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert run("synth", "--seed", 7, "--count", 8, *SMALL, "--out", out) == 0
    return out


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory, synth_dir):
    out = tmp_path_factory.mktemp("data") / "ds"
    assert run("build-dataset", "--input", synth_dir, "--val", 2, "--seed", 7, *SMALL, "--out", out) == 0
    return out


def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--help"])
    assert exc.value.code == 0
    text = " ".join(capsys.readouterr().out.split())
    for flag, default in [("--lr", "0.001"), ("--batch", "8"), ("--epochs", "10"), ("--bn-momentum", "0.99"),
                          ("--width", "512"), ("--height", "64"), ("--classes", "4"), ("--seed", "0"),
                          ("--out", "out"), ("--depth-levels", "4"), ("--base-features", "64")]:
        assert flag in text and f"(default: {default})" in text
    assert "--deterministic" in text and "--config" in text


def test_every_subcommand_has_help(capsys):
    for cmd in ("synth", "project", "build-dataset", "train", "eval", "infer", "render", "bench"):
        with pytest.raises(SystemExit) as exc:
            main([cmd, "--help"])
        assert exc.value.code == 0
    capsys.readouterr()


def test_unknown_flag_rejected(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--bogus", "1"])
    assert exc.value.code == 2
    assert "unrecognized arguments: --bogus" in capsys.readouterr().err


def test_config_file(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"count": 2, "width": 64, "height": 16, "seed": 3}))
    assert run("synth", "--config", cfg, "--seed", 9, "--out", tmp_path / "o") == 0
    out = capsys.readouterr().out
    assert "config.count = 2" in out and "config.seed = 9" in out and "config.width = 64" in out
    assert len(list((tmp_path / "o").glob("*.bin"))) == 2
    cfg.write_text(json.dumps({"nonsense": 1}))
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--config", str(cfg)])
    assert exc.value.code == 2


def test_prints_resolved_config(tmp_path, capsys):
    run("synth", "--count", 1, *SMALL, "--out", tmp_path)
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "command = synth"
    assert "config.lr = 0.001" in out and "config.bn_momentum = 0.99" in out


def test_synth_writes_labeled_clouds(synth_dir):
    clouds = sorted(synth_dir.glob("*.bin"))
    assert len(clouds) == 8
    cloud = read_labeled_cloud(clouds[0])
    assert cloud.labels is not None and len(cloud.labels) == len(cloud)


def test_render_colors(tmp_path):
    assert run("build-dataset", "--synth", 1, "--seed", 2, "--out", tmp_path / "ds") == 0
    sample_path = next((tmp_path / "ds" / "samples").glob("*.rimg"))
    assert run("render", "--input", sample_path, "--out", tmp_path / "png") == 0
    ppm = tmp_path / "png" / f"{sample_path.stem}.ppm"
    assert ppm.read_bytes().startswith(b"P6\n512 64\n255\n")
    rgb = read_ppm(ppm)
    sample = read_range_image(sample_path)
    valid = sample.mask > 0
    np.testing.assert_array_equal(rgb[valid], CLASS_COLORS[sample.labels[valid]])
    assert not rgb[~valid].any()
    assert len(np.unique(sample.labels[valid])) >= 3
    # deterministic artifact
    assert run("render", "--input", sample_path, "--out", tmp_path / "png2") == 0
    assert (tmp_path / "png2" / ppm.name).read_bytes() == ppm.read_bytes()


def test_project(tmp_path, synth_dir):
    src = sorted(synth_dir.glob("*.bin"))[0]
    assert run("project", "--input", src, *SMALL, "--out", tmp_path) == 0
    sample = read_range_image(tmp_path / f"{src.stem}.rimg")
    assert sample.shape == (16, 64) and sample.labels is not None and sample.mask.sum() > 0


def test_eval_predictions_equal_groundtruth(dataset_dir, tmp_path, capsys):
    code = run("eval", "--data", dataset_dir, "--predictions", dataset_dir / "samples", "--split", "train", "--out", tmp_path)
    assert code == 0
    out = capsys.readouterr().out
    table = out[out.index("pixel IoU (%)"):].splitlines()
    headers, cells = table[0].split()[3:], table[1].split()
    kv = read_metrics_file(tmp_path / "metrics.txt")
    for name, cell in zip(headers, cells):
        if name != "average" and kv[f"pixel.vacuous.{name}"] == 0:
            assert cell == "100.0"
    assert cells[-1] == "100.0"
    assert kv["pixel.pixel_accuracy"] == 100.0


def test_end_to_end_smoke(dataset_dir, tmp_path, capsys):
    train_out = tmp_path / "run"
    assert run("train", "--data", dataset_dir, *SMALL, *TOY, "--epochs", 2, "--batch", 4, "--seed", 7, "--out", train_out) == 0
    assert (train_out / "final.riuw").exists() and (train_out / "ckpt_epoch0002.riuw").exists()
    log = (train_out / "train.log").read_text().splitlines()
    assert sum(line.split()[1].startswith("train_loss=") for line in log) == 2
    assert run("eval", "--data", dataset_dir, "--checkpoint", train_out / "final.riuw", "--points", "--workers", 2, "--out", tmp_path / "ev") == 0
    kv = read_metrics_file(tmp_path / "ev" / "metrics.txt")
    for name in ("background", "car", "pedestrian", "cyclist"):
        assert 0.0 <= kv[f"pixel.iou.{name}"] <= 100.0
        assert 0.0 <= kv[f"points.iou.{name}"] <= 100.0
    assert "val IoU (%)" in capsys.readouterr().out

    cloud = sorted((dataset_dir / "clouds").glob("*.bin"))[0]
    assert run("infer", "--checkpoint", train_out / "final.riuw", "--data", dataset_dir, "--input", cloud, "--out", tmp_path / "inf") == 0
    labeled = read_labeled_cloud(tmp_path / "inf" / f"{cloud.stem}_labeled.bin")
    assert len(labeled) == len(read_labeled_cloud(cloud)) and labeled.labels.max() < 4
    grid = read_range_image(tmp_path / "inf" / f"{cloud.stem}.rimg")
    assert grid.labels.shape == (16, 64)

    assert run("bench", "--frames", 2, *SMALL, *TOY, "--out", tmp_path / "bench") == 0
    bench = read_metrics_file(tmp_path / "bench" / "bench.txt")
    assert bench["frames"] == 2 and bench["fps"] == pytest.approx(2 / bench["elapsed_s"])


def test_build_dataset_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert run("build-dataset", "--synth", 3, "--val", 1, "--seed", 4, *SMALL, "--deterministic", "--out", tmp_path / name) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


class TestFailures:
    def test_truncated_cloud(self, tmp_path, capsys):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"\0" * 20)
        assert run("project", "--input", bad, "--out", tmp_path / "out") == 1
        assert not (tmp_path / "out").exists()
        err = capsys.readouterr().err.strip().splitlines()
        assert len(err) == 1 and err[0].startswith("error:") and "multiple of 16" in err[0]

    def test_bad_dataset_input_leaves_nothing(self, tmp_path, synth_dir):
        src = tmp_path / "src"
        src.mkdir()
        for p in sorted(synth_dir.iterdir())[:4]:
            (src / p.name).write_bytes(p.read_bytes())
        (src / "zz_broken.bin").write_bytes(b"\1" * 33)
        assert run("build-dataset", "--input", src, *SMALL, "--out", tmp_path / "ds") == 1
        assert not (tmp_path / "ds").exists()

    @pytest.mark.parametrize("damage", ["magic", "truncate"])
    def test_corrupt_checkpoint(self, tmp_path, dataset_dir, damage):
        assert run("train", "--data", dataset_dir, *SMALL, *TOY, "--epochs", 0, "--out", tmp_path / "t") == 0
        ckpt = tmp_path / "t" / "ckpt_epoch0000.riuw"
        blob = ckpt.read_bytes()
        ckpt.write_bytes(b"NOPE" + blob[4:] if damage == "magic" else blob[: len(blob) // 2])
        out = tmp_path / "existing"
        out.mkdir()
        (out / "keep.txt").write_text("x")
        assert run("eval", "--data", dataset_dir, "--checkpoint", ckpt, "--out", out) == 1
        assert sorted(p.name for p in out.iterdir()) == ["keep.txt"]

    @pytest.mark.parametrize("damage", ["magic", "truncate"])
    def test_corrupt_range_image(self, tmp_path, dataset_dir, damage):
        src = next((dataset_dir / "samples").glob("*.rimg")).read_bytes()
        bad = tmp_path / "bad.rimg"
        bad.write_bytes(b"XIMG" + src[4:] if damage == "magic" else src[:-3])
        assert run("render", "--input", bad, "--out", tmp_path / "r") == 1
        assert not (tmp_path / "r").exists()

    def test_corrupt_manifest(self, tmp_path, dataset_dir):
        data = tmp_path / "data"
        data.mkdir()
        (data / "manifest.txt").write_text((dataset_dir / "manifest.txt").read_text().replace("# riunet", "# other"))
        assert run("train", "--data", data, *SMALL, *TOY, "--epochs", 1, "--out", tmp_path / "t") == 1
        assert not (tmp_path / "t").exists()

    def test_eval_without_source(self, tmp_path, dataset_dir, capsys):
        assert run("eval", "--data", dataset_dir, "--out", tmp_path / "e") == 1
        assert "--checkpoint or --predictions" in capsys.readouterr().err
