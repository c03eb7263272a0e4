import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from mctformer.cli import main, read_exported_maps
from mctformer.config import ModelConfig
from mctformer.data import load_dataset
from mctformer.evaluation import infer_maps, k_sweep, threshold_sweep
from mctformer.maps import localization_pipeline
from mctformer.model import forward, load_checkpoint

TINY = ["--num_classes", "2", "--grid_side", "4", "--patch_size", "2"]
TINY_MODEL = TINY + ["--embed_dim", "8", "--num_layers", "2", "--num_heads", "2", "--fuse_layers", "2"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("generate", "--seed", 7, "--count", 12, "--out-dir", d, "--quiet", *TINY) == 0
    assert run("train", "--data", d / "dataset.npz", "--out-dir", d, "--epochs", 2, "--batch_size", 4, "--quiet", *TINY_MODEL) == 0
    return d


def test_generate_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        (tmp_path / name).mkdir()
        assert run("generate", "--seed", 7, "--count", 20, "--out-dir", tmp_path / name, "--quiet") == 0
    assert (tmp_path / "a" / "dataset.npz").read_bytes() == (tmp_path / "b" / "dataset.npz").read_bytes()
    manifest = json.loads((tmp_path / "a" / "manifest-generate.json").read_text())
    assert manifest["seed"] == 7 and manifest["command"] == "generate" and manifest["config"]["num_classes"] == 3


def test_generate_errors(tmp_path, capsys):
    assert run("generate", "--count", 3, "--out-dir", tmp_path / "missing") == 1
    assert "does not exist" in capsys.readouterr().err
    assert run("generate", "--count", 0, "--out-dir", tmp_path) == 2
    assert run("generate", "--count", "x", "--out-dir", tmp_path) == 2
    assert run("generate", "--out-dir", tmp_path) == 2
    assert not (tmp_path / "dataset.npz").exists()


def test_config_file_and_precedence(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"count": 4, "seed": 3, "grid-side": 4, "patch_size": 2}))
    assert run("generate", "--config", cfg, "--seed", 5, "--out-dir", tmp_path, "--quiet") == 0
    samples, meta = load_dataset(tmp_path / "dataset.npz")
    assert len(samples) == 4 and meta["seed"] == 5 and meta["grid_side"] == 4
    assert run("generate", "--config", tmp_path / "nope.json", "--out-dir", tmp_path) == 1


def test_manifest_replays_run(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    assert run("generate", "--seed", 2, "--count", 5, "--out-dir", tmp_path / "a", "--quiet", *TINY) == 0
    manifest = tmp_path / "a" / "manifest-generate.json"
    assert run("generate", "--config", manifest, "--out-dir", tmp_path / "b") == 0
    assert (tmp_path / "a" / "dataset.npz").read_bytes() == (tmp_path / "b" / "dataset.npz").read_bytes()


def test_train_outputs(workdir):
    params, cfg, extra = load_checkpoint(workdir / "checkpoint.npz")
    assert cfg.embed_dim == 8 and cfg.variant == "V2" and extra["steps"] == 6
    with open(workdir / "loss.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "loss_cls", "loss_patch", "total"] and len(rows) == 7


def test_train_v1_and_lr_zero(workdir, tmp_path):
    assert run("train", "--data", workdir / "dataset.npz", "--out-dir", tmp_path, "--variant", "V1", "--lr", 0,
               "--epochs", 3, "--batch_size", 12, "--quiet", *TINY_MODEL) == 0
    _, cfg, _ = load_checkpoint(tmp_path / "checkpoint.npz")
    assert cfg.variant == "V1"
    with open(tmp_path / "loss.csv") as fh:
        rows = list(csv.reader(fh))[1:]
    assert len({r[3] for r in rows}) == 1 and all(r[2] == "" for r in rows)


def test_train_rerun_reproduces_trace(workdir, tmp_path):
    assert run("train", "--config", workdir / "manifest-train.json", "--out-dir", tmp_path) == 0
    assert (tmp_path / "loss.csv").read_bytes() == (workdir / "loss.csv").read_bytes()
    assert (tmp_path / "checkpoint.npz").read_bytes() == (workdir / "checkpoint.npz").read_bytes()


def test_train_errors(workdir, tmp_path, capsys):
    assert run("train", "--data", tmp_path / "none.npz", "--out-dir", tmp_path) == 1
    assert run("train", "--data", workdir / "dataset.npz", "--out-dir", tmp_path) == 1  # grid mismatch
    assert "num_classes=2" in capsys.readouterr().err
    assert run("train", "--data", workdir / "dataset.npz", "--out-dir", tmp_path, "--embed_dim", 10, *TINY) == 1
    assert run("train", "--data", workdir / "dataset.npz", "--out-dir", tmp_path, "--variant", "V9") == 2
    assert run("train", "--data", workdir / "dataset.npz", "--out-dir", tmp_path, "--lr", 1e300,
               "--weight_decay", 0, "--epochs", 3, "--quiet", *TINY_MODEL) == 3
    assert "step" in capsys.readouterr().err


def test_infer_and_eval(workdir, tmp_path):
    from PIL import Image

    assert run("infer", "--checkpoint", workdir / "checkpoint.npz", "--data", workdir / "dataset.npz",
               "--out-dir", tmp_path, "--stage", "full", "--quiet") == 0
    params, cfg, _ = load_checkpoint(workdir / "checkpoint.npz")
    samples, _ = load_dataset(workdir / "dataset.npz")
    expected = infer_maps(params, cfg, samples, stage="full")
    exported = read_exported_maps(tmp_path)
    assert len(exported) == 12
    for e, m in zip(exported, expected):
        assert np.array_equal(e, m.maps)
    png = np.array(Image.open(tmp_path / "maps" / "sample00003_class1.png"))
    assert np.array_equal(png, np.rint(255 * expected[3].maps[1]).astype(np.uint8))

    assert run("eval", "--maps-dir", tmp_path, "--data", workdir / "dataset.npz", "--out-dir", tmp_path, "--quiet") == 0
    ev = threshold_sweep(expected, [s.gt_mask for s in samples])
    with open(tmp_path / "eval.csv") as fh:
        rows = list(csv.reader(fh))
    assert [r[1] for r in rows[1:4]] == ["background", "class0", "class1"]
    summary = {r[1]: r[2] for r in rows[4:]}
    assert float(summary["miou"]) == ev.miou and float(summary["best_threshold"]) == ev.best_threshold
    assert "mIoU" in (tmp_path / "summary.txt").read_text()


def test_infer_stage_composition(workdir, tmp_path):
    """``full`` equals a scripted composition; ``attn`` on V2 equals V1-style maps."""
    params, cfg, _ = load_checkpoint(workdir / "checkpoint.npz")
    samples, _ = load_dataset(workdir / "dataset.npz")
    for stage in ("attn", "full"):
        out = tmp_path / stage.replace("+", "_")
        out.mkdir()
        assert run("infer", "--checkpoint", workdir / "checkpoint.npz", "--data", workdir / "dataset.npz",
                   "--out-dir", out, "--stage", stage, "--quiet") == 0
    rec = forward(np.stack([s.image for s in samples]), params, cfg)
    v1 = cfg.replace(variant="V1")
    attn = read_exported_maps(tmp_path / "attn")
    for i, s in enumerate(samples):
        assert np.array_equal(attn[i], localization_pipeline(rec, v1, i, stage="attn", labels=s.labels).maps)
    full = read_exported_maps(tmp_path / "full")
    for i, s in enumerate(samples):
        assert np.array_equal(full[i], localization_pipeline(rec, cfg, i, stage="full", labels=s.labels).maps)


def test_eval_perfect_maps(workdir, tmp_path):
    samples, _ = load_dataset(workdir / "dataset.npz")
    maps_dir = tmp_path / "maps"
    maps_dir.mkdir()
    from mctformer.maps import export_maps

    for i, s in enumerate(samples):
        export_maps(np.stack([(s.gt_mask == c + 1).astype(float) for c in range(2)]), maps_dir, f"sample{i:05d}")
    assert run("eval", "--maps-dir", tmp_path, "--data", workdir / "dataset.npz", "--out-dir", tmp_path, "--quiet") == 0
    rows = {r[1]: r[2] for r in csv.reader(open(tmp_path / "eval.csv"))}
    assert float(rows["miou"]) == 1.0


def test_eval_count_mismatch(workdir, tmp_path, capsys):
    maps_dir = tmp_path / "maps"
    maps_dir.mkdir()
    from mctformer.maps import export_maps

    export_maps(np.zeros((2, 4, 4)), maps_dir, "sample00000")
    assert run("eval", "--maps-dir", tmp_path, "--data", workdir / "dataset.npz", "--out-dir", tmp_path) == 1
    assert "1 exported maps but 12" in capsys.readouterr().err


def test_infer_errors(workdir, tmp_path):
    assert run("infer", "--checkpoint", tmp_path / "x.npz", "--data", workdir / "dataset.npz", "--out-dir", tmp_path) == 1
    (tmp_path / "d").mkdir()
    assert run("generate", "--seed", 1, "--count", 2, "--out-dir", tmp_path / "d", "--quiet") == 0
    assert run("infer", "--checkpoint", workdir / "checkpoint.npz", "--data", tmp_path / "d" / "dataset.npz",
               "--out-dir", tmp_path) == 1
    assert run("infer", "--checkpoint", workdir / "checkpoint.npz", "--data", workdir / "dataset.npz",
               "--out-dir", tmp_path, "--stage", "nope") == 2


def test_ablate_tables(workdir, tmp_path):
    (tmp_path / "t").mkdir()
    assert run("generate", "--seed", 8, "--count", 6, "--out-dir", tmp_path / "t", "--quiet", *TINY) == 0
    args = ["ablate", "--data", workdir / "dataset.npz", "--test-data", tmp_path / "t" / "dataset.npz",
            "--epochs", 1, "--batch_size", 6, "--quiet", *TINY_MODEL]
    for name in ("a", "b"):
        (tmp_path / name).mkdir()
        assert run(*args, "--out-dir", tmp_path / name) == 0
    with open(tmp_path / "a" / "ablation_head.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["head_mode", "miou", "fp", "fn", "best_threshold"]
    assert [r[0] for r in rows[1:]] == ["average_pool", "max_pool", "fully_connected"]
    for table in ("ablation_head.csv", "ablation_k.csv", "ablation_stage.csv"):
        assert (tmp_path / "a" / table).read_bytes() == (tmp_path / "b" / table).read_bytes()
    # K rows equal k_sweep of the same (retrained) model
    from mctformer.config import RunParams
    from mctformer.training import train

    samples, _ = load_dataset(workdir / "dataset.npz")
    test, _ = load_dataset(tmp_path / "t" / "dataset.npz")
    cfg = ModelConfig(num_classes=2, grid_side=4, patch_size=2, embed_dim=8, num_layers=2, num_heads=2, fuse_layers=2)
    params, _ = train(samples, cfg, RunParams(epochs=1, batch_size=6))
    with open(tmp_path / "a" / "ablation_k.csv") as fh:
        krows = list(csv.reader(fh))[1:]
    for row, ref in zip(krows, k_sweep(params, cfg, test)):
        assert int(row[0]) == ref[0] and [float(x) for x in row[1:]] == list(ref[1:])


def test_module_entry_point_and_version():
    out = subprocess.run([sys.executable, "-m", "mctformer", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and "mctformer" in out.stdout
    out = subprocess.run([sys.executable, "-m", "mctformer"], capture_output=True, text=True)
    assert out.returncode == 2
