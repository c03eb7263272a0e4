"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The end-to-end criteria (4 to 7) share trained models through a
module-level cache, so the whole file trains four default-size models:
seed 0 with average pooling, seed 0 with max pooling, and seeds 1 and 2
with average pooling for the layer sweep.  On a single core that is
roughly ten minutes.
"""

import csv
import functools
import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from mctformer import autodiff as ad
from mctformer import kernels
from mctformer.cli import main as cli_main
from mctformer.config import ModelConfig, RunParams
from mctformer.data import generate_dataset
from mctformer.evaluation import collect_records, evaluate_seeds, k_sweep, maps_from_records, threshold_sweep
from mctformer.maps import build_affinity, localization_pipeline, refine
from mctformer.model import forward, init_params
from mctformer.training import total_loss, train
from oracles import confusion_oracle, conv3x3_oracle, refine_oracle, scores_oracle

DESK = ModelConfig()  # C=3, N=8, P=4, D=64, L=6, H=4, K=3, V2
TRAIN_SEED, TEST_SEED = 0, 1
SLACK = -0.01


@functools.lru_cache(maxsize=None)
def desk_data():
    return generate_dataset(TRAIN_SEED, 200, DESK), generate_dataset(TEST_SEED, 50, DESK)


@functools.lru_cache(maxsize=None)
def desk_model(head_mode="average_pool", seed=0):
    """Train once per (head, seed); returns (params, config, seconds, records)."""
    cfg = DESK.replace(head_mode=head_mode)
    train_set, test_set = desk_data()
    t0 = time.perf_counter()
    params, _ = train(train_set, cfg, RunParams(seed=seed))
    elapsed = time.perf_counter() - t0
    return params, cfg, elapsed, collect_records(params, cfg, test_set)


def stage_miou(head_mode, stage, seed=0):
    _, cfg, _, records = desk_model(head_mode, seed)
    test_set = desk_data()[1]
    maps = maps_from_records(records, cfg, test_set, stage=stage)
    return threshold_sweep(maps, [s.gt_mask for s in test_set], num_classes=cfg.num_classes)


# ---------------------------------------------------------------- 1


def test_criterion_1_gradient_suite(acceptance):
    t0 = time.perf_counter()
    worst = 0.0
    for variant in ("V1", "V2"):
        for head in ("average_pool", "max_pool", "fully_connected"):
            cfg = ModelConfig(num_classes=2, grid_side=2, embed_dim=8, num_layers=2, num_heads=2,
                              fuse_layers=1, patch_size=2, variant=variant, head_mode=head)
            params = init_params(cfg, 3)
            rng = np.random.default_rng(3)
            for p in params.values():
                p.data = p.data + rng.normal(0, 0.2, p.shape)
            images = rng.random((2, 3, 4, 4))
            labels = np.array([[1.0, 0.0], [1.0, 1.0]])
            report = ad.check_gradients(lambda: total_loss(forward(images, params, cfg), labels)[0], params,
                                        tol=1e-4, raise_on_failure=False)
            worst = max(worst, report.max_rel_error)
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 60
    acceptance(1, ok, f"max rel error {worst:.2e} (tol 1e-4), {elapsed:.1f}s (limit 60s)")
    assert ok


# ---------------------------------------------------------------- 2


def test_criterion_2_oracle_equivalence(acceptance):
    refine_err = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n, c = 2 + seed % 3, 1 + seed % 3
        logits = rng.normal(size=(2, 2, c + n * n, c + n * n)) * 2
        stack = np.exp(logits - logits.max(-1, keepdims=True))
        stack /= stack.sum(-1, keepdims=True)
        aff = build_affinity(stack, c)
        maps = rng.random((c, n, n))
        refine_err = max(refine_err, float(np.abs(refine(maps, aff) - refine_oracle(maps, aff)).max()))

    conv_err = 0.0
    previous = kernels.BACKEND
    backends = ["python"] + (["cython"] if kernels.compiled is not None else [])
    try:
        for name in backends:
            kernels.use_backend(name)
            for seed in range(10):
                rng = np.random.default_rng(seed)
                n, d, c = 2 + seed % 4, 1 + seed % 3, 1 + seed % 2
                x, k, b = rng.normal(size=(n, n, d)), rng.normal(size=(c, 3, 3, d)), rng.normal(size=c)
                got = ad.conv3x3(ad.Tensor(x), ad.Tensor(k), ad.Tensor(b)).data
                conv_err = max(conv_err, float(np.abs(got - conv3x3_oracle(x, k, b)).max()))
    finally:
        kernels.use_backend(previous)

    eval_err = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        preds = [rng.integers(0, 4, size=(8, 8)) for _ in range(5)]
        truths = [rng.integers(0, 4, size=(8, 8)) for _ in range(5)]
        ev = evaluate_seeds(preds, truths, 3)
        conf = confusion_oracle(preds, truths, 4)
        assert np.array_equal(ev.confusion, conf)
        eval_err = max(eval_err, float(np.max(np.abs(np.array([ev.miou, ev.fp, ev.fn]) - scores_oracle(conf)))))

    ok = refine_err <= 1e-12 and conv_err <= 1e-10 and eval_err <= 1e-12
    acceptance(2, ok, f"refine {refine_err:.1e} over 100 seeds, conv3x3 {conv_err:.1e} "
                      f"({'+'.join(backends)}), evaluate_seeds {eval_err:.1e}")
    assert ok


# ---------------------------------------------------------------- 3


def test_criterion_3_structural_invariants(acceptance):
    failures = []
    seeds = range(100)
    for seed in seeds:
        rng = np.random.default_rng(seed)
        c, n = 1 + seed % 3, 2 + seed % 3
        cfg = ModelConfig(num_classes=c, grid_side=n, patch_size=2, embed_dim=8, num_layers=2, num_heads=2,
                          fuse_layers=1 + seed % 2, variant=("V1", "V2")[seed % 2])
        params = init_params(cfg, seed)
        for p in params.values():
            p.data = p.data + rng.normal(0, 0.5, p.shape)
        images = rng.random((2, 3, cfg.image_side, cfg.image_side))
        rec = forward(images, params, cfg)
        att = rec.attention
        if att.shape != (2, 2, 2, cfg.num_tokens, cfg.num_tokens):
            failures.append((seed, "attention shape"))
        if att.min() < 0 or np.abs(att.sum(-1) - 1).max() > 1e-9:
            failures.append((seed, "attention rows"))
        aff = build_affinity(rec.attention_stack(0), c)
        # patch rows plus the mass each patch sends to class tokens add up to one
        to_class = att[0].mean(axis=(0, 1))[c:, :c].sum(-1).reshape(n, n)
        if aff.min() < 0 or np.abs(aff.sum(axis=(2, 3)) + to_class - 1).max() > 1e-6:
            failures.append((seed, "affinity rows"))
        labels = rng.integers(0, 2, size=c)
        for stage in ("attn", "attn+affinity", "full"):
            out = localization_pipeline(rec, cfg, 1, stage=stage, labels=labels).maps
            if out.shape != (c, n, n) or not np.all(np.isfinite(out)) or out.min() < 0 or out.max() > 1:
                failures.append((seed, f"{stage} range"))
            if np.any(out[labels == 0] != 0):
                failures.append((seed, f"{stage} absent class"))
        sample = generate_dataset(seed, 1, ModelConfig(num_classes=c, grid_side=4 + seed % 5))[0]
        present = np.unique(sample.gt_mask[sample.gt_mask > 0]) - 1
        if not np.array_equal(np.flatnonzero(sample.labels), present) or not 1 <= len(present) <= 3:
            failures.append((seed, "labels/gt_mask"))
    ok = not failures
    acceptance(3, ok, f"{len(seeds)} seeds, {len(failures)} violations {failures[:3] if failures else ''}".rstrip())
    assert ok


# ---------------------------------------------------------------- 4 to 7


@pytest.mark.slow
def test_criterion_4_end_to_end(acceptance):
    _, _, train_seconds, _ = desk_model()
    ev = stage_miou("average_pool", "full")
    before_refine = stage_miou("average_pool", "attn+cam").miou
    ok = ev.miou >= 0.60 and train_seconds < 15 * 60
    acceptance(4, ok, f"full-pipeline mIoU {ev.miou:.3f} (need >= 0.60) at threshold {ev.best_threshold}, "
                      f"{before_refine:.3f} before affinity refinement, training {train_seconds:.0f}s (limit 900s)")
    assert ok


@pytest.mark.slow
def test_criterion_5_stage_ordering(acceptance):
    m = {s: stage_miou("average_pool", s).miou for s in ("attn", "attn+affinity", "attn+cam", "full")}
    checks = [
        m["full"] - m["attn+cam"] >= SLACK,
        m["attn+cam"] - m["attn"] >= SLACK,
        m["attn+affinity"] - m["attn"] >= SLACK,
    ]
    ok = all(checks)
    acceptance(5, ok, "  ".join(f"{k}={v:.3f}" for k, v in m.items()))
    assert ok


@pytest.mark.slow
def test_criterion_6_average_beats_max_pool(acceptance):
    avg = stage_miou("average_pool", "attn").miou
    mx = stage_miou("max_pool", "attn").miou
    ok = avg > mx
    acceptance(6, ok, f"attention mIoU average_pool {avg:.3f} vs max_pool {mx:.3f}")
    assert ok


@pytest.mark.slow
def test_criterion_7_fp_grows_with_k(acceptance):
    test_set = desk_data()[1]
    ks, fps, per_seed = [], [], []
    for seed in (0, 1, 2):
        params, cfg, _, _ = desk_model("average_pool", seed)
        rows = k_sweep(params, cfg, test_set)
        ks += [r[0] for r in rows]
        fps += [r[1] for r in rows]
        per_seed.append(" ".join(f"{r[1]:.2f}" for r in rows))
    rho = spearmanr(ks, fps).statistic
    ok = rho > 0
    acceptance(7, ok, f"Spearman(K, FP) = {rho:.3f} over 3 seeds x K=1..6; FP by K: " + " | ".join(per_seed))
    assert ok


# ---------------------------------------------------------------- 8


GRID = ["--num_classes", "2", "--grid_side", "4", "--patch_size", "2"]
TINY = GRID + ["--embed_dim", "8", "--num_layers", "2", "--num_heads", "2", "--fuse_layers", "2"]


def _pipeline(root, replay=None):
    def run(*argv):
        assert cli_main([str(a) for a in argv]) == 0

    if replay is None:
        run("generate", "--seed", 3, "--count", 16, "--out-dir", root, "--quiet", *GRID)
        run("train", "--data", root / "dataset.npz", "--out-dir", root, "--epochs", 3, "--batch_size", 4,
            "--quiet", *TINY)
        run("infer", "--checkpoint", root / "checkpoint.npz", "--data", root / "dataset.npz", "--out-dir", root,
            "--quiet")
        run("eval", "--maps-dir", root, "--data", root / "dataset.npz", "--out-dir", root, "--quiet")
    else:
        run("generate", "--config", replay / "manifest-generate.json", "--out-dir", root)
        run("train", "--config", replay / "manifest-train.json", "--data", root / "dataset.npz", "--out-dir", root)
        run("infer", "--config", replay / "manifest-infer.json", "--checkpoint", root / "checkpoint.npz",
            "--data", root / "dataset.npz", "--out-dir", root)
        run("eval", "--config", replay / "manifest-eval.json", "--maps-dir", root, "--data", root / "dataset.npz",
            "--out-dir", root)


def test_criterion_8_byte_identical_reruns(acceptance, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    _pipeline(a)
    _pipeline(b, replay=a)
    names = sorted(p.relative_to(a) for p in a.rglob("*.csv"))
    differing = [str(n) for n in names if (a / n).read_bytes() != (b / n).read_bytes()]
    missing = [str(n) for n in names if not (b / n).exists()]
    with open(a / "eval.csv") as fh:
        assert any(row[1] == "miou" for row in csv.reader(fh))
    ok = bool(names) and not differing and not missing
    acceptance(8, ok, f"{len(names)} CSV files compared, {len(differing) + len(missing)} differ")
    assert ok
