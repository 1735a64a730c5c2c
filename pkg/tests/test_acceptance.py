"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``.
"""

import csv
import itertools
import json
import math
import time

import numpy as np
import pytest

from conftest import analytic_param_count, write_manifest
from dpseq import cli
from dpseq.bilstm2d import BiLstm2dParams, bilstm2d_forward
from dpseq.evaluation import aggregate_by_patient, auprc, auroc, bootstrap_ci, kfold_split
from dpseq.gradcheck import run_all
from dpseq.manifest import TileManifest
from dpseq.model import DpseqModel, ModelConfig, SequencerBlockParams, sequencer_block, write_config
from dpseq.preprocess import estimate_stains, macenko_normalize, od_inverse, od_transform
from dpseq.synthetic import HE_STAINS, biomarker_tiles, stain_tile
from dpseq.tensor import Tensor
from dpseq.training import TileDataset, TrainConfig, cosine_lr, fit, train_biomarker


@pytest.fixture
def report(capsys):
    def _report(n, title, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        assert ok, detail
    return _report


def test_01_gradient_fidelity(report):
    t0 = time.perf_counter()
    rows = run_all(range(5), ["bilstm2d", "model"])
    elapsed = time.perf_counter() - t0
    worst = max(r.max_rel_err for r in rows)
    report(1, "gradient fidelity", worst < 1e-4 and elapsed < 300,
           ", ".join(f"{r.name} max rel err {r.max_rel_err:.2e}" for r in rows) + f", {elapsed:.0f} s")


def test_02_architecture_shapes(report, default_model, default_tile):
    x = default_model.normalize(default_tile[None])
    grid = default_model.config.grid_size
    feat = default_model.features(x).shape
    tissue = default_model.forward(x).shape
    binary = default_model.replace_head(2).forward(x).shape
    ok = grid == 32 and feat == (1, 384) and tissue == (1, 9) and binary == (1, 2)
    report(2, "architecture shapes", ok, f"grid {grid}x{grid}, pooled {feat[1]}, logits {tissue[1]} -> {binary[1]}")


def test_03_layer_degeneracy(report):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 4, 4, 8))
    identity = np.array_equal(sequencer_block(Tensor(x), SequencerBlockParams.zeros(8, 4, 3, np.float64)).numpy(), x)
    p = BiLstm2dParams.zeros(8, 4, np.float64)
    bias = rng.normal(size=8)
    p.fusion_b.data = bias.copy()
    out = bilstm2d_forward(Tensor(x[0]), p).numpy()
    bias_only = bool(np.all(out == bias))
    report(3, "layer degeneracy", identity and bias_only,
           f"zero block identity {identity}, zero BiLSTM2D gives fusion bias {bias_only}")


def test_04_equivariance(report):
    worst = {"columns": 0.0, "rows": 0.0, "transpose": 0.0}
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        c, d = 6, 3
        p = BiLstm2dParams.init(c, d, rng, np.float64)
        for _, t in p.named_parameters():
            if t.ndim == 1:
                t.data = rng.normal(scale=0.3, size=t.shape)
        img = rng.normal(size=(5, 4, c))
        out, ver, hor = bilstm2d_forward(Tensor(img), p, return_branches=True)
        cp, rp = rng.permutation(4), rng.permutation(5)
        ver_c = bilstm2d_forward(Tensor(img[:, cp]), p, return_branches=True)[1].numpy()
        hor_r = bilstm2d_forward(Tensor(img[rp]), p, return_branches=True)[2].numpy()
        W = p.fusion_W.data
        dual_p = BiLstm2dParams(p.hor, p.ver, Tensor(np.concatenate([W[:, 2 * d:], W[:, :2 * d]], 1)), p.fusion_b)
        dual = bilstm2d_forward(Tensor(img.transpose(1, 0, 2)), dual_p).numpy()
        worst["columns"] = max(worst["columns"], np.abs(ver_c - ver.numpy()[:, cp]).max())
        worst["rows"] = max(worst["rows"], np.abs(hor_r - hor.numpy()[rp]).max())
        worst["transpose"] = max(worst["transpose"], np.abs(dual - out.numpy().transpose(1, 0, 2)).max())
    report(4, "equivariance", max(worst.values()) < 1e-6, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


def _pairwise(s, y):
    pos, neg = s[y == 1], s[y == 0]
    diff = pos[:, None] - neg[None, :]
    return ((diff > 0).sum() + 0.5 * (diff == 0).sum()) / (len(pos) * len(neg))


def _sweep(s, y):
    ap, prev = 0.0, 0.0
    for t in sorted(set(s.tolist()), reverse=True):
        tp = int(((s >= t) & (y == 1)).sum())
        k = int((s >= t).sum())
        ap += (tp / y.sum() - prev) * tp / k
        prev = tp / y.sum()
    return ap


def test_05_metric_oracles(report):
    rng = np.random.default_rng(5)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(2, 201))
        y = rng.integers(0, 2, n)
        y[:2] = (0, 1)
        s = rng.integers(0, max(2, n // 3), n).astype(float)
        mismatches += auroc(s, y) != _pairwise(s, y)
    s8 = np.linspace(1, 0.1, 8)
    ap_err = max(abs(auprc(s8, np.array(b)) - _sweep(s8, np.array(b)))
                 for b in itertools.product((0, 1), repeat=8) if sum(b))
    example = auroc([0.9, 0.8, 0.7, 0.1], [1, 0, 1, 0])
    report(5, "metric oracles", mismatches == 0 and ap_err < 1e-12 and example == 0.75,
           f"AUROC mismatches {mismatches}/1000, AP max err {ap_err:.1e} over 255 patterns, example {example}")


def test_06_macenko(report):
    angles, maes = [], []
    for seed in range(5):
        tile, _ = stain_tile(np.random.default_rng(seed), 128)
        est = estimate_stains(tile)
        for k in range(2):
            u, v = est.stain_matrix[:, k], HE_STAINS[:, k]
            angles.append(math.acos(min(1.0, float(u @ v / np.linalg.norm(u) / np.linalg.norm(v)))))
        out = macenko_normalize(tile, est, est)
        maes.append(np.abs(out.astype(float) - tile).mean(axis=(0, 1)).max())
    v = np.arange(1, 256, dtype=np.uint8)
    round_trip = np.array_equal(od_inverse(od_transform(v)), v)
    report(6, "Macenko", max(angles) < 0.01 and max(maes) < 2 and round_trip,
           f"max angle {max(angles):.4f} rad, max channel MAE {max(maes):.3f}, OD round trip {round_trip}")


def _phase2(root, ds, lab, fold):
    manifest = TileManifest.read_csv(write_manifest(ds, root / "data", splits=fold.assignment()))
    cfg = TrainConfig(lr=1e-4, max_epochs=20, cosine_horizon=50, patience=8, seed=0)
    res = train_biomarker(DpseqModel(ModelConfig.small(), seed=0), manifest, cfg, root / "run")
    test = TileDataset.from_manifest(manifest.subset("test"), 28)
    ps = aggregate_by_patient(test.patient_ids, res.model.predict_proba(test.images)[:, 1], lab)
    return res, auroc([p.score for p in ps], [p.label for p in ps])


def _log_without_seconds(path):
    with open(path, newline="") as fh:
        return [{k: v for k, v in r.items() if k != "seconds"} for r in csv.DictReader(fh)]


def test_07_training_protocol(report, tmp_path):
    ds = biomarker_tiles(n_patients=100, tiles_per_patient=20, seed=0)
    lab = dict(zip(ds.patient_ids, ds.labels.tolist()))
    pids = sorted(lab)
    fold = kfold_split(pids, [lab[p] for p in pids], k=4, seed=0)[0]
    t0 = time.perf_counter()
    res, score = _phase2(tmp_path / "a", ds, lab, fold)
    elapsed = time.perf_counter() - t0
    res_b, _ = _phase2(tmp_path / "b", ds, lab, fold)
    same_log = _log_without_seconds(tmp_path / "a/run/train_log.csv") == \
        _log_without_seconds(tmp_path / "b/run/train_log.csv")
    same_ckpt = (tmp_path / "a/run/best.ckpt").read_bytes() == (tmp_path / "b/run/best.ckpt").read_bytes()
    ok = len(ds) >= 2000 and score >= 0.95 and len(res.log) <= 20 and elapsed < 1800 and same_log and same_ckpt
    report(7, "training protocol", ok,
           f"{len(ds)} tiles, {len(fold.test)} held-out patients, AUROC {score:.3f} after {len(res.log)} epochs "
           f"in {elapsed:.0f} s, rerun log identical {same_log}, checkpoint identical {same_ckpt}")


def test_08_schedule_and_stopping(report):
    lr0, T = 1e-4, 50
    sched = (cosine_lr(0, T, lr0) == lr0, cosine_lr(T, T, lr0) == 0.0,
             math.isclose(cosine_lr(T / 2, T, lr0), lr0 / 2, rel_tol=1e-12))
    ds = biomarker_tiles(n_patients=20, tiles_per_patient=4, seed=1)
    noisy = np.random.default_rng(0).integers(0, 2, len(ds))
    tr = TileDataset(ds.images[:40], noisy[:40], ds.patient_ids[:40])
    va = TileDataset(ds.images[40:], noisy[40:], ds.patient_ids[40:])
    cfg = dict(lr=3e-3, cosine_horizon=50, patience=8, batch_size=8, dropout=False, seed=0)
    res = fit(DpseqModel(ModelConfig.small(), seed=0), tr, va, TrainConfig(max_epochs=40, **cfg))
    best = int(np.argmin([r["val_loss"] for r in res.log])) + 1
    # replaying the same run up to the best epoch gives the best weights independently
    replay = fit(DpseqModel(ModelConfig.small(), seed=0), tr, va, TrainConfig(max_epochs=best, **cfg))
    halted = res.stopped_early and len(res.log) == best + 8 and res.best_epoch == best
    restored = res.model.checksum() == replay.model.checksum()
    report(8, "schedule and stopping", all(sched) and halted and restored,
           f"cosine endpoints {sched}, best epoch {best}, stopped after {len(res.log)}, "
           f"restored checksum matches replay {restored}")


def test_09_evaluation_harness(report):
    rng = np.random.default_rng(9)
    labels = rng.permutation([1] * 27 + [0] * 73).tolist()
    pids = [f"S{i:03d}" for i in range(100)]
    folds = kfold_split(pids, labels, k=4, seed=0)
    tests = [set(f.test) for f in folds]
    disjoint = all(not (a & b) for a, b in itertools.combinations(tests, 2))
    exhaustive = set().union(*tests) == set(pids)
    lab = dict(zip(pids, labels))
    dev = max(abs(sum(lab[p] for p in t) - 0.27 * len(t)) for t in tests)
    scores = np.clip(np.array(labels) * 0.2 + rng.random(100) * 0.8, 0, 1)
    a = bootstrap_ci(scores, labels, "auroc", n=1000, seed=3)
    b = bootstrap_ci(scores, labels, "auroc", n=1000, seed=3)
    same = (a.lo, a.hi) == (b.lo, b.hi)
    report(9, "evaluation harness", disjoint and exhaustive and dev <= 1 and same,
           f"disjoint {disjoint}, exhaustive {exhaustive}, max prevalence deviation {dev:.2f} patients, "
           f"bootstrap CI ({a.lo:.4f}, {a.hi:.4f}) reproducible {same}")


def test_10_bench_plumbing(report, tmp_path, default_model):
    ds = biomarker_tiles(n_patients=10, tiles_per_patient=10, seed=0)
    manifest = write_manifest(ds, tmp_path / "data")
    write_config(ModelConfig.small(), tmp_path / "small.json")
    code = cli.main(["bench", "--manifest", str(manifest), "--model-config", str(tmp_path / "small.json"),
                     "--out", str(tmp_path / "out")])
    rec = json.loads((tmp_path / "out" / "bench.json").read_text())
    s = ModelConfig.small()
    tally_small = analytic_param_count(s.depths, s.dims, s.hidden, s.mlp_ratio, s.patch_size, s.in_chans,
                                       s.downsample, s.head_dims, 2)
    c = default_model.config
    tally_default = analytic_param_count(c.depths, c.dims, c.hidden, c.mlp_ratio, c.patch_size, c.in_chans,
                                         c.downsample, c.head_dims, c.n_classes)
    ok = (code == 0 and rec["param_count"] == tally_small and default_model.param_count() == tally_default
          and rec["train_seconds_per_epoch"] > 0 and rec["predict_seconds"] > 0)
    report(10, "bench plumbing", ok,
           f"{rec['train_seconds_per_epoch']:.2f} s/epoch, predict {rec['predict_seconds']:.2f} s, "
           f"params {rec['param_count']} = tally {tally_small}; default model {default_model.param_count()} = "
           f"tally {tally_default}; size comparison with transformer baselines not verified (no baselines)")
