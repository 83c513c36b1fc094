"""Acceptance criteria, one test each, at their stated tolerances.

Run with ``pytest tests/test_acceptance.py -v``; the terminal summary prints a
PASS/FAIL line per criterion. Criterion 6 trains 20 networks and takes most of
the wall time.
"""
import json
import time
import warnings

import numpy as np
import pytest

from rafcn.checks import run_suite
from rafcn.cli import main
from rafcn.config import RunConfig
from rafcn.data import generate
from rafcn.metrics import ConfusionMatrix, f1_counting, f1_per_class, mean_f1, miou, overall_accuracy
from rafcn.network import NetworkConfig, forward, init, load_checkpoint, save_checkpoint
from rafcn.relation import (
    ChannelRelationParams, SpatialRelationParams, apply_integration, channel_relation_logits,
    channel_relation_map, spatial_relation_feature,
)
from rafcn.tensor import Tensor
from rafcn.train import Trainer, ablate, train_and_score


def _params(cls, rng, c, c_e):
    return cls(*(Tensor(rng.standard_normal(s)) for s in ((c_e, c), (c_e,), (c_e, c), (c_e,))))


# -- 1 ----------------------------------------------------------------------------------

def _pairwise_spatial(x, wu, bu, wv, bv):
    c, h, w = x.shape
    out = np.empty((h * w, h, w))
    for yi in range(h):
        for xi in range(w):
            u = wu @ x[:, yi, xi] + bu
            for yj in range(h):
                for xj in range(w):
                    v = wv @ x[:, yj, xj] + bv
                    out[yj * w + xj, yi, xi] = max(0.0, float(np.dot(u, v)))
    return out


@pytest.mark.criterion(1, "spatial relation matches the per-pair oracle (100 cases, 1e-9, < 10 s)")
def test_spatial_oracle(record_property):
    rng = np.random.default_rng(1)
    t0, worst = time.perf_counter(), 0.0
    for _ in range(100):
        c, h, w, c_e = rng.integers(1, 7), rng.integers(1, 5), rng.integers(1, 5), rng.integers(1, 7)
        x = rng.standard_normal((c, h, w))
        p = _params(SpatialRelationParams, rng, c, c_e)
        got = spatial_relation_feature(Tensor(x), p).data
        want = _pairwise_spatial(x, *(t.data for t in (p.w_us, p.b_us, p.w_vs, p.b_vs)))
        assert got.shape == want.shape
        worst = max(worst, float(np.abs(got - want).max()))
    seconds = time.perf_counter() - t0
    record_property("detail", f"max err {worst:.1e}, {seconds:.2f} s")
    assert worst <= 1e-9 and seconds < 10


# -- 2 ----------------------------------------------------------------------------------

@pytest.mark.criterion(2, "channel relation matches the per-pair oracle; rows sum to 1 (< 5 s)")
def test_channel_oracle(record_property):
    rng = np.random.default_rng(2)
    t0, worst, worst_row = time.perf_counter(), 0.0, 0.0
    for _ in range(100):
        c, h, w, c_e = rng.integers(1, 7), rng.integers(1, 5), rng.integers(1, 5), rng.integers(1, 7)
        x = rng.standard_normal((c, h, w))
        p = _params(ChannelRelationParams, rng, c, c_e)
        wu, bu, wv, bv = (t.data for t in (p.w_uc, p.b_uc, p.w_vc, p.b_vc))
        gap = [float(np.mean(x[k])) for k in range(c)]
        want = np.array([[sum((wu[e, a] * gap[a] + bu[e]) * (wv[e, b] * gap[b] + bv[e]) for e in range(c_e))
                          for b in range(c)] for a in range(c)])
        worst = max(worst, float(np.abs(channel_relation_logits(Tensor(x), p).data - want).max()))
        rows = channel_relation_map(Tensor(x), p).data.sum(axis=1)
        worst_row = max(worst_row, float(np.abs(rows - 1).max()))
    seconds = time.perf_counter() - t0
    record_property("detail", f"max err {worst:.1e}, row-sum err {worst_row:.1e}, {seconds:.2f} s")
    assert worst <= 1e-9 and worst_row <= 1e-12 and seconds < 5


# -- 3 ----------------------------------------------------------------------------------

@pytest.mark.criterion(3, "finite-difference gradients of every op and the serial network <= 1e-4 (< 2 min)")
def test_gradient_suite(record_property):
    t0 = time.perf_counter()
    results = run_suite()
    seconds = time.perf_counter() - t0
    names = [r.name for r in results]
    worst = max(results, key=lambda r: r.error)
    record_property("detail", f"{len(results)} checks, worst {worst.name} {worst.error:.1e}, {seconds:.1f} s")
    assert "network_serial_2class_8x8" in names
    assert all(r.passed for r in results), [r.name for r in results if not r.passed]
    assert seconds < 120


# -- 4 ----------------------------------------------------------------------------------

@pytest.mark.criterion(4, "relation output and logit shapes for every integration mode")
def test_shape_contracts(record_property):
    rng = np.random.default_rng(4)
    x = Tensor(rng.standard_normal((4, 3, 3)))
    sp = SpatialRelationParams.init(4, 4, rng, resolution=(3, 3))
    cp = ChannelRelationParams.init(4, 4, rng)
    want = {"srm_only": (13, 3, 3), "crm_only": (4, 3, 3), "serial": (13, 3, 3), "parallel": (17, 3, 3)}
    for mode, shape in want.items():
        assert apply_integration(x, mode, sp, cp).shape == shape, mode
    image = Tensor(rng.random((3, 32, 32)))
    for mode in ("none", *want):
        net = init(NetworkConfig(num_classes=5, mode=mode))
        assert forward(net, image).shape == (5, 32, 32), mode
    record_property("detail", ", ".join(f"{m} {'x'.join(map(str, s))}" for m, s in want.items()))


# -- 5 ----------------------------------------------------------------------------------

def _counting_oracle(pred, truth, k):
    tp, fp, fn = [0] * k, [0] * k, [0] * k
    correct = total = 0
    for p, t in zip(pred.ravel().tolist(), truth.ravel().tolist()):
        if t == 255:
            continue
        total += 1
        if p == t:
            tp[t] += 1
            correct += 1
        else:
            fp[p] += 1
            fn[t] += 1
    f1, iou = [], []
    for c in range(k):
        if tp[c] + fp[c] + fn[c]:
            f1.append(2 * tp[c] / (2 * tp[c] + fp[c] + fn[c]))
            iou.append(tp[c] / (tp[c] + fp[c] + fn[c]))
    return sum(f1) / len(f1), sum(iou) / len(iou), correct / total


@pytest.mark.criterion(5, "F1 / mIoU / OA match a per-pixel counting oracle on 1000 pairs (1e-12)")
def test_metric_oracle(record_property):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(1000):
        k = int(rng.integers(2, 7))
        pred, truth = rng.integers(0, k, (8, 8)), rng.integers(0, k, (8, 8))
        truth[rng.random((8, 8)) < 0.1] = 255
        if (truth == 255).all():
            continue
        cm = ConfusionMatrix(k)
        cm.accumulate(pred, truth)
        f1, iou, oa = _counting_oracle(pred, truth, k)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            errs = [abs(mean_f1(cm) - f1), abs(miou(cm) - iou), abs(overall_accuracy(cm) - oa)]
        a, b = f1_per_class(cm), f1_counting(cm)
        assert np.array_equal(np.isnan(a), np.isnan(b))
        errs.append(float(np.nanmax(np.abs(a - b))))
        worst = max(worst, *errs)
    record_property("detail", f"max err {worst:.1e}")
    assert worst <= 1e-12


# -- 6 ----------------------------------------------------------------------------------

SEEDS = (0, 1, 2, 3)


def _holds(rows):
    f1 = {r["mode"]: r["mean_f1"] for r in rows}
    base = f1["none"]
    return f1["serial"] - base >= 0.05 and f1["parallel"] - base >= 0.05 and f1["srm_only"] - base >= 0.03


@pytest.mark.criterion(6, "serial and parallel beat the baseline by >= 5 points, srm_only by >= 3 "
                          "(default seed and 2 of 3 others, < 30 min)")
def test_ablation_direction(record_property):
    t0 = time.perf_counter()
    verdicts = {}
    for seed in SEEDS:
        cfg = RunConfig(seed=seed)
        ds = generate(cfg.data)
        rows = ablate(cfg, ds.train, ds.val, ds.test)
        f1 = {r["mode"]: r["mean_f1"] for r in rows}
        verdicts[seed] = _holds(rows)
        gaps = " ".join(f"{m} {100 * (f1[m] - f1['none']):+.1f}" for m in ("srm_only", "parallel", "serial"))
        record_property("detail", f"seed {seed}: none {f1['none']:.3f}, {gaps} "
                                  f"({'holds' if verdicts[seed] else 'misses'})")
    minutes = (time.perf_counter() - t0) / 60
    record_property("detail", f"{minutes:.1f} min")
    assert verdicts[SEEDS[0]], "default seed misses"
    assert sum(verdicts[s] for s in SEEDS[1:]) >= 2
    assert minutes < 30


# -- 7 ----------------------------------------------------------------------------------

@pytest.mark.criterion(7, "without ambiguity the baseline exceeds mean F1 0.95 within budget")
def test_capacity_ceiling(record_property):
    d = RunConfig().to_dict()
    d["data"]["ambiguity_rate"] = 0.0
    d["network"]["mode"] = "none"
    cfg = RunConfig.from_dict(d)
    ds = generate(cfg.data)
    result, rep = train_and_score(cfg, ds.train, ds.val, ds.test)
    record_property("detail", f"mean F1 {rep['mean_f1']:.4f} after {len(result.history) * cfg.train.eval_every} iters")
    assert rep["mean_f1"] > 0.95


# -- 8 ----------------------------------------------------------------------------------

@pytest.mark.criterion(8, "checkpoints round-trip bit-exactly; resume reproduces the next val loss (1e-12)")
def test_persistence(tmp_path, record_property):
    d = RunConfig().to_dict()
    d["data"].update(num_train=20, num_val=5, num_test=5)
    d["train"].update(max_iters=20, eval_every=5)
    cfg = RunConfig.from_dict(d)
    ds = generate(cfg.data)

    net = init(cfg.network)
    save_checkpoint(tmp_path / "a.ckpt", net)
    back = load_checkpoint(tmp_path / "a.ckpt")[0]
    for (name, x), y in zip(net.parameters().items(), back.parameters().values()):
        assert x.data.tobytes() == y.data.tobytes(), name
    save_checkpoint(tmp_path / "b.ckpt", back)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    straight = Trainer(cfg, ds.train, ds.val).run()
    Trainer(cfg, ds.train, ds.val, out_dir=tmp_path / "run").run(max_iters=10)
    tail = Trainer.resume(tmp_path / "run" / "last.ckpt", ds.train, ds.val).run()
    want, got = straight.history[2]["val_loss"], tail.history[0]["val_loss"]
    record_property("detail", f"resume val-loss diff {abs(want - got):.1e}")
    assert abs(want - got) <= 1e-12


# -- 9 ----------------------------------------------------------------------------------

@pytest.mark.criterion(9, "two train runs with one config give identical loss traces and reports")
def test_determinism(tmp_path, capsys, record_property):
    d = RunConfig().to_dict()
    d["data"].update(num_train=20, num_val=5, num_test=5)
    d["train"].update(max_iters=20, eval_every=5)
    (tmp_path / "cfg.json").write_text(json.dumps(d))
    for run in ("a", "b"):
        assert main(["train", "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / run)]) == 0
    capsys.readouterr()
    for name in ("log.jsonl", "report.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    record_property("detail", f"{len((tmp_path / 'a' / 'log.jsonl').read_text().splitlines())} log lines identical")
