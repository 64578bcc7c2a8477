"""Acceptance suite: one test per criterion, each printed as PASS/FAIL in the summary.

Run alone with ``pytest tests/test_acceptance.py -v``. The desk experiment
(criteria 6 and 7) trains 3 models on each of 10 seeds, twice.
"""

import itertools
import time

import numpy as np
import pytest

from roiensemble import architectures as A
from roiensemble import tensor as T
from roiensemble.architectures import DenseBlock, EffSpec, XceptionSpec
from roiensemble.cli import FAMILIES, run_eval, run_train
from roiensemble.config import parse_config
from roiensemble.ensemble import argmax_class, fuse_sum
from roiensemble.layers import count_parameters
from roiensemble.metrics import ConfusionMatrix, MetricReport, compute_report, format_table
from roiensemble.training import TrainConfig, load_checkpoint, save_checkpoint, train_model
from roiensemble import data as D

from oracles import ABS_TOL, REL_TOL, brute_force_metrics, grad_errors, naive_conv2d, primitive_cases

# pinned tolerances and budgets
GRAD_SHAPES = 20
GRAD_BUDGET_S = 60.0
CONV_TOL = 1e-10
CONV_BUDGET_S = 30.0
METRIC_INSTANCES = 1000
ENSEMBLE_TRIPLES = 10_000
DESK_SEEDS = range(10)
DESK_MIN_WINS = 7
DESK_MAX_DEFICIT = 1
DESK_BUDGET_S = 600.0


# ------------------------------------------------------------------ 1


@pytest.mark.criterion(1, "gradient suite")
def test_gradient_suite(record_property):
    start = time.perf_counter()
    counts, worst = {}, {}
    worst_abs = 0.0
    failures = []
    for name, fn, arrays in primitive_cases(GRAD_SHAPES, seed=2024):
        rel, abs_err = grad_errors(fn, arrays, seed=counts.get(name, 0))
        counts[name] = counts.get(name, 0) + 1
        worst[name] = max(worst.get(name, 0.0), rel)
        worst_abs = max(worst_abs, abs_err)
        # rel is only measured on entries whose absolute error exceeds ABS_TOL
        if rel >= REL_TOL:
            failures.append((name, rel, abs_err))
    elapsed = time.perf_counter() - start
    record_property("detail", f"{len(counts)} primitives, max rel {max(worst.values()):.1e}, max abs {worst_abs:.1e}, {elapsed:.1f}s")
    assert not failures, failures[:5]
    assert min(counts.values()) >= GRAD_SHAPES
    assert {"conv2d", "separable_conv", "channel_norm", "relu", "swish", "avg_pool2d", "global_avg_pool",
            "linear", "softmax", "cross_entropy"} <= set(counts)
    assert ABS_TOL == 1e-7 and REL_TOL == 1e-4
    assert elapsed < GRAD_BUDGET_S


# ------------------------------------------------------------------ 2


def loop_conv2d(x, w, b, stride, padding):
    """Per-output-pixel loop; each pixel is an explicit window sum."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.zeros((n, cin, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding : padding + h, padding : padding + wd] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.empty((n, cout, ho, wo))
    for y in range(ho):
        for z in range(wo):
            window = xp[:, :, y * stride : y * stride + kh, z * stride : z * stride + kw]
            out[:, :, y, z] = (window[:, None] * w[None]).sum(axis=(2, 3, 4))
    if b is not None:
        out += b[None, :, None, None]
    return out


def conv_sweep():
    """Every spatial shape with H, W, kH, kW <= 6, plus every N, C_in, C_out <= 6."""
    idx = 0
    for h, w, kh, kw in itertools.product(range(1, 7), repeat=4):
        for stride, pad in itertools.product((1, 2), (0, 1, 2)):
            if kh > h + 2 * pad or kw > w + 2 * pad:
                continue
            idx += 1
            yield (1 + idx % 2, 1 + idx % 3, 1 + (idx // 3) % 3, h, w, kh, kw, stride, pad, idx % 2 == 0)
    for n, cin, cout in itertools.product(range(1, 7), repeat=3):
        for stride, pad in itertools.product((1, 2), (0, 1, 2)):
            idx += 1
            yield (n, cin, cout, 5, 6, 3, 2, stride, pad, idx % 2 == 0)


@pytest.mark.criterion(2, "convolution oracle")
def test_conv_matches_naive_loops(record_property):
    rng = np.random.default_rng(7)
    # the fast reference is itself pinned to the scalar quadruple loop
    for _ in range(30):
        x = rng.standard_normal((2, 2, 5, 4))
        w = rng.standard_normal((3, 2, 3, 2))
        b = rng.standard_normal(3)
        s, p = int(rng.integers(1, 3)), int(rng.integers(0, 3))
        np.testing.assert_allclose(loop_conv2d(x, w, b, s, p), naive_conv2d(x, w, b, s, p), rtol=0, atol=1e-12)

    start = time.perf_counter()
    worst, count = 0.0, 0
    for n, cin, cout, h, w_, kh, kw, stride, pad, with_bias in conv_sweep():
        x = rng.standard_normal((n, cin, h, w_))
        w = rng.standard_normal((cout, cin, kh, kw))
        b = rng.standard_normal(cout) if with_bias else None
        got = T.conv2d(T.Tensor(x), T.Tensor(w), None if b is None else T.Tensor(b), stride, pad).data
        want = loop_conv2d(x, w, b, stride, pad)
        assert got.shape == want.shape
        worst = max(worst, float(np.abs(got - want).max()))
        count += 1
    elapsed = time.perf_counter() - start
    record_property("detail", f"{count} configurations, max error {worst:.1e}, {elapsed:.1f}s")
    assert worst <= CONV_TOL
    assert elapsed < CONV_BUDGET_S


# ------------------------------------------------------------------ 3


@pytest.mark.criterion(3, "architecture invariants")
def test_architecture_invariants(record_property):
    for m in range(2, 15):
        spec = XceptionSpec(num_modules=m, stem_channels=4, channels_per_module=(4,) * m, resolution=8)
        assert len(A.build_xception_like(spec).residual_modules) == m - 2

    rng = np.random.default_rng(0)
    for cin, k, layers in itertools.product(range(1, 9), repeat=3):
        assert DenseBlock(cin, k, layers, rng).out_channels == cin + layers * k

    counts = [count_parameters(A.build_model(EffSpec(phi=phi, alpha=1.2, beta=1.1))) for phi in (0, 0.5, 1, 1.5)]
    record_property("detail", f"EfficientNet-like params {counts}")
    assert all(a < b for a, b in zip(counts, counts[1:]))


# ------------------------------------------------------------------ 4


@pytest.mark.criterion(4, "metrics oracle")
def test_metrics_oracle(record_property):
    rng = np.random.default_rng(11)
    for _ in range(METRIC_INSTANCES):
        k = int(rng.choice([2, 3, 5]))
        n = int(rng.integers(1, 51))
        t, p = rng.integers(0, k, n), rng.integers(0, k, n)
        r = compute_report(ConfusionMatrix.from_labels(t, p, k))
        acc, mp, mr, mf, pr, rc, f1 = brute_force_metrics(t, p, k)
        assert (r.accuracy, r.macro_precision, r.macro_recall, r.macro_f1) == (acc, mp, mr, mf)
        assert list(r.precision) == pr and list(r.recall) == rc and list(r.f1) == f1

    r = compute_report(ConfusionMatrix.from_labels([0, 0, 1, 1, 2, 2], [0, 1, 1, 1, 2, 0], 3))
    values = [round(v, 4) for v in (r.accuracy, r.macro_precision, r.macro_recall, r.macro_f1)]
    record_property("detail", f"{METRIC_INSTANCES} instances, example {values}")
    assert values == [0.6667, 0.7222, 0.6667, 0.6556]


# ------------------------------------------------------------------ 5


@pytest.mark.criterion(5, "ensemble algebra")
def test_ensemble_algebra(record_property):
    rng = np.random.default_rng(5)
    for _ in range(ENSEMBLE_TRIPLES):
        triple = list(rng.dirichlet(np.ones(3), size=3))
        fused = fuse_sum(triple)
        label = argmax_class(fused)
        for perm in itertools.permutations(triple):
            assert fuse_sum(list(perm)).tobytes() == fused.tobytes()
        # mean fusion and any positive rescaling pick the same class
        assert argmax_class(fused / 3) == label
        assert argmax_class(fused * float(rng.uniform(1e-3, 1e3))) == label

        j = int(rng.integers(0, 3))
        agreeing = []
        for p in triple:
            q = p.copy()
            q[j] = q.max() + float(rng.uniform(1e-6, 1.0))
            agreeing.append(q / q.sum())
        assert all(argmax_class(q) == j for q in agreeing)
        assert argmax_class(fuse_sum(agreeing)) == j

        a = float(rng.uniform(0.34, 0.5))
        lo_tie = [np.array([a, a, 1 - 2 * a])] * 3
        hi_tie = [np.array([1 - 2 * a, a, a])] * 3
        assert [argmax_class(fuse_sum(lo_tie)) for _ in range(2)] == [0, 0]
        assert [argmax_class(fuse_sum(hi_tie)) for _ in range(2)] == [1, 1]
    record_property("detail", f"{ENSEMBLE_TRIPLES} random triples")


# ---------------------------------------------------------------- 6, 7


def desk_config(seed):
    cfg = parse_config("").with_seed(seed)
    # 20 per class for training and a 60-sample test set, lr 0.001, 100 epochs
    assert (cfg.data.per_class, cfg.data.test_fraction) == (40, 0.5)
    assert (cfg.train.learning_rate, cfg.train.epochs) == (0.001, 100)
    assert all(cfg.specs[f] == A.preset(f) for f in FAMILIES)
    return cfg


def run_desk_experiment(root):
    start = time.perf_counter()
    for seed in DESK_SEEDS:
        cfg = desk_config(seed)
        out = root / f"seed{seed}"
        run_train(cfg, out, echo=lambda *_: None)
        run_eval(cfg, out, out)
    return root, time.perf_counter() - start


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    return run_desk_experiment(tmp_path_factory.mktemp("desk_a"))


@pytest.fixture(scope="session")
def desk_rerun(tmp_path_factory):
    return run_desk_experiment(tmp_path_factory.mktemp("desk_b"))


def correct_count(path):
    return int(np.trace(np.loadtxt(path, delimiter=",", dtype=int, ndmin=2)))


@pytest.mark.criterion(6, "desk-scale ensemble experiment")
def test_desk_ensemble_experiment(desk_run, record_property):
    root, elapsed = desk_run
    margins = []
    for seed in DESK_SEEDS:
        out = root / f"seed{seed}"
        totals = np.loadtxt(out / "confusion_ensemble.csv", delimiter=",", dtype=int).sum()
        assert totals == 60
        best = max(correct_count(out / f"confusion_{f}.csv") for f in FAMILIES)
        margins.append(correct_count(out / "confusion_ensemble.csv") - best)
    wins = sum(m >= 0 for m in margins)
    record_property("detail", f"wins {wins}/10, margins {margins}, {elapsed:.0f}s")
    print("ensemble minus best member, in test samples:", margins)
    assert wins >= DESK_MIN_WINS
    assert min(margins) >= -DESK_MAX_DEFICIT
    assert elapsed < DESK_BUDGET_S


@pytest.mark.criterion(7, "determinism")
def test_desk_experiment_is_byte_identical(desk_run, desk_rerun, record_property):
    (a, _), (b, _) = desk_run, desk_rerun
    compared = 0
    for seed in DESK_SEEDS:
        names = [f"{f}.ckpt" for f in FAMILIES] + [f"confusion_{f}.csv" for f in (*FAMILIES, "ensemble")]
        names += ["table.txt", "metrics.csv"]
        for name in names:
            assert (a / f"seed{seed}" / name).read_bytes() == (b / f"seed{seed}" / name).read_bytes(), (seed, name)
            compared += 1
    record_property("detail", f"{compared} files compared")


# ------------------------------------------------------------------ 8


@pytest.mark.criterion(8, "report fidelity")
def test_table_fidelity(record_property):
    text = format_table([("Ensembling", MetricReport(0.8833, 0.8562, 0.7629, 0.7582, (), (), ()))])
    header, row = text.splitlines()
    columns = [c.strip() for c in header.split("  ") if c.strip()]
    record_property("detail", row.strip())
    assert columns == ["Model", "Accuracy", "Precision", "Recall", "F1 Score"]
    assert row.split() == ["Ensembling", "88.33", "85.62", "76.29", "75.82"]


# ------------------------------------------------------------------ 9


@pytest.mark.criterion(9, "checkpoint round trip")
def test_checkpoint_round_trip_all_families(tmp_path, record_property):
    split = D.train_test_split(D.synthesize_dataset(3, 4), 0.5, 3)
    x = np.random.default_rng(1).uniform(0, 1, (4, 1, 16, 16))
    for family in FAMILIES:
        model = A.build_model(A.preset(family), seed=3)
        train_model(model, split, TrainConfig(epochs=2, seed=3))
        save_checkpoint(model, tmp_path / f"{family}.ckpt")
        loaded = load_checkpoint(tmp_path / f"{family}.ckpt", A.preset(family))
        pairs = list(zip(model.named_parameters(), loaded.named_parameters()))
        assert len(pairs) == len(model.parameters()) == len(loaded.parameters())
        for (na, pa), (nb, pb) in pairs:
            assert na == nb and pa.data.dtype == pb.data.dtype and pa.data.tobytes() == pb.data.tobytes()
        model.eval()
        loaded.eval()
        assert model(x).data.tobytes() == loaded(x).data.tobytes()
    record_property("detail", ", ".join(FAMILIES))
