import numpy as np
import pytest

from gaitqat.errors import ConfigError, UsageError
from gaitqat.gaitnet import GaitNet, ModelSpec, QuantPolicy
from gaitqat.metrics import (LayerCostSpec, MetricsReport, average_precision, bitops, evaluate, format_giga,
                             gaitbase_layer_table, inverse_negative_penalty, layer_bitops, mean_ap, mean_inp,
                             model_layer_costs, rank_n, retrieval_report)


def brute_force(probe, plabels, gallery, glabels):
    """Full distance matrix, stable sort, metrics by definition."""
    p, g = probe.reshape(len(probe), -1), gallery.reshape(len(gallery), -1)
    out = {"rank1": [], "rank5": [], "ap": [], "inp": []}
    for i in range(len(p)):
        d = [round(float(np.sqrt(((p[i] - g[j]) ** 2).sum())), 9) for j in range(len(g))]
        order = sorted(range(len(g)), key=lambda j: (d[j], j))
        hits = [glabels[j] == plabels[i] for j in order]
        ranks = [r + 1 for r, h in enumerate(hits) if h]
        out["rank1"].append(hits[0])
        out["rank5"].append(any(hits[:5]))
        out["ap"].append(np.mean([(n + 1) / r for n, r in enumerate(ranks)]))
        out["inp"].append(len(ranks) / ranks[-1])
    return {k: float(np.mean(v)) for k, v in out.items()}


def test_identical_gallery_rank1_is_one():
    g = np.eye(4)
    assert rank_n(g, [0, 1, 2, 3], g, [0, 1, 2, 3]) == 1.0


def test_adversarial_ranking():
    probe = np.array([[0.0]])
    gallery = np.array([[3.0], [1.0], [2.0]])
    labels = [0, 1, 2]
    assert rank_n(probe, [0], gallery, labels, 1) == 0.0
    assert rank_n(probe, [0], gallery, labels, 3) == 1.0


def test_random_embeddings_rank1_near_chance():
    vals = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        gl = np.repeat(np.arange(8), 4)
        pl = np.repeat(np.arange(8), 4)
        vals.append(rank_n(rng.normal(size=(32, 16)), pl, rng.normal(size=(32, 16)), gl))
    assert abs(np.mean(vals) - 1 / 8) < 0.05


def test_ap_and_inp_examples():
    assert average_precision(np.array([1, 3])) == pytest.approx((1 + 2 / 3) / 2)
    assert inverse_negative_penalty(np.array([1, 3])) == pytest.approx(2 / 3)
    assert average_precision(np.array([1, 2, 3])) == 1.0
    assert inverse_negative_penalty(np.array([1, 2])) == 1.0
    assert average_precision(np.array([4])) == 0.25
    assert inverse_negative_penalty(np.array([7])) == pytest.approx(1 / 7)


def test_ap_example_through_distances():
    probe = np.array([[0.0]])
    gallery = np.array([[1.0], [2.0], [3.0]])
    labels = ["A", "B", "A"]
    assert mean_ap(probe, ["A"], gallery, labels) == pytest.approx(0.8333333333)
    assert mean_inp(probe, ["A"], gallery, labels) == pytest.approx(2 / 3)


def test_probe_without_positive_is_skipped():
    probe = np.array([[0.0], [5.0]])
    gallery = np.array([[1.0], [2.0]])
    val, skipped = mean_ap(probe, [0, 9], gallery, [0, 1], return_skipped=True)
    assert val == 1.0 and skipped == 1
    with pytest.raises(UsageError):
        rank_n(probe, [0, 1], np.zeros((0, 1)), [])


def test_ties_break_by_gallery_index():
    probe = np.array([[0.0]])
    gallery = np.array([[1.0], [-1.0]])
    assert rank_n(probe, [1], gallery, [0, 1]) == 0.0
    assert rank_n(probe, [0], gallery, [0, 1]) == 1.0


def test_metrics_agree_with_brute_force():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        gl = np.repeat(np.arange(8), 8)
        pl = rng.integers(0, 8, 20)
        probe, gallery = rng.normal(size=(20, 2, 3)), rng.normal(size=(64, 2, 3))
        r = retrieval_report(probe, pl, gallery, gl)
        ref = brute_force(probe, pl, gallery, gl)
        assert r["rank1"] == ref["rank1"] and r["rank5"] == ref["rank5"]
        assert r["mAP"] == pytest.approx(ref["ap"], abs=1e-15)
        assert r["mINP"] == pytest.approx(ref["inp"], abs=1e-15)


def test_ap_versus_inp_on_100_permutations():
    # every precision term n / r_n is at least n / r_N, so AP >= INP (N + 1) / (2N)
    rng = np.random.default_rng(0)
    for _ in range(100):
        m = 12
        hits = rng.permutation(np.arange(m) < rng.integers(1, m))
        ranks = np.flatnonzero(hits) + 1
        n = ranks.size
        assert average_precision(ranks) >= inverse_negative_penalty(ranks) * (n + 1) / (2 * n) - 1e-15


def test_ap_can_fall_below_inp():
    # AP >= INP is not a law: late first positives drag the precision average down
    ranks = np.array([5, 8, 9, 12])
    assert average_precision(ranks) == pytest.approx(0.2791666, abs=1e-6)
    assert inverse_negative_penalty(ranks) == pytest.approx(1 / 3)


def test_bitops_examples():
    layer = LayerCostSpec(16, 32, 3, 1, 8, 8)
    assert layer_bitops(layer) == 589_824
    assert layer_bitops(layer.with_bits(8, 8)) == 36_864


def test_bitops_scaling_laws():
    layers = gaitbase_layer_table()
    full = bitops(layers)
    assert bitops([s.with_bits(8, 8) for s in layers]) * 16 == full
    assert bitops([s.with_bits(4, 4) for s in layers]) * 64 == full
    doubled = [LayerCostSpec(s.c_in, s.c_out, s.f, 2 * s.n, s.h, s.w) for s in layers]
    assert bitops(doubled) == 2 * full


def test_table_one_ratios():
    reported_total = 118.30e9
    assert format_giga(reported_total / 16) == "7.39"
    assert format_giga(reported_total / 64) == "1.85"


def test_layer_spec_validation():
    with pytest.raises(ConfigError):
        LayerCostSpec(0, 1, 1, 1, 1, 1)
    with pytest.raises(ConfigError):
        LayerCostSpec(1, 1, 1, 1, 1, 1, b_w=64)


def test_model_bitops_fp_is_16x_w8():
    fp = bitops(model_layer_costs(GaitNet(seed=0)))
    w8 = bitops(model_layer_costs(GaitNet(ModelSpec(quant=QuantPolicy(8, 8)), seed=0)))
    assert fp == 16 * w8


def test_report_invariants():
    with pytest.raises(ConfigError):
        MetricsReport(0.9, 0.8, 1.0, 0.5, 0.4, 0, "0", 0, 1, 1)
    with pytest.raises(ConfigError):
        MetricsReport(1.2, 1.2, 1.2, 0.5, 0.4, 0, "0", 0, 1, 1)


def test_evaluate_deterministic(small_split):
    m = GaitNet(ModelSpec(n_classes=8), seed=0)
    a = evaluate(m, small_split, config={"seed": 0})
    b = evaluate(m, small_split, config={"seed": 0})
    assert a.to_json() == b.to_json()
    assert a.rank1 <= a.rank5 <= a.rank10
    assert m.training
