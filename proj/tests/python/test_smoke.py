import json

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment
from scipy.special import softmax as np_softmax

import comet_moe as cm


def test_smooth_step_saturates_and_matches_cubic():
    assert cm.smooth_step(-0.5) == 0.0
    assert cm.smooth_step(0.5) == 1.0
    for t in np.linspace(-0.49, 0.49, 11):
        assert cm.smooth_step(t) == pytest.approx(-2 * t**3 + 1.5 * t + 0.5, abs=1e-15)
    assert cm.smooth_step_derivative(2.0, gamma=0.1) == 0.0


def test_tree_shape_for_five_leaves():
    shape = cm.tree_shape(5)
    assert shape["depth"] == 3
    assert shape["n_internal"] == 4
    assert shape["leaf_levels"] == [2, 2, 2, 3, 3]


def test_softmax_and_topk_against_numpy():
    z = np.array([0.3, -1.0, 2.0, 0.7])
    np.testing.assert_allclose(cm.softmax(z), np_softmax(z), rtol=1e-14)
    top = cm.topk_softmax(z, 2)
    assert np.count_nonzero(top) == 2
    np.testing.assert_allclose(top[[2, 3]], np_softmax(z[[2, 3]]), rtol=1e-14)


def test_combine_keeps_exact_zeros():
    v = np.array([[0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]])
    g = cm.combine_trees(v, np.zeros((2, 4)))
    assert g.tolist() == [0.0, 0.5, 0.5, 0.0]
    assert cm.entropy_penalty(np.full(4, 0.25)) == pytest.approx(np.log(4))


def test_assignment_matches_scipy():
    rng = np.random.default_rng(3)
    for _ in range(20):
        u = rng.normal(size=(6, 6))
        rows, cols = linear_sum_assignment(u, maximize=True)
        ours = cm.solve_assignment(u)
        assert u[np.arange(6), ours].sum() == pytest.approx(u[rows, cols].sum(), abs=1e-12)


def test_sinkhorn_is_column_stochastic():
    p = cm.sinkhorn(np.random.default_rng(0).normal(size=(5, 5)), 0.5, 30)
    np.testing.assert_allclose(p.sum(axis=0), 1.0, atol=1e-12)
    tau, iters = cm.schedule(0, 100)
    assert iters == 20 and tau == pytest.approx(1e-3)


def test_t_test_matches_scipy():
    from scipy.stats import ttest_ind

    a, b = [1.0, 2.0, 3.0, 4.0, 5.0], [2.0, 4.0, 6.0, 8.0, 10.5, 11.0]
    t, _, p = cm.t_test_less(a, b)
    ref = ttest_ind(a, b, equal_var=False, alternative="less")
    assert t == pytest.approx(ref.statistic, rel=1e-12)
    assert p == pytest.approx(ref.pvalue, rel=1e-9)


def test_bootstrap_curve_is_flat_for_identical_trials():
    curve = cm.bootstrap_curve([(1.0, 2.0)] * 5, [1, 5], repeats=50)
    assert [pt["mean"] for pt in curve] == [2.0, 2.0]


def test_train_end_to_end(tmp_path):
    config = {
        "epochs": 3,
        "stage1_epochs": 1,
        "dataset": {"n": 300, "seed": 1},
        "deterministic": True,
        "output_dir": str(tmp_path / "run"),
    }
    report = cm.train(config)
    assert np.isfinite(report["test_loss"])
    assert "train_seconds" not in report
    summary = json.loads((tmp_path / "run" / "summary.json").read_text())
    assert summary["test_loss"] == report["test_loss"]
    assert cm.train(config) == report


def test_flops_rows():
    rows = {r["gate"]: r for r in cm.flops({"n_experts": 16, "k": 2, "dataset": {"p": 128}})}
    assert rows["hash"]["gate_total"] == 0
    assert rows["comet"]["gate_total"] < rows["topk"]["gate_total"]


def test_errors_map_to_python_exceptions():
    with pytest.raises(cm.ConfigError, match="bogus"):
        cm.flops({"bogus": 1})
    with pytest.raises(cm.UsageError):
        cm.bootstrap_curve([(1.0, 2.0)], [3])
