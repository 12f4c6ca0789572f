import numpy as np
import pytest
from hypothesis import given, strategies as st

from feast import autodiff as ad
from feast.autodiff import Tensor
from feast.datasets import Batch
from feast.fairness import (GroupedScores, MetricUndefinedError, MetricsReport, TaskMetrics, delta_dp,
                            delta_eo, reg_dp, reg_eo, regularized_loss, regularized_loss_from_probs,
                            task_metrics)
from feast.models import init_classifier
from conftest import GRAD_TOL, check_gradient

cells = GroupedScores.from_cells


@pytest.mark.parametrize("g, dp", [
    (cells(q00=[1, 1], q10=[0, 0]), 1.0),
    (cells(q01=[0.3, 0.7], q11=[0.5]), 0.0),
    (cells(q00=[0.75], q01=[0.25], q10=[0.0]), 0.5),
    (cells(q00=[0.0], q11=[1.0]), 1.0),
    (cells(q00=[0.25, 0.75], q10=[0.5], q11=[0.5]), 0.0),
])
def test_delta_dp_fixtures(g, dp):
    assert delta_dp(g) == dp


@pytest.mark.parametrize("g, eo, partial", [
    (cells([0.4], [0.4], [0.4], [0.4]), 0.0, False),
    (cells(q00=[1], q10=[0], q01=[1], q11=[0]), 2.0, False),
    (cells(q00=[0.75], q10=[0.5], q01=[0.5], q11=[0.5]), 0.25, False),
    (cells(q00=[0.5, 1.0], q10=[0.25], q01=[0.5], q11=[0.0, 0.5]), 0.75, False),
    (cells(q00=[1.0], q10=[0.5], q01=[0.5]), 0.5, True),
    (cells(q01=[0.75], q11=[0.5], q00=[0.0]), 0.25, True),
])
def test_delta_eo_fixtures(g, eo, partial):
    assert delta_eo(g) == eo
    assert g.eo_partial == partial


def test_delta_dp_forced_arithmetic():
    assert delta_dp(cells(q00=[0.8], q01=[0.6], q10=[0.2])) == pytest.approx(0.5, abs=1e-15)


def test_delta_eo_forced_arithmetic():
    g = cells(q00=[0.9], q10=[0.5], q01=[0.7], q11=[0.7])
    assert delta_eo(g) == pytest.approx(0.4, abs=1e-15)


def test_undefined_metrics():
    with pytest.raises(MetricUndefinedError):
        delta_dp(cells(q00=[0.5]))
    with pytest.raises(MetricUndefinedError):
        delta_eo(cells(q00=[0.5], q11=[0.5]))


def test_partial_task_policy():
    m = task_metrics(0, [0.9, 0.1, 0.6], sensitive=[0, 1, 0], labels=[1, 1, 0])
    assert m.partial and m.eo == pytest.approx(0.8)
    m = task_metrics(1, [0.9, 0.1], sensitive=[0, 1], labels=[1, 0])
    assert m.partial and m.eo is None and m.dp == pytest.approx(0.8)
    report = MetricsReport([TaskMetrics(0, 0.2, 0.4, 1.0, False), TaskMetrics(1, 0.4, None, 0.5, True),
                            TaskMetrics(2, 0.6, 0.2, 0.0, True)])
    s = report.summary()
    assert s["n_partial"] == 2
    assert s["eo"]["mean"] == pytest.approx(0.3) and s["eo_complete"]["mean"] == pytest.approx(0.4)
    assert s["dp"]["mean"] == pytest.approx(0.4)


scores = st.lists(st.floats(0, 1), min_size=1, max_size=8)


@given(scores, scores, scores, scores, st.randoms())
def test_metric_properties(q00, q01, q10, q11, rnd):
    g = cells(q00, q01, q10, q11)
    dp, eo = delta_dp(g), delta_eo(g)
    assert 0 <= dp <= 1 and 0 <= eo <= 2
    swapped = cells(q10, q11, q00, q01)
    assert delta_dp(swapped) == pytest.approx(dp, abs=1e-12)
    assert delta_eo(swapped) == pytest.approx(eo, abs=1e-12)
    shuffled = [rnd.sample(q, len(q)) for q in (q00, q01, q10, q11)]
    assert delta_dp(cells(*shuffled)) == pytest.approx(dp, abs=1e-12)
    assert delta_eo(cells(*shuffled)) == pytest.approx(eo, abs=1e-12)


@given(scores, scores, st.floats(0.01, 0.99))
def test_shrinking_toward_half_scales_dp(q0, q1, c):
    shrink = lambda q: [0.5 + c * (v - 0.5) for v in q]
    g = cells(q00=q0, q10=q1)
    assert delta_dp(cells(q00=shrink(q0), q10=shrink(q1))) == pytest.approx(c * delta_dp(g), abs=1e-12)


def _probs(scores):
    s = np.asarray(scores, dtype=float).reshape(-1, 1)
    return Tensor(np.hstack([1 - s, s]))


def test_reg_dp_examples():
    assert reg_dp(_probs([0.2, 0.8, 0.5, 0.5]), [0, 0, 1, 1]).value.item() == 0.0
    pen = reg_dp(_probs([0.9, 0.1]), [1, 1])
    assert pen.degenerate and pen.value.item() == 0.0
    assert reg_dp(_probs([0.9, 0.1]), [0, 1]).value.item() == pytest.approx(0.64)


def test_reg_eo_examples():
    pen = reg_eo(_probs([0.9, 0.5, 0.7, 0.7]), [0, 1, 0, 1], [0, 0, 1, 1])
    assert pen.value.item() == pytest.approx(0.16)
    assert reg_eo(_probs([0.9, 0.1]), [0, 1], [0, 1]).degenerate


@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=2, max_size=10))
def test_reg_dp_zero_iff_equal_means(rows):
    s = np.array([r[0] for r in rows])
    a = np.array([r[1] for r in rows])
    pen = reg_dp(_probs(s), a)
    if pen.degenerate:
        return
    gap = abs(s[a == 0].mean() - s[a == 1].mean())
    assert (pen.value.item() <= 1e-12) == (gap <= 1e-6) or gap ** 2 <= 1e-12


@pytest.mark.parametrize("kind", ["dp", "eo"])
def test_regularizer_gradients(kind):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 8))
        a, y = rng.integers(0, 2, n), rng.integers(0, 2, n)
        a[:2] = [0, 1]
        y[:2] = [1, 1]
        lam = float(rng.uniform(0.1, 2))
        build = lambda z: regularized_loss_from_probs(ad.softmax_row(z), y, a, lam, kind)
        worst = max(worst, check_gradient(build, [rng.uniform(-2, 2, (n, 2))]))
    assert worst <= GRAD_TOL


def test_regularized_loss_composition():
    rng = np.random.default_rng(1)
    theta = init_classifier(5, rng)
    x = rng.normal(size=(8, 5))
    y, a = rng.integers(0, 2, 8), np.array([0, 1] * 4)
    batch = Batch(x, y, a, np.arange(8))
    from feast.models import classifier_forward
    _, probs = classifier_forward(theta, x)
    ce = ad.cross_entropy(probs, y).item()
    assert regularized_loss(theta, batch, 0.0).item() == ce
    s = probs.data[:, 1]
    r = (s[a == 0].mean() - s[a == 1].mean()) ** 2
    assert regularized_loss(theta, batch, 0.7).item() == pytest.approx(ce + 0.7 * r, abs=1e-10)
    fair = Batch(np.vstack([x[:1], x[:1]]), np.array([0, 1]), np.array([0, 1]), np.arange(2))
    _, p2 = classifier_forward(theta, fair.x)
    assert regularized_loss(theta, fair, 3.0).item() == pytest.approx(ad.cross_entropy(p2, [0, 1]).item(),
                                                                      abs=1e-15)


def test_report_round_trip(tmp_path):
    report = MetricsReport([task_metrics(i, np.linspace(0.1, 0.9, 6), [0, 1] * 3, [0, 0, 1, 1, 0, 1])
                            for i in range(3)])
    back = MetricsReport.from_jsonl(report.to_jsonl())
    assert back.tasks == report.tasks
    report.write(tmp_path, {"seed": 1})
    assert (tmp_path / "tasks.jsonl").read_text() == report.to_jsonl()
    import json
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["n_tasks"] == 3 and summary["seed"] == 1
    assert summary["dp"]["mean"] == pytest.approx(np.mean([t.dp for t in report.tasks]))


def test_accuracy_uses_half_threshold():
    m = task_metrics(0, [0.6, 0.4, 0.51, 0.5], [0, 1, 0, 1], [1, 0, 0, 1])
    assert m.acc == 0.5
