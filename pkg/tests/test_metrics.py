import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fusioncast import oracles
from fusioncast.metrics import (LEAD_FRAMES, THRESHOLDS, ContingencyTable, MetricsError, binarize, contingency, csi,
                                evaluate, is_undefined, mae, read_categorical, read_continuous, rmse, write_report)

grids = st.integers(1, 16).flatmap(lambda h: st.integers(1, 16).flatmap(
    lambda w: st.tuples(arrays(np.float64, (h, w), elements=st.floats(0, 50)),
                        arrays(np.float64, (h, w), elements=st.floats(0, 50)))))


def test_paper_thresholds_and_leads():
    assert THRESHOLDS == (0.1, 1.0, 4.0)
    assert [10 * k for k in LEAD_FRAMES] == [10, 40, 80, 120]


def test_mae_rmse_hand_cases():
    assert mae([1.0, 3.0], [1.0, 3.0]) == 0.0 and rmse([1.0, 3.0], [1.0, 3.0]) == 0.0
    assert mae([1.0, 3.0], [2.0, 2.0]) == 1.0
    assert rmse([0.0, 0.0], [3.0, 4.0]) == pytest.approx(math.sqrt(12.5), abs=1e-15)
    assert rmse([2.5], [-1.0]) == mae([2.5], [-1.0]) == 3.5


@given(grids)
def test_mae_le_rmse(pg):
    p, g = pg
    assert mae(p, g) <= rmse(p, g) + 1e-12


@given(grids)
def test_metrics_match_loops(pg):
    p, g = pg
    assert abs(mae(p, g) - oracles.mae_loop(p, g)) < 1e-12
    assert abs(rmse(p, g) - oracles.rmse_loop(p, g)) < 1e-12
    for tau in THRESHOLDS:
        t = contingency(binarize(p, tau), binarize(g, tau))
        assert (t.tp, t.fp, t.fn, t.tn) == oracles.contingency_loop(p, g, tau)
        a, b = csi(t), oracles.csi_loop(p, g, tau)
        assert (math.isnan(a) and math.isnan(b)) or abs(a - b) < 1e-12


def test_binarize_inclusive():
    assert binarize(np.array([1.0]), 1.0)[0]
    assert not binarize(np.zeros((3, 3)), 0.1).any()


def test_binarize_count_matches_loop(rng):
    g = rng.gamma(0.6, 2.0, size=(9, 7))
    assert binarize(g, 1.0).sum() == sum(1 for v in g.ravel() if v >= 1.0)


def test_contingency_cases(rng):
    ones = np.ones((4, 4), dtype=bool)
    assert contingency(ones, ones) == ContingencyTable(16, 0, 0, 0)
    assert contingency(ones, ~ones) == ContingencyTable(0, 16, 0, 0)
    p, g = rng.random((8, 8)) > 0.5, rng.random((8, 8)) > 0.5
    t = contingency(p, g)
    assert (t.tp, t.fp, t.fn, t.tn) == oracles.contingency_loop(p.astype(float), g.astype(float), 0.5)


def test_csi_hand_cases():
    assert csi(ContingencyTable(1, 0, 0, 0)) == 1.0
    assert csi(ContingencyTable(2, 1, 1, 9)) == 0.5
    assert is_undefined(csi(ContingencyTable(0, 0, 0, 5)))


def test_evaluate_perfect(rng):
    truths = [rng.gamma(0.6, 3.0, size=(12, 6, 6)) for _ in range(3)]
    rep = evaluate(truths, truths)
    assert rep.mae == 0 and rep.rmse == 0
    assert all(v == 1.0 for v in rep.csi.values() if not is_undefined(v))


def test_evaluate_persistence_static():
    frame = np.zeros((6, 6))
    frame[2:4, 2:4] = 5.0
    seq = np.repeat(frame[None], 12, axis=0)
    rep = evaluate([seq], [seq.copy()])
    assert all(v == 1.0 for v in rep.csi.values())


def test_evaluate_matches_loop(rng):
    preds = [rng.gamma(0.6, 3.0, size=(12, 5, 5)) for _ in range(3)]
    truths = [rng.gamma(0.6, 3.0, size=(12, 5, 5)) for _ in range(3)]
    rep = evaluate(preds, truths)
    for tau in THRESHOLDS:
        for lead in LEAD_FRAMES:
            tp = fp = fn = 0
            for p, g in zip(preds, truths):
                a, b, c, _ = oracles.contingency_loop(p[lead - 1], g[lead - 1], tau)
                tp, fp, fn = tp + a, fp + b, fn + c
            ref = tp / (tp + fp + fn) if tp + fp + fn else math.nan
            got = rep.csi[(tau, lead)]
            assert (math.isnan(ref) and math.isnan(got)) or abs(got - ref) < 1e-12
    assert abs(rep.mae - np.mean([oracles.mae_loop(p, g) for p, g in zip(preds, truths)])) < 1e-12


def test_mean_aggregation_keeps_counts(rng):
    preds = [rng.gamma(0.6, 3.0, size=(12, 5, 5)) for _ in range(4)]
    truths = [rng.gamma(0.6, 3.0, size=(12, 5, 5)) for _ in range(4)]
    pooled, mean = evaluate(preds, truths), evaluate(preds, truths, aggregation="mean")
    assert pooled.tables == mean.tables
    key = (1.0, 1)
    per = [csi(contingency(binarize(p[0], 1.0), binarize(g[0], 1.0))) for p, g in zip(preds, truths)]
    assert mean.csi[key] == pytest.approx(np.mean([v for v in per if not math.isnan(v)]), abs=1e-15)


def test_evaluate_errors(rng):
    a = rng.random((12, 4, 4))
    with pytest.raises(MetricsError):
        evaluate([a], [a, a])
    with pytest.raises(MetricsError):
        evaluate([a], [a], aggregation="median")
    with pytest.raises(MetricsError):
        evaluate([a[:3]], [a[:3]])
    with pytest.raises(MetricsError):
        mae([1.0, 2.0], [1.0])


def _golden_fixture():
    r = np.random.default_rng(42)
    preds = [np.round(r.gamma(0.6, 3.0, size=(12, 4, 4)), 2) for _ in range(2)]
    truths = [np.round(r.gamma(0.6, 3.0, size=(12, 4, 4)), 2) for _ in range(2)]
    for arr in preds + truths:
        arr[11] = 0.0
    return evaluate(preds, truths)


GOLDEN_CATEGORICAL = """threshold,variant,csi_t10,csi_t40,csi_t80,csi_t120
0.1,full,0.875000,0.700000,0.718750,NA
1,full,0.307692,0.086957,0.318182,NA
4,full,0.125000,0.000000,0.000000,NA
"""
GOLDEN_CONTINUOUS = "variant,rmse,mae\nfull,3.055243,1.860078\n"


def test_report_golden(tmp_path):
    write_report(_golden_fixture(), tmp_path)
    assert (tmp_path / "categorical.csv").read_text() == GOLDEN_CATEGORICAL
    assert (tmp_path / "continuous.csv").read_text() == GOLDEN_CONTINUOUS


def test_report_round_trip(tmp_path, rng):
    rep = _golden_fixture()
    write_report({"full": rep, "no_pwv": rep}, tmp_path)
    cat = read_categorical(tmp_path / "categorical.csv")
    assert len(cat) == 6
    for tau in THRESHOLDS:
        for j, lead in enumerate(LEAD_FRAMES):
            a, b = cat[("no_pwv", tau)][j], rep.csi[(tau, lead)]
            assert (math.isnan(a) and math.isnan(b)) or abs(a - b) < 5e-7
    rmse_, mae_ = read_continuous(tmp_path / "continuous.csv")["full"]
    assert abs(rmse_ - rep.rmse) < 5e-7 and abs(mae_ - rep.mae) < 5e-7
