import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from iosda.datahub import OPEN
from iosda.evalkit import (MetricRecord, format_table, forgetting, os_scores, read_metrics_csv,
                           summarize, write_forgetting_csv, write_metrics_csv)


def test_all_correct():
    truth = [0, 1, OPEN, 1, 0]
    s = os_scores(truth, truth, 2)
    assert s.os == 1.0 and s.os_star == 1.0


def test_hand_computed_fixture():
    # class 0: 2/2, class 1: 1/2, open: 4/5
    truth = [0, 0, 1, 1, OPEN, OPEN, OPEN, OPEN, OPEN]
    pred = [0, 0, 1, 0, OPEN, OPEN, OPEN, OPEN, 1]
    s = os_scores(truth, pred, 2)
    assert s.per_class == (1.0, 0.5, 0.8)
    assert s.os_star == 0.75
    assert s.os == pytest.approx(2.3 / 3, abs=1e-15)


def test_missing_class_is_flagged_and_excluded():
    s = os_scores([0, 0, OPEN], [0, 1, OPEN], 2)
    assert s.missing == (1,)
    assert math.isnan(s.per_class[1])
    assert s.os_star == 0.5
    assert s.os == pytest.approx(0.75)


def test_os_identity_on_random_confusions():
    rng = np.random.default_rng(0)
    for _ in range(100):
        k = int(rng.integers(1, 8))
        n = int(rng.integers(k + 1, 200))
        truth = np.concatenate([np.arange(k + 1), rng.integers(0, k + 1, size=n)])
        pred = rng.integers(0, k + 1, size=truth.size)
        truth = np.where(truth == k, OPEN, truth)
        pred = np.where(pred == k, OPEN, pred)
        s = os_scores(truth, pred, k)
        assert s.os == pytest.approx((k * s.os_star + s.per_class[k]) / (k + 1), abs=1e-12)


@given(st.lists(st.tuples(st.integers(-1, 3), st.integers(-1, 3)), min_size=1, max_size=60), st.randoms())
def test_permutation_invariance(pairs, rnd):
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    a = os_scores([t for t, _ in pairs], [p for _, p in pairs], 3)
    b = os_scores([t for t, _ in shuffled], [p for _, p in shuffled], 3)
    assert a.per_class == b.per_class or all(
        (math.isnan(x) and math.isnan(y)) or x == y for x, y in zip(a.per_class, b.per_class))


@pytest.mark.parametrize("seq, expect", [([0.8, 0.8], 0.0), ([0.8, 0.7], -0.1), ([0.9, 0.8, 0.85], -0.025)])
def test_forgetting_examples(seq, expect):
    assert forgetting(seq) == pytest.approx(expect, abs=1e-12)


def test_forgetting_needs_two():
    with pytest.raises(ValueError):
        forgetting([0.5])


@given(st.lists(st.floats(0, 1), min_size=2, max_size=12))
def test_forgetting_telescopes_and_sign(seq):
    f = forgetting(seq)
    assert f == pytest.approx((seq[-1] - seq[0]) / (len(seq) - 1), abs=1e-12)
    if seq[-1] - seq[0] > 1e-9:
        assert f > 0
    if seq[-1] - seq[0] < -1e-9:
        assert f < 0


def _fixture_records():
    return [
        MetricRecord(2, 2, 0.9, 0.8, (0.8, 0.8, 1.0)),
        MetricRecord(3, 2, 0.8, 0.75, (0.7, 0.8, 0.9)),
        MetricRecord(3, 3, 0.6, 0.5, (0.5, 0.5, 0.8)),
        MetricRecord(4, 2, 0.85, 0.7, (0.6, 0.8, 1.0)),
        MetricRecord(4, 3, 0.7, 0.6, (0.6, 0.6, 0.9)),
    ]


def test_summarize_golden(tmp_path):
    rep = summarize(_fixture_records())
    d2, d3 = rep.domains
    assert d2.domain_id == 2 and d2.n_timestamps == 3
    assert d2.a_os == pytest.approx((0.9 + 0.8 + 0.85) / 3)
    assert d2.f_os == pytest.approx(-0.025)
    assert d2.f_os_star == pytest.approx(-0.05)
    assert d3.a_os == pytest.approx(0.65) and d3.f_os == pytest.approx(0.1)
    assert rep.mean_f_os == pytest.approx(0.0375)
    write_forgetting_csv(rep, tmp_path / "f.csv")
    got = (tmp_path / "f.csv").read_text()
    expect = (
        "domain,A_OS,F_OS,A_OSstar,F_OSstar\n"
        f"2,{(0.9 + 0.8 + 0.85) / 3!r},{((0.8 - 0.9) + (0.85 - 0.8)) / 2!r},{(0.8 + 0.75 + 0.7) / 3!r},{((0.75 - 0.8) + (0.7 - 0.75)) / 2!r}\n"
        f"3,{(0.6 + 0.7) / 2!r},{0.7 - 0.6!r},{(0.5 + 0.6) / 2!r},{0.6 - 0.5!r}\n"
    )
    assert got.startswith(expect)
    assert got.splitlines()[-1].startswith("AVG,")
    table = format_table(rep)
    assert "D2" in table and "AVG" in table and "-2.50" in table


def test_single_timestamp_domain_has_no_forgetting():
    rep = summarize([MetricRecord(2, 2, 0.5, 0.5, (0.5, 0.5))])
    assert math.isnan(rep.domains[0].f_os)
    assert math.isnan(rep.mean_f_os)


def test_metrics_csv_roundtrip(tmp_path):
    recs = _fixture_records() + [MetricRecord(5, 4, 0.5, 0.25, (0.25, math.nan, 1.0))]
    write_metrics_csv(recs, tmp_path / "m.csv")
    text = (tmp_path / "m.csv").read_text()
    assert text.splitlines()[0] == "timestamp,domain,OS,OS_star,acc_c0,acc_c1,acc_c2"
    back = read_metrics_csv(tmp_path / "m.csv")
    assert back[:5] == recs[:5]
    assert math.isnan(back[5].per_class[1])
