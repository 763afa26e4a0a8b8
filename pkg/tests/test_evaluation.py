import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from venibot.errors import DataError, ParameterError
from venibot.evaluation import (MISS_PENALTY, BenchmarkConfig, Fold, FoldSplit, MetricsReport,
                                angle_error, make_folds, mean_angle_error, run_benchmark)
from venibot.metrics import axis_angle_difference, dsc, wrap_axis_angle
from venibot.synth import TargetRecord, VeinTreeSpec, generate_corpus


# -- dsc ---------------------------------------------------------------------------

def test_dsc_identical_and_disjoint():
    m = np.zeros((10, 10), bool)
    m[2:5, 2:5] = True
    assert dsc(m, m) == 1.0
    assert dsc(m, np.roll(m, 5, axis=1)) == 0.0


def test_dsc_half_overlap():
    a = np.zeros((20, 20), bool)
    b = np.zeros((20, 20), bool)
    a[0:10, 0:10] = True        # 100 px
    b[5:15, 0:10] = True        # 100 px, 50 shared
    assert dsc(a, b) == pytest.approx(0.5)


def test_dsc_both_empty():
    z = np.zeros((4, 4), bool)
    assert dsc(z, z) == 1.0


def test_dsc_shape_mismatch():
    with pytest.raises(ParameterError):
        dsc(np.zeros((3, 3), bool), np.zeros((3, 4), bool))


@settings(max_examples=50, deadline=None)
@given(arrays(bool, (8, 8)), arrays(bool, (8, 8)))
def test_dsc_symmetric_and_bounded(a, b):
    assert dsc(a, b) == dsc(b, a)
    assert 0.0 <= dsc(a, b) <= 1.0


# -- angles ------------------------------------------------------------------------

@pytest.mark.parametrize("a,b,d", [(89, -89, 2), (0, 90, 90), (30, 30, 0), (-45, 45, 90),
                                   (10, -170, 0)])
def test_axis_difference(a, b, d):
    assert axis_angle_difference(a, b) == pytest.approx(d)


@settings(max_examples=100, deadline=None)
@given(st.floats(-1e4, 1e4, allow_nan=False))
def test_wrap_range(phi):
    w = wrap_axis_angle(phi)
    assert -90 < w <= 90
    assert axis_angle_difference(w, phi) == pytest.approx(0.0, abs=1e-6)


def _two_bars():
    m = np.zeros((40, 60), bool)
    m[5:10, 5:50] = True
    m[25:30, 5:50] = True
    return m


class _P:
    def __init__(self, component, phi):
        self.component, self.phi = component, phi


def test_angle_error_match_and_miss():
    gt_mask = _two_bars()
    gt = [TargetRecord(27, 7, 89.0, 45, component=1), TargetRecord(27, 27, 10.0, 45, component=2)]
    pred_mask = np.zeros_like(gt_mask)
    pred_mask[5:10, 20:40] = True                   # only covers the first bar
    errs = angle_error([_P(1, -89.0)], gt, pred_mask, gt_mask)
    assert errs == [pytest.approx(2.0), MISS_PENALTY]


def test_angle_error_empty_prediction_is_full_penalty():
    gt = [TargetRecord(27, 7, 0.0, 45, component=1)]
    errs = angle_error([], gt, np.zeros((40, 60), bool), _two_bars())
    assert errs == [90.0]


def test_mean_angle_error_warns_without_targets():
    with pytest.warns(RuntimeWarning):
        assert np.isnan(mean_angle_error([]))


# -- folds -------------------------------------------------------------------------

def _vols(n):
    return [f"v{i:03d}" for i in range(1, n + 1)]


def test_thirty_volunteers_six_per_fold():
    split = make_folds(_vols(30), seed=0)
    assert [len(f.test) for f in split.folds] == [6] * 5
    assert sorted(v for f in split.folds for v in f.test) == _vols(30)
    for f in split.folds:
        assert len(f.val) == 6 and len(f.train) == 18


def test_five_volunteers_one_each():
    split = make_folds(_vols(5))
    assert all(len(f.test) == 1 and len(f.val) == 1 and len(f.train) == 3 for f in split.folds)


def test_too_few_volunteers():
    with pytest.raises(ParameterError):
        make_folds(_vols(4))


def test_fold_seed_determinism():
    a, b = make_folds(_vols(30), seed=3), make_folds(_vols(30), seed=3)
    assert a.groups == b.groups
    assert make_folds(_vols(30), seed=4).groups != a.groups


@settings(max_examples=30, deadline=None)
@given(st.integers(5, 40), st.integers(0, 1000))
def test_folds_partition_property(n, seed):
    split = make_folds(_vols(n), seed=seed)
    tests = [v for f in split.folds for v in f.test]
    assert sorted(tests) == _vols(n)
    for f in split.folds:
        assert sorted(f.train + f.val + f.test) == _vols(n)
        assert not (set(f.train) & set(f.test)) and not (set(f.val) & set(f.test))


def test_leakage_detected():
    bad = FoldSplit(0, [], [Fold(0, ["v001", "v002"], ["v003"], ["v002"])])
    with pytest.raises(DataError):
        bad.check()


# -- reports -----------------------------------------------------------------------

def test_report_cells_and_pooled_average():
    r = MetricsReport(n_folds=2)
    r.add("dsc", "X", 0, [1.0, 0.5])
    r.add("dsc", "X", 1, [0.0])
    (row,) = r.rows("dsc")
    assert row[0] == "X"
    assert row[1] == "75.00±25.00"
    assert row[2] == "0.00±0.00"
    pooled = np.array([100.0, 50.0, 0.0])
    assert row[3] == f"{pooled.mean():.2f}±{pooled.std():.2f}"


def test_report_missing_fold_is_na():
    r = MetricsReport(n_folds=2)
    r.add("angle", "X", 0, [3.0])
    assert r.rows("angle")[0][2] == "n/a"


def test_report_text_layout():
    r = MetricsReport(n_folds=5)
    for i in range(5):
        r.add("dsc", "DIDO", i, [0.8])
        r.add("angle", "DIDO", i, [12.0])
    text = r.to_text()
    assert "Fold 0" in text and "Average" in text
    assert "80.00±0.00" in text and "12.00±0.00" in text
    csv_lines = r.to_csv().splitlines()
    assert csv_lines[0].split(",")[:3] == ["table", "method", "Fold 0"]
    assert len(csv_lines) == 3


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    generate_corpus(VeinTreeSpec(), 5, 2, out, master_seed=1)
    return out / "manifest.json"


def test_oracle_benchmark_is_perfect_and_reproducible(small_corpus, tmp_path):
    texts = []
    for k in range(2):
        r = run_benchmark(small_corpus, ["oracle"], BenchmarkConfig(fold_seed=2))
        for row in r.rows("dsc"):
            assert all(c == "100.00±0.00" for c in row[1:])
        for row in r.rows("angle"):
            assert all(c in ("0.00±0.00", "n/a") for c in row[1:])
        csv_path, _ = r.write(tmp_path / str(k))
        texts.append(csv_path.read_bytes())
    assert texts[0] == texts[1]
