import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from xmfnet.autodiff import Tensor, check_gradients
from xmfnet.errors import ConfigError, SizeError
from xmfnet.geometry import chamfer_numpy
from xmfnet.losses import (EvalMetrics, LossConfig, chamfer_l1, chamfer_weighted, dcd, eval_metrics, fscore,
                           write_metrics_csv)

cloud = arrays(np.float64, st.tuples(st.integers(1, 12), st.just(3)), elements=st.floats(-5, 5, width=32))
O = np.zeros((1, 3))
E = np.array([[1.0, 0, 0]])


def brute_chamfer_terms(Y, Yh):
    fwd = np.array([min(np.linalg.norm(y - yh) for yh in Yh) for y in Y])
    bwd = np.array([min(np.linalg.norm(yh - y) for y in Y) for yh in Yh])
    return fwd, bwd


# -- chamfer ------------------------------------------------------------------

def test_chamfer_identical_zero():
    Y = np.random.default_rng(0).normal(size=(10, 3))
    assert chamfer_l1(Y, Y).item() == 0.0


def test_chamfer_single_pair():
    assert chamfer_l1(O, E).item() == pytest.approx(1.0)


def test_chamfer_matches_brute_force():
    rng = np.random.default_rng(1)
    Y, Yh = rng.normal(size=(15, 3)), rng.normal(size=(9, 3))
    fwd, bwd = brute_chamfer_terms(Y, Yh)
    assert chamfer_l1(Y, Yh).item() == pytest.approx(0.5 * fwd.mean() + 0.5 * bwd.mean(), rel=1e-12)
    assert chamfer_numpy(Y, Yh) == pytest.approx(chamfer_l1(Y, Yh).item(), rel=1e-12)


def test_chamfer_empty():
    with pytest.raises(SizeError):
        chamfer_l1(np.zeros((0, 3)), E)


@settings(max_examples=40, deadline=None)
@given(cloud, cloud)
def test_chamfer_symmetric_nonnegative(a, b):
    if len(a) == len(b):
        assert chamfer_l1(a, b).item() == pytest.approx(chamfer_l1(b, a).item(), abs=1e-12)
    assert chamfer_l1(a, b).item() >= 0


@settings(max_examples=30, deadline=None)
@given(cloud, cloud, st.randoms(use_true_random=False))
def test_losses_permutation_invariant(a, b, r):
    pa = np.array(r.sample(range(len(a)), len(a)))
    pb = np.array(r.sample(range(len(b)), len(b)))
    for fn in (chamfer_l1, lambda x, y: chamfer_weighted(x, y, 0.3), lambda x, y: dcd(x, y, 5.0)):
        assert fn(a[pa], b[pb]).item() == pytest.approx(fn(a, b).item(), abs=1e-12)


def test_chamfer_zero_iff_mutual_subsets():
    a = np.array([[0.0, 0, 0], [1, 0, 0]])
    b = np.array([[1.0, 0, 0], [0, 0, 0], [0, 0, 0]])
    assert chamfer_l1(a, b).item() == 0.0
    assert chamfer_l1(a, b[:1]).item() > 0


# -- weighted chamfer ---------------------------------------------------------

def test_weighted_half_is_half_of_plain():
    rng = np.random.default_rng(2)
    Y, Yh = rng.normal(size=(12, 3)), rng.normal(size=(12, 3))
    assert chamfer_weighted(Y, Yh, 0.5).item() == pytest.approx(0.5 * chamfer_l1(Y, Yh).item(), rel=1e-12)


def test_weighted_beta_one_backward_only():
    rng = np.random.default_rng(3)
    Y, Yh = rng.normal(size=(12, 3)), rng.normal(size=(7, 3))
    _, bwd = brute_chamfer_terms(Y, Yh)
    assert chamfer_weighted(Y, Yh, 1.0).item() == pytest.approx(0.5 * bwd.mean(), rel=1e-12)


def test_weighted_hand_value():
    assert chamfer_weighted(O, E, 0.25).item() == pytest.approx(0.5)


def test_weighted_bad_beta():
    with pytest.raises(ConfigError):
        chamfer_weighted(O, E, 1.5)


# -- dcd ----------------------------------------------------------------------

@pytest.mark.parametrize("alpha", [0.1, 40.0, 1e4])
def test_dcd_identical(alpha):
    Y = np.random.default_rng(4).normal(size=(16, 3))
    assert dcd(Y, Y, alpha).item() == pytest.approx(1 - 1 / 16, abs=1e-15)


def test_dcd_disjoint_large_alpha():
    rng = np.random.default_rng(5)
    Y = rng.normal(size=(8, 3))
    assert dcd(Y, Y + 10.0, 1e3).item() == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("d,alpha", [(0.3, 2.0), (0.05, 40.0)])
def test_dcd_single_point(d, alpha):
    assert dcd(O, d * E, alpha).item() == pytest.approx(1 - np.exp(-alpha * d), rel=1e-12)


def test_dcd_bad_alpha():
    with pytest.raises(ConfigError):
        dcd(O, E, 0.0)


@settings(max_examples=30, deadline=None)
@given(cloud, cloud)
def test_dcd_bounds(a, b):
    v = dcd(a, b, 40.0).item()
    assert 1 - 1 / min(len(a), len(b)) - 1e-12 <= v <= 1.0


# -- gradients ----------------------------------------------------------------

def well_separated(rng, n, m):
    Y = rng.normal(size=(n, 3))
    Yh = Tensor(rng.normal(size=(m, 3)), requires_grad=True)
    return Y, Yh


@pytest.mark.parametrize("name", ["chamfer_l1", "chamfer_weighted", "dcd"])
def test_loss_gradients_fd(name):
    fns = {"chamfer_l1": chamfer_l1, "chamfer_weighted": lambda y, yh: chamfer_weighted(y, yh, 0.75),
           "dcd": lambda y, yh: dcd(y, yh, 2.0)}
    rng = np.random.default_rng(6)
    for _ in range(5):
        Y, Yh = well_separated(rng, 20, 20)
        assert check_gradients(lambda: fns[name](Y, Yh), [Yh]) <= 1e-4


# -- fscore & metrics ---------------------------------------------------------

def test_fscore_identical():
    Y = np.random.default_rng(7).normal(size=(10, 3))
    assert fscore(Y, Y) == 1.0


def test_fscore_disjoint():
    assert fscore(O, E, 0.5) == 0.0


def test_fscore_half_precision():
    Y = np.array([[0.0, 0, 0], [1, 0, 0]])
    Yh = np.array([[0.0, 0, 0], [1, 0, 0], [5, 0, 0], [6, 0, 0]])
    assert fscore(Y, Yh, 0.1) == pytest.approx(2 / 3)


def test_fscore_threshold_inclusive():
    assert fscore(O, np.array([[0.5, 0, 0]]), 0.5) == 1.0


def test_eval_metrics_identical():
    Y = np.random.default_rng(8).normal(size=(10, 3))
    m = eval_metrics(Y, Y)
    assert m.cd == 0.0 and m.fscore == 1.0 and m.cd_e3 == 0.0


def test_eval_metrics_scale_invariant():
    rng = np.random.default_rng(9)
    Y, Yh = rng.normal(size=(20, 3)), rng.normal(size=(20, 3)) * 1.1
    a = eval_metrics(Y, Yh, 0.2)
    b = eval_metrics(3.0 * Y, 3.0 * Yh, 0.2)
    assert a.cd == pytest.approx(b.cd, rel=1e-12)
    assert a.fscore == b.fscore
    assert a.cd_e3 == pytest.approx(1e3 * a.cd)


def test_loss_config_validation():
    assert LossConfig().lam == 0.15
    for bad in (dict(beta=-0.1), dict(alpha=0), dict(lam=-1), dict(fscore_threshold=0)):
        with pytest.raises(ConfigError):
            LossConfig(**bad)


def test_metrics_csv(tmp_path):
    path = tmp_path / "m.csv"
    write_metrics_csv(path, [("a", EvalMetrics(1.5e-3, 0.25)), ("b", EvalMetrics(2e-3, 1.0))])
    with path.open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["sample_id", "cd_e3", "fscore"]
    assert rows[1][0] == "a" and float(rows[1][1]) == 1.5
