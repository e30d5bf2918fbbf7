import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from manar import chm as C
from manar.model import ModelConfig, ToyModel
from manar.tensor import float64_mode

EPS = 1e-6

SQUARE = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])


def inside(y, V, eps=EPS):
    return C.chm_test(C.ChmQuery(np.asarray(y, float), np.asarray(V, float), eps)).inside


def test_vertex_is_inside():
    res = C.chm_test(C.ChmQuery(np.array([1.0, 1.0]), SQUARE, EPS))
    assert res.inside and C.verify_certificate(res.certificate, SQUARE, [1.0, 1.0], EPS)


def test_centroid_is_inside():
    assert inside([0.5, 0.5], SQUARE)


def test_far_point_is_outside():
    res = C.chm_test(C.ChmQuery(np.array([2.0, 2.0]), SQUARE, EPS))
    assert not res.inside and res.certificate is None and res.infeasibility > 0


def test_tolerance_band():
    assert inside([1.0 + 0.5 * EPS, 0.5], SQUARE)
    assert not inside([1.0 + 2 * EPS, 0.5], SQUARE)


def test_single_point_hull():
    V = np.array([[0.3, -0.2, 4.0]])
    assert inside(V[0], V)
    assert not inside(V[0] + [0, 0, 1e-3], V)


@pytest.mark.parametrize("bad", [np.nan, np.inf])
def test_non_finite_input_rejected(bad):
    with pytest.raises(ValueError):
        C.chm_test(C.ChmQuery(np.array([bad, 0.0]), SQUARE, EPS))
    V = SQUARE.copy()
    V[1, 1] = bad
    with pytest.raises(ValueError):
        C.chm_test(C.ChmQuery(np.array([0.1, 0.1]), V, EPS))


def test_shape_and_eps_errors():
    with pytest.raises(ValueError):
        C.chm_test(C.ChmQuery(np.zeros(3), SQUARE, EPS))
    with pytest.raises(ValueError):
        C.chm_test(C.ChmQuery(np.zeros(2), SQUARE, 0.0))


def test_2d_hull_oracle_agreement(rng):
    """50 random planar point sets; queries within 10 eps of the boundary are skipped."""
    agree = total = 0
    for _ in range(50):
        pts = rng.normal(size=(int(rng.integers(3, 12)), 2))
        for _ in range(10):
            y = rng.normal(size=2) * 1.5
            dist = C.hull_2d_signed_distance(y, pts)
            if not C.margin_ok(dist, EPS):
                continue
            total += 1
            agree += inside(y, pts) == (dist < 0)
    assert total > 300 and agree == total


def test_hull_2d_oracle_basics():
    hull = C.hull_2d(np.vstack([SQUARE, [[0.5, 0.5]]]))
    assert len(hull) == 4
    assert C.hull_2d_signed_distance([0.5, 0.5], SQUARE) == pytest.approx(-0.5)
    assert C.hull_2d_signed_distance([2.0, 0.5], SQUARE) == pytest.approx(1.0)


def test_agrees_with_scipy_linprog(rng):
    linprog = pytest.importorskip("scipy.optimize").linprog
    for _ in range(40):
        n, dim = int(rng.integers(1, 10)), int(rng.integers(1, 6))
        V = rng.normal(size=(n, dim))
        lam = rng.dirichlet(np.ones(n))
        y = V.T @ lam + (rng.normal(size=dim) * 0.5 if rng.random() < 0.5 else 0.0)
        # scipy: minimise 0 s.t. |V^T lam - y| <= eps, sum lam = 1, lam >= 0
        A_ub = np.vstack([V.T, -V.T])
        b_ub = np.concatenate([y + EPS, -(y - EPS)])
        ref = linprog(np.zeros(n), A_ub=A_ub, b_ub=b_ub, A_eq=np.ones((1, n)), b_eq=[1.0],
                      bounds=[(0, None)] * n, method="highs")
        ours = C.chm_test(C.ChmQuery(y, V, EPS))
        assert ours.inside == (ref.status == 0)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 12), dim=st.integers(1, 6))
def test_inside_certificates_are_sound(seed, n, dim):
    rng = np.random.default_rng(seed)
    V = rng.normal(size=(n, dim)) * rng.choice([1e-3, 1.0, 1e3])
    y = V.T @ rng.dirichlet(np.ones(n))
    res = C.chm_test(C.ChmQuery(y, V, EPS))
    assert res.inside
    assert C.verify_certificate(res.certificate, V, y, EPS)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_monotone_under_appended_rows(seed):
    rng = np.random.default_rng(seed)
    V = rng.normal(size=(5, 3))
    y = rng.normal(size=3) * 0.6
    extra = np.vstack([V, rng.normal(size=(4, 3))])
    if inside(y, V):
        assert inside(y, extra)


def test_bounding_box_separation():
    assert C.bounding_box_separation([0.5, 0.5], SQUARE) is None
    assert C.bounding_box_separation([0.5, 3.0], SQUARE) == (1, 3.0, 1.0)
    assert C.bounding_box_separation([-2.0, 0.5], SQUARE) == (0, -2.0, 0.0)


@pytest.mark.parametrize("kind,m", [("mha", 4), ("manar", 0)])
def test_convex_controls_never_leave_the_hull(kind, m):
    cfg = ModelConfig(vocab=16, seq_len=16, D=16, h=2, layers=2, kind=kind, M=16, m=m, l=4, k_top=2)
    with float64_mode():
        model = ToyModel(cfg, seed=3, dtype=np.float64)
        tokens = np.random.default_rng(3).integers(0, 16, size=(4, 16))
        reports = C.chm_layer_report(model, tokens, 100, EPS, seed=3)
    assert [r.samples for r in reports] == [100, 100]
    assert all(r.outside_count == 0 for r in reports)


def test_witness_is_verifiably_outside():
    rep = C.witness_report(EPS)
    assert not rep.inside and rep.infeasibility > 0
    coord, y_val, bound = rep.separation
    assert abs(y_val - bound) > 10 * EPS
    assert rep.outside_verified


def test_sample_clamping_warns(caplog):
    cfg = ModelConfig(vocab=8, seq_len=4, D=8, h=2, layers=1, kind="mha")
    with float64_mode():
        model = ToyModel(cfg, seed=0, dtype=np.float64)
        with caplog.at_level(logging.WARNING):
            reports = C.chm_layer_report(model, np.zeros((1, 4), dtype=int), 1000)
    assert reports[0].samples == 8
    assert "clamping" in caplog.text


def test_report_csv(tmp_path):
    path = tmp_path / "chm.csv"
    C.write_report_csv([C.LayerReport(0, 10, 0), C.LayerReport(1, 4, 1)], path)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(C.CSV_COLUMNS)
    assert lines[1:] == ["0,10,0,0.0", "1,4,1,0.25"]
