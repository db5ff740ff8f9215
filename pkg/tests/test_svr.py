import numpy as np
import pytest

from rrde import svr
from rrde.svr import GridSearchSpec, SvrConfig, SvrModel

from oracles import svr_dual_bruteforce


def _check_invariants(model, X, C):
    assert np.all(np.abs(model.dual_coeffs) <= C + 1e-12)
    assert abs(model.dual_coeffs.sum()) <= 1e-8
    np.testing.assert_allclose(model.weights, X.T @ model.dual_coeffs, atol=1e-8, rtol=0)


@pytest.mark.parametrize("seed", range(12))
def test_fit_matches_bruteforce_oracle(seed):
    rng = np.random.default_rng(seed)
    m, d = int(rng.integers(1, 7)), int(rng.integers(1, 4))
    X = rng.standard_normal((m, d))
    y = rng.uniform(0, 5, m)
    C = float(rng.choice([0.1, 0.5, 2.0]))
    eps = float(rng.choice([0.0, 0.05, 0.13, 0.5]))
    model = svr.fit(X, y, SvrConfig(C, eps))
    best, _ = svr_dual_bruteforce(X, y, C, eps)
    K = X @ X.T
    assert svr.dual_objective(K, y, model.dual_coeffs, eps) - best <= 1e-6
    assert model.objective == pytest.approx(svr.dual_objective(K, y, model.dual_coeffs, eps), abs=1e-9)
    _check_invariants(model, X, C)
    assert model.converged


def test_oracle_self_check_two_points():
    # u = (-t, t): objective t^2/2 + 2 eps t - t, minimised at t = 1 - 2 eps
    X = np.array([[0.0], [1.0]])
    val, u = svr_dual_bruteforce(X, np.array([0.0, 1.0]), 10.0, 0.1)
    np.testing.assert_allclose(u, [-0.8, 0.8], atol=1e-12)
    assert val == pytest.approx(0.5 * 0.64 + 0.1 * 1.6 - 0.8, abs=1e-12)


def test_two_point_line():
    X = np.array([[0.0], [1.0]])
    model = svr.fit(X, np.array([0.0, 1.0]), SvrConfig(C=10.0, epsilon=0.0))
    assert model.weights[0] == pytest.approx(1.0, abs=1e-3)
    assert model.bias == pytest.approx(0.0, abs=1e-3)


def test_constant_target():
    X = np.random.default_rng(1).standard_normal((8, 3))
    model = svr.fit(X, np.full(8, 2.5), SvrConfig())
    np.testing.assert_allclose(model.weights, 0.0, atol=1e-12)
    np.testing.assert_allclose(model.predict(X), 2.5, atol=0.13)


def test_affine_target_inside_tube():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((6, 2))
    y = X @ np.array([0.3, -0.2]) + 1.0
    model = svr.fit(X, y, SvrConfig(C=10.0, epsilon=0.13))
    assert np.all(np.abs(model.predict(X) - y) <= 0.13 + 1e-6)
    best, _ = svr_dual_bruteforce(X, y, 10.0, 0.13)
    assert svr.dual_objective(X @ X.T, y, model.dual_coeffs, 0.13) - best <= 1e-6


def test_larger_problem_kkt_and_fit_quality():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((300, 10))
    w = rng.standard_normal(10)
    y = X @ w + 0.5 + rng.normal(0, 0.1, 300)
    model = svr.fit(X, y, SvrConfig(C=1.0, epsilon=0.05))
    assert model.converged and model.violation < 1e-3
    _check_invariants(model, X, 1.0)
    np.testing.assert_allclose(model.weights, w, atol=0.05)
    assert model.bias == pytest.approx(0.5, abs=0.05)


def test_nonconvergence_is_flagged():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((60, 4))
    y = rng.uniform(0, 5, 60)
    model = svr.fit(X, y, SvrConfig(C=5.0, epsilon=0.01), max_iter=3)
    assert not model.converged
    assert model.violation >= 1e-3
    assert model.iterations == 3


def test_fit_rejects_bad_input():
    with pytest.raises(ValueError):
        svr.fit(np.array([[np.nan]]), np.array([1.0]))
    with pytest.raises(ValueError):
        svr.fit(np.zeros((3, 2)), np.zeros(2))
    with pytest.raises(ValueError):
        svr.fit(np.zeros((0, 2)), np.zeros(0))


@pytest.mark.parametrize("kw", [{"C": 0}, {"C": -1}, {"epsilon": -0.1}, {"kernel": "rbf"}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SvrConfig(**kw)


def test_predict_examples():
    m = SvrModel(np.zeros(3), 3.0, np.zeros(2))
    np.testing.assert_array_equal(m.predict(np.random.default_rng(0).standard_normal((4, 3))), 3.0)
    rng = np.random.default_rng(5)
    X = rng.standard_normal((10, 4))
    y = rng.standard_normal(10)
    model = svr.fit(X, y, SvrConfig(C=1.0, epsilon=0.1))
    a, b = rng.standard_normal((2, 4))
    assert model.predict(a + b)[0] == pytest.approx(model.predict(a)[0] + model.predict(b)[0] - model.bias,
                                                    abs=1e-12)
    Q = rng.standard_normal((7, 4))
    dual_form = (Q @ X.T) @ model.dual_coeffs + model.bias
    np.testing.assert_allclose(model.predict(Q), dual_form, atol=1e-8)
    with pytest.raises(ValueError):
        model.predict(np.zeros((2, 3)))


def test_model_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    X, y = rng.standard_normal((12, 3)), rng.standard_normal(12)
    model = svr.fit(X, y, SvrConfig(C=0.25, epsilon=0.05))
    model.save(tmp_path / "s.ckpt")
    back = SvrModel.load(tmp_path / "s.ckpt")
    assert back.predict(X).tobytes() == model.predict(X).tobytes()
    assert back.config == model.config
    assert back.dual_coeffs.tobytes() == model.dual_coeffs.tobytes()
    assert (back.converged, back.iterations) == (model.converged, model.iterations)


# ---------------------------------------------------------------- grid search

def _affine(m=40, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((m, 3))
    return X, X @ np.array([0.5, -0.4, 0.2]) + 2.0


def test_grid_single_cell():
    X, y = _affine()
    res = svr.grid_search_cv(X, y, GridSearchSpec((0.7,), (0.02,), folds=4))
    assert res.best == SvrConfig(0.7, 0.02)
    assert len(res.rows) == 4


def test_grid_duplicates_identical_and_tie_break():
    X, y = _affine()
    res = svr.grid_search_cv(X, y, GridSearchSpec((1.0, 1.0), (0.1, 0.1), folds=3))
    scores = [r for *_, r in res.rows]
    assert scores[:3] == scores[3:6] == scores[6:9] == scores[9:]
    # a flat tube wide enough to hold every target ties across C; the smaller C wins
    Xc = np.random.default_rng(1).standard_normal((20, 2))
    res = svr.grid_search_cv(Xc, np.full(20, 1.0), GridSearchSpec((2.0, 0.5, 1.0), (0.3, 0.2), folds=4))
    assert res.best == SvrConfig(0.5, 0.2)


def test_grid_argmin_property_and_csv(tmp_path):
    X, y = _affine(60, 3)
    spec = GridSearchSpec(folds=5, seed=2)
    res = svr.grid_search_cv(X, y, spec)
    means = res.cell_means()
    assert len(means) == len(spec.C_grid) * len(spec.epsilon_grid)
    assert all(res.best_rmse <= v for v in means.values())
    assert means[(res.best.C, res.best.epsilon)] == res.best_rmse
    assert svr.grid_search_cv(X, y, spec).rows == res.rows
    path = tmp_path / "cv.csv"
    res.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "C,epsilon,fold,rmse"
    assert len(lines) == 1 + len(res.rows)


def test_grid_failed_cells_excluded(monkeypatch):
    X, y = _affine(30)
    real_fit = svr.fit

    def flaky(X, y, cfg, *a, **k):
        if cfg.C == 0.1:
            raise np.linalg.LinAlgError("boom")
        return real_fit(X, y, cfg, *a, **k)

    monkeypatch.setattr(svr, "fit", flaky)
    res = svr.grid_search_cv(X, y, GridSearchSpec((0.1, 1.0), (0.05,), folds=3))
    assert res.failed == [(0.1, 0.05)]
    assert res.best.C == 1.0
    assert all(np.isnan(r) for C, _, _, r in res.rows if C == 0.1)


def test_grid_errors():
    with pytest.raises(ValueError):
        GridSearchSpec(folds=1)
    with pytest.raises(ValueError):
        GridSearchSpec(C_grid=())
    with pytest.raises(ValueError):
        svr.grid_search_cv(np.zeros((3, 1)), np.zeros(3), GridSearchSpec(folds=5))


def test_fold_assignment_balanced_and_seeded():
    a = svr.fold_assignment(23, 5, 0)
    assert sorted(np.bincount(a)) == [4, 4, 5, 5, 5]
    assert np.array_equal(a, svr.fold_assignment(23, 5, 0))
    assert not np.array_equal(a, svr.fold_assignment(23, 5, 1))
