import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from csiloc.dataset import RpGrid
from csiloc.errors import (
    ConfigMismatchError,
    EmptyInputError,
    InvalidConfigError,
    LengthMismatchError,
    NoPathFoundError,
)
from csiloc.geometry import (
    Area,
    Location,
    PathParams,
    Scene,
    channel_response,
    path_params_from_geometry,
)
from csiloc.localization import (
    Prediction,
    PredictionGroup,
    classify_localize,
    evaluate,
    fuse_average,
    group_predictions,
    knn_localize,
    localize_from_likelihoods,
    regress_localize,
    remove_outliers,
    sic_localize,
)
from csiloc.neural import LayerSpec, Network

ROOM = Area.room(8, 6)
SURVEY = Area(1.6, 1.8, 6.4, 4.2)
coords = st.floats(-50, 50, allow_nan=False)
points = st.lists(st.tuples(coords, coords), min_size=1, max_size=12)


# -- KNN ----------------------------------------------------------------------

def test_knn_exact_match_k1():
    x = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    labels = np.array([[1, 1], [2, 2], [3, 3]], dtype=float)
    assert knn_localize(x, labels, [1.0, 0.0], 1).location == (2.0, 2.0)


def test_knn_k_equals_dataset_size_gives_weighted_centroid():
    x = np.random.default_rng(0).standard_normal((5, 3))
    labels = np.array([[0, 0], [0, 0], [0, 0], [4, 0], [4, 8]], dtype=float)
    loc = knn_localize(x, labels, np.zeros(3), 5).location
    assert loc == pytest.approx((1.6, 1.6))


def test_knn_midway_query():
    x = np.array([[0.0, 0.0], [2.0, 0.0]])
    labels = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert knn_localize(x, labels, [1.0, 0.0], 2).location == pytest.approx((2.0, 3.0))


def test_knn_ties_break_on_lower_index():
    x = np.array([[1.0], [-1.0], [1.0]])
    labels = np.array([[5.0, 5.0], [7.0, 7.0], [9.0, 9.0]])
    assert knn_localize(x, labels, [0.0], 1).location == (5.0, 5.0)


def test_knn_errors():
    with pytest.raises(EmptyInputError):
        knn_localize(np.zeros((0, 3)), np.zeros((0, 2)), np.zeros(3))
    with pytest.raises(InvalidConfigError):
        knn_localize(np.zeros((2, 3)), np.zeros((2, 2)), np.zeros(3), 0)


# -- classifier / regressor ---------------------------------------------------

def test_likelihood_examples():
    rp = np.array([[0.0, 0.0], [1.2, 0.0], [0.0, 2.4]])
    one_hot = np.tile([0.0, 1.0, 0.0], (4, 1))
    assert localize_from_likelihoods(one_hot, rp).location == pytest.approx((1.2, 0.0))
    assert localize_from_likelihoods(np.full((1, 3), 1 / 3), rp).location == pytest.approx((0.4, 0.8))
    assert localize_from_likelihoods([[0.5, 0.5, 0.0]], rp).location == pytest.approx((0.6, 0.0))


@settings(max_examples=100)
@given(st.integers(0, 2 ** 32 - 1))
def test_classifier_estimate_in_convex_hull(seed):
    rng = np.random.default_rng(seed)
    grid = RpGrid.regular(SURVEY, 1.2)
    a = rng.standard_normal((3, grid.n_rp)) * 5
    p = np.exp(a - a.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    pred = localize_from_likelihoods(p, grid.as_array())
    # the RP hull of a regular grid is its bounding box
    assert SURVEY.contains(pred.location, tol=1e-12)
    assert all(SURVEY.contains(w, tol=1e-12) for w in pred.window_estimates)


def _classifier(n_in, n_rp):
    return Network([LayerSpec("fc", {"in_features": n_in, "units": n_rp}),
                    LayerSpec("softmax")], (n_in,))


def test_classify_localize_with_network():
    grid = RpGrid.regular(SURVEY, 2.4)
    net = _classifier(4, grid.n_rp)
    net.layers[0].params["W"][...] = 0.0
    pred = classify_localize(net, np.ones((3, 4)), grid)
    assert pred.location == pytest.approx(tuple(grid.as_array().mean(0)))
    np.testing.assert_allclose(pred.likelihoods.sum(1), 1, atol=1e-9)
    with pytest.raises(ConfigMismatchError):
        classify_localize(_classifier(4, grid.n_rp + 1), np.ones((1, 4)), grid)


def _bias_regressor(bias):
    net = Network([LayerSpec("fc", {"in_features": 3, "units": 2}), LayerSpec("linear")], (3,))
    net.layers[0].params["W"][...] = 0.0
    net.layers[0].params["b"][...] = bias
    return net


def test_regressor_examples():
    pred = regress_localize(_bias_regressor([4.0, 3.0]), np.random.default_rng(0).random((5, 3)))
    assert pred.location == (4.0, 3.0)
    clamped = regress_localize(_bias_regressor([9.5, 3.0]), np.zeros((1, 3)), ROOM)
    assert clamped.location == (8.0, 3.0)
    net = Network([LayerSpec("fc", {"in_features": 3, "units": 2}), LayerSpec("linear")], (3,),
                  seed=1)
    w = np.array([0.2, -0.1, 0.4])
    single = regress_localize(net, w[None, :])
    assert regress_localize(net, np.tile(w, (6, 1))).location == pytest.approx(single.location,
                                                                               abs=1e-15)


# -- fusion and outliers ------------------------------------------------------

def test_fuse_examples():
    assert fuse_average([(1.5, -2.0)]) == (1.5, -2.0)
    assert fuse_average([(0, 0), (2, 2)]) == (1.0, 1.0)
    with pytest.raises(EmptyInputError):
        fuse_average([])


@given(points, st.randoms())
def test_fuse_permutation_invariant(pts, rnd):
    shuffled = list(pts)
    rnd.shuffle(shuffled)
    assert fuse_average(shuffled) == fuse_average(pts)


@given(st.tuples(coords, coords), st.integers(1, 20))
def test_fuse_idempotent_on_constant(p, n):
    assert fuse_average([p] * n) == pytest.approx(p, abs=1e-12)


def _group(pts):
    return PredictionGroup([Prediction(Location(*p), "regressor") for p in pts])


def test_outlier_nine_plus_one():
    pts = [(0.0, 0.0)] * 9 + [(100.0, 100.0)]
    kept, loc = remove_outliers(_group(pts), 2.0)
    assert kept.group_size == 9 and loc == (0.0, 0.0)
    assert math.hypot(*loc) < math.hypot(*fuse_average(pts))
    # threshold 3 equals the normalized deviation exactly: kept
    assert remove_outliers(_group(pts), 3.0)[0].group_size == 10


def test_outlier_injected_point_removed():
    rng = np.random.default_rng(0)
    pts = [tuple(p) for p in rng.normal(0, 0.1, (9, 2))] + [(5.0, 5.0)]
    kept, loc = remove_outliers(_group(pts), 2.0)
    assert [m.location for m in kept.members] == [Location(*p) for p in pts[:9]]
    assert math.hypot(*loc) < math.hypot(*fuse_average(pts))


def test_outlier_identical_points():
    kept, loc = remove_outliers(_group([(1.0, 2.0)] * 5), 2.0)
    assert kept.group_size == 5 and loc == (1.0, 2.0)


def test_single_axis_outlier_kept():
    # x deviation large, y exactly on the mean
    pts = [(0.0, -1.0), (0.0, 1.0)] * 12 + [(50.0, 0.0)]
    kept, loc = remove_outliers(_group(pts), 2.0)
    assert kept.group_size == len(pts)
    assert loc == fuse_average(pts)


def test_outlier_preconditions():
    with pytest.raises(InvalidConfigError):
        remove_outliers(_group([(0, 0)]), 2.0)
    with pytest.raises(InvalidConfigError):
        remove_outliers(_group([(0, 0), (1, 1)]), 0.0)


@settings(max_examples=200)
@given(st.lists(st.tuples(coords, coords), min_size=2, max_size=15), st.floats(1.0, 5.0))
def test_and_rule_never_empties_group(pts, th):
    kept, _ = remove_outliers(_group(pts), th)
    assert 1 <= kept.group_size <= len(pts)


def test_group_predictions():
    preds = [Prediction(Location(i, 0), "knn") for i in range(7)]
    groups = group_predictions(preds, 3)
    assert [g.group_size for g in groups] == [3, 3, 1]


# -- evaluation ---------------------------------------------------------------

def test_evaluate_examples(tmp_path):
    truth = np.zeros((3, 2))
    perfect = evaluate(truth, truth)
    assert perfect.mean_distance_error == perfect.median_distance_error == 0.0
    rep = evaluate([(3, 0), (0, 4), (3, 4)], truth)
    assert rep.mean_distance_error == pytest.approx(4.0)
    assert rep.median_distance_error == 4.0
    assert rep.cdf[-1] == (5.0, 1.0)
    rep.to_json(tmp_path / "r.json")
    summary = json.loads((tmp_path / "r.json").read_text())
    assert summary["mean_distance_error"] == pytest.approx(4.0)
    assert summary["median_distance_error"] == 4.0
    rep.to_csv(tmp_path / "e.csv")
    rows = (tmp_path / "e.csv").read_text().splitlines()
    assert rows[0] == "index,error" and [float(r.split(",")[1]) for r in rows[1:]] == [3, 4, 5]


def test_median_lower_midpoint():
    rep = evaluate([(1, 0), (2, 0), (3, 0), (4, 0)], np.zeros((4, 2)))
    assert rep.median_distance_error == 2.0


def test_evaluate_errors():
    with pytest.raises(LengthMismatchError):
        evaluate([(0, 0)], np.zeros((2, 2)))
    with pytest.raises(EmptyInputError):
        evaluate([], np.zeros((0, 2)))


@settings(max_examples=100)
@given(st.lists(st.tuples(coords, coords, coords, coords), min_size=1, max_size=20),
       st.tuples(coords, coords))
def test_evaluate_properties(rows, shift):
    arr = np.array(rows)
    pred, truth = arr[:, :2], arr[:, 2:]
    rep = evaluate(pred, truth)
    assert rep.mean_distance_error >= 0
    assert rep.median_distance_error <= rep.max_error
    fr = [f for _, f in rep.cdf]
    assert fr == sorted(fr) and fr[-1] == 1.0
    assert [e for e, _ in rep.cdf] == sorted(e for e, _ in rep.cdf)
    moved = evaluate(pred + shift, truth + shift)
    assert moved.mean_distance_error == pytest.approx(rep.mean_distance_error, abs=1e-9)


# -- SIC ----------------------------------------------------------------------

def _received(scene):
    return channel_response(scene, path_params_from_geometry(scene)).sum(axis=2)


def test_sic_single_path_fine_grid():
    scene = Scene(ap=(0.3, 0.3), target=(4.1, 2.7))
    truth = path_params_from_geometry(scene)[0]
    res = sic_localize(_received(scene), scene.ap, scene.array, scene.ofdm, tau_step=0.1e-9,
                       theta_step=math.radians(0.2), tau_max=40e-9, area=SURVEY)
    got = res.paths[0]
    assert abs(got.tau - truth.tau) <= 0.1e-9
    assert abs(math.sin(got.theta_r) - math.sin(truth.theta_r)) <= math.radians(0.2)
    assert math.dist(res.prediction.location, scene.target) <= 0.1


def test_sic_two_paths_los_dominant():
    h_nlos = 10 ** (-10 / 20)
    scene = Scene(ap=(0.3, 0.3), target=(3.5, 3.0), scatterers=((6.5, 1.0),),
                  coefficients=(1.0, h_nlos * np.exp(0.7j)))
    y = _received(scene)
    truth = path_params_from_geometry(scene)
    res = sic_localize(y, scene.ap, scene.array, scene.ofdm, tau_step=0.5e-9,
                       theta_step=math.radians(0.5), tau_max=80e-9, area=SURVEY, max_paths=2)
    assert len(res.paths) == 2
    assert abs(res.paths[0].tau - truth[0].tau) < abs(res.paths[0].tau - truth[1].tau)
    assert math.dist(res.prediction.location, scene.target) <= 0.15
    assert res.residual_powers[-1] < 1e-9 * res.input_power
    assert all(b <= a for a, b in zip(res.residual_powers, res.residual_powers[1:]))


def test_sic_no_path_in_noise_floor():
    scene = Scene(ap=(0.3, 0.3), target=(4.0, 3.0))
    with pytest.raises(NoPathFoundError):
        sic_localize(np.zeros((30, 3), complex), scene.ap, scene.array, scene.ofdm,
                     noise_floor=1.0)
    with pytest.raises(InvalidConfigError):
        sic_localize(_received(scene), scene.ap, scene.array, scene.ofdm, tau_step=0.0)
