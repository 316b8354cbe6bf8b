import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from had_splat.augmentor import AugmentorConfig, ScorerTriplet, nearest_input_indices, simulate_prior
from had_splat.errors import ConfigError, ContractError, NumericalError
from had_splat.rasterizer import render
from had_splat.scene import Role
from had_splat.scorer import (DEFAULT_THRESHOLD, DEFAULT_THRESHOLD_MODE, NUM_FEATURES, ReferenceView,
                              ScorerModel, _bilinear, extract_features, fit_ridge, predict_score, raw_features,
                              score_to_mask, train_scorer)


def _linear_dataset(w, b, n_trip=4, shape=(10, 12), seed=0):
    rng = np.random.default_rng(seed)
    feats, trips = [], []
    for _ in range(n_trip):
        f = rng.uniform(size=shape + (NUM_FEATURES,))
        y = f @ w + b
        img = rng.uniform(size=shape + (3,))
        trips.append(ScorerTriplet(img, img, img, None, y))
        feats.append(f)
    return trips, feats


def test_exact_linear_dataset_recovered():
    w = np.array([0.4, -0.2, 0.1, 0.05, 0.3])
    trips, feats = _linear_dataset(w, 0.25)  # keeps every target score positive
    model = train_scorer(trips, None, None, ridge=1e-9, features=feats)
    assert np.abs(model.weights - w).max() < 1e-6
    assert model.bias == pytest.approx(0.25, abs=1e-6)
    pred = [predict_score(model, f) for f in feats]
    mse = np.mean([np.mean((p - t.gt_score) ** 2) for p, t in zip(pred, trips)])
    assert mse < 1e-10
    assert max(np.abs(p - t.gt_score).max() for p, t in zip(pred, trips)) < 1e-6


def test_constant_target_gives_bias_only():
    trips, feats = _linear_dataset(np.zeros(5), 0.37)
    model = train_scorer(trips, None, None, ridge=0.0, features=feats)
    assert np.abs(model.weights).max() < 1e-9
    assert model.bias == pytest.approx(0.37, abs=1e-9)


def test_singular_normal_matrix_raises():
    X = np.ones((50, NUM_FEATURES))
    with pytest.raises(NumericalError, match="ridge"):
        fit_ridge(X, np.zeros(50), ridge=0.0)
    w, b = fit_ridge(X, np.full(50, 0.5), ridge=1e-6)
    assert np.isfinite(w).all() and b == pytest.approx(0.5, abs=1e-3)


def test_bias_not_penalized():
    rng = np.random.default_rng(1)
    X = rng.uniform(size=(200, NUM_FEATURES))
    # heavy ridge shrinks the weights to zero but the bias still tracks the mean
    w, b = fit_ridge(X, np.full(200, 3.0), ridge=1e8)
    assert np.abs(w).max() < 1e-5 and b == pytest.approx(3.0, abs=1e-4)


def test_fit_ridge_matches_lstsq_oracle():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(300, NUM_FEATURES))
    y = rng.normal(size=300)
    lam = 0.5
    mask = np.array([True, False, True, True, False])
    A = np.hstack([X[:, mask], np.ones((300, 1))])
    # augmented least squares: append sqrt(lam) rows for the penalized weights only
    P = np.hstack([np.sqrt(lam) * np.eye(mask.sum()), np.zeros((mask.sum(), 1))])
    sol = np.linalg.lstsq(np.vstack([A, P]), np.concatenate([y, np.zeros(mask.sum())]), rcond=None)[0]
    w, b = fit_ridge(X, y, lam, mask)
    assert np.allclose(w[mask], sol[:-1], atol=1e-10) and b == pytest.approx(sol[-1], abs=1e-10)
    assert np.all(w[~mask] == 0)


def test_predict_uniform_bias():
    model = ScorerModel(np.zeros(5), 0.2)
    out = predict_score(model, np.random.default_rng(0).uniform(size=(4, 4, 5)))
    assert np.all(out == 0.2)


def test_predict_clamped_and_masked_feature_ignored():
    model = ScorerModel(np.array([1.0, -2.0, 0.0, 0.5, 7.0]), -0.1, (True, True, True, True, False))
    f = np.random.default_rng(1).uniform(size=(6, 6, 5))
    out = predict_score(model, f)
    assert out.min() >= 0
    g = f.copy()
    g[..., 4] = np.random.default_rng(2).uniform(size=(6, 6))
    assert np.array_equal(predict_score(model, g), out)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=5, max_size=5), st.integers(0, 4), st.floats(0, 0.5))
def test_predict_monotone_in_nonnegative_features(weights, k, bump):
    model = ScorerModel(np.array(weights), 0.1)
    f = np.random.default_rng(k).uniform(size=(3, 3, 5))
    g = f.copy()
    g[..., k] += bump
    if model.weights[k] >= 0:
        assert np.all(predict_score(model, g) >= predict_score(model, f))


def test_model_json_round_trip(tmp_path):
    model = ScorerModel(np.array([0.1, 0.2, 0.3, 0.4, 0.5]), 0.05, (True, False, True, True, True), 1e-3, 0.07, "abc")
    model.save(tmp_path / "m.json")
    back = ScorerModel.load(tmp_path / "m.json")
    assert np.array_equal(back.weights, model.weights) and back.to_dict() == model.to_dict()


def test_model_rejects_all_disabled():
    with pytest.raises(ConfigError):
        ScorerModel(np.zeros(5), 0.0, (False,) * 5)


def test_score_to_mask_defaults_and_examples():
    assert (DEFAULT_THRESHOLD, DEFAULT_THRESHOLD_MODE) == (0.9, "absolute")
    assert not score_to_mask(np.zeros((4, 4))).any()
    assert score_to_mask(np.ones((4, 4))).all()
    with pytest.raises(ConfigError):
        score_to_mask(np.zeros((2, 2)), 1.5, "quantile")
    with pytest.raises(ConfigError):
        score_to_mask(np.zeros((2, 2)), -0.1, "absolute")
    with pytest.raises(ConfigError):
        score_to_mask(np.zeros((2, 2)), 0.5, "relative")


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.integers(0, 100))
def test_mask_monotone_in_threshold(t1, t2, seed):
    s = np.random.default_rng(seed).uniform(size=(8, 8))
    lo, hi = sorted((t1, t2))
    assert not np.any(score_to_mask(s, hi) & ~score_to_mask(s, lo))


def test_quantile_mask_fraction():
    s = np.arange(100, dtype=float).reshape(10, 10)
    assert score_to_mask(s, 0.9, "quantile").sum() == 10


def test_bilinear_exact_on_affine_image():
    h, w = 7, 9
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    img = 0.3 * xx - 0.1 * yy + 2
    u = np.array([0.5, 3.2, 8.5, 4.75])
    v = np.array([0.5, 2.9, 6.5, 1.1])
    val, inside = _bilinear(img, u, v)
    assert np.allclose(val, 0.3 * u - 0.1 * v + 2, atol=1e-12)
    assert inside.all()
    _, inside = _bilinear(img, np.array([0.2, 9.0]), np.array([3.0, 3.0]))
    assert not inside.any()


def _refs_from_gt(gt, views, cam, k=3):
    return [ReferenceView(views.views[i], render(gt, views.views[i].camera).depth, i)
            for i in nearest_input_indices(views, cam, k)]


def test_clean_view_has_small_min_residual(blob_scene):
    gt, views = blob_scene
    cam = views.by_role(Role.TEST)[0].camera
    out = render(gt, cam)
    tol = 0.02 * views.diameter
    feats = extract_features(out.image, cam, out.depth, _refs_from_gt(gt, views, cam), out.image, tol)
    assert np.mean(feats[..., 0] < 0.02) >= 0.95
    assert np.isfinite(feats).all()
    assert feats[..., :3].min() >= 0 and feats[..., :3].max() <= 1


def test_unseen_pixels_get_neutral_value(blob_scene):
    gt, views = blob_scene
    cam = views.inputs[0].camera
    out = render(gt, cam)
    ref = _refs_from_gt(gt, views, cam, 1)
    # shift the novel camera far sideways so every reprojection leaves the reference image
    far = cam.with_pose(cam.rotation_w2c, cam.translation_w2c + np.array([50.0, 0, 0]))
    feats = extract_features(out.image, far, out.depth, ref, out.image, 0.1, neutral=0.123)
    assert np.all(feats[..., 2] == 1.0)
    assert np.all(feats[..., 0] == 0.123) and np.all(feats[..., 1] == 0.123)
    raw = raw_features(out.image, far, out.depth, ref, out.image, 0.1)
    assert np.isnan(raw[..., 0]).all()


def test_alien_patches_raise_min_residual(blob_scene):
    gt, views = blob_scene
    targets = views.by_role(Role.TEST)
    cfg = AugmentorConfig(residual_blend=0.0, color_drift_amplitude=0.0, hallucination_rate=0.2)
    tol = 0.02 * views.diameter
    for case in range(10):
        cam = targets[case % len(targets)].camera
        out = render(gt, cam)
        refs = _refs_from_gt(gt, views, cam)
        aug = simulate_prior(out.image, out.image, views.views[refs[0].index], cfg, case, refs[0].index)
        f = extract_features(aug.image, cam, out.depth, refs, out.image, tol)
        inside = aug.gt_score > 0.02
        assert inside.any()
        assert f[..., 0][inside].mean() > f[..., 0][~aug.corruption_mask].mean()


def test_feature_extraction_needs_references(blob_scene):
    gt, views = blob_scene
    cam = views.inputs[0].camera
    out = render(gt, cam)
    with pytest.raises(ContractError):
        extract_features(out.image, cam, out.depth, [], out.image, 0.1)
    with pytest.raises(ContractError):
        predict_score(ScorerModel(np.zeros(5), 0.0), np.zeros((2, 2, 4)))
