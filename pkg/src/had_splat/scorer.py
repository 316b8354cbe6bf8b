"""Hallucination scoring from multi-view reprojection consistency.

Each pixel of an augmented novel view is lifted with the splat model's depth,
reprojected into the nearest input views and compared photometrically. The
resulting per-pixel features feed a ridge regressor trained (L2) against the
ground-truth MAE score maps.
"""
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .augmentor import nearest_input_indices
from .errors import ConfigError, ContractError, NumericalError
from .rasterizer import render

FEATURE_NAMES = ("min_residual", "median_residual", "occlusion_fraction", "image_gradient", "splat_residual")
NUM_FEATURES = len(FEATURE_NAMES)
NUM_REFERENCE_VIEWS = 3
DEPTH_TOLERANCE_FRACTION = 0.02
DEFAULT_RIDGE = 1e-6
DEFAULT_THRESHOLD = 0.9
DEFAULT_THRESHOLD_MODE = "absolute"
_NO_SURFACE = 1e12


@dataclass
class ScorerModel:
    weights: np.ndarray
    bias: float
    feature_mask: tuple = (True,) * NUM_FEATURES
    ridge: float = DEFAULT_RIDGE
    neutral: float = 0.0  # residual assigned to pixels no reference view can see
    dataset_hash: str = ""

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(NUM_FEATURES)
        self.feature_mask = tuple(bool(b) for b in self.feature_mask)
        if len(self.feature_mask) != NUM_FEATURES or not any(self.feature_mask):
            raise ConfigError("feature_mask needs 5 entries with at least one enabled")
        if not np.all(np.isfinite(self.weights)) or not np.isfinite(self.bias):
            raise NumericalError("scorer weights must be finite")

    def to_dict(self):
        return {"weights": [float(w) for w in self.weights], "bias": float(self.bias),
                "feature_mask": list(self.feature_mask), "ridge": float(self.ridge),
                "neutral": float(self.neutral), "dataset_hash": self.dataset_hash}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["weights"]), float(d["bias"]), tuple(d["feature_mask"]),
                   float(d.get("ridge", DEFAULT_RIDGE)), float(d.get("neutral", 0.0)), d.get("dataset_hash", ""))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class ReferenceView:
    """An input view paired with the splat model's depth rendered at its pose."""

    view: object
    depth: np.ndarray
    index: int = -1


def _bilinear(img, u, v):
    """Sample img (H, W[, C]) at continuous pixel coordinates (u right, v down, centres at +0.5).

    Returns (values, inside) where inside marks samples whose 2x2 support lies in the image.
    """
    h, w = img.shape[:2]
    x = u - 0.5
    y = v - 0.5
    inside = (x >= 0) & (y >= 0) & (x <= w - 1) & (y <= h - 1)
    xc = np.clip(x, 0, w - 1)
    yc = np.clip(y, 0, h - 1)
    x0 = np.minimum(np.floor(xc).astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(np.floor(yc).astype(np.int64), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0
    if img.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    val = ((1 - fx) * (1 - fy) * img[y0, x0] + fx * (1 - fy) * img[y0, x1]
           + (1 - fx) * fy * img[y1, x0] + fx * fy * img[y1, x1])
    return val, inside


def _backproject(cam, depth, fallback_depth):
    h, w = depth.shape
    v, u = np.mgrid[0:h, 0:w] + 0.5
    d = np.where(depth > 0, depth, fallback_depth)
    pts_cam = np.stack([(u - cam.cx) / cam.fx * d, (v - cam.cy) / cam.fy * d, d], axis=-1)
    return (pts_cam - cam.translation_w2c) @ cam.rotation_w2c


def _image_gradient(img):
    g = img.mean(axis=2)
    gy, gx = np.gradient(g)
    return np.clip(np.sqrt(gx**2 + gy**2), 0.0, 1.0)


def raw_features(aug, novel_cam, novel_depth, refs, splat_render, depth_tolerance, fallback_depth=None):
    """Features with NaN in the residual channels of pixels no reference can see."""
    if not refs:
        raise ContractError("feature extraction needs at least one reference input view")
    aug = np.asarray(aug, dtype=np.float64)
    h, w = aug.shape[:2]
    if fallback_depth is None:
        fallback_depth = float(np.linalg.norm(novel_cam.center))
    pts = _backproject(novel_cam, np.asarray(novel_depth), fallback_depth)

    residuals = np.full((len(refs), h, w), np.nan)
    for k, ref in enumerate(refs):
        cam = ref.view.camera
        pc = pts @ cam.rotation_w2c.T + cam.translation_w2c
        z = pc[..., 2]
        front = z > 1e-6
        zs = np.where(front, z, 1.0)
        u = cam.fx * pc[..., 0] / zs + cam.cx
        v = cam.fy * pc[..., 1] / zs + cam.cy
        color, inside = _bilinear(ref.view.image, u, v)
        # empty reference pixels occlude nothing
        ref_depth, _ = _bilinear(np.where(ref.depth > 0, ref.depth, _NO_SURFACE), u, v)
        visible = front & inside & ~(z > ref_depth + depth_tolerance)
        res = np.abs(aug - color).mean(axis=2)
        residuals[k] = np.where(visible, res, np.nan)

    seen = ~np.isnan(residuals)
    n_seen = seen.sum(axis=0)
    feats = np.empty((h, w, NUM_FEATURES))
    with np.errstate(all="ignore"):
        feats[..., 0] = np.where(n_seen > 0, np.nanmin(np.where(seen, residuals, np.inf), axis=0), np.nan)
        filled = np.where(seen, residuals, np.nan)
        med = np.full((h, w), np.nan)
        if n_seen.any():
            med[n_seen > 0] = np.nanmedian(filled[:, n_seen > 0], axis=0)
        feats[..., 1] = med
    feats[..., 2] = 1.0 - n_seen / len(refs)
    feats[..., 3] = _image_gradient(aug)
    feats[..., 4] = np.abs(aug - np.asarray(splat_render, dtype=np.float64)).mean(axis=2)
    return feats


def fill_neutral(feats, neutral):
    out = feats.copy()
    for c in (0, 1):
        ch = out[..., c]
        ch[np.isnan(ch)] = neutral
    return out


def extract_features(aug, novel_cam, novel_depth, refs, splat_render, depth_tolerance, neutral=None,
                     fallback_depth=None):
    """(H, W, 5) consistency features for an augmented view.

    Pixels that no reference view observes get ``neutral`` in both residual
    channels (the median observed residual of this view when ``neutral`` is None).
    """
    feats = raw_features(aug, novel_cam, novel_depth, refs, splat_render, depth_tolerance, fallback_depth)
    if neutral is None:
        seen = feats[..., 0][~np.isnan(feats[..., 0])]
        neutral = float(np.median(seen)) if seen.size else 0.0
    return fill_neutral(feats, neutral)


def reference_views(views, trained_set, cam, k=NUM_REFERENCE_VIEWS, depth_cache=None, cutoff=None):
    """The k input views nearest to ``cam``, each with the splat model's depth at its pose."""
    refs = []
    for idx in nearest_input_indices(views, cam, k):
        if depth_cache is not None and idx in depth_cache:
            depth = depth_cache[idx]
        else:
            view_cam = views.views[idx].camera
            out = render(trained_set, view_cam) if cutoff is None else render(trained_set, view_cam, cutoff)
            depth = out.depth
            if depth_cache is not None:
                depth_cache[idx] = depth
        refs.append(ReferenceView(views.views[idx], depth, idx))
    return refs


def triplet_raw_features(triplets, views, trained_set, k=NUM_REFERENCE_VIEWS):
    """Raw (NaN-marked) features for every triplet, rendered against ``trained_set``."""
    cache = {}
    tol = DEPTH_TOLERANCE_FRACTION * views.diameter
    out = []
    for t in triplets:
        refs = reference_views(views, trained_set, t.camera, k, cache)
        depth = render(trained_set, t.camera).depth
        out.append(raw_features(t.augmented, t.camera, depth, refs, t.splat_render, tol))
    return out


def fit_ridge(X, y, ridge=DEFAULT_RIDGE, feature_mask=(True,) * NUM_FEATURES):
    """Closed-form ridge regression y ~ X[:, mask] w + b; the bias is not penalized.

    Returns (weights over all 5 features with zeros for disabled ones, bias).
    """
    mask = np.asarray(feature_mask, dtype=bool)
    if not mask.any():
        raise ConfigError("at least one feature must be enabled")
    if ridge < 0:
        raise ConfigError("ridge must be >= 0")
    Xs = X[:, mask]
    n, d = Xs.shape
    A = np.hstack([Xs, np.ones((n, 1))])
    G = A.T @ A
    reg = np.full(d + 1, float(ridge))
    reg[-1] = 0.0
    G[np.diag_indices(d + 1)] += reg
    cond = np.linalg.cond(G)
    if not np.isfinite(cond) or cond > 1e14:
        raise NumericalError(f"normal matrix is singular (condition number {cond:.3g}); use ridge > 0")
    sol = np.linalg.solve(G, A.T @ y)
    w = np.zeros(NUM_FEATURES)
    w[mask] = sol[:d]
    return w, float(sol[d])


def _dataset_hash(triplets):
    h = hashlib.sha256()
    for t in triplets:
        h.update(np.ascontiguousarray(t.augmented).tobytes())
        h.update(np.ascontiguousarray(t.gt_score).tobytes())
    return h.hexdigest()[:16]


def train_scorer(triplets, views, trained_set, ridge=DEFAULT_RIDGE, feature_mask=(True,) * NUM_FEATURES,
                 features=None):
    """Fit a ScorerModel on all pixels of all triplets.

    ``features`` may carry precomputed raw features (one array per triplet).
    """
    if not triplets:
        raise ContractError("train_scorer needs at least one triplet")
    if features is None:
        features = triplet_raw_features(triplets, views, trained_set)
    seen = np.concatenate([f[..., 0][~np.isnan(f[..., 0])] for f in features])
    neutral = float(np.median(seen)) if seen.size else 0.0
    X = np.concatenate([fill_neutral(f, neutral).reshape(-1, NUM_FEATURES) for f in features])
    y = np.concatenate([t.gt_score.reshape(-1) for t in triplets])
    w, b = fit_ridge(X, y, ridge, feature_mask)
    return ScorerModel(w, b, tuple(feature_mask), float(ridge), neutral, _dataset_hash(triplets))


def predict_score(model, features):
    mask = np.asarray(model.feature_mask, dtype=bool)
    f = np.asarray(features, dtype=np.float64)
    if f.shape[-1] != NUM_FEATURES:
        raise ContractError(f"expected {NUM_FEATURES} feature channels, got {f.shape[-1]}")
    s = f[..., mask] @ model.weights[mask] + model.bias
    return np.maximum(s, 0.0)


def score_to_mask(score, threshold=DEFAULT_THRESHOLD, mode=DEFAULT_THRESHOLD_MODE):
    """True where a pixel is considered hallucinated (excluded from the loss)."""
    score = np.asarray(score, dtype=np.float64)
    if mode == "absolute":
        if not threshold >= 0:
            raise ConfigError(f"absolute threshold must be >= 0, got {threshold}")
        return score > threshold
    if mode == "quantile":
        if not 0.0 <= threshold <= 1.0:
            raise ConfigError(f"quantile threshold must lie in [0, 1], got {threshold}")
        return score > np.quantile(score, threshold)
    raise ConfigError(f"unknown threshold mode {mode!r}")
