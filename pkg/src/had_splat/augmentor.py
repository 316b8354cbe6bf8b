"""Simulated diffusion prior with known hallucination ground truth.

The simulator takes the true render at a novel pose (what a perfect artifact
remover would output), leaves a fraction of the splat-render artifacts in,
and then corrupts it in two ways that depend on the conditioning reference
view: feathered "alien" patches cut from the reference image and pasted at
wrong positions, and smooth colour drift. Different reference views give
different corruption, so fusing several versions can recover clean pixels.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .rasterizer import render
from .scene import Camera, Role


@dataclass
class AugmentorConfig:
    hallucination_rate: float = 0.15
    patch_size_range: tuple = (6, 16)
    num_patches_range: tuple = (1, 8)
    color_drift_amplitude: float = 0.03
    residual_blend: float = 0.1
    seed: int = 0
    score_reduce: str = "mean"  # or "max" over channels

    def validate(self):
        for name in ("hallucination_rate", "color_drift_amplitude", "residual_blend"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name}={v} outside [0, 1]")
        lo, hi = self.patch_size_range
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad patch_size_range {self.patch_size_range}")
        lo, hi = self.num_patches_range
        if not 0 <= lo <= hi:
            raise ConfigError(f"bad num_patches_range {self.num_patches_range}")
        if self.score_reduce not in ("mean", "max"):
            raise ConfigError(f"unknown score_reduce {self.score_reduce!r}")

    def to_dict(self):
        return {"hallucination_rate": self.hallucination_rate, "patch_size_range": list(self.patch_size_range),
                "num_patches_range": list(self.num_patches_range),
                "color_drift_amplitude": self.color_drift_amplitude, "residual_blend": self.residual_blend,
                "seed": int(self.seed), "score_reduce": self.score_reduce}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("patch_size_range", "num_patches_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class AugmentedView:
    image: np.ndarray
    camera: Camera
    ref_view_index: int
    gt_score: np.ndarray
    rendered_input: np.ndarray
    corruption_mask: np.ndarray = field(default=None, repr=False)  # pixels touched by patches or drift


@dataclass
class ScorerTriplet:
    gt_image: np.ndarray
    augmented: np.ndarray
    splat_render: np.ndarray
    camera: Camera
    gt_score: np.ndarray
    view_index: int = -1
    ref_index: int = -1


def gt_hallucination_score(aug, gt, reduce="mean"):
    """Per-pixel |aug - gt| reduced over the three channels."""
    aug = np.asarray(aug, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if aug.shape != gt.shape:
        raise ContractError(f"shapes differ: {aug.shape} vs {gt.shape}")
    err = np.abs(aug - gt)
    return err.max(axis=2) if reduce == "max" else err.mean(axis=2)


def _cosine_feather(size, feather):
    """Separable weight: 1 inside, cosine ramp to 0 over ``feather`` pixels at each edge."""
    d = np.minimum(np.arange(size), np.arange(size)[::-1]) + 0.5
    ramp = np.where(d < feather, 0.5 * (1.0 - np.cos(np.pi * d / feather)), 1.0)
    return np.outer(ramp, ramp)


def _drift_field(rng, h, w, amplitude):
    """Sum of a few broad Gaussian bumps with random signed colour offsets."""
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    field_ = np.zeros((h, w, 3))
    for _ in range(int(rng.integers(2, 5))):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        sig = rng.uniform(0.12, 0.3) * max(h, w)
        color = rng.uniform(-1.0, 1.0, size=3)
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig**2))
        field_ += bump[..., None] * color
    return amplitude * field_


def _place_patches(rng, h, w, cfg):
    """Non-overlapping square patches, drawn until their area reaches the target rate.

    The draw sequence does not depend on the rate, so a higher rate yields a
    superset of the patches of a lower one.
    """
    lo, hi = cfg.patch_size_range
    n_min, n_max = cfg.num_patches_range
    hi = min(hi, h, w)
    lo = min(lo, hi)
    target = cfg.hallucination_rate * h * w
    occupied = np.zeros((h, w), dtype=bool)
    patches = []
    area = 0
    for _ in range(n_max):
        size = int(rng.integers(lo, hi + 1))
        cand = rng.uniform(size=(20, 2))
        src = rng.uniform(size=(4, 2))
        if cfg.hallucination_rate <= 0.0 or (area >= target and len(patches) >= n_min):
            continue  # keep consuming draws so later rates stay aligned
        for cy, cx in cand:
            y0, x0 = int(cy * (h - size + 1)), int(cx * (w - size + 1))
            if not occupied[y0:y0 + size, x0:x0 + size].any():
                occupied[y0:y0 + size, x0:x0 + size] = True
                srcs = [(int(sy * (h - size + 1)), int(sx * (w - size + 1))) for sy, sx in src]
                patches.append((y0, x0, size, srcs))
                area += size * size
                break
    return patches


def simulate_prior(splat_render, gt_render, ref, cfg, view_key, ref_index=0, camera=None):
    """Stand-in for the diffusion prior: returns an AugmentedView with its exact score map.

    Corruption placement is a deterministic function of (cfg.seed, view_key, ref_index).
    """
    cfg.validate()
    splat_render = np.asarray(splat_render, dtype=np.float64)
    gt_render = np.asarray(gt_render, dtype=np.float64)
    if splat_render.shape != gt_render.shape or ref.image.shape != gt_render.shape:
        raise ContractError("splat render, ground-truth render and reference image must share dimensions")
    h, w = gt_render.shape[:2]
    ss = np.random.SeedSequence([int(cfg.seed), int(view_key), int(ref_index)])
    patch_rng, drift_rng = (np.random.default_rng(s) for s in ss.spawn(2))

    if cfg.residual_blend > 0.0:
        out = (1.0 - cfg.residual_blend) * gt_render + cfg.residual_blend * splat_render
    else:
        out = gt_render.copy()
    touched = np.zeros((h, w), dtype=bool)

    if cfg.color_drift_amplitude > 0.0:
        drift = _drift_field(drift_rng, h, w, cfg.color_drift_amplitude)
        out = out + drift
        touched |= np.abs(drift).max(axis=2) > 1e-3 * cfg.color_drift_amplitude

    for y0, x0, size, srcs in _place_patches(patch_rng, h, w, cfg):
        dest = gt_render[y0:y0 + size, x0:x0 + size]
        # take the candidate source that differs most from what belongs here
        best = max(srcs, key=lambda s: np.abs(ref.image[s[0]:s[0] + size, s[1]:s[1] + size] - dest).mean())
        patch = ref.image[best[0]:best[0] + size, best[1]:best[1] + size]
        wgt = _cosine_feather(size, max(1.0, size / 4.0))[..., None]
        region = out[y0:y0 + size, x0:x0 + size]
        out[y0:y0 + size, x0:x0 + size] = wgt * patch + (1.0 - wgt) * region
        touched[y0:y0 + size, x0:x0 + size] = True

    if touched.any():
        out = np.clip(out, 0.0, 1.0)
    score = gt_hallucination_score(out, gt_render, cfg.score_reduce)
    return AugmentedView(out, camera, int(ref_index), score, splat_render, touched)


def nearest_input_indices(views, cam, k):
    """Indices (into views.views) of the k input views whose centres are closest to ``cam``."""
    idx = views.indices(Role.INPUT)
    d = [np.linalg.norm(views.views[i].camera.center - cam.center) for i in idx]
    order = np.argsort(d, kind="stable")[:k]
    return [idx[j] for j in order]


def curate_triplets(scene, views, trained_set, cfg):
    """(I_GT, augmented, I_splat) triplets for every non-input view of ``views``."""
    triplets = []
    for vi, view in enumerate(views.views):
        if view.role == Role.INPUT:
            continue
        cam = view.camera
        gt_img = render(scene, cam).image
        splat = render(trained_set, cam).image
        ref_idx = nearest_input_indices(views, cam, 1)[0]
        aug = simulate_prior(splat, gt_img, views.views[ref_idx], cfg, view_key=vi, ref_index=ref_idx,
                             camera=cam)
        triplets.append(ScorerTriplet(gt_img, aug.image, splat, cam, aug.gt_score, vi, ref_idx))
    return triplets
