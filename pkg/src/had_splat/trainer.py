"""Single-phase splat optimization with masked, augmented novel views.

Each step draws one input view and, once the augmentation pool is populated,
one augmented novel view. Every ``aug_interval`` steps an augmentation round
samples fresh novel poses (drifting from the inputs toward the targets as
training progresses), runs the simulated prior against the current model,
scores and optionally fuses the versions, and refreshes the pool.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import losses
from .augmentor import AugmentedView, AugmentorConfig, gt_hallucination_score, nearest_input_indices, simulate_prior
from .errors import ConfigError, DivergenceError, InitializationError
from .fusion import DEFAULT_TEMPERATURE, VersionStack, fuse_argmin, fuse_weighted
from .rasterizer import TRAIN_CUTOFF, RenderPass, render
from .scene import GaussianSet, Role, interpolate_pose
from .scorer import (DEFAULT_THRESHOLD, DEFAULT_THRESHOLD_MODE, DEPTH_TOLERANCE_FRACTION, NUM_REFERENCE_VIEWS,
                     ReferenceView, extract_features, predict_score, score_to_mask)

log = logging.getLogger(__name__)

PIPELINE_MODES = ("splat_only", "aug_no_mask", "had", "had_ms")
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
PROGRESSIVE_FRACTION = 0.7
INIT_OPACITY = 0.1


@dataclass
class TrainConfig:
    lambda_input: float = 1.0
    lambda_novel: float = 1.0
    lr_mean: float = 8e-5
    lr_opacity: float = 5e-2
    lr_rotation: float = 1e-3
    lr_sh0: float = 5e-4
    lr_shN: float = 2.5e-5
    lr_scale: float = 5e-3
    lr_multiplier: float = 1.0
    total_iters: int = 2000
    aug_interval: int = 0  # 0 -> total_iters // 10
    novel_views_per_round: int = 4
    K_versions: int = 3
    prog_fraction: float = PROGRESSIVE_FRACTION
    mask_threshold: float = DEFAULT_THRESHOLD
    mask_mode: str = DEFAULT_THRESHOLD_MODE
    pipeline_mode: str = "had_ms"
    fusion: str = "argmin"
    fusion_temperature: float = DEFAULT_TEMPERATURE
    score_source: str = "learned"  # or "oracle"
    rescore_fused: bool = False
    two_phase: bool = False
    phase2_lr_scale: float = 0.1
    num_gaussians: int = 200
    sh_degree: int = 0
    eval_every: int = 0  # 0 -> only at the end
    input_loss_weights: tuple = losses.INPUT_LOSS_WEIGHTS
    novel_loss_weights: tuple = losses.NOVEL_LOSS_WEIGHTS
    ssim_masking: str = "zero"
    render_cutoff: float = TRAIN_CUTOFF
    force_full_mask: bool = False  # mask every novel pixel (isolation checks)
    augmentor: AugmentorConfig = field(default_factory=AugmentorConfig)
    seed: int = 0

    def validate(self):
        for name in ("lr_mean", "lr_opacity", "lr_rotation", "lr_sh0", "lr_shN", "lr_scale", "lr_multiplier"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if self.total_iters < 0:
            raise ConfigError("total_iters must be >= 0")
        if self.K_versions < 1:
            raise ConfigError("K_versions must be >= 1")
        if self.pipeline_mode not in PIPELINE_MODES:
            raise ConfigError(f"unknown pipeline_mode {self.pipeline_mode!r}")
        if self.fusion not in ("argmin", "weighted"):
            raise ConfigError(f"unknown fusion {self.fusion!r}")
        if self.score_source not in ("learned", "oracle"):
            raise ConfigError(f"unknown score_source {self.score_source!r}")
        if self.mask_mode not in ("absolute", "quantile"):
            raise ConfigError(f"unknown mask_mode {self.mask_mode!r}")
        if self.num_gaussians <= 0:
            raise ConfigError("num_gaussians must be > 0")
        self.augmentor.validate()

    @property
    def interval(self):
        return self.aug_interval if self.aug_interval > 0 else max(1, self.total_iters // 10)

    def lr_for(self, name):
        base = {"means": self.lr_mean, "log_scales": self.lr_scale, "quats": self.lr_rotation,
                "opacity_logits": self.lr_opacity}
        return self.lr_multiplier * base[name]

    def u_max(self, it):
        if self.total_iters == 0:
            return 1.0
        return min(1.0, it / (self.prog_fraction * self.total_iters))

    def to_dict(self):
        d = asdict(self)
        d["augmentor"] = self.augmentor.to_dict()
        d["input_loss_weights"] = list(self.input_loss_weights)
        d["novel_loss_weights"] = list(self.novel_loss_weights)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "augmentor" in d:
            d["augmentor"] = AugmentorConfig.from_dict(d["augmentor"])
        for key in ("input_loss_weights", "novel_loss_weights"):
            if key in d:
                d[key] = tuple(d[key])
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0
    betas: tuple = ADAM_BETAS
    eps: float = ADAM_EPS

    @classmethod
    def for_set(cls, gset):
        return cls({k: np.zeros_like(a) for k, a in gset.params().items()},
                   {k: np.zeros_like(a) for k, a in gset.params().items()})


def adam_step(gset, grads, state, cfg, lr_scale=1.0):
    """One Adam update with per-group learning rates; quaternions are renormalized."""
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.as_dict().items():
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = (m / c1) / (np.sqrt(v / c2) + state.eps)
        param = getattr(gset, name)
        if name == "sh":
            param[:, :1] -= lr_scale * cfg.lr_multiplier * cfg.lr_sh0 * step[:, :1]
            if param.shape[1] > 1:
                param[:, 1:] -= lr_scale * cfg.lr_multiplier * cfg.lr_shN * step[:, 1:]
        else:
            param -= lr_scale * cfg.lr_for(name) * step
    gset.normalize_quats()


# ---------------------------------------------------------------------------


def init_gaussians(views, n, seed, sh_degree=0, max_tries=400):
    """n isotropic Gaussians inside the scene bounds and every input frustum.

    Colours are averaged from the input pixels each point projects to.
    """
    if n <= 0:
        raise ConfigError("number of Gaussians must be > 0")
    rng = np.random.default_rng(int(seed))
    lo, hi = views.bounds
    inputs = views.inputs
    kept = []
    total = 0
    for _ in range(max_tries):
        pts = rng.uniform(lo, hi, size=(4 * n, 3))
        ok = np.ones(len(pts), dtype=bool)
        for v in inputs:
            ok &= _in_frustum(v.camera, pts)
        kept.append(pts[ok])
        total += int(ok.sum())
        if total >= n:
            break
    if total < n:
        raise InitializationError("input view frusta do not intersect inside the scene bounds")
    means = np.concatenate(kept)[:n]

    colors = np.zeros((n, 3))
    for v in inputs:
        cam = v.camera
        pc = means @ cam.rotation_w2c.T + cam.translation_w2c
        u = cam.fx * pc[:, 0] / pc[:, 2] + cam.cx
        w = cam.fy * pc[:, 1] / pc[:, 2] + cam.cy
        xi = np.clip(np.floor(u).astype(int), 0, cam.width - 1)
        yi = np.clip(np.floor(w).astype(int), 0, cam.height - 1)
        colors += v.image[yi, xi]
    colors /= len(inputs)

    if n > 1:
        k = min(4, n)
        dist, _ = cKDTree(means).query(means, k=k)
        nn = np.mean(dist[:, 1:], axis=1)
    else:
        nn = np.full(1, 0.1 * views.diameter)
    scale = np.log(np.maximum(nn, 1e-4))
    k_sh = 1 if sh_degree == 0 else 4
    sh = np.zeros((n, k_sh, 3))
    sh[:, 0] = colors
    quats = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    logit = math.log(INIT_OPACITY / (1 - INIT_OPACITY))
    return GaussianSet(means, np.repeat(scale[:, None], 3, axis=1), quats, np.full(n, logit), sh,
                       views.background.copy())


def _in_frustum(cam, pts):
    pc = pts @ cam.rotation_w2c.T + cam.translation_w2c
    z = pc[:, 2]
    zs = np.where(z > 1e-6, z, 1.0)
    u = cam.fx * pc[:, 0] / zs + cam.cx
    v = cam.fy * pc[:, 1] / zs + cam.cy
    return (z > 1e-6) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)


def sample_novel_pose(views, it, cfg, rng, return_u=False):
    """Interpolate from a random target view's nearest input toward it by u ~ U(0, u_max(it))."""
    targets = views.indices(Role.TARGET)
    if not targets:
        raise ConfigError("novel pose sampling needs at least one target view")
    t_idx = targets[int(rng.integers(len(targets)))]
    target = views.views[t_idx].camera
    src_idx = nearest_input_indices(views, target, 1)[0]
    u = float(rng.uniform(0.0, cfg.u_max(it)))
    cam = interpolate_pose(views.views[src_idx].camera, target, u)
    if return_u:
        return cam, u, src_idx, t_idx
    return cam


@dataclass
class PoolEntry:
    camera: object
    image: np.ndarray
    mask: np.ndarray
    score: np.ndarray


@dataclass
class TrainReport:
    checkpoints: list = field(default_factory=list)  # (iter, mean test psnr, mean test ssim)
    final_set: GaussianSet = None
    loss_curve: list = field(default_factory=list)  # (iter, input loss, novel loss or nan)
    augmentation_log: list = field(default_factory=list)
    init_set: GaussianSet = None

    @property
    def final_psnr(self):
        return self.checkpoints[-1][1] if self.checkpoints else float("nan")

    @property
    def final_ssim(self):
        return self.checkpoints[-1][2] if self.checkpoints else float("nan")


class Trainer:
    """Holds the mutable training state; ``run`` executes the full loop."""

    def __init__(self, views, gt_scene, cfg, scorer=None, init_set=None):
        cfg.validate()
        if cfg.pipeline_mode in ("had", "had_ms") and cfg.score_source == "learned" and scorer is None:
            raise ConfigError("learned scoring needs a fitted ScorerModel")
        self.views = views
        self.gt_scene = gt_scene
        self.cfg = cfg
        self.scorer = scorer
        self.gset = init_set.copy() if init_set is not None else init_gaussians(
            views, cfg.num_gaussians, cfg.seed, cfg.sh_degree)
        self.init_set = self.gset.copy()
        self.opt = OptimizerState.for_set(self.gset)
        ss = np.random.SeedSequence(int(cfg.seed))
        self.step_rng, self.pose_rng, self.pool_rng = (np.random.default_rng(s) for s in ss.spawn(3))
        self.pool = [None] * cfg.novel_views_per_round
        self.round = 0
        self.report = TrainReport(init_set=self.init_set.copy())
        self.input_idx = views.indices(Role.INPUT)

    # -- augmentation --------------------------------------------------------

    def _k(self):
        return self.cfg.K_versions if self.cfg.pipeline_mode == "had_ms" else 1

    def augmentation_round(self, it=0):
        """Refresh every pool slot; returns [(fused AugmentedView, mask), ...]."""
        cfg = self.cfg
        if cfg.pipeline_mode == "splat_only":
            return []
        results = []
        depth_cache = {}
        tol = DEPTH_TOLERANCE_FRACTION * self.views.diameter
        for slot in range(cfg.novel_views_per_round):
            cam, u, src, tgt = sample_novel_pose(self.views, it, cfg, self.pose_rng, return_u=True)
            splat_out = render(self.gset, cam, cfg.render_cutoff)
            gt_img = render(self.gt_scene, cam).image
            view_key = self.round * 10007 + slot
            ref_ids = nearest_input_indices(self.views, cam, self._k())
            versions = [simulate_prior(splat_out.image, gt_img, self.views.views[r], cfg.augmentor, view_key, r, cam)
                        for r in ref_ids]

            if cfg.pipeline_mode == "aug_no_mask":
                chosen = versions[0]
                score = np.zeros(gt_img.shape[:2])
            else:
                if cfg.score_source == "oracle":
                    scores = [v.gt_score for v in versions]
                else:
                    refs = self._feature_refs(cam, depth_cache)
                    scores = [self._predict(v.image, cam, splat_out, refs, tol) for v in versions]
                if len(versions) == 1:
                    img, score = versions[0].image, scores[0]
                else:
                    stack = VersionStack([v.image for v in versions], scores, ref_ids)
                    if cfg.fusion == "argmin":
                        img, score = fuse_argmin(stack)
                    else:
                        img, score = fuse_weighted(stack, cfg.fusion_temperature)
                    if cfg.rescore_fused and cfg.score_source == "learned":
                        score = self._predict(img, cam, splat_out, self._feature_refs(cam, depth_cache), tol)
                fused_gt = gt_hallucination_score(img, gt_img, cfg.augmentor.score_reduce)
                chosen = AugmentedView(img, cam, ref_ids[0], fused_gt, splat_out.image)

            if cfg.force_full_mask:
                mask = np.ones(gt_img.shape[:2], dtype=bool)
            elif cfg.pipeline_mode == "aug_no_mask":
                mask = np.zeros(gt_img.shape[:2], dtype=bool)
            else:
                mask = score_to_mask(score, cfg.mask_threshold, cfg.mask_mode)
            self.pool[slot] = PoolEntry(cam, chosen.image, mask, score)
            results.append((chosen, mask))
            self.report.augmentation_log.append({
                "round": self.round, "iter": it, "slot": slot, "u": u, "source_input": src, "target": tgt,
                "refs": list(ref_ids), "mask_fraction": float(mask.mean()),
                "gt_mae": float(chosen.gt_score.mean()),
                "version_gt_mae": [float(v.gt_score.mean()) for v in versions],
            })
        self.round += 1
        return results

    def _feature_refs(self, cam, cache):
        refs = []
        for idx in nearest_input_indices(self.views, cam, NUM_REFERENCE_VIEWS):
            if idx not in cache:
                cache[idx] = render(self.gset, self.views.views[idx].camera, self.cfg.render_cutoff).depth
            refs.append(ReferenceView(self.views.views[idx], cache[idx], idx))
        return refs

    def _predict(self, img, cam, splat_out, refs, tol):
        feats = extract_features(img, cam, splat_out.depth, refs, splat_out.image, tol, neutral=self.scorer.neutral)
        return predict_score(self.scorer, feats)

    # -- optimization --------------------------------------------------------

    def step(self, it, lr_scale=1.0, use_novel=True):
        cfg = self.cfg
        v = self.views.views[self.input_idx[int(self.step_rng.integers(len(self.input_idx)))]]
        rp = RenderPass(self.gset, v.camera, cfg.render_cutoff)
        l_in = losses.input_view_loss(rp.output.image, v.image, cfg.input_loss_weights)
        grads = rp.backward(cfg.lambda_input * l_in.grad_image)
        l_nv = float("nan")
        filled = [e for e in self.pool if e is not None]
        if use_novel and filled and cfg.pipeline_mode != "splat_only":
            e = filled[int(self.pool_rng.integers(len(filled)))]
            rp2 = RenderPass(self.gset, e.camera, cfg.render_cutoff)
            nv = losses.novel_view_loss(rp2.output.image, e.image, e.mask, cfg.novel_loss_weights, cfg.ssim_masking)
            grads.scaled_add(rp2.backward(cfg.lambda_novel * nv.grad_image))
            l_nv = nv.value
        adam_step(self.gset, grads, self.opt, cfg, lr_scale)
        if not (np.isfinite(l_in.value) and all(np.all(np.isfinite(a)) for a in self.gset.params().values())):
            raise DivergenceError(f"non-finite loss or parameters at iteration {it}", self.report)
        return l_in.value, l_nv

    def run(self, eval_roles=(Role.TEST,)):
        cfg = self.cfg
        phase2_start = cfg.total_iters // 2 if cfg.two_phase else 0
        for it in range(cfg.total_iters):
            in_phase2 = it >= phase2_start
            if in_phase2 and (it - phase2_start) % cfg.interval == 0:
                self.augmentation_round(it)
            lr_scale = cfg.phase2_lr_scale if (cfg.two_phase and in_phase2) else 1.0
            l_in, l_nv = self.step(it, lr_scale, use_novel=in_phase2)
            self.report.loss_curve.append((it, l_in, l_nv))
            if cfg.eval_every and (it + 1) % cfg.eval_every == 0 and it + 1 < cfg.total_iters:
                self._checkpoint(it + 1, eval_roles)
        self._checkpoint(cfg.total_iters, eval_roles)
        self.report.final_set = self.gset.copy()
        return self.report

    def _checkpoint(self, it, roles):
        rows = evaluate(self.gset, self.views, roles)
        if rows:
            self.report.checkpoints.append((it, float(np.mean([r["psnr"] for r in rows])),
                                            float(np.mean([r["ssim"] for r in rows]))))


def train(views, gt_scene, cfg, scorer=None, init_set=None):
    """Run the full optimization; ``gt_scene`` only feeds the simulated prior, never gradients."""
    return Trainer(views, gt_scene, cfg, scorer, init_set).run()


def evaluate(gset, views, roles, scene="", method="", seed=0):
    """One metric row per selected view: PSNR/SSIM of the render against the stored image."""
    roles = {Role(r) for r in roles}
    if not roles:
        raise ConfigError("evaluate needs at least one role")
    rows = []
    for i, v in enumerate(views.views):
        if v.role not in roles:
            continue
        img = render(gset, v.camera).image
        rows.append({"psnr": losses.psnr(img, v.image), "ssim": losses.ssim(img, v.image), "score_mae": "",
                     "scene": scene, "method": method, "seed": seed, "view": i})
    return rows
