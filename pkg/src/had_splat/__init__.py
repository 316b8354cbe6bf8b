"""Hallucination-aware diffusion-prior augmentation for 3D Gaussian splatting, at desk scale."""
from .augmentor import AugmentorConfig, AugmentedView, ScorerTriplet, curate_triplets, simulate_prior
from .fusion import VersionStack, fuse_argmin, fuse_weighted
from .rasterizer import RenderPass, render, render_with_grad
from .scene import Camera, GaussianSet, Role, SceneSpec, ViewRecord, ViewSet, interpolate_pose
from .scorer import ScorerModel, extract_features, predict_score, score_to_mask, train_scorer
from .synthetic import make_synthetic_scene
from .trainer import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = ["AugmentorConfig", "AugmentedView", "ScorerTriplet", "curate_triplets", "simulate_prior",
           "VersionStack", "fuse_argmin", "fuse_weighted", "RenderPass", "render", "render_with_grad",
           "Camera", "GaussianSet", "Role", "SceneSpec", "ViewRecord", "ViewSet", "interpolate_pose",
           "ScorerModel", "extract_features", "predict_score", "score_to_mask", "train_scorer",
           "make_synthetic_scene", "TrainConfig", "evaluate", "train"]
