"""Fusion of K augmented versions of the same novel view."""
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError

DEFAULT_TEMPERATURE = 0.1


@dataclass
class VersionStack:
    images: list  # K arrays (H, W, 3)
    scores: list  # K arrays (H, W)
    ref_indices: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.images) == 0 or len(self.images) != len(self.scores):
            raise ContractError("a version stack needs K >= 1 images with one score map each")
        shape = np.shape(self.images[0])
        for img, s in zip(self.images, self.scores):
            if np.shape(img) != shape or np.shape(s) != shape[:2]:
                raise ContractError("all versions and score maps must share dimensions")
        if not self.ref_indices:
            self.ref_indices = list(range(len(self.images)))
        if len(set(self.ref_indices)) != len(self.ref_indices):
            raise ContractError("reference indices of a version stack must be distinct")

    def __len__(self):
        return len(self.images)

    def arrays(self):
        return np.stack([np.asarray(i, dtype=np.float64) for i in self.images]), \
            np.stack([np.asarray(s, dtype=np.float64) for s in self.scores])


def fuse_argmin(stack):
    """Per pixel, take the version with the lowest score (ties go to the lowest index)."""
    imgs, scores = stack.arrays()
    k_star = np.argmin(scores, axis=0)  # first occurrence on ties
    img = np.take_along_axis(imgs, k_star[None, ..., None], axis=0)[0]
    score = np.take_along_axis(scores, k_star[None], axis=0)[0]
    return img, score


def fuse_weighted(stack, temperature=DEFAULT_TEMPERATURE):
    """Softmax(-score / temperature) weighted mean of the versions and their scores."""
    if not temperature > 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    imgs, scores = stack.arrays()
    logits = -scores / temperature
    logits -= logits.max(axis=0, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=0, keepdims=True)
    return np.sum(w[..., None] * imgs, axis=0), np.sum(w * scores, axis=0)
