"""Scene and camera data model.

A GaussianSet stores its primitives as parallel numpy arrays (one row per
Gaussian); ``GaussianPrimitive`` is the per-row view used when a single
primitive is inspected or built by hand.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError


def quat_to_rotmat(q):
    """Rotation matrices for (..., 4) quaternions in (w, x, y, z) order.

    Quaternions are normalized first, so the result is always a rotation.
    """
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_to_quat(R):
    """Unit quaternion (w, x, y, z) with w >= 0 for a single 3x3 rotation."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def slerp(q0, q1, u):
    """Spherical interpolation along the shortest arc between unit quaternions."""
    q0 = np.asarray(q0, dtype=np.float64)
    q1 = np.asarray(q1, dtype=np.float64)
    d = float(np.dot(q0, q1))
    if d < 0.0:
        q1 = -q1
        d = -d
    if d > 1.0 - 1e-12:
        q = (1 - u) * q0 + u * q1
        return q / np.linalg.norm(q)
    theta = np.arccos(min(d, 1.0))
    s = np.sin(theta)
    q = (np.sin((1 - u) * theta) * q0 + np.sin(u * theta) * q1) / s
    return q / np.linalg.norm(q)


@dataclass
class GaussianPrimitive:
    mean: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    opacity_logit: float
    sh_coeffs: np.ndarray  # (1, 3) plain RGB or (4, 3) with degree-1 terms

    @property
    def scale(self):
        return np.exp(self.log_scale)

    @property
    def opacity(self):
        return 1.0 / (1.0 + np.exp(-self.opacity_logit))


@dataclass
class GaussianSet:
    """Optimizable scene: N Gaussians stored as parallel arrays."""

    means: np.ndarray  # (N, 3)
    log_scales: np.ndarray  # (N, 3)
    quats: np.ndarray  # (N, 4)
    opacity_logits: np.ndarray  # (N,)
    sh: np.ndarray  # (N, K, 3), K in {1, 4}
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    PARAM_NAMES = ("means", "log_scales", "quats", "opacity_logits", "sh")

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.quats = np.asarray(self.quats, dtype=np.float64).reshape(n, 4)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        sh = np.asarray(self.sh, dtype=np.float64)
        if sh.ndim == 2:
            sh = sh[:, None, :]
        self.sh = sh.reshape(n, sh.shape[1] if sh.ndim == 3 else -1, 3)
        if self.sh.shape[1] not in (1, 4):
            raise ContractError(f"sh must hold 1 or 4 coefficients per channel, got {self.sh.shape[1]}")
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)

    def __len__(self):
        return len(self.means)

    @property
    def sh_degree(self):
        return 0 if self.sh.shape[1] == 1 else 1

    @classmethod
    def empty(cls, background=(0.0, 0.0, 0.0), sh_degree=0):
        k = 1 if sh_degree == 0 else 4
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0),
                   np.zeros((0, k, 3)), np.asarray(background, dtype=np.float64))

    @classmethod
    def from_primitives(cls, prims, background=(0.0, 0.0, 0.0)):
        if not prims:
            return cls.empty(background)
        return cls(
            np.stack([p.mean for p in prims]),
            np.stack([p.log_scale for p in prims]),
            np.stack([p.rotation for p in prims]),
            np.array([p.opacity_logit for p in prims], dtype=np.float64),
            np.stack([np.asarray(p.sh_coeffs, dtype=np.float64).reshape(-1, 3) for p in prims]),
            np.asarray(background, dtype=np.float64),
        )

    def primitive(self, i):
        return GaussianPrimitive(self.means[i].copy(), self.log_scales[i].copy(), self.quats[i].copy(),
                                 float(self.opacity_logits[i]), self.sh[i].copy())

    def primitives(self):
        return [self.primitive(i) for i in range(len(self))]

    def copy(self):
        return GaussianSet(self.means.copy(), self.log_scales.copy(), self.quats.copy(),
                           self.opacity_logits.copy(), self.sh.copy(), self.background.copy())

    def subset(self, idx):
        idx = np.asarray(idx)
        return GaussianSet(self.means[idx], self.log_scales[idx], self.quats[idx],
                           self.opacity_logits[idx], self.sh[idx], self.background.copy())

    def params(self):
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    def normalize_quats(self):
        self.quats /= np.linalg.norm(self.quats, axis=1, keepdims=True)

    def equals(self, other):
        """Bit-exact comparison of every parameter array."""
        return all(np.array_equal(a, b) for a, b in zip(self._all_arrays(), other._all_arrays()))

    def _all_arrays(self):
        return [self.means, self.log_scales, self.quats, self.opacity_logits, self.sh, self.background]


@dataclass(eq=False)
class Camera:
    """Pinhole camera; world-to-camera transform x_cam = R x_world + t (OpenCV axes)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation_w2c: np.ndarray
    translation_w2c: np.ndarray

    def __post_init__(self):
        self.rotation_w2c = np.asarray(self.rotation_w2c, dtype=np.float64).reshape(3, 3)
        self.translation_w2c = np.asarray(self.translation_w2c, dtype=np.float64).reshape(3)
        self.width = int(self.width)
        self.height = int(self.height)
        if self.width <= 0 or self.height <= 0:
            raise ContractError("camera width/height must be positive")
        if self.fx <= 0 or self.fy <= 0:
            raise ContractError("camera focal lengths must be positive")
        err = np.abs(self.rotation_w2c.T @ self.rotation_w2c - np.eye(3)).max()
        if err > 1e-9:
            raise ContractError(f"rotation_w2c is not orthonormal (max deviation {err:.3g})")

    @property
    def center(self):
        return -self.rotation_w2c.T @ self.translation_w2c

    @property
    def shape(self):
        return (self.height, self.width)

    def same_intrinsics(self, other):
        return (self.fx, self.fy, self.cx, self.cy, self.width, self.height) == (
            other.fx, other.fy, other.cx, other.cy, other.width, other.height)

    def with_pose(self, R, t):
        return Camera(self.fx, self.fy, self.cx, self.cy, self.width, self.height, R, t)

    def equals(self, other):
        return (self.same_intrinsics(other)
                and np.array_equal(self.rotation_w2c, other.rotation_w2c)
                and np.array_equal(self.translation_w2c, other.translation_w2c))

    def to_dict(self):
        return {"fx": float(self.fx), "fy": float(self.fy), "cx": float(self.cx), "cy": float(self.cy),
                "width": self.width, "height": self.height,
                "R": [float(v) for v in self.rotation_w2c.ravel()],
                "t": [float(v) for v in self.translation_w2c]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"],
                   np.array(d["R"], dtype=np.float64).reshape(3, 3), np.array(d["t"], dtype=np.float64))


def look_at(eye, target, fx, fy, width, height, up=(0.0, 1.0, 0.0)):
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return Camera(fx, fy, width / 2.0, height / 2.0, width, height, R, -R @ eye)


class Role(str, enum.Enum):
    INPUT = "input"
    TARGET = "target"
    TEST = "test"
    NOVEL = "novel"


@dataclass(eq=False)
class ViewRecord:
    camera: Camera
    image: np.ndarray  # (H, W, 3)
    role: Role

    def __post_init__(self):
        self.role = Role(self.role)
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.shape != (self.camera.height, self.camera.width, 3):
            raise ContractError(f"image shape {self.image.shape} does not match camera "
                                f"{self.camera.height}x{self.camera.width}")


@dataclass(eq=False)
class ViewSet:
    views: list
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bounds: np.ndarray = field(default_factory=lambda: np.array([[-1.0] * 3, [1.0] * 3]))

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        self.bounds = np.asarray(self.bounds, dtype=np.float64).reshape(2, 3)
        if not self.indices(Role.INPUT):
            raise ContractError("a ViewSet needs at least one input view")

    def indices(self, role):
        role = Role(role)
        return [i for i, v in enumerate(self.views) if v.role == role]

    def by_role(self, role):
        return [self.views[i] for i in self.indices(role)]

    @property
    def inputs(self):
        return self.by_role(Role.INPUT)

    @property
    def counts(self):
        return {r.value: len(self.indices(r)) for r in Role}

    @property
    def diameter(self):
        return float(np.linalg.norm(self.bounds[1] - self.bounds[0]))


@dataclass
class SceneSpec:
    scene_kind: str = "blob_field"
    num_gaussians: int = 120
    num_input_views: int = 9
    num_target_views: int = 12
    num_test_views: int = 8
    image_size: tuple = (64, 64)
    seed: int = 0

    KINDS = ("blob_field", "textured_room")

    def validate(self):
        if self.scene_kind not in self.KINDS:
            raise ConfigError(f"unknown scene_kind {self.scene_kind!r}")
        for name in ("num_gaussians", "num_input_views", "num_target_views", "num_test_views"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be > 0")
        w, h = self.image_size
        if int(w) <= 0 or int(h) <= 0:
            raise ConfigError("image_size must be positive")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    def to_dict(self):
        return {"scene_kind": self.scene_kind, "num_gaussians": int(self.num_gaussians),
                "num_input_views": int(self.num_input_views), "num_target_views": int(self.num_target_views),
                "num_test_views": int(self.num_test_views), "image_size": [int(v) for v in self.image_size],
                "seed": int(self.seed)}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["image_size"] = tuple(d.get("image_size", (64, 64)))
        return cls(**d)


def interpolate_pose(c0, c1, u):
    """Camera between c0 (u=0) and c1 (u=1): slerped rotation, lerped camera center."""
    if not c0.same_intrinsics(c1):
        raise ContractError("interpolate_pose needs cameras with identical intrinsics and resolution")
    if not 0.0 <= u <= 1.0:
        raise ContractError(f"interpolation fraction {u} outside [0, 1]")
    if u == 0.0:
        return c0.with_pose(c0.rotation_w2c.copy(), c0.translation_w2c.copy())
    if u == 1.0:
        return c1.with_pose(c1.rotation_w2c.copy(), c1.translation_w2c.copy())
    q = slerp(rotmat_to_quat(c0.rotation_w2c), rotmat_to_quat(c1.rotation_w2c), u)
    R = quat_to_rotmat(q)
    center = (1 - u) * c0.center + u * c1.center
    return c0.with_pose(R, -R @ center)
