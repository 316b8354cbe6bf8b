"""Deterministic synthetic scenes and camera splits.

Cameras sit on an arc around the scene centre. Input views cover the middle
of the arc, target views continue the arc beyond them on both sides (the
extrapolation region the augmentations reach for), and test views are
scattered between the two.
"""
import numpy as np

from .rasterizer import render
from .scene import GaussianSet, Role, ViewRecord, ViewSet, look_at

ARC_RADIUS = 4.0
ELEVATION_DEG = 15.0
INPUT_HALF_ARC_DEG = 35.0
TARGET_HALF_ARC_DEG = 80.0
FOV_DEG = 50.0
BACKGROUND = (0.08, 0.08, 0.1)
SCENE_BOUNDS = np.array([[-1.5, -1.0, -1.5], [1.5, 1.5, 1.5]])


def _random_quats(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def _blob_field(rng, n):
    means = rng.uniform(-1.0, 1.0, size=(n, 3))
    log_scales = np.log(rng.uniform(0.08, 0.25, size=(n, 3)))
    opac = rng.uniform(0.5, 0.95, size=n)
    colors = rng.uniform(0.05, 0.95, size=(n, 1, 3))
    return means, log_scales, _random_quats(rng, n), np.log(opac / (1 - opac)), colors


def _pattern_color(u, v, palette, kind):
    if kind == 0:
        sel = (int(np.floor(u * 4)) + int(np.floor(v * 4))) % 2
    else:
        sel = int(np.floor((u + 0.5 * v) * 6)) % 2
    base = palette[sel]
    return np.clip(base + 0.1 * np.sin(6.0 * u + 3.0 * v), 0.02, 0.98)


def _textured_room(rng, n):
    """Floor and back wall tiled with flat Gaussians, plus a few free blobs."""
    n_blobs = max(1, n // 4)
    n_plane = n - n_blobs
    per_plane = [n_plane // 2, n_plane - n_plane // 2]
    means, scales, quats, colors = [], [], [], []
    identity = np.array([1.0, 0.0, 0.0, 0.0])
    for plane, count in enumerate(per_plane):
        if count == 0:
            continue
        side = int(np.ceil(np.sqrt(count)))
        spacing = 3.0 / side
        palette = rng.uniform(0.1, 0.9, size=(2, 3))
        for k in range(count):
            u = ((k % side) + 0.5) / side
            v = ((k // side) + 0.5) / side
            jitter = rng.uniform(-0.15, 0.15, size=2) * spacing
            a, b = -1.5 + 3.0 * u + jitter[0], -1.5 + 3.0 * v + jitter[1]
            if plane == 0:
                means.append([a, -1.0, b])
                scales.append([0.6 * spacing, 0.01, 0.6 * spacing])
            else:
                means.append([a, -1.0 + 2.5 * v, -1.5])
                scales.append([0.6 * spacing, 0.6 * spacing, 0.01])
            quats.append(identity)
            colors.append(_pattern_color(u, v, palette, plane))
    bm, bs, bq, bo, bc = _blob_field(rng, n_blobs)
    bm *= 0.6
    means = np.vstack([np.array(means), bm])
    log_scales = np.vstack([np.log(np.array(scales)), bs])
    quats = np.vstack([np.array(quats), bq])
    opac = np.concatenate([np.full(n_plane, 0.9), 1 / (1 + np.exp(-bo))])
    colors = np.vstack([np.array(colors)[:, None, :], bc])
    return means, log_scales, quats, np.log(opac / (1 - opac)), colors


def _arc_camera(angle_deg, elevation_deg, width, height):
    a, e = np.radians(angle_deg), np.radians(elevation_deg)
    eye = ARC_RADIUS * np.array([np.sin(a) * np.cos(e), np.sin(e), np.cos(a) * np.cos(e)])
    f = 0.5 * width / np.tan(np.radians(FOV_DEG) / 2)
    return look_at(eye, np.zeros(3), f, f, width, height)


def split_angles(spec, rng):
    """Arc angles (degrees) for input, target and test cameras."""
    n_in, n_tg, n_te = spec.num_input_views, spec.num_target_views, spec.num_test_views
    inputs = np.linspace(-INPUT_HALF_ARC_DEG, INPUT_HALF_ARC_DEG, n_in) if n_in > 1 else np.zeros(1)
    # targets alternate sides, evenly filling (INPUT_HALF_ARC, TARGET_HALF_ARC]
    per_side = int(np.ceil(n_tg / 2))
    outer = np.linspace(INPUT_HALF_ARC_DEG, TARGET_HALF_ARC_DEG, per_side + 1)[1:]
    targets = []
    for k in range(n_tg):
        sign = 1.0 if k % 2 == 0 else -1.0
        targets.append(sign * outer[k // 2])
    lo = INPUT_HALF_ARC_DEG * 0.5
    hi = TARGET_HALF_ARC_DEG * 0.9
    tests = rng.uniform(lo, hi, size=n_te) * rng.choice([-1.0, 1.0], size=n_te)
    return inputs, np.array(targets), tests


def make_synthetic_scene(spec):
    """Ground-truth GaussianSet plus a ViewSet rendered from it."""
    spec.validate()
    rng = np.random.default_rng(int(spec.seed))
    if spec.scene_kind == "blob_field":
        params = _blob_field(rng, int(spec.num_gaussians))
    else:
        params = _textured_room(rng, int(spec.num_gaussians))
    gt = GaussianSet(*params, background=BACKGROUND)

    width, height = (int(v) for v in spec.image_size)
    inputs, targets, tests = split_angles(spec, rng)
    test_elev = ELEVATION_DEG + rng.uniform(-3.0, 3.0, size=len(tests))
    views = []
    for role, angles, elevs in ((Role.INPUT, inputs, None), (Role.TARGET, targets, None),
                                (Role.TEST, tests, test_elev)):
        for k, ang in enumerate(angles):
            elev = ELEVATION_DEG if elevs is None else elevs[k]
            cam = _arc_camera(float(ang), float(elev), width, height)
            views.append(ViewRecord(cam, render(gt, cam).image, role))
    return gt, ViewSet(views, background=np.array(BACKGROUND), bounds=SCENE_BOUNDS.copy())
