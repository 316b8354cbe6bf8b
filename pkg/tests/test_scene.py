import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from had_splat.errors import ConfigError, ContractError
from had_splat.rasterizer import render
from had_splat.scene import (Camera, GaussianPrimitive, GaussianSet, Role, SceneSpec, ViewRecord, ViewSet,
                             interpolate_pose, look_at, quat_to_rotmat, rotmat_to_quat, slerp)
from had_splat.synthetic import make_synthetic_scene

from conftest import small_camera


def _axis_angle(axis, deg):
    axis = np.asarray(axis, dtype=float) / np.linalg.norm(axis)
    h = np.radians(deg) / 2
    return np.concatenate([[np.cos(h)], np.sin(h) * axis])


def test_quat_rotmat_round_trip():
    rng = np.random.default_rng(0)
    for _ in range(50):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        R = quat_to_rotmat(q)
        assert np.allclose(R.T @ R, np.eye(3), atol=1e-12)
        assert np.isclose(np.linalg.det(R), 1.0)
        q2 = rotmat_to_quat(R)
        assert np.allclose(q2 * np.sign(q2[0]), q * np.sign(q[0]), atol=1e-10)


def test_quat_to_rotmat_matches_rodrigues():
    # independent construction: R = I + sin(t) K + (1 - cos(t)) K^2
    axis = np.array([1.0, 2.0, -0.5]) / np.linalg.norm([1.0, 2.0, -0.5])
    t = 0.7
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    R = np.eye(3) + np.sin(t) * K + (1 - np.cos(t)) * K @ K
    assert np.allclose(quat_to_rotmat(_axis_angle(axis, np.degrees(t))), R, atol=1e-12)


def test_slerp_takes_shortest_arc():
    q0 = _axis_angle([0, 0, 1], 0)
    q1 = -_axis_angle([0, 0, 1], 40)  # same rotation, opposite hemisphere
    mid = slerp(q0, q1, 0.5)
    assert np.allclose(quat_to_rotmat(mid), quat_to_rotmat(_axis_angle([0, 0, 1], 20)), atol=1e-12)


def test_camera_validation():
    with pytest.raises(ContractError):
        Camera(10, 10, 5, 5, 10, 10, np.diag([1.0, 1.0, 1.01]), np.zeros(3))
    with pytest.raises(ContractError):
        Camera(10, 10, 5, 5, 0, 10, np.eye(3), np.zeros(3))
    with pytest.raises(ContractError):
        Camera(-1, 10, 5, 5, 10, 10, np.eye(3), np.zeros(3))


def test_camera_dict_round_trip():
    cam = small_camera()
    back = Camera.from_dict(cam.to_dict())
    assert back.equals(cam)
    assert set(cam.to_dict()) == {"fx", "fy", "cx", "cy", "width", "height", "R", "t"}


def test_look_at_points_forward():
    cam = look_at([0, 0, 5], [0, 0, 0], 50, 50, 64, 64)
    pc = cam.rotation_w2c @ np.zeros(3) + cam.translation_w2c
    assert np.allclose(pc, [0, 0, 5])
    assert np.allclose(cam.center, [0, 0, 5])


def test_interpolate_endpoints_exact():
    c0 = look_at([0, 0.5, 4], [0, 0, 0], 40, 40, 32, 32)
    c1 = look_at([3, 0.5, 2], [0, 0, 0], 40, 40, 32, 32)
    assert interpolate_pose(c0, c1, 0.0).equals(c0)
    assert interpolate_pose(c0, c1, 1.0).equals(c1)


def test_interpolate_half_of_60_degree_rotation():
    base = look_at([0, 0, 4], [0, 0, 0], 40, 40, 32, 32)
    axis = np.array([0.2, 1.0, 0.3])
    Rd = quat_to_rotmat(_axis_angle(axis, 60))
    c1 = base.with_pose(Rd @ base.rotation_w2c, base.translation_w2c)
    mid = interpolate_pose(base, c1, 0.5)
    rel = mid.rotation_w2c @ base.rotation_w2c.T
    angle = np.degrees(np.arccos(np.clip((np.trace(rel) - 1) / 2, -1, 1)))
    assert angle == pytest.approx(30.0, abs=1e-9)
    # rotation axis of the relative rotation is the same axis
    w, v = np.linalg.eig(rel)
    ax = np.real(v[:, np.argmin(np.abs(w - 1))])
    assert abs(abs(np.dot(ax, axis / np.linalg.norm(axis))) - 1) < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 1), st.floats(-170, 170), st.floats(-170, 170))
def test_interpolated_rotation_orthonormal(u, a0, a1):
    c0 = look_at([4 * np.sin(np.radians(a0)), 1, 4 * np.cos(np.radians(a0))], [0, 0, 0], 40, 40, 16, 16)
    c1 = look_at([4 * np.sin(np.radians(a1)), -1, 4 * np.cos(np.radians(a1))], [0, 0, 0], 40, 40, 16, 16)
    R = interpolate_pose(c0, c1, u).rotation_w2c
    assert np.abs(R.T @ R - np.eye(3)).max() < 1e-9


def test_interpolate_rejects_mismatched_intrinsics():
    c0 = look_at([0, 0, 4], [0, 0, 0], 40, 40, 32, 32)
    c1 = look_at([1, 0, 4], [0, 0, 0], 41, 40, 32, 32)
    with pytest.raises(ContractError):
        interpolate_pose(c0, c1, 0.5)
    with pytest.raises(ContractError):
        interpolate_pose(c0, c0, 1.5)


def test_gaussian_set_primitive_round_trip():
    p = GaussianPrimitive(np.array([0.1, 0.2, 0.3]), np.log([0.1, 0.2, 0.3]), np.array([1.0, 0, 0, 0]), 0.4,
                          np.array([[0.5, 0.6, 0.7]]))
    gs = GaussianSet.from_primitives([p, p])
    assert len(gs) == 2
    back = gs.primitive(1)
    assert np.array_equal(back.mean, p.mean) and back.opacity_logit == p.opacity_logit
    assert 0 < back.opacity < 1
    assert gs.copy().equals(gs)


def test_viewset_requires_input_and_checks_shapes():
    cam = small_camera(8)
    with pytest.raises(ContractError):
        ViewSet([ViewRecord(cam, np.zeros((8, 8, 3)), Role.TEST)])
    with pytest.raises(ContractError):
        ViewRecord(cam, np.zeros((8, 9, 3)), Role.INPUT)


def test_scene_spec_validation():
    with pytest.raises(ConfigError):
        SceneSpec(num_input_views=0).validate()
    with pytest.raises(ConfigError):
        SceneSpec(scene_kind="forest").validate()
    spec = SceneSpec(seed=5, scene_kind="textured_room")
    assert SceneSpec.from_dict(spec.to_dict()) == spec


def test_synthetic_scene_has_nine_inputs_and_disjoint_roles(tiny_scene):
    _, views = make_synthetic_scene(SceneSpec(num_gaussians=20, image_size=(16, 16)))
    assert views.counts["input"] == 9
    assert views.counts["target"] == 12 and views.counts["test"] == 8
    all_idx = sorted(i for r in Role for i in views.indices(r))
    assert all_idx == list(range(len(views.views)))


@pytest.mark.parametrize("kind", ["blob_field", "textured_room"])
def test_synthetic_scene_deterministic(kind):
    spec = SceneSpec(scene_kind=kind, num_gaussians=40, image_size=(24, 24), seed=3)
    g1, v1 = make_synthetic_scene(spec)
    g2, v2 = make_synthetic_scene(spec)
    assert g1.equals(g2)
    for a, b in zip(v1.views, v2.views):
        assert a.camera.equals(b.camera) and np.array_equal(a.image, b.image) and a.role == b.role


def test_different_seeds_give_different_means():
    g1, _ = make_synthetic_scene(SceneSpec(num_gaussians=30, image_size=(16, 16), seed=1))
    g2, _ = make_synthetic_scene(SceneSpec(num_gaussians=30, image_size=(16, 16), seed=2))
    assert not np.array_equal(g1.means, g2.means)


def test_input_images_are_ground_truth_renders(blob_scene):
    gt, views = blob_scene
    for v in views.inputs:
        assert np.array_equal(render(gt, v.camera).image, v.image)
