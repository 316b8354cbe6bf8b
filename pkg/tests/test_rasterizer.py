import numpy as np
import pytest

from had_splat.errors import ContractError
from had_splat.rasterizer import (ALPHA_MAX, COV2D_DILATION, TRAIN_CUTOFF, RenderPass, project_gaussian, render,
                                  render_with_grad)
from had_splat.scene import GaussianPrimitive, GaussianSet, look_at

from conftest import random_set, small_camera
from oracles import finite_difference_check, reference_pixel, reference_splats


def _single(opacity_logit=0.3, color=(0.9, 0.2, 0.4), bg=(0.1, 0.1, 0.1), scale=0.2):
    p = GaussianPrimitive(np.zeros(3), np.log([scale] * 3), np.array([1.0, 0, 0, 0]), opacity_logit,
                          np.array([color]))
    return GaussianSet.from_primitives([p], bg)


def test_single_gaussian_centre_pixel_exact():
    # odd image, camera on the optical axis: the splat centre lies on a pixel centre
    cam = look_at([0, 0, 3], [0, 0, 0], 30, 30, 33, 33)
    gs = _single()
    img = render(gs, cam).image
    delta = 1.0 / (1.0 + np.exp(-0.3))
    c = np.array([0.9, 0.2, 0.4])
    assert np.array_equal(img[16, 16], c * delta + np.array([0.1, 0.1, 0.1]) * (1 - delta))


def test_compositing_matches_scalar_reference():
    rng = np.random.default_rng(1)
    for trial in range(5):
        gs = random_set(rng, 6, sh_degree=trial % 2)
        cam = small_camera(32)
        img = render(gs, cam).image
        splats = reference_splats(gs, cam)
        for _ in range(20):
            x, y = rng.integers(0, 32, size=2)
            assert np.abs(img[y, x] - reference_pixel(splats, gs.background, x, y)).max() < 1e-12


def test_alpha_clamped():
    cam = look_at([0, 0, 3], [0, 0, 0], 30, 30, 33, 33)
    gs = _single(opacity_logit=30.0, bg=(1.0, 1.0, 1.0), color=(0.0, 0.0, 0.0))
    out = render(gs, cam)
    assert out.image[16, 16, 0] == pytest.approx(1.0 - ALPHA_MAX, abs=1e-15)
    assert out.alpha[16, 16] == pytest.approx(ALPHA_MAX)


def test_empty_set_renders_background():
    cam = small_camera(16)
    out = render(GaussianSet.empty((0.2, 0.3, 0.4)), cam)
    assert np.all(out.image == np.array([0.2, 0.3, 0.4]))
    assert np.all(out.depth == 0) and np.all(out.alpha == 0)


def test_gaussian_behind_camera_is_culled():
    cam = look_at([0, 0, 3], [0, 0, 0], 30, 30, 16, 16)
    gs = _single()
    gs.means[0] = [0, 0, 5]  # behind the camera
    assert project_gaussian(gs.primitive(0), cam) is None
    assert np.allclose(render(gs, cam).image, 0.1)


def test_projection_of_isotropic_gaussian():
    cam = look_at([0, 0, 3], [0, 0, 0], 30, 30, 33, 33)
    sp = project_gaussian(_single(scale=0.2).primitive(0), cam)
    # J = diag(f/z, f/z) at the optical axis: cov2d = (f s / z)^2 I + dilation
    expected = (30 * 0.2 / 3.0) ** 2 + COV2D_DILATION
    assert np.allclose(sp.cov2d, np.diag([expected, expected]), atol=1e-12)
    assert np.allclose(sp.mean2d, [16.5, 16.5])
    assert sp.depth == pytest.approx(3.0)


def test_depth_is_alpha_normalized():
    cam = look_at([0, 0, 3], [0, 0, 0], 30, 30, 33, 33)
    out = render(_single(), cam)
    hit = out.alpha > 1e-6
    assert np.allclose(out.depth[hit], 3.0, atol=1e-12)
    assert np.all(out.depth[~hit] == 0)


def test_sorted_front_to_back():
    cam = look_at([0, 0, 3], [0, 0, 0], 30, 30, 33, 33)
    near = _single(opacity_logit=10.0, color=(1.0, 0.0, 0.0)).primitive(0)
    far = _single(opacity_logit=10.0, color=(0.0, 0.0, 1.0)).primitive(0)
    near.mean = np.array([0, 0, 0.5])
    far.mean = np.array([0, 0, -0.5])
    for order in ([near, far], [far, near]):
        img = render(GaussianSet.from_primitives(order), cam).image
        assert img[16, 16, 0] > 0.99 and img[16, 16, 2] < 0.01


@pytest.mark.parametrize("sh_degree", [0, 1])
def test_gradients_match_finite_differences(sh_degree):
    rng = np.random.default_rng(10 + sh_degree)
    gs = random_set(rng, 4, sh_degree=sh_degree)
    cam = small_camera(24)
    target = rng.uniform(size=(24, 24, 3))

    def loss(img):
        return float(np.mean((img - target) ** 2))

    img = render(gs, cam).image
    _, grads = render_with_grad(gs, cam, 2 * (img - target) / img.size)
    worst, where = finite_difference_check(gs, cam, loss, grads)
    assert worst < 1e-3, where


def test_render_pass_backward_shape_check():
    gs = random_set(np.random.default_rng(0), 3)
    rp = RenderPass(gs, small_camera(16))
    with pytest.raises(ContractError):
        rp.backward(np.zeros((16, 15, 3)))


def test_render_pass_matches_render_with_grad():
    rng = np.random.default_rng(4)
    gs = random_set(rng, 5)
    cam = small_camera(20)
    g = rng.normal(size=(20, 20, 3))
    rp = RenderPass(gs, cam)
    a = rp.backward(g)
    out, b = render_with_grad(gs, cam, g)
    assert np.array_equal(rp.output.image, out.image)
    for name in gs.PARAM_NAMES:
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_render_is_deterministic():
    gs = random_set(np.random.default_rng(2), 30, spread=0.8)
    cam = small_camera(32)
    g = np.random.default_rng(3).normal(size=(32, 32, 3))
    o1, g1 = render_with_grad(gs, cam, g)
    o2, g2 = render_with_grad(gs, cam, g)
    assert np.array_equal(o1.image, o2.image)
    assert all(np.array_equal(getattr(g1, n), getattr(g2, n)) for n in gs.PARAM_NAMES)


def test_training_cutoff_close_to_exact_render():
    gs = random_set(np.random.default_rng(5), 20)
    cam = small_camera(32)
    # dropping kernel values below 1/255 changes each pixel by at most a few such contributions
    diff = np.abs(render(gs, cam).image - render(gs, cam, TRAIN_CUTOFF).image).max()
    assert diff < 20 * TRAIN_CUTOFF


def test_quaternion_gradient_tangent_to_unit_sphere():
    rng = np.random.default_rng(8)
    gs = random_set(rng, 5)
    _, grads = render_with_grad(gs, small_camera(24), rng.normal(size=(24, 24, 3)))
    # the renderer normalizes quaternions, so the loss is invariant to scaling them
    radial = np.sum(grads.quats * gs.quats, axis=1)
    assert np.abs(radial).max() < 1e-10 * max(1.0, np.abs(grads.quats).max())
