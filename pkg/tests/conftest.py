import numpy as np
import pytest

from had_splat.scene import GaussianSet, SceneSpec, look_at
from had_splat.synthetic import make_synthetic_scene


def random_set(rng, n, sh_degree=0, spread=0.6, background=None):
    """A small random GaussianSet in front of a camera looking at the origin."""
    k = 1 if sh_degree == 0 else 4
    sh = np.zeros((n, k, 3))
    sh[:, 0] = rng.uniform(0.1, 0.9, size=(n, 3))
    if k == 4:
        sh[:, 1:] = rng.normal(0, 0.15, size=(n, 3, 3))
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    bg = rng.uniform(0, 0.3, size=3) if background is None else background
    return GaussianSet(rng.uniform(-spread, spread, size=(n, 3)), np.log(rng.uniform(0.15, 0.4, size=(n, 3))),
                       q, rng.normal(0.5, 1.0, size=n), sh, bg)


def small_camera(size=32, eye=(0.3, 0.4, 3.0)):
    f = 0.5 * size / np.tan(np.radians(25))
    return look_at(np.array(eye), np.zeros(3), f, f, size, size)


@pytest.fixture(scope="session")
def blob_scene():
    return make_synthetic_scene(SceneSpec(seed=7))


@pytest.fixture(scope="session")
def tiny_scene():
    """Fewer views, used where only a few renders are needed."""
    return make_synthetic_scene(SceneSpec(num_gaussians=60, num_input_views=4, num_target_views=4,
                                          num_test_views=2, image_size=(32, 32), seed=11))


# criterion number -> (name, passed, detail); filled by the acceptance module
ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        name, ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}")
