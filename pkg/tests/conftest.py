import numpy as np
import pytest

from egofield.splat.camera import look_at
from egofield.splat.gaussians import GaussianSet
from egofield.splat.render import Background


def random_scene(seed: int, n: int = 8, d: int = 3, size: int = 16):
    """A handful of random Gaussians in front of a slightly perturbed camera."""
    rng = np.random.default_rng(seed)
    g = GaussianSet(
        positions=rng.uniform(-0.6, 0.6, (n, 3)),
        log_scales=np.log(rng.uniform(0.08, 0.3, (n, 3))),
        rotations=rng.normal(size=(n, 4)),
        opacity_logits=rng.normal(0.0, 1.5, n),
        color_logits=rng.normal(size=(n, 3)),
        features=rng.normal(size=(n, d)),
    )
    cam = look_at(rng.normal(0.0, 0.3, 3) + [0.0, 0.0, -3.0], [0.0, 0.0, 0.0], size, size, 50.0)
    bg = Background.make(rng.uniform(size=3), rng.normal(size=d))
    return g, cam, bg, rng


@pytest.fixture
def scene_factory():
    return random_scene


# acceptance results, filled by test_acceptance.py and reported once at the end
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
