import numpy as np
import pytest

from egofield.splat import render as R
from egofield.splat.camera import Camera, look_at
from egofield.splat.gaussians import PARAM_GROUPS, GaussianSet, load_checkpoint, logit, save_checkpoint
from egofield.splat.render import Background, project, render, render_backward

from conftest import random_scene

BACKENDS = R.available_backends()


def axis_camera(size=16, focal=20.0):
    return Camera(focal, focal, (size - 1) / 2, (size - 1) / 2, size, size, np.eye(3), np.zeros(3))


def one(position, scale=0.1, opacity=0.5, color=(0.2, 0.4, 0.6), feature=(1.0, -1.0), rotation=None):
    return GaussianSet.create([position], scale, color, opacity, features=np.array([feature]), rotations=rotation)


def quat_matrix(q):
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


# ------------------------------------------------------------- projection

def test_on_axis_projects_to_principal_point():
    cam = axis_camera()
    p = project(one([0.0, 0.0, 4.0]), 0, cam)
    np.testing.assert_allclose(p["mean2d"], [cam.cx, cam.cy], atol=1e-12)
    assert p["depth"] == pytest.approx(4.0)


def test_doubling_scale_quadruples_covariance():
    cam = axis_camera()
    a = project(one([0.1, -0.2, 3.0], scale=0.1), 0, cam)["cov2d"] - R.BLUR * np.eye(2)
    b = project(one([0.1, -0.2, 3.0], scale=0.2), 0, cam)["cov2d"] - R.BLUR * np.eye(2)
    np.testing.assert_allclose(b, 4.0 * a, rtol=1e-10)


def test_behind_camera_is_culled():
    assert project(one([0.0, 0.0, -1.0]), 0, axis_camera()) is None


@pytest.mark.parametrize("seed", range(5))
def test_cov2d_matches_numerical_jacobian(seed):
    """Push the 3D covariance through a finite-difference Jacobian of the pinhole map."""
    rng = np.random.default_rng(seed)
    cam = look_at(rng.normal(0, 0.5, 3) + [0, 0, -4], rng.normal(0, 0.2, 3), 32, 32, 55.0)
    q = rng.normal(size=4)
    s = rng.uniform(0.05, 0.3, 3)
    mu = rng.uniform(-0.5, 0.5, 3)
    g = GaussianSet.create([mu], s, 0.5, 0.5, features=np.zeros((1, 1)), rotations=[q])

    def pix(x):
        c = cam.to_camera(x[None])[0]
        return np.array([cam.fx * c[0] / c[2] + cam.cx, cam.fy * c[1] / c[2] + cam.cy])

    h = 1e-6
    jac = np.stack([(pix(mu + h * e) - pix(mu - h * e)) / (2 * h) for e in np.eye(3)], axis=1)
    rot = quat_matrix(q)
    sigma = rot @ np.diag(s**2) @ rot.T
    expected = jac @ sigma @ jac.T + R.BLUR * np.eye(2)
    got = project(g, 0, cam)
    np.testing.assert_allclose(got["cov2d"], expected, rtol=1e-5)
    np.testing.assert_allclose(got["mean2d"], pix(mu), rtol=1e-10)


# ------------------------------------------------------------ compositing

@pytest.mark.parametrize("backend", BACKENDS)
def test_empty_scene_is_background(backend):
    g = GaussianSet.create(np.zeros((0, 3)), 0.1, 0.5, 0.5, feature_dim=2)
    bg = Background.make((0.1, 0.2, 0.3), (1.0, 2.0))
    out = render(g, axis_camera(), bg, backend)
    assert np.all(out.rgb == [0.1, 0.2, 0.3])
    assert np.all(out.features == [1.0, 2.0])
    assert np.all(out.alpha == 0.0)


@pytest.mark.parametrize("backend", BACKENDS)
def test_single_term_compositing(backend):
    cam = axis_camera()
    # centre on a pixel exactly: cx = 7.5, so shift by half a pixel
    x = 0.5 * 4.0 / cam.fx
    g = one([x, x, 4.0], opacity=0.7, color=(0.2, 0.4, 0.6))
    bg = Background.make((1.0, 0.0, 0.5), (0.0, 0.0))
    out = render(g, cam, bg, backend)
    np.testing.assert_allclose(out.alpha[8, 8], 0.7, rtol=1e-12)
    np.testing.assert_allclose(out.rgb[8, 8], 0.7 * np.array([0.2, 0.4, 0.6]) + 0.3 * np.array([1.0, 0.0, 0.5]), rtol=1e-12)


@pytest.mark.parametrize("backend", BACKENDS)
def test_two_coincident_halves(backend):
    cam = axis_camera()
    near, far = 4.0, 4.001
    g = one([0.5 * near / cam.fx] * 2 + [near], opacity=0.5)
    g = g.concat(one([0.5 * far / cam.fx] * 2 + [far], opacity=0.5, color=(0.9, 0.9, 0.9)))
    out = render(g, cam, Background.make((0, 0, 0), (0.0, 0.0)), backend)
    assert out.alpha[8, 8] == pytest.approx(0.75, rel=1e-12)
    # nearer first: 0.5 * c_near + 0.25 * c_far
    np.testing.assert_allclose(out.rgb[8, 8], 0.5 * np.array([0.2, 0.4, 0.6]) + 0.25 * 0.9, rtol=1e-12)


def test_backends_agree():
    if len(BACKENDS) < 2:
        pytest.skip("compiled core not built")
    for seed in range(10):
        g, cam, bg, rng = random_scene(seed, n=12, size=20)
        a = render(g, cam, bg, "compiled")
        b = render(g, cam, bg, "python")
        np.testing.assert_allclose(a.rgb, b.rgb, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(a.features, b.features, rtol=1e-12, atol=1e-14)
        up_rgb, up_feat = rng.normal(size=a.rgb.shape), rng.normal(size=a.features.shape)
        ga = render_backward(a, up_rgb, up_feat)
        gb = render_backward(b, up_rgb, up_feat)
        for k in PARAM_GROUPS:
            np.testing.assert_allclose(ga.params()[k], gb.params()[k], rtol=1e-9, atol=1e-12)


@pytest.mark.parametrize("backend", BACKENDS)
def test_zero_upstream_gives_zero_gradients(backend):
    g, cam, bg, _ = random_scene(3)
    grads = render_backward(render(g, cam, bg, backend))
    for k, v in grads.params().items():
        assert not np.any(v), k


@pytest.mark.parametrize("backend", BACKENDS)
def test_color_gradient_is_blend_weight(backend):
    cam = axis_camera()
    x = 0.5 * 4.0 / cam.fx
    g = one([x, x, 4.0], opacity=0.7)
    out = render(g, cam, Background.make((0, 0, 0), (0.0, 0.0)), backend)
    up = np.zeros_like(out.rgb)
    up[8, 8, 1] = 1.0
    grads = render_backward(out, up)
    c = g.colors[0, 1]
    # d rgb / d color = weight 0.7; the raw parameter is a logit
    assert grads.color_logits[0, 1] == pytest.approx(0.7 * c * (1 - c), rel=1e-12)


@pytest.mark.parametrize("backend", BACKENDS)
def test_culled_gaussians_get_zero_gradient(backend):
    g, cam, bg, rng = random_scene(4)
    behind = GaussianSet.create([cam.center - 2.0 * cam.rotation[2]], 0.1, 0.5, 0.5, features=np.ones((1, 3)))
    g = g.concat(behind)
    out = render(g, cam, bg, backend)
    grads = render_backward(out, rng.normal(size=out.rgb.shape), rng.normal(size=out.features.shape))
    for v in grads.params().values():
        assert not np.any(v[-1])


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("backend", BACKENDS)
def test_gradients_match_finite_differences(seed, backend):
    g, cam, bg, rng = random_scene(seed, n=6)
    wr = rng.normal(size=(16, 16, 3))
    wf = rng.normal(size=(16, 16, 3))

    def loss(gg):
        o = render(gg, cam, bg, backend)
        return np.sum(o.rgb * wr) + np.sum(o.features * wf)

    grads = render_backward(render(g, cam, bg, backend), wr, wf).params()
    for name in PARAM_GROUPS:
        arr = getattr(g, name)
        for idx in np.ndindex(arr.shape):
            gp, gm = g.copy(), g.copy()
            getattr(gp, name)[idx] += 1e-5
            getattr(gm, name)[idx] -= 1e-5
            num = (loss(gp) - loss(gm)) / 2e-5
            a = grads[name][idx]
            assert abs(a - num) <= 1e-7 + 1e-4 * max(abs(a), abs(num)), (name, idx, a, num)


def test_permutation_invariance_bitwise():
    for seed in range(5):
        g, cam, bg, rng = random_scene(seed, n=15)
        perm = rng.permutation(len(g))
        a = render(g, cam, bg)
        b = render(g.subset(perm), cam, bg)
        assert a.rgb.tobytes() == b.rgb.tobytes()
        assert a.features.tobytes() == b.features.tobytes()


def test_exact_duplicates_are_order_free():
    g, cam, bg, _ = random_scene(1, n=4)
    g = g.concat(g.subset([0, 0]))
    a = render(g, cam, bg)
    b = render(g.subset(np.arange(len(g))[::-1].copy()), cam, bg)
    assert a.rgb.tobytes() == b.rgb.tobytes()


def test_feature_norm_bounded_by_largest_gaussian_feature():
    for seed in range(20):
        g, cam, _, _ = random_scene(seed, n=10)
        out = render(g, cam, Background.make((0, 0, 0), np.zeros(3)))
        assert np.all((out.alpha >= 0) & (out.alpha <= 1))
        bound = np.linalg.norm(g.features, axis=1).max()
        assert np.linalg.norm(out.features, axis=-1).max() <= bound * (1 + 1e-12)


def test_fallback_forced_by_env(monkeypatch):
    import importlib

    monkeypatch.setenv("EGOFIELD_BACKEND", "python")
    mod = importlib.reload(R)
    try:
        assert mod.BACKEND == "python"
    finally:
        monkeypatch.delenv("EGOFIELD_BACKEND")
        importlib.reload(R)


def test_unknown_backend():
    with pytest.raises(ValueError):
        R.get_kernels("gpu")


def test_background_dim_mismatch():
    g, cam, _, _ = random_scene(0)
    with pytest.raises(ValueError):
        render(g, cam, Background.make((0, 0, 0), np.zeros(2)))


# ------------------------------------------------------------ checkpoint

def test_checkpoint_roundtrip(tmp_path):
    g, _, _, _ = random_scene(2, n=5, d=4)
    save_checkpoint(tmp_path / "ck", g, iteration=7)
    h, manifest = load_checkpoint(tmp_path / "ck")
    assert manifest["N"] == "5" and manifest["d"] == "4" and manifest["iteration"] == "7"
    for k in PARAM_GROUPS:
        assert getattr(g, k).tobytes() == getattr(h, k).tobytes()


def test_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError, match="missing checkpoint"):
        load_checkpoint(tmp_path / "nope")


def test_activations_in_range():
    g = GaussianSet.create(np.zeros((3, 3)), 0.1, [[0.01, 0.5, 0.99]] * 3, [0.001, 0.5, 0.999], feature_dim=1)
    assert np.all((g.opacities > 0) & (g.opacities < 1))
    np.testing.assert_allclose(logit(g.opacities), g.opacity_logits)
