import numpy as np
import pytest

from egofield.scene import (
    SceneError, SceneObject, SceneSpec, default_benchmark_spec, generate, occluders, read_frames,
    read_scene_spec, render_frame, solo_mask, visibility, write_frames, write_scene_spec,
)
from egofield.splat.camera import look_at


def single(objects, **kw):
    kw.setdefault("n_frames", 3)
    kw.setdefault("width", 32)
    kw.setdefault("height", 32)
    kw.setdefault("arc_radius", 0.0)
    kw.setdefault("jitter_deg", 0.0)
    return SceneSpec(objects=objects, **kw)


def test_sphere_covers_centre_pixel_only():
    spec = single([SceneObject(1, "s", "sphere", [0, 0, 0], [0.5], "s", [1, 0, 0])])
    fr = render_frame(spec, spec.cameras()[0], 0)
    assert fr.instance_id[16, 16] == 1 and fr.instance_id[15, 15] == 1
    assert fr.instance_id[0, 0] == 0
    np.testing.assert_allclose(fr.rgb[0, 0], spec.background)
    # footprint radius in pixels: atan(r / sqrt(d^2 - r^2)) under the pinhole
    f = spec.cameras()[0].fx
    r_px = f * 0.5 / np.sqrt(25 - 0.25)
    assert abs(np.count_nonzero(fr.instance_id) - np.pi * r_px**2) < 2 * np.pi * r_px


def test_nearer_object_wins():
    near = SceneObject(1, "a", "sphere", [0, 0, -1], [0.3], "a", [1, 0, 0])
    far = SceneObject(2, "b", "box", [0, 0, 1], [1, 1, 0.2], "b", [0, 1, 0])
    spec = single([far, near])
    fr = render_frame(spec, spec.cameras()[0], 0)
    assert fr.instance_id[16, 16] == 1
    assert 2 in fr.instance_id


def test_half_covered_disc_visibility():
    # a box occluder whose edge passes through the disc centre
    disc = SceneObject(1, "d", "sphere", [0, 0, 2], [0.6], "d", [1, 1, 1])
    wall = SceneObject(2, "w", "box", [-1.0, 0, 0], [1.0, 2.0, 0.05], "w", [0, 0, 1])
    spec = single([disc, wall], width=64, height=64)
    fr = render_frame(spec, spec.cameras()[0], 0)
    v = visibility(fr, 1, spec)
    assert not v.out_of_view
    assert v.fraction == pytest.approx(0.5, abs=0.05)
    occ = occluders(fr, 1, spec)
    assert set(occ) == {2}
    assert occ[2] + np.count_nonzero(fr.instance_id == 1) == np.count_nonzero(solo_mask(fr, 1, spec))


def test_out_of_view_visibility():
    spec = single([SceneObject(1, "s", "sphere", [0, 0, 0], [0.5], "s", [1, 0, 0]),
                   SceneObject(2, "t", "sphere", [0, 0, -10], [0.5], "t", [1, 0, 0])])
    fr = render_frame(spec, spec.cameras()[0], 0)
    assert visibility(fr, 2, spec) == (0.0, True)


def test_camera_inside_object_is_degenerate():
    spec = single([SceneObject(1, "s", "sphere", [0, 0, -5], [0.5], "s", [1, 0, 0])])
    with pytest.raises(SceneError, match="degenerate camera"):
        render_frame(spec, spec.cameras()[0], 0)
    spec = single([SceneObject(1, "b", "box", [0, 0, -5], [0.5, 0.5, 0.5], "b", [1, 0, 0])])
    with pytest.raises(SceneError, match="degenerate camera"):
        render_frame(spec, spec.cameras()[0], 0)


def test_spec_validation():
    with pytest.raises(SceneError):
        SceneObject(1, "x", "cone", [0, 0, 0], [1], "x", [0, 0, 0])
    with pytest.raises(SceneError, match="static"):
        SceneSpec([SceneObject(1, "x", "sphere", [0, 0, 0], [1], "x", [0, 0, 0], transient=True)])
    with pytest.raises(SceneError, match="unique"):
        o = SceneObject(1, "x", "sphere", [0, 0, 0], [1], "x", [0, 0, 0])
        SceneSpec([o, o])


def test_path_interpolation():
    o = SceneObject(1, "x", "sphere", [0, 0, 0], [1], "x", [0, 0, 0], path=[[0, 0, 0], [1, 0, 0], [1, 2, 0]])
    np.testing.assert_allclose(o.center_at(0, 5), [0, 0, 0])
    np.testing.assert_allclose(o.center_at(1, 5), [0.5, 0, 0])
    np.testing.assert_allclose(o.center_at(2, 5), [1, 0, 0])
    np.testing.assert_allclose(o.center_at(4, 5), [1, 2, 0])


def test_split_is_disjoint_and_covering():
    spec = default_benchmark_spec()
    held, train = spec.heldout_frames(), spec.train_frames()
    assert held == list(range(3, 60, 6))
    assert not set(held) & set(train)
    assert sorted(held + train) == list(range(60))


@pytest.fixture(scope="module")
def default_frames():
    spec = default_benchmark_spec()
    return spec, generate(spec)


def test_default_benchmark_shape(default_frames):
    spec, frames = default_frames
    assert len(spec.static_objects) == 5 and len(spec.transient_objects) == 2
    assert len(frames) == 60
    for fr in frames:
        assert fr.rgb.shape == (64, 64, 3)
        frac = fr.transient_gt.mean()
        assert 0.01 <= frac <= 0.30
        assert np.array_equal(fr.transient_gt, np.isin(fr.instance_id, [6, 7]))
    seen = set(np.unique(np.concatenate([f.instance_id.ravel() for f in frames])))
    assert seen == {0, 1, 2, 3, 4, 5, 6, 7}


def test_default_benchmark_has_occluded_static_views(default_frames):
    spec, frames = default_frames
    occluded = 0
    for j in spec.train_frames():
        v = visibility(frames[j], 3, spec)
        occluded += (not v.out_of_view) and v.fraction < 0.5
    assert 0 < occluded <= 0.25 * len(spec.train_frames())


def test_generation_is_deterministic(default_frames):
    spec, frames = default_frames
    again = generate(default_benchmark_spec())
    for a, b in zip(frames, again):
        assert a.rgb.tobytes() == b.rgb.tobytes()
        assert a.instance_id.tobytes() == b.instance_id.tobytes()
    other = default_benchmark_spec(seed=1).cameras()
    assert not np.array_equal(other[5].rotation, frames[5].camera.rotation)


def test_spec_roundtrip(tmp_path):
    spec = default_benchmark_spec(seed=4)
    write_scene_spec(tmp_path / "s.ini", spec)
    back = read_scene_spec(tmp_path / "s.ini")
    assert back.seed == 4 and back.n_frames == spec.n_frames
    for a, b in zip(spec.objects, back.objects):
        assert (a.id, a.name, a.primitive, a.category, a.transient) == (b.id, b.name, b.primitive, b.category, b.transient)
        np.testing.assert_array_equal(a.center, b.center)
        if a.path is not None:
            np.testing.assert_array_equal(a.path, b.path)
    a, b = generate(spec)[7], generate(back)[7]
    assert a.rgb.tobytes() == b.rgb.tobytes()


def test_missing_spec(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_scene_spec(tmp_path / "none.ini")


def test_frames_roundtrip(tmp_path):
    spec = single([SceneObject(1, "s", "sphere", [0, 0, 0], [0.5], "s", [1, 0, 0])])
    frames = generate(spec)
    write_frames(tmp_path, frames)
    back = read_frames(tmp_path)
    assert [f.index for f in back] == [0, 1, 2]
    for a, b in zip(frames, back):
        assert a.rgb.tobytes() == b.rgb.tobytes()
        assert np.array_equal(a.instance_id, b.instance_id)
        assert np.array_equal(a.transient_gt, b.transient_gt)
        np.testing.assert_array_equal(a.camera.as_array(), b.camera.as_array())
    with pytest.raises(FileNotFoundError):
        read_frames(tmp_path / "empty")


def test_look_at_centres_target():
    cam = look_at([0.3, -0.2, -4.0], [0.1, 0.2, 0.5], 31, 31, 50.0)
    c = cam.to_camera(np.array([[0.1, 0.2, 0.5]]))[0]
    assert abs(c[0]) < 1e-12 and abs(c[1]) < 1e-12 and c[2] > 0
