import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from panfield import diffmath as dm
from panfield import fields as F
from panfield import renderer as rd
from panfield import scene as sc

CLASSES = ["sky", "road", "building", "pole", "car"]


def toy_scene(things=None, seed=0, f64=True):
    stuff = F.init_biased(F.stuff_config("toy", len(CLASSES)), F.STUFF, seed)
    s = sc.SceneModel(stuff, things or [], CLASSES, ((-10, -10, -10), (10, 10, 10)))
    return s.astype(np.float64) if f64 else s


def make_thing(instance_id, seed=0, **kw):
    args = dict(instance_id=instance_id, category=4, extent=(2.0, 2.0, 2.0),
                times=[0.0], rotations=[np.eye(3)], translations=[(0.0, 0.0, 0.0)])
    args.update(kw)
    track = sc.ObjectTrack(**args)
    return sc.Thing(track, F.init_biased(F.thing_config("toy"), F.THING, seed))


def reference_composite(ts, deltas, sigma, feats):
    """Loop-form oracle: running-product transmittance, per-sample weights."""
    n = len(ts)
    t_run = 1.0
    w = np.zeros(n)
    for i in range(n):
        a = 1.0 - np.exp(-sigma[i] * deltas[i])
        w[i] = t_run * a
        t_run *= 1.0 - a
    out = {k: np.tensordot(w, v, axes=([0], [0])) for k, v in feats.items()}
    return w, w.sum(), float(np.dot(w, ts)), out


# ---------------------------------------------------------------------------
# Sampling


def test_sample_points_two_bins():
    ray = rd.Ray((0, 0, 0), (0, 0, 1), 0.0, 1.0)
    pts = rd.sample_points(ray, 2)
    assert pts[0] == (0.25, 0.5)
    assert pts[1] == (0.75, 0.25)


def test_deltas_telescope_under_jitter():
    ts, deltas = rd.stratified_ts(1.0, 5.0, 3, 64, jitter=True,
                                  rng=np.random.default_rng(3))
    assert np.allclose(deltas[:, :-1], ts[:, 1:] - ts[:, :-1])
    assert np.allclose(deltas[:, -1], 5.0 - ts[:, -1])
    assert np.allclose(deltas.sum(axis=1), 5.0 - ts[:, 0])
    assert np.all(deltas > 0)


def test_jitter_stays_in_bins_and_is_seeded():
    edges = np.linspace(0.0, 1.0, 17)
    for seed in (0, 1, 2):
        ts, _ = rd.stratified_ts(0.0, 1.0, 4, 16, jitter=True,
                                 rng=np.random.default_rng(seed))
        assert np.all(ts >= edges[None, :-1]) and np.all(ts <= edges[None, 1:])
    a, _ = rd.stratified_ts(0.0, 1.0, 2, 8, True, np.random.default_rng(9))
    b, _ = rd.stratified_ts(0.0, 1.0, 2, 8, True, np.random.default_rng(9))
    c, _ = rd.stratified_ts(0.0, 1.0, 2, 8, True, np.random.default_rng(10))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_sampling_rejects_degenerate_inputs():
    with pytest.raises(ValueError):
        rd.stratified_ts(0.0, 1.0, 1, 1, False)
    with pytest.raises(ValueError):
        rd.Ray((0, 0, 0), (0, 0, 1), 1.0, 1.0)
    with pytest.raises(ValueError):
        rd.Ray((0, 0, 0), (0, 0, 2), 0.0, 1.0)


# ---------------------------------------------------------------------------
# Compositing math


def test_composite_two_sample_hand_case():
    # sigma=(1,2), delta=(0.5,0.25): worked end to end by hand here
    a1 = 1 - np.exp(-0.5)
    t2 = np.exp(-0.5)
    a2 = 1 - np.exp(-0.5)
    w1, w2 = a1, t2 * a2
    samples = [
        (0.25, 0.5, sc.PanopticSample(1.0, np.array([1.0, 0, 0]),
                                      np.array([2.0, 0.0]), np.array([1.0, 0.0]))),
        (0.75, 0.25, sc.PanopticSample(2.0, np.array([0, 1.0, 0]),
                                       np.array([0.0, 4.0]), np.array([0.0, 3.0]))),
    ]
    px = rd.composite(samples, background=(0.0, 0.0, 1.0))
    assert np.allclose(px.weights, [w1, w2], atol=1e-12)
    assert abs(px.opacity - (w1 + w2)) < 1e-12
    want_color = w1 * np.array([1, 0, 0]) + w2 * np.array([0, 1, 0]) \
        + (1 - w1 - w2) * np.array([0, 0, 1])
    assert np.allclose(px.color, want_color, atol=1e-12)
    assert abs(px.depth - (w1 * 0.25 + w2 * 0.75)) < 1e-12
    assert np.allclose(px.semantic_logits, [2 * w1, 4 * w2], atol=1e-12)
    assert np.allclose(px.instance_logits, [w1, 3 * w2], atol=1e-12)


def test_composite_matches_loop_oracle():
    rng = np.random.default_rng(5)
    ts, deltas = rd.stratified_ts(0.3, 4.0, 1, 48, True, rng)
    sigma = rng.uniform(0.0, 3.0, 48)
    color = rng.uniform(0, 1, (48, 3))
    w_ref, op_ref, depth_ref, out_ref = reference_composite(
        ts[0], deltas[0], sigma, {"color": color})
    out = rd.composite_arrays(ts, deltas, sigma[None], {"color": color[None]})
    assert np.allclose(out["weights"][0], w_ref, atol=1e-12)
    assert abs(out["opacity"][0] - op_ref) < 1e-12
    assert abs(out["depth"][0] - depth_ref) < 1e-12
    assert np.allclose(out["color"][0], out_ref["color"], atol=1e-12)


def test_constant_density_opacity_closed_form():
    # discrete sum telescopes exactly; continuum limit within 1e-3 at n=4096
    sigma, t0, t1, n = 1.0, 0.0, 2.0, 4096
    ts, deltas = rd.stratified_ts(t0, t1, 1, n, False)
    out = rd.composite_arrays(ts, deltas, np.full((1, n), sigma), {})
    exact_discrete = 1.0 - np.exp(-sigma * (t1 - ts[0, 0]))
    assert abs(out["opacity"][0] - exact_discrete) < 1e-12
    assert abs(out["opacity"][0] - (1.0 - np.exp(-sigma * (t1 - t0)))) < 1e-3


def test_constant_density_depth_integral():
    # E[t] = int_0^L t sigma e^(-sigma t) dt = 1 - 3 e^-2 for sigma=1, L=2
    n = 4096
    ts, deltas = rd.stratified_ts(0.0, 2.0, 1, n, False)
    out = rd.composite_arrays(ts, deltas, np.ones((1, n)), {})
    assert abs(out["depth"][0] - (1.0 - 3.0 * np.exp(-2.0))) < 1e-3
    opacity = out["opacity"][0]
    norm = out["depth"][0] / max(opacity, 1e-8)
    px = rd.composite(
        [(t, d, sc.PanopticSample(1.0, np.zeros(3), np.zeros(2), np.zeros(2)))
         for t, d in zip(ts[0], deltas[0])], normalize_depth=True)
    assert abs(px.depth - norm) < 1e-12


def test_empty_ray_returns_background():
    n = 16
    ts, deltas = rd.stratified_ts(0.0, 1.0, 1, n, False)
    out = rd.composite_arrays(ts, deltas, np.zeros((1, n)),
                              {"color": np.ones((1, n, 3))},
                              background=(0.2, 0.4, 0.6))
    assert np.allclose(out["color"][0], [0.2, 0.4, 0.6], atol=1e-15)
    assert out["opacity"][0] == 0.0


def test_opaque_wall_occludes():
    n = 32
    ts, deltas = rd.stratified_ts(0.0, 2.0, 1, n, False)
    sigma = np.zeros(n)
    sigma[4] = 1e4  # optically thick slab
    color = np.zeros((n, 3))
    color[4] = (1, 0, 0)
    color[20] = (0, 1, 0)  # hidden behind the wall
    out = rd.composite_arrays(ts, deltas, sigma[None], {"color": color[None]})
    assert np.allclose(out["color"][0], [1, 0, 0], atol=1e-9)
    assert out["weights"][0][20] < 1e-12
    assert abs(out["depth"][0] - ts[0, 4]) < 1e-6


@settings(deadline=None, max_examples=40)
@given(st.lists(st.floats(0.0, 50.0), min_size=2, max_size=24))
def test_weight_invariants(sig):
    n = len(sig)
    sigma = np.array(sig)
    ts, deltas = rd.stratified_ts(0.1, 3.0, 1, n, False)
    out = rd.composite_arrays(ts, deltas, sigma[None], {})
    w = out["weights"][0]
    assert np.all(w >= 0)
    total = out["opacity"][0]
    assert -1e-12 <= total <= 1.0 + 1e-12
    assert abs(total - (1.0 - np.exp(-np.dot(sigma, deltas[0])))) < 1e-9
    trans = np.exp(-np.cumsum(sigma * deltas[0]))
    assert np.all(np.diff(trans) <= 1e-15)


def test_inserting_opaque_sample_reduces_later_weights():
    rng = np.random.default_rng(11)
    n = 20
    ts, deltas = rd.stratified_ts(0.1, 3.0, 1, n, False)
    sigma = rng.uniform(0.2, 2.0, n)
    base = rd.composite_arrays(ts, deltas, sigma[None], {})["weights"][0]
    m = 7
    blocked = sigma.copy()
    blocked[m] += 10.0
    after = rd.composite_arrays(ts, deltas, blocked[None], {})["weights"][0]
    assert np.all(after[m + 1:] < base[m + 1:])
    assert np.allclose(after[:m], base[:m])


def test_composite_gradient_matches_fd():
    n = 12
    rng = np.random.default_rng(2)
    ts, deltas = rd.stratified_ts(0.2, 2.0, 1, n, False)
    color = rng.uniform(0, 1, (1, n, 3))
    coeff = rng.normal(0, 1, 3)

    def loss_fn(leaves):
        sigma = dm.reshape(leaves["sigma"], (1, n))
        out = rd.composite_arrays(ts, deltas, sigma, {"color": color},
                                  background=(0.3, 0.3, 0.3))
        return dm.add(dm.reduce_sum(dm.mul(out["color"], coeff)),
                      dm.reduce_sum(out["depth"]))

    pv = dm.ParamVector.build([("sigma", (n,))], dtype=np.float64)
    pv.set("sigma", rng.uniform(0.1, 2.0, n))
    val, grad = dm.forward_backward(loss_fn, pv)
    fd = dm.fd_gradient(loss_fn, pv, np.arange(n))
    assert np.allclose(grad, fd, rtol=1e-6, atol=1e-8)


# ---------------------------------------------------------------------------
# Scene rendering


def test_render_ray_matches_manual_pipeline():
    scene = toy_scene([make_thing(1)])
    ray = rd.Ray((0, 0, -4), (0, 0, 1), 1.0, 8.0)
    n = 64
    px = rd.render_ray(scene, ray, 0.0, n)
    ts, deltas = rd.stratified_ts(1.0, 8.0, 1, n, False)
    pts = ray.origin + ts[0][:, None] * ray.direction
    ch = sc.compose_batch(scene, pts, np.broadcast_to(ray.direction, (n, 3)), 0.0)
    w_ref, op_ref, depth_ref, out_ref = reference_composite(
        ts[0], deltas[0], ch["density"],
        {"color": ch["color"], "sem": ch["semantic"], "inst": ch["instance"]})
    assert np.allclose(px.weights, w_ref, atol=1e-12)
    assert abs(px.opacity - op_ref) < 1e-12
    want_color = out_ref["color"] + (1 - op_ref) * scene.background
    assert np.allclose(px.color, want_color, atol=1e-12)
    assert np.allclose(px.semantic_logits, out_ref["sem"], atol=1e-12)
    assert np.allclose(px.instance_logits, out_ref["inst"], atol=1e-12)


def center_camera(w=6, h=4, z=-6.0):
    return rd.Camera(fx=8.0, fy=8.0, cx=w / 2, cy=h / 2, width=w, height=h,
                     rotation=np.eye(3), translation=(0.0, 0.0, z))


def test_render_image_pixel_equals_render_ray():
    scene = toy_scene([make_thing(1)])
    cam = center_camera()
    img = rd.render_image(scene, cam, 0.0, n=32, t_near=1.0, t_far=12.0)
    dirs = cam.ray_directions().reshape(cam.height, cam.width, 3)
    for (i, j) in [(0, 0), (2, 3), (3, 5)]:
        ray = rd.Ray(cam.translation, dirs[i, j], 1.0, 12.0)
        px = rd.render_ray(scene, ray, 0.0, 32)
        assert np.allclose(img.color[i, j], px.color, atol=1e-12)
        assert abs(img.depth[i, j] - px.depth) < 1e-12
        assert abs(img.opacity[i, j] - px.opacity) < 1e-12


def test_render_image_threads_deterministic():
    scene = toy_scene([make_thing(1)], f64=False)
    cam = center_camera(w=16, h=8)
    a = rd.render_image(scene, cam, 0.0, n=24, threads=1)
    b = rd.render_image(scene, cam, 0.0, n=24, threads=3)
    assert np.array_equal(a.color, b.color)
    assert np.array_equal(a.depth, b.depth)
    assert np.array_equal(a.semantic, b.semantic)
    assert np.array_equal(a.instance, b.instance)


def test_seeded_jitter_render_is_reproducible():
    scene = toy_scene([make_thing(1)], f64=False)
    cam = center_camera(w=8, h=4)
    a = rd.render_image(scene, cam, 0.0, n=16, jitter=True, seed=7)
    b = rd.render_image(scene, cam, 0.0, n=16, jitter=True, seed=7)
    c = rd.render_image(scene, cam, 0.0, n=16, jitter=True, seed=8)
    assert np.array_equal(a.color, b.color)
    assert not np.array_equal(a.color, c.color)


def test_dynamic_render_equals_frozen_interpolated_pose():
    rot0, rot1 = np.eye(3), np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1]])
    moving = make_thing(1, times=[0.0, 1.0], rotations=[rot0, rot1],
                        translations=[(-1.0, 0, 0), (1.0, 0, 0)])
    scene_m = toy_scene([moving])
    r_mid, t_mid = sc.pose_at(moving.track, 0.5)
    frozen = make_thing(1, times=[0.5], rotations=[r_mid],
                        translations=[t_mid])
    scene_f = toy_scene([frozen])
    cam = center_camera(w=10, h=6)
    img_m = rd.render_image(scene_m, cam, 0.5, n=24, t_near=1.0, t_far=12.0)
    img_f = rd.render_image(scene_f, cam, 0.5, n=24, t_near=1.0, t_far=12.0)
    assert np.array_equal(img_m.color, img_f.color)
    assert np.array_equal(img_m.depth, img_f.depth)
    assert np.array_equal(img_m.instance, img_f.instance)


def test_low_opacity_pixels_get_background_labels():
    scene = toy_scene()
    # push stuff density to effectively zero everywhere
    db = scene.stuff.params.view("density/b")
    db[:] = -30.0
    cam = center_camera(w=4, h=2)
    img = rd.render_image(scene, cam, 0.0, n=16, background=(0.1, 0.2, 0.3))
    assert np.all(img.opacity < rd.OPACITY_FLOOR)
    assert np.all(img.semantic == 0)
    assert np.all(img.instance == 0)
    assert np.allclose(img.color, np.array([0.1, 0.2, 0.3]), atol=1e-6)


def test_thing_pixel_takes_category_and_instance_label():
    thing = make_thing(3, category=4)
    scene = toy_scene([thing])
    scene.stuff.params.view("density/b")[:] = -30.0  # isolate the thing
    cam = center_camera(w=5, h=5, z=-4.0)
    img = rd.render_image(scene, cam, 0.0, n=96, t_near=1.0, t_far=8.0)
    ci, cj = 2, 2  # box center projects here
    assert img.opacity[ci, cj] > 0.5
    assert img.semantic[ci, cj] == 4
    assert img.instance[ci, cj] == 3
    assert img.instance.max() == 3  # slots sized to highest id


def test_fresh_init_rays_are_near_background():
    # low starting stuff density keeps object-free rays nearly transparent
    scene = toy_scene(f64=False, seed=1)
    ray = rd.Ray((0, 0, -4), (0, 0, 1), 1.0, 6.0)
    px = rd.render_ray(scene, ray, 0.0, 128)
    assert px.opacity < 0.05
    for seed in range(4):
        img = rd.render_image(toy_scene(f64=False, seed=seed), center_camera(),
                              0.0, n=64, t_near=1.0, t_far=6.0)
        assert img.opacity.mean() < 0.05
        assert img.opacity.max() < 0.1


def test_opaque_box_depth_at_entry_face():
    thing = make_thing(2, category=4)
    scene = toy_scene([thing])
    scene.stuff.params.view("density/b")[:] = -30.0
    scene.thing_by_id(2).field.params.view("density/b")[:] = 50.0
    n = 96
    ray = rd.Ray((0, 0, -4), (0, 0, 1), 1.0, 8.0)
    px = rd.render_ray(scene, ray, 0.0, n)
    assert px.opacity > 0.999
    assert np.argmax(px.instance_logits) == 2
    bin_w = (8.0 - 1.0) / n
    assert abs(px.depth - 3.0) < bin_w  # box entry face at t = 3


def test_box_filling_frame_labels_every_pixel():
    thing = make_thing(1, category=2, extent=(2.0, 2.0, 2.0))
    scene = toy_scene([thing])
    scene.stuff.params.view("density/b")[:] = -30.0
    scene.thing_by_id(1).field.params.view("density/b")[:] = 50.0
    cam = rd.Camera(fx=2.0, fy=2.0, cx=2.0, cy=2.0, width=4, height=4,
                    rotation=np.eye(3), translation=(0.0, 0.0, -2.2))
    img = rd.render_image(scene, cam, 0.0, n=64, t_near=0.5, t_far=4.0)
    assert np.all(img.semantic == 2)
    assert np.all(img.instance == 1)
    assert np.all(img.opacity > 0.99)


def test_camera_ray_geometry():
    cam = center_camera(w=4, h=4)
    dirs = cam.ray_directions().reshape(4, 4, 3)
    assert np.allclose(np.linalg.norm(dirs, axis=-1), 1.0, atol=1e-12)
    # cx=cy=2: pixel centers straddle the axis symmetrically
    assert np.allclose(dirs[1, 1] + dirs[2, 2], 2 * dirs[1, 1] + (dirs[2, 2] - dirs[1, 1]))
    assert dirs[0, 0][0] < 0 and dirs[0, 0][1] < 0
    assert dirs[3, 3][0] > 0 and dirs[3, 3][1] > 0
    mid = cam.ray_directions(np.array([0]))[0]
    assert mid.shape == (3,)
    with pytest.raises(ValueError):
        rd.Camera(0.0, 1.0, 1.0, 1.0, 2, 2, np.eye(3), np.zeros(3))
    with pytest.raises(ValueError):
        rd.Camera(1.0, 1.0, 1.0, 1.0, 2, 2, np.eye(3) * 2.0, np.zeros(3))


def test_default_t_range_reaches_bounds():
    scene = toy_scene()
    cam = center_camera(z=-15.0)
    near, far = rd.default_t_range(scene, cam)
    assert near == 0.05
    # farthest corner of the (+/-10)^3 box from (0,0,-15)
    want = np.linalg.norm([10.0, 10.0, 25.0])
    assert abs(far - want) < 1e-9


# ---------------------------------------------------------------------------
# Image files


def test_ppm_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 1, (5, 7, 3))
    p = tmp_path / "x.ppm"
    rd.write_ppm(p, img)
    back = rd.read_ppm(p)
    assert back.shape == (5, 7, 3)
    assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-9


def test_pgm16_depth_roundtrip(tmp_path):
    depth = np.array([[0.0, 1.2345], [3.3333, 65.535]])
    p = tmp_path / "d.pgm"
    rd.write_pgm16(p, depth)
    back = rd.read_pgm16(p)
    assert np.max(np.abs(back - depth)) <= 0.5e-3 + 1e-12


def test_pgm8_label_roundtrip(tmp_path):
    lab = np.array([[0, 3], [255, 7]])
    p = tmp_path / "l.pgm"
    rd.write_pgm8(p, lab)
    assert np.array_equal(rd.read_pgm8(p), lab)
    with pytest.raises(ValueError):
        rd.write_pgm8(p, np.array([[300]]))


def test_reader_rejects_wrong_magic(tmp_path):
    p = tmp_path / "bad.ppm"
    p.write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(ValueError):
        rd.read_ppm(p)
    with pytest.raises(ValueError):
        rd.read_pgm16(p)
    with pytest.raises(ValueError):
        rd.read_pgm8(p)


def test_save_channels_writes_full_set(tmp_path):
    scene = toy_scene([make_thing(1)], f64=False)
    cam = center_camera(w=6, h=4)
    img = rd.render_image(scene, cam, 0.0, n=16)
    paths = rd.save_channels(img, tmp_path, "frame0", class_table=CLASSES)
    for key in ("color", "depth", "semantic", "instance", "raw", "labels"):
        assert os.path.exists(paths[key])
    back = rd.load_channels(paths["raw"])
    assert np.allclose(back.color, img.color, atol=1e-6)
    assert np.array_equal(back.semantic, img.semantic)
    assert np.array_equal(back.instance, img.instance)
    assert np.allclose(back.depth, img.depth, atol=1e-4)
