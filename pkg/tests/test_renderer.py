import itertools

import numpy as np
import pytest

from apc.moments import ReconstructionParams
from apc.renderer import (
    ColorImage,
    MomentImage,
    depth_bounds,
    march_brick,
    render_front_to_back,
    render_moment_pass,
    render_resolve_pass,
    render_segment_pass,
    render_single_node_mboit,
)
from apc.scene import Camera, grid_split, make_sandwich_scene, make_slab_scene, split_brick
from oracles import homogeneous_absorbance, homogeneous_front_to_back, opacity_corrected

PARAMS = ReconstructionParams()
STEP = 0.5


def axis_camera(scene, width=9, height=9, distance=40.0):
    """Camera on the +z side whose centre ray hits the scene perpendicular to the slabs."""
    lo, hi = scene.bounds()
    center = 0.5 * (lo + hi)
    return Camera(tuple(center + [0, 0, distance]), tuple(center), (0, 1, 0), fov_deg=10.0)


def test_empty_rank_gives_zero_images():
    scene = make_slab_scene(resolution=4, thickness=2)
    cam = axis_camera(scene)
    bounds = depth_bounds(scene.bricks, cam)
    moments = render_moment_pass([], cam, scene.transfer_function, STEP, bounds, 5, 5)
    assert not moments.data.any()
    color = render_resolve_pass([], cam, scene.transfer_function, STEP, moments, PARAMS, bounds)
    assert not color.data.any()
    assert len(render_segment_pass([], cam, scene.transfer_function, STEP, 5, 5)) == 0
    assert not render_single_node_mboit([], cam, scene.transfer_function, STEP, PARAMS, 5, 5).data.any()


@pytest.mark.parametrize("step", [0.5, 0.25, 1.0])
def test_homogeneous_slab_b0_closed_form(step):
    thickness = 8
    scene = make_slab_scene(resolution=16, thickness=thickness, opacity=0.1, homogeneous=True)
    cam = axis_camera(scene)
    tf = scene.transfer_function
    bounds = depth_bounds(scene.bricks, cam)
    image = render_moment_pass(scene.bricks, cam, tf, step, bounds, 9, 9)
    alpha = opacity_corrected(tf(np.array([0.5]))[0, 3], step, tf.reference_step)
    steps = round(thickness / step)
    expected = homogeneous_absorbance(alpha, steps)
    assert image.sample_count[4, 4] == steps
    assert image.data[4, 4, 0] == pytest.approx(expected, rel=1e-6)


def test_complementary_halves_add_up():
    scene = make_slab_scene(resolution=16, thickness=8)
    cam = scene.default_cameras(1, elevation_deg=20.0)[0]
    tf = scene.transfer_function
    bounds = depth_bounds(scene.bricks, cam)
    full = render_moment_pass(scene.bricks, cam, tf, STEP, bounds, 32, 32)
    halves = split_brick(scene.bricks[0], 0, 7)
    parts = [render_moment_pass([h], cam, tf, STEP, bounds, 32, 32) for h in halves]
    summed = parts[0].data + parts[1].data
    scale = np.maximum(np.abs(full.data), full.data[..., :1])
    assert np.all(np.abs(summed - full.data) <= 1e-10 * scale + 1e-300)
    np.testing.assert_array_equal(parts[0].sample_count + parts[1].sample_count, full.sample_count)


def test_single_rank_resolve_is_single_node():
    scene = make_slab_scene(resolution=8, thickness=4)
    cam = scene.default_cameras(1)[0]
    tf = scene.transfer_function
    bounds = depth_bounds(scene.bricks, cam)
    moments = render_moment_pass(scene.bricks, cam, tf, STEP, bounds, 16, 16)
    resolved = render_resolve_pass(scene.bricks, cam, tf, STEP, moments, PARAMS, bounds)
    single = render_single_node_mboit(scene.bricks, cam, tf, STEP, PARAMS, 16, 16)
    np.testing.assert_array_equal(resolved.data, single.data)


def rank_partials(scene, cam, width, height):
    tf = scene.transfer_function
    bounds = depth_bounds(scene.bricks, cam)
    moments = [render_moment_pass(scene.bricks_of(r), cam, tf, STEP, bounds, width, height)
               for r in range(scene.ranks)]
    total = MomentImage(width, height, sum(m.data for m in moments))
    colors = [render_resolve_pass(scene.bricks_of(r), cam, tf, STEP, total, PARAMS, bounds)
              for r in range(scene.ranks)]
    return moments, total, colors


def test_sandwich_partials_sum_to_single_node():
    scene = make_sandwich_scene(3, slab_resolution=12)
    cam = scene.default_cameras(1, elevation_deg=15.0)[0]
    _, _, colors = rank_partials(scene, cam, 24, 24)
    single = render_single_node_mboit(scene.bricks, cam, scene.transfer_function, STEP, PARAMS, 24, 24)
    summed = sum(c.data for c in colors)
    assert np.abs(summed - single.data).max() <= 1e-4
    for c in colors:
        assert np.all(np.isfinite(c.data)) and np.all(c.data >= 0)


def test_partials_sum_in_any_order():
    scene = make_sandwich_scene(3, slab_resolution=8)
    cam = scene.default_cameras(1, elevation_deg=30.0)[0]
    _, _, colors = rank_partials(scene, cam, 16, 16)
    reference = colors[0].data + colors[1].data + colors[2].data
    for order in itertools.permutations(range(3)):
        summed = colors[order[0]].data + colors[order[1]].data + colors[order[2]].data
        assert np.abs(summed - reference).max() <= 1e-6


def test_moment_and_resolve_passes_visit_same_samples():
    scene = make_sandwich_scene(2, slab_resolution=8)
    cam = scene.default_cameras(1, elevation_deg=25.0)[0]
    moments, total, colors = rank_partials(scene, cam, 20, 20)
    for m, c in zip(moments, colors):
        np.testing.assert_array_equal(m.sample_count, c.sample_count)


def test_one_brick_gives_one_segment_per_hit_pixel():
    scene = make_slab_scene(resolution=8, thickness=4)
    cam = scene.default_cameras(1)[0]
    segments = render_segment_pass(scene.bricks, cam, scene.transfer_function, STEP, 16, 16)
    assert segments.counts().max() == 1
    assert np.all(segments.z_start < segments.z_end)


def test_sandwich_rank_center_pixel_has_four_segments():
    scene = make_sandwich_scene(3, slab_resolution=8)
    cam = axis_camera(scene)
    segments = render_segment_pass(scene.bricks_of(1), cam, scene.transfer_function, STEP, 9, 9)
    counts = segments.counts()
    assert counts[4, 4] == 4
    mine = segments.pixel == 4 * 9 + 4
    z0 = np.sort(segments.z_start[mine])
    z1 = np.sort(segments.z_end[mine])
    assert np.all(z1[:-1] <= z0[1:])


def test_homogeneous_segment_matches_geometric_series():
    thickness = 6
    scene = make_slab_scene(resolution=8, thickness=thickness, opacity=0.2, homogeneous=True)
    cam = axis_camera(scene)
    tf = scene.transfer_function
    segments = render_segment_pass(scene.bricks, cam, tf, STEP, 9, 9)
    center = np.flatnonzero(segments.pixel == 4 * 9 + 4)[0]
    rgba = tf(np.array([0.5]))[0]
    alpha = opacity_corrected(rgba[3], STEP, tf.reference_step)
    expected = homogeneous_front_to_back(rgba, alpha, round(thickness / STEP))
    np.testing.assert_allclose(segments.rgba[center], expected, rtol=1e-6)
    assert segments.z_end[center] - segments.z_start[center] == pytest.approx(thickness)


def test_segment_transmittance_matches_b0():
    scene = make_sandwich_scene(2, slab_resolution=8)
    cam = scene.default_cameras(1, elevation_deg=20.0)[0]
    tf = scene.transfer_function
    bounds = depth_bounds(scene.bricks, cam)
    moments = render_moment_pass(scene.bricks, cam, tf, STEP, bounds, 20, 20)
    segments = render_segment_pass(scene.bricks, cam, tf, STEP, 20, 20)
    log_t = np.bincount(segments.pixel, np.log1p(-segments.rgba[:, 3]), minlength=400).reshape(20, 20)
    b0 = moments.data[..., 0]
    hit = b0 > 0
    np.testing.assert_allclose(-log_t[hit], b0[hit], rtol=1e-6)
    assert not log_t[~hit].any()


def test_split_scene_renders_like_whole():
    scene = make_slab_scene(resolution=12, thickness=6)
    cam = scene.default_cameras(1, elevation_deg=35.0)[0]
    tf = scene.transfer_function
    pieces = grid_split(scene.bricks[0], (3, 2, 2))
    whole = render_single_node_mboit(scene.bricks, cam, tf, STEP, PARAMS, 24, 24)
    split = render_single_node_mboit(pieces, cam, tf, STEP, PARAMS, 24, 24)
    np.testing.assert_allclose(split.data, whole.data, atol=1e-12)


def test_front_to_back_oracle_matches_segment_for_single_brick():
    scene = make_slab_scene(resolution=8, thickness=4)
    cam = scene.default_cameras(1, elevation_deg=25.0)[0]
    tf = scene.transfer_function
    reference = render_front_to_back(scene.bricks, cam, tf, STEP, 16, 16)
    segments = render_segment_pass(scene.bricks, cam, tf, STEP, 16, 16)
    image = np.zeros((256, 4))
    image[segments.pixel] = segments.rgba
    np.testing.assert_allclose(image.reshape(16, 16, 4), reference.data, atol=1e-12)


def test_depth_bounds_enclose_all_samples():
    scene = make_sandwich_scene(2, slab_resolution=8)
    cam = scene.default_cameras(1, elevation_deg=40.0)[0]
    bounds = depth_bounds(scene.bricks, cam)
    origin, dirs = cam.rays(16, 16)
    for brick in scene.bricks:
        batch, _ = march_brick(brick, origin, dirs.reshape(-1, 3), STEP, scene.transfer_function)
        assert np.all(batch.depth >= bounds.near) and np.all(batch.depth <= bounds.far)
        assert np.all((batch.transmittance > 0) & (batch.transmittance <= 1))


def test_step_must_be_positive():
    scene = make_slab_scene(resolution=4, thickness=2)
    cam = scene.default_cameras(1)[0]
    with pytest.raises(ValueError):
        render_segment_pass(scene.bricks, cam, scene.transfer_function, 0.0, 4, 4)


def test_composite_over_background():
    image = ColorImage(1, 1, np.array([[[0.2, 0.0, 0.0, 0.5]]]))
    np.testing.assert_allclose(image.composite((1, 1, 1))[0, 0], [0.7, 0.5, 0.5])
    np.testing.assert_allclose(image.composite((0, 0, 0))[0, 0], [0.2, 0.0, 0.0])
