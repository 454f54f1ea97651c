import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from warpfield.data import blob_field, Blob
from warpfield.fields import ModelConfig, init_model
from warpfield.render import (
    Camera,
    RenderOptions,
    composite,
    generate_rays,
    importance_sample,
    make_samples,
    merge_depths,
    render_field,
    render_image,
    stratified_sample,
    bin_edges,
)


def simple_camera(R=None, t=(0.0, 0.0, 0.0), w=8, h=6, focal=10.0):
    K = np.array([[focal, 0, w / 2], [0, focal, h / 2], [0, 0, 1]])
    return Camera(np.eye(3) if R is None else R, t, K, w, h, 1.0, 5.0)


def tiny_model(**kw):
    cfg = dict(canonical_width=16, canonical_depth=2, canonical_skip=1, encoding_bands=2, latent_dim=4,
               num_latents=3, bending_width=8, rigidity_width=8)
    cfg.update(kw)
    return init_model(ModelConfig(**cfg))


# ---------------------------------------------------------------- cameras and rays


def test_camera_validation():
    with pytest.raises(ValueError):
        Camera(np.ones((3, 3)), np.zeros(3), np.eye(3), 4, 4, 1.0, 2.0)
    with pytest.raises(ValueError):
        Camera(np.eye(3), np.zeros(3), np.eye(3), 4, 4, 2.0, 1.0)


def test_principal_ray_is_optical_axis():
    cam = simple_camera(w=8, h=6)
    # pixel (3, 2) has center (3.5, 2.5); shift the principal point there
    cam.K[0, 2], cam.K[1, 2] = 3.5, 2.5
    rays = generate_rays(cam, [[3, 2]])
    np.testing.assert_allclose(rays.directions[0], [0.0, 0.0, 1.0], atol=1e-15)


def test_translation_moves_origins_only():
    a = generate_rays(simple_camera())
    b = generate_rays(simple_camera(t=(1.0, -2.0, 0.5)))
    np.testing.assert_array_equal(a.directions, b.directions)
    np.testing.assert_allclose(b.origins - a.origins, np.broadcast_to([1.0, -2.0, 0.5], a.origins.shape))


def test_rotated_camera_matches_matrix_oracle():
    R = np.array([[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]])  # 90 degrees about y
    base = generate_rays(simple_camera())
    rot = generate_rays(simple_camera(R=R))
    np.testing.assert_allclose(rot.directions, base.directions @ R.T, atol=1e-15)


def test_out_of_bounds_pixel():
    with pytest.raises(ValueError):
        generate_rays(simple_camera(w=4, h=4), [[4, 0]])


def test_look_at_points_at_target():
    cam = Camera.look_at((0, 0, -4), (0, 0, 0), (0, -1, 0), 50.0, 8, 8, 1.0, 6.0)
    np.testing.assert_allclose(cam.R[:, 2], [0, 0, 1], atol=1e-15)
    assert Camera.from_dict(cam.to_dict()).to_dict() == cam.to_dict()


# ---------------------------------------------------------------- sampling


def test_stratified_bin_centers():
    np.testing.assert_allclose(stratified_sample(0.0, 1.0, 2), [[0.25, 0.75]])


def test_stratified_range_and_order():
    rng = np.random.default_rng(0)
    d = stratified_sample(2.0, 6.0, 8, rng, n_rays=10_000)
    assert d.min() >= 2.0 and d.max() <= 6.0
    assert np.all(np.diff(d, axis=1) > 0)


def test_stratified_bins_are_uniform():
    rng = np.random.default_rng(1)
    n, draws = 4, 100_000
    d = stratified_sample(0.0, 1.0, n, rng, n_rays=draws)
    centers = (np.arange(n) + 0.5) / n
    se = (1.0 / n) / np.sqrt(12.0 * draws)
    assert np.all(np.abs(d.mean(axis=0) - centers) < 3 * se)


def test_importance_all_weight_in_one_bin():
    depths = stratified_sample(0.0, 1.0, 8)
    w = np.zeros((1, 8))
    w[0, 5] = 1.0
    fine = importance_sample(w, depths, 64, None, 0.0, 1.0, floor=0.0)
    edges = bin_edges(depths, 0.0, 1.0)[0]
    assert fine.min() >= edges[5] and fine.max() <= edges[6]


def test_importance_uniform_weights_give_uniform_occupancy():
    rng = np.random.default_rng(2)
    n_bins, draws = 8, 100_000
    depths = stratified_sample(0.0, 1.0, n_bins)
    fine = importance_sample(np.ones((1, n_bins)), depths, draws, rng, 0.0, 1.0)
    counts = np.histogram(fine[0], bins=bin_edges(depths, 0.0, 1.0)[0])[0]
    p = 1.0 / n_bins
    sigma = np.sqrt(draws * p * (1 - p))
    assert np.all(np.abs(counts - draws * p) < 3 * sigma)


def test_importance_deterministic_mode():
    depths = stratified_sample(0.0, 1.0, 8, None, n_rays=3)
    w = np.random.default_rng(3).random((3, 8))
    a = importance_sample(w, depths, 16, None, 0.0, 1.0)
    b = importance_sample(w, depths, 16, None, 0.0, 1.0)
    assert np.array_equal(a, b)


def test_merged_depths_strictly_increasing():
    coarse = stratified_sample(1.0, 2.0, 4)
    fine = coarse.copy()  # worst case: exact duplicates
    merged = merge_depths(coarse, fine, 1.0, 2.0)
    assert np.all(np.diff(merged, axis=1) > 0)


# ---------------------------------------------------------------- quadrature


def test_empty_space():
    out = composite(np.full((1, 4, 3), 0.7), np.zeros((1, 4)), np.full((1, 4), 0.25))
    np.testing.assert_array_equal(out.color.values, 0.0)
    np.testing.assert_array_equal(out.transmittance.values, 1.0)
    assert out.residual.values[0] == 1.0


def test_opaque_first_sample():
    colors = np.array([[[0.2, 0.4, 0.9], [1.0, 0.0, 0.0]]])
    out = composite(colors, np.array([[1e6, 3.0]]), np.array([[1.0, 1.0]]))
    np.testing.assert_allclose(out.color.values[0], [0.2, 0.4, 0.9], atol=1e-6)


def test_two_sample_hand_computation():
    # o1 = 1 - e^-0.5 = 0.393469, T2 = e^-0.5, o2 = 1 - e^-1 -> w2 = 0.383400
    colors = np.array([[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]])
    out = composite(colors, np.array([[1.0, 2.0]]), np.array([[0.5, 0.5]]))
    np.testing.assert_allclose(out.weights.values[0], [0.39347, 0.38340], atol=1e-5)
    np.testing.assert_allclose(out.color.values[0], [0.39347, 0.38340, 0.0], atol=1e-5)


def test_composite_rejects_bad_inputs():
    with pytest.raises(ValueError):
        composite(np.zeros((1, 2, 3)), np.array([[-1.0, 0.0]]), np.ones((1, 2)))
    with pytest.raises(ValueError):
        composite(np.zeros((1, 2, 3)), np.zeros((1, 2)), np.array([[1.0, 0.0]]))


def test_weight_sum_plus_residual_is_one():
    rng = np.random.default_rng(4)
    sigma = rng.exponential(2.0, size=(10_000, 16)) * (rng.random((10_000, 16)) < 0.7)
    deltas = rng.uniform(0.01, 0.5, size=(10_000, 16))
    out = composite(rng.random((10_000, 16, 3)), sigma, deltas)
    total = out.weights.values.sum(axis=1) + out.residual.values
    assert np.max(np.abs(total - 1.0)) < 1e-6
    assert np.all(np.diff(out.transmittance.values, axis=1) <= 0)


@settings(max_examples=25, deadline=None)
@given(sigma=st.floats(0.0, 20.0), n=st.integers(1, 64), length=st.floats(0.1, 3.0))
def test_constant_medium_independent_of_sample_count(sigma, n, length):
    c = np.array([0.3, 0.6, 0.9])
    out = composite(np.broadcast_to(c, (1, n, 3)), np.full((1, n), sigma), np.full((1, n), length / n))
    expected = c * (1.0 - np.exp(-sigma * length))
    np.testing.assert_allclose(out.color.values[0], expected, atol=1e-6)


# ---------------------------------------------------------------- image rendering


def test_fresh_model_same_image_for_all_latents():
    model = tiny_model()
    cam = Camera.look_at((0, 0, -3), (0, 0, 0), (0, -1, 0), 8.0, 6, 5, 1.0, 5.0)
    opts = RenderOptions(n_coarse=8, n_fine=8)
    ref = render_image(model, np.zeros(4), cam, opts)
    rng = np.random.default_rng(5)
    for _ in range(3):
        assert np.array_equal(render_image(model, rng.normal(size=4), cam, opts), ref)


def test_render_is_deterministic():
    model = tiny_model()
    cam = Camera.look_at((0, 0, -3), (0, 0, 0), (0, -1, 0), 8.0, 5, 5, 1.0, 5.0)
    opts = RenderOptions(n_coarse=8, n_fine=8, chunk=7)
    assert np.array_equal(render_image(model, np.zeros(4), cam, opts), render_image(model, np.zeros(4), cam, opts))


def test_chunking_does_not_change_pixels():
    model = tiny_model()
    cam = Camera.look_at((0, 0, -3), (0, 0, 0), (0, -1, 0), 8.0, 5, 5, 1.0, 5.0)
    a = render_image(model, np.zeros(4), cam, RenderOptions(n_coarse=8, n_fine=8, chunk=3))
    b = render_image(model, np.zeros(4), cam, RenderOptions(n_coarse=8, n_fine=8, chunk=1000))
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_fine_weights_do_not_affect_coarse_image():
    model = tiny_model()
    cam = Camera.look_at((0, 0, -3), (0, 0, 0), (0, -1, 0), 8.0, 5, 5, 1.0, 5.0)
    opts = RenderOptions(n_coarse=8, n_fine=8)
    _, before = render_image(model, np.zeros(4), cam, opts, diagnostics=True)
    for p in model.fine.parameters():
        p.values[...] += 0.5
    _, after = render_image(model, np.zeros(4), cam, opts, diagnostics=True)
    assert np.array_equal(before["coarse"], after["coarse"])


def test_analytic_field_matches_direct_quadrature():
    field_fn = blob_field([Blob((0.0, 0.0, 3.0), 0.5, 8.0, (0.9, 0.3, 0.1))], [np.array([0.0, 0.0, 3.0])])
    cam = simple_camera(w=6, h=6, focal=6.0)
    image, _ = render_field(field_fn, cam, n_samples=32)
    rays = generate_rays(cam)
    depths = stratified_sample(cam.near, cam.far, 32, None, len(rays))
    samples = make_samples(rays, depths, cam.far, "check")
    colors, dens = field_fn(samples.points.reshape(-1, 3))
    direct = composite(colors.reshape(len(rays), 32, 3), dens.reshape(len(rays), 32), samples.deltas)
    assert np.array_equal(image, direct.color.values)
