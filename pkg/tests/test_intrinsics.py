import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from midvcl.errors import InvalidInputError, SolverError
from midvcl.intrinsics import (
    DEFAULT_GRAD_THRESHOLD,
    IntrinsicPair,
    decompose_retinex,
    load_pair,
    log_luminance,
    make_synthetic_intrinsic,
    reconstruct,
    reconstruction_error,
    save_pair,
    solve_poisson,
    split_gradients,
)
from oracles import pearson


def rel_l2(img, pair):
    target = np.clip(img, pair.epsilon_floor, 1.0)
    return np.linalg.norm(target - pair.reflectance * pair.shading) / np.linalg.norm(target)


def test_uniform_gray():
    pair = decompose_retinex(np.full((16, 16, 3), 0.5))
    assert np.array_equal(pair.shading, np.ones((16, 16, 1)))
    assert np.allclose(pair.reflectance, 0.5, atol=1e-15)


def test_synthetic_shading_recovered_up_to_scale():
    img, truth = make_synthetic_intrinsic(0, 32, 32)
    est = decompose_retinex(img).shading.ravel()
    t = truth.shading.ravel()
    # best global scale by least squares, then RMSE relative to the truth's RMS
    scale = est @ t / (est @ est)
    rmse = np.sqrt(np.mean((scale * est - t) ** 2)) / np.sqrt(np.mean(t**2))
    assert rmse < 0.05


def test_edge_at_threshold_goes_to_shading():
    thr = 0.075
    log_lum = np.zeros((8, 8))
    log_lum[:, 4:] = thr  # step exactly at the threshold
    parts = split_gradients(log_lum, thr)
    refl_x, _ = parts["reflectance"]
    shad_x, _ = parts["shading"]
    assert not parts["masks"][0].any()
    assert np.all(refl_x == 0)
    assert shad_x[:, 3].tolist() == [thr] * 8
    # a hair above the threshold flips it
    log_lum[:, 4:] = np.nextafter(thr, 1.0)
    assert split_gradients(log_lum, thr)["masks"][0][:, 3].all()


@given(st.integers(0, 10_000), st.floats(0.01, 0.5))
def test_gradients_partitioned(seed, thr):
    rng = np.random.default_rng(seed)
    log_lum = rng.normal(0, 0.2, size=(9, 11))
    parts = split_gradients(log_lum, thr)
    for axis in (0, 1):
        r, s = parts["reflectance"][axis], parts["shading"][axis]
        # exactly one side carries each gradient and together they give it back
        assert np.all((r == 0) | (s == 0))
        full = (log_lum[:, 1:] - log_lum[:, :-1]) if axis == 0 else (log_lum[1:] - log_lum[:-1])
        assert np.array_equal(r + s, full)


def test_synthetic_construction_identity():
    img, pair = make_synthetic_intrinsic(0, 32, 32)
    product = pair.reflectance * pair.shading
    assert product.max() <= 1.0
    assert np.max(np.abs(img - product)) <= 1e-12
    assert img.shape == (32, 32, 3) and pair.shading.shape == (32, 32, 1)


def test_synthetic_determinism_and_variety():
    a = make_synthetic_intrinsic(1, 24, 20)
    b = make_synthetic_intrinsic(1, 24, 20)
    c = make_synthetic_intrinsic(2, 24, 20)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1].reflectance, b[1].reflectance)
    assert not np.array_equal(a[1].reflectance, c[1].reflectance)


def test_synthetic_regions_and_contrast():
    for seed in range(20):
        _, pair = make_synthetic_intrinsic(seed, 32, 32)
        levels = np.unique(pair.reflectance.reshape(-1, 3), axis=0)
        assert 2 <= len(levels) <= 5
        luma = np.sort(np.log(levels @ [0.299, 0.587, 0.114]))
        assert np.diff(luma).min() >= 2 * DEFAULT_GRAD_THRESHOLD


def test_synthetic_precondition():
    with pytest.raises(InvalidInputError):
        make_synthetic_intrinsic(0, 15, 32)


def test_reconstruct_examples():
    ones = IntrinsicPair(np.ones((8, 8, 3)), np.ones((8, 8, 1)))
    assert np.array_equal(reconstruct(ones), np.ones((8, 8, 3)))
    half = IntrinsicPair(np.full((8, 8, 3), 0.5), np.full((8, 8, 1), 0.5))
    assert np.array_equal(reconstruct(half), np.full((8, 8, 3), 0.25))


@given(hnp.arrays(np.float64, (10, 12, 3), elements=st.floats(0.0, 1.0)))
def test_decomposition_properties(img):
    pair = decompose_retinex(img)
    assert rel_l2(img, pair) <= 1e-3
    assert reconstruction_error(img, pair) == pytest.approx(rel_l2(img, pair), abs=1e-15)
    assert pair.shading.shape == (10, 12, 1)
    assert pair.shading.max() == 1.0
    assert np.all(pair.shading > 0) and np.all(pair.reflectance > 0)
    assert np.all(pair.reflectance <= 1.0)


def test_decomposition_deterministic():
    img, _ = make_synthetic_intrinsic(3, 32, 32)
    a, b = decompose_retinex(img), decompose_retinex(img)
    assert np.array_equal(a.shading, b.shading) and np.array_equal(a.reflectance, b.reflectance)


def test_decompose_rejects_bad_input():
    img = np.full((16, 16, 3), 0.5)
    bad = img.copy()
    bad[3, 3, 1] = np.nan
    with pytest.raises(InvalidInputError):
        decompose_retinex(bad)
    with pytest.raises(InvalidInputError):
        decompose_retinex(img, grad_threshold=0.0)
    with pytest.raises(InvalidInputError):
        decompose_retinex(img, epsilon_floor=0.2)
    with pytest.raises(InvalidInputError):
        decompose_retinex(np.full((4, 16, 3), 0.5))


def test_poisson_non_convergence_reports_residual():
    rng = np.random.default_rng(0)
    gx, gy = rng.normal(size=(16, 15)), rng.normal(size=(15, 16))
    with pytest.raises(SolverError) as info:
        solve_poisson(gx, gy, max_iters=2)
    assert info.value.residual_norm > 1e-6


def test_poisson_recovers_integrable_field():
    rng = np.random.default_rng(1)
    s = rng.normal(size=(12, 14))
    s -= s.mean()
    gx, gy = s[:, 1:] - s[:, :-1], s[1:] - s[:-1]
    est, iters = solve_poisson(gx, gy, rtol=1e-12)
    assert iters > 0
    assert np.max(np.abs(est - s)) < 1e-9


def test_shading_tracks_ground_truth_on_synthetics():
    for seed in range(10):
        img, truth = make_synthetic_intrinsic(seed, 32, 32)
        pair = decompose_retinex(img)
        assert pearson(pair.shading, truth.shading) >= 0.98
        assert rel_l2(img, pair) <= 1e-3


def test_log_luminance_clamps():
    img = np.zeros((8, 8, 3))
    assert np.allclose(log_luminance(img, 1e-3), np.log(1e-3))


def test_cache_round_trip(tmp_path):
    img, _ = make_synthetic_intrinsic(4, 20, 20)
    pair = decompose_retinex(img)
    save_pair(tmp_path, "x", pair)
    back = load_pair(tmp_path, "x")
    assert np.max(np.abs(back.shading - pair.shading)) <= 0.5 / 65535 + 1e-12
    assert np.max(np.abs(back.reflectance - pair.reflectance)) <= 0.5 / 255 + 1e-12
