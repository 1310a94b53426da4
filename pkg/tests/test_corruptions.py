"""Tests for the deterministic corruption generators.

Derived expectations use a folded-normal Monte-Carlo oracle, PSNR arithmetic
done by hand, and byte-level determinism checks.
"""

import numpy as np
import pytest

from ibkit import corruptions
from ibkit.corruptions import (
    CORRUPTION_KINDS,
    OUT_OF_SCOPE_KINDS,
    CorruptionSpec,
    UnsupportedCorruptionError,
    corrupt,
    counter_normal,
    counter_uniform,
    disk_kernel,
    gaussian_kernel,
    load_image,
    motion_kernel,
    psnr,
    reference_image,
    save_image,
    severity_params,
)
from ibkit.linalg import DimensionError


# ---------------------------------------------------------------------------
# spec validation

def test_fourteen_kinds_are_supported():
    assert len(CORRUPTION_KINDS) == 14


@pytest.mark.parametrize("kind", OUT_OF_SCOPE_KINDS)
def test_out_of_scope_kinds_rejected_by_name(kind):
    with pytest.raises(UnsupportedCorruptionError) as err:
        CorruptionSpec(kind, 3)
    assert kind in str(err.value)
    assert "gaussian_noise" in str(err.value)  # alternatives are enumerated


def test_unknown_kind_rejected():
    with pytest.raises(UnsupportedCorruptionError):
        CorruptionSpec("vignette", 1)


def test_severity_range_enforced():
    for bad in (0, 6, 9, -1):
        with pytest.raises(ValueError, match="1..5"):
            CorruptionSpec("gaussian_noise", bad)


# ---------------------------------------------------------------------------
# counter RNG

def test_counter_uniform_is_a_pure_function():
    a = counter_uniform(7, 3, 1000)
    b = counter_uniform(7, 3, 1000)
    assert np.array_equal(a, b)
    assert np.all((a >= 0.0) & (a < 1.0))


def test_counter_uniform_prefix_stability():
    # draw index k is independent of how many values are requested
    long = counter_uniform(7, 3, 1000)
    short = counter_uniform(7, 3, 10)
    assert np.array_equal(long[:10], short)


def test_counter_streams_and_seeds_differ():
    base = counter_uniform(7, 3, 100)
    assert not np.array_equal(base, counter_uniform(8, 3, 100))
    assert not np.array_equal(base, counter_uniform(7, 4, 100))


def test_counter_uniform_moments():
    u = counter_uniform(0, 0, 200_000)
    assert abs(u.mean() - 0.5) < 0.005
    assert abs(u.var() - 1.0 / 12.0) < 0.005


def test_counter_normal_moments():
    z = counter_normal(0, 1, 200_000)
    assert abs(z.mean()) < 0.01
    assert abs(z.var() - 1.0) < 0.02


# ---------------------------------------------------------------------------
# severity table

def test_severity_params_strictly_monotone_every_kind():
    def strength(kind, s):
        p = severity_params(kind, s)
        if kind == "shot_noise":
            return -p  # fewer photons = stronger
        if kind == "contrast":
            return -p  # smaller factor = stronger
        if kind == "elastic_transform":
            return p[0]  # displacement amplitude
        return p

    for kind in CORRUPTION_KINDS:
        vals = [strength(kind, s) for s in range(1, 6)]
        assert all(b > a for a, b in zip(vals, vals[1:])), kind


def test_gaussian_noise_sigmas_strictly_increasing():
    sigmas = [severity_params("gaussian_noise", s) for s in range(1, 6)]
    assert sigmas == sorted(sigmas) and len(set(sigmas)) == 5


# ---------------------------------------------------------------------------
# corrupt()

def test_zero_sigma_override_is_identity():
    img = reference_image(32)
    spec = CorruptionSpec("gaussian_noise", 3, seed=0)
    out = corrupt(img, spec, param_override=0.0)
    assert np.array_equal(out, img)


def test_impulse_probability_one_saturates():
    img = reference_image(32)
    spec = CorruptionSpec("impulse_noise", 5, seed=0)
    out = corrupt(img, spec, param_override=1.0)
    assert np.all((out == 0.0) | (out == 1.0))


def test_gaussian_noise_folded_normal_deviation():
    # |noise| has mean sigma * sqrt(2/pi); on a 0.5 image clamping is rare
    img = np.full((64, 64, 3), 0.5)
    spec = CorruptionSpec("gaussian_noise", 3, seed=0)
    out = corrupt(img, spec)
    sigma = severity_params("gaussian_noise", 3)
    want = sigma * np.sqrt(2.0 / np.pi)
    got = np.abs(out - img).mean()
    assert abs(got - want) / want < 0.02


def test_corrupt_deterministic_all_kinds():
    img = reference_image(32)
    for kind in CORRUPTION_KINDS:
        spec = CorruptionSpec(kind, 4, seed=11)
        a = corrupt(img, spec)
        b = corrupt(img, spec)
        assert a.tobytes() == b.tobytes(), kind


def test_corrupt_seed_sensitivity_stochastic_kinds():
    img = reference_image(32)
    for kind in ("gaussian_noise", "shot_noise", "impulse_noise",
                 "speckle_noise", "motion_blur", "fog", "elastic_transform"):
        a = corrupt(img, CorruptionSpec(kind, 3, seed=0))
        b = corrupt(img, CorruptionSpec(kind, 3, seed=1))
        assert a.tobytes() != b.tobytes(), kind


def test_corrupt_output_clamped():
    img = reference_image(32)
    for kind in CORRUPTION_KINDS:
        out = corrupt(img, CorruptionSpec(kind, 5, seed=2))
        assert out.min() >= 0.0 and out.max() <= 1.0, kind


def test_photometric_kinds_commute_with_horizontal_flip():
    img = reference_image(32)
    for kind in ("brightness", "contrast", "saturate"):
        spec = CorruptionSpec(kind, 4, seed=0)
        flipped_then = corrupt(img[:, ::-1], spec)
        then_flipped = corrupt(img, spec)[:, ::-1]
        assert np.array_equal(flipped_then, then_flipped), kind


def test_corrupt_rejects_bad_image_shape():
    with pytest.raises(DimensionError):
        corrupt(np.zeros((8, 8)), CorruptionSpec("gaussian_noise", 1))


def test_call_counter_increments():
    before = corruptions.call_count()
    corrupt(reference_image(16), CorruptionSpec("brightness", 1))
    assert corruptions.call_count() == before + 1


# ---------------------------------------------------------------------------
# kernels

def test_kernels_sum_to_one():
    assert abs(gaussian_kernel(1.3).sum() - 1.0) < 1e-12
    assert abs(disk_kernel(2.2).sum() - 1.0) < 1e-12
    assert abs(motion_kernel(7, 0.4).sum() - 1.0) < 1e-12


def test_gaussian_kernel_symmetry():
    k = gaussian_kernel(0.9)
    assert np.array_equal(k, k[::-1])


# ---------------------------------------------------------------------------
# psnr

def test_psnr_identical_images_sentinel():
    img = reference_image(16)
    assert psnr(img, img) == 99.0


def test_psnr_black_vs_white():
    a = np.zeros((4, 4, 3))
    b = np.ones((4, 4, 3))
    assert abs(psnr(a, b) - 0.0) < 1e-12


def test_psnr_half_gray():
    a = np.zeros((4, 4, 3))
    b = np.full((4, 4, 3), 0.5)
    # MSE = 0.25, 10*log10(4) = 6.0206
    assert abs(psnr(a, b) - 10.0 * np.log10(4.0)) < 1e-10


def test_psnr_shape_mismatch():
    with pytest.raises(DimensionError):
        psnr(np.zeros((4, 4, 3)), np.zeros((5, 4, 3)))


# ---------------------------------------------------------------------------
# reference image and I/O

def test_reference_image_is_deterministic():
    assert reference_image(64).tobytes() == reference_image(64).tobytes()


def test_reference_image_range_and_shape():
    img = reference_image(64)
    assert img.shape == (64, 64, 3)
    assert img.min() >= 0.0 and img.max() <= 1.0


def test_png_round_trip_quantized(tmp_path):
    img = reference_image(32)
    path = tmp_path / "ref.png"
    save_image(str(path), img)
    back = load_image(str(path))
    # 8-bit quantization: half a step of 1/255 max error
    assert np.max(np.abs(back - img)) <= 0.5 / 255.0 + 1e-12


def test_ppm_round_trip_matches_png(tmp_path):
    img = reference_image(16)
    ppm = tmp_path / "ref.ppm"
    png = tmp_path / "ref.png"
    save_image(str(ppm), img)
    save_image(str(png), img)
    assert np.array_equal(load_image(str(ppm)), load_image(str(png)))


def test_ppm_rejects_binary_format(tmp_path):
    path = tmp_path / "bad.ppm"
    path.write_text("P6\n2 2\n255\n")
    with pytest.raises(ValueError):
        load_image(str(path))
