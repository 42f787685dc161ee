import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conmim.data import (
    AugConfig,
    DataError,
    Geometry,
    ImageRecord,
    apply_geometry,
    augment_pair,
    color_jitter,
    flip_horizontal,
    hsv_to_rgb,
    load_ppm,
    mask_count,
    read_manifest,
    rgb_to_hsv,
    sample_mask,
    solarize,
    synth_dataset,
    write_dataset,
    write_ppm,
)
from conmim.rng import MASK64, derive_seed, generator, splitmix64

GAMMA = 0x9E3779B97F4A7C15


def test_splitmix64_reference_outputs():
    # published sequence for state 1234567
    assert splitmix64(1234567) == 6457827717110365317
    assert splitmix64((1234567 + GAMMA) & MASK64) == 3203168211198807973
    assert splitmix64((1234567 + 2 * GAMMA) & MASK64) == 9817491932198370423


def test_streams_are_independent():
    assert derive_seed(0, "mask") != derive_seed(0, "augment")
    assert derive_seed(0, "data", 1) != derive_seed(0, "data", 2)
    a = generator(3, "init").random(4)
    b = generator(3, "init").random(4)
    assert a.tobytes() == b.tobytes()


def test_ppm_single_red_pixel():
    rec = load_ppm(b"P6\n1 1\n255\n" + bytes([255, 0, 0]))
    assert rec.pixels.tolist() == [[[1.0, 0.0, 0.0]]]


def test_ppm_rejects_p3():
    with pytest.raises(DataError, match="not P6"):
        load_ppm(b"P3\n1 1\n255\n255 0 0\n")


def test_ppm_truncated_payload():
    with pytest.raises(DataError, match="expected 12 bytes, got 5"):
        load_ppm(b"P6\n2 2\n255\n" + bytes(5))


def test_ppm_comments_in_header():
    rec = load_ppm(b"P6\n# made by hand\n2 1\n255\n" + bytes([0, 0, 0, 255, 255, 255]))
    assert rec.pixels.shape == (1, 2, 3)


@settings(max_examples=30)
@given(st.integers(1, 5), st.integers(1, 5), st.binary(min_size=75, max_size=75))
def test_ppm_roundtrip(w, h, payload):
    raw = b"P6\n%d %d\n255\n" % (w, h) + payload[: w * h * 3]
    assert write_ppm(load_ppm(raw)) == raw


def test_manifest_roundtrip(tmp_path):
    recs = synth_dataset(5, seed=2)
    manifest = write_dataset(recs, tmp_path / "d")
    back = read_manifest(manifest)
    assert [r.label for r in back] == [r.label for r in recs]
    # PPM stores 8-bit values
    for a, b in zip(recs, back):
        assert np.abs(a.pixels - b.pixels).max() <= 0.5 / 255 + 1e-6


def test_image_record_range():
    with pytest.raises(DataError):
        ImageRecord(np.full((2, 2, 3), 1.5))


def test_synth_deterministic():
    a, b = synth_dataset(6, seed=4), synth_dataset(6, seed=4)
    assert all(x.pixels.tobytes() == y.pixels.tobytes() for x, y in zip(a, b))
    assert any(x.pixels.tobytes() != y.pixels.tobytes() for x, y in zip(a, synth_dataset(6, seed=5)))


def test_synth_label_balance():
    recs = synth_dataset(8000, classes=8, side=8, seed=0)
    counts = np.bincount([r.label for r in recs], minlength=8)
    assert (np.abs(counts - 1000) <= 50).all(), counts


def test_synth_range():
    for r in synth_dataset(50, seed=1):
        assert r.pixels.min() >= 0.0 and r.pixels.max() <= 1.0
        assert r.pixels.shape == (32, 32, 3)


def test_synth_rejects_too_many_classes():
    with pytest.raises(DataError):
        synth_dataset(1, classes=9)


def test_flip_involution():
    img = np.random.default_rng(0).random((5, 7, 3))
    assert (flip_horizontal(flip_horizontal(img)) == img).all()
    geom = Geometry(True, 0.0, 0.0, 5.0, 7.0)
    once = apply_geometry(img, geom, 5)
    assert once.shape == (5, 5, 3)


def test_identity_crop_is_exact():
    img = np.random.default_rng(0).random((8, 8, 3))
    out = apply_geometry(img, Geometry(False, 0.0, 0.0, 8.0, 8.0), 8)
    np.testing.assert_allclose(out, img, atol=1e-12)


def test_solarize_zero_image():
    z = np.zeros((4, 4, 3))
    assert (solarize(z, 0.5) == z).all()


def test_solarize_inverts_above_threshold():
    assert solarize(np.array([0.2, 0.5, 0.9]), 0.5).tolist() == pytest.approx([0.2, 0.5, 0.1])


def test_hsv_roundtrip():
    img = np.random.default_rng(1).random((6, 6, 3))
    np.testing.assert_allclose(hsv_to_rgb(rgb_to_hsv(img)), img, atol=1e-12)


def test_neutral_jitter_is_identity():
    img = np.random.default_rng(1).random((6, 6, 3))
    np.testing.assert_allclose(color_jitter(img, 1.0, 1.0, 1.0, 0.0), img, atol=1e-12)


def test_views_align_without_color_ops():
    img = synth_dataset(1, seed=3)[0]
    cfg = AugConfig(full_view="basic", corrupted_view="basic")
    for seed in range(5):
        pair = augment_pair(img, seed, cfg)
        assert pair.full_view.pixels.tobytes() == pair.corrupted_view_base.pixels.tobytes()


def test_disabling_color_on_full_view_recovers_corrupted_base():
    img = synth_dataset(1, seed=3)[0]
    strong = augment_pair(img, 11, AugConfig())
    plain = augment_pair(img, 11, AugConfig(full_view="basic"))
    assert strong.shared_geom == plain.shared_geom
    assert plain.full_view.pixels.tobytes() == strong.corrupted_view_base.pixels.tobytes()


def test_augment_deterministic_and_mask_exact():
    img = synth_dataset(1, seed=3)[0]
    a, b = augment_pair(img, 9), augment_pair(img, 9)
    assert a.full_view.pixels.tobytes() == b.full_view.pixels.tobytes()
    assert a.mask.count == 48


@pytest.mark.parametrize("k,ratio,expected", [(196, 0.75, 147), (64, 0.75, 48), (64, 0.6, 39), (64, 0.9, 58)])
@pytest.mark.parametrize("strategy", ["random", "block"])
def test_mask_popcount(k, ratio, expected, strategy):
    assert mask_count(k, ratio) == expected == math.ceil(ratio * k)
    for seed in range(5):
        assert sample_mask(k, strategy, ratio, seed).count == expected


@settings(max_examples=60)
@given(st.sampled_from([4, 9, 16, 49, 64, 196]), st.floats(0.05, 0.95), st.integers(0, 2**63 - 1))
def test_block_mask_exact_for_any_ratio(k, ratio, seed):
    m = sample_mask(k, "block", ratio, seed)
    assert m.count == mask_count(k, ratio)


def test_mask_count_guards_float_noise():
    assert mask_count(10, 0.7) == 7


def test_random_mask_uniform_frequency():
    rng = generator(0, "mask")
    freq = np.zeros(64)
    for _ in range(10_000):
        freq += sample_mask(64, "random", 0.75, rng).flags
    freq /= 10_000
    assert np.abs(freq - 0.75).max() <= 0.03


@pytest.mark.parametrize("bad", [0.0, 1.0, -0.1])
def test_mask_ratio_bounds(bad):
    with pytest.raises(DataError):
        sample_mask(64, "random", bad, 0)


def test_block_mask_needs_square_grid():
    with pytest.raises(DataError):
        sample_mask(10, "block", 0.5, 0)


def test_aug_config_validation():
    with pytest.raises(DataError):
        replace(AugConfig(), full_view="fancy")
