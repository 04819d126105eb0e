import numpy as np
import pytest

from nldh.errors import DimensionError
from nldh.steganalysis import (
    DETECTORS,
    chi_square_attack,
    detector_report,
    lsb_embed,
    primary_sets,
    rs_analysis,
    sample_pairs,
    steganalysis_score,
)


def _natural_plane(seed=0, size=128):
    """Smooth, noisy test image: low-frequency ramp plus mild grain."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    base = 90 + 60 * np.sin(xx / 23.0) + 40 * np.cos(yy / 17.0)
    base += rng.normal(0, 6.0, size=(size, size))
    return np.clip(base, 0, 255).astype(np.uint8)


def _natural_rgb(seed=0, size=128):
    return np.stack([_natural_plane(seed + k, size) for k in range(3)], axis=2)


# ---------------------------------------------------------------------------
# LSB oracle


def test_lsb_embed_changes_only_lsbs():
    img = _natural_rgb(1)
    rng = np.random.default_rng(0)
    stego = lsb_embed(img, 1.0, rng)
    diff = img.astype(np.int16) - stego.astype(np.int16)
    assert np.abs(diff).max() <= 1
    assert (img >> 1 == stego >> 1).all()


def test_lsb_embed_rate_controls_touched_fraction():
    img = _natural_rgb(2)
    rng = np.random.default_rng(0)
    stego = lsb_embed(img, 0.5, rng, sequential=True)
    flat_i = img.reshape(-1)
    flat_s = stego.reshape(-1)
    half = flat_i.size // 2
    assert (flat_i[half:] == flat_s[half:]).all()  # untouched tail
    frac_changed = float(np.mean(flat_i[:half] != flat_s[:half]))
    assert 0.4 < frac_changed < 0.6  # half of the replaced bits already matched


def test_lsb_embed_zero_rate_is_identity():
    img = _natural_rgb(3)
    out = lsb_embed(img, 0.0, np.random.default_rng(0))
    np.testing.assert_array_equal(out, img)


# ---------------------------------------------------------------------------
# individual detectors on the oracle


@pytest.mark.parametrize("detector", [sample_pairs, primary_sets, rs_analysis])
def test_pair_detectors_track_embedding_rate(detector):
    plane = _natural_plane(4, 192)
    rng = np.random.default_rng(1)
    clean = detector(plane)
    full = detector(lsb_embed(plane, 1.0, rng, sequential=False))
    assert clean < 0.25, "clean image should look clean"
    assert full > 0.6, "fully embedded image should look embedded"
    assert full - clean > 0.4, "full embedding must clearly separate"


def test_chi_square_fires_on_sequential_embedding():
    plane = _natural_plane(5, 192)
    rng = np.random.default_rng(2)
    clean = chi_square_attack(plane)
    full = chi_square_attack(lsb_embed(plane, 1.0, rng, sequential=True))
    assert full > 0.5
    assert clean < 0.3


def test_detectors_monotone_in_rate():
    plane = _natural_plane(6, 192)
    rng = np.random.default_rng(3)
    rates = [0.0, 0.5, 1.0]
    scores = [
        np.mean([sample_pairs(lsb_embed(plane, r, np.random.default_rng(3), sequential=False))])
        for r in rates
    ]
    assert scores[0] < scores[1] < scores[2]
    del rng


def test_detectors_reject_tiny_and_non_2d_inputs():
    for fn in DETECTORS.values():
        with pytest.raises(DimensionError):
            fn(np.zeros((16, 16), dtype=np.uint8))
        with pytest.raises(DimensionError):
            fn(np.zeros((3, 128, 128), dtype=np.uint8))


# ---------------------------------------------------------------------------
# fusion


def test_detector_report_has_all_detectors():
    report = detector_report(_natural_rgb(7))
    assert set(report) == set(DETECTORS)
    assert all(0.0 <= v <= 1.0 for v in report.values())


def test_detector_report_rejects_float_images():
    with pytest.raises(DimensionError):
        detector_report(_natural_rgb(8).astype(np.float32))


def test_score_separates_clean_from_lsb_stego():
    rng = np.random.default_rng(4)
    img = _natural_rgb(9)
    clean_score = steganalysis_score(img)
    stego_score = steganalysis_score(lsb_embed(img, 1.0, rng))
    assert stego_score > clean_score + 0.2


def test_score_bounded():
    for seed in range(3):
        s = steganalysis_score(_natural_rgb(10 + seed))
        assert 0.0 <= s <= 1.0


def test_grayscale_input_accepted():
    score = steganalysis_score(_natural_plane(13))
    assert 0.0 <= score <= 1.0


# ---------------------------------------------------------------------------
# detector bank vs the oracle across many images (the detectability baseline)


def test_lsb_oracle_auc_exceeds_point_nine():
    """The classic bank must reliably flag classic LSB embedding."""
    from nldh.evaluation import roc_auc

    rng = np.random.default_rng(5)
    clean_scores, stego_scores = [], []
    for seed in range(20):
        img = _natural_rgb(100 + seed, 128)
        clean_scores.append(steganalysis_score(img))
        stego_scores.append(steganalysis_score(lsb_embed(img, 0.8, rng)))
    result = roc_auc(clean_scores, stego_scores)
    assert result.auc > 0.9
