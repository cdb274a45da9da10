import math

import numpy as np
import pytest

from vsrlab import corpus, geometric
from vsrlab.errors import DegenerateGeometryError


def _rectangle_mouth():
    """Hand-constructed frame whose every feature is computable on paper."""
    pts = np.zeros((68, 2))
    pts[2] = (-5.0, -2.0)
    pts[14] = (5.0, -2.0)          # unit length 10, unit area 100
    pts[33] = (0.5, -4.0)          # nose base
    outer = [(-2, 0), (-1.5, -1), (-0.5, -1), (0, -1), (0.5, -1), (1.5, -1),
             (2, 0), (1.5, 1), (0.5, 1), (0, 1), (-0.5, 1), (-1.5, 1)]
    inner = [(-1, 0), (-0.5, -0.5), (0, -0.5), (0.5, -0.5),
             (1, 0), (0.5, 0.5), (0, 0.5), (-0.5, 0.5)]
    pts[48:60] = outer
    pts[60:68] = inner
    return pts


def test_hand_computed_rectangle_mouth():
    feats = geometric.geometric_features(_rectangle_mouth())
    # outer polygon: 3x2 rectangle plus two side triangles of area 0.5 -> 7.0
    # outer perimeter: 4*sqrt(1.25) + 6; inner: 4*sqrt(0.5) + 2
    # corner angle: arccos(-0.6) at both corners
    # centroid (0,0), nose (0.5,-4): vertical 4/10, horizontal 0.5/10
    expected = [
        0.4,                                   # outer width 4/10
        0.2,                                   # outer height 2/10
        0.2,                                   # inner width 2/10
        0.1,                                   # inner height 1/10
        0.07,                                  # outer area 7/100
        0.015,                                 # inner area 1.5/100
        (4 * math.sqrt(1.25) + 6) / 10,
        (4 * math.sqrt(0.5) + 2) / 10,
        0.5,                                   # outer aspect 2/4
        0.5,                                   # inner aspect 1/2
        0.05,                                  # upper lip 0.5/10
        0.05,                                  # lower lip 0.5/10
        2.214297435588181,                     # arccos(-0.6)
        2.214297435588181,
        0.4,
        0.05,
        1.5 / 7.0,
        0.015,
    ]
    assert feats.shape == (18,)
    np.testing.assert_allclose(feats, expected, atol=1e-12)


def test_feature_names_align():
    assert len(geometric.FEATURE_NAMES) == geometric.N_FEATURES == 18
    assert len(set(geometric.FEATURE_NAMES)) == 18


def _random_valid_frame(rng):
    pts = rng.uniform(-1.0, 1.0, (68, 2))
    base = _rectangle_mouth()
    jitter = rng.uniform(-0.08, 0.08, (68, 2))
    return base + jitter + pts * 0.0


def test_rotation_invariance():
    rng = np.random.default_rng(12)
    pts = _random_valid_frame(rng)
    ref = geometric.geometric_features(pts)
    for deg in (47.0, 133.0, -101.0, 180.0):
        th = math.radians(deg)
        rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
        center = rng.uniform(-3, 3, 2)
        moved = (pts - center) @ rot.T + center
        np.testing.assert_allclose(geometric.geometric_features(moved), ref, atol=1e-9)


def test_exact_translation_and_scale_invariance():
    # integer grid: translations by integers and power-of-two scalings are
    # exactly representable, so the feature vector must be bit-identical
    pts = _rectangle_mouth() * 4.0  # integer coordinates throughout
    assert np.all(pts == np.round(pts))
    ref = geometric.geometric_features(pts)
    for shift in ((7.0, -3.0), (120.0, 45.0)):
        assert np.array_equal(geometric.geometric_features(pts + np.array(shift)), ref)
    for scale in (2.0, 8.0, 0.5):
        assert np.array_equal(geometric.geometric_features(pts * scale), ref)


def test_shoelace_against_monte_carlo():
    pts = _rectangle_mouth()
    outer = pts[48:60]
    area = geometric._polygon_area(outer)
    rng = np.random.default_rng(99)
    lo = outer.min(axis=0)
    hi = outer.max(axis=0)
    samples = rng.uniform(lo, hi, (200_000, 2))
    # independent even-odd ray-crossing membership test
    inside = np.zeros(len(samples), dtype=bool)
    n = len(outer)
    for i in range(n):
        x1, y1 = outer[i]
        x2, y2 = outer[(i + 1) % n]
        crosses = (y1 > samples[:, 1]) != (y2 > samples[:, 1])
        with np.errstate(divide="ignore", invalid="ignore"):
            xs = x1 + (samples[:, 1] - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (samples[:, 0] < xs)
    mc_area = inside.mean() * np.prod(hi - lo)
    assert abs(mc_area - area) / area < 0.02


def test_degenerate_geometry():
    pts = _rectangle_mouth()
    pts[2] = pts[14]
    with pytest.raises(DegenerateGeometryError):
        geometric.geometric_features(pts)
    pts = _rectangle_mouth()
    pts[54] = pts[48]
    with pytest.raises(DegenerateGeometryError):
        geometric.geometric_features(pts)
    pts = _rectangle_mouth()
    pts[48:60, 1] = 0.0
    pts[48:60, 0] = np.linspace(-2, 2, 12)
    with pytest.raises(DegenerateGeometryError):
        geometric.geometric_features(pts)


def test_sequence_on_synthetic_corpus(tmp_path):
    spec = corpus.SynthSpec(lexicon=corpus.default_lexicon(5, seed=0), n_speakers=2,
                            n_utterances=2, seed=21, image_size=(64, 64))
    recs = corpus.synthesize_corpus(spec, tmp_path)
    lms = corpus.read_landmarks(recs[0].landmark_path)
    feats = geometric.geometric_sequence(lms)
    assert feats.shape == (len(lms), 18)
    assert np.isfinite(feats).all()
    # articulation must actually move the mouth: most dims vary over time
    assert (feats.std(axis=0) > 1e-6).sum() >= 12
