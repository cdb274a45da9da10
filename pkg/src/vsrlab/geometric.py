"""High-level geometric lip features from 68-point landmark frames.

Eighteen scalars per frame, built from the mouth ring (outer lip 48..59,
inner lip 60..67), the jaw (2, 14), and the nose base (33). Lengths are
normalized by the jaw width |p2 - p14|, areas by its square, so the vector is
invariant to translation, rotation, and isotropic scale of the landmark set.

The mouth-local frame is built without trigonometry: u is the unit vector
from the left to the right outer corner, v its perpendicular. On integer
coordinate grids this makes the vector bit-exact under integer translations
and power-of-two scalings, which the test suite checks with equality, not
tolerances.
"""

import numpy as np

from .errors import DegenerateGeometryError

FEATURE_NAMES = (
    "outer_width",
    "outer_height",
    "inner_width",
    "inner_height",
    "outer_area",
    "inner_area",
    "outer_perimeter",
    "inner_perimeter",
    "outer_aspect",
    "inner_aspect",
    "upper_lip_thickness",
    "lower_lip_thickness",
    "left_corner_angle",
    "right_corner_angle",
    "vertical_nose_offset",
    "horizontal_nose_offset",
    "area_ratio",
    "inner_area_units",
)
N_FEATURES = len(FEATURE_NAMES)

_OUTER = np.arange(48, 60)
_INNER = np.arange(60, 68)
_MOUTH = np.arange(48, 68)


def _dist(a, b):
    return float(np.hypot(a[0] - b[0], a[1] - b[1]))


def _polygon_area(pts):
    """Absolute shoelace area of a closed polygon given as (N, 2) vertices."""
    x = pts[:, 0]
    y = pts[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y)))


def _perimeter(pts):
    closed = np.vstack([pts, pts[:1]])
    return float(np.sum(np.hypot(np.diff(closed[:, 0]), np.diff(closed[:, 1]))))


def _angle_between(a, b):
    na = np.hypot(a[0], a[1])
    nb = np.hypot(b[0], b[1])
    if na == 0.0 or nb == 0.0:
        raise DegenerateGeometryError("zero-length edge at a mouth corner")
    cosv = (a[0] * b[0] + a[1] * b[1]) / (na * nb)
    return float(np.arccos(min(1.0, max(-1.0, cosv))))


def geometric_features(landmarks):
    """The 18-dimensional feature vector for one (68, 2) landmark frame."""
    pts = np.asarray(landmarks, dtype=float)
    if pts.shape != (68, 2):
        raise ValueError(f"expected (68, 2) landmarks, got {pts.shape}")
    # local origin at the left mouth corner; on exactly representable inputs
    # this cancels any common translation before further arithmetic
    p = pts - pts[48]

    unit = _dist(p[2], p[14])
    if unit == 0.0:
        raise DegenerateGeometryError("jaw landmarks coincide; unit length undefined")
    unit_area = unit * unit

    d = p[54] - p[48]
    norm_d = np.hypot(d[0], d[1])
    if norm_d == 0.0:
        raise DegenerateGeometryError("mouth corners coincide")
    u = d / norm_d
    v = np.array([-u[1], u[0]])

    outer = p[_OUTER]
    inner = p[_INNER]
    outer_w = _dist(p[48], p[54])
    outer_h = _dist(p[51], p[57])
    inner_w = _dist(p[60], p[64])
    inner_h = _dist(p[62], p[66])
    if outer_w == 0.0 or inner_w == 0.0:
        raise DegenerateGeometryError("zero mouth width")
    outer_area = _polygon_area(outer)
    inner_area = _polygon_area(inner)
    if outer_area == 0.0:
        raise DegenerateGeometryError("outer lip polygon has zero area")

    centroid = p[_MOUTH].mean(axis=0)
    offset = centroid - p[33]
    along = offset[0] * u[0] + offset[1] * u[1]
    across = offset[0] * v[0] + offset[1] * v[1]

    return np.array([
        outer_w / unit,
        outer_h / unit,
        inner_w / unit,
        inner_h / unit,
        outer_area / unit_area,
        inner_area / unit_area,
        _perimeter(outer) / unit,
        _perimeter(inner) / unit,
        outer_h / outer_w,
        inner_h / inner_w,
        _dist(p[51], p[62]) / unit,
        _dist(p[57], p[66]) / unit,
        _angle_between(p[49] - p[48], p[59] - p[48]),
        _angle_between(p[53] - p[54], p[55] - p[54]),
        abs(across) / unit,
        abs(along) / unit,
        inner_area / outer_area,
        inner_area / unit_area,
    ])


def geometric_sequence(landmark_seq):
    """Feature matrix (T, 18) for a (T, 68, 2) landmark sequence."""
    seq = np.asarray(landmark_seq, dtype=float)
    out = np.empty((seq.shape[0], N_FEATURES))
    for t in range(seq.shape[0]):
        out[t] = geometric_features(seq[t])
    return out
