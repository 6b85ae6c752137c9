"""Oriented grasp rectangles, per-pixel grasp maps and the Jaccard metric.

Coordinates are image pixels with the centre of pixel ``(i, j)`` at
``(row=i, col=j)``. Corner lists follow the Cornell convention of ``(x, y)``
pairs with ``x = col`` and ``y = row``. A rectangle's ``angle`` is the
direction of the gripper opening axis, ``atan2(d_row, d_col)``, folded into
``[-pi/2, pi/2)`` because a parallel-jaw grasp is symmetric under a half turn.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

DEFAULT_WIDTH_SCALE = 150.0
SUCCESS_THRESHOLD = 0.25


class InvalidRectangleError(ValueError):
    """Corner list cannot describe a grasp (NaN/Inf or zero-length edge)."""


def normalize_angle(angle: float) -> float:
    """Fold an angle into ``[-pi/2, pi/2)``."""
    a = (angle + math.pi / 2) % math.pi - math.pi / 2
    # float modulo can land exactly on +pi/2 for inputs a hair below it
    if a >= math.pi / 2:
        a -= math.pi
    return a


@dataclass(frozen=True)
class GraspRectangle:
    center_row: float
    center_col: float
    angle: float
    width: float
    height: float
    quality: float = 1.0

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise InvalidRectangleError(
                f"width and height must be positive, got {self.width}, {self.height}")
        object.__setattr__(self, "angle", normalize_angle(self.angle))

    @property
    def center(self) -> tuple[float, float]:
        return self.center_row, self.center_col

    @property
    def area(self) -> float:
        return self.width * self.height

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        """Unit vectors (row, col) along the opening axis and the jaw axis."""
        u = np.array([math.sin(self.angle), math.cos(self.angle)])
        v = np.array([math.cos(self.angle), -math.sin(self.angle)])
        return u, v

    def corners(self) -> np.ndarray:
        """4x2 array of ``(x, y)`` corners; edge 0->1 is the opening edge."""
        u, v = self.axes()
        c = np.array(self.center)
        hw, hh = self.width / 2, self.height / 2
        rc = np.stack([c - u * hw - v * hh,
                       c + u * hw - v * hh,
                       c + u * hw + v * hh,
                       c - u * hw + v * hh])
        return rc[:, ::-1].copy()

    def as_dict(self) -> dict:
        return {"center_row": self.center_row, "center_col": self.center_col,
                "angle": self.angle, "width": self.width, "quality": self.quality}


def parse_rectangle(corners) -> GraspRectangle:
    """Build a rectangle from four ``(x, y)`` corners.

    The edge from the first to the second corner is taken as the gripper
    opening axis (its length is the grasp width); the next edge gives the jaw
    span (height).
    """
    pts = np.asarray(corners, dtype=float)
    if pts.shape != (4, 2):
        raise InvalidRectangleError(f"expected 4 (x, y) corners, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise InvalidRectangleError("corner list contains NaN or Inf")
    rc = pts[:, ::-1]
    opening = rc[1] - rc[0]
    jaw = rc[2] - rc[1]
    width = float(np.hypot(*opening))
    height = float(np.hypot(*jaw))
    if width == 0.0 or height == 0.0:
        raise InvalidRectangleError("degenerate rectangle with a zero-length edge")
    centre = rc.mean(axis=0)
    angle = math.atan2(opening[0], opening[1])
    return GraspRectangle(float(centre[0]), float(centre[1]), angle, width, height)


def center_third(rect: GraspRectangle) -> GraspRectangle:
    """Middle third of the rectangle along the opening axis."""
    return replace(rect, width=rect.width / 3)


def _canonical(axis: np.ndarray) -> np.ndarray:
    # a rectangle is unchanged by reversing an axis; fixing the sign keeps the
    # closed/open sides of the membership test independent of the angle wrap
    r, c = axis
    if c < -1e-12 or (abs(c) <= 1e-12 and r < 0):
        return -axis
    return axis


def rect_mask(rect: GraspRectangle, shape: tuple[int, int]) -> np.ndarray:
    """Boolean mask of pixels whose centre lies inside ``rect``.

    Membership is half-open along both rectangle axes so that two rectangles
    sharing an edge never both claim a pixel.
    """
    H, W = shape
    rows, cols = np.mgrid[0:H, 0:W].astype(float)
    u, v = (_canonical(a) for a in rect.axes())
    dr, dc = rows - rect.center_row, cols - rect.center_col
    s = dr * u[0] + dc * u[1]
    t = dr * v[0] + dc * v[1]
    hw, hh = rect.width / 2, rect.height / 2
    return (s >= -hw) & (s < hw) & (t >= -hh) & (t < hh)


@dataclass
class GraspMaps:
    """Per-pixel quality, angle (as sin/cos of twice the angle) and width."""

    quality: np.ndarray
    angle_sin: np.ndarray
    angle_cos: np.ndarray
    width: np.ndarray

    def __post_init__(self):
        shapes = {m.shape for m in (self.quality, self.angle_sin, self.angle_cos, self.width)}
        if len(shapes) != 1:
            raise ValueError(f"grasp maps disagree in shape: {sorted(shapes)}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.quality.shape

    def stack(self) -> np.ndarray:
        return np.stack([self.quality, self.angle_sin, self.angle_cos, self.width])

    @classmethod
    def from_array(cls, arr) -> "GraspMaps":
        arr = np.asarray(arr)
        if arr.ndim != 3 or arr.shape[0] != 4:
            raise ValueError(f"expected a 4xHxW array, got {arr.shape}")
        return cls(arr[0], arr[1], arr[2], arr[3])

    def angle(self) -> np.ndarray:
        return 0.5 * np.arctan2(self.angle_sin, self.angle_cos)


def rectangles_to_maps(rects, H: int, W: int,
                       width_scale: float = DEFAULT_WIDTH_SCALE) -> GraspMaps:
    """Rasterize the centre thirds of ``rects`` into training targets.

    Later rectangles overwrite earlier ones where regions overlap.
    """
    if width_scale <= 0:
        raise ValueError("width_scale must be positive")
    q = np.zeros((H, W))
    s = np.zeros((H, W))
    c = np.zeros((H, W))
    w = np.zeros((H, W))
    for rect in rects:
        mask = rect_mask(center_third(rect), (H, W))
        q[mask] = 1.0
        s[mask] = math.sin(2 * rect.angle)
        c[mask] = math.cos(2 * rect.angle)
        w[mask] = min(rect.width / width_scale, 1.0)
    return GraspMaps(q, s, c, w)


def maps_to_grasp(maps: GraspMaps, width_scale: float = DEFAULT_WIDTH_SCALE,
                  sigma: float = 0.0) -> GraspRectangle:
    """Decode the single best grasp from a set of maps.

    The peak is the quality argmax, ties going to the lowest row-major index.
    When the peak sits on a connected plateau of equal scores (label maps are
    flat over each centre third) the decoded centre is the middle of that
    plateau's extent along the grasp axes, so a flat region decodes to its
    middle rather than its first pixel. A map that is constant everywhere says
    nothing about location, so it keeps the plain tie-break pixel. Angle and
    width are read at the peak; the height is set to half the width. ``sigma > 0`` Gaussian-smooths the
    quality map before the search.
    """
    q = np.asarray(maps.quality, dtype=float)
    if q.size == 0:
        raise ValueError("empty grasp maps")
    score = ndimage.gaussian_filter(q, sigma, mode="nearest") if sigma > 0 else q
    idx = int(np.argmax(score))
    row, col = divmod(idx, q.shape[1])
    angle = 0.5 * math.atan2(float(maps.angle_sin[row, col]), float(maps.angle_cos[row, col]))
    width = float(maps.width[row, col]) * width_scale
    # a zero-width prediction still has to be a valid rectangle for scoring
    width = max(width, 1e-6)
    centre_row, centre_col = float(row), float(col)
    plateau, _ = ndimage.label(score == score[row, col], structure=np.ones((3, 3)))
    rows, cols = np.nonzero(plateau == plateau[row, col])
    if 1 < len(rows) < q.size:
        u = np.array([math.sin(angle), math.cos(angle)])
        v = np.array([math.cos(angle), -math.sin(angle)])
        pts = np.stack([rows, cols], axis=1).astype(float)
        ps, pt = pts @ u, pts @ v
        mid = u * (ps.min() + ps.max()) / 2 + v * (pt.min() + pt.max()) / 2
        centre_row, centre_col = float(mid[0]), float(mid[1])
    return GraspRectangle(centre_row, centre_col, angle, width, width / 2,
                          quality=float(q[row, col]))


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by the convex polygon ``clip``.

    Both polygons are (n, 2) vertex arrays; ``clip`` must be counter-clockwise
    (positive signed area).
    """
    output = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not output:
            break
        a, b = clip[i], clip[(i + 1) % n]
        ex, ey = b[0] - a[0], b[1] - a[1]

        def side(p):
            return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

        inp, output = output, []
        prev = inp[-1]
        prev_side = side(prev)
        for cur in inp:
            cur_side = side(cur)
            if cur_side >= 0:
                if prev_side < 0:
                    output.append(_cross_point(prev, cur, prev_side, cur_side))
                output.append(cur)
            elif prev_side >= 0:
                output.append(_cross_point(prev, cur, prev_side, cur_side))
            prev, prev_side = cur, cur_side
    return np.array(output, dtype=float).reshape(-1, 2)


def _cross_point(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def _ccw(poly: np.ndarray) -> np.ndarray:
    return poly if polygon_area(poly) > 0 else poly[::-1]


def jaccard(a: GraspRectangle, b: GraspRectangle) -> float:
    """Intersection over union of two oriented rectangles."""
    pa, pb = _ccw(a.corners()), _ccw(b.corners())
    inter = abs(polygon_area(clip_convex(pa, pb)))
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def is_success(pred: GraspRectangle, ground_truth, threshold: float = SUCCESS_THRESHOLD,
               max_angle_diff: float | None = None) -> bool:
    """True if ``pred`` overlaps any ground-truth rectangle by more than ``threshold``.

    ``max_angle_diff`` (radians) optionally adds an angle-agreement condition;
    it is off by default.
    """
    for gt in ground_truth:
        if max_angle_diff is not None and angle_difference(pred.angle, gt.angle) > max_angle_diff:
            continue
        if jaccard(pred, gt) > threshold:
            return True
    return False


def angle_difference(a: float, b: float) -> float:
    """Smallest difference between two grasp angles, modulo pi."""
    d = abs(a - b) % math.pi
    return min(d, math.pi - d)
