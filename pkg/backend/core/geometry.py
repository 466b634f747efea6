"""Camera model, projection, distortion, cross-sensor alignment and rotation math."""
import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from core.errors import InvalidInputError, SingularFitError
from db.models import AffineWarp, CameraIntrinsics

logger = logging.getLogger(__name__)

UNDISTORT_MAX_ITERS = 20
UNDISTORT_TOL_PX = 1e-8
UNDISTORT_ROUNDTRIP_PX = 1e-6


@dataclass(frozen=True, eq=False)
class Pose:
    """Object pose in the chaser camera frame: X_cam = R(q) @ X_model + t.

    q is stored as (w, x, y, z), unit norm, with w >= 0.
    """
    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).reshape(4)
        norm = np.linalg.norm(q)
        if not np.isfinite(norm) or norm == 0.0:
            raise InvalidInputError(f"quaternion {q} cannot be normalized")
        q = q / norm
        if q[0] < 0:
            q = -q
        t = np.asarray(self.t, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise InvalidInputError(f"translation {t} is not finite")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls, t: Sequence[float] = (0.0, 0.0, 0.0)) -> "Pose":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.asarray(t, dtype=float))

    @classmethod
    def zero(cls) -> "Pose":
        """Stand-in stored for degenerate solves: zero rotation vector and zero translation."""
        return cls.identity()

    @classmethod
    def from_rotation(cls, rotation: np.ndarray, t: Sequence[float]) -> "Pose":
        x, y, z, w = Rotation.from_matrix(np.asarray(rotation, dtype=float)).as_quat()
        return cls(np.array([w, x, y, z]), np.asarray(t, dtype=float))

    @classmethod
    def from_axis_angle(cls, axis: Sequence[float], degrees: float, t: Sequence[float] = (0.0, 0.0, 0.0)) -> "Pose":
        axis = np.asarray(axis, dtype=float)
        axis = axis / np.linalg.norm(axis)
        x, y, z, w = Rotation.from_rotvec(axis * np.radians(degrees)).as_quat()
        return cls(np.array([w, x, y, z]), np.asarray(t, dtype=float))

    @property
    def rotation(self) -> np.ndarray:
        w, x, y, z = self.q
        return Rotation.from_quat([x, y, z, w]).as_matrix()

    def transform(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.t

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        same_q = np.allclose(self.q, other.q, atol=atol) or np.allclose(self.q, -other.q, atol=atol)
        return bool(same_q and np.allclose(self.t, other.t, atol=atol))


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    points: np.ndarray

    def __post_init__(self):
        points = np.asarray(self.points, dtype=float)
        if points.ndim != 2 or points.shape[1] != 3:
            raise InvalidInputError(f"landmarks must have shape (Z, 3), got {points.shape}")
        if points.shape[0] < 4:
            raise InvalidInputError(f"at least 4 landmarks are required, got {points.shape[0]}")
        object.__setattr__(self, "points", points)

    @property
    def Z(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True, eq=False)
class KeypointSet:
    points: np.ndarray
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        valid = np.ones(points.shape[0], dtype=bool) if self.valid is None else np.asarray(self.valid, dtype=bool)
        if valid.shape != (points.shape[0],):
            raise InvalidInputError(f"validity mask shape {valid.shape} does not match {points.shape[0]} keypoints")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "valid", valid)

    @property
    def Z(self) -> int:
        return self.points.shape[0]

    @property
    def valid_count(self) -> int:
        return int(self.valid.sum())

    def with_points(self, points: np.ndarray) -> "KeypointSet":
        return KeypointSet(points, self.valid.copy())


class AlignmentFit(NamedTuple):
    warp: AffineWarp
    residual_rms: float


def distort_normalized(x: np.ndarray, y: np.ndarray, dist: Sequence[float]):
    """Brown-Conrady forward model on normalized image coordinates."""
    k1, k2, k3, p1, p2 = dist
    r2 = x * x + y * y
    radial = 1.0 + k1 * r2 + k2 * r2 * r2 + k3 * r2 * r2 * r2
    xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
    yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
    return xd, yd


def project(landmarks: LandmarkSet, pose: Pose, K: CameraIntrinsics, apply_distortion: bool = False) -> KeypointSet:
    """Pinhole projection of the landmarks through pose.

    Points with non-positive depth come back invalid (NaN coordinates).
    """
    cam = pose.transform(landmarks.points)
    depth = cam[:, 2]
    valid = depth > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        xn = np.where(valid, cam[:, 0] / depth, np.nan)
        yn = np.where(valid, cam[:, 1] / depth, np.nan)
    if apply_distortion and K.has_distortion:
        xn, yn = distort_normalized(xn, yn, K.dist)
    points = np.column_stack([K.fx * xn + K.cx, K.fy * yn + K.cy])
    n_behind = int((~valid).sum())
    if n_behind:
        logger.debug(f"{n_behind} landmarks behind the camera marked invalid")
    return KeypointSet(points, valid)


def undistort_points(kps: KeypointSet, K: CameraIntrinsics) -> KeypointSet:
    """Inverts the distortion model by fixed-point iteration.

    Points that do not reproduce their observation within 1e-6 px after the
    iteration cap are flagged invalid.
    """
    if not K.has_distortion:
        return KeypointSet(kps.points.copy(), kps.valid.copy())
    xd = (kps.points[:, 0] - K.cx) / K.fx
    yd = (kps.points[:, 1] - K.cy) / K.fy
    k1, k2, k3, p1, p2 = K.dist
    x, y = xd.copy(), yd.copy()
    for _ in range(UNDISTORT_MAX_ITERS):
        r2 = x * x + y * y
        radial = 1.0 + k1 * r2 + k2 * r2 * r2 + k3 * r2 * r2 * r2
        dx = 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
        dy = p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
        x_new = (xd - dx) / radial
        y_new = (yd - dy) / radial
        step = np.maximum(np.abs(x_new - x) * K.fx, np.abs(y_new - y) * K.fy)
        x, y = x_new, y_new
        if np.all(~kps.valid | (step < UNDISTORT_TOL_PX)):
            break

    xr, yr = distort_normalized(x, y, K.dist)
    with np.errstate(invalid="ignore"):
        err = np.hypot((xr - xd) * K.fx, (yr - yd) * K.fy)
        converged = np.isfinite(err) & (err < UNDISTORT_ROUNDTRIP_PX)
    valid = kps.valid & converged
    n_failed = int((kps.valid & ~converged).sum())
    if n_failed:
        logger.warning(f"undistortion did not converge for {n_failed} keypoints")
    points = np.column_stack([K.fx * x + K.cx, K.fy * y + K.cy])
    points[~valid] = np.nan
    return KeypointSet(points, valid)


def distort_points(kps: KeypointSet, K: CameraIntrinsics) -> KeypointSet:
    xn = (kps.points[:, 0] - K.cx) / K.fx
    yn = (kps.points[:, 1] - K.cy) / K.fy
    xd, yd = distort_normalized(xn, yn, K.dist)
    return KeypointSet(np.column_stack([K.fx * xd + K.cx, K.fy * yd + K.cy]), kps.valid.copy())


def fit_alignment(src: np.ndarray, dst: np.ndarray, full_affine: bool = False) -> AlignmentFit:
    """Least-squares event-to-RGB warp from point correspondences.

    The default model is per-axis scale + translation; full_affine adds the
    off-diagonal terms.
    """
    src = np.asarray(src, dtype=float).reshape(-1, 2)
    dst = np.asarray(dst, dtype=float).reshape(-1, 2)
    if src.shape != dst.shape:
        raise InvalidInputError(f"correspondence counts differ: {src.shape[0]} vs {dst.shape[0]}")
    if src.shape[0] < (3 if full_affine else 2):
        raise InvalidInputError(f"not enough correspondences: {src.shape[0]}")

    extent = max(np.ptp(src[:, 0]), np.ptp(src[:, 1]), 1.0)
    if full_affine:
        design = np.column_stack([src, np.ones(len(src))])
        if np.linalg.matrix_rank(design, tol=1e-9 * extent) < 3:
            raise SingularFitError("source points are collinear")
        coeffs, *_ = np.linalg.lstsq(design, dst, rcond=None)
        (sx, ky), (kx, sy), (tx, ty) = coeffs
    else:
        params = []
        for axis in (0, 1):
            if np.var(src[:, axis]) <= (1e-12 * extent) ** 2:
                raise SingularFitError(f"source points have no spread along {'xy'[axis]}")
            design = np.column_stack([src[:, axis], np.ones(len(src))])
            (scale, shift), *_ = np.linalg.lstsq(design, dst[:, axis], rcond=None)
            params.append((scale, shift))
        (sx, tx), (sy, ty) = params
        kx = ky = 0.0
    if sx <= 0 or sy <= 0:
        raise SingularFitError(f"fitted scales must be positive, got sx={sx:.4g}, sy={sy:.4g}")

    warp = AffineWarp(sx=float(sx), sy=float(sy), tx=float(tx), ty=float(ty), kx=float(kx), ky=float(ky))
    residual = dst - apply_warp(src, warp)
    rms = float(np.sqrt(np.mean(np.sum(residual ** 2, axis=1))))
    logger.info(f"alignment fitted on {len(src)} correspondences, residual RMS {rms:.4f} px")
    return AlignmentFit(warp, rms)


def apply_warp(points: np.ndarray, w: AffineWarp) -> np.ndarray:
    m = w.matrix
    points = np.asarray(points, dtype=float)
    return points @ m[:, :2].T + m[:, 2]


def warp_points(kps: KeypointSet, w: AffineWarp) -> KeypointSet:
    return KeypointSet(apply_warp(kps.points, w), kps.valid.copy())


def warp_frame(frame, w: AffineWarp, width: Optional[int] = None, height: Optional[int] = None):
    """Resamples an EventFrame through the warp with bilinear interpolation.

    Pixels mapped from outside the source read as no activity: 0.5 for signed
    frames, 0 otherwise.
    """
    from core.event_core import EventFrame

    width = frame.width if width is None else width
    height = frame.height if height is None else height
    if frame.empty:
        return EventFrame.zeros(width, height, frame.window_start, frame.window_end, frame.polarity_mode)
    cval = 0.5 if frame.polarity_mode == "signed" else 0.0
    inv = w.inverse().matrix
    # affine_transform maps output (row, col) to input (row, col)
    matrix = np.array([[inv[1, 1], inv[1, 0]], [inv[0, 1], inv[0, 0]]])
    offset = np.array([inv[1, 2], inv[0, 2]])
    values = ndimage.affine_transform(
        frame.values, matrix, offset=offset, output_shape=(height, width),
        order=1, mode="constant", cval=cval, prefilter=False,
    )
    values = np.clip(values, 0.0, 1.0)
    return EventFrame(
        values=values, width=width, height=height,
        window_start=frame.window_start, window_end=frame.window_end,
        empty=not bool(np.any(np.abs(values - cval) > 1e-12)), polarity_mode=frame.polarity_mode,
    )


def quat_angle(a: Sequence[float], b: Sequence[float]) -> float:
    """Geodesic angle in degrees between two orientations, 2*arccos(|<a, b>|)."""
    a = np.asarray(a, dtype=float).reshape(4)
    b = np.asarray(b, dtype=float).reshape(4)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0 or not np.isfinite(na * nb):
        raise InvalidInputError("quaternion must be non-zero and finite")
    dot = abs(float(np.dot(a / na, b / nb)))
    return float(np.degrees(2.0 * np.arccos(np.clip(dot, -1.0, 1.0))))


def points_in_polygon(points: np.ndarray, polygon: np.ndarray) -> np.ndarray:
    """Even-odd ray casting; polygon is (V, 2) in order."""
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    polygon = np.asarray(polygon, dtype=float).reshape(-1, 2)
    x, y = points[:, 0], points[:, 1]
    inside = np.zeros(len(points), dtype=bool)
    for i in range(len(polygon)):
        x1, y1 = polygon[i]
        x2, y2 = polygon[(i + 1) % len(polygon)]
        crosses = (y1 > y) != (y2 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_cross = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (x < x_cross)
    return inside
