"""EPnP solver and seeded RANSAC over 2D-3D correspondences."""
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from core.errors import InsufficientCorrespondencesError, InvalidInputError, PnPSolverError
from core.geometry import KeypointSet, LandmarkSet, Pose
from db.models import CameraIntrinsics, Channel, RansacConfig

logger = logging.getLogger(__name__)

# Control point pairs for the distance constraints, in the column order of L
PAIRS = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))
MAX_CONDITION = 1e12

CHANNEL_CODES = {Channel.RGB: 0, Channel.EVENT: 1}


@dataclass(frozen=True)
class Correspondence:
    p3: tuple
    p2: tuple
    channel: Channel
    landmark_id: int


@dataclass(frozen=True, eq=False)
class Correspondences:
    """Column-wise storage of N correspondences.

    channel holds 0 for rgb and 1 for event.
    """
    p3: np.ndarray
    p2: np.ndarray
    channel: np.ndarray
    landmark_id: np.ndarray

    def __post_init__(self):
        p3 = np.asarray(self.p3, dtype=float).reshape(-1, 3)
        p2 = np.asarray(self.p2, dtype=float).reshape(-1, 2)
        n = p3.shape[0]
        if p2.shape[0] != n or len(self.channel) != n or len(self.landmark_id) != n:
            raise InvalidInputError("correspondence columns have different lengths")
        object.__setattr__(self, "p3", p3)
        object.__setattr__(self, "p2", p2)
        object.__setattr__(self, "channel", np.asarray(self.channel, dtype=np.int8))
        object.__setattr__(self, "landmark_id", np.asarray(self.landmark_id, dtype=np.int64))

    def __len__(self) -> int:
        return self.p3.shape[0]

    def __getitem__(self, i: int) -> Correspondence:
        channel = Channel.RGB if self.channel[i] == 0 else Channel.EVENT
        return Correspondence(tuple(self.p3[i]), tuple(self.p2[i]), channel, int(self.landmark_id[i]))

    def subset(self, idx) -> "Correspondences":
        return Correspondences(self.p3[idx], self.p2[idx], self.channel[idx], self.landmark_id[idx])

    @classmethod
    def from_list(cls, items) -> "Correspondences":
        items = list(items)
        return cls(
            [c.p3 for c in items], [c.p2 for c in items],
            [CHANNEL_CODES[Channel(c.channel)] for c in items], [c.landmark_id for c in items],
        )


@dataclass(frozen=True, eq=False)
class PnPResult:
    pose: Pose
    inliers: np.ndarray
    degenerate: bool
    mean_reproj_error: float
    n_hypotheses: int = 0

    @property
    def n_inliers(self) -> int:
        return int(len(self.inliers))

    @classmethod
    def degenerate_result(cls, n_hypotheses: int = 0) -> "PnPResult":
        return cls(Pose.zero(), np.zeros(0, dtype=np.int64), True, math.inf, n_hypotheses)


# --- Correspondence building ---
def channel_correspondences(kps: KeypointSet, L: LandmarkSet, channel: Channel) -> Correspondences:
    """Valid keypoints of one channel paired with their landmarks."""
    if kps.Z != L.Z:
        raise InvalidInputError(f"keypoint count {kps.Z} does not match landmark count {L.Z}")
    ids = np.flatnonzero(kps.valid & np.all(np.isfinite(kps.points), axis=1))
    return Correspondences(L.points[ids], kps.points[ids], np.full(len(ids), CHANNEL_CODES[channel]), ids)


def fuse_correspondences(m_rgb: KeypointSet, m_event: KeypointSet, L: LandmarkSet) -> Correspondences:
    """Concatenates both channels against the same landmarks, rgb first."""
    if m_rgb.Z != m_event.Z:
        raise InvalidInputError(f"channel keypoint counts differ: {m_rgb.Z} vs {m_event.Z}")
    rgb = channel_correspondences(m_rgb, L, Channel.RGB)
    event = channel_correspondences(m_event, L, Channel.EVENT)
    return Correspondences(
        np.concatenate([rgb.p3, event.p3]), np.concatenate([rgb.p2, event.p2]),
        np.concatenate([rgb.channel, event.channel]), np.concatenate([rgb.landmark_id, event.landmark_id]),
    )


# --- Residuals ---
def reprojection_errors(pose: Pose, corrs: Correspondences, K: CameraIntrinsics) -> np.ndarray:
    """Pixel residual per correspondence; inf for points at or behind the camera."""
    cam = pose.transform(corrs.p3)
    depth = cam[:, 2]
    front = depth > 0
    errors = np.full(len(corrs), np.inf)
    if np.any(front):
        u = K.fx * cam[front, 0] / depth[front] + K.cx
        v = K.fy * cam[front, 1] / depth[front] + K.cy
        errors[front] = np.hypot(u - corrs.p2[front, 0], v - corrs.p2[front, 1])
    return errors


def reprojection_error(pose: Pose, c: Correspondence, K: CameraIntrinsics) -> float:
    return float(reprojection_errors(pose, Correspondences.from_list([c]), K)[0])


# --- EPnP ---
def _control_points(pw: np.ndarray) -> np.ndarray:
    """Centroid plus the principal directions scaled by their spread, shape (4, 3)."""
    centroid = pw.mean(axis=0)
    centered = pw - centroid
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    if s[-1] <= 1e-9 * max(s[0], 1e-12):
        raise PnPSolverError("landmarks are coplanar or collinear")
    axes = vt * (s / np.sqrt(len(pw)))[:, None]
    return np.vstack([centroid, centroid + axes])


def _alphas(pw: np.ndarray, cw: np.ndarray) -> np.ndarray:
    system = np.vstack([cw.T, np.ones(4)])
    if np.linalg.cond(system) > MAX_CONDITION:
        raise PnPSolverError("barycentric system is ill-conditioned")
    rhs = np.vstack([pw.T, np.ones(len(pw))])
    return np.linalg.solve(system, rhs).T


def _build_m(alphas: np.ndarray, uv: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    n = len(alphas)
    m = np.zeros((2 * n, 12))
    m[0::2, 0::3] = alphas * K.fx
    m[0::2, 2::3] = alphas * (K.cx - uv[:, 0])[:, None]
    m[1::2, 1::3] = alphas * K.fy
    m[1::2, 2::3] = alphas * (K.cy - uv[:, 1])[:, None]
    return m


def _pair_diffs(kernel: np.ndarray) -> np.ndarray:
    """(6, 4, 3) control-point differences per pair and kernel vector."""
    v = kernel.reshape(4, 4, 3)
    return np.stack([v[:, a] - v[:, b] for a, b in PAIRS])


def _pair_products(diffs: np.ndarray) -> np.ndarray:
    """(6, 4, 4) dot products between kernel differences per pair."""
    return np.einsum("kic,kjc->kij", diffs, diffs)


def _linearized_l(products: np.ndarray) -> np.ndarray:
    """L (6x10) on b11, b12, b22, b13, b23, b33, b14, b24, b34, b44."""
    cols = []
    for j in range(4):
        for i in range(j + 1):
            cols.append(products[:, i, j] * (1.0 if i == j else 2.0))
    return np.column_stack(cols)


def _solve_linearized(L: np.ndarray, rho: np.ndarray, n_vectors: int) -> np.ndarray:
    # b_ij columns come in triangle order, so the first n(n+1)/2 cover n kernel vectors
    n_cols = n_vectors * (n_vectors + 1) // 2
    if n_vectors == 4:
        cols = [0, 1, 3, 6]  # b11, b12, b13, b14
        b, *_ = np.linalg.lstsq(L[:, cols], rho, rcond=None)
        b11, b1k = b[0], b[1:]
    else:
        b, *_ = np.linalg.lstsq(L[:, :n_cols], rho, rcond=None)
        b11 = b[0]
        b1k = b[[1, 3][: n_vectors - 1]]
    betas = np.zeros(4)
    betas[0] = math.sqrt(abs(b11))
    if betas[0] > 0:
        betas[1:n_vectors] = (b1k if b11 >= 0 else -b1k) / betas[0]
    return betas


def _scale_and_sign(cc: np.ndarray, alphas: np.ndarray, dist_w: np.ndarray):
    """Rescales camera control points to world distances and puts them in front."""
    dist_c = np.array([np.linalg.norm(cc[a] - cc[b]) for a, b in PAIRS])
    denom = float(dist_c @ dist_c)
    if denom == 0.0:
        raise PnPSolverError("camera control points collapsed")
    beta = float(dist_c @ dist_w) / denom
    cc = cc * beta
    pc = alphas @ cc
    if np.mean(pc[:, 2]) < 0:
        cc, pc, beta = -cc, -pc, -beta
    return beta, cc, pc


def _gauss_newton(betas: np.ndarray, products: np.ndarray, rho: np.ndarray, n_active: int, iters: int) -> np.ndarray:
    betas = betas.copy()
    d = products[:, :n_active, :n_active]
    for _ in range(iters):
        b = betas[:n_active]
        jd2 = np.einsum("kij,j->ki", d, b)
        residual = rho - jd2 @ b
        step, *_ = np.linalg.lstsq(2.0 * jd2, residual, rcond=None)
        betas[:n_active] = b + step
    return betas


def _absolute_orientation(pw: np.ndarray, pc: np.ndarray):
    mw, mc = pw.mean(axis=0), pc.mean(axis=0)
    h = (pw - mw).T @ (pc - mc)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    rotation = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return rotation, mc - rotation @ mw


def epnp_solve(corrs: Correspondences, K: CameraIntrinsics, gn_iters: int = 5) -> Pose:
    """EPnP on undistorted observations.

    Every kernel dimension N in 1..4 gives a candidate; each is refined by
    Gauss-Newton on its betas and the one with the lowest reprojection RMS wins.
    """
    if len(corrs) < 4:
        raise InsufficientCorrespondencesError(f"EPnP needs at least 4 correspondences, got {len(corrs)}")
    pw, uv = corrs.p3, corrs.p2
    try:
        cw = _control_points(pw)
        alphas = _alphas(pw, cw)
        _, _, vt = np.linalg.svd(_build_m(alphas, uv, K), full_matrices=True)
        kernel = vt[::-1][:4]
        diffs = _pair_diffs(kernel)
        products = _pair_products(diffs)
        L = _linearized_l(products)
        rho = np.array([np.sum((cw[a] - cw[b]) ** 2) for a, b in PAIRS])
        dist_w = np.sqrt(rho)

        best_pose, best_rms = None, math.inf
        for n_vectors in (1, 2, 3, 4):
            if n_vectors == 1:
                betas = np.array([1.0, 0.0, 0.0, 0.0])
            else:
                betas = _solve_linearized(L, rho, n_vectors)
            scale, _, _ = _scale_and_sign((betas @ kernel).reshape(4, 3), alphas, dist_w)
            betas = betas * scale
            if gn_iters > 0:
                betas = _gauss_newton(betas, products, rho, n_vectors, gn_iters)
            cc = (betas @ kernel).reshape(4, 3)
            pc = alphas @ cc
            if np.mean(pc[:, 2]) < 0:
                pc = -pc
            rotation, t = _absolute_orientation(pw, pc)
            pose = Pose.from_rotation(rotation, t)
            errors = reprojection_errors(pose, corrs, K)
            rms = float(np.sqrt(np.mean(errors ** 2)))
            if rms < best_rms:
                best_pose, best_rms = pose, rms
    except np.linalg.LinAlgError as exc:
        raise PnPSolverError(f"EPnP linear algebra failed: {exc}") from exc
    if best_pose is None:
        raise PnPSolverError("no EPnP candidate produced a finite reprojection error")
    return best_pose


# --- RANSAC ---
def _required_iterations(inlier_ratio: float, sample_size: int, confidence: float, cap: int) -> int:
    if inlier_ratio >= 1.0:
        return 0
    p_good = inlier_ratio ** sample_size
    if p_good <= 0.0:
        return cap
    return min(cap, int(math.ceil(math.log(1.0 - confidence) / math.log1p(-p_good))))


def refine_on_inliers(corrs: Correspondences, K: CameraIntrinsics, pose: Pose, inliers: np.ndarray,
                      cfg: RansacConfig):
    """Refits EPnP on a consensus set; keeps the hypothesis if the refit loses support."""
    errors = reprojection_errors(pose, corrs, K)
    if cfg.refit and len(inliers) >= 4:
        try:
            refit = epnp_solve(corrs.subset(inliers), K, cfg.gn_iters)
            refit_errors = reprojection_errors(refit, corrs, K)
            refit_inliers = np.flatnonzero(refit_errors < cfg.reproj_threshold)
            if len(refit_inliers) >= len(inliers):
                return refit, refit_inliers, refit_errors
        except PnPSolverError as exc:
            logger.debug(f"refit on {len(inliers)} inliers failed: {exc}")
    return pose, inliers, errors


def ransac_pnp(corrs: Correspondences, K: CameraIntrinsics, cfg: Optional[RansacConfig] = None) -> PnPResult:
    """Seeded RANSAC around epnp_solve.

    Hypothesis i draws its sample from a generator seeded with (seed, i), so the
    outcome does not depend on evaluation order. The best hypothesis has the most
    inliers, then the lowest mean inlier residual, then the lowest index. A sample
    drawn again is not rescored, and the loop ends early once every distinct
    sample has been scored.
    """
    cfg = cfg or RansacConfig()
    n = len(corrs)
    if n < cfg.sample_size:
        raise InsufficientCorrespondencesError(f"{n} correspondences, need at least {cfg.sample_size}")

    best_key, best_pose, best_inliers = None, None, None
    n_samples = math.comb(n, cfg.sample_size)
    scored = set()
    limit = cfg.iterations
    i = 0
    while i < limit and len(scored) < n_samples:
        rng = np.random.default_rng([cfg.seed, i])
        sample = rng.choice(n, size=cfg.sample_size, replace=False)
        sample_key = tuple(sorted(sample.tolist()))
        if sample_key in scored:
            i += 1
            continue
        scored.add(sample_key)
        try:
            pose = epnp_solve(corrs.subset(sample), K, cfg.gn_iters)
        except PnPSolverError:
            i += 1
            continue
        errors = reprojection_errors(pose, corrs, K)
        inliers = np.flatnonzero(errors < cfg.reproj_threshold)
        mean_residual = float(errors[inliers].mean()) if len(inliers) else math.inf
        key = (-len(inliers), mean_residual, i)
        if best_key is None or key < best_key:
            best_key, best_pose, best_inliers = key, pose, inliers
            if cfg.confidence is not None and cfg.confidence < 1.0:
                limit = max(i + 1, _required_iterations(len(inliers) / n, cfg.sample_size, cfg.confidence, cfg.iterations))
        i += 1

    if best_key is None or len(best_inliers) < cfg.min_inliers:
        count = 0 if best_inliers is None else len(best_inliers)
        logger.debug(f"RANSAC degenerate: best consensus {count} < {cfg.min_inliers} after {i} hypotheses")
        return PnPResult.degenerate_result(i)

    pose, inliers, errors = refine_on_inliers(corrs, K, best_pose, best_inliers, cfg)
    mean_error = float(errors[inliers].mean())
    logger.debug(f"RANSAC kept {len(inliers)}/{n} inliers after {i} hypotheses, mean residual {mean_error:.3f} px")
    return PnPResult(pose, inliers, False, mean_error, i)
