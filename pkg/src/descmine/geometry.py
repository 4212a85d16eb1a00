"""Homographies: sampling, warping, crop pairs, correspondences, DLT and RANSAC.

A homography is a plain ``(3, 3)`` float64 array normalized so ``H[2, 2] == 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .imaging import bilinear_sample


class PointAtInfinityError(ArithmeticError):
    pass


class DegenerateConfigurationError(ValueError):
    pass


class RansacError(RuntimeError):
    pass


class ImageTooSmallError(ValueError):
    pass


@dataclass(frozen=True)
class HomographyConfig:
    max_translation_frac: float = 0.1
    max_rotation_deg: float = 15.0
    scale_range: tuple[float, float] = (0.85, 1.15)
    perspective_amplitude: float = 0.1

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0.0 <= self.max_translation_frac <= 0.5:
            raise ValueError("max_translation_frac must lie in [0, 0.5]")
        if self.max_rotation_deg < 0:
            raise ValueError("max_rotation_deg must be >= 0")
        if not 0 < lo <= hi:
            raise ValueError("scale_range must satisfy 0 < lo <= hi")
        if not 0.0 <= self.perspective_amplitude < 0.5:
            raise ValueError("perspective_amplitude must lie in [0, 0.5)")


IDENTITY_CONFIG = HomographyConfig(0.0, 0.0, (1.0, 1.0), 0.0)


@dataclass
class CropPair:
    anchor: np.ndarray
    positive: np.ndarray
    h_ap: np.ndarray
    source_image_id: int = 0


@dataclass
class CorrespondenceSet:
    """Matched point pairs; ``src[i]`` in the anchor maps to ``dst[i]``.

    ``index`` holds the position of each pair in the originating keypoint list.
    """

    src: np.ndarray
    dst: np.ndarray
    index: np.ndarray = field(default=None)

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.float64).reshape(-1, 2)
        self.dst = np.asarray(self.dst, dtype=np.float64).reshape(-1, 2)
        if self.index is None:
            self.index = np.arange(len(self.src))
        if len(self.src) != len(self.dst):
            raise ValueError("src and dst must have equal length")

    def __len__(self):
        return len(self.src)


def normalize(h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    return h / h[2, 2]


def is_invertible(h: np.ndarray, tol: float = 1e-12) -> bool:
    return abs(np.linalg.det(h)) > tol


def translation(tx: float, ty: float) -> np.ndarray:
    return np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])


def homography_from_params(
    w: float, h: float, tx=0.0, ty=0.0, angle_deg=0.0, scale=1.0, px=0.0, py=0.0
) -> np.ndarray:
    """Compose translation . rotation . scale . perspective about the crop center.

    Perspective terms act on coordinates normalized by the half crop size.
    """
    cx, cy = w / 2.0, h / 2.0
    a = math.radians(angle_deg)
    rot = np.array([[math.cos(a), -math.sin(a), 0.0], [math.sin(a), math.cos(a), 0.0], [0.0, 0.0, 1.0]])
    sc = np.diag([scale, scale, 1.0])
    norm = np.diag([1.0 / cx, 1.0 / cy, 1.0])
    persp = np.linalg.inv(norm) @ np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [px, py, 1.0]]) @ norm
    m = translation(cx + tx, cy + ty) @ rot @ sc @ persp @ translation(-cx, -cy)
    return normalize(m)


def sample_homography(cfg: HomographyConfig, crop_w: int, crop_h: int, seed) -> np.ndarray:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    lo, hi = cfg.scale_range
    return homography_from_params(
        crop_w,
        crop_h,
        tx=rng.uniform(-1, 1) * cfg.max_translation_frac * crop_w,
        ty=rng.uniform(-1, 1) * cfg.max_translation_frac * crop_h,
        angle_deg=rng.uniform(-1, 1) * cfg.max_rotation_deg,
        scale=rng.uniform(lo, hi),
        px=rng.uniform(-1, 1) * cfg.perspective_amplitude,
        py=rng.uniform(-1, 1) * cfg.perspective_amplitude,
    )


def apply_homography(h: np.ndarray, point) -> tuple[float, float]:
    x, y = point
    w = h[2, 0] * x + h[2, 1] * y + h[2, 2]
    if abs(w) < 1e-12:
        raise PointAtInfinityError(f"point {point} maps to infinity")
    return ((h[0, 0] * x + h[0, 1] * y + h[0, 2]) / w, (h[1, 0] * x + h[1, 1] * y + h[1, 2]) / w)


def apply_homography_points(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Vectorized :func:`apply_homography` over an ``(N, 2)`` array."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    hom = pts @ h[:, :2].T + h[:, 2]
    w = hom[:, 2]
    if np.any(np.abs(w) < 1e-12):
        raise PointAtInfinityError("a point maps to infinity")
    return hom[:, :2] / w[:, None]


def warp_image(src: np.ndarray, h_dst_to_src: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear inverse warp: ``out(v) = src(h_dst_to_src(v))``."""
    ys, xs = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    pts = apply_homography_points(h_dst_to_src, np.stack([xs.ravel(), ys.ravel()], axis=1))
    out = bilinear_sample(src, pts[:, 0], pts[:, 1])
    return out.reshape((out_h, out_w) + src.shape[2:])


def make_pair(img: np.ndarray, cfg: HomographyConfig, crop_size: int, seed, image_id: int = 0) -> CropPair:
    """Cut an anchor crop and its homography-warped positive from one image.

    The positive samples the source directly, so it carries no padding. ``h_ap``
    maps anchor pixel coordinates to positive pixel coordinates.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    H, W = img.shape[:2]
    c = crop_size
    h_ap = sample_homography(cfg, c, c, rng)
    corners = np.array([[0, 0], [c - 1, 0], [0, c - 1], [c - 1, c - 1]], dtype=np.float64)
    back = apply_homography_points(np.linalg.inv(h_ap), corners)
    lo = np.minimum(back.min(axis=0), 0.0)
    hi = np.maximum(back.max(axis=0), c - 1.0)
    # offsets keeping both the anchor crop and the positive's preimage inside the image
    min_off = np.ceil(-lo)
    max_off = np.floor(np.array([W - 1.0, H - 1.0]) - hi)
    if np.any(max_off < min_off):
        raise ImageTooSmallError(f"{W}x{H} image cannot hold a {c}px crop under the sampled warp")
    ox = int(rng.integers(min_off[0], max_off[0] + 1))
    oy = int(rng.integers(min_off[1], max_off[1] + 1))
    anchor = img[oy : oy + c, ox : ox + c].copy()
    positive = warp_image(img, translation(ox, oy) @ np.linalg.inv(h_ap), c, c)
    return CropPair(anchor, positive, h_ap, image_id)


def reproject_keypoints(kps, h: np.ndarray, bounds: tuple[int, int], border_margin: float = 0.0) -> CorrespondenceSet:
    """Map keypoints through *h*, keeping those landing ``border_margin`` inside ``(width, height)``."""
    src = np.asarray([(k[0], k[1]) for k in kps], dtype=np.float64).reshape(-1, 2)
    if len(src) == 0:
        return CorrespondenceSet(src, src.copy(), np.zeros(0, dtype=int))
    dst = apply_homography_points(h, src)
    w, hh = bounds
    m = border_margin
    keep = (dst[:, 0] >= m) & (dst[:, 0] <= w - 1 - m) & (dst[:, 1] >= m) & (dst[:, 1] <= hh - 1 - m)
    return CorrespondenceSet(src[keep], dst[keep], np.nonzero(keep)[0])


# ---------------------------------------------------------------------------
# estimation
# ---------------------------------------------------------------------------


def _similarity_normalizer(pts: np.ndarray) -> np.ndarray:
    centroid = pts.mean(axis=0)
    rms = np.sqrt(np.mean(np.sum((pts - centroid) ** 2, axis=1)))
    if rms < 1e-12:
        raise DegenerateConfigurationError("all points coincide")
    s = math.sqrt(2.0) / rms
    return np.array([[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]])


def dlt_homography(src, dst=None) -> np.ndarray:
    """Hartley-normalized DLT. Accepts a CorrespondenceSet or two ``(N, 2)`` arrays."""
    if dst is None:
        src, dst = src.src, src.dst
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    n = len(src)
    if n < 4:
        raise DegenerateConfigurationError(f"need >= 4 correspondences, got {n}")
    ts, td = _similarity_normalizer(src), _similarity_normalizer(dst)
    a = src @ ts[:2, :2].T + ts[:2, 2]
    b = dst @ td[:2, :2].T + td[:2, 2]
    x, y = a[:, 0], a[:, 1]
    u, v = b[:, 0], b[:, 1]
    zeros, ones = np.zeros(n), np.ones(n)
    rows1 = np.stack([-x, -y, -ones, zeros, zeros, zeros, u * x, u * y, u], axis=1)
    rows2 = np.stack([zeros, zeros, zeros, -x, -y, -ones, v * x, v * y, v], axis=1)
    A = np.concatenate([rows1, rows2])
    _, s, vt = np.linalg.svd(A)
    # a unique solution needs an 8-dimensional row space
    if s[7] < 1e-10 * s[0]:
        raise DegenerateConfigurationError("correspondences do not determine a homography")
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.inv(td) @ hn @ ts
    if abs(h[2, 2]) < 1e-15 or not is_invertible(h / h[2, 2]):
        raise DegenerateConfigurationError("estimated homography is singular")
    return normalize(h)


def symmetric_transfer_error(h: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Mean of forward and backward reprojection distances per correspondence."""
    try:
        fwd = np.linalg.norm(apply_homography_points(h, src) - dst, axis=1)
        bwd = np.linalg.norm(apply_homography_points(np.linalg.inv(h), dst) - src, axis=1)
    except PointAtInfinityError:
        return np.full(len(src), np.inf)
    return 0.5 * (fwd + bwd)


def _has_collinear_triple(pts: np.ndarray, tol: float = 1e-6) -> bool:
    return bool(_collinear_batch(pts[None])[0])


_TRIPLES = np.array([(0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)])


def _collinear_batch(pts: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """``(B, 4, 2)`` samples -> ``(B,)`` flags for any near-collinear triple."""
    p = pts[:, _TRIPLES]  # (B, 4, 3, 2)
    d1 = p[:, :, 1] - p[:, :, 0]
    d2 = p[:, :, 2] - p[:, :, 0]
    area = np.abs(d1[..., 0] * d2[..., 1] - d1[..., 1] * d2[..., 0])
    scale = np.maximum(np.maximum(np.sum(d1 * d1, -1), np.sum(d2 * d2, -1)), 1e-12)
    return np.any(area < tol * scale, axis=1)


def _normalizer_batch(pts: np.ndarray) -> np.ndarray:
    centroid = pts.mean(axis=1)
    rms = np.sqrt(np.mean(np.sum((pts - centroid[:, None]) ** 2, axis=2), axis=1))
    s = math.sqrt(2.0) / np.maximum(rms, 1e-12)
    t = np.zeros((len(pts), 3, 3))
    t[:, 0, 0] = t[:, 1, 1] = s
    t[:, :2, 2] = -s[:, None] * centroid
    t[:, 2, 2] = 1.0
    return t


def _dlt_batch(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Minimal-sample DLT for ``(B, 4, 2)`` inputs; returns ``(H, valid)``.

    With four points the system is square once ``h33 = 1`` in normalized
    coordinates; samples whose system is ill-conditioned are marked invalid.
    """
    ts, td = _normalizer_batch(src), _normalizer_batch(dst)
    a = src @ ts[:, :2, :2].transpose(0, 2, 1) + ts[:, None, :2, 2]
    b = dst @ td[:, :2, :2].transpose(0, 2, 1) + td[:, None, :2, 2]
    x, y, u, v = a[..., 0], a[..., 1], b[..., 0], b[..., 1]
    z, o = np.zeros_like(x), np.ones_like(x)
    rows1 = np.stack([-x, -y, -o, z, z, z, u * x, u * y], axis=2)
    rows2 = np.stack([z, z, z, -x, -y, -o, v * x, v * y], axis=2)
    A = np.concatenate([rows1, rows2], axis=1)
    rhs = -np.concatenate([u, v], axis=1)
    valid = np.abs(np.linalg.det(A)) > 1e-10
    A[~valid] = np.eye(8)
    hn = np.concatenate([np.linalg.solve(A, rhs[..., None])[..., 0], np.ones((len(A), 1))], axis=1)
    h = np.linalg.inv(td) @ hn.reshape(-1, 3, 3) @ ts
    h22 = h[:, 2, 2]
    valid &= np.abs(h22) >= 1e-15
    h = h / np.where(np.abs(h22) < 1e-15, 1.0, h22)[:, None, None]
    valid &= np.abs(np.linalg.det(h)) > 1e-12
    return h, valid


def _sample_quads(rng: np.random.Generator, n: int, count: int) -> np.ndarray:
    """``count`` uniform draws of 4 distinct indices from ``range(n)``."""
    u = rng.integers(0, n - np.arange(4), size=(count, 4))
    out = u.copy()
    for k in range(1, 4):
        # shift past the already chosen indices in ascending order
        prev = np.sort(out[:, :k], axis=1)
        j = u[:, k].copy()
        for c in range(k):
            j += j >= prev[:, c]
        out[:, k] = j
    return out


def _transfer_error_batch(h: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Symmetric transfer error of ``B`` homographies over all ``N`` matches."""

    def project(m, pts):
        hom = pts @ m[:, :, :2].transpose(0, 2, 1) + m[:, None, :, 2]
        w = hom[..., 2]
        bad = np.abs(w) < 1e-12
        out = hom[..., :2] / np.where(bad, 1.0, w)[..., None]
        return out, bad

    fwd, bad_f = project(h, src)
    bwd, bad_b = project(np.linalg.inv(h), dst)
    err = 0.5 * (np.linalg.norm(fwd - dst, axis=2) + np.linalg.norm(bwd - src, axis=2))
    # a point at infinity invalidates the whole hypothesis
    dead = np.any(bad_f | bad_b, axis=1)
    err[dead] = np.inf
    return err


_RANSAC_CHUNK = (32, 512)


def ransac_homography(
    matches: CorrespondenceSet,
    inlier_thresh: float = 3.0,
    max_iters: int = 1000,
    confidence: float = 0.999,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Robust homography from 4-point DLT hypotheses scored by symmetric transfer error.

    Matches are sorted into a canonical order before sampling, so the result
    does not depend on input order. Returns ``(H, inlier_mask)`` with the mask
    aligned to the input order. Hypotheses are evaluated in vectorized chunks
    but accepted strictly in draw order, so early termination is unaffected.
    """
    n = len(matches)
    if n < 4:
        raise RansacError(f"need >= 4 matches, got {n}")
    order = np.lexsort((matches.dst[:, 1], matches.dst[:, 0], matches.src[:, 1], matches.src[:, 0]))
    src, dst = matches.src[order], matches.dst[order]
    rng = np.random.Generator(np.random.Philox(seed))

    best_count, best_err, best_mask = -1, np.inf, None
    needed = max_iters
    it = 0
    # chunks grow geometrically: easy problems stop early, hard ones amortize overhead
    size = _RANSAC_CHUNK[0]
    while it < min(needed, max_iters):
        chunk = min(size, max_iters - it)
        size = min(2 * size, _RANSAC_CHUNK[1])
        idx = _sample_quads(rng, n, chunk)
        s4, d4 = src[idx], dst[idx]
        ok = ~(_collinear_batch(s4) | _collinear_batch(d4))
        hs, valid = _dlt_batch(s4, d4)
        ok &= valid
        err = np.full((chunk, n), np.inf)
        if ok.any():
            err[ok] = _transfer_error_batch(hs[ok], src, dst)
        masks = err < inlier_thresh
        counts = masks.sum(axis=1)
        totals = np.where(masks, err, 0.0).sum(axis=1)
        for j in range(chunk):
            if it >= min(needed, max_iters):
                break
            it += 1
            if not ok[j]:
                continue
            count, total = int(counts[j]), float(totals[j])
            if count > best_count or (count == best_count and total < best_err):
                best_count, best_err, best_mask = count, total, masks[j]
                ratio = count / n
                if ratio >= 1.0:
                    needed = 0
                elif ratio > 0:
                    needed = math.ceil(math.log(1 - confidence) / math.log(1 - ratio**4))

    if best_mask is None or best_count < 4:
        raise RansacError("no hypothesis gathered 4 inliers")
    try:
        h = dlt_homography(src[best_mask], dst[best_mask])
    except DegenerateConfigurationError as exc:
        raise RansacError(f"inlier refit failed: {exc}") from exc
    mask = np.zeros(n, dtype=bool)
    mask[order] = best_mask
    return h, mask


def corner_error(h_est: np.ndarray, h_gt: np.ndarray, w: int, h: int) -> float:
    """Mean distance between the four image corners mapped by each homography."""
    corners = np.array([[0, 0], [w - 1, 0], [0, h - 1], [w - 1, h - 1]], dtype=np.float64)
    return float(np.mean(np.linalg.norm(apply_homography_points(h_est, corners) - apply_homography_points(h_gt, corners), axis=1)))
