"""Pixels and interest points: synthetic corpus, color augmentation, Harris
detection, CLAHE, patch extraction and binary PNM I/O.

Images are float64 numpy arrays with values in [0, 1]: ``(H, W)`` for gray
and ``(H, W, 3)`` for RGB.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import cv2
from scipy import ndimage
from skimage.draw import polygon as draw_polygon

DEFAULT_PATCH_SIDE = 16
HARRIS_K = 0.04


class PnmError(ValueError):
    """Base class for PNM parse failures."""


class PnmHeaderError(PnmError):
    pass


class PnmTruncatedError(PnmError):
    pass


class ClaheGridError(ValueError):
    pass


class Keypoint(NamedTuple):
    x: float
    y: float
    score: float


@dataclass(frozen=True)
class CorpusSpec:
    width: int = 256
    height: int = 256
    element_count: int = 24


@dataclass(frozen=True)
class AugmentParams:
    blur_sigma: float = 0.0
    noise_sigma: float = 0.0
    clahe: bool = False
    clahe_clip: float = 2.0
    clahe_tiles: int = 4
    brightness_delta: float = 0.0
    contrast_factor: float = 1.0
    hue_delta: float = 0.0
    saturation_factor: float = 1.0
    seed: int = 0

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "AugmentParams":
        """Draw parameters from the default uniform ranges."""
        return cls(
            brightness_delta=float(rng.uniform(-0.2, 0.2)),
            contrast_factor=float(rng.uniform(0.7, 1.3)),
            hue_delta=float(rng.uniform(-20.0, 20.0)),
            saturation_factor=float(rng.uniform(0.7, 1.3)),
            blur_sigma=float(rng.uniform(0.0, 1.5)),
            noise_sigma=float(rng.uniform(0.0, 0.04)),
            clahe=bool(rng.random() < 0.3),
            clahe_clip=2.0,
            clahe_tiles=4,
            seed=int(rng.integers(0, 2**63)),
        )


def rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    """HSV with all channels in [0, 1]."""
    hsv = cv2.cvtColor(img.astype(np.float32), cv2.COLOR_RGB2HSV).astype(np.float64)
    hsv[..., 0] /= 360.0
    return hsv


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    scaled = hsv.astype(np.float32)
    scaled[..., 0] *= 360.0
    return cv2.cvtColor(scaled, cv2.COLOR_HSV2RGB).astype(np.float64)


def to_gray(img: np.ndarray) -> np.ndarray:
    if img.ndim == 2:
        return img
    return np.clip(img @ np.array([0.299, 0.587, 0.114]), 0.0, 1.0)


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------


def _value_noise(rng, h, w, cells):
    grid = rng.random((cells + 3, cells + 3))
    out = ndimage.zoom(grid, ((h + 1) / cells, (w + 1) / cells), order=3, mode="nearest")
    return np.clip(out[:h, :w], 0.0, 1.0)


def _random_polygon(rng, h, w):
    cx, cy = rng.uniform(0, w), rng.uniform(0, h)
    radius = rng.uniform(0.05, 0.2) * min(w, h)
    n = int(rng.integers(3, 7))
    angles = np.sort(rng.uniform(0, 2 * np.pi, n))
    radii = radius * rng.uniform(0.5, 1.0, n)
    rr, cc = draw_polygon(cy + radii * np.sin(angles), cx + radii * np.cos(angles), (h, w))
    mask = np.zeros((h, w), dtype=bool)
    mask[rr, cc] = True
    return mask


def generate_synthetic_image(spec: CorpusSpec, seed: int) -> np.ndarray:
    """Render a textured RGB image of filled polygons, gradients, checkers and noise.

    Deterministic for a given seed.
    """
    if spec.width < 64 or spec.height < 64:
        raise ValueError(f"synthetic images must be at least 64x64, got {spec.width}x{spec.height}")
    if spec.element_count < 1:
        raise ValueError("element_count must be >= 1")
    rng = np.random.default_rng(seed)
    h, w = spec.height, spec.width
    base = rng.uniform(0.2, 0.8, 3)
    img = base + 0.5 * (_value_noise(rng, h, w, 12)[..., None] - 0.5) * rng.uniform(0.5, 1.0, 3)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # low-contrast block mosaic keeps flat background areas from starving the detector
    block = int(rng.integers(12, 25))
    tiles = rng.uniform(-0.15, 0.15, (h // block + 2, w // block + 2, 3))
    oy, ox = rng.integers(0, block, 2)
    img = img + tiles[((yy + oy) // block).astype(int), ((xx + ox) // block).astype(int)]

    for _ in range(spec.element_count):
        kind = int(rng.integers(4))
        mask = _random_polygon(rng, h, w)
        c1, c2 = rng.random(3), rng.random(3)
        if kind == 0:
            fill = np.broadcast_to(c1, (h, w, 3))
        elif kind == 1:
            theta = rng.uniform(0, 2 * np.pi)
            t = np.cos(theta) * xx + np.sin(theta) * yy
            t = (t - t[mask].min()) / max(np.ptp(t[mask]), 1e-9) if mask.any() else t
            fill = c1 + np.clip(t, 0, 1)[..., None] * (c2 - c1)
        elif kind == 2:
            cell = int(rng.integers(4, 13))
            theta = rng.uniform(0, np.pi / 2)
            u = np.cos(theta) * xx + np.sin(theta) * yy
            v = -np.sin(theta) * xx + np.cos(theta) * yy
            checker = (np.floor(u / cell) + np.floor(v / cell)) % 2
            fill = np.where(checker[..., None] > 0, c1, c2)
        else:
            noise = _value_noise(rng, h, w, int(rng.integers(8, 24)))
            fill = c1 + noise[..., None] * (c2 - c1)
        img = np.where(mask[..., None], fill, img)
    return np.clip(img, 0.0, 1.0)


def write_corpus(out_dir, count: int, spec: CorpusSpec, seed: int, workers: int = 1) -> dict:
    """Write ``img_%05d.ppm`` files plus ``manifest.json`` into *out_dir*."""
    if count < 1:
        raise ValueError("corpus count must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [seed ^ i for i in range(count)]

    def _one(i):
        save_pnm(generate_synthetic_image(spec, seeds[i]), out / f"img_{i:05d}.ppm")

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(_one, range(count)))
    else:
        for i in range(count):
            _one(i)
    manifest = {
        "spec": asdict(spec),
        "seed": seed,
        "images": [
            {"id": i, "file": f"img_{i:05d}.ppm", "width": spec.width, "height": spec.height, "seed": seeds[i]}
            for i in range(count)
        ],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def load_corpus(corpus_dir) -> list[tuple[int, np.ndarray]]:
    """Return ``(image_id, image)`` pairs in manifest order."""
    root = Path(corpus_dir)
    manifest_path = root / "manifest.json"
    if manifest_path.exists():
        entries = json.loads(manifest_path.read_text())["images"]
        return [(int(e["id"]), load_pnm(root / e["file"])) for e in entries]
    files = sorted(p for p in root.iterdir() if p.suffix in (".ppm", ".pgm"))
    return [(i, load_pnm(p)) for i, p in enumerate(files)]


# ---------------------------------------------------------------------------
# color augmentation
# ---------------------------------------------------------------------------


def augment_color(img: np.ndarray, params: AugmentParams) -> np.ndarray:
    """Apply brightness, contrast, hue, saturation, blur, noise, CLAHE in that order.

    Stages at their identity setting are skipped so identity parameters
    return a bit-equal copy. Gray inputs skip hue and saturation.
    """
    out = np.array(img, dtype=np.float64, copy=True)
    rgb = out.ndim == 3
    if params.brightness_delta != 0.0:
        out = np.clip(out + params.brightness_delta, 0.0, 1.0)
    if params.contrast_factor != 1.0:
        out = np.clip((out - 0.5) * params.contrast_factor + 0.5, 0.0, 1.0)
    if rgb and (params.hue_delta != 0.0 or params.saturation_factor != 1.0):
        hsv = rgb_to_hsv(out)
        hsv[..., 0] = np.mod(hsv[..., 0] + params.hue_delta / 360.0, 1.0)
        hsv[..., 1] = np.clip(hsv[..., 1] * params.saturation_factor, 0.0, 1.0)
        out = np.clip(hsv_to_rgb(hsv), 0.0, 1.0)
    if params.blur_sigma > 0.0:
        sigma = (params.blur_sigma, params.blur_sigma, 0) if rgb else params.blur_sigma
        out = np.clip(ndimage.gaussian_filter(out, sigma, mode="nearest"), 0.0, 1.0)
    if params.noise_sigma > 0.0:
        rng = np.random.default_rng(params.seed)
        out = np.clip(out + rng.normal(0.0, params.noise_sigma, out.shape), 0.0, 1.0)
    if params.clahe:
        if rgb:
            hsv = rgb_to_hsv(out)
            hsv[..., 2] = clahe(hsv[..., 2], params.clahe_clip, params.clahe_tiles)
            out = np.clip(hsv_to_rgb(hsv), 0.0, 1.0)
        else:
            out = clahe(out, params.clahe_clip, params.clahe_tiles)
    return out


def clahe(img: np.ndarray, clip: float, tiles: int, nbins: int = 256) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization on a gray image.

    The image is split into a ``tiles x tiles`` grid. Each tile's histogram is
    clipped at ``clip`` times the mean bin count, the excess spread evenly over
    all bins, and the cumulative distribution used as the tile's level map.
    Pixels blend the maps of the four nearest tile centers bilinearly.
    ``clip=inf`` disables clipping.
    """
    h, w = img.shape
    if tiles < 1 or h // tiles < 8 or w // tiles < 8:
        raise ClaheGridError(f"{tiles}x{tiles} tile grid too fine for {w}x{h} image")
    levels = np.clip(np.rint(img * (nbins - 1)), 0, nbins - 1).astype(np.int64)
    ys = np.linspace(0, h, tiles + 1).astype(int)
    xs = np.linspace(0, w, tiles + 1).astype(int)
    maps = np.empty((tiles, tiles, nbins))
    for ty in range(tiles):
        for tx in range(tiles):
            block = levels[ys[ty] : ys[ty + 1], xs[tx] : xs[tx + 1]]
            hist = np.bincount(block.ravel(), minlength=nbins).astype(np.float64)
            if np.isfinite(clip):
                limit = max(clip * block.size / nbins, 1.0)
                excess = np.maximum(hist - limit, 0.0).sum()
                hist = np.minimum(hist, limit) + excess / nbins
            maps[ty, tx] = np.cumsum(hist) / hist.sum()

    if tiles == 1:
        return np.clip(maps[0, 0][levels], 0.0, 1.0)

    cy = (ys[:-1] + ys[1:] - 1) / 2.0
    cx = (xs[:-1] + xs[1:] - 1) / 2.0
    fy = np.clip(np.interp(np.arange(h), cy, np.arange(tiles)), 0, tiles - 1)
    fx = np.clip(np.interp(np.arange(w), cx, np.arange(tiles)), 0, tiles - 1)
    y0 = np.minimum(np.floor(fy).astype(int), tiles - 2)
    x0 = np.minimum(np.floor(fx).astype(int), tiles - 2)
    wy = (fy - y0)[:, None]
    wx = (fx - x0)[None, :]
    Y0, X0 = y0[:, None], x0[None, :]
    v00 = maps[Y0, X0, levels]
    v01 = maps[Y0, X0 + 1, levels]
    v10 = maps[Y0 + 1, X0, levels]
    v11 = maps[Y0 + 1, X0 + 1, levels]
    out = (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# detection and sampling
# ---------------------------------------------------------------------------


def harris_response(img: np.ndarray, k: float = HARRIS_K) -> np.ndarray:
    """Harris corner response from 3x3 Sobel gradients summed over a 3x3 window."""
    gx = ndimage.sobel(img, axis=1, mode="nearest")
    gy = ndimage.sobel(img, axis=0, mode="nearest")
    sxx = ndimage.uniform_filter(gx * gx, 3, mode="nearest") * 9
    syy = ndimage.uniform_filter(gy * gy, 3, mode="nearest") * 9
    sxy = ndimage.uniform_filter(gx * gy, 3, mode="nearest") * 9
    return sxx * syy - sxy * sxy - k * (sxx + syy) ** 2


def detect_harris(
    img: np.ndarray,
    max_keypoints: int = 128,
    nms_radius: int = 4,
    border: int = DEFAULT_PATCH_SIDE // 2 + 1,
    rel_threshold: float = 1e-3,
) -> list[Keypoint]:
    """Detect Harris corners with greedy Chebyshev non-maximum suppression.

    Returns keypoints sorted by descending response, pairwise farther apart
    than ``nms_radius`` and at least ``border`` pixels from every edge.
    """
    if img.ndim == 3:
        img = to_gray(img)
    h, w = img.shape
    if h < 16 or w < 16:
        raise ValueError("detect_harris needs at least a 16x16 image")
    resp = harris_response(img)
    interior = np.zeros_like(resp, dtype=bool)
    interior[border : h - border, border : w - border] = True
    peak = resp[interior].max() if interior.any() else 0.0
    if not peak > 1e-12:
        return []
    local_max = resp == ndimage.maximum_filter(resp, size=3, mode="nearest")
    cand = interior & local_max & (resp > rel_threshold * peak)
    ys, xs = np.nonzero(cand)
    scores = resp[ys, xs]
    # row-major index breaks score ties
    order = np.lexsort((ys * w + xs, -scores))
    taken = np.zeros((h, w), dtype=bool)
    out: list[Keypoint] = []
    r = nms_radius
    for i in order:
        y, x = ys[i], xs[i]
        if taken[y, x]:
            continue
        out.append(Keypoint(float(x), float(y), float(scores[i])))
        if len(out) >= max_keypoints:
            break
        taken[max(y - r, 0) : y + r + 1, max(x - r, 0) : x + r + 1] = True
    return out


def bilinear_sample(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample *img* at real coordinates with edge clamping."""
    h, w = img.shape[:2]
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, w - 1.0)
    y = np.clip(np.asarray(y, dtype=np.float64), 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    if img.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bottom = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def _patch_offsets(side: int) -> np.ndarray:
    return np.arange(side, dtype=np.float64) - side / 2.0


def extract_patch(img: np.ndarray, kp, side: int = DEFAULT_PATCH_SIDE) -> np.ndarray:
    """Return a ``side x side`` bilinear patch centered on the keypoint (unit spacing)."""
    return extract_patches(img, [kp], side)[0]


def extract_patches(img: np.ndarray, kps, side: int = DEFAULT_PATCH_SIDE) -> np.ndarray:
    """Vectorized :func:`extract_patch`; returns an ``(N, side, side)`` array."""
    if side < 8 or side % 2:
        raise ValueError(f"patch side must be even and >= 8, got {side}")
    pts = np.asarray([(k[0], k[1]) for k in kps], dtype=np.float64).reshape(-1, 2)
    off = _patch_offsets(side)
    xs = pts[:, 0, None, None] + off[None, None, :]
    ys = pts[:, 1, None, None] + off[None, :, None]
    xs, ys = np.broadcast_arrays(xs, ys)
    return bilinear_sample(img, xs, ys)


# ---------------------------------------------------------------------------
# PNM
# ---------------------------------------------------------------------------


def _read_token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        c = data[pos : pos + 1]
        if c == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PnmHeaderError("unexpected end of header")
    return data[start:pos], pos


def load_pnm(path) -> np.ndarray:
    """Read a binary PGM (P5) or PPM (P6) file with maxval 255."""
    data = Path(path).read_bytes()
    magic, pos = _read_token(data, 0)
    if magic not in (b"P5", b"P6"):
        raise PnmHeaderError(f"unsupported magic {magic!r}")
    fields = []
    for _ in range(3):
        tok, pos = _read_token(data, pos)
        if not tok.isdigit():
            raise PnmHeaderError(f"bad header field {tok!r}")
        fields.append(int(tok))
    width, height, maxval = fields
    if width < 1 or height < 1 or maxval != 255:
        raise PnmHeaderError(f"unsupported dimensions/maxval {width}x{height}/{maxval}")
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise PnmHeaderError("missing whitespace after header")
    pos += 1
    channels = 1 if magic == b"P5" else 3
    need = width * height * channels
    payload = data[pos : pos + need]
    if len(payload) < need:
        raise PnmTruncatedError(f"expected {need} payload bytes, found {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    return arr.reshape(height, width) if channels == 1 else arr.reshape(height, width, 3)


def save_pnm(img: np.ndarray, path) -> None:
    arr = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot save array of shape {arr.shape} as PNM")
    h, w = arr.shape[:2]
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode() + arr.tobytes())
