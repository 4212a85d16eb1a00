"""Matching and retrieval protocols: mutual-NN matching, MMA, homography
accuracy/precision/recall, global ranking with inlier re-ranking, mAP, mP@k
and Recall@N.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .descriptor import DescriptorSet, ModelParams, describe
from .geometry import (
    CorrespondenceSet,
    HomographyConfig,
    RansacError,
    apply_homography_points,
    corner_error,
    make_pair,
    ransac_homography,
    reproject_keypoints,
    sample_homography,
    translation,
    warp_image,
)
from .imaging import AugmentParams, augment_color, detect_harris, extract_patches, to_gray
from .mining import aggregate_global_descriptor, similarity_matrix

log = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = tuple(range(1, 11))
RETRIEVAL_KS = (1, 5, 10)


@dataclass
class MatchSet:
    index_a: np.ndarray
    index_b: np.ndarray
    similarity: np.ndarray

    def __len__(self):
        return len(self.index_a)

    def pairs(self) -> set[tuple[int, int]]:
        return set(zip(self.index_a.tolist(), self.index_b.tolist()))


@dataclass
class EvalPair:
    image_a: np.ndarray
    image_b: np.ndarray
    h_gt: np.ndarray
    kps_a: np.ndarray
    kps_b: np.ndarray
    desc_a: np.ndarray | None = None
    desc_b: np.ndarray | None = None
    pair_id: int = 0


@dataclass
class MatchingReport:
    mma: dict[int, float]
    eta: float
    precision: float
    recall: float
    pair_count: int
    skipped: int = 0

    def to_json(self) -> dict:
        return {
            "mma": {str(t): v for t, v in self.mma.items()},
            "eta": self.eta,
            "precision": self.precision,
            "recall": self.recall,
            "pairs": self.pair_count,
            "skipped": self.skipped,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "MatchingReport":
        return cls({int(t): v for t, v in doc["mma"].items()}, doc["eta"], doc["precision"], doc["recall"], doc["pairs"], doc.get("skipped", 0))


@dataclass
class RetrievalReport:
    map: float = 0.0
    mp_at_k: dict[int, float] = field(default_factory=dict)
    recall_at_n: dict[int, float] = field(default_factory=dict)
    queries: int = 0

    def to_json(self) -> dict:
        return {
            "map": self.map,
            "mp": {str(k): v for k, v in self.mp_at_k.items()},
            "recall": {str(k): v for k, v in self.recall_at_n.items()},
            "queries": self.queries,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "RetrievalReport":
        return cls(doc["map"], {int(k): v for k, v in doc["mp"].items()}, {int(k): v for k, v in doc["recall"].items()}, doc["queries"])


# ---------------------------------------------------------------------------
# matching
# ---------------------------------------------------------------------------


def _rows(x):
    return x.rows if isinstance(x, DescriptorSet) else np.asarray(x, dtype=np.float64)


def match_mutual_nn(a, b) -> MatchSet:
    ra, rb = _rows(a), _rows(b)
    if ra.shape[1] != rb.shape[1]:
        raise ValueError(f"dimension mismatch {ra.shape[1]} vs {rb.shape[1]}")
    if len(ra) == 0 or len(rb) == 0:
        return MatchSet(np.zeros(0, int), np.zeros(0, int), np.zeros(0))
    sim = similarity_matrix(ra, rb)
    nn_ab = np.argmax(sim, axis=1)
    nn_ba = np.argmax(sim, axis=0)
    ia = np.nonzero(nn_ba[nn_ab] == np.arange(len(ra)))[0]
    ib = nn_ab[ia]
    return MatchSet(ia, ib, sim[ia, ib])


def _reprojection_errors(matches: MatchSet, kps_a, kps_b, h_gt) -> np.ndarray:
    pa = np.asarray(kps_a, dtype=np.float64)[matches.index_a]
    pb = np.asarray(kps_b, dtype=np.float64)[matches.index_b]
    return np.linalg.norm(apply_homography_points(h_gt, pa) - pb, axis=1)


def compute_mma(matches: MatchSet, kps_a, kps_b, h_gt, thresholds=DEFAULT_THRESHOLDS) -> dict[int, float] | None:
    """Fraction of matches within each pixel threshold; ``None`` when there are no matches."""
    if len(matches) == 0:
        return None
    err = _reprojection_errors(matches, kps_a, kps_b, h_gt)
    return {t: float(np.mean(err <= t)) for t in thresholds}


def ground_truth_count(kps_a, kps_b, h_gt, bounds_b, pixel_thresh) -> int:
    """Keypoints of A that land inside B with a B keypoint within the threshold."""
    pa = np.asarray(kps_a, dtype=np.float64).reshape(-1, 2)
    pb = np.asarray(kps_b, dtype=np.float64).reshape(-1, 2)
    if len(pa) == 0 or len(pb) == 0:
        return 0
    proj = apply_homography_points(h_gt, pa)
    w, h = bounds_b
    inside = (proj[:, 0] >= 0) & (proj[:, 0] <= w - 1) & (proj[:, 1] >= 0) & (proj[:, 1] <= h - 1)
    dist = np.linalg.norm(proj[:, None, :] - pb[None, :, :], axis=2)
    return int(np.sum(inside & (dist.min(axis=1) <= pixel_thresh)))


def compute_matching_metrics(pairs, pixel_thresh: float = 3.0, thresholds=DEFAULT_THRESHOLDS, ransac_seed: int = 0) -> MatchingReport:
    """Average MMA, homography accuracy, precision and recall over evaluation pairs."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("need at least one evaluation pair")
    mmas, etas, precs, recs = [], [], [], []
    skipped = 0
    for pair in pairs:
        matches = match_mutual_nn(pair.desc_a, pair.desc_b)
        mma = compute_mma(matches, pair.kps_a, pair.kps_b, pair.h_gt, thresholds)
        if mma is None:
            skipped += 1
            log.warning("pair %d produced no matches; excluded from MMA", pair.pair_id)
        else:
            mmas.append(mma)
        h, w = pair.image_b.shape[:2]
        correct = 0
        if len(matches):
            correct = int(np.sum(_reprojection_errors(matches, pair.kps_a, pair.kps_b, pair.h_gt) <= pixel_thresh))
        precs.append(correct / len(matches) if len(matches) else 0.0)
        n_gt = ground_truth_count(pair.kps_a, pair.kps_b, pair.h_gt, (w, h), pixel_thresh)
        recs.append(correct / n_gt if n_gt else 0.0)
        ok = 0.0
        if len(matches) >= 4:
            corr = CorrespondenceSet(np.asarray(pair.kps_a)[matches.index_a], np.asarray(pair.kps_b)[matches.index_b])
            try:
                h_est, _ = ransac_homography(corr, pixel_thresh, seed=ransac_seed)
                ha, wa = pair.image_a.shape[:2]
                ok = float(corner_error(h_est, pair.h_gt, wa, ha) <= pixel_thresh)
            except RansacError:
                ok = 0.0
        etas.append(ok)
    mean_mma = {t: float(np.mean([m[t] for m in mmas])) if mmas else 0.0 for t in thresholds}
    return MatchingReport(mean_mma, float(np.mean(etas)), float(np.mean(precs)), float(np.mean(recs)), len(pairs), skipped)


# ---------------------------------------------------------------------------
# retrieval
# ---------------------------------------------------------------------------


def rank_by_global(query, database, ids=None) -> list[int]:
    """Database ids by descending dot product with the query; ties by lowest id."""
    db = np.asarray(database, dtype=np.float64).reshape(len(database), -1)
    ids = np.arange(len(db)) if ids is None else np.asarray(ids)
    sims = similarity_matrix(db, np.asarray(query, dtype=np.float64)[None, :])[:, 0]
    return [int(ids[i]) for i in np.lexsort((ids, -sims))]


@dataclass
class ImageFeatures:
    keypoints: np.ndarray
    descriptors: np.ndarray


def count_inliers(query: ImageFeatures, cand: ImageFeatures, inlier_thresh=3.0, seed=0) -> int:
    matches = match_mutual_nn(query.descriptors, cand.descriptors)
    if len(matches) < 4:
        return 0
    corr = CorrespondenceSet(query.keypoints[matches.index_a], cand.keypoints[matches.index_b])
    try:
        _, mask = ransac_homography(corr, inlier_thresh, seed=seed)
    except RansacError:
        return 0
    return int(mask.sum())


def rerank_by_inliers(query: ImageFeatures, candidates: list[tuple[int, ImageFeatures]], inlier_thresh=3.0, seed=0) -> list[int]:
    """Stable re-sort of ``(id, features)`` candidates by geometrically verified inliers."""
    scores = [count_inliers(query, feats, inlier_thresh, seed) for _, feats in candidates]
    order = sorted(range(len(candidates)), key=lambda i: -scores[i])
    return [candidates[i][0] for i in order]


def _ap_exact(ranked, relevant) -> Fraction:
    relevant = set(relevant)
    if not relevant:
        raise ValueError("relevant set must be non-empty")
    hits, total = 0, Fraction(0)
    for rank, item in enumerate(ranked, start=1):
        if item in relevant:
            hits += 1
            total += Fraction(hits, rank)
    return total / len(relevant)


def compute_ap(ranked, relevant) -> float:
    """Average precision of one ranking, accumulated exactly and rounded once."""
    return float(_ap_exact(ranked, relevant))


def compute_map(rankings, relevants) -> float:
    """Mean of :func:`compute_ap` over parallel lists of rankings and relevant sets."""
    aps = [_ap_exact(r, rel) for r, rel in zip(rankings, relevants)]
    if not aps:
        raise ValueError("need at least one ranking")
    return float(sum(aps, Fraction(0)) / len(aps))


def compute_mp_at_k(ranked, relevant, k: int) -> float:
    relevant = set(relevant)
    return sum(1 for item in list(ranked)[:k] if item in relevant) / k


def recall_at_n(ranked, relevant, n: int) -> float:
    relevant = set(relevant)
    return float(any(item in relevant for item in list(ranked)[:n]))


def retrieval_report(rankings, relevants, ks=RETRIEVAL_KS) -> RetrievalReport:
    q = len(rankings)
    if q == 0:
        return RetrievalReport(0.0, {k: 0.0 for k in ks}, {k: 0.0 for k in ks}, 0)
    return RetrievalReport(
        compute_map(rankings, relevants),
        {k: float(np.mean([compute_mp_at_k(r, rel, k) for r, rel in zip(rankings, relevants)])) for k in ks},
        {k: float(np.mean([recall_at_n(r, rel, k) for r, rel in zip(rankings, relevants)])) for k in ks},
        q,
    )


# ---------------------------------------------------------------------------
# synthetic evaluation sets
# ---------------------------------------------------------------------------


def make_eval_pairs(corpus, count: int, seed: int, crop_size=128, hcfg=HomographyConfig(), augment=True, max_keypoints=128, patch_side=16) -> list[EvalPair]:
    """Held-out homography pairs; B keypoints are the in-bounds reprojections of A's."""
    border = patch_side // 2 + 1
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, len(corpus), count)
    out = []
    for i, c in enumerate(picks):
        img_id, img = corpus[int(c)]
        prng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        pair = make_pair(img, hcfg, crop_size, prng, img_id)
        a, b = pair.anchor, pair.positive
        if augment:
            a = augment_color(a, AugmentParams.sample(prng))
            b = augment_color(b, AugmentParams.sample(prng))
        a, b = to_gray(a), to_gray(b)
        kps = detect_harris(a, max_keypoints, 4, border)
        corr = reproject_keypoints(kps, pair.h_ap, (crop_size, crop_size), border)
        out.append(EvalPair(a, b, pair.h_ap, corr.src, corr.dst, pair_id=i))
    return out


def describe_pairs(pairs, params: ModelParams) -> None:
    for p in pairs:
        side = params.patch_side
        p.desc_a = describe(params, extract_patches(p.image_a, p.kps_a, side)).rows if len(p.kps_a) else np.zeros((0, params.dim))
        p.desc_b = describe(params, extract_patches(p.image_b, p.kps_b, side)).rows if len(p.kps_b) else np.zeros((0, params.dim))


def oracle_describe_pairs(pairs) -> None:
    """One-hot descriptors keyed to the ground-truth correspondence of each keypoint."""
    for p in pairs:
        n_a, n_b = len(p.kps_a), len(p.kps_b)
        proj = apply_homography_points(p.h_gt, p.kps_a) if n_a else np.zeros((0, 2))
        dim = n_a + n_b
        da = np.eye(dim)[:n_a]
        db = np.zeros((n_b, dim))
        for j in range(n_b):
            dist = np.linalg.norm(proj - p.kps_b[j], axis=1) if n_a else np.array([])
            i = int(np.argmin(dist)) if n_a else -1
            db[j, i if i >= 0 and dist[i] <= 1e-6 else n_a + j] = 1.0
        p.desc_a, p.desc_b = da, db


@dataclass
class RetrievalView:
    image_id: int
    scene: int
    image: np.ndarray
    features: ImageFeatures | None = None
    global_desc: np.ndarray | None = None


def make_retrieval_views(scene_images, views: int, seed: int, view_size=128, hcfg=HomographyConfig(), augment=True) -> list[RetrievalView]:
    """``views`` warped, augmented center crops per scene image."""
    if views < 2:
        raise ValueError("need at least 2 views per scene")
    out = []
    for s, img in enumerate(scene_images):
        H, W = img.shape[:2]
        ox, oy = (W - view_size) / 2.0, (H - view_size) / 2.0
        for v in range(views):
            rng = np.random.default_rng(np.random.SeedSequence([seed, s, v]))
            h = sample_homography(hcfg, view_size, view_size, rng)
            crop = warp_image(img, translation(ox, oy) @ np.linalg.inv(h), view_size, view_size)
            if augment:
                crop = augment_color(crop, AugmentParams.sample(rng))
            out.append(RetrievalView(len(out), s, to_gray(crop)))
    return out


def describe_views(views, params: ModelParams, max_keypoints=128) -> None:
    side = params.patch_side
    for v in views:
        kps = detect_harris(v.image, max_keypoints, 4, side // 2 + 1)
        pts = np.array([(k.x, k.y) for k in kps]).reshape(-1, 2)
        d = describe(params, extract_patches(v.image, pts, side)).rows if len(pts) else np.zeros((0, params.dim))
        v.features = ImageFeatures(pts, d)
        v.global_desc = aggregate_global_descriptor(d) if len(d) else np.zeros(params.dim)


def evaluate_retrieval(views, top_n=100, inlier_thresh=3.0, seed=0, workers: int = 1) -> tuple[RetrievalReport, RetrievalReport]:
    """Every view queries all others; returns reports before and after re-ranking."""
    glob = np.stack([v.global_desc for v in views])

    def one(q):
        others = [v for v in views if v.image_id != q.image_id]
        ranked = rank_by_global(q.global_desc, glob[[v.image_id for v in others]], [v.image_id for v in others])
        n = min(top_n, len(ranked))
        by_id = {v.image_id: v for v in others}
        head = rerank_by_inliers(q.features, [(i, by_id[i].features) for i in ranked[:n]], inlier_thresh, seed)
        return ranked, head + ranked[n:], {v.image_id for v in others if v.scene == q.scene}

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, views))
    else:
        results = [one(q) for q in views]
    pre, post, relevants = (list(x) for x in zip(*results))
    return retrieval_report(pre, relevants), retrieval_report(post, relevants)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    return f"{v:.4f}"


def render_matching_table(rows: dict[str, MatchingReport], thresholds=(1, 3, 5, 10)) -> str:
    head = ["method"] + [f"MMA@{t}" for t in thresholds] + ["eta", "precision", "recall", "pairs", "skipped"]
    body = [[name] + [_fmt(r.mma.get(t, float("nan"))) for t in thresholds] + [_fmt(r.eta), _fmt(r.precision), _fmt(r.recall), str(r.pair_count), str(r.skipped)] for name, r in rows.items()]
    return _table(head, body)


def render_retrieval_table(rows: dict[str, RetrievalReport]) -> str:
    head = ["method", "mAP"] + [f"mP@{k}" for k in RETRIEVAL_KS] + [f"R@{k}" for k in RETRIEVAL_KS] + ["queries"]
    body = [[name, _fmt(r.map)] + [_fmt(r.mp_at_k.get(k, 0.0)) for k in RETRIEVAL_KS] + [_fmt(r.recall_at_n.get(k, 0.0)) for k in RETRIEVAL_KS] + [str(r.queries)] for name, r in rows.items()]
    return _table(head, body)


def _table(head, body) -> str:
    widths = [max(len(str(r[i])) for r in [head] + body) for i in range(len(head))]
    line = lambda r: "  ".join(str(c).ljust(w) if i == 0 else str(c).rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
    return "\n".join([line(head), "  ".join("-" * w for w in widths)] + [line(r) for r in body]) + "\n"


def emit_report(report, path, fmt: str = "json", name: str = "model", extra: dict | None = None) -> None:
    """Write a report (or ``{row_name: report}``) as JSON or an aligned text table."""
    rows = report if isinstance(report, dict) else {name: report}
    path = Path(path)
    if fmt == "json":
        if isinstance(report, dict):
            doc = {k: v.to_json() for k, v in rows.items()}
        else:
            doc = report.to_json()
        if extra:
            doc = {**doc, **extra}
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    elif fmt == "text":
        first = next(iter(rows.values()))
        table = render_matching_table(rows) if isinstance(first, MatchingReport) else render_retrieval_table(rows)
        path.write_text(table)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
