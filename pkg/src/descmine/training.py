"""Batch assembly, Adam, and the training loop."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .descriptor import (
    DescriptorSet,
    ModelParams,
    PARAM_NAMES,
    backward,
    describe,
    forward,
    init_params,
    save_checkpoint,
)
from .geometry import CorrespondenceSet, HomographyConfig, make_pair, reproject_keypoints
from .imaging import AugmentParams, augment_color, detect_harris, extract_patches, load_corpus, to_gray
from .loss import APConfig, TripletConfig, ap_loss_arrays, backprop_similarities, triplet_loss_batch
from .mining import BatchIndex, MiningStrategy, NegativePool, aggregate_global_descriptor, mine, read_gd

log = logging.getLogger(__name__)

MAX_PAIR_RETRIES = 8
POOL_ID_OFFSET = 1_000_000


class CorpusExhaustedError(RuntimeError):
    pass


class TrainingAbort(RuntimeError):
    pass


@dataclass
class TrainConfig:
    pairs_per_batch: int = 8
    keypoints_per_crop: int = 32
    top_k: int = 30
    strategy: str = "in_batch_topk"
    loss_kind: str = "ap"
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 5
    steps_per_epoch: int = 50
    crop_size: int = 128
    seed: int = 0
    pool_dir: str | None = None
    pool_refresh_epochs: int = 1
    patch_side: int = 16
    hidden: int = 128
    dim: int = 32
    ap_bins: int = 25
    triplet_margin: float = 0.4
    augment: bool = True
    detect_max: int = 128
    homography: HomographyConfig = field(default_factory=HomographyConfig)

    def __post_init__(self):
        errors = self.validate()
        if errors:
            raise ValueError("; ".join(errors))

    def validate(self) -> list[str]:
        errors = []
        if self.pairs_per_batch < 2:
            errors.append("pairs_per_batch must be >= 2")
        if self.keypoints_per_crop < 4:
            errors.append("keypoints_per_crop must be >= 4")
        if self.top_k < 1:
            errors.append("top_k must be >= 1")
        if not self.lr > 0:
            errors.append("lr must be > 0")
        if self.loss_kind not in ("ap", "triplet"):
            errors.append("loss_kind must be 'ap' or 'triplet'")
        if self.strategy not in MiningStrategy.KINDS:
            errors.append(f"strategy must be one of {', '.join(MiningStrategy.KINDS)}")
        if self.epochs < 0 or self.steps_per_epoch < 0:
            errors.append("epochs and steps_per_epoch must be >= 0")
        if self.pool_refresh_epochs < 1:
            errors.append("pool_refresh_epochs must be >= 1")
        return errors

    def mining_strategy(self) -> MiningStrategy:
        k = None if self.strategy in ("in_pair", "in_batch_all") else self.top_k
        return MiningStrategy(self.strategy, k)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["homography"]["scale_range"] = list(d["homography"]["scale_range"])
        return d


@dataclass
class AdamState:
    m: ModelParams
    v: ModelParams
    step: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        return cls(ModelParams.zeros_like(params), ModelParams.zeros_like(params), 0)


def adam_update(params: ModelParams, grads: ModelParams, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam step; returns new ``(params, state)``."""
    for name in PARAM_NAMES:
        g = getattr(grads, name)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name} ({int(np.sum(~np.isfinite(g)))} entries)")
    t = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    for name in PARAM_NAMES:
        g = getattr(grads, name)
        m = beta1 * getattr(state.m, name) + (1 - beta1) * g
        v = beta2 * getattr(state.v, name) + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        new_p[name] = getattr(params, name) - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return ModelParams(**new_p), AdamState(ModelParams(**new_m), ModelParams(**new_v), t)


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    patches: np.ndarray
    index: BatchIndex
    correspondences: list[CorrespondenceSet]
    image_ids: list[int]


def step_seed(seed: int, epoch: int, step: int) -> int:
    return seed ^ (epoch * 65536 + step)


def _build_pair(image, image_id, cfg: TrainConfig, seed_seq):
    border = cfg.patch_side // 2 + 1
    for attempt in range(MAX_PAIR_RETRIES + 1):
        rng = np.random.default_rng(np.random.SeedSequence([*seed_seq, attempt]))
        pair = make_pair(image, cfg.homography, cfg.crop_size, rng, image_id)
        anchor, positive = pair.anchor, pair.positive
        if cfg.augment:
            anchor = augment_color(anchor, AugmentParams.sample(rng))
            positive = augment_color(positive, AugmentParams.sample(rng))
        anchor, positive = to_gray(anchor), to_gray(positive)
        kps = detect_harris(anchor, cfg.detect_max, 4, border)
        corr = reproject_keypoints(kps, pair.h_ap, (cfg.crop_size, cfg.crop_size), border)
        if len(corr) >= 4:
            keep = slice(0, cfg.keypoints_per_crop)
            corr = CorrespondenceSet(corr.src[keep], corr.dst[keep], corr.index[keep])
            pa = extract_patches(anchor, corr.src, cfg.patch_side)
            pp = extract_patches(positive, corr.dst, cfg.patch_side)
            return pa, pp, corr
    raise CorpusExhaustedError(f"image {image_id}: fewer than 4 correspondences after {MAX_PAIR_RETRIES} retries")


def build_batch(corpus, cfg: TrainConfig, seed: int, workers: int = 1) -> Batch:
    """Sample ``pairs_per_batch`` images and turn each into matched patch sets."""
    if len(corpus) < cfg.pairs_per_batch:
        raise CorpusExhaustedError(f"corpus has {len(corpus)} images, batch needs {cfg.pairs_per_batch}")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(corpus), cfg.pairs_per_batch, replace=False)
    jobs = [(corpus[c][1], corpus[c][0], cfg, (seed, j)) for j, c in enumerate(chosen)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(lambda a: _build_pair(*a), jobs))
    else:
        results = [_build_pair(*a) for a in jobs]
    ids = [int(corpus[c][0]) for c in chosen]
    index = BatchIndex.from_pairs(ids, [len(r[2]) for r in results])
    patches = np.concatenate([np.concatenate([pa, pp]) for pa, pp, _ in results])
    return Batch(patches, index, [r[2] for r in results], ids)


# ---------------------------------------------------------------------------
# pool
# ---------------------------------------------------------------------------


def image_descriptors(params: ModelParams, image, image_id: int = 0, max_keypoints: int = 128, nms_radius: int = 4) -> DescriptorSet:
    gray = to_gray(image)
    side = params.patch_side
    kps = detect_harris(gray, max_keypoints, nms_radius, side // 2 + 1)
    pts = np.array([(k.x, k.y) for k in kps]).reshape(-1, 2)
    if len(pts) == 0:
        return DescriptorSet(np.zeros((0, params.dim)), pts, image_id)
    return describe(params, extract_patches(gray, pts, side), pts, image_id)


def load_pool_images(pool_dir, corpus_dir=None) -> list[tuple[int, np.ndarray]]:
    """Pool images keep corpus ids when the pool is the corpus directory itself."""
    images = load_corpus(pool_dir)
    same = corpus_dir is not None and Path(pool_dir).resolve() == Path(corpus_dir).resolve()
    if same:
        return images
    return [(POOL_ID_OFFSET + i, img) for i, img in images]


def build_pool(params: ModelParams, pool_images, pool_dir=None, max_keypoints: int = 64) -> NegativePool:
    """Describe every pool image with the current model.

    Globals come from ``img_%05d.gd`` sidecars in *pool_dir* when present
    (externally computed), else from the image's own local descriptors.
    """
    descs, globs = [], []
    for img_id, img in pool_images:
        d = image_descriptors(params, img, img_id, max_keypoints)
        if len(d) == 0:
            continue
        sidecar = Path(pool_dir) / f"img_{img_id % POOL_ID_OFFSET:05d}.gd" if pool_dir else None
        g = read_gd(sidecar) if sidecar is not None and sidecar.exists() else aggregate_global_descriptor(d)
        descs.append(d)
        globs.append(g)
    return NegativePool([d.image_id for d in descs], np.stack(globs), descs)


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------


@dataclass
class StepResult:
    loss: float
    mean_neg_sim: float
    params: ModelParams
    state: AdamState


def train_step_gradients(params, batch: Batch, cfg: TrainConfig, mined) -> tuple[ModelParams, float]:
    """Loss and parameter gradients for a batch with its negatives already mined."""
    desc, cache = forward(params, batch.patches)
    rows = desc.rows
    all_rows = np.concatenate([rows, mined.extra_rows]) if len(mined.extra_rows) else rows
    anchors, positives = batch.index.anchor_rows, batch.index.positive_rows
    s_pos = np.sum(rows[anchors] * rows[positives], axis=1)
    if cfg.loss_kind == "ap":
        k = max(len(s) for s in mined.similarities)
        s_neg = np.zeros((len(anchors), k))
        mask = np.zeros((len(anchors), k), dtype=bool)
        for i, s in enumerate(mined.similarities):
            s_neg[i, : len(s)] = s
            mask[i, : len(s)] = True
        out = ap_loss_arrays(s_pos, s_neg, mask, APConfig(cfg.ap_bins))
        neg_idx = mined.indices
    else:
        hardest = np.array([s[0] for s in mined.similarities])
        out = triplet_loss_batch(s_pos, hardest, TripletConfig(cfg.triplet_margin))
        neg_idx = [ix[:1] for ix in mined.indices]
    if not np.isfinite(out.value):
        raise TrainingAbort(f"non-finite loss {out.value}")
    grad_rows = backprop_similarities(all_rows, anchors, positives, out.d_s_pos, neg_idx, out.d_s_negs)
    return backward(params, cache, grad_rows[: len(rows)]), out.value


def train_step(params, state, batch: Batch, cfg: TrainConfig, seed: int, pool: NegativePool | None = None) -> StepResult:
    rows = forward(params, batch.patches)[0].rows
    mined = mine(cfg.mining_strategy(), batch.index, rows, seed, pool)
    grads, loss = train_step_gradients(params, batch, cfg, mined)
    params, state = adam_update(params, grads, state, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    return StepResult(loss, mined.mean_similarity(), params, state)


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0
    config: dict = field(default_factory=dict)
    checkpoint: str | None = None


def train(
    corpus,
    cfg: TrainConfig,
    pool_images=None,
    checkpoint_path=None,
    workers: int = 1,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[ModelParams, TrainReport]:
    """Run ``epochs x steps_per_epoch`` optimization steps from a seeded init."""
    t0 = time.perf_counter()
    params = init_params(cfg.patch_side, cfg.hidden, cfg.dim, cfg.seed)
    state = AdamState.zeros(params)
    report = TrainReport(config=cfg.to_dict())
    c2f = cfg.strategy == "coarse_to_fine"
    if c2f and not pool_images:
        raise ValueError("coarse_to_fine training needs pool images")
    pool = None
    for epoch in range(cfg.epochs):
        t_epoch = time.perf_counter()
        if c2f and epoch % cfg.pool_refresh_epochs == 0:
            pool = build_pool(params, pool_images, cfg.pool_dir)
        losses, sims = [], []
        for step in range(cfg.steps_per_epoch):
            s = step_seed(cfg.seed, epoch, step)
            batch = build_batch(corpus, cfg, s, workers)
            res = train_step(params, state, batch, cfg, s, pool)
            params, state = res.params, res.state
            losses.append(res.loss)
            sims.append(res.mean_neg_sim)
        record = {
            "epoch": epoch,
            "mean_loss": float(np.mean(losses)) if losses else float("nan"),
            "mean_neg_sim": float(np.mean(sims)) if sims else float("nan"),
            "seconds": time.perf_counter() - t_epoch,
        }
        log.info("epoch %d loss %.4f neg_sim %.4f", epoch, record["mean_loss"], record["mean_neg_sim"])
        report.epochs.append(record)
        if on_epoch is not None:
            on_epoch(record)
    report.wall_clock = time.perf_counter() - t0
    if checkpoint_path is not None:
        save_checkpoint(params, checkpoint_path, report.config)
        report.checkpoint = str(checkpoint_path)
    return params, report
