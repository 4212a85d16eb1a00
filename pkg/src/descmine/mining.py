"""Hard-negative mining over a pair, a batch, or a batch widened by image retrieval.

Descriptors of a batch live in one ``(N, d)`` matrix whose row numbers are the
global indices used everywhere below. Ties are always broken by the lowest
global index so results can be compared exactly against brute force.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .descriptor import DescriptorSet


class MiningError(ValueError):
    pass


class DegenerateAggregateError(FloatingPointError):
    pass


class DescriptorFileError(ValueError):
    pass


ANCHOR, POSITIVE = 0, 1


@dataclass(frozen=True)
class MiningStrategy:
    kind: str
    k: int | None = None

    KINDS = ("in_pair", "in_batch_all", "in_batch_random", "in_batch_topk", "coarse_to_fine")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown mining strategy {self.kind!r}")
        if self.kind in ("in_batch_random", "in_batch_topk", "coarse_to_fine") and (self.k is None or self.k < 1):
            raise ValueError(f"{self.kind} needs k >= 1")

    @classmethod
    def in_pair(cls):
        return cls("in_pair")

    @classmethod
    def in_batch_all(cls):
        return cls("in_batch_all")

    @classmethod
    def in_batch_random(cls, k):
        return cls("in_batch_random", k)

    @classmethod
    def in_batch_topk(cls, k=30):
        return cls("in_batch_topk", k)

    @classmethod
    def coarse_to_fine(cls, k=30):
        return cls("coarse_to_fine", k)


@dataclass
class BatchIndex:
    """Provenance of every row in a batch descriptor matrix.

    Rows are laid out pair by pair: the pair's anchors, then its positives.
    ``anchor_rows[i]`` and ``positive_rows[i]`` are a matching pair.
    """

    source_image_id: np.ndarray
    role: np.ndarray
    pair_id: np.ndarray
    anchor_rows: np.ndarray
    positive_rows: np.ndarray

    @classmethod
    def from_pairs(cls, image_ids, counts) -> "BatchIndex":
        src, role, pair, anc, pos = [], [], [], [], []
        start = 0
        for p, (img, n) in enumerate(zip(image_ids, counts)):
            src += [img] * (2 * n)
            role += [ANCHOR] * n + [POSITIVE] * n
            pair += [p] * (2 * n)
            anc += range(start, start + n)
            pos += range(start + n, start + 2 * n)
            start += 2 * n
        as_int = lambda v: np.asarray(v, dtype=np.int64)
        return cls(as_int(src), as_int(role), as_int(pair), as_int(anc), as_int(pos))

    def __len__(self):
        return len(self.role)

    @property
    def image_ids(self) -> list[int]:
        """Distinct source images in first-appearance order."""
        _, first = np.unique(self.source_image_id, return_index=True)
        return [int(self.source_image_id[i]) for i in sorted(first)]


@dataclass
class MinedNegatives:
    """Per-anchor negatives, most similar first.

    Indices address the batch rows followed by ``extra_rows`` (descriptors
    pulled in from a negative pool, treated as constants).
    """

    anchor_rows: np.ndarray
    indices: list[np.ndarray]
    similarities: list[np.ndarray]
    extra_rows: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    extra_source_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self):
        return len(self.indices)

    def mean_similarity(self) -> float:
        sims = [s for s in self.similarities if len(s)]
        return float(np.mean(np.concatenate(sims))) if sims else float("nan")

    def per_anchor_mean(self) -> np.ndarray:
        return np.array([s.mean() if len(s) else np.nan for s in self.similarities])


def _rows(x) -> np.ndarray:
    return x.rows if isinstance(x, DescriptorSet) else np.asarray(x, dtype=np.float64)


def similarity(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch {a.shape} vs {b.shape}")
    return float(_dots(a.reshape(1, -1), b.reshape(1, -1))[0, 0])


def similarity_matrix(a, b) -> np.ndarray:
    ra, rb = _rows(a), _rows(b)
    if ra.shape[1] != rb.shape[1]:
        raise ValueError(f"dimension mismatch {ra.shape[1]} vs {rb.shape[1]}")
    return _dots(ra, rb)


def _dots(ra: np.ndarray, rb: np.ndarray) -> np.ndarray:
    # Blocked matrix products round the same dot product differently depending on
    # where a row lands, so duplicate descriptors could stop tying. einsum reduces
    # every entry with the same loop.
    return np.einsum("ij,kj->ik", ra, rb)


def mine_in_pair(anchors, positives, pairing=None) -> MinedNegatives:
    """Hardest non-matching positive of the same pair for each anchor.

    ``pairing[i]`` is the positive row matching anchor ``i`` (identity by
    default). Returned indices address the positive set.
    """
    sim = similarity_matrix(anchors, positives)
    n_a, n_p = sim.shape
    if n_p < 2:
        raise MiningError("in-pair mining needs at least 2 positives")
    pairing = np.arange(n_a) if pairing is None else np.asarray(pairing)
    sim = sim.copy()
    sim[np.arange(n_a), pairing] = -np.inf
    best = np.argmax(sim, axis=1)
    return MinedNegatives(
        np.arange(n_a),
        [np.array([j]) for j in best],
        [np.array([sim[i, j]]) for i, j in enumerate(best)],
    )


def _mine_in_pair_batch(batch: BatchIndex, rows: np.ndarray) -> MinedNegatives:
    indices, sims = [], []
    for p in np.unique(batch.pair_id):
        sel = batch.pair_id[batch.anchor_rows] == p
        anc, pos = batch.anchor_rows[sel], batch.positive_rows[sel]
        mined = mine_in_pair(rows[anc], rows[pos])
        indices += [pos[j] for j in mined.indices]
        sims += mined.similarities
    return MinedNegatives(batch.anchor_rows.copy(), indices, sims)


def _ranked_candidates(sim: np.ndarray, excluded: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sort each row descending with lowest-index tie-break; excluded entries last."""
    masked = np.where(excluded, -np.inf, sim)
    order = np.argsort(-masked, axis=1, kind="stable")
    counts = (~excluded).sum(axis=1)
    return order, counts


def _select(strategy: MiningStrategy, sim, excluded, rng) -> tuple[list, list]:
    order, counts = _ranked_candidates(sim, excluded)
    indices, sims = [], []
    for i in range(sim.shape[0]):
        ranked = order[i, : counts[i]]
        if strategy.kind == "in_batch_random":
            if counts[i] > strategy.k:
                chosen = rng.choice(ranked, strategy.k, replace=False)
                keep = np.isin(ranked, chosen)
                ranked = ranked[keep]
        elif strategy.kind in ("in_batch_topk", "coarse_to_fine"):
            ranked = ranked[: strategy.k]
        indices.append(ranked)
        sims.append(sim[i, ranked])
    return indices, sims


def mine_in_batch(strategy: MiningStrategy, batch: BatchIndex, rows, seed: int = 0) -> MinedNegatives:
    """Negatives for every anchor from all batch rows of other source images."""
    rows = _rows(rows)
    if strategy.kind == "in_pair":
        return _mine_in_pair_batch(batch, rows)
    if strategy.kind == "coarse_to_fine":
        raise MiningError("coarse_to_fine needs a pool; use mine_coarse_to_fine")
    if len(np.unique(batch.source_image_id)) < 2:
        raise MiningError("in-batch mining needs at least 2 distinct source images")
    anchors = batch.anchor_rows
    sim = _dots(rows[anchors], rows)
    excluded = batch.source_image_id[anchors][:, None] == batch.source_image_id[None, :]
    rng = np.random.default_rng(seed)
    indices, sims = _select(strategy, sim, excluded, rng)
    return MinedNegatives(anchors.copy(), indices, sims)


# ---------------------------------------------------------------------------
# global descriptors and coarse-to-fine
# ---------------------------------------------------------------------------


def aggregate_global_descriptor(descs, method: str = "sum", p: float = 3.0) -> np.ndarray:
    """Image-level descriptor from unit local descriptors, l2-normalized.

    ``method="sum"`` sums the rows; ``method="gem"`` takes the generalized mean
    with exponent *p* of absolute coordinates.
    """
    rows = _rows(descs)
    if rows.shape[0] < 1:
        raise ValueError("cannot aggregate an empty descriptor set")
    if method == "sum":
        v = rows.sum(axis=0)
    elif method == "gem":
        v = np.mean(np.abs(rows) ** p, axis=0) ** (1.0 / p)
    else:
        raise ValueError(f"unknown aggregation {method!r}")
    norm = np.linalg.norm(v)
    if norm < 1e-12:
        raise DegenerateAggregateError("descriptors cancel out; global descriptor undefined")
    return v / norm


@dataclass
class NegativePool:
    """Candidate images for coarse-to-fine mining with their descriptors."""

    image_ids: list[int]
    globals_: np.ndarray
    descriptors: list[DescriptorSet]

    def __post_init__(self):
        if len(set(self.image_ids)) != len(self.image_ids):
            raise ValueError("pool image ids must be distinct")
        self.globals_ = np.asarray(self.globals_, dtype=np.float64).reshape(len(self.image_ids), -1)

    def __len__(self):
        return len(self.image_ids)

    @classmethod
    def from_descriptors(cls, descriptors: list[DescriptorSet], globals_=None, method="sum") -> "NegativePool":
        ids = [d.image_id for d in descriptors]
        if globals_ is None:
            globals_ = np.stack([aggregate_global_descriptor(d, method) for d in descriptors])
        return cls(ids, globals_, descriptors)

    def descriptor_for(self, image_id: int) -> DescriptorSet:
        return self.descriptors[self.image_ids.index(image_id)]

    def save(self, directory) -> None:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        for img_id, g, d in zip(self.image_ids, self.globals_, self.descriptors):
            write_dsc(out / f"img_{img_id:05d}.dsc", d)
            write_gd(out / f"img_{img_id:05d}.gd", g)

    @classmethod
    def load(cls, directory) -> "NegativePool":
        root = Path(directory)
        descs, globs = [], []
        for path in sorted(root.glob("img_*.dsc")):
            img_id = int(path.stem.split("_")[1])
            d = read_dsc(path)
            d.image_id = img_id
            descs.append(d)
            gd = path.with_suffix(".gd")
            globs.append(read_gd(gd) if gd.exists() else aggregate_global_descriptor(d))
        return cls([d.image_id for d in descs], np.stack(globs) if globs else np.zeros((0, 0)), descs)


def retrieve_negative_images(batch_globals, pool: NegativePool, top_r: int = 1) -> list[int]:
    """Nearest pool image (by global similarity) for each batch image, excluding itself.

    ``batch_globals`` is a list of ``(image_id, global_descriptor)``. With
    ``top_r > 1`` the r best are returned per entry, flattened in order.
    """
    if len(pool) == 0:
        raise MiningError("negative pool is empty")
    ids = np.asarray(pool.image_ids)
    order = np.argsort(ids, kind="stable")
    ids, glob = ids[order], pool.globals_[order]
    out = []
    for img_id, g in batch_globals:
        sims = _dots(glob, np.asarray(g, dtype=np.float64)[None, :])[:, 0]
        sims = np.where(ids == img_id, -np.inf, sims)
        if np.all(np.isneginf(sims)):
            raise MiningError(f"pool holds only the query image {img_id}")
        ranked = np.argsort(-sims, kind="stable")
        valid = ranked[~np.isneginf(sims[ranked])]
        out += [int(ids[j]) for j in valid[:top_r]]
    return out


def batch_globals(batch: BatchIndex, rows, method: str = "sum") -> list[tuple[int, np.ndarray]]:
    """Global descriptor of each batch image from its anchor-crop descriptors."""
    rows = _rows(rows)
    out = []
    for img in batch.image_ids:
        sel = batch.anchor_rows[batch.source_image_id[batch.anchor_rows] == img]
        out.append((img, aggregate_global_descriptor(rows[sel], method)))
    return out


def mine_coarse_to_fine(
    k: int,
    batch: BatchIndex,
    rows,
    pool: NegativePool,
    seed: int = 0,
    globals_of_batch=None,
    top_r: int = 1,
) -> MinedNegatives:
    """Top-k mining over the batch plus the pool images retrieved for it.

    Retrieved images already in the batch add nothing. Pool descriptors are
    appended after the batch rows in ascending image-id order.
    """
    rows = _rows(rows)
    if len(np.unique(batch.source_image_id)) < 2:
        raise MiningError("in-batch mining needs at least 2 distinct source images")
    if globals_of_batch is None:
        globals_of_batch = batch_globals(batch, rows)
    retrieved = retrieve_negative_images(globals_of_batch, pool, top_r)
    in_batch = set(batch.image_ids)
    extra_ids = sorted(set(retrieved) - in_batch)
    extra_sets = [pool.descriptor_for(i) for i in extra_ids]
    extra = np.concatenate([d.rows for d in extra_sets]) if extra_sets else np.zeros((0, rows.shape[1]))
    extra_src = np.concatenate([[i] * len(d) for i, d in zip(extra_ids, extra_sets)]).astype(np.int64) if extra_sets else np.zeros(0, dtype=np.int64)

    all_rows = np.concatenate([rows, extra]) if len(extra) else rows
    all_src = np.concatenate([batch.source_image_id, extra_src])
    anchors = batch.anchor_rows
    sim = _dots(rows[anchors], all_rows)
    excluded = batch.source_image_id[anchors][:, None] == all_src[None, :]
    indices, sims = _select(MiningStrategy.coarse_to_fine(k), sim, excluded, None)
    return MinedNegatives(anchors.copy(), indices, sims, extra, extra_src)


def mine(strategy: MiningStrategy, batch: BatchIndex, rows, seed: int = 0, pool: NegativePool | None = None) -> MinedNegatives:
    if strategy.kind == "coarse_to_fine":
        if pool is None:
            raise MiningError("coarse_to_fine mining needs a negative pool")
        return mine_coarse_to_fine(strategy.k, batch, rows, pool, seed)
    return mine_in_batch(strategy, batch, rows, seed)


# ---------------------------------------------------------------------------
# DSC1 / GDC1 files
# ---------------------------------------------------------------------------


def write_dsc(path, descs: DescriptorSet) -> None:
    rows = np.asarray(descs.rows, dtype="<f4")
    kps = np.asarray(descs.keypoints, dtype="<f4").reshape(len(rows), 2)
    Path(path).write_bytes(b"DSC1" + struct.pack("<II", rows.shape[0], rows.shape[1]) + rows.tobytes() + kps.tobytes())


def read_dsc(path) -> DescriptorSet:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != b"DSC1":
        raise DescriptorFileError(f"{path}: not a DSC1 file")
    count, dim = struct.unpack("<II", data[4:12])
    need = 12 + 4 * count * (dim + 2)
    if len(data) != need:
        raise DescriptorFileError(f"{path}: expected {need} bytes, found {len(data)}")
    body = np.frombuffer(data, dtype="<f4", offset=12).astype(np.float64)
    rows = body[: count * dim].reshape(count, dim)
    kps = body[count * dim :].reshape(count, 2)
    return DescriptorSet(rows, kps)


def write_gd(path, g) -> None:
    g = np.asarray(g, dtype="<f4").ravel()
    Path(path).write_bytes(b"GDC1" + struct.pack("<I", g.size) + g.tobytes())


def read_gd(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != b"GDC1":
        raise DescriptorFileError(f"{path}: not a GDC1 file")
    (dim,) = struct.unpack("<I", data[4:8])
    if len(data) != 8 + 4 * dim:
        raise DescriptorFileError(f"{path}: expected {8 + 4 * dim} bytes, found {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=8).astype(np.float64)
