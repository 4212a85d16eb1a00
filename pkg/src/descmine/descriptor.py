"""Patch embedding model: ``unit(w2 @ tanh(w1 @ x + b1) + b2)``.

Forward and backward are written out by hand in float64 so gradients can be
checked against finite differences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DegenerateEmbeddingError(FloatingPointError):
    """Raised when a pre-normalization output vanishes (model collapse)."""


class CheckpointError(ValueError):
    pass


PARAM_NAMES = ("w1", "b1", "w2", "b2")


@dataclass
class ModelParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @property
    def patch_side(self) -> int:
        return int(round(np.sqrt(self.w1.shape[1])))

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def dim(self) -> int:
        return self.w2.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "ModelParams":
        return ModelParams(*(getattr(self, n).copy() for n in PARAM_NAMES))

    @classmethod
    def zeros_like(cls, other: "ModelParams") -> "ModelParams":
        return cls(*(np.zeros_like(getattr(other, n)) for n in PARAM_NAMES))


# gradients share the parameter layout
GradBuffer = ModelParams


@dataclass
class DescriptorSet:
    """Unit-norm descriptors with the keypoints they were computed at."""

    rows: np.ndarray
    keypoints: np.ndarray = field(default=None)
    image_id: int = 0

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.keypoints is None:
            self.keypoints = np.zeros((len(self.rows), 2))
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 2)

    @property
    def count(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def __len__(self):
        return self.count


@dataclass
class ForwardCache:
    x: np.ndarray
    a1: np.ndarray
    y: np.ndarray
    norms: np.ndarray


def init_params(patch_side: int = 16, hidden: int = 128, dim: int = 32, seed: int = 0) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    if patch_side not in (8, 16, 32):
        raise ValueError(f"patch_side must be 8, 16 or 32, got {patch_side}")
    if dim < 8 or hidden < dim:
        raise ValueError(f"need hidden >= dim >= 8, got hidden={hidden} dim={dim}")
    rng = np.random.default_rng(seed)
    n_in = patch_side * patch_side

    def glorot(fan_out, fan_in):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, (fan_out, fan_in))

    w1 = glorot(hidden, n_in)
    w2 = glorot(dim, hidden)
    return ModelParams(w1, np.zeros(hidden), w2, np.zeros(dim))


def forward(params: ModelParams, patches, keypoints=None, image_id: int = 0) -> tuple[DescriptorSet, ForwardCache]:
    x = np.asarray(patches, dtype=np.float64)
    x = x.reshape(x.shape[0], -1) if x.ndim > 1 else x.reshape(0, params.w1.shape[1])
    if x.shape[1] != params.w1.shape[1]:
        raise ValueError(f"patch size {x.shape[1]} does not match model input {params.w1.shape[1]}")
    a1 = np.tanh(x @ params.w1.T + params.b1)
    y = a1 @ params.w2.T + params.b2
    norms = np.linalg.norm(y, axis=1)
    if np.any(norms < 1e-12):
        raise DegenerateEmbeddingError(f"{int(np.sum(norms < 1e-12))} descriptors have vanishing norm")
    desc = DescriptorSet(y / norms[:, None], keypoints, image_id)
    return desc, ForwardCache(x, a1, y, norms)


def describe(params: ModelParams, patches, keypoints=None, image_id: int = 0) -> DescriptorSet:
    return forward(params, patches, keypoints, image_id)[0]


def backward(params: ModelParams, cache: ForwardCache, grad_out: np.ndarray) -> GradBuffer:
    """Gradient of a scalar loss w.r.t. parameters given ``dL/d(descriptors)``."""
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != cache.y.shape:
        raise ValueError(f"grad_out shape {g.shape} != descriptor shape {cache.y.shape}")
    yhat = cache.y / cache.norms[:, None]
    # normalization Jacobian (I - yhat yhat^T) / |y|
    dy = (g - yhat * np.sum(g * yhat, axis=1, keepdims=True)) / cache.norms[:, None]
    dw2 = dy.T @ cache.a1
    db2 = dy.sum(axis=0)
    dz1 = (dy @ params.w2) * (1.0 - cache.a1**2)
    dw1 = dz1.T @ cache.x
    db1 = dz1.sum(axis=0)
    return GradBuffer(dw1, db1, dw2, db2)


def save_checkpoint(params: ModelParams, path, config: dict | None = None) -> None:
    """JSON checkpoint; *config* is echoed under ``"config"`` and ignored on load."""
    doc = {
        "patch_side": params.patch_side,
        "hidden": params.hidden,
        "dim": params.dim,
        **{name: arr.ravel().tolist() for name, arr in params.arrays().items()},
    }
    if config is not None:
        doc["config"] = config
    Path(path).write_text(json.dumps(doc) + "\n")


def load_checkpoint(path) -> ModelParams:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"malformed checkpoint {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise CheckpointError("checkpoint must be a JSON object")
    missing = [k for k in ("patch_side", "hidden", "dim", *PARAM_NAMES) if k not in doc]
    if missing:
        raise CheckpointError(f"checkpoint missing fields: {', '.join(missing)}")
    p, h, d = int(doc["patch_side"]), int(doc["hidden"]), int(doc["dim"])
    shapes = {"w1": (h, p * p), "b1": (h,), "w2": (d, h), "b2": (d,)}
    arrays = {}
    for name, shape in shapes.items():
        arr = np.asarray(doc[name], dtype=np.float64)
        if arr.size != int(np.prod(shape)):
            raise CheckpointError(f"{name} has {arr.size} values, dims imply {int(np.prod(shape))}")
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"{name} contains non-finite values")
        arrays[name] = arr.reshape(shape)
    return ModelParams(**arrays)
