import json

import numpy as np
import pytest

from descmine.descriptor import (
    CheckpointError,
    DegenerateEmbeddingError,
    ModelParams,
    backward,
    describe,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from oracles import central_diff, rel_err


def test_init_deterministic_and_bounded():
    a, b = init_params(16, 128, 32, seed=1), init_params(16, 128, 32, seed=1)
    for name in ("w1", "b1", "w2", "b2"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    assert not a.b1.any() and not a.b2.any()
    assert np.abs(a.w1).max() <= np.sqrt(6 / (256 + 128))
    assert (a.patch_side, a.hidden, a.dim) == (16, 128, 32)


@pytest.mark.parametrize("args", [(12, 128, 32), (16, 16, 32), (16, 128, 4)])
def test_init_rejects_bad_shapes(args):
    with pytest.raises(ValueError):
        init_params(*args)


def test_forward_constant_direction():
    p = init_params(8, 8, 8, 0)
    p = ModelParams(np.zeros_like(p.w1), np.zeros_like(p.b1), np.zeros_like(p.w2), np.eye(8)[0])
    d = describe(p, np.random.default_rng(0).random((5, 8, 8)))
    assert np.array_equal(d.rows, np.tile(np.eye(8)[0], (5, 1)))


def test_forward_rows_unit_norm():
    d = describe(init_params(16, 64, 32, 3), np.random.default_rng(0).random((40, 16, 16)))
    assert np.allclose(np.linalg.norm(d.rows, axis=1), 1.0, atol=1e-6)


def test_output_scale_invariance():
    p = init_params(16, 64, 32, 3)
    q = ModelParams(p.w1, p.b1, 2 * p.w2, 2 * p.b2)
    x = np.random.default_rng(0).random((10, 16, 16))
    assert np.allclose(describe(p, x).rows, describe(q, x).rows, atol=1e-15)


def test_vanishing_embedding_raises():
    p = init_params(8, 8, 8, 0)
    p = ModelParams.zeros_like(p)
    with pytest.raises(DegenerateEmbeddingError):
        forward(p, np.zeros((1, 8, 8)))


def test_wrong_patch_size_rejected():
    with pytest.raises(ValueError):
        forward(init_params(8, 8, 8, 0), np.zeros((2, 16, 16)))


def test_zero_upstream_gradient():
    p = init_params(8, 16, 8, 0)
    _, cache = forward(p, np.random.default_rng(0).random((4, 8, 8)))
    g = backward(p, cache, np.zeros((4, 8)))
    assert all(not a.any() for a in g.arrays().values())


def test_radial_gradient_is_annihilated():
    p = init_params(8, 16, 8, 0)
    d, cache = forward(p, np.random.default_rng(0).random((1, 8, 8)))
    g = backward(p, cache, 3.0 * d.rows)
    assert all(np.abs(a).max() < 1e-12 for a in g.arrays().values())


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(7)
    p = init_params(8, 8, 8, 5)
    p.b1[:] = rng.normal(scale=0.1, size=8)
    p.b2[:] = rng.normal(scale=0.1, size=8)
    x = rng.random((3, 8, 8))
    target = rng.normal(size=(3, 8))

    def loss():
        return 0.5 * np.sum((describe(p, x).rows - target) ** 2)

    d, cache = forward(p, x)
    g = backward(p, cache, d.rows - target)
    for name in ("w1", "b1", "w2", "b2"):
        num = central_diff(loss, getattr(p, name), 1e-4)
        assert rel_err(num, getattr(g, name)) < 1e-4, name


def test_checkpoint_round_trip_bit_exact(tmp_path):
    p = init_params(16, 32, 16, 9)
    p.b1[:] = np.random.default_rng(0).normal(size=32) * 1e-7
    save_checkpoint(p, tmp_path / "m.json", config={"seed": 9})
    q = load_checkpoint(tmp_path / "m.json")
    for name in ("w1", "b1", "w2", "b2"):
        assert np.array_equal(getattr(p, name), getattr(q, name))
    assert json.loads((tmp_path / "m.json").read_text())["config"] == {"seed": 9}


def test_truncated_checkpoint(tmp_path):
    save_checkpoint(init_params(8, 8, 8, 0), tmp_path / "m.json")
    text = (tmp_path / "m.json").read_text()
    (tmp_path / "m.json").write_text(text[: len(text) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "m.json")


def test_checkpoint_dim_mismatch(tmp_path):
    save_checkpoint(init_params(8, 8, 8, 0), tmp_path / "m.json")
    doc = json.loads((tmp_path / "m.json").read_text())
    doc["dim"] = 16
    (tmp_path / "m.json").write_text(json.dumps(doc))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "m.json")


def test_checkpoint_missing_field(tmp_path):
    save_checkpoint(init_params(8, 8, 8, 0), tmp_path / "m.json")
    doc = json.loads((tmp_path / "m.json").read_text())
    del doc["b2"]
    (tmp_path / "m.json").write_text(json.dumps(doc))
    with pytest.raises(CheckpointError, match="b2"):
        load_checkpoint(tmp_path / "m.json")
