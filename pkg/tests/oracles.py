"""Independent reference implementations used by the tests."""

import numpy as np


def rel_err(numeric, analytic, floor=1e-6):
    """Elementwise relative error; *floor* keeps near-zero entries from dividing by rounding noise."""
    numeric = np.asarray(numeric, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(numeric), np.abs(analytic)), floor)
    return float(np.max(np.abs(numeric - analytic) / denom)) if numeric.size else 0.0


def central_diff(f, x, step):
    """Central finite differences of scalar *f* at array *x* (modified in place, then restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + step
        fp = f()
        x[i] = old - step
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * step)
    return g


def staircase_ap(ranked, relevant):
    """Exact area under the precision-recall staircase, one step per relevant hit."""
    from fractions import Fraction

    relevant = set(relevant)
    hits, area, prev_recall = 0, Fraction(0), Fraction(0)
    for k, item in enumerate(ranked, start=1):
        if item in relevant:
            hits += 1
            recall = Fraction(hits, len(relevant))
            area += (recall - prev_recall) * Fraction(hits, k)
            prev_recall = recall
    return area


def soft_ap_reference(s_pos, s_negs, num_bins, dtype=np.longdouble):
    """AP' of lists (rows) written straight from the binned definition, in extended precision.

    Bins run from similarity 1 down to -1. Each similarity spreads over the two
    nearest centers with triangular weights; the positive's mass in bin m is
    weighted by 1 / (1 + number of negatives in bins 0..m).
    """
    s_pos = np.asarray(s_pos, dtype=dtype).reshape(-1)
    s_negs = np.asarray(s_negs, dtype=dtype).reshape(len(s_pos), -1)
    delta = dtype(2) / dtype(num_bins - 1)
    out = np.zeros(len(s_pos), dtype=dtype)
    negs_so_far = np.zeros(len(s_pos), dtype=dtype)
    for m in range(num_bins):
        center = dtype(1) - m * delta
        tri = lambda s: np.maximum(dtype(0), dtype(1) - np.abs(np.clip(s, -1, 1) - center) / delta)
        negs_so_far = negs_so_far + tri(s_negs).sum(axis=1)
        out = out + tri(s_pos) / (dtype(1) + negs_so_far)
    return out


def brute_mutual_nn(a, b):
    sim = a @ b.T
    out = []
    for i in range(sim.shape[0]):
        j = max(range(sim.shape[1]), key=lambda c: (sim[i, c], -c))
        i_back = max(range(sim.shape[0]), key=lambda r: (sim[r, j], -r))
        if i_back == i:
            out.append((i, j))
    return out


def brute_topk(rows, anchor, candidates, k):
    """Candidates sorted by similarity to *anchor* descending, ties by lower index."""
    scored = sorted(candidates, key=lambda c: (-float(rows[anchor] @ rows[c]), c))
    return scored if k is None else scored[:k]


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def separated_values(rng, n, gap):
    """*n* values in [-1, 1] with every pairwise gap above *gap*, in random order."""
    slack = 2.0 - (n - 1) * gap
    if slack <= 0:
        raise ValueError("cannot fit that many separated values")
    # sorted uniform spacings plus the mandatory gaps, then shuffled
    cuts = np.sort(rng.uniform(0, slack * 0.999, n))
    vals = -1.0 + cuts + np.arange(n) * gap * 1.0001
    return rng.permutation(vals)


def frozen_list_loss(params, patches, anchors, positives, neg_idx, num_bins):
    """Returns a closure giving the AP loss of a batch with mined negatives held fixed."""
    from descmine.descriptor import describe
    from descmine.loss import APConfig, ap_loss_arrays

    cfg = APConfig(num_bins)
    width = max(len(i) for i in neg_idx)
    idx = np.zeros((len(anchors), width), dtype=np.int64)
    mask = np.zeros((len(anchors), width), dtype=bool)
    for r, i in enumerate(neg_idx):
        idx[r, : len(i)] = i
        mask[r, : len(i)] = True
    anchors, positives = np.asarray(anchors), np.asarray(positives)

    def loss():
        rows = describe(params, patches).rows
        a = rows[anchors]
        s_pos = np.einsum("ij,ij->i", a, rows[positives])
        s_neg = np.einsum("ikj,ij->ik", rows[idx], a)
        return ap_loss_arrays(s_pos, s_neg, mask, cfg).value

    return loss


def _perturbed_outputs(params, x, name, h):
    """Raw MLP outputs for every single-entry perturbation of parameter *name* by *h*.

    Yields ``(flat_indices, outputs)`` chunks with outputs shaped (B, P, D).
    A perturbation of first-layer weights only changes one hidden unit, so
    each perturbed output is the base output plus a rank-one correction.
    """
    z = x @ params.w1.T + params.b1
    a1 = np.tanh(z)
    y = a1 @ params.w2.T + params.b2
    hidden, n_in = params.w1.shape
    dim = params.w2.shape[0]
    if name in ("w1", "b1"):
        inputs = x if name == "w1" else np.ones((x.shape[0], 1))
        per_unit = inputs.shape[1]
        for j in range(hidden):
            da = np.tanh(z[:, j, None] + h * inputs) - a1[:, j, None]
            out = y[None] + da.T[:, :, None] * params.w2[:, j][None, None, :]
            yield j * per_unit + np.arange(per_unit), out
    elif name == "w2":
        for d in range(dim):
            out = np.repeat(y[None], hidden, axis=0)
            out[:, :, d] += h * a1.T
            yield d * hidden + np.arange(hidden), out
    else:
        out = np.repeat(y[None], dim, axis=0)
        out[np.arange(dim), :, np.arange(dim)] += h
        yield np.arange(dim), out


def _batched_loss(outputs, anchors, positives, idx, mask, cfg):
    from descmine.loss import soft_ap_arrays

    rows = outputs / np.linalg.norm(outputs, axis=2, keepdims=True)
    a = rows[:, anchors]
    s_pos = np.einsum("bij,bij->bi", a, rows[:, positives])
    s_neg = np.einsum("bikj,bij->bik", rows[:, idx], a)
    b, n = s_pos.shape
    ap = soft_ap_arrays(s_pos.reshape(-1), s_neg.reshape(b * n, -1), np.tile(mask, (b, 1)), cfg)[0]
    return np.mean(1.0 - ap.reshape(b, n), axis=1)


def end_to_end_check(params, batch, cfg, seed=0, step=1e-5, spot_checks=4):
    """Max relative error between analytic and numeric d(loss)/d(params) for one batch.

    Negatives are mined once and held fixed. A few entries are also checked
    against a plain re-evaluation of the whole model.
    """
    from descmine.descriptor import forward
    from descmine.loss import APConfig
    from descmine.mining import mine
    from descmine.training import train_step_gradients

    rows = forward(params, batch.patches)[0].rows
    mined = mine(cfg.mining_strategy(), batch.index, rows, seed)
    grads, _ = train_step_gradients(params, batch, cfg, mined)
    anchors, positives = batch.index.anchor_rows, batch.index.positive_rows
    ap_cfg = APConfig(cfg.ap_bins)
    width = max(len(i) for i in mined.indices)
    idx = np.zeros((len(anchors), width), dtype=np.int64)
    mask = np.zeros((len(anchors), width), dtype=bool)
    for r, i in enumerate(mined.indices):
        idx[r, : len(i)] = i
        mask[r, : len(i)] = True
    x = batch.patches.reshape(len(batch.patches), -1).astype(np.float64)
    f = frozen_list_loss(params, batch.patches, anchors, positives, mined.indices, cfg.ap_bins)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in ("w1", "b1", "w2", "b2"):
        param = getattr(params, name)
        num = np.zeros(param.size)
        plus = _perturbed_outputs(params, x, name, step)
        minus = _perturbed_outputs(params, x, name, -step)
        for (flat, out_p), (_, out_m) in zip(plus, minus):
            lp = _batched_loss(out_p, anchors, positives, idx, mask, ap_cfg)
            lm = _batched_loss(out_m, anchors, positives, idx, mask, ap_cfg)
            num[flat] = (lp - lm) / (2 * step)
        num = num.reshape(param.shape)
        for flat in rng.choice(param.size, min(spot_checks, param.size), replace=False):
            i = np.unravel_index(flat, param.shape)
            old = param[i]
            param[i] = old + step
            fp = f()
            param[i] = old - step
            fm = f()
            param[i] = old
            assert abs((fp - fm) / (2 * step) - num[i]) <= 1e-6 * max(1.0, abs(num[i])), "batched oracle disagrees with direct evaluation"
        worst = max(worst, rel_err(num, getattr(grads, name), floor=1e-6))
    return worst
