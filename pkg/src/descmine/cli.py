"""``descmine`` command line: corpus generation, training, evaluation."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .config import ConfigError, RunConfig, build_config, load_config
from .descriptor import CheckpointError, DegenerateEmbeddingError, load_checkpoint, save_checkpoint
from .evaluation import (
    describe_pairs,
    describe_views,
    evaluate_retrieval,
    make_eval_pairs,
    make_retrieval_views,
    oracle_describe_pairs,
    compute_matching_metrics,
    render_matching_table,
    render_retrieval_table,
)
from .geometry import RansacError
from .imaging import CorpusSpec, PnmError, generate_synthetic_image, load_corpus, write_corpus
from .training import CorpusExhaustedError, TrainingAbort, load_pool_images, train

EXIT_OK, EXIT_VALIDATION, EXIT_ABORT = 0, 2, 3
# keeps held-out evaluation data disjoint from training data for the same user seed
EVAL_SEED_TAG = 0xE7A1_5EED

log = logging.getLogger("descmine")


class UsageError(Exception):
    def __init__(self, problems):
        self.problems = [problems] if isinstance(problems, str) else list(problems)
        super().__init__("; ".join(self.problems))


def eval_seed(seed: int) -> int:
    return seed ^ EVAL_SEED_TAG


def parse_size(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 256x256, got {text!r}") from None


def parse_range(text: str) -> list[int]:
    """``"1..10"`` (inclusive), ``"3"`` or ``"1,3,5"``."""
    try:
        if ".." in text:
            lo, hi = (int(x) for x in text.split(".."))
            if hi < lo:
                raise ValueError
            values = list(range(lo, hi + 1))
        else:
            values = sorted({int(x) for x in text.split(",")})
        if values[0] < 1:
            raise ValueError
        return values
    except ValueError:
        raise argparse.ArgumentTypeError(f"thresholds must be positive integers like 1..10, got {text!r}") from None


def _default_threads() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True)


def _effective(args, overrides: dict) -> RunConfig:
    if getattr(args, "config", None):
        return load_config(args.config, overrides)
    return build_config({}, overrides)


def _require_empty(out: Path, force: bool):
    if out.exists() and not out.is_dir():
        raise UsageError(f"--out: {out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"--out: {out} is not empty (use --force to overwrite)")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_corpus(args) -> int:
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    w, h = args.size
    if w < 64 or h < 64:
        raise UsageError("--size must be at least 64x64")
    out = Path(args.out)
    _require_empty(out, args.force)
    write_corpus(out, args.count, CorpusSpec(w, h, args.elements), args.seed, args.threads)
    print(f"wrote {args.count} images to {out}")
    return EXIT_OK


def _train_overrides(args) -> dict:
    return {
        "seed": args.seed,
        "strategy": args.strategy,
        "loss_kind": args.loss,
        "epochs": args.epochs,
        "steps_per_epoch": args.steps,
        "top_k": args.top_k,
        "lr": args.lr,
        "pairs_per_batch": args.pairs_per_batch,
        "keypoints_per_crop": args.keypoints_per_crop,
    }


def cmd_train(args) -> int:
    problems = []
    try:
        cfg = _effective(args, _train_overrides(args))
    except ConfigError as exc:
        cfg = None
        problems.extend(exc.problems)
    strategy = cfg.strategy if cfg else (args.strategy or "")
    if strategy == "coarse_to_fine" and not args.pool:
        problems.append("pool: strategy coarse_to_fine requires --pool DIR")
    if cfg and strategy != "coarse_to_fine" and args.pool:
        problems.append("pool: --pool is only used by strategy coarse_to_fine")
    corpus_dir = Path(args.corpus)
    if not (corpus_dir / "manifest.json").exists():
        problems.append(f"corpus: {corpus_dir} has no manifest.json")
    if args.pool and not Path(args.pool).is_dir():
        problems.append(f"pool: {args.pool} is not a directory")
    if problems:
        raise UsageError(problems)

    corpus = load_corpus(corpus_dir)
    tcfg = cfg.train_config(args.pool)
    pool_images = load_pool_images(args.pool, corpus_dir) if args.pool else None
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".log.jsonl")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    effective = cfg.model_dump(mode="json")

    with open(log_path, "w") as fh:

        def on_epoch(rec):
            if not args.timing:
                rec = {**rec, "seconds": None}
            fh.write(_dump({**rec, "config": effective}) + "\n")
            fh.flush()

        params, report = train(corpus, tcfg, pool_images, None, args.threads, on_epoch)
    save_checkpoint(params, args.out, effective)
    for rec in report.epochs:
        print(f"epoch {rec['epoch']}  loss {rec['mean_loss']:.4f}  neg_sim {rec['mean_neg_sim']:.4f}")
    print(f"checkpoint {args.out}  log {log_path}")
    return EXIT_OK


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise UsageError(f"ckpt: {path} not found") from None
    except CheckpointError as exc:
        raise UsageError(f"ckpt: {exc}") from None


def _write_outputs(out_dir: Path, stem: str, doc: dict, text: str, effective: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{stem}.json").write_text(json.dumps({**doc, "config": effective}, indent=2, sort_keys=True) + "\n")
    (out_dir / f"{stem}.txt").write_text(f"# config {_dump(effective)}\n" + text)


def cmd_eval_matching(args) -> int:
    problems = []
    overrides = {"seed": args.seed, "eval_pairs": args.pairs, "patch_side": args.patch_side}
    try:
        cfg = _effective(args, overrides)
    except ConfigError as exc:
        raise UsageError(exc.problems) from None
    params = None
    if not args.oracle:
        params = _load_ckpt(args.ckpt)
        if params.patch_side != cfg.patch_side and (args.patch_side is not None or args.config):
            problems.append(f"patch_side: checkpoint uses {params.patch_side}, config asks for {cfg.patch_side}")
    corpus_dir = Path(args.corpus)
    if not corpus_dir.is_dir():
        problems.append(f"corpus: {corpus_dir} is not a directory")
    if problems:
        raise UsageError(problems)
    side = params.patch_side if params is not None else cfg.patch_side

    corpus = load_corpus(corpus_dir)
    tcfg = cfg.train_config()
    pairs = make_eval_pairs(corpus, cfg.eval_pairs, eval_seed(cfg.seed), tcfg.crop_size, tcfg.homography, cfg.augment, patch_side=side)
    if args.oracle:
        oracle_describe_pairs(pairs)
    else:
        describe_pairs(pairs, params)
    report = compute_matching_metrics(pairs, cfg.pixel_thresh, args.thresholds, ransac_seed=eval_seed(cfg.seed))
    name = "oracle" if args.oracle else Path(args.ckpt).stem
    effective = {**cfg.model_dump(mode="json"), "thresholds": args.thresholds, "ckpt": None if args.oracle else str(args.ckpt), "oracle": args.oracle}
    text = render_matching_table({name: report}, [t for t in (1, 3, 5, 10) if t in args.thresholds] or args.thresholds)
    _write_outputs(Path(args.out), "matching", report.to_json(), text, effective)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_eval_retrieval(args) -> int:
    overrides = {"seed": args.seed, "retrieval_scenes": args.scenes, "retrieval_views": args.views, "rerank_top_n": args.top_n}
    problems = []
    if args.views is not None and args.views < 2:
        problems.append("views: need at least 2 views per scene")
    if args.scenes is not None and args.scenes < 1:
        problems.append("scenes: need at least 1 scene")
    if problems:
        raise UsageError(problems)
    try:
        cfg = _effective(args, overrides)
    except ConfigError as exc:
        raise UsageError(exc.problems) from None
    params = _load_ckpt(args.ckpt)

    seed = eval_seed(cfg.seed)
    spec = CorpusSpec(cfg.corpus_width, cfg.corpus_height, cfg.corpus_elements)
    scenes = [generate_synthetic_image(spec, seed ^ (0x5CE0E << 8) ^ g) for g in range(cfg.retrieval_scenes)]
    tcfg = cfg.train_config()
    views = make_retrieval_views(scenes, cfg.retrieval_views, seed, tcfg.crop_size, tcfg.homography, cfg.augment)
    describe_views(views, params)
    pre, post = evaluate_retrieval(views, cfg.rerank_top_n, cfg.pixel_thresh, seed, args.threads)
    effective = {**cfg.model_dump(mode="json"), "ckpt": str(args.ckpt)}
    rows = {"global": pre, "global+inliers": post}
    text = render_retrieval_table(rows)
    _write_outputs(Path(args.out), "retrieval", {"pre_rerank": pre.to_json(), "post_rerank": post.to_json()}, text, effective)
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="descmine", description="Hard-negative mining for local descriptors on synthetic homography pairs.", formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    threads = dict(type=int, default=_default_threads(), help="worker threads; results do not depend on it")

    g = sub.add_parser("gen-corpus", help="write a synthetic image corpus", formatter_class=fmt)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--count", type=int, default=64, help="number of images")
    g.add_argument("--size", type=parse_size, default=(256, 256), help="image size WxH")
    g.add_argument("--seed", type=int, default=0, help="corpus seed")
    g.add_argument("--elements", type=int, default=CorpusSpec.element_count, help="shapes per image")
    g.add_argument("--force", action="store_true", help="write into a non-empty directory")
    g.add_argument("--threads", **threads)
    g.set_defaults(func=cmd_gen_corpus)

    t = sub.add_parser("train", help="train a descriptor", formatter_class=fmt)
    t.add_argument("--config", help="run config JSON (version 1); flags override it")
    t.add_argument("--corpus", required=True, help="corpus directory")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--pool", help="negative pool directory (coarse_to_fine only)")
    t.add_argument("--log", help="epoch log path (default: CKPT.log.jsonl)")
    t.add_argument("--seed", type=int, help="override config seed")
    t.add_argument("--strategy", help="override mining strategy")
    t.add_argument("--loss", help="override loss kind (ap or triplet)")
    t.add_argument("--epochs", type=int, help="override epochs")
    t.add_argument("--steps", type=int, help="override steps per epoch")
    t.add_argument("--top-k", type=int, help="override K")
    t.add_argument("--lr", type=float, help="override learning rate")
    t.add_argument("--pairs-per-batch", type=int, help="override pairs per batch")
    t.add_argument("--keypoints-per-crop", type=int, help="override keypoints per crop")
    t.add_argument("--timing", action="store_true", help="record per-epoch seconds (makes logs non-reproducible)")
    t.add_argument("--threads", **threads)
    t.set_defaults(func=cmd_train)

    m = sub.add_parser("eval-matching", help="MMA, eta, precision, recall on held-out pairs", formatter_class=fmt)
    m.add_argument("--ckpt", help="checkpoint path (not needed with --oracle)")
    m.add_argument("--corpus", required=True, help="corpus directory")
    m.add_argument("--config", help="run config JSON (version 1)")
    m.add_argument("--pairs", type=int, help="number of evaluation pairs (config default 50)")
    m.add_argument("--seed", type=int, help="user seed, namespaced away from training")
    m.add_argument("--thresholds", type=parse_range, default="1..10", help="pixel thresholds, inclusive range")
    m.add_argument("--patch-side", type=int, help="expected patch side; must match the checkpoint")
    m.add_argument("--oracle", action="store_true", help="use ground-truth one-hot descriptors")
    m.add_argument("--out", default=".", help="report directory")
    m.add_argument("--threads", **threads)
    m.set_defaults(func=cmd_eval_matching)

    r = sub.add_parser("eval-retrieval", help="retrieval before and after inlier re-ranking", formatter_class=fmt)
    r.add_argument("--ckpt", required=True, help="checkpoint path")
    r.add_argument("--config", help="run config JSON (version 1)")
    r.add_argument("--scenes", type=int, help="scene groups G (config default 8)")
    r.add_argument("--views", type=int, help="views per scene V >= 2 (config default 4)")
    r.add_argument("--top-n", type=int, help="re-rank depth (config default 100)")
    r.add_argument("--seed", type=int, help="user seed, namespaced away from training")
    r.add_argument("--out", default=".", help="report directory")
    r.add_argument("--threads", **threads)
    r.set_defaults(func=cmd_eval_retrieval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "threads", 1) < 1:
        parser.error("--threads must be >= 1")
    if args.command == "eval-matching" and not args.oracle and not args.ckpt:
        parser.error("--ckpt is required unless --oracle is given")
    try:
        # small-matrix linear algebra is slower with a threaded BLAS; parallelism comes from --threads
        with threadpool_limits(limits=1, user_api="blas"):
            return args.func(args)
    except UsageError as exc:
        for problem in exc.problems:
            print(f"error: {problem}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TrainingAbort, CorpusExhaustedError, DegenerateEmbeddingError, RansacError, FloatingPointError, PnmError, OSError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
