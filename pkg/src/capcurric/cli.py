"""Command-line entry point: ``capcurric <subcommand> [flags]``.

Every run writes its outputs plus a ``manifest.json`` echoing the resolved
configuration into ``--out-dir``. Exit codes: 0 success, 1 internal error,
2 user or input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import HarnessError, __version__
from .analysis import (
    compare_dispersion,
    cross_dataset_eval,
    decode_split,
    divide_by_difficulty,
    evaluate_levels,
    histogram_csv,
    paired_bootstrap_test,
    split_references,
)
from .data import (
    SyntheticConfig,
    generate_synthetic,
    iter_jsonl,
    load_dataset,
    load_head,
    load_references,
    save_dataset,
    save_head,
    strip_special,
    synthetic_head,
)
from .difficulty import AddupConfig, Method, load_scores, save_scores, score_pairs
from .learner import LearnerConfig, load_checkpoint, save_checkpoint
from .metrics import MetricReport, evaluate
from .scheduler import BASELINES, Curriculum, ScheduleConfig, baseline_curriculum, run_babystep

log = logging.getLogger("capcurric")

METHOD_FLAGS = {
    "simi-cos": Method.SIMI_COSINE,
    "simi-sigmoid": Method.SIMI_SIGMOID,
    "addup": Method.ADDUP,
    "bootstrap": Method.BOOTSTRAP,
}


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_candidates(path: Path, cands: dict[int, list[int]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i in sorted(cands):
            fh.write(json.dumps({"image_id": i, "tokens": list(cands[i])}) + "\n")


def load_candidates(path) -> dict[int, list[int]]:
    out = {}
    for line_no, obj in iter_jsonl(path):
        try:
            out[int(obj["image_id"])] = strip_special(obj["tokens"])
        except (KeyError, TypeError, ValueError) as exc:
            raise HarnessError(f"{path}: line {line_no}: malformed candidate ({exc})") from None
    return out


# ---------------------------------------------------------------------------
# subcommands; each returns the list of files it wrote


def cmd_generate(args, out: Path) -> list[str]:
    cfg = SyntheticConfig(
        n_pairs=args.n_pairs,
        F=args.feature_dim,
        V=args.vocab_size,
        noise_schedule=args.noise_schedule,
        noise_max=args.noise_max,
        seed=args.seed,
        n_valid_images=args.valid_images,
        n_test_images=args.test_images,
        name=args.name,
    )
    ds = generate_synthetic(cfg)
    save_dataset(ds, out / "dataset.jsonl")
    save_head(out / "head.mat", synthetic_head(cfg.joint_dim))
    return ["dataset.jsonl", "head.mat"]


def cmd_score(args, out: Path) -> list[str]:
    ds = load_dataset(args.dataset)
    pairs = ds.split_pairs(args.split)
    if not pairs:
        raise HarnessError(f"split {args.split!r} has no pairs")
    method = METHOD_FLAGS[args.method]
    kwargs = {}
    if method is Method.SIMI_SIGMOID:
        if not args.head:
            raise HarnessError("--method simi-sigmoid requires --head")
        kwargs["head"] = load_head(args.head)
    elif method is Method.ADDUP:
        first = next((p.det_probs for p in pairs if p.det_probs is not None), None)
        K = args.top_k or (first.shape[0] if first is not None else 10)
        N = args.num_classes or (first.shape[1] if first is not None else 1600)
        kwargs["addup"] = AddupConfig(lam=args.lam, K=K, N=N)
    elif method is Method.BOOTSTRAP:
        if not args.model:
            raise HarnessError("--method bootstrap requires --model (a checkpoint directory)")
        kwargs["model"], _ = load_checkpoint(args.model)
    scores = score_pairs(pairs, method, **kwargs)
    save_scores(scores, out / "scores.jsonl")
    log.info("scored %d pairs with %s", len(scores), method.value)
    return ["scores.jsonl"]


def _train_order(args, train_pairs) -> Curriculum:
    aligned = None
    if args.baseline in ("none", "anti"):
        if not args.scores:
            raise HarnessError("--scores is required unless --baseline is vanilla or random")
        by_id = {s.pair_id: s for s in load_scores(args.scores)}
        missing = [p.pair_id for p in train_pairs if p.pair_id not in by_id]
        if missing:
            raise HarnessError(f"scores are missing {len(missing)} training pairs, e.g. pair {missing[0]}")
        aligned = [by_id[p.pair_id] for p in train_pairs]
    return baseline_curriculum(args.baseline, aligned, len(train_pairs), args.buckets, args.seed)


def cmd_train(args, out: Path) -> list[str]:
    ds = load_dataset(args.dataset)
    train = ds.split_pairs("train")
    if not train:
        raise HarnessError("dataset has no training pairs")
    curr = _train_order(args, train)
    lc = LearnerConfig(lr=args.lr, batch_size=args.batch_size, seed=args.seed, E=args.embed_dim)
    sc = ScheduleConfig(
        max_epochs=args.max_epochs,
        patience=args.patience,
        min_delta=args.min_delta,
        seed=args.seed,
        metric=args.metric,
        strict_termination=args.strict_termination,
    )
    model, report = run_babystep(ds, curr, lc, sc)
    save_checkpoint(model, out / "checkpoint", vocab=ds.vocab)
    _write_json(out / "train_report.json", report.to_json())
    _write_json(out / "order.json", {"L": curr.L, "order": [train[i].pair_id for i in curr.order]})
    log.info("best %s %.4f at epoch %d (%s)", sc.metric, report.best_metric, report.best_epoch, report.termination)
    return ["checkpoint/manifest.json", "train_report.json", "order.json"]


def cmd_eval(args, out: Path) -> list[str]:
    model, _ = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.dataset)
    cands = decode_split(model, ds, args.split)
    report = evaluate(cands, split_references(ds, cands))
    obj = report.to_json()
    if not args.per_example:
        obj["per_example"] = []
    _write_json(out / "metric_report.json", obj)
    _write_candidates(out / "candidates.jsonl", cands)
    _write_references(out / "references.jsonl", split_references(ds, cands))
    log.info("bleu4 %.4f cider %.4f on %d images", report.corpus["bleu4"], report.corpus["cider"], len(cands))
    return ["metric_report.json", "candidates.jsonl", "references.jsonl"]


def _write_references(path: Path, refs: dict[int, list[list[int]]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i in sorted(refs):
            fh.write(json.dumps({"ref_image_id": i, "refs": refs[i]}) + "\n")


def _load_refs(path) -> dict[int, list[list[int]]]:
    return {i: [strip_special(r) for r in rs] for i, rs in load_references(path).items()}


def cmd_compare(args, out: Path) -> list[str]:
    a, b = load_candidates(args.cands_a), load_candidates(args.cands_b)
    refs = _load_refs(args.refs)
    res = paired_bootstrap_test(
        a, b, refs, n_resamples=args.resamples, resample_size=args.size, seed=args.seed, threads=args.threads
    )
    _write_json(out / "significance.json", res.to_json())
    log.info("p-values %s", res.p_value)
    return ["significance.json"]


def cmd_analyze(args, out: Path) -> list[str]:
    if args.mode == "divide":
        if not args.per_example:
            raise HarnessError("--mode divide requires --per-example (a metric report with per-example scores)")
        rep = MetricReport.from_json(json.loads(Path(args.per_example).read_text()))
        if not rep.per_example:
            raise HarnessError(f"{args.per_example} has no per-example scores; re-run eval with --per-example")
        levels = divide_by_difficulty({e["image_id"]: e["bleu4"] for e in rep.per_example}, args.levels)
        result = {"levels": levels, "sizes": [len(lv) for lv in levels], "systems": {}}
        if args.cands:
            if not args.refs:
                raise HarnessError("--cands needs --refs")
            refs = _load_refs(args.refs)
            for spec in args.cands:
                name, _, path = spec.partition("=")
                if not path:
                    raise HarnessError(f"--cands expects NAME=PATH, got {spec!r}")
                result["systems"][name] = evaluate_levels(load_candidates(path), refs, levels)
        _write_json(out / "levels.json", result)
        return ["levels.json"]
    if args.mode == "dispersion":
        if not args.scores or len(args.scores) < 2:
            raise HarnessError("--mode dispersion needs at least two --scores tables")
        tables = []
        for path in args.scores:
            scores = load_scores(path)
            if not scores:
                raise HarnessError(f"{path}: empty score table")
            tables.append((scores[0].method.value, [s.difficulty for s in scores]))
        names = [t[0] for t in tables]
        if len(set(names)) != len(names):
            tables = [(f"{m}#{k}", s) for k, (m, s) in enumerate(tables)]
        ranked = compare_dispersion(tables)
        written = ["dispersion.json"]
        _write_json(out / "dispersion.json", {"ranking": [e.__dict__ for e in ranked]})
        for e in ranked:
            fname = f"hist_{e.method.replace('#', '_')}.csv"
            (out / fname).write_text(histogram_csv(e))
            written.append(fname)
        return written
    if args.mode == "cross":
        if not (args.checkpoint and args.dataset):
            raise HarnessError("--mode cross requires --checkpoint and --dataset")
        model, vocab = load_checkpoint(args.checkpoint)
        if vocab is None:
            raise HarnessError("checkpoint manifest carries no vocabulary; cannot re-encode references")
        rep = cross_dataset_eval(model, vocab, load_dataset(args.dataset), args.split)
        _write_json(out / "metric_report.json", rep.to_json())
        return ["metric_report.json"]
    raise HarnessError(f"unknown mode {args.mode}")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out-dir", default="out", help="directory for every output file")
    common.add_argument("--threads", type=int, default=1, help="worker bound for bootstrap replicates")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="capcurric", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    g.add_argument("--n-pairs", type=int, default=2000)
    g.add_argument("--feature-dim", type=int, default=16)
    g.add_argument("--vocab-size", type=int, default=50)
    g.add_argument("--noise-schedule", default="linear", choices=["linear", "uniform", "beta", "zero"])
    g.add_argument("--noise-max", type=float, default=0.8)
    g.add_argument("--valid-images", type=int, default=300)
    g.add_argument("--test-images", type=int, default=200)
    g.add_argument("--name", default="synthetic")

    s = sub.add_parser("score", parents=[common], help="score pair difficulty")
    s.add_argument("--dataset", required=True)
    s.add_argument("--method", required=True, choices=sorted(METHOD_FLAGS))
    s.add_argument("--lambda", dest="lam", type=float, default=0.6)
    s.add_argument("--top-k", type=int, default=None)
    s.add_argument("--num-classes", type=int, default=None)
    s.add_argument("--head", help="affine head as a 1 x (D+1) raw matrix, bias last")
    s.add_argument("--model", help="checkpoint directory for bootstrap scoring")
    s.add_argument("--split", default="train")

    t = sub.add_parser("train", parents=[common], help="train under a Baby Step schedule")
    t.add_argument("--dataset", required=True)
    t.add_argument("--scores")
    t.add_argument("--buckets", type=int, default=5)
    t.add_argument("--patience", type=int, default=3)
    t.add_argument("--min-delta", type=float, default=0.0)
    t.add_argument("--max-epochs", type=int, default=120)
    t.add_argument("--strict-termination", action="store_true")
    t.add_argument("--baseline", choices=BASELINES, default="none")
    t.add_argument("--metric", choices=["cider", "bleu4"], default="cider")
    t.add_argument("--lr", type=float, default=3e-4)
    t.add_argument("--batch-size", type=int, default=10)
    t.add_argument("--embed-dim", type=int, default=16)

    e = sub.add_parser("eval", parents=[common], help="decode a split and score it")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--per-example", action="store_true")

    c = sub.add_parser("compare", parents=[common], help="paired bootstrap significance test")
    c.add_argument("--cands-a", required=True)
    c.add_argument("--cands-b", required=True)
    c.add_argument("--refs", required=True, help="JSON-lines file with reference lines")
    c.add_argument("--resamples", type=int, default=1000)
    c.add_argument("--size", type=int, default=None, help="images per resample (default: all)")

    a = sub.add_parser("analyze", parents=[common], help="divided-set, dispersion or cross-dataset analysis")
    a.add_argument("--mode", required=True, choices=["divide", "dispersion", "cross"])
    a.add_argument("--per-example", help="metric report of the vanilla model (divide)")
    a.add_argument("--levels", type=int, default=4)
    a.add_argument("--cands", nargs="*", help="NAME=PATH candidate files scored per level (divide)")
    a.add_argument("--refs", help="references file (divide)")
    a.add_argument("--scores", nargs="*", help="score tables (dispersion)")
    a.add_argument("--checkpoint", help="checkpoint directory (cross)")
    a.add_argument("--dataset", help="foreign dataset (cross)")
    a.add_argument("--split", default="test")
    return p


COMMANDS = {
    "generate": cmd_generate,
    "score": cmd_score,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "analyze": cmd_analyze,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = COMMANDS[args.command](args, out)
        config = {k: v for k, v in vars(args).items() if k != "verbose"}
        _write_json(
            out / "manifest.json",
            {
                "command": args.command,
                "config": config,
                "outputs": written,
                "version": __version__,
                "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            },
        )
    except HarnessError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
