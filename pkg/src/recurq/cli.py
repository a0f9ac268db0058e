"""Command-line surface: synth, train, encode, search, eval.

Exit codes: 0 success, 2 usage or validation error, 1 internal error.
Training logs are line-delimited JSON records; evaluation output is one
metric per line so other tools can parse it without a reporting dependency.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import io as rio
from .core import DomainError, FeatureMatrix
from .index import encode_database, evaluate, search
from .synth import synth_dataset
from .train import ALL_FLAGS, HEAD_FLAGS, LabelEmbeddings, TrainConfig, train

FLAG_NAMES = {
    "hard": "hard_distortion",
    "soft": "soft_distortion",
    "joint": "joint_central",
    "triplet": "triplet",
    "margin": "adaptive_margin",
}


def _parse_flags(csv: str) -> frozenset[str]:
    flags = set()
    for name in csv.split(","):
        name = name.strip()
        if not name:
            continue
        if name in FLAG_NAMES:
            flags.add(FLAG_NAMES[name])
        elif name in ALL_FLAGS:
            flags.add(name)
        else:
            raise DomainError(f"unknown loss flag '{name}'")
    if not flags:
        raise DomainError("at least one loss flag is required")
    return frozenset(flags)


def _load_features(vec_path, label_path=None) -> FeatureMatrix:
    data = rio.read_fvecs(vec_path)
    labels = None
    multi = None
    if label_path is not None:
        sets = rio.read_labels(label_path)
        if len(sets) != data.shape[0]:
            raise DomainError("label file row count does not match vectors")
        if all(len(s) == 1 for s in sets):
            labels = np.array([next(iter(s)) for s in sets], dtype=np.int64)
        multi = sets
    return FeatureMatrix(data=data, labels=labels, multi_labels=multi)


def cmd_synth(args) -> int:
    fm = synth_dataset(args.n, args.d, args.clusters, args.spread, args.seed)
    rio.write_fvecs(fm.data, args.out)
    if args.labels:
        rio.write_labels(fm.label_sets(), args.labels)
    print(f"wrote {fm.n} vectors of dim {fm.dim} to {args.out}")
    return 0


def cmd_train(args) -> int:
    flags = _parse_flags(args.loss_flags)
    needs_stage1 = any(f in flags for f in HEAD_FLAGS)
    if needs_stage1 and args.labels is None:
        raise DomainError("triplet/margin loss flags require --labels")
    if "adaptive_margin" in flags and args.embeddings is None:
        raise DomainError("margin loss flag requires --embeddings")
    features = _load_features(args.input, args.labels)
    embeddings = None
    if args.embeddings is not None:
        embeddings = LabelEmbeddings(rio.read_fvecs(args.embeddings))
    config = TrainConfig(
        k=args.k,
        m=args.m,
        gamma=args.gamma,
        lr=args.lr,
        batch_size=args.batch_size,
        epochs_stage2=args.epochs_stage2,
        epochs_stage3=args.epochs_stage3,
        enable_stage1=needs_stage1,
        loss_flags=flags,
        seed=args.seed,
        init=args.init,
    )
    log_out = open(args.log, "w") if args.log else sys.stdout
    try:
        resolved = {k: sorted(v) if isinstance(v, frozenset) else v for k, v in vars(config).items()}
        print(json.dumps({"record": "config", **resolved}), file=log_out)
        model, log = train(features, config, embeddings)
        for record in log:
            print(json.dumps({"record": "epoch", **record}), file=log_out)
    finally:
        if args.log:
            log_out.close()
    rio.save_model(model, args.out)
    bits = model.code_bits
    print(f"saved model to {args.out} ({model.k}x{model.dim} codebook, "
          f"M={model.levels}, {bits}-bit codes)")
    return 0


def cmd_encode(args) -> int:
    model = rio.load_model(args.model)
    data = rio.read_fvecs(args.input)
    if data.shape[0] and data.shape[1] != model.dim:
        raise DomainError(f"vector dim {data.shape[1]} does not match model dim {model.dim}")
    if data.shape[0] == 0:
        data = np.empty((0, model.dim))
    db = encode_database(data, model)
    rio.save_codes(db, args.out)
    if data.shape[0]:
        from .train import distortion_losses

        report = distortion_losses(data, model)
        for m, err in enumerate(report.per_level_hard, start=1):
            print(f"level={m} mean_e_hard={err:.6f}")
    print(f"encoded {db.n} vectors to {args.out}")
    if args.reconstruct:
        from .index import _prefix_reconstructions

        recon = _prefix_reconstructions(db.codes, model, model.levels)
        rio.write_fvecs(recon, args.reconstruct)
        print(f"wrote reconstructions to {args.reconstruct}")
    return 0


def cmd_search(args) -> int:
    model = rio.load_model(args.model)
    db = rio.load_codes(args.codes, model)
    queries = rio.read_fvecs(args.queries)
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        for qi, q in enumerate(queries):
            ids, dists = search(q, db, args.topk, args.prefix_m)
            for rank, (i, dist) in enumerate(zip(ids, dists), start=1):
                print(f"query={qi} rank={rank} id={i} dist={dist:.9g}", file=out)
    finally:
        if args.out:
            out.close()
    return 0


def cmd_eval(args) -> int:
    model = rio.load_model(args.model)
    db = rio.load_codes(args.codes, model)
    queries = _load_features(args.queries, args.query_labels)
    if queries.multi_labels is None:
        raise DomainError("eval requires --query-labels")
    db_labels = rio.read_labels(args.db_labels)
    precision_at = tuple(int(v) for v in args.precision_at.split(",") if v.strip()) if args.precision_at else ()
    report = evaluate(queries, db, db_labels, args.map_cutoff, precision_at, args.prefix_m)
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        print(f"map@{args.map_cutoff}={report.map_at_r:.6f}", file=out)
        for r, p in report.precision_at_r:
            print(f"precision@{r}={p:.6f}", file=out)
    finally:
        if args.out:
            out.close()
    if args.pr_curve:
        with open(args.pr_curve, "w") as f:
            for rec, prec in report.pr_curve:
                print(f"{rec:.6f} {prec:.6f}", file=f)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="recurq", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic Gaussian-mixture dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--clusters", type=int, required=True)
    p.add_argument("--spread", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--labels")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a quantizer model")
    p.add_argument("--input", required=True)
    p.add_argument("--labels")
    p.add_argument("--embeddings")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--gamma", type=float, default=20.0)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--epochs-stage2", type=int, default=20)
    p.add_argument("--epochs-stage3", type=int, default=50)
    p.add_argument("--loss-flags", default="hard,soft,joint")
    p.add_argument("--init", choices=("random", "kmeans"), default="random")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="encode a vector file against a model")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--reconstruct")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("search", help="ADC search of queries against a code file")
    p.add_argument("--model", required=True)
    p.add_argument("--codes", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--topk", type=int, required=True)
    p.add_argument("--prefix-m", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("eval", help="retrieval-quality evaluation")
    p.add_argument("--model", required=True)
    p.add_argument("--codes", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--db-labels", required=True)
    p.add_argument("--query-labels", required=True)
    p.add_argument("--map-cutoff", type=int, required=True)
    p.add_argument("--precision-at")
    p.add_argument("--pr-curve")
    p.add_argument("--prefix-m", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DomainError, rio.FileFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
