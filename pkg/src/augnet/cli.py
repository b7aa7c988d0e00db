"""Command-line entry point: the full train / embed / evaluate workflow.

One executable with subcommands (augment, train, embed, retrieve,
eval-pairs, cluster, probe, map, project) over the binary formats in
`augnet.store`. Machine-readable results go to stdout as JSON or TSV;
progress goes to stderr. Exit codes: 0 success, 1 usage error, 2 data error.

Only the standard library is imported at module level; numeric modules load
inside the handlers so `--threads` can cap the BLAS thread pools first.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

__all__ = ["main"]


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage problems; the documented contract is 1
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _progress(msg: str):
    print(msg, file=sys.stderr, flush=True)


def _k_list(text: str) -> list[int]:
    try:
        ks = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad k list {text!r}") from None
    if not ks or any(k < 1 for k in ks):
        raise argparse.ArgumentTypeError(f"bad k list {text!r}")
    return ks


def _load_run_config(args):
    from . import store

    if getattr(args, "config", None):
        cfg = store.parse_config(Path(args.config).read_text(encoding="utf-8"))
    else:
        cfg = store.default_config()
    return _apply_overrides(cfg, args)


def _apply_overrides(cfg, args):
    from dataclasses import replace

    train_kw = {}
    if getattr(args, "loss", None):
        train_kw["loss_kind"] = args.loss
    if getattr(args, "n", None) is not None:
        train_kw["n_sources_per_batch"] = args.n
    if getattr(args, "m", None) is not None:
        train_kw["augments_per_source"] = args.m
    if getattr(args, "steps", None) is not None:
        train_kw["steps"] = args.steps
    if getattr(args, "seed", None) is not None:
        train_kw["seed"] = args.seed
    if not train_kw:
        return cfg
    return replace(cfg, train=replace(cfg.train, **train_kw))


def _report(protocol: str, settings: dict, metrics: dict, seed, out_path=None) -> int:
    doc = {"protocol": protocol, "settings": settings, "metrics": metrics, "seed": seed}
    text = json.dumps(doc, indent=2, sort_keys=True)
    print(text)
    if out_path:
        Path(out_path).write_text(text + "\n", encoding="utf-8")
    return 0


def _load_labels(path, ids):
    """Labels file: JSON list aligned with the id order, or an object keyed
    by id (JSON object keys are strings; integer ids are matched by value)."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(doc, list):
        if len(doc) != len(ids):
            raise ValueError(f"{path}: {len(doc)} labels for {len(ids)} items")
        return [int(v) for v in doc]
    if isinstance(doc, dict):
        table = {str(k): v for k, v in doc.items()}
        out = []
        for id_ in ids:
            key = str(id_)
            if key not in table:
                raise ValueError(f"{path}: no label for id {id_!r}")
            out.append(int(table[key]))
        return out
    raise ValueError(f"{path}: labels must be a JSON list or object")


# ---------------------------------------------------------------------------
# subcommand handlers


def _cmd_augment(args) -> int:
    from . import store
    from .imaging import RngStream, augment_once

    cfg = _load_run_config(args)
    images = store.load_dataset(args.data)
    if not images:
        raise ValueError(f"{args.data}: empty dataset")
    count = args.n if args.n is not None else len(images)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    root = RngStream(args.seed or 0)
    for i in range(count):
        img = augment_once(images[i % len(images)], cfg.train.augment, root.derive(i))
        store.save_image(img, out_dir / f"{i:05d}.png")
    _progress(f"wrote {count} augmented images to {out_dir}")
    return 0


def _cmd_train(args) -> int:
    from . import store
    from .encoder import train

    cfg = _load_run_config(args)
    images = store.load_dataset(args.data)
    _progress(
        f"training: {cfg.train.steps} steps, loss={cfg.train.loss_kind}, "
        f"N={cfg.train.n_sources_per_batch}, M={cfg.train.augments_per_source}"
    )
    ckpt_dir = None
    if cfg.train.checkpoint_every > 0:
        ckpt_dir = str(args.out) + ".steps"
        Path(ckpt_dir).mkdir(parents=True, exist_ok=True)
    state = train(
        images, cfg.train, cfg.spec, log_stream=sys.stdout, checkpoint_dir=ckpt_dir
    )
    store.save_checkpoint(state, args.out)
    _progress(f"checkpoint written to {args.out}")
    return 0


def _cmd_embed(args) -> int:
    from . import store
    from .encoder import embed

    state = store.load_checkpoint(args.ckpt)
    ids, images = store.load_dataset_with_ids(args.data)
    if not images:
        raise ValueError(f"{args.data}: empty dataset")
    vecs = embed(state, images, args.short_side)
    store.save_embeddings(ids, vecs, args.out)
    _progress(f"embedded {len(ids)} images -> {args.out}")
    return 0


def _match_query_id(raw: str, ids):
    if raw in ids:
        return raw
    try:
        as_int = int(raw)
    except ValueError:
        as_int = None
    if as_int is not None and as_int in ids:
        return as_int
    raise ValueError(f"query id {raw!r} not found in store")


def _cmd_retrieve(args) -> int:
    from . import store
    from .evalkit import knn

    index = store.load_embeddings(args.store)
    qid = _match_query_id(args.query, set(index.ids))
    pos = index.ids.index(qid)
    result = knn(index, index.vectors[pos], args.k, exclude=qid)
    for rank, (nid, dist) in enumerate(
        zip(result.neighbor_ids, result.distances), start=1
    ):
        print(f"{rank}\t{nid}\t{dist:.9e}")
    return 0


def _cmd_eval_pairs(args) -> int:
    from . import store
    from .evalkit import pair_retrieval_eval

    cfg = _load_run_config(args)
    state = store.load_checkpoint(args.ckpt)
    images = store.load_dataset(args.data)
    seed = args.seed or 0
    acc = pair_retrieval_eval(
        state, images, cfg.train.augment, args.k, seed, short_side=args.short_side
    )
    metrics = {f"top-{k}": acc[k] for k in sorted(acc)}
    settings = {
        "n_sources": len(images), "k_list": sorted(acc),
        "short_side": args.short_side, "checkpoint": str(args.ckpt),
    }
    return _report("pair-retrieval", settings, metrics, seed, args.out)


def _cmd_cluster(args) -> int:
    from . import store
    from .evalkit import hungarian_accuracy, kmeans

    index = store.load_embeddings(args.store)
    seed = args.seed or 0
    result = kmeans(index.vectors, args.k, seed, restarts=args.restarts)
    metrics = {"inertia": result.inertia}
    if args.labels:
        truth = _load_labels(args.labels, index.ids)
        metrics["accuracy"] = hungarian_accuracy(result.labels, truth)
    doc = {
        "protocol": "cluster",
        "settings": {"k": args.k, "restarts": args.restarts, "store": str(args.store)},
        "metrics": metrics,
        "seed": seed,
        "assignment": {str(i): int(l) for i, l in zip(index.ids, result.labels)},
    }
    text = json.dumps(doc, indent=2, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    return 0


def _cmd_probe(args) -> int:
    from . import store
    from .encoder import embed, extract_features
    from .evalkit import ProbeSpec, train_probe

    state = store.load_checkpoint(args.ckpt)
    ids, images = store.load_dataset_with_ids(args.data)
    if not images:
        raise ValueError(f"{args.data}: empty dataset")
    labels = _load_labels(args.labels, ids)
    if args.tap == 0:
        feats = embed(state, images, args.short_side or state.spec.in_side)
        source = "embedding"
    else:
        feats = extract_features(state, images, args.tap)
        source = f"tap{args.tap}"
    seed = args.seed or 0
    spec = ProbeSpec(
        kind=args.kind, n_classes=max(labels) + 1, epochs=args.epochs, seed=seed
    )
    acc = train_probe(feats, labels, spec)
    settings = {
        "features": source, "kind": args.kind, "epochs": args.epochs,
        "n_samples": len(labels), "checkpoint": str(args.ckpt),
    }
    return _report("probe", settings, {"accuracy": acc}, seed, args.out)


def _cmd_map(args) -> int:
    from . import store
    from .evalkit import mean_average_precision

    index = store.load_embeddings(args.store)
    doc = json.loads(Path(args.relevance).read_text(encoding="utf-8"))
    if not isinstance(doc, dict):
        raise ValueError(f"{args.relevance}: relevance file must be a JSON object")
    ids = set(index.ids)
    queries = []
    relevance = {}
    for raw_q, rel in doc.items():
        q = _match_query_id(raw_q, ids)
        if not isinstance(rel, list):
            raise ValueError(f"{args.relevance}: relevance of {raw_q!r} must be a list")
        relevance[q] = [_match_query_id(str(r), ids) for r in rel]
        queries.append(q)
    value = mean_average_precision(index, queries, relevance)
    settings = {"n_queries": len(queries), "store": str(args.store)}
    return _report("map", settings, {"mAP": value}, None, args.out)


def _cmd_project(args) -> int:
    from . import store
    from .evalkit import pca_project

    index = store.load_embeddings(args.store)
    xy = pca_project(index.vectors)
    lines = [
        f"{id_}\t{x:.9e}\t{y:.9e}" for id_, (x, y) in zip(index.ids, xy)
    ]
    text = "\n".join(lines)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    return 0


# ---------------------------------------------------------------------------
# parser assembly


def _build_parser() -> _Parser:
    parser = _Parser(
        prog="augnet",
        description="Self-supervised image embeddings from augmentation batches.",
    )
    parser.add_argument(
        "--threads", type=int, default=None,
        help="cap BLAS/OpenMP worker threads (default: library choice)",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    def common(p, *, seed=True, config=True, out_required=False, out=True):
        if seed:
            p.add_argument("--seed", type=int, default=None)
        if config:
            p.add_argument("--config", default=None, help="JSON run config path")
        if out:
            p.add_argument("--out", required=out_required, default=None)

    p = sub.add_parser("augment", help="write augmented samples as PNG files")
    p.add_argument("data", help="dataset directory or packed file")
    p.add_argument("--n", type=int, default=None, help="number of samples")
    common(p, out_required=True)
    p.set_defaults(func=_cmd_augment)

    p = sub.add_parser("train", help="train an encoder, write a checkpoint")
    p.add_argument("data")
    p.add_argument("--loss", choices=["softmax", "contrast"], default=None)
    p.add_argument("--n", type=int, default=None, help="sources per batch")
    p.add_argument("--m", type=int, default=None, help="augmentations per source")
    p.add_argument("--steps", type=int, default=None)
    common(p, out_required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("embed", help="embed a dataset into an embedding store")
    p.add_argument("ckpt")
    p.add_argument("data")
    p.add_argument("--short-side", type=int, default=370)
    common(p, config=False, seed=False, out_required=True)
    p.set_defaults(func=_cmd_embed)

    p = sub.add_parser("retrieve", help="rank neighbors of a stored item")
    p.add_argument("store")
    p.add_argument("query", help="id of the query item")
    p.add_argument("--k", type=int, default=10)
    common(p, config=False, seed=False, out=False)
    p.set_defaults(func=_cmd_retrieve)

    p = sub.add_parser("eval-pairs", help="pair-retrieval accuracy report")
    p.add_argument("ckpt")
    p.add_argument("data")
    p.add_argument("--k", type=_k_list, default=[1, 10], help="comma-separated ks")
    p.add_argument("--short-side", type=int, default=None)
    common(p)
    p.set_defaults(func=_cmd_eval_pairs)

    p = sub.add_parser("cluster", help="k-means over an embedding store")
    p.add_argument("store")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--labels", default=None, help="JSON labels for accuracy")
    common(p, config=False)
    p.set_defaults(func=_cmd_cluster)

    p = sub.add_parser("probe", help="train a classifier probe on frozen features")
    p.add_argument("ckpt")
    p.add_argument("data")
    p.add_argument("--labels", required=True)
    p.add_argument("--tap", type=int, default=0, help="block tap, 0 = embedding")
    p.add_argument("--kind", choices=["linear", "nonlinear"], default="linear")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--short-side", type=int, default=None)
    common(p, config=False)
    p.set_defaults(func=_cmd_probe)

    p = sub.add_parser("map", help="mean average precision over a store")
    p.add_argument("store")
    p.add_argument("relevance", help="JSON file: query id -> relevant id list")
    common(p, config=False, seed=False)
    p.set_defaults(func=_cmd_map)

    p = sub.add_parser("project", help="2-D PCA projection of a store")
    p.add_argument("store")
    common(p, config=False, seed=False)
    p.set_defaults(func=_cmd_project)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print("augnet: error: --threads must be >= 1", file=sys.stderr)
            return 1
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        return args.func(args)
    except Exception as e:  # map domain failures to the documented exit code
        from .store import StoreError

        if isinstance(e, (StoreError, ValueError, KeyError, OSError,
                          json.JSONDecodeError)):
            print(f"augnet: error: {e}", file=sys.stderr)
            return 2
        raise


if __name__ == "__main__":
    sys.exit(main())
