"""Command-line entry point.

Subcommands are thin wrappers over the library modules. Failures print one
JSON line on stderr (``{"error": ..., "kind": "usage"|"pipeline"}``) and exit
2 for usage problems or 1 for pipeline errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

from . import augment, decode, demo, metrics
from .config import ConfigError, PipelineConfig, resolve
from .embed_store import DEFAULT_DIMENSION, ingest, write_store
from .errors import RavenError
from .index import build_ivf, read_ivf, search_batch, write_ivf
from .retriever import (
    RetrievalConfig,
    Retriever,
    fuse_query,
    load_caption_corpus,
    load_memory_metadata,
    write_retrievals,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(message)


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="TOML key = value file; explicit flags win")
    p.add_argument("--threads", type=int, help="cap on internal parallelism")
    p.add_argument("--seed", type=int)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="raven", description="Retrieval augmentation toolkit for vision-language datasets")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    idx = sub.add_parser("index", help="embedding stores and MIPS indexes")
    isub = idx.add_subparsers(dest="action", required=True, parser_class=_Parser)
    p = isub.add_parser("ingest", parents=[common], help="validate embeddings into a binary store")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dimension", type=int, help=f"for JSONL input (default {DEFAULT_DIMENSION})")
    p.add_argument("--no-normalize", action="store_true")

    p = isub.add_parser("build", parents=[common], help="train an IVF index over a store")
    p.add_argument("--store")
    p.add_argument("--out", required=True)
    p.add_argument("--nlist", type=int)

    p = isub.add_parser("search", parents=[common], help="top-k MIPS for a file of query embeddings")
    p.add_argument("--store")
    p.add_argument("--queries", required=True)
    p.add_argument("--index")
    p.add_argument("--backend", choices=["exact", "ivf"])
    p.add_argument("--k", dest="top_k", type=int)
    p.add_argument("--nprobe", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("retrieve", parents=[common], help="search, dedup, map captions, pick top-1")
    p.add_argument("--store")
    p.add_argument("--queries", required=True, help="image query embeddings")
    p.add_argument("--text-queries", help="optional text embeddings to average with the image queries")
    p.add_argument("--memory", required=True, help="memory metadata TSV (id, image_ref, alt_text)")
    p.add_argument("--captions", required=True, help="caption mapping TSV (id, top_caption, all_captions)")
    p.add_argument("--index")
    p.add_argument("--backend", choices=["exact", "ivf"])
    p.add_argument("--k", dest="top_k", type=int)
    p.add_argument("--nprobe", type=int)
    p.add_argument("--dedup-threshold", type=float)
    p.add_argument("--image-root", help="if given, an image_ref counts only when the file exists under it")
    p.add_argument("--out", required=True)

    p = sub.add_parser("augment", parents=[common], help="emit an augmented dataset TSV for one ablation mode")
    p.add_argument("--task", choices=list(augment.TASKS))
    p.add_argument("--dataset", required=True)
    p.add_argument("--retrievals", required=True)
    p.add_argument("--mode")
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="DatasetReport JSON path (default <out>.report.json)")
    p.add_argument("--image-root", help="directory image refs are relative to (default: dataset dir)")
    p.add_argument("--image-dir", help="where composites go (default <out>_images)")
    p.add_argument("--max-source-length", type=int)
    p.add_argument("--separator")
    p.add_argument("--context-last", action="store_true", help="put retrieved context after the prompt")
    p.add_argument("--image-modes-only-subset", action="store_true",
                   help="captioning: filter to full retrievals only in image modes")

    p = sub.add_parser("eval", parents=[common], help="BLEU@4 / CIDEr-D or VQA accuracy")
    p.add_argument("kind", choices=["captioning", "vqa"])
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("decode", parents=[common], help="trie-constrained beam search over table scorers")
    p.add_argument("--answers", required=True)
    p.add_argument("--scorers", required=True)
    p.add_argument("--beam", type=int)
    p.add_argument("--unit", choices=["word", "char"], default="word")
    p.add_argument("--length-normalize", action="store_true")
    p.add_argument("--out", required=True)

    p = sub.add_parser("demo", parents=[common], help="run the whole pipeline on synthetic fixtures")
    p.add_argument("--out", required=True)
    return parser


def _require_files(*paths: Optional[str]) -> None:
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise UsageError(f"input file not found: {p}")


def _sidecar(out: str, cfg: PipelineConfig, args: argparse.Namespace, extra: Optional[dict] = None) -> None:
    record = {
        "command": args.command,
        "action": getattr(args, "action", None),
        "config": cfg.to_dict(),
        "arguments": {k: v for k, v in sorted(vars(args).items()) if k not in ("command", "action")},
    }
    if extra:
        record.update(extra)
    Path(out + ".config.json").write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")


def _write_jsonl(rows: Sequence[dict], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n")


def _write_json(obj: Any, path: str) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _config(args: argparse.Namespace) -> PipelineConfig:
    _require_files(args.config)
    flags = {k: getattr(args, k, None) for k in PipelineConfig.__dataclass_fields__}
    for k in ("max_source_length", "separator", "dedup_threshold"):
        flags[k] = getattr(args, k, None)
    return resolve(flags, args.config)


def _store_path(cfg: PipelineConfig) -> str:
    if cfg.store is None:
        raise UsageError("no store given (--store or 'store' in the config)")
    _require_files(cfg.store)
    return cfg.store


def _load_index(args: argparse.Namespace, cfg: PipelineConfig):
    if cfg.backend != "ivf":
        if args.index is not None:
            raise UsageError("--index given but backend is 'exact' (pass --backend ivf)")
        return None
    if args.index is None:
        raise UsageError("backend 'ivf' needs --index")
    _require_files(args.index)
    index = read_ivf(args.index)
    if cfg.nprobe > index.nlist:
        raise UsageError(f"nprobe ({cfg.nprobe}) exceeds the index's nlist ({index.nlist})")
    return index


def cmd_index(args: argparse.Namespace, cfg: PipelineConfig) -> None:
    if args.action == "ingest":
        _require_files(args.input)
        store = ingest(args.input, normalize=not args.no_normalize, dimension=args.dimension)
        write_store(store, args.out)
        _sidecar(args.out, cfg, args, {"count": store.count, "dimension": store.dimension})
    elif args.action == "build":
        store = ingest(_store_path(cfg), normalize=False)
        index = build_ivf(store, cfg.nlist, cfg.seed)
        write_ivf(index, args.out)
        _sidecar(args.out, cfg, args, {"empty_clusters": index.empty_clusters, "iterations": index.iterations})
    else:
        store = ingest(_store_path(cfg), normalize=False)
        _require_files(args.queries)
        index = _load_index(args, cfg)
        queries = ingest(args.queries, normalize=store.normalized, dimension=store.dimension)
        results = search_batch(store, queries.vectors, cfg.top_k, index, cfg.nprobe, cfg.threads)
        _write_jsonl(
            [{"query_id": q, "hits": [{"id": h.id, "score": h.score} for h in hits]} for q, hits in zip(queries.ids, results)],
            args.out,
        )
        _sidecar(args.out, cfg, args)


def cmd_retrieve(args: argparse.Namespace, cfg: PipelineConfig) -> None:
    store = ingest(_store_path(cfg), normalize=False)
    _require_files(args.queries, args.text_queries, args.memory, args.captions)
    index = _load_index(args, cfg)
    retriever = Retriever(
        store,
        load_memory_metadata(args.memory),
        load_caption_corpus(args.captions),
        index,
        RetrievalConfig(cfg.backend, cfg.top_k, cfg.nprobe, cfg.dedup_threshold),
    )
    if args.image_root is not None:
        root = Path(args.image_root)
        retriever.image_checker = lambda e: bool(e.image_ref) and (root / e.image_ref).is_file()
    queries = ingest(args.queries, normalize=store.normalized, dimension=store.dimension)
    text = None
    if args.text_queries is not None:
        text = ingest(args.text_queries, normalize=store.normalized, dimension=store.dimension)
    vectors = [
        fuse_query(v, text.vector(q) if text is not None and q in text else None, store.normalized)
        for q, v in zip(queries.ids, queries.vectors)
    ]
    if cfg.threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(cfg.threads) as pool:
            results = list(pool.map(lambda qv: retriever.retrieve(qv[1], query_id=qv[0]), zip(queries.ids, vectors)))
    else:
        results = [retriever.retrieve(v, query_id=q) for q, v in zip(queries.ids, vectors)]
    write_retrievals(results, args.out)
    _sidecar(args.out, cfg, args, {"queries": len(results), "with_top1": sum(r.top1 is not None for r in results)})


def cmd_augment(args: argparse.Namespace, cfg: PipelineConfig) -> None:
    from .retriever import read_retrievals

    _require_files(args.dataset, args.retrievals)
    mode = augment.get_mode(cfg.task, cfg.mode)
    aug_cfg = augment.AugmentConfig(
        max_source_length=cfg.max_source_length,
        separator_token=cfg.separator,
        context_first=not args.context_last,
        subset_text_modes=not args.image_modes_only_subset,
    )
    dataset = augment.read_dataset(args.dataset, cfg.task)
    retrievals = read_retrievals(args.retrievals)
    root = Path(args.image_root) if args.image_root else Path(args.dataset).parent

    def loader(ref: str) -> Optional[augment.RgbImage]:
        p = root / ref
        return augment.load_png(p) if ref and p.is_file() else None

    image_dir = None
    if mode.use_image:
        image_dir = Path(args.image_dir or args.out + "_images")
        image_dir.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        report = augment.emit_dataset(dataset, retrievals, mode, fh, aug_cfg, loader, image_dir, Path(args.out).parent)
    report_path = args.report or args.out + ".report.json"
    augment.write_report(report, report_path)
    _sidecar(args.out, cfg, args, {"report": report.to_dict()})


def cmd_eval(args: argparse.Namespace, cfg: PipelineConfig) -> None:
    _require_files(args.input)
    if args.kind == "captioning":
        report = metrics.caption_report(metrics.load_caption_eval(args.input))
    else:
        report = metrics.vqa_report(metrics.load_vqa_eval(args.input))
    _write_json(report, args.out)
    _sidecar(args.out, cfg, args)


def cmd_decode(args: argparse.Namespace, cfg: PipelineConfig) -> None:
    _require_files(args.answers, args.scorers)
    answers = decode.read_answers(args.answers)
    fixtures = decode.read_fixtures(args.scorers)
    rows = decode.decode_fixtures(answers, fixtures, cfg.beam, args.unit, args.length_normalize)
    _write_jsonl(rows, args.out)
    _sidecar(args.out, cfg, args)


def cmd_demo(args: argparse.Namespace, cfg: PipelineConfig) -> None:
    artifacts = demo.run_demo(args.out, cfg.seed, cfg)
    # Relative paths only, so runs in different directories compare byte-for-byte.
    record = {"command": "demo", "config": cfg.to_dict(), "artifacts": artifacts}
    _write_json(record, str(Path(args.out) / "demo.config.json"))


COMMANDS = {
    "index": cmd_index,
    "retrieve": cmd_retrieve,
    "augment": cmd_augment,
    "eval": cmd_eval,
    "decode": cmd_decode,
    "demo": cmd_demo,
}


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": message, "kind": kind}), file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as exc:
        return _fail("usage", str(exc), 2)
    except (RavenError, OSError) as exc:
        return _fail("pipeline", str(exc), 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
