"""Synthetic end-to-end fixtures and the ``demo`` pipeline run.

Everything here is generated from a seed, so two runs with the same seed
produce byte-identical artifacts. Paths written into artifacts are relative to
the output directory.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from . import augment, decode, metrics
from .config import PipelineConfig
from .embed_store import ingest, write_jsonl, write_store
from .index import build_ivf, read_ivf, write_ivf
from .retriever import (
    MappedCaptions,
    RetrievalConfig,
    Retriever,
    fuse_query,
    load_caption_corpus,
    load_memory_metadata,
    write_caption_corpus,
    write_memory_metadata,
    write_retrievals,
)

TOPICS = [
    ("dog", "running", "park", (200, 120, 60)),
    ("cat", "sleeping", "sofa", (120, 120, 120)),
    ("train", "arriving", "station", (40, 60, 160)),
    ("pizza", "sitting", "table", (220, 60, 40)),
    ("surfer", "riding", "wave", (20, 150, 200)),
    ("bus", "parked", "street", (230, 200, 30)),
    ("horse", "grazing", "field", (60, 170, 60)),
    ("kite", "flying", "beach", (240, 160, 200)),
]
ADJECTIVES = ["small", "large", "brown", "white", "old", "young", "red", "busy"]
ANSWERS = ["yes", "no", "0", "1", "2", "3", "4", "red", "blue", "green", "white", "brown",
           "dog", "cat", "train", "pizza", "surfer", "bus", "horse", "kite",
           "two dogs", "park", "beach", "street", "table"]

DIM = 32
MEMORY_SIZE = 400
SAMPLES = 24


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _image(rng: np.random.Generator, color: tuple[int, int, int], width: int, height: int) -> augment.RgbImage:
    base = np.array(color, dtype=np.int16)
    noise = rng.integers(-25, 26, size=(height, width, 3))
    px = np.clip(base + noise, 0, 255).astype(np.uint8)
    return augment.RgbImage(width, height, px)


def _tsv(path: Path, header: list[str], rows: list[list[str]]) -> None:
    path.write_text(augment.serialize_rows(header, rows), encoding="utf-8")


def _dump_json(obj: Any, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def make_fixtures(root: Union[str, Path], seed: int = 0) -> dict[str, str]:
    """Write the synthetic memory, caption corpus, datasets and query embeddings.

    Returns a name -> relative path map of what was written.
    """
    root = Path(root)
    fx = root / "fixtures"
    (fx / "memory_images").mkdir(parents=True, exist_ok=True)
    (fx / "query_images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    centers = [_unit(rng.normal(size=DIM)) for _ in TOPICS]

    memory_vecs: list[tuple[str, np.ndarray]] = []
    meta: dict[str, tuple[str, str]] = {}
    corpus: dict[str, MappedCaptions] = {}
    for i in range(MEMORY_SIZE):
        mid = f"m{i:04d}"
        t = i % len(TOPICS)
        noun, verb, place, color = TOPICS[t]
        if i % 37 == 5 and i >= len(TOPICS):
            # Near-duplicate of the previous same-topic item.
            vec = memory_vecs[-len(TOPICS)][1] + rng.normal(scale=0.003, size=DIM)
        else:
            vec = centers[t] + rng.normal(scale=0.35, size=DIM)
        memory_vecs.append((mid, _unit(vec)))
        image_ref = ""
        if rng.random() > 0.08:  # some raw image downloads "failed"
            image_ref = f"fixtures/memory_images/{mid}.png"
            w, h = int(rng.integers(6, 13)), int(rng.integers(5, 10))
            augment.save_png(_image(rng, color, w, h), root / image_ref)
        meta[mid] = (image_ref, f"IMG_{int(rng.integers(1000, 9999))} {noun} {place} stock photo buy now")
        if rng.random() < 0.75:
            adj = ADJECTIVES[int(rng.integers(len(ADJECTIVES)))]
            caps = [
                f"a {adj} {noun} {verb} in the {place}",
                f"a {noun} {verb} near a {place}",
                f"the {noun} is {verb} at the {place}",
            ]
            corpus[mid] = MappedCaptions.from_captions(caps)

    write_jsonl(memory_vecs, fx / "memory.jsonl")
    write_memory_metadata(meta, fx / "memory_meta.tsv")
    write_caption_corpus(corpus, fx / "caption_map.tsv")

    cap_rows, vqa_rows = [], []
    cap_q, vqa_q, vqa_text = [], [], []
    vqa_eval: list[dict] = []
    for j in range(SAMPLES):
        t = int(rng.integers(len(TOPICS)))
        noun, verb, place, color = TOPICS[t]
        ref = f"fixtures/query_images/c{j:03d}.png"
        augment.save_png(_image(rng, color, 10, 8), root / ref)
        cap_rows.append([f"c{j:03d}", ref, f"a {noun} {verb} in a {place}"])
        cap_q.append((f"c{j:03d}", _unit(centers[t] + rng.normal(scale=0.3, size=DIM))))

        t2 = int(rng.integers(len(TOPICS)))
        noun2, _, place2, color2 = TOPICS[t2]
        ref2 = f"fixtures/query_images/v{j:03d}.png"
        augment.save_png(_image(rng, color2, 10, 8), root / ref2)
        kind = ("yes/no", "number", "other")[j % 3]
        if kind == "yes/no":
            q, a = f"Is there a {noun2} in the picture?", "yes" if rng.random() < 0.7 else "no"
        elif kind == "number":
            q, a = f"How many {noun2}s are there?", str(int(rng.integers(0, 5)))
        else:
            q, a = "What animal or object is shown?", noun2
        vqa_rows.append([f"v{j:03d}", ref2, q, a])
        vqa_q.append((f"v{j:03d}", _unit(centers[t2] + rng.normal(scale=0.3, size=DIM))))
        vqa_text.append((f"v{j:03d}", _unit(centers[t2] + rng.normal(scale=0.6, size=DIM))))
        noise = [ANSWERS[int(rng.integers(len(ANSWERS)))] for _ in range(10)]
        n_match = int(rng.integers(2, 11))
        vqa_eval.append({"id": f"v{j:03d}", "answer": a, "question_type": kind,
                         "annotator_answers": [a] * n_match + noise[n_match:]})

    _tsv(fx / "captioning.tsv", list(augment.RAW_COLUMNS["captioning"]), cap_rows)
    _tsv(fx / "vqa.tsv", list(augment.RAW_COLUMNS["vqa"]), vqa_rows)
    write_jsonl(cap_q, fx / "captioning_queries.jsonl")
    write_jsonl(vqa_q, fx / "vqa_queries.jsonl")
    write_jsonl(vqa_text, fx / "vqa_text_queries.jsonl")
    with open(fx / "vqa_annotations.jsonl", "w", encoding="utf-8") as fh:
        for row in vqa_eval:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    (fx / "answers.txt").write_text("\n".join(ANSWERS) + "\n", encoding="utf-8")
    return {
        "memory": "fixtures/memory.jsonl",
        "memory_meta": "fixtures/memory_meta.tsv",
        "caption_map": "fixtures/caption_map.tsv",
        "captioning": "fixtures/captioning.tsv",
        "vqa": "fixtures/vqa.tsv",
        "captioning_queries": "fixtures/captioning_queries.jsonl",
        "vqa_queries": "fixtures/vqa_queries.jsonl",
        "vqa_text_queries": "fixtures/vqa_text_queries.jsonl",
        "vqa_annotations": "fixtures/vqa_annotations.jsonl",
        "answers": "fixtures/answers.txt",
    }


def _scorer_fixture(sample_id: str, favored: str, context: str, rng: np.random.Generator) -> dict:
    """Table scorer leaning towards ``favored``: 0.6 on each of its tokens, 0.7 on stopping after it."""
    words = favored.split()
    table: dict[str, dict[str, float]] = {}
    for i, w in enumerate(words):
        table[" ".join(words[:i])] = {w: 0.6}
    table[favored] = {"</s>": 0.7}
    distractor = ANSWERS[int(rng.integers(len(ANSWERS)))].split()[0]
    if distractor not in table[""]:
        table[""][distractor] = 0.2
    return {"id": sample_id, "context": context, "table": table}


def run_demo(out: Union[str, Path], seed: int = 0, config: Optional[PipelineConfig] = None) -> dict[str, str]:
    """Generate fixtures and run ingest -> IVF -> retrieve -> augment -> eval -> decode.

    Returns a name -> relative path map of the produced artifacts.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = config or PipelineConfig(seed=seed)
    paths = make_fixtures(out, seed)
    artifacts: dict[str, str] = {}

    store = ingest(out / paths["memory"], normalize=True, dimension=DIM)
    write_store(store, out / "memory.rvem")
    nlist = min(cfg.nlist, store.count)
    index = build_ivf(store, nlist=nlist, seed=cfg.seed)
    write_ivf(index, out / "memory.rvix")
    index = read_ivf(out / "memory.rvix")
    artifacts.update(store="memory.rvem", index="memory.rvix")

    retriever = Retriever(
        store,
        load_memory_metadata(out / paths["memory_meta"]),
        load_caption_corpus(out / paths["caption_map"]),
        index,
        RetrievalConfig(backend="ivf", top_k=cfg.top_k, nprobe=min(max(cfg.nprobe, 2), nlist),
                        dedup_threshold=cfg.dedup_threshold),
    )

    def image_loader(ref: str) -> Optional[augment.RgbImage]:
        p = out / ref
        return augment.load_png(p) if ref and p.is_file() else None

    retriever.image_checker = lambda e: image_loader(e.image_ref) is not None

    cap_queries = ingest(out / paths["captioning_queries"], normalize=True, dimension=DIM)
    cap_ret = [retriever.retrieve(v, query_id=i) for i, v in zip(cap_queries.ids, cap_queries.vectors)]
    vqa_img = ingest(out / paths["vqa_queries"], normalize=True, dimension=DIM)
    vqa_txt = ingest(out / paths["vqa_text_queries"], normalize=True, dimension=DIM)
    vqa_ret = [
        retriever.retrieve(fuse_query(v, vqa_txt.vector(i), normalized=True), query_id=i)
        for i, v in zip(vqa_img.ids, vqa_img.vectors)
    ]
    write_retrievals(cap_ret, out / "retrievals_captioning.jsonl")
    write_retrievals(vqa_ret, out / "retrievals_vqa.jsonl")
    artifacts.update(retrievals_captioning="retrievals_captioning.jsonl", retrievals_vqa="retrievals_vqa.jsonl")

    aug_cfg = augment.AugmentConfig(max_source_length=cfg.max_source_length, separator_token=cfg.separator)
    cap_ds = augment.read_dataset(out / paths["captioning"], "captioning")
    vqa_ds = augment.read_dataset(out / paths["vqa"], "vqa")
    by_id_cap = {r.query_id: r for r in cap_ret}
    by_id_vqa = {r.query_id: r for r in vqa_ret}
    reports = {}
    runs = [
        ("captioning", "top_caption_all_captions", cap_ds, by_id_cap),
        ("captioning", "image_top_caption_all_captions", cap_ds, by_id_cap),
        ("vqa", "top_caption_all_captions", vqa_ds, by_id_vqa),
    ]
    for task, mode_name, ds, rets in runs:
        mode = augment.get_mode(task, mode_name)
        name = f"augmented_{task}_{mode_name}"
        image_dir = out / f"{name}_images"
        if mode.use_image:
            image_dir.mkdir(exist_ok=True)
        with open(out / f"{name}.tsv", "w", newline="", encoding="utf-8") as fh:
            rep = augment.emit_dataset(ds, rets, mode, fh, aug_cfg, image_loader,
                                       image_dir if mode.use_image else None, image_ref_base=out)
        augment.write_report(rep, out / f"{name}.report.json")
        reports[name] = rep.to_dict()
        artifacts[name] = f"{name}.tsv"

    # Retrieval-only captioning baseline: the retrieved top caption is the prediction.
    cap_pairs = []
    refs_by_id = {x["sample_id"]: x["caption"] for x in cap_ds.rows}
    for r in cap_ret:
        src = r.caption_source
        pred = src.mapped.top_caption if src is not None and src.mapped is not None else ""
        ref = refs_by_id[r.query_id]
        noun = ref.split()[1]
        cap_pairs.append((pred, [ref, ref.replace(" in a ", " in the "), f"there is a {noun} in this image"]))
    cap_report = metrics.caption_report(metrics.EvalCorpus.from_texts(cap_pairs))
    _dump_json(cap_report, out / "eval_captioning.json")

    rng = np.random.default_rng(seed + 1)
    answers = decode.read_answers(out / paths["answers"])
    annotations = [json.loads(line) for line in (out / paths["vqa_annotations"]).read_text().splitlines()]
    fixtures = []
    for ann, r in zip(annotations, vqa_ret):
        favored = ann["answer"] if rng.random() < 0.7 else answers[int(rng.integers(len(answers)))]
        src = r.caption_source
        context = src.mapped.top_caption if src is not None and src.mapped is not None else ""
        fixtures.append(_scorer_fixture(ann["id"], favored, context, rng))
    with open(out / "decode_scorers.jsonl", "w", encoding="utf-8") as fh:
        for f in fixtures:
            fh.write(json.dumps(f, sort_keys=True) + "\n")
    decoded = decode.decode_fixtures(answers, fixtures, beam=cfg.beam)
    with open(out / "decode.jsonl", "w", encoding="utf-8") as fh:
        for d in decoded:
            fh.write(json.dumps(d, sort_keys=True) + "\n")
    artifacts["decode"] = "decode.jsonl"

    vqa_items = [
        metrics.VqaItem(d["ranked"][0]["answer"], ann["annotator_answers"], ann["question_type"])
        for d, ann in zip(decoded, annotations)
    ]
    _dump_json(metrics.vqa_report(vqa_items), out / "eval_vqa.json")
    artifacts.update(eval_captioning="eval_captioning.json", eval_vqa="eval_vqa.json")

    summary = {"seed": seed, "config": cfg.to_dict(), "artifacts": artifacts, "augment_reports": reports,
               "ivf": {"nlist": index.nlist, "empty_clusters": index.empty_clusters}}
    _dump_json(summary, out / "demo_summary.json")
    return artifacts
