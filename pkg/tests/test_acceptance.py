"""Acceptance suite: one test per criterion, each at its stated tolerance.

A pass/fail line per criterion is printed in the terminal summary.
"""

import csv
import io
import time
from pathlib import Path

import numpy as np
import pytest

import builders
from oracles import (
    bleu_reference,
    brute_force_mips,
    cider_d_reference,
    exhaustive_answer_scores,
    nearest_resize_loop,
    pairwise_dedup,
    vqa_loo_brute_force,
)
from raven import augment, demo
from raven.augment import AugmentConfig, RawDataset, RgbImage, build_sample, compose_input, concat_images
from raven.decode import EOS, constrained_beam_search
from raven.embed_store import EmbeddingStore, build_store
from raven.index import build_ivf, recall_at_k, search_exact, search_ivf
from raven.metrics import bleu4, cider_d, cider_d_scores, vqa_item_accuracy
from raven.retriever import RetrievalConfig, Retriever, dedup


def mips_fixtures(count=50, seed=2024):
    rng = np.random.default_rng(seed)
    sizes = np.unique(np.geomspace(10, 5000, count).astype(int))
    sizes = list(sizes) + list(rng.integers(10, 5001, size=count - len(sizes)))
    for i, n in enumerate(sizes):
        d = (8, 64, 512)[i % 3]
        vecs = rng.normal(size=(int(n), d)).astype("<f4")
        ids = [f"x{j:05d}" for j in rng.permutation(int(n))]
        store = EmbeddingStore(d, ids, vecs, normalized=False)
        yield store, rng.normal(size=d), int(rng.integers(1, 120))


@pytest.mark.criterion(1, "MIPS exactness on 50 fixtures, scores within 1e-6, under 10 s")
def test_mips_exactness():
    elapsed = 0.0
    fixtures = list(mips_fixtures())
    assert len(fixtures) == 50
    assert {s.dimension for s, _, _ in fixtures} == {8, 64, 512}
    assert min(s.count for s, _, _ in fixtures) == 10 and max(s.count for s, _, _ in fixtures) == 5000
    for store, q, k in fixtures:
        t0 = time.perf_counter()
        got = search_exact(store, q, k)
        elapsed += time.perf_counter() - t0
        want = brute_force_mips(store.ids, store.vectors, q, k)
        assert [h.id for h in got] == [i for i, _ in want]
        assert np.max(np.abs(np.array([h.score for h in got]) - [s for _, s in want])) <= 1e-6
    assert elapsed < 10.0


@pytest.mark.criterion(2, "IVF with nprobe = nlist equals exact; 4-blob 10k recall@10 at nprobe=1 >= 0.9")
def test_ivf_consistency():
    rng = np.random.default_rng(7)
    for i, (store, q, k) in enumerate(mips_fixtures(seed=99)):
        nlist = int(rng.integers(1, min(32, store.count) + 1))
        index = build_ivf(store, nlist, seed=i)
        assert search_ivf(index, store, q, k, nprobe=nlist) == search_exact(store, q, k)

    d = 32
    centers = [5.0 * c / np.linalg.norm(c) for c in rng.normal(size=(4, d))]
    recs = []
    for b, c in enumerate(centers):
        for j, v in enumerate(c + rng.normal(scale=1.0, size=(2500, d))):
            recs.append((f"b{b}_{j:04d}", v))
    store = build_store(recs, d, normalize=True)
    index = build_ivf(store, nlist=4, seed=0)
    recalls = []
    for _ in range(200):
        c = centers[int(rng.integers(4))]
        q = c + rng.normal(scale=1.0, size=d)
        recalls.append(recall_at_k(search_ivf(index, store, q, 10, nprobe=1), search_exact(store, q, 10)))
    assert np.mean(recalls) >= 0.9


@pytest.mark.criterion(3, "greedy dedup equals pairwise reference on 100 hit lists; rank-1 survives")
def test_dedup_oracle():
    rng = np.random.default_rng(3)
    for t in range(100):
        store, _, _ = builders.memory(int(rng.integers(20, 120)), int(rng.choice([4, 8, 16])), seed=t,
                                      dup_every=int(rng.integers(2, 6)))
        threshold = float(rng.choice([0.95, rng.uniform(0.3, 1.0)]))
        hits = search_exact(store, rng.normal(size=store.dimension), int(rng.integers(1, 50)))
        kept = dedup(hits, store, threshold)
        vecs = {i: store.vector(i) for i in store.ids}
        assert [h.id for h in kept] == pairwise_dedup([h.id for h in hits], vecs, threshold)
        assert kept[0] == hits[0]


@pytest.mark.criterion(4, "missing mappings for 0-100% of ids never raise; top1 absent iff no usable hit")
def test_retrieval_robustness():
    store, meta, corpus = builders.memory(600, 16, seed=11, dup_every=5)
    index = build_ivf(store, 8, seed=0)
    rng = np.random.default_rng(12)
    ids = list(corpus)
    for rate in np.linspace(0.0, 1.0, 21):
        dropped = set(rng.choice(ids, size=int(round(rate * len(ids))), replace=False))
        kept = {k: v for k, v in corpus.items() if k not in dropped}
        for backend in ("exact", "ivf"):
            r = Retriever(store, meta, kept, index, RetrievalConfig(backend=backend, nprobe=3))
            for q in rng.normal(size=(5, 16)):
                res = r.retrieve(q)
                usable = [e for e, _ in res.hits if e.mapped is not None and e.image_ref]
                assert (res.top1 is None) == (not usable)
                if res.top1 is not None:
                    assert res.top1 is usable[0]


def _augment_fixture(task):
    """50 records cycling through full, captions-only and missing retrievals,
    with some contexts far longer than the source-length limit."""
    rows, rets = [], {}
    long_caps = [" ".join(f"w{j}" for j in range(350)), " ".join(f"v{j}" for j in range(300))]
    for i in range(50):
        sid = f"s{i:02d}"
        if task == "captioning":
            rows.append({"sample_id": sid, "image_ref": f"q{i}.png", "caption": f"a caption for {i}"})
        else:
            rows.append({"sample_id": sid, "image_ref": f"q{i}.png", "question": f"what is shown in {i} ?", "answer": "dog"})
        kind = i % 5
        caps = long_caps if i % 7 == 0 else ["a dog", "a dog outside"]
        if kind in (0, 1, 2):
            entries = [("", "alt junk", None), (f"m{i}.png", "IMG alt " * 40, caps)]
        elif kind == 3:
            entries = [("", "alt only", caps)]
        else:
            entries = [("x.png", "alt", None)]
        if i != 49:  # one join miss
            rets[sid] = builders.retrieval(sid, entries)
    return RawDataset(task, list(rows[0]), rows), rets


def _loader(ref):
    h = sum(map(ord, ref))
    return RgbImage.filled(3 + h % 6, 2 + h % 5, (h % 256, 40, 90))


@pytest.mark.criterion(5, "per-mode row counts, byte-identical `none`, inputs <= 600 tokens with intact suffix")
def test_augmentation_policies(tmp_path):
    cfg = AugmentConfig()
    assert cfg.max_source_length == 600
    for task, modes in augment.MODES.items():
        ds, rets = _augment_fixture(task)
        raw_path = tmp_path / f"{task}.tsv"
        raw_path.write_text(augment.serialize_raw(ds), encoding="utf-8")
        ds = augment.read_dataset(raw_path, task)
        full = sum(1 for r in ds.rows if r["sample_id"] in rets and rets[r["sample_id"]].status == "full")
        assert 0 < full < 50
        for name, mode in modes.items():
            out = io.StringIO()
            image_dir = tmp_path / f"{task}_{name}"
            image_dir.mkdir()
            rep = augment.emit_dataset(ds, rets, mode, out, cfg, _loader, image_dir, tmp_path)
            emitted = list(csv.DictReader(io.StringIO(out.getvalue()), delimiter="\t"))
            if name == "none":
                assert out.getvalue().encode() == raw_path.read_bytes()
                expected = 50
            elif task == "vqa":
                expected = 50
            else:
                expected = full
            assert len(emitted) == expected == rep.emitted
            for row in emitted:
                rec = next(r for r in ds.rows if r["sample_id"] == row["sample_id"])
                sample = build_sample(rec, rets.get(rec["sample_id"]), mode, None, cfg, _loader)
                prompt = rec["question"] if task == "vqa" else cfg.caption_prompt
                assert len(sample.input_text.split()) <= 600
                assert sample.input_text.endswith(prompt)
                if mode.text_parts:
                    assert sample.input_text == compose_input(row["retrieved_context"], prompt, cfg)[0]


@pytest.mark.criterion(6, "image concat duplication fallback and sum rules on 20 size pairs vs reference resampler")
def test_image_concat():
    rng = np.random.default_rng(6)
    for _ in range(20):
        qw, qh, rw, rh = (int(x) for x in rng.integers(1, 40, size=4))
        q = RgbImage(qw, qh, rng.integers(0, 256, size=(qh, qw, 3)))
        r = RgbImage(rw, rh, rng.integers(0, 256, size=(rh, rw, 3)))

        dup = concat_images(q, None)
        assert (dup.width, dup.height) == (2 * qw, qh)
        np.testing.assert_array_equal(dup.pixels[:, :qw], dup.pixels[:, qw:])

        out = concat_images(q, r)
        sw = max(1, int(np.floor(rw * qh / rh + 0.5)))
        assert out.height == qh
        assert out.width == qw + sw
        np.testing.assert_array_equal(out.pixels[:, :qw], q.pixels)
        ref = np.array(nearest_resize_loop(r.pixels.tolist(), sw, qh), dtype=np.uint8)
        np.testing.assert_array_equal(out.pixels[:, qw:], ref)


def _corpus(seed, n_items):
    rng = np.random.default_rng(seed)
    vocab = "a the dog cat runs sits on grass mat red big small near two over under".split()

    def sent():
        return list(rng.choice(vocab, size=int(rng.integers(4, 14))))

    items = []
    for _ in range(n_items):
        refs = [sent() for _ in range(int(rng.integers(1, 6)))]
        cand = sent()
        if rng.random() < 0.5:
            r = refs[0]
            cand = cand[:3] + r[: max(4, len(r) // 2)]
        items.append((cand, refs))
    return items


@pytest.mark.criterion(7, "bleu4 / cider_d match reference to 1e-6 on 10 corpora; exact-match values; VQA 0..10")
def test_metric_oracles():
    for seed in range(10):
        items = _corpus(seed, int(10 + seed * 3))
        cands, refs = [c for c, _ in items], [r for _, r in items]
        assert bleu4(items) > 0
        assert abs(bleu4(items) - bleu_reference(cands, refs)) <= 1e-6
        mean, per_item = cider_d_reference(cands, refs)
        assert abs(cider_d(items) - mean) <= 1e-6
        assert np.max(np.abs(np.array(cider_d_scores(items)) - per_item)) <= 1e-6

    disjoint = [[f"t{i}_{j}" for j in range(4 + i % 3)] for i in range(6)]
    exact = [(s, [s]) for s in disjoint]
    assert all(abs(s - 10.0) <= 1e-6 for s in cider_d_scores(exact))
    assert bleu4(exact) == pytest.approx(1.0, abs=1e-12)

    for m in range(11):
        answers = ["yes"] * m + ["no"] * (10 - m)
        assert vqa_item_accuracy("yes", answers) == pytest.approx(vqa_loo_brute_force("yes", answers), abs=1e-12)
    assert vqa_item_accuracy("yes", ["yes"] * 3 + ["no"] * 7) == pytest.approx(0.9)


@pytest.mark.criterion(8, "100 decode fixtures: closed set, full beam equals exhaustive ranking, under 5 s")
def test_constrained_decoding():
    elapsed = 0.0
    for seed in range(100):
        answers, table, trie, scorer = builders.random_decode_fixture(10_000 + seed, max_answers=200)
        assert len(answers) <= 200
        closed = set(answers)
        t0 = time.perf_counter()
        small = constrained_beam_search(scorer, None, trie, beam=1 + seed % 5)
        full = constrained_beam_search(scorer, None, trie, beam=len(answers))
        elapsed += time.perf_counter() - t0
        assert all(h.tokens in closed for h in small + full)

        def lp(prefix, tok):
            p = table[prefix][tok]
            return float(np.log(p)) if p > 0 else -np.inf

        want = exhaustive_answer_scores(answers, lp, EOS)
        assert [h.tokens for h in full] == [t for t, _ in want]
        assert np.allclose([h.logprob for h in full], [s for _, s in want], atol=1e-9)
    assert elapsed < 5.0


def _artifacts(root: Path):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.mark.criterion(9, "demo twice with the same seed gives byte-identical artifacts")
def test_demo_determinism(tmp_path):
    a, b = tmp_path / "first", tmp_path / "nested" / "second"
    demo.run_demo(a, seed=5)
    demo.run_demo(b, seed=5)
    fa, fb = _artifacts(a), _artifacts(b)
    assert fa.keys() == fb.keys()
    kinds = {Path(k).suffix for k in fa}
    assert {".tsv", ".json", ".jsonl"} <= kinds
    for name in fa:
        assert fa[name] == fb[name], name
