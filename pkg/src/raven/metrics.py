"""Caption and VQA evaluation: corpus BLEU@4, CIDEr-D and VQA accuracy.

Scales: BLEU is in [0, 1]; CIDEr-D item scores are in [0, 10] (the x10 factor
of the metric definition) and the corpus value is their mean; VQA accuracies
are fractions in [0, 1], not percentages.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

from .errors import FormatError, RavenError

MAX_N = 4
CIDER_SIGMA = 6.0
QUESTION_TYPES = ("yes/no", "number", "other")
NUM_ANNOTATORS = 10

Tokens = Sequence[str]
Item = tuple[Tokens, Sequence[Tokens]]

_PUNCT_RE = re.compile(r"[^\w\s]|_")


def normalize(text: str) -> list[str]:
    """Lowercase, turn punctuation into spaces and split on whitespace."""
    return _PUNCT_RE.sub(" ", text.lower()).split()


@dataclass
class EvalCorpus:
    items: list[tuple[list[str], list[list[str]]]]

    def __post_init__(self) -> None:
        for i, (_, refs) in enumerate(self.items):
            if not refs:
                raise RavenError(f"item {i} has no references")

    @classmethod
    def from_texts(cls, pairs: Iterable[tuple[str, Sequence[str]]]) -> "EvalCorpus":
        return cls([(normalize(c), [normalize(r) for r in refs]) for c, refs in pairs])

    def __len__(self) -> int:
        return len(self.items)


def _items(corpus: Union[EvalCorpus, Sequence[Item]]) -> Sequence[Item]:
    items = corpus.items if isinstance(corpus, EvalCorpus) else corpus
    for i, (_, refs) in enumerate(items):
        if not refs:
            raise RavenError(f"item {i} has no references")
    return items


def ngram_counts(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# -- BLEU ----------------------------------------------------------------------


def bleu4(corpus: Union[EvalCorpus, Sequence[Item]], max_n: int = MAX_N) -> float:
    """Corpus BLEU: clipped n-gram precisions pooled over the corpus,
    geometric mean over n = 1..max_n, times the brevity penalty.

    The effective reference length of an item is the reference length closest
    to the candidate length (shorter wins ties). No smoothing: any zero
    precision gives 0.
    """
    items = _items(corpus)
    if not items:
        raise RavenError("empty corpus")
    matched = [0] * max_n
    possible = [0] * max_n
    cand_len = ref_len = 0
    for cand, refs in items:
        c = len(cand)
        cand_len += c
        ref_len += min((abs(len(r) - c), len(r)) for r in refs)[1]
        for n in range(1, max_n + 1):
            counts = ngram_counts(cand, n)
            ceiling: Counter = Counter()
            for r in refs:
                ceiling |= ngram_counts(r, n)
            matched[n - 1] += sum(min(k, ceiling[g]) for g, k in counts.items())
            possible[n - 1] += max(c - n + 1, 0)
    if min(matched) == 0:
        return 0.0
    log_prec = sum(math.log(m / p) for m, p in zip(matched, possible)) / max_n
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_prec)


# -- CIDEr-D -------------------------------------------------------------------


def _doc_freq(items: Sequence[Item], max_n: int) -> Counter:
    df: Counter = Counter()
    for _, refs in items:
        grams = set()
        for r in refs:
            for n in range(1, max_n + 1):
                grams.update(ngram_counts(r, n))
        df.update(grams)
    return df


def _tfidf(tokens: Tokens, df: Counter, log_n: float, max_n: int) -> tuple[list[dict], list[float]]:
    vecs: list[dict] = []
    norms: list[float] = []
    for n in range(1, max_n + 1):
        vec = {g: tf * (log_n - math.log(max(1.0, df[g]))) for g, tf in ngram_counts(tokens, n).items()}
        vecs.append(vec)
        norms.append(math.sqrt(sum(v * v for v in vec.values())))
    return vecs, norms


def cider_d_scores(
    corpus: Union[EvalCorpus, Sequence[Item]],
    max_n: int = MAX_N,
    sigma: float = CIDER_SIGMA,
) -> list[float]:
    """Per-item CIDEr-D scores (each in [0, 10])."""
    items = _items(corpus)
    if len(items) < 2:
        raise RavenError("idf undefined: CIDEr-D needs at least 2 items")
    df = _doc_freq(items, max_n)
    log_n = math.log(float(len(items)))
    scores = []
    for cand, refs in items:
        hv, hn = _tfidf(cand, df, log_n, max_n)
        total = 0.0
        for ref in refs:
            rv, rn = _tfidf(ref, df, log_n, max_n)
            penalty = math.exp(-((len(cand) - len(ref)) ** 2) / (2 * sigma**2))
            per_n = 0.0
            for n in range(max_n):
                # Clipping: candidate weights are capped at the reference's.
                dot = sum(min(w, rv[n].get(g, 0.0)) * rv[n].get(g, 0.0) for g, w in hv[n].items())
                if hn[n] != 0.0 and rn[n] != 0.0:
                    dot /= hn[n] * rn[n]
                per_n += dot * penalty
            total += per_n / max_n
        scores.append(10.0 * total / len(refs))
    return scores


def cider_d(corpus: Union[EvalCorpus, Sequence[Item]], max_n: int = MAX_N, sigma: float = CIDER_SIGMA) -> float:
    """Corpus CIDEr-D: mean of the per-item scores, idf from the references."""
    scores = cider_d_scores(corpus, max_n, sigma)
    return sum(scores) / len(scores)


# -- VQA -----------------------------------------------------------------------


@lru_cache(maxsize=1)
def _vqa_tables() -> dict:
    text = resources.files("raven").joinpath("data/vqa_normalization.json").read_text(encoding="utf-8")
    return json.loads(text)


_PERIOD_STRIP = re.compile(r"(?!<=\d)(\.)(?!\d)")
_COMMA_STRIP = re.compile(r"(\d)(,)(\d)")


def normalize_answer(answer: str) -> str:
    """VQA v2 answer normalization (punctuation, number words, articles, contractions)."""
    t = _vqa_tables()
    text = answer.replace("\n", " ").replace("\t", " ").strip()
    out = text
    for p in t["punctuation"]:
        if (p + " " in text or " " + p in text) or _COMMA_STRIP.search(text) is not None:
            out = out.replace(p, "")
        else:
            out = out.replace(p, " ")
    out = _PERIOD_STRIP.sub("", out)
    words = []
    for w in out.lower().split():
        w = t["number_words"].get(w, w)
        if w not in t["articles"]:
            words.append(t["contractions"].get(w, w))
    return " ".join(words)


@dataclass
class VqaItem:
    predicted: str
    annotator_answers: list[str]
    question_type: str = "other"

    def __post_init__(self) -> None:
        if len(self.annotator_answers) != NUM_ANNOTATORS:
            raise RavenError(
                f"expected {NUM_ANNOTATORS} annotator answers, got {len(self.annotator_answers)}"
            )
        if self.question_type not in QUESTION_TYPES:
            raise RavenError(f"unknown question type {self.question_type!r}")


def vqa_item_accuracy(predicted: str, annotator_answers: Sequence[str]) -> float:
    """min(matches / 3, 1) averaged over the ten leave-one-annotator-out subsets."""
    if len(annotator_answers) != NUM_ANNOTATORS:
        raise RavenError(f"expected {NUM_ANNOTATORS} annotator answers, got {len(annotator_answers)}")
    total = sum(1 for a in annotator_answers if a == predicted)
    acc = 0.0
    for a in annotator_answers:
        others = total - (a == predicted)
        acc += min(1.0, others / 3.0)
    return acc / NUM_ANNOTATORS


def vqa_accuracy(items: Sequence[VqaItem], normalize_answers: bool = True) -> dict[str, Optional[float]]:
    """Mean accuracy overall and per question type (``None`` for absent types)."""
    if not items:
        raise RavenError("no VQA items")
    per_type: dict[str, list[float]] = {t: [] for t in QUESTION_TYPES}
    everything = []
    for item in items:
        if normalize_answers:
            pred = normalize_answer(item.predicted)
            answers = [normalize_answer(a) for a in item.annotator_answers]
        else:
            pred, answers = item.predicted, item.annotator_answers
        acc = vqa_item_accuracy(pred, answers)
        per_type[item.question_type].append(acc)
        everything.append(acc)
    out: dict[str, Optional[float]] = {"overall": sum(everything) / len(everything)}
    for t, accs in per_type.items():
        out[t] = sum(accs) / len(accs) if accs else None
    return out


# -- files ---------------------------------------------------------------------


def _jsonl(path: Union[str, Path]) -> Iterable[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    yield lineno, json.loads(line)
                except json.JSONDecodeError as exc:
                    raise FormatError(f"{path}:{lineno}: {exc}") from None


def load_caption_eval(path: Union[str, Path]) -> EvalCorpus:
    """Read ``{id, candidate, references[]}`` lines."""
    pairs = []
    for lineno, obj in _jsonl(path):
        try:
            cand, refs = obj["candidate"], obj["references"]
        except KeyError as exc:
            raise FormatError(f"{path}:{lineno}: missing field {exc}") from None
        if not isinstance(refs, list) or not refs:
            raise FormatError(f"{path}:{lineno}: references must be a non-empty list")
        pairs.append((cand, refs))
    return EvalCorpus.from_texts(pairs)


def load_vqa_eval(path: Union[str, Path]) -> list[VqaItem]:
    """Read ``{id, predicted, annotator_answers[10], question_type}`` lines."""
    items = []
    for lineno, obj in _jsonl(path):
        try:
            items.append(VqaItem(obj["predicted"], list(obj["annotator_answers"]), obj.get("question_type", "other")))
        except KeyError as exc:
            raise FormatError(f"{path}:{lineno}: missing field {exc}") from None
        except RavenError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
    return items


def caption_report(corpus: EvalCorpus) -> dict:
    return {
        "task": "captioning",
        "items": len(corpus),
        "bleu4": bleu4(corpus),
        "cider_d": cider_d(corpus),
        "scales": {"bleu4": "[0, 1]", "cider_d": "mean of per-item scores in [0, 10]"},
    }


def vqa_report(items: Sequence[VqaItem]) -> dict:
    counts = Counter(i.question_type for i in items)
    return {
        "task": "vqa",
        "items": len(items),
        "items_per_type": {t: counts.get(t, 0) for t in QUESTION_TYPES},
        "accuracy": vqa_accuracy(items),
        "scales": {"accuracy": "[0, 1]"},
    }
