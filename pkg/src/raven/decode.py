"""Closed-vocabulary decoding: an answer trie plus trie-masked beam search.

The search is model-free. A scorer is any callable
``scorer(context, prefix) -> log-probabilities over the token vocabulary``;
tokens outside the trie's allowed set are treated as -inf before the beam is
pruned, and nothing is renormalized.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence, Union

import numpy as np

from .errors import FormatError, RavenError

EOS = 0
DEFAULT_BEAM = 5

TokenIds = tuple[int, ...]
TokenScorer = Callable[[Any, TokenIds], np.ndarray]


class _Node:
    __slots__ = ("children", "terminal")

    def __init__(self) -> None:
        self.children: dict[int, _Node] = {}
        self.terminal = False


@dataclass
class AnswerTrie:
    root: _Node = field(default_factory=_Node)
    answer_count: int = 0
    eos: int = EOS

    def insert(self, tokens: Sequence[int]) -> bool:
        """Add a token path; returns False if it was already present."""
        if not tokens:
            raise RavenError("cannot insert an empty token sequence")
        if self.eos in tokens:
            raise RavenError(f"answer tokens may not contain the end marker {self.eos}")
        node = self.root
        for t in tokens:
            node = node.children.setdefault(int(t), _Node())
        if node.terminal:
            return False
        node.terminal = True
        self.answer_count += 1
        return True

    def node(self, prefix: Sequence[int]) -> _Node:
        node = self.root
        for t in prefix:
            try:
                node = node.children[t]
            except KeyError:
                raise RavenError(f"prefix {tuple(prefix)} is not a path in the trie") from None
        return node

    def __contains__(self, tokens: Sequence[int]) -> bool:
        try:
            return self.node(tokens).terminal
        except RavenError:
            return False

    def answers(self) -> list[TokenIds]:
        """All terminal paths, lexicographically ordered."""
        out: list[TokenIds] = []
        stack: list[tuple[_Node, TokenIds]] = [(self.root, ())]
        while stack:
            node, path = stack.pop()
            if node.terminal:
                out.append(path)
            for t in sorted(node.children, reverse=True):
                stack.append((node.children[t], path + (t,)))
        return sorted(out)


def build_trie(answers: Iterable[str], tokenizer: Callable[[str], Sequence[int]], eos: int = EOS) -> AnswerTrie:
    trie = AnswerTrie(eos=eos)
    n = 0
    for ans in answers:
        n += 1
        tokens = list(tokenizer(ans))
        if not tokens:
            raise RavenError(f"answer {ans!r} tokenizes to an empty sequence")
        trie.insert(tokens)
    if n == 0:
        raise RavenError("answer list is empty")
    return trie


def allowed_next(trie: AnswerTrie, prefix: Sequence[int]) -> set[int]:
    """Children of the prefix node, plus the end marker if the prefix is an answer."""
    node = trie.node(prefix)
    allowed = set(node.children)
    if node.terminal:
        allowed.add(trie.eos)
    return allowed


@dataclass(frozen=True)
class BeamHypothesis:
    tokens: TokenIds
    logprob: float
    complete: bool = True


def _rank_key(h: BeamHypothesis, length_normalize: bool) -> tuple:
    s = h.logprob / max(1, len(h.tokens)) if length_normalize else h.logprob
    return (-s, h.tokens, not h.complete)


def constrained_beam_search(
    scorer: TokenScorer,
    context: Any,
    trie: AnswerTrie,
    beam: int = DEFAULT_BEAM,
    length_normalize: bool = False,
) -> list[BeamHypothesis]:
    """Beam search restricted to trie paths.

    Each step expands every live hypothesis by its allowed tokens, pools the
    extensions with the hypotheses that just emitted the end marker, and keeps
    the best ``beam`` of that pool (score descending, then token sequence).
    Returns up to ``beam`` complete hypotheses in the same order.
    """
    if beam < 1:
        raise RavenError(f"beam must be >= 1, got {beam}")
    if trie.answer_count == 0:
        raise RavenError("trie is empty")
    live = [BeamHypothesis((), 0.0, False)]
    finished: list[BeamHypothesis] = []
    while live:
        pool: list[BeamHypothesis] = []
        for hyp in live:
            logp = np.asarray(scorer(context, hyp.tokens), dtype=np.float64)
            for t in allowed_next(trie, hyp.tokens):
                if not 0 <= t < logp.shape[0]:
                    raise RavenError(f"scorer vocabulary has no token {t}")
                lp = hyp.logprob + float(logp[t])
                if t == trie.eos:
                    pool.append(BeamHypothesis(hyp.tokens, lp, True))
                else:
                    pool.append(BeamHypothesis(hyp.tokens + (t,), lp, False))
        pool.sort(key=lambda h: _rank_key(h, length_normalize))
        kept = pool[:beam]
        finished.extend(h for h in kept if h.complete)
        live = [h for h in kept if not h.complete]
    finished.sort(key=lambda h: _rank_key(h, length_normalize))
    return finished[:beam]


def exhaustive_ranking(scorer: TokenScorer, context: Any, trie: AnswerTrie) -> list[BeamHypothesis]:
    """Score every answer in the trie (including its end marker) and rank them."""
    out = []
    for path in trie.answers():
        lp = 0.0
        for i in range(len(path) + 1):
            logp = np.asarray(scorer(context, path[:i]), dtype=np.float64)
            lp += float(logp[path[i] if i < len(path) else trie.eos])
        out.append(BeamHypothesis(path, lp, True))
    out.sort(key=lambda h: _rank_key(h, False))
    return out


# -- vocabularies and table scorers ----------------------------------------------


@dataclass
class Vocabulary:
    """String <-> id mapping with id 0 reserved for the end marker."""

    tokens: list[str] = field(default_factory=lambda: ["</s>"])
    unit: str = "word"

    def __post_init__(self) -> None:
        if self.unit not in ("word", "char"):
            raise RavenError(f"unknown tokenizer unit {self.unit!r}")
        self._ids = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def from_answers(cls, answers: Iterable[str], unit: str = "word") -> "Vocabulary":
        vocab = cls(unit=unit)
        for a in answers:
            for piece in vocab.split(a):
                vocab.add(piece)
        return vocab

    def split(self, text: str) -> list[str]:
        return list(text) if self.unit == "char" else text.split()

    def add(self, piece: str) -> int:
        if piece not in self._ids:
            self._ids[piece] = len(self.tokens)
            self.tokens.append(piece)
        return self._ids[piece]

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, piece: str) -> int:
        try:
            return self._ids[piece]
        except KeyError:
            raise RavenError(f"token {piece!r} not in vocabulary") from None

    def encode(self, text: str) -> list[int]:
        return [self.id(p) for p in self.split(text)]

    def decode(self, ids: Sequence[int]) -> str:
        sep = "" if self.unit == "char" else " "
        return sep.join(self.tokens[i] for i in ids)


class TableScorer:
    """Deterministic scorer from explicit next-token probabilities.

    ``table`` maps a prefix (tuple of ids) to ``{token_id: probability}``.
    Probability mass not listed is spread evenly over the remaining tokens;
    unlisted prefixes get a uniform distribution.
    """

    def __init__(self, table: Mapping[TokenIds, Mapping[int, float]], vocab_size: int) -> None:
        if vocab_size < 1:
            raise RavenError("vocab_size must be >= 1")
        self.vocab_size = vocab_size
        self._rows: dict[TokenIds, np.ndarray] = {}
        for prefix, probs in table.items():
            self._rows[tuple(prefix)] = self._row(probs)
        self._uniform = np.full(vocab_size, -math.log(vocab_size))

    def _row(self, probs: Mapping[int, float]) -> np.ndarray:
        p = np.zeros(self.vocab_size)
        listed = np.zeros(self.vocab_size, dtype=bool)
        for t, v in probs.items():
            if not 0 <= t < self.vocab_size or not 0.0 <= v <= 1.0:
                raise RavenError(f"bad table entry {t}: {v}")
            p[t] = v
            listed[t] = True
        rest = 1.0 - p.sum()
        if rest < -1e-9:
            raise RavenError("listed probabilities exceed 1")
        free = ~listed
        if free.any():
            p[free] = max(rest, 0.0) / free.sum()
        elif abs(rest) > 1e-5:
            raise RavenError("probabilities over the full vocabulary must sum to 1")
        with np.errstate(divide="ignore"):
            return np.log(p)

    def __call__(self, context: Any, prefix: TokenIds) -> np.ndarray:
        return self._rows.get(tuple(prefix), self._uniform)


def read_answers(path: Union[str, Path]) -> list[str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [ln.strip() for ln in lines if ln.strip()]


def scorer_from_fixture(obj: Mapping[str, Any], vocab: Vocabulary) -> TableScorer:
    """Build a scorer from a JSON fixture.

    ``obj["table"]`` maps a detokenized prefix string ("" for the empty
    prefix) to ``{token_string: probability}``; ``"</s>"`` is the end marker.
    """
    table = obj.get("table")
    if not isinstance(table, dict):
        raise FormatError("scorer fixture needs a 'table' object")
    rows: dict[TokenIds, dict[int, float]] = {}
    for prefix, probs in table.items():
        ids = tuple(vocab.encode(prefix)) if prefix else ()
        rows[ids] = {vocab.id(tok): float(p) for tok, p in probs.items()}
    return TableScorer(rows, len(vocab))


def decode_fixtures(
    answers: Sequence[str],
    fixtures: Iterable[Mapping[str, Any]],
    beam: int = DEFAULT_BEAM,
    unit: str = "word",
    length_normalize: bool = False,
) -> list[dict]:
    vocab = Vocabulary.from_answers(answers, unit)
    trie = build_trie(answers, vocab.encode)
    out = []
    for i, fx in enumerate(fixtures):
        scorer = scorer_from_fixture(fx, vocab)
        hyps = constrained_beam_search(scorer, fx.get("context"), trie, beam, length_normalize)
        out.append(
            {
                "id": fx.get("id", str(i)),
                "ranked": [
                    # -inf (zero-probability path) has no JSON spelling.
                    {"answer": vocab.decode(h.tokens), "logprob": h.logprob if math.isfinite(h.logprob) else None}
                    for h in hyps
                ],
            }
        )
    return out


def read_fixtures(path: Union[str, Path]) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise FormatError(f"{path}:{lineno}: {exc}") from None
    return out
