"""Lexicon-constrained CTC prefix beam search with word n-gram fusion.

Hypotheses are ranked by

    log p_am(y | x) + alpha * log p_lm(y) + beta * |y|

where the acoustic term is the CTC marginal of the label prefix (summed
over alignments by the usual blank / non-blank split) and the LM term is
added one word at a time, when a word-boundary token closes a word that
ends at a lexicon terminal. The final word is closed at the last frame.
The LM contributes natural-log probabilities.
"""

from __future__ import annotations

import heapq
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .ctc import log_softmax
from .lm import NGramModel
from .textnorm import TokenSet

NEG_INF = -math.inf
LN10 = math.log(10.0)


class EmptyLexiconError(ValueError):
    pass


class Lexicon:
    """Word spellings and the trie over them. Node 0 is the root."""

    def __init__(self, spellings: dict[str, tuple[int, ...]], ts: TokenSet):
        if not spellings:
            raise EmptyLexiconError("lexicon is empty")
        self.ts = ts
        self.spellings = {}
        self.children: list[dict[int, int]] = [{}]
        self.token: list[int] = [-1]
        self.words_at: list[list[str]] = [[]]
        self.prefix: list[str] = [""]
        for word in sorted(spellings):
            spelling = tuple(spellings[word])
            if not spelling:
                raise ValueError(f"word {word!r} has an empty spelling")
            for t in spelling:
                if not ts.is_character(t):
                    raise ValueError(f"word {word!r}: token {t} is not a character")
            self.spellings[word] = spelling
            node = 0
            for t in spelling:
                nxt = self.children[node].get(t)
                if nxt is None:
                    nxt = len(self.children)
                    self.children[node][t] = nxt
                    self.children.append({})
                    self.token.append(t)
                    self.words_at.append([])
                    self.prefix.append(self.prefix[node] + ts.symbols[t])
                node = nxt
            self.words_at[node].append(word)

    @classmethod
    def from_words(cls, words: Iterable[str], ts: TokenSet) -> "Lexicon":
        return cls({w: ts.spell(w) for w in words}, ts)

    def __len__(self) -> int:
        return len(self.spellings)

    def __contains__(self, word: str) -> bool:
        return word in self.spellings

    def enumerate(self) -> list[tuple[str, tuple[int, ...]]]:
        """Walk the trie and list every (word, spelling) it encodes."""
        out = []
        stack = [(0, ())]
        while stack:
            node, path = stack.pop()
            for w in self.words_at[node]:
                out.append((w, path))
            for t, child in self.children[node].items():
                stack.append((child, path + (t,)))
        return sorted(out)

    def save(self, path) -> None:
        lines = [f"{w}\t{' '.join(self.ts.symbols[t] for t in sp)}" for w, sp in sorted(self.spellings.items())]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path, ts: TokenSet) -> "Lexicon":
        spellings = {}
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                line = line.rstrip("\n")
                if not line.strip():
                    continue
                try:
                    word, spelled = line.split("\t")
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: expected 'word<TAB>spelling'") from None
                spellings[word] = tuple(ts.index(c) for c in spelled.split())
        return cls(spellings, ts)


@dataclass(frozen=True)
class DecodeParams:
    alpha: float = 1.0
    beta: float = 0.0
    beam_size: int = 100
    beam_score_threshold: float = math.inf
    unk_log_score: float = -math.inf

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")


@dataclass(frozen=True)
class Hypothesis:
    words: tuple[str, ...]
    am_score: float
    lm_score: float
    score: float

    @property
    def text(self) -> str:
        return " ".join(self.words)

    @property
    def word_count(self) -> int:
        return len(self.words)


@dataclass
class _Beam:
    """Mutable search state for one label prefix (words committed + trie node)."""

    pb: float
    pnb: float
    lm_score: float
    lm_state: object


def _lae(a: float, b: float) -> float:
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


class _WordScorer:
    """Caches natural-log LM increments for (state, word)."""

    def __init__(self, lm: NGramModel | None, unk_log_score: float):
        self.lm = lm
        self.unk = unk_log_score
        self.cache: dict = {}

    def begin(self):
        return self.lm.begin_state() if self.lm is not None else None

    def word(self, state, word):
        key = (state, word)
        hit = self.cache.get(key)
        if hit is None:
            if self.lm is None:
                hit = (0.0, None)
            else:
                lp, nxt = self.lm.score(state, word)
                delta = lp * LN10
                if not self.lm.in_vocab(word):
                    delta += self.unk
                hit = (delta, nxt)
            self.cache[key] = hit
        return hit

    def end(self, state) -> float:
        if self.lm is None:
            return 0.0
        key = (state, None)
        hit = self.cache.get(key)
        if hit is None:
            hit = self.cache[key] = self.lm.end_score(state) * LN10
        return hit


def beam_decode(
    logits: np.ndarray,
    lexicon: Lexicon,
    lm: NGramModel | None,
    params: DecodeParams = DecodeParams(),
    nbest: int | None = None,
) -> list[Hypothesis]:
    """Ranked transcripts for one utterance (best first)."""
    if len(lexicon) == 0:
        raise EmptyLexiconError("lexicon is empty")
    ts = lexicon.ts
    blank, wb = ts.blank_id, ts.word_boundary_id
    lp = log_softmax(np.asarray(logits, dtype=np.float64), axis=1)
    if lp.shape[1] != len(ts):
        raise ValueError(f"logits have {lp.shape[1]} columns, token set has {len(ts)}")
    lp_rows = lp.tolist()
    alpha, beta = params.alpha, params.beta
    scorer = _WordScorer(lm, params.unk_log_score)
    children, token, words_at, prefix = lexicon.children, lexicon.token, lexicon.words_at, lexicon.prefix

    beams: dict[tuple, _Beam] = {((), 0): _Beam(0.0, NEG_INF, 0.0, scorer.begin())}
    for row in lp_rows:
        nxt: dict[tuple, _Beam] = {}

        def add(key, pb, pnb, lm_score, lm_state):
            e = nxt.get(key)
            if e is None:
                nxt[key] = _Beam(pb, pnb, lm_score, lm_state)
            else:
                e.pb = _lae(e.pb, pb)
                e.pnb = _lae(e.pnb, pnb)

        p_blank, p_wb = row[blank], row[wb]
        for key, bm in beams.items():
            words, node = key
            tot = _lae(bm.pb, bm.pnb)
            add(key, tot + p_blank, NEG_INF, bm.lm_score, bm.lm_state)
            if node:
                last = token[node]
            elif words:
                last = wb
            else:
                last = None
            if last is not None and bm.pnb != NEG_INF:
                add(key, NEG_INF, bm.pnb + row[last], bm.lm_score, bm.lm_state)
            for c, child in children[node].items():
                base = bm.pb if c == last else tot
                if base != NEG_INF:
                    add((words, child), NEG_INF, base + row[c], bm.lm_score, bm.lm_state)
            if node and words_at[node]:
                for w in words_at[node]:
                    delta, state = scorer.word(bm.lm_state, w)
                    if delta == NEG_INF:
                        continue
                    add((words + (w,), 0), NEG_INF, tot + p_wb, bm.lm_score + delta, state)

        beams = _prune(nxt, params, prefix)

    finals = []
    for (words, node), bm in beams.items():
        am = _lae(bm.pb, bm.pnb)
        if am == NEG_INF:
            continue
        if node == 0:
            if words:
                continue  # trailing word boundary: not the encoding of any transcript
            lm_score = bm.lm_score + scorer.end(bm.lm_state)
            finals.append(Hypothesis(words, am, lm_score, am + alpha * lm_score))
            continue
        for w in words_at[node]:
            delta, state = scorer.word(bm.lm_state, w)
            if delta == NEG_INF:
                continue
            lm_score = bm.lm_score + delta + scorer.end(state)
            full = words + (w,)
            finals.append(Hypothesis(full, am, lm_score, am + alpha * lm_score + beta * len(full)))

    finals = [h for h in finals if h.score != NEG_INF]
    if not finals:
        am = float(sum(r[blank] for r in lp_rows))
        lm_score = scorer.end(scorer.begin())
        return [Hypothesis((), am, lm_score, am + alpha * lm_score)]
    finals.sort(key=lambda h: (-h.score, h.text))
    return finals[:nbest] if nbest else finals


def _prune(cands: dict[tuple, _Beam], params: DecodeParams, prefix: list[str]) -> dict[tuple, _Beam]:
    alpha, beta = params.alpha, params.beta
    scored = []
    for key, bm in cands.items():
        s = _lae(bm.pb, bm.pnb) + alpha * bm.lm_score + beta * len(key[0])
        if s != NEG_INF:
            scored.append((s, key))
    if not scored:
        return {}
    if math.isfinite(params.beam_score_threshold):
        best = max(s for s, _ in scored)
        scored = [x for x in scored if x[0] >= best - params.beam_score_threshold]
    k = params.beam_size
    if len(scored) > k:
        cut = heapq.nlargest(k, (x[0] for x in scored))[-1]
        keep = [x for x in scored if x[0] > cut]
        tied = [x for x in scored if x[0] == cut]
        if len(keep) + len(tied) > k:
            tied.sort(key=lambda x: (_transcript(x[1], prefix), len(x[1][0])))
        scored = keep + tied[: k - len(keep)]
    return {key: cands[key] for _, key in scored}


def _transcript(key, prefix) -> str:
    words, node = key
    tail = prefix[node]
    return " ".join(words) + (" " + tail if words and tail else tail)


def greedy_words(logits: np.ndarray, ts: TokenSet) -> list[str]:
    from .ctc import greedy_decode
    from .textnorm import decode as unflatten

    return unflatten(greedy_decode(logits, ts.blank_id), ts).to_words(ts)


# ----------------------------------------------------------------------
# utterance-level parallelism
# ----------------------------------------------------------------------

_WORKER: dict = {}


def _init_worker(lexicon, lm, params, nbest):
    _WORKER.update(lexicon=lexicon, lm=lm, params=params, nbest=nbest)


def _decode_one(logits):
    w = _WORKER
    return beam_decode(logits, w["lexicon"], w["lm"], w["params"], w["nbest"])


def decode_many(
    logits_list: Sequence[np.ndarray],
    lexicon: Lexicon,
    lm: NGramModel | None,
    params: DecodeParams,
    workers: int = 1,
    nbest: int | None = 1,
) -> list[list[Hypothesis]]:
    """Decode utterances independently; results keep input order for any worker count."""
    if workers <= 1 or len(logits_list) < 2:
        return [beam_decode(x, lexicon, lm, params, nbest) for x in logits_list]
    workers = min(workers, os.cpu_count() or 1, len(logits_list)) or 1
    chunk = max(1, len(logits_list) // (4 * workers))
    with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(lexicon, lm, params, nbest)) as ex:
        return list(ex.map(_decode_one, logits_list, chunksize=chunk))


# ----------------------------------------------------------------------
# decode parameter search
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class SearchSpace:
    alpha: tuple[float, float] = (0.3, 5.0)
    beta: tuple[float, float] = (-10.0, 10.0)


@dataclass
class TuneResult:
    params: DecodeParams
    wer: float
    trials: list[tuple[float, float, float]] = field(default_factory=list)


def tune_decode_params(
    logits_list: Sequence[np.ndarray],
    references: Sequence[str],
    lexicon: Lexicon,
    lm: NGramModel | None,
    space: SearchSpace = SearchSpace(),
    trials: int = 64,
    seed: int = 0,
    base: DecodeParams = DecodeParams(),
    workers: int = 1,
) -> TuneResult:
    """Random search over (alpha, beta); the first trial wins ties."""
    from .metrics import corpus_wer

    if trials < 1:
        raise ValueError("trials must be >= 1")
    if len(logits_list) != len(references):
        raise ValueError("one reference per utterance is required")
    rng = np.random.default_rng(seed)
    best: TuneResult | None = None
    log = []
    for _ in range(trials):
        a = float(rng.uniform(*space.alpha))
        b = float(rng.uniform(*space.beta))
        p = replace(base, alpha=a, beta=b)
        hyps = decode_many(logits_list, lexicon, lm, p, workers)
        w = corpus_wer([h[0].text for h in hyps], references)
        log.append((a, b, w))
        if best is None or w < best.wer:
            best = TuneResult(p, w)
    best.trials = log
    return best
