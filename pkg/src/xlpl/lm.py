"""Word-level backoff n-gram language models.

Estimation is interpolated Kneser-Ney with one fixed discount for every
order. The result is stored in ARPA backoff form, so scoring an unseen
n-gram walks down the history adding backoff weights until a stored entry
is found; the unigram table always terminates the walk.

All probabilities are log10, as in ARPA files.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

BOS = "<s>"
EOS = "</s>"
UNK = "<unk>"
DISCOUNT = 0.75
NO_PROB = -99.0  # conventional ARPA value for <s>, which is never predicted


class LMTrainingError(ValueError):
    pass


class UndefinedPerplexityError(ValueError):
    pass


class ArpaParseError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


@dataclass(frozen=True)
class LMState:
    history: tuple[str, ...] = ()


@dataclass
class NGramModel:
    order: int
    vocab: dict[str, int]
    prob: dict[tuple[str, ...], float]
    backoff: dict[tuple[str, ...], float] = field(default_factory=dict)

    @property
    def unk_log_prob(self) -> float:
        return self.prob[(UNK,)]

    def in_vocab(self, word: str) -> bool:
        return word in self.vocab

    def begin_state(self) -> LMState:
        return LMState((BOS,)[: self.order - 1])

    def log_prob(self, history: tuple[str, ...], word: str) -> float:
        """Backoff-resolved log10 p(word | history); OOV words resolve to <unk>."""
        if word != EOS and word not in self.vocab:
            word = UNK
        prob, backoff = self.prob, self.backoff
        total = 0.0
        for k in range(len(history) + 1):
            ctx = history[k:]
            lp = prob.get(ctx + (word,))
            if lp is not None:
                return total + lp
            total += backoff.get(ctx, 0.0)
        raise KeyError(word)  # unreachable: unigram table covers vocab, </s> and <unk>

    def next_state(self, state: LMState, word: str) -> LMState:
        if word != EOS and word not in self.vocab:
            return LMState(())
        if self.order == 1:
            return LMState(())
        return LMState((state.history + (word,))[-(self.order - 1):])

    def score(self, state: LMState, word: str) -> tuple[float, LMState]:
        return self.log_prob(state.history, word), self.next_state(state, word)

    def end_score(self, state: LMState) -> float:
        return self.log_prob(state.history, EOS)

    def sentence_log_prob(self, words: Sequence[str]) -> float:
        state = self.begin_state()
        total = 0.0
        for w in words:
            lp, state = self.score(state, w)
            total += lp
        return total + self.end_score(state)

    def predictable(self) -> list[str]:
        """Every word a conditional distribution ranges over."""
        return list(self.vocab) + [EOS, UNK]

    def histories(self) -> list[tuple[str, ...]]:
        return sorted(self.backoff, key=lambda h: (len(h), h))

    def counts(self) -> dict[int, int]:
        out: dict[int, int] = Counter(len(g) for g in self.prob)
        return {k: out.get(k, 0) for k in range(1, self.order + 1)}


def score(model: NGramModel, state: LMState, word: str) -> tuple[float, LMState]:
    return model.score(state, word)


def _as_words(sentence) -> list[str]:
    if isinstance(sentence, str):
        return sentence.split()
    return list(sentence)


def train_lm(
    corpus: Iterable,
    order: int = 4,
    vocab_limit: int | None = None,
    prune_min_count: Mapping[int, int] | None = None,
    discount: float = DISCOUNT,
) -> NGramModel:
    """Train an interpolated Kneser-Ney model.

    ``corpus`` yields sentences as word lists or whitespace-separated strings.
    Words outside the ``vocab_limit`` most frequent (ties broken
    alphabetically) are OOV: n-grams containing them are not counted.
    ``prune_min_count`` maps an order (>= 2) to the minimum raw count an
    n-gram of that order needs to be kept; backoff weights are then
    recomputed so every distribution stays normalized.
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    if vocab_limit is not None and vocab_limit < 1:
        raise ValueError("vocab_limit must be >= 1")
    prune_min_count = dict(prune_min_count or {})
    for k in prune_min_count:
        if not 2 <= k <= order:
            raise ValueError(f"cannot prune order {k}; use vocab_limit for unigrams")

    sentences = [_as_words(s) for s in corpus]
    sentences = [s for s in sentences if s]
    if not sentences:
        raise LMTrainingError("empty training corpus")

    freq = Counter(w for s in sentences for w in s)
    ranked = sorted(freq, key=lambda w: (-freq[w], w))
    if vocab_limit is not None:
        ranked = ranked[:vocab_limit]
    vocab = {w: i for i, w in enumerate(ranked)}

    raw: list[Counter] = [Counter() for _ in range(order + 1)]
    for s in sentences:
        toks = [BOS] + [w if w in vocab else None for w in s] + [EOS]
        for k in range(1, order + 1):
            cnt = raw[k]
            for i in range(len(toks) - k + 1):
                g = tuple(toks[i : i + k])
                if None in g or g == (BOS,):
                    continue
                cnt[g] += 1

    adjusted = _adjusted_counts(raw, order)
    prob, gamma = _interpolate(adjusted, vocab, order, discount)
    model = NGramModel(order, vocab, prob, gamma)

    if prune_min_count:
        _prune(model, raw, prune_min_count)
    _close_prefixes(model)
    return model


def _adjusted_counts(raw: list[Counter], order: int) -> list[dict]:
    """Raw counts for the top order and <s>-initial n-grams, left-continuation counts otherwise."""
    adjusted: list[dict] = [dict() for _ in range(order + 1)]
    adjusted[order] = dict(raw[order])
    for k in range(order - 1, 0, -1):
        cont = Counter(g[1:] for g in raw[k + 1])
        adj = adjusted[k]
        for g, c in raw[k].items():
            a = c if g[0] == BOS else cont.get(g, 0)
            if a > 0:
                adj[g] = a
    return adjusted


def _interpolate(adjusted, vocab, order, discount):
    prob: dict[tuple[str, ...], float] = {}
    gamma: dict[tuple[str, ...], float] = {}

    outcomes = list(vocab) + [EOS]
    uni = adjusted[1]
    total = sum(uni.get((w,), 0) for w in outcomes)
    n_types = sum(1 for w in outcomes if uni.get((w,), 0) > 0)
    support = len(outcomes) + 1  # + <unk>
    if total > 0:
        floor = discount * n_types / total / support
        p1 = {w: max(uni.get((w,), 0) - discount, 0.0) / total + floor for w in outcomes}
    else:
        floor = 1.0 / support
        p1 = {w: floor for w in outcomes}
    p1[UNK] = floor
    for w, p in p1.items():
        prob[(w,)] = math.log10(p)
    prob[(BOS,)] = NO_PROB

    # lower-order interpolated probabilities in linear space, for reuse
    lin: dict[tuple[str, ...], float] = {(w,): p for w, p in p1.items()}
    lin_gamma: dict[tuple[str, ...], float] = {}

    def resolve(ctx: tuple[str, ...], w: str) -> float:
        mult = 1.0
        for k in range(len(ctx) + 1):
            c = ctx[k:]
            p = lin.get(c + (w,))
            if p is not None:
                return mult * p
            mult *= lin_gamma.get(c, 1.0)
        raise KeyError(w)

    for k in range(2, order + 1):
        by_hist: dict[tuple, dict[str, int]] = defaultdict(dict)
        for g, a in adjusted[k].items():
            by_hist[g[:-1]][g[-1]] = a
        new_lin = {}
        new_gamma = {}
        for h, conts in by_hist.items():
            denom = sum(conts.values())
            g_h = discount * len(conts) / denom
            new_gamma[h] = g_h
            for w, a in conts.items():
                new_lin[h + (w,)] = max(a - discount, 0.0) / denom + g_h * resolve(h[1:], w)
        lin.update(new_lin)
        lin_gamma.update(new_gamma)

    for g, p in lin.items():
        if len(g) > 1:
            prob[g] = math.log10(p)
    for h, g_h in lin_gamma.items():
        gamma[h] = math.log10(g_h)
    return prob, gamma


def _prune(model: NGramModel, raw: list[Counter], thresholds: Mapping[int, int]) -> None:
    order = model.order
    keep_prefix: set = set()
    for k in range(order, 1, -1):
        thr = thresholds.get(k, 0)
        for g in [g for g in model.prob if len(g) == k]:
            if raw[k].get(g, 0) < thr and g not in keep_prefix:
                del model.prob[g]
            else:
                keep_prefix.add(g[:-1])
    _renormalize_backoff(model)


def _renormalize_backoff(model: NGramModel) -> None:
    by_hist: dict[tuple, list[str]] = defaultdict(list)
    for g in model.prob:
        if len(g) > 1:
            by_hist[g[:-1]].append(g[-1])
    model.backoff.clear()
    for h in sorted(by_hist, key=len):
        words = by_hist[h]
        kept = sum(10.0 ** model.prob[h + (w,)] for w in words)
        lower = sum(10.0 ** model.log_prob(h[1:], w) for w in words)
        if lower >= 1.0 or kept >= 1.0:
            model.backoff[h] = 0.0
        else:
            model.backoff[h] = math.log10((1.0 - kept) / (1.0 - lower))


def _close_prefixes(model: NGramModel) -> None:
    """Add any missing history n-gram with its backoff-resolved probability.

    Adding an entry whose value equals the resolved value leaves all scores unchanged.
    """
    for k in range(model.order, 1, -1):
        for g in [g for g in model.prob if len(g) == k]:
            h = g[:-1]
            if h not in model.prob:
                model.prob[h] = model.log_prob(h[:-1], h[-1])
    for h in list(model.backoff):
        if h not in model.prob:
            model.prob[h] = model.log_prob(h[:-1], h[-1])


def perplexity(model: NGramModel, sentences: Iterable, include_oov: bool = True) -> float:
    """10 ** (-mean log10 prob) over scored words plus one </s> per sentence.

    Without OOV, out-of-vocabulary words are skipped and reset the history.
    """
    total = 0.0
    n = 0
    for s in sentences:
        state = model.begin_state()
        for w in _as_words(s) + [EOS]:
            if w != EOS and not model.in_vocab(w):
                if include_oov:
                    total += model.log_prob(state.history, UNK)
                    n += 1
                state = LMState(())
                continue
            lp, state = model.score(state, w)
            total += lp
            n += 1
    if n == 0:
        raise UndefinedPerplexityError("no scored tokens")
    return 10.0 ** (-total / n)


def oov_rate(model: NGramModel, sentences: Iterable) -> float:
    words = [w for s in sentences for w in _as_words(s)]
    if not words:
        return 0.0
    return sum(1 for w in words if not model.in_vocab(w)) / len(words)


# --------------------------------------------------------------------------
# ARPA I/O
# --------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def write_arpa(model: NGramModel, path) -> None:
    by_order: dict[int, list] = defaultdict(list)
    for g in model.prob:
        by_order[len(g)].append(g)
    lines = ["", "\\data\\"]
    for k in range(1, model.order + 1):
        lines.append(f"ngram {k}={len(by_order[k])}")
    uni_rank = {w: i for i, w in enumerate([BOS, EOS, UNK] + list(model.vocab))}
    for k in range(1, model.order + 1):
        lines.append("")
        lines.append(f"\\{k}-grams:")
        if k == 1:
            grams = sorted(by_order[1], key=lambda g: uni_rank.get(g[0], len(uni_rank)))
        else:
            grams = sorted(by_order[k])
        for g in grams:
            row = [_fmt(model.prob[g]), " ".join(g)]
            if k < model.order and g in model.backoff:
                row.append(_fmt(model.backoff[g]))
            lines.append("\t".join(row))
    lines += ["", "\\end\\", ""]
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines))


def read_arpa(path) -> NGramModel:
    with open(path, encoding="utf-8") as f:
        raw_lines = f.read().split("\n")

    lines = iter(enumerate(raw_lines, start=1))
    counts: dict[int, int] = {}
    lineno = 0

    def next_nonblank():
        nonlocal lineno
        for lineno, line in lines:
            line = line.strip()
            if line:
                return line
        raise ArpaParseError(lineno + 1, "unexpected end of file")

    line = next_nonblank()
    if line != "\\data\\":
        raise ArpaParseError(lineno, f"expected \\data\\, got {line!r}")
    line = next_nonblank()
    while line.startswith("ngram "):
        try:
            k, n = line[6:].split("=")
            counts[int(k)] = int(n)
        except ValueError:
            raise ArpaParseError(lineno, f"bad count line {line!r}") from None
        line = next_nonblank()
    if not counts:
        raise ArpaParseError(lineno, "no ngram counts in \\data\\ section")
    order = max(counts)
    if sorted(counts) != list(range(1, order + 1)):
        raise ArpaParseError(lineno, "ngram counts must cover orders 1..n")

    prob: dict[tuple[str, ...], float] = {}
    backoff: dict[tuple[str, ...], float] = {}
    unigrams: list[str] = []
    for k in range(1, order + 1):
        if line != f"\\{k}-grams:":
            raise ArpaParseError(lineno, f"expected \\{k}-grams:, got {line!r}")
        seen = 0
        while True:
            line = next_nonblank()
            if line.startswith("\\"):
                break
            parts = line.split()
            if len(parts) not in (k + 1, k + 2):
                raise ArpaParseError(lineno, f"expected {k}-gram entry, got {line!r}")
            try:
                lp = float(parts[0])
                bo = float(parts[k + 1]) if len(parts) == k + 2 else None
            except ValueError:
                raise ArpaParseError(lineno, f"bad number in {line!r}") from None
            g = tuple(parts[1 : k + 1])
            prob[g] = lp
            if bo is not None:
                backoff[g] = bo
            if k == 1:
                unigrams.append(g[0])
            seen += 1
        if seen != counts[k]:
            raise ArpaParseError(lineno, f"{k}-gram count mismatch: header {counts[k]}, found {seen}")
    if line != "\\end\\":
        raise ArpaParseError(lineno, f"expected \\end\\, got {line!r}")

    vocab_words = [w for w in unigrams if w not in (BOS, EOS, UNK)]
    if (UNK,) not in prob:
        # files from other tools may omit <unk>; give it no mass
        prob[(UNK,)] = NO_PROB
    if (EOS,) not in prob:
        prob[(EOS,)] = NO_PROB
    return NGramModel(order, {w: i for i, w in enumerate(vocab_words)}, prob, backoff)
