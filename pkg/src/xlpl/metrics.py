"""Word and character error rates via Levenshtein alignment."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Iterable, Sequence


class UndefinedRateError(ValueError):
    """Raised when the reference is empty and a rate cannot be formed."""


@dataclass(frozen=True)
class ErrorRateReport:
    substitutions: int
    insertions: int
    deletions: int
    ref_length: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def rate(self) -> float:
        if self.ref_length == 0:
            raise UndefinedRateError("empty reference")
        return self.errors / self.ref_length

    def __add__(self, other: "ErrorRateReport") -> "ErrorRateReport":
        return ErrorRateReport(
            self.substitutions + other.substitutions,
            self.insertions + other.insertions,
            self.deletions + other.deletions,
            self.ref_length + other.ref_length,
        )

    def as_dict(self) -> dict:
        return {
            "substitutions": self.substitutions,
            "insertions": self.insertions,
            "deletions": self.deletions,
            "ref_length": self.ref_length,
            "rate": self.rate,
        }


EMPTY = ErrorRateReport(0, 0, 0, 0)


def edit_ops(hyp: Sequence[Hashable], ref: Sequence[Hashable]) -> tuple[int, int, int]:
    """Minimal unit-cost alignment as (substitutions, insertions, deletions).

    The backtrace prefers substitution (or match), then insertion, then deletion.
    """
    n, m = len(ref), len(hyp)
    # dist[i][j]: cost of aligning ref[:i] with hyp[:j]
    dist = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        dist[i][0] = i
    for j in range(1, m + 1):
        dist[0][j] = j
    for i in range(1, n + 1):
        r = ref[i - 1]
        row, prev = dist[i], dist[i - 1]
        for j in range(1, m + 1):
            sub = prev[j - 1] + (r != hyp[j - 1])
            ins = row[j - 1] + 1
            dele = prev[j] + 1
            row[j] = min(sub, ins, dele)

    s = ins_ = d = 0
    i, j = n, m
    while i > 0 or j > 0:
        cur = dist[i][j]
        if i > 0 and j > 0 and cur == dist[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif j > 0 and cur == dist[i][j - 1] + 1:
            ins_ += 1
            j -= 1
        else:
            d += 1
            i -= 1
    return s, ins_, d


def edit_distance(a: Sequence[Hashable], b: Sequence[Hashable]) -> int:
    return sum(edit_ops(a, b))


def _report(hyp, ref) -> ErrorRateReport:
    s, i, d = edit_ops(hyp, ref)
    return ErrorRateReport(s, i, d, len(ref))


def _words(x) -> list:
    return x.split() if isinstance(x, str) else list(x)


def wer(hyp, ref) -> ErrorRateReport:
    """Word-level report. Strings are split on whitespace."""
    ref_w = _words(ref)
    if not ref_w:
        raise UndefinedRateError("empty reference")
    return _report(_words(hyp), ref_w)


def cer(hyp, ref) -> ErrorRateReport:
    """Character-level report; the single space between words counts as a character."""
    ref_c = " ".join(_words(ref))
    if not ref_c:
        raise UndefinedRateError("empty reference")
    return _report(" ".join(_words(hyp)), ref_c)


def corpus_report(pairs: Iterable[tuple], level: str = "word") -> ErrorRateReport:
    """Micro-averaged report over (hyp, ref) pairs; empty references contribute insertions only."""
    total = EMPTY
    for hyp, ref in pairs:
        if level == "word":
            total = total + _report(_words(hyp), _words(ref))
        elif level == "char":
            total = total + _report(" ".join(_words(hyp)), " ".join(_words(ref)))
        else:
            raise ValueError(f"unknown level {level!r}")
    if total.ref_length == 0:
        raise UndefinedRateError("empty reference corpus")
    return total


def corpus_wer(hyps: Sequence, refs: Sequence) -> float:
    return corpus_report(zip(hyps, refs, strict=True), "word").rate


def corpus_cer(hyps: Sequence, refs: Sequence) -> float:
    return corpus_report(zip(hyps, refs, strict=True), "char").rate
