"""Shared token set and text normalization.

Raw text is lowercased, stripped of punctuation (apostrophe and hyphen
survive), transliterated to the token set by diacritic stripping and a
small fallback table, and any character that still does not map is dropped.
"""

from __future__ import annotations

import string
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

BLANK_MARK = "#blank"
WB_MARK = "#wb"

LATIN = string.ascii_lowercase

# Alphabets of the source languages (en, de, es, fr, rw); the union plus
# apostrophe, hyphen and the word boundary gives 54 symbols.
_EXTRA_LETTERS = {
    "de": "öäüß",
    "es": "áéíóúñüý",
    "fr": "àâæçéèêëîïôœùûüÿ",
}

# Letters that do not decompose under NFKD.
_TRANSLIT = {
    "ß": "ss",
    "æ": "ae",
    "œ": "oe",
    "ø": "o",
    "đ": "d",
    "ð": "d",
    "þ": "th",
    "ł": "l",
    "ı": "i",
    "ŋ": "n",
    "ƙ": "k",
    "ɓ": "b",
    "ɗ": "d",
    "ƴ": "y",
}

# Typographic variants folded onto the two kept punctuation marks.
_PUNCT_FOLD = {
    "’": "'",
    "‘": "'",
    "ʼ": "'",
    "`": "'",
    "‐": "-",
    "‑": "-",
}

KEPT_PUNCT = "'-"


class InvalidTokenError(ValueError):
    """A token index or symbol does not belong to the token set."""


@dataclass(frozen=True)
class TokenSet:
    """Character alphabet plus the CTC blank and word-boundary tokens.

    Indices are dense: ``symbols[i]`` is the symbol for index ``i``, where the
    blank and word-boundary entries hold the ``#blank``/``#wb`` markers.
    """

    symbols: tuple[str, ...]
    blank_id: int
    word_boundary_id: int
    _index: dict = field(init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        n = len(self.symbols)
        if not (0 <= self.blank_id < n and 0 <= self.word_boundary_id < n):
            raise ValueError("special token ids out of range")
        if self.blank_id == self.word_boundary_id:
            raise ValueError("blank and word boundary must be distinct")
        if self.symbols[self.blank_id] != BLANK_MARK or self.symbols[self.word_boundary_id] != WB_MARK:
            raise ValueError("special token slots must hold the #blank/#wb markers")
        chars = self.characters
        if len(set(chars)) != len(chars):
            raise ValueError("duplicate characters in token set")
        for c in chars:
            if len(c) != 1:
                raise ValueError(f"token {c!r} is not a single character")
        for c in KEPT_PUNCT:
            if c not in chars:
                raise ValueError(f"token set must contain {c!r}")
        object.__setattr__(
            self,
            "_index",
            {s: i for i, s in enumerate(self.symbols) if i not in (self.blank_id, self.word_boundary_id)},
        )

    @classmethod
    def from_characters(cls, chars: Iterable[str]) -> "TokenSet":
        """Blank at 0, word boundary at 1, characters from 2 in the given order."""
        chars = list(dict.fromkeys(chars))
        for c in KEPT_PUNCT:
            if c not in chars:
                chars.append(c)
        return cls((BLANK_MARK, WB_MARK, *chars), 0, 1)

    @property
    def characters(self) -> list[str]:
        return [s for i, s in enumerate(self.symbols) if i not in (self.blank_id, self.word_boundary_id)]

    @property
    def character_ids(self) -> list[int]:
        return [i for i in range(len(self.symbols)) if i not in (self.blank_id, self.word_boundary_id)]

    def __len__(self) -> int:
        return len(self.symbols)

    def __contains__(self, ch: str) -> bool:
        return ch in self._index

    def index(self, ch: str) -> int:
        try:
            return self._index[ch]
        except KeyError:
            raise InvalidTokenError(f"character {ch!r} not in token set") from None

    def is_character(self, idx: int) -> bool:
        return 0 <= idx < len(self.symbols) and idx != self.blank_id and idx != self.word_boundary_id

    def spell(self, word: str) -> tuple[int, ...]:
        return tuple(self.index(c) for c in word)

    def unspell(self, ids: Sequence[int]) -> str:
        out = []
        for i in ids:
            if not self.is_character(i):
                raise InvalidTokenError(f"index {i} is not a character of the token set")
            out.append(self.symbols[i])
        return "".join(out)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.symbols) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "TokenSet":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if BLANK_MARK not in lines or WB_MARK not in lines:
            raise ValueError(f"{path}: token file needs {BLANK_MARK} and {WB_MARK} lines")
        return cls(tuple(lines), lines.index(BLANK_MARK), lines.index(WB_MARK))


def latin_tokens() -> TokenSet:
    return TokenSet.from_characters(LATIN + KEPT_PUNCT)


def multilingual_tokens() -> TokenSet:
    """The 54-symbol union alphabet (53 characters plus the word boundary)."""
    chars = list(LATIN)
    for letters in _EXTRA_LETTERS.values():
        for c in letters:
            if c not in chars:
                chars.append(c)
    return TokenSet.from_characters(chars + list(KEPT_PUNCT))


PRESETS = {"latin": latin_tokens, "multi54": multilingual_tokens}


@dataclass(frozen=True)
class NormalizedText:
    """Words as tuples of token indices; never contains empty words."""

    words: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "words", tuple(tuple(w) for w in self.words))
        if any(len(w) == 0 for w in self.words):
            raise ValueError("NormalizedText cannot contain empty words")

    def __len__(self) -> int:
        return len(self.words)

    def to_str(self, ts: TokenSet) -> str:
        return " ".join(ts.unspell(w) for w in self.words)

    def to_words(self, ts: TokenSet) -> list[str]:
        return [ts.unspell(w) for w in self.words]

    @classmethod
    def from_words(cls, words: Iterable[str], ts: TokenSet) -> "NormalizedText":
        return cls(tuple(ts.spell(w) for w in words if w))


def _map_char(ch: str, ts: TokenSet) -> str:
    """Return the token-set spelling of one lowercased character ('' if unmappable)."""
    if ch in ts:
        return ch
    ch = _PUNCT_FOLD.get(ch, ch)
    if ch in ts:
        return ch
    cat = unicodedata.category(ch)
    if cat.startswith("P") or cat == "Nd":
        return ""
    if ch in _TRANSLIT:
        sub = _TRANSLIT[ch]
    else:
        sub = "".join(c for c in unicodedata.normalize("NFKD", ch) if not unicodedata.combining(c))
    return "".join(c for c in sub.lower() if c in ts)


def normalize(raw: str, ts: TokenSet) -> NormalizedText:
    words = []
    for chunk in raw.lower().split():
        spelled = "".join(_map_char(ch, ts) for ch in chunk)
        if spelled:
            words.append(ts.spell(spelled))
    return NormalizedText(tuple(words))


def normalize_str(raw: str, ts: TokenSet) -> str:
    return normalize(raw, ts).to_str(ts)


def encode(nt: NormalizedText, ts: TokenSet) -> list[int]:
    """Flatten words into one label sequence joined by the word-boundary id."""
    out: list[int] = []
    for k, word in enumerate(nt.words):
        if k:
            out.append(ts.word_boundary_id)
        for i in word:
            if not ts.is_character(i):
                raise InvalidTokenError(f"index {i} is not a character of the token set")
            out.append(i)
    return out


def decode(seq: Sequence[int], ts: TokenSet) -> NormalizedText:
    """Inverse of :func:`encode`; empty words from stray boundaries are dropped."""
    words: list[tuple[int, ...]] = []
    cur: list[int] = []
    for i in seq:
        if i == ts.word_boundary_id:
            if cur:
                words.append(tuple(cur))
            cur = []
        elif ts.is_character(i):
            cur.append(i)
        else:
            raise InvalidTokenError(f"index {i} cannot appear in a label sequence")
    if cur:
        words.append(tuple(cur))
    return NormalizedText(tuple(words))


def read_corpus(path, ts: TokenSet) -> list[NormalizedText]:
    """One sentence per line; lines that normalize to nothing are skipped."""
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            nt = normalize(line, ts)
            if nt.words:
                out.append(nt)
    return out
