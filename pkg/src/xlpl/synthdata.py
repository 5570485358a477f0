"""Synthetic "languages" for desk-scale cross-lingual transfer experiments.

A language is a lexicon over a shared alphabet, a word-bigram sentence
generator and one emission prototype (an F-dim vector) per character.
Speech is simulated by repeating each character's prototype for a random
number of frames and adding Gaussian noise; word boundaries emit a shared
silence prototype. A related language copies part of its parent's
prototypes through an orthogonal "accent" rotation, so an acoustic model
of the parent transfers partially.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.linalg import expm

DEFAULT_ALPHABET = "abcdefghijklmnop"
SILENCE_SEED = 7919


@dataclass
class SyntheticLanguage:
    name: str
    seed: int
    alphabet: str
    words: list[str]
    start_probs: np.ndarray
    successors: list[tuple[np.ndarray, np.ndarray]]
    prototypes: dict[str, np.ndarray]
    silence: np.ndarray
    accent: np.ndarray
    noise: float = 1.0
    duration: tuple[int, int] = (4, 7)
    sentence_words: tuple[int, int] = (2, 5)
    speaker_scale: float = 0.3
    copied: tuple[str, ...] = ()

    @property
    def feat_dim(self) -> int:
        return self.silence.shape[0]

    def sample_sentence(self, rng: np.random.Generator) -> list[str]:
        n = int(rng.integers(self.sentence_words[0], self.sentence_words[1] + 1))
        w = int(rng.choice(len(self.words), p=self.start_probs))
        out = [self.words[w]]
        for _ in range(n - 1):
            idx, p = self.successors[w]
            w = int(idx[rng.choice(len(idx), p=p)])
            out.append(self.words[w])
        return out

    def speaker_offset(self, speaker: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, 104729, speaker])
        return rng.normal(0.0, self.speaker_scale, self.feat_dim)


def _zipf(n: int, s: float = 1.0) -> np.ndarray:
    p = 1.0 / np.arange(1, n + 1) ** s
    return p / p.sum()


def _fresh_prototype(seed: int, ch: str, dim: int) -> np.ndarray:
    return np.random.default_rng([seed, ord(ch)]).normal(0.0, 1.0, dim)


def _accent_matrix(seed: int, dim: int, strength: float) -> np.ndarray:
    if strength == 0.0:
        return np.eye(dim)
    g = np.random.default_rng([seed, 31337]).normal(0.0, 1.0, (dim, dim))
    skew = (g - g.T) / math.sqrt(2 * dim)
    return expm(strength * skew)


def max_spellable(alphabet: str, word_len: tuple[int, int]) -> int:
    return sum(len(alphabet) ** k for k in range(word_len[0], word_len[1] + 1))


def make_language(
    seed: int,
    alphabet: str = DEFAULT_ALPHABET,
    vocab_size: int = 200,
    relatedness: float = 0.0,
    parent: SyntheticLanguage | None = None,
    feat_dim: int = 16,
    accent_strength: float = 0.3,
    noise: float = 1.0,
    word_len: tuple[int, int] = (3, 6),
    duration: tuple[int, int] = (4, 7),
    sentence_words: tuple[int, int] = (2, 5),
    successors: int = 6,
    share_words: bool = False,
    name: str = "",
) -> SyntheticLanguage:
    """Build a language; ``relatedness`` is the fraction of character prototypes copied from ``parent``."""
    if not 0.0 <= relatedness <= 1.0:
        raise ValueError("relatedness must lie in [0, 1]")
    if relatedness > 0 and parent is None:
        raise ValueError("relatedness > 0 needs a parent language")
    if parent is not None and parent.feat_dim != feat_dim:
        raise ValueError("parent feature dimension differs")
    if vocab_size < 1 or successors < 1:
        raise ValueError("vocab_size and successors must be positive")
    taken = set(parent.words) if parent is not None and not share_words else set()
    if vocab_size > max_spellable(alphabet, word_len) - len(taken):
        raise ValueError(f"cannot spell {vocab_size} distinct words with this alphabet and word length")

    rng = np.random.default_rng([seed, 1])
    chars = sorted(set(alphabet))
    accent = _accent_matrix(seed, feat_dim, accent_strength if parent is not None else 0.0)
    n_copy = int(round(relatedness * len(chars)))
    copied = sorted(rng.permutation(chars)[:n_copy].tolist()) if n_copy else []
    prototypes = {}
    for ch in chars:
        if ch in copied and ch in parent.prototypes:
            prototypes[ch] = accent @ parent.prototypes[ch]
        else:
            prototypes[ch] = _fresh_prototype(seed, ch, feat_dim)
    silence = _fresh_prototype(SILENCE_SEED, " ", feat_dim)

    words: list[str] = []
    seen = set(taken)
    wrng = np.random.default_rng([seed, 2])
    while len(words) < vocab_size:
        n = int(wrng.integers(word_len[0], word_len[1] + 1))
        w = "".join(wrng.choice(chars, size=n))
        if w not in seen:
            seen.add(w)
            words.append(w)

    srng = np.random.default_rng([seed, 3])
    k = min(successors, vocab_size)
    base = _zipf(vocab_size)
    succ = []
    for _ in range(vocab_size):
        idx = srng.choice(vocab_size, size=k, replace=False, p=base)
        p = _zipf(k, 1.2)
        succ.append((idx, p))
    start = base[srng.permutation(vocab_size)]

    return SyntheticLanguage(
        name=name or f"lang{seed}",
        seed=seed,
        alphabet="".join(chars),
        words=words,
        start_probs=start,
        successors=succ,
        prototypes=prototypes,
        silence=silence,
        accent=accent,
        noise=noise,
        duration=duration,
        sentence_words=sentence_words,
        copied=tuple(copied),
    )


def synthesize(
    lang: SyntheticLanguage,
    sentence,
    seed,
    speaker: int | None = None,
    duration: tuple[int, int] | None = None,
) -> np.ndarray:
    """Feature frames (float32, T x F) for a sentence given as words or a string."""
    words = sentence.split() if isinstance(sentence, str) else list(sentence)
    lo, hi = duration or lang.duration
    rng = np.random.default_rng(seed)
    offset = lang.speaker_offset(speaker) if speaker is not None else 0.0
    chunks = []
    for k, w in enumerate(words):
        if k:
            chunks.append(np.repeat(lang.silence[None], int(rng.integers(lo, hi + 1)), axis=0))
        for ch in w:
            if ch not in lang.prototypes:
                raise ValueError(f"character {ch!r} not spellable in {lang.name}")
            chunks.append(np.repeat(lang.prototypes[ch][None], int(rng.integers(lo, hi + 1)), axis=0))
    if not chunks:
        chunks.append(np.repeat(lang.silence[None], int(rng.integers(lo, hi + 1)), axis=0))
    x = np.concatenate(chunks, axis=0) + offset
    if lang.noise > 0:
        x = x + rng.normal(0.0, lang.noise, x.shape)
    return x.astype(np.float32)


# ----------------------------------------------------------------------
# datasets
# ----------------------------------------------------------------------


@dataclass
class Utterance:
    uid: str
    feats: np.ndarray
    speaker: str
    text: str | None = None

    @property
    def num_frames(self) -> int:
        return int(self.feats.shape[0])


@dataclass(frozen=True)
class BenchmarkConfig:
    source_seed: int = 11
    target_seed: int = 23
    relatedness: float = 0.7
    alphabet: str = DEFAULT_ALPHABET
    vocab_size: int = 80
    feat_dim: int = 16
    accent_strength: float = 0.3
    noise: float = 1.0
    source_train: int = 2000
    source_dev: int = 200
    target_unlabeled: int = 1000
    target_dev: int = 200
    target_test: int = 200
    lm_lines: int = 20000
    speakers: int = 20
    seed: int = 0

    def __post_init__(self):
        for name in ("source_train", "source_dev", "target_unlabeled", "target_dev", "target_test", "lm_lines"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


PRESETS = {
    "default": BenchmarkConfig(),
    "small": BenchmarkConfig(
        source_train=300, source_dev=50, target_unlabeled=150, target_dev=50, target_test=50, lm_lines=2000
    ),
}


@dataclass
class Benchmark:
    config: BenchmarkConfig
    source: SyntheticLanguage
    target: SyntheticLanguage
    source_train: list[Utterance]
    source_dev: list[Utterance]
    target_unlabeled: list[Utterance]
    target_sealed: dict[str, str]
    target_dev: list[Utterance]
    target_test: list[Utterance]
    target_text: list[str]

    def lexicon_words(self) -> list[str]:
        return sorted({w for line in self.target_text for w in line.split()})


def _split(lang, prefix, n, speakers, rng_seed, seen: set | None = None, keep_text=True):
    out = []
    rng = np.random.default_rng(rng_seed)
    for i in range(n):
        while True:
            sent = lang.sample_sentence(rng)
            if seen is None:
                break
            s = " ".join(sent)
            if s not in seen:
                break
        spk = i % speakers
        feats = synthesize(lang, sent, [rng_seed, i], speaker=spk)
        out.append(Utterance(f"{prefix}-{i:05d}", feats, f"spk{spk:03d}", " ".join(sent) if keep_text else None))
    return out


def make_benchmark(cfg: BenchmarkConfig = BenchmarkConfig()) -> Benchmark:
    """Labeled source audio, unlabeled target audio, target dev/test and a disjoint target text corpus."""
    lang_kw = dict(
        alphabet=cfg.alphabet,
        vocab_size=cfg.vocab_size,
        feat_dim=cfg.feat_dim,
        accent_strength=cfg.accent_strength,
        noise=cfg.noise,
    )
    source = make_language(cfg.source_seed, name="source", **lang_kw)
    target = make_language(cfg.target_seed, relatedness=cfg.relatedness, parent=source, name="target", **lang_kw)

    s = cfg.seed
    src_train = _split(source, "src-train", cfg.source_train, cfg.speakers, [s, 1])
    src_dev = _split(source, "src-dev", cfg.source_dev, cfg.speakers, [s, 2])
    unl = _split(target, "tgt-unl", cfg.target_unlabeled, cfg.speakers, [s, 3])
    tdev = _split(target, "tgt-dev", cfg.target_dev, cfg.speakers, [s, 4])
    ttest = _split(target, "tgt-test", cfg.target_test, cfg.speakers, [s, 5])
    sealed = {u.uid: u.text for u in unl}
    for u in unl:
        u.text = None

    audio_sents = set(sealed.values()) | {u.text for u in tdev} | {u.text for u in ttest}
    rng = np.random.default_rng([s, 6])
    text = []
    while len(text) < cfg.lm_lines:
        line = " ".join(target.sample_sentence(rng))
        if line not in audio_sents:
            text.append(line)
    return Benchmark(cfg, source, target, src_train, src_dev, unl, sealed, tdev, ttest, text)


def nested_subset(utts: Sequence[Utterance], fraction: float, seed: int) -> list[Utterance]:
    """Per-speaker prefix of a fixed shuffle: smaller fractions are always contained in larger ones."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    by_spk: dict[str, list[Utterance]] = {}
    for u in utts:
        by_spk.setdefault(u.speaker, []).append(u)
    keep = set()
    for spk in sorted(by_spk):
        group = by_spk[spk]
        rng = np.random.default_rng([seed, *spk.encode()])
        order = rng.permutation(len(group))
        n = int(math.floor(fraction * len(group) + 1e-9))
        keep.update(group[i].uid for i in order[:n])
    out = [u for u in utts if u.uid in keep]
    if not out:
        raise ValueError(f"fraction {fraction} leaves no utterances")
    return out


def coverage(words: Iterable[str], vocab: set) -> float:
    words = list(words)
    return sum(1 for w in words if w in vocab) / len(words) if words else 1.0


# ----------------------------------------------------------------------
# on-disk formats
# ----------------------------------------------------------------------


def write_features(path, feats: np.ndarray) -> None:
    feats = np.ascontiguousarray(feats, dtype="<f4")
    with open(path, "wb") as f:
        f.write(struct.pack("<II", *feats.shape))
        f.write(feats.tobytes())


def read_features(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise ValueError(f"{path}: truncated feature header")
    T, F = struct.unpack("<II", data[:8])
    if len(data) != 8 + 4 * T * F:
        raise ValueError(f"{path}: expected {T}x{F} float32 payload")
    return np.frombuffer(data, dtype="<f4", offset=8).reshape(T, F).astype(np.float32)


def write_manifest(path, utts: Sequence[Utterance], feat_dir, with_text: bool = True) -> None:
    path = Path(path)
    feat_dir = Path(feat_dir)
    feat_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for u in utts:
        fpath = feat_dir / f"{u.uid}.f32"
        write_features(fpath, u.feats)
        rec = {
            "id": u.uid,
            "feats": str(fpath.relative_to(path.parent)),
            "speaker": u.speaker,
            "num_frames": u.num_frames,
        }
        if with_text and u.text is not None:
            rec["text"] = u.text
        lines.append(json.dumps(rec, sort_keys=True))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path, load_features: bool = True) -> list[Utterance]:
    path = Path(path)
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            feats = read_features(path.parent / rec["feats"]) if load_features else np.zeros((rec["num_frames"], 0))
            out.append(Utterance(rec["id"], feats, rec.get("speaker", ""), rec.get("text")))
    return out


def write_sealed(path, refs: dict[str, str]) -> None:
    lines = [json.dumps({"id": k, "text": v}, sort_keys=True) for k, v in sorted(refs.items())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_jsonl_texts(path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                out[rec["id"]] = rec["text"]
    return out
