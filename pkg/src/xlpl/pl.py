"""Cross-lingual pseudo-labeling.

Phase 1 starts the target model from the source model and trains it on
pseudo-labels (PLs) produced by LM-constrained beam search, refreshing the
teacher snapshot every ``refresh_interval`` updates. Phase 2 restarts from
the source model, fine-tunes on PLs from the Phase-1 model decoded with a
larger beam, then continues LM-free: greedy PLs from a delayed snapshot go
through a FIFO cache and can be reused several times.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import ctc
from .am import AcousticModel, Example, Trainer, TrainConfig, make_batches
from .decoder import DecodeParams, Lexicon, decode_many, greedy_words
from .lm import NGramModel
from .metrics import ErrorRateReport, corpus_report
from .synthdata import Utterance, nested_subset
from .textnorm import TokenSet, encode, normalize

log = logging.getLogger(__name__)


class NoUsablePseudoLabelsError(RuntimeError):
    """Every pseudo-label of the bootstrap pass was empty or unalignable."""


class TokenSetMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class PLRecord:
    uid: str
    words: tuple[str, ...]
    teacher: int
    params: DecodeParams | None
    score: float

    @property
    def text(self) -> str:
        return " ".join(self.words)


class PLCache:
    """FIFO store of pseudo-labels; each record may be drawn ``max_reuse`` times."""

    def __init__(self, capacity: int = 64, max_reuse: int = 4):
        if capacity < 1 or max_reuse < 1:
            raise ValueError("capacity and max_reuse must be >= 1")
        self.capacity = capacity
        self.max_reuse = max_reuse
        self._items: deque[list] = deque()
        self.evicted = 0

    def __len__(self) -> int:
        return len(self._items)

    def push(self, rec: PLRecord) -> None:
        self._items.append([rec, self.max_reuse])
        while len(self._items) > self.capacity:
            self._items.popleft()
            self.evicted += 1

    def draw(self, rng: np.random.Generator) -> PLRecord:
        if not self._items:
            raise LookupError("cache is empty")
        i = int(rng.integers(len(self._items)))
        slot = self._items[i]
        slot[1] -= 1
        if slot[1] == 0:
            del self._items[i]
        return slot[0]

    def records(self) -> list[PLRecord]:
        return [s[0] for s in self._items]


@dataclass(frozen=True)
class PhaseConfig:
    phase: int = 1
    refresh_interval: int = 200
    beam_size: int = 20
    alpha: float = 1.0
    beta: float = 0.0
    specaug_start: int = 50
    max_iterations: int = 1000
    cache_capacity: int = 64
    max_reuse: int = 4
    p_reuse: float = 0.75
    snapshot_delay: int = 1
    bootstrap_beam: int | None = None
    stage_a_iterations: int = 700
    eval_interval: int = 100
    train: TrainConfig = TrainConfig()

    def __post_init__(self):
        if self.phase not in (1, 2):
            raise ValueError("phase must be 1 or 2")
        if self.refresh_interval < 1:
            raise ValueError("refresh_interval must be >= 1")
        if self.beam_size < 1 or self.max_iterations < 1:
            raise ValueError("beam_size and max_iterations must be >= 1")
        if self.bootstrap_beam is not None and self.bootstrap_beam < self.beam_size:
            raise ValueError("phase-2 bootstrap beam must not be smaller than the phase-1 beam")
        if not 0.0 <= self.p_reuse <= 1.0:
            raise ValueError("p_reuse must lie in [0, 1]")
        if self.cache_capacity < 1 or self.max_reuse < 1 or self.snapshot_delay < 0:
            raise ValueError("invalid cache settings")

    @property
    def pl_params(self) -> DecodeParams:
        return DecodeParams(self.alpha, self.beta, self.beam_size)

    @property
    def bootstrap_params(self) -> DecodeParams:
        return DecodeParams(self.alpha, self.beta, self.bootstrap_beam or 5 * self.beam_size)

    def train_config(self, iterations: int) -> TrainConfig:
        return replace(self.train, specaug_start=self.specaug_start, max_iterations=iterations)


PAPER_PHASE_CONFIG = PhaseConfig(
    refresh_interval=4000,
    beam_size=100,
    alpha=1.0,
    beta=0.0,
    specaug_start=1000,
    max_iterations=50000,
    bootstrap_beam=500,
)


@dataclass
class PhaseResult:
    model: AcousticModel
    history: list[dict] = field(default_factory=list)
    dev: list[tuple[int, float]] = field(default_factory=list)
    pl_dumps: list[list[PLRecord]] = field(default_factory=list)
    best_dev: float = math.inf


# ----------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------


def _check_tokens(model: AcousticModel, lexicon: Lexicon) -> TokenSet:
    ts = lexicon.ts
    if model.spec.num_tokens != len(ts):
        raise TokenSetMismatchError(f"model emits {model.spec.num_tokens} tokens, lexicon uses {len(ts)}")
    return ts


def greedy_transcripts(model: AcousticModel, utts: Sequence[Utterance], ts: TokenSet) -> list[str]:
    return [" ".join(greedy_words(model.forward(u.feats), ts)) for u in utts]


def beam_transcripts(model, utts, lexicon, lm, params, workers=1) -> list[str]:
    logits = [model.forward(u.feats) for u in utts]
    return [h[0].text for h in decode_many(logits, lexicon, lm, params, workers)]


def evaluate(model, utts, ts, lexicon=None, lm=None, params=None, workers=1) -> tuple[ErrorRateReport, ErrorRateReport]:
    """Corpus (WER, CER) reports; beam search with the LM when ``lexicon`` is given, greedy otherwise."""
    if lexicon is None:
        hyps = greedy_transcripts(model, utts, ts)
    else:
        hyps = beam_transcripts(model, utts, lexicon, lm, params or DecodeParams(), workers)
    pairs = list(zip(hyps, [u.text for u in utts]))
    return corpus_report(pairs, "word"), corpus_report(pairs, "char")


def dev_scorer(dev: Sequence[Utterance] | None, ts: TokenSet) -> Callable[[AcousticModel], float] | None:
    """Greedy dev WER; reads dev references only, never the unlabeled-set ones."""
    if not dev:
        return None

    def score(model: AcousticModel) -> float:
        return evaluate(model, dev, ts)[0].rate

    return score


def labeled_examples(utts: Sequence[Utterance], ts: TokenSet) -> list[Example]:
    return [Example(u.uid, u.feats, tuple(encode(normalize(u.text, ts), ts))) for u in utts]


def _to_example(utt: Utterance, rec: PLRecord, ts: TokenSet) -> Example:
    return Example(utt.uid, utt.feats, tuple(encode(normalize(rec.text, ts), ts)))


def _filter(model, utts_by_id, records, ts):
    kept, empty, infeasible = [], 0, 0
    for rec in records:
        if not rec.words:
            empty += 1
            continue
        ex = _to_example(utts_by_id[rec.uid], rec, ts)
        if not ctc.is_feasible(ex.target, model.spec.out_frames(ex.feats.shape[0])):
            infeasible += 1
            continue
        kept.append(ex)
    return kept, empty, infeasible


def generate_pls(
    teacher: AcousticModel,
    utts: Sequence[Utterance],
    lexicon: Lexicon,
    lm: NGramModel | None,
    params: DecodeParams,
    version: int,
    workers: int = 1,
) -> list[PLRecord]:
    """Beam-search PLs from a frozen snapshot; order follows ``utts``."""
    logits = [teacher.forward(u.feats) for u in utts]
    hyps = decode_many(logits, lexicon, lm, params, workers)
    return [PLRecord(u.uid, h[0].words, version, params, h[0].score) for u, h in zip(utts, hyps)]


def _pl_wer(records: Sequence[PLRecord], references: dict[str, str] | None) -> float | None:
    if not references:
        return None
    pairs = [(r.text, references[r.uid]) for r in records if r.uid in references]
    return corpus_report(pairs, "word").rate if pairs else None


class _Selector:
    """Keeps the checkpoint with the lowest dev score."""

    def __init__(self, score_fn, initial: AcousticModel):
        self.score_fn = score_fn
        self.best = initial.copy()
        self.best_score = math.inf
        self.log: list[tuple[int, float]] = []

    def offer(self, it: int, model: AcousticModel) -> None:
        if self.score_fn is None:
            self.best = model.copy()
            return
        s = self.score_fn(model)
        self.log.append((it, s))
        if s < self.best_score:
            self.best, self.best_score = model.copy(), s


# ----------------------------------------------------------------------
# zero-shot
# ----------------------------------------------------------------------


def zero_shot_eval(
    source_model: AcousticModel,
    lm: NGramModel | None,
    lexicon: Lexicon,
    dev: Sequence[Utterance],
    params: DecodeParams = DecodeParams(),
    workers: int = 1,
) -> dict[str, tuple[ErrorRateReport, ErrorRateReport]]:
    """Source model on target audio: greedy and LM-constrained beam search."""
    ts = _check_tokens(source_model, lexicon)
    return {
        "greedy": evaluate(source_model, dev, ts),
        "beam": evaluate(source_model, dev, ts, lexicon, lm, params, workers),
    }


# ----------------------------------------------------------------------
# phase 1
# ----------------------------------------------------------------------


def phase1_ipl(
    source_model: AcousticModel,
    unlabeled: Sequence[Utterance],
    lm: NGramModel | None,
    lexicon: Lexicon,
    cfg: PhaseConfig = PhaseConfig(),
    dev: Sequence[Utterance] | None = None,
    references: dict[str, str] | None = None,
    workers: int = 1,
) -> PhaseResult:
    """IPL from the source model with LM-constrained PLs.

    ``references`` (hidden transcripts of the unlabeled set) are used only to
    log PL quality; ``dev`` only selects the returned checkpoint.
    """
    if cfg.phase != 1:
        raise ValueError("phase1_ipl needs a phase-1 config")
    if not unlabeled:
        raise ValueError("no unlabeled utterances")
    ts = _check_tokens(source_model, lexicon)
    by_id = {u.uid: u for u in unlabeled}
    student = source_model.copy()
    trainer = Trainer(student, cfg.train_config(cfg.max_iterations))
    selector = _Selector(dev_scorer(dev, ts), student)
    result = PhaseResult(student)
    version = 0
    teacher = source_model.copy()
    teacher_step = 0
    prev_kept: list[Example] = []

    while trainer.iteration < cfg.max_iterations:
        records = generate_pls(teacher, unlabeled, lexicon, lm, cfg.pl_params, version, workers)
        kept, empty, infeasible = _filter(student, by_id, records, ts)
        entry = {
            "refresh": version,
            "iteration": trainer.iteration,
            "teacher_step": teacher_step,
            "teacher_hash": teacher.param_hash(),
            "pl_wer": _pl_wer(records, references),
            "kept": len(kept),
            "empty": empty,
            "infeasible": infeasible,
        }
        result.history.append(entry)
        result.pl_dumps.append(records)
        log.info("phase1 refresh %s", entry)
        if not kept:
            if version == 0:
                raise NoUsablePseudoLabelsError(
                    f"no usable pseudo-labels: {empty} empty, {infeasible} infeasible of {len(records)}"
                )
            log.warning("refresh %d produced no usable PLs; keeping previous set", version)
            kept = prev_kept
        prev_kept = kept
        trainer.reset_queue()
        stop = min(cfg.max_iterations, trainer.iteration + cfg.refresh_interval)
        while trainer.iteration < stop:
            trainer.step(trainer.next_batch(kept))
            if trainer.iteration % cfg.eval_interval == 0 or trainer.iteration == cfg.max_iterations:
                selector.offer(trainer.iteration, student)
        teacher = student.copy()
        teacher_step = trainer.iteration
        version += 1

    result.model = selector.best
    result.dev = selector.log
    result.best_dev = selector.best_score
    return result


# ----------------------------------------------------------------------
# phase 2
# ----------------------------------------------------------------------


def phase2_slimipl(
    source_model: AcousticModel,
    phase1_model: AcousticModel,
    unlabeled: Sequence[Utterance],
    lexicon: Lexicon,
    lm: NGramModel | None,
    cfg: PhaseConfig = PhaseConfig(phase=2),
    dev: Sequence[Utterance] | None = None,
    references: dict[str, str] | None = None,
    workers: int = 1,
) -> PhaseResult:
    """Stage A: fine-tune the source model on larger-beam PLs of the Phase-1 model.
    Stage B: LM-free continuous training with a PL cache and a delayed snapshot.
    """
    if cfg.phase != 2:
        raise ValueError("phase2_slimipl needs a phase-2 config")
    if not unlabeled:
        raise ValueError("no unlabeled utterances")
    ts = _check_tokens(source_model, lexicon)
    by_id = {u.uid: u for u in unlabeled}
    student = source_model.copy()
    total = cfg.stage_a_iterations + cfg.max_iterations
    trainer = Trainer(student, cfg.train_config(total))
    selector = _Selector(dev_scorer(dev, ts), student)
    result = PhaseResult(student)

    records = generate_pls(phase1_model, unlabeled, lexicon, lm, cfg.bootstrap_params, 0, workers)
    kept, empty, infeasible = _filter(student, by_id, records, ts)
    result.pl_dumps.append(records)
    result.history.append(
        {
            "stage": "A",
            "iteration": 0,
            "teacher_hash": phase1_model.param_hash(),
            "pl_wer": _pl_wer(records, references),
            "kept": len(kept),
            "empty": empty,
            "infeasible": infeasible,
        }
    )
    if not kept:
        raise NoUsablePseudoLabelsError(f"no usable pseudo-labels: {empty} empty, {infeasible} infeasible")
    while trainer.iteration < cfg.stage_a_iterations:
        trainer.step(trainer.next_batch(kept))
        if trainer.iteration % cfg.eval_interval == 0:
            selector.offer(trainer.iteration, student)

    rng = np.random.default_rng([cfg.train.seed, 2])
    cache = PLCache(cfg.cache_capacity, cfg.max_reuse)
    # (version, step, frozen model); the teacher is the oldest kept snapshot
    snapshots = deque([(1, trainer.iteration, student.copy())], maxlen=cfg.snapshot_delay + 1)
    order: list[list[Utterance]] = []
    fresh = reused = fallback = idle = 0
    for k in range(cfg.max_iterations):
        if k and k % cfg.refresh_interval == 0:
            snapshots.append((snapshots[-1][0] + 1, trainer.iteration, student.copy()))
        version, teacher_step, teacher = snapshots[0]
        batch = None
        if rng.random() < cfg.p_reuse:
            if len(cache):
                batch = _draw_batch(cache, rng, by_id, cfg.train.batch_frames)
                reused += 1
            else:
                fallback += 1
                log.info("cache empty at reuse attempt, step %d: using fresh PLs", trainer.iteration)
        if batch is None:
            if not order:
                shuffled = make_batches([Example(u.uid, u.feats, ()) for u in unlabeled], cfg.train.batch_frames, rng)
                order = [[by_id[ex.uid] for ex in b] for b in shuffled]
            batch = []
            for u in order.pop(0):
                words = tuple(greedy_words(teacher.forward(u.feats), ts))
                rec = PLRecord(u.uid, words, version, None, math.nan)
                cache.push(rec)
                batch.append(rec)
            fresh += 1
        examples, _, _ = _filter(student, by_id, batch, ts)
        if examples:
            trainer.step(examples)
        else:
            idle += 1
        if (k + 1) % cfg.eval_interval == 0 or k + 1 == cfg.max_iterations:
            selector.offer(trainer.iteration, student)

    result.history.append(
        {"stage": "B", "fresh": fresh, "reused": reused, "fallback": fallback, "idle": idle, "evicted": cache.evicted}
    )
    result.model = selector.best
    result.dev = selector.log
    result.best_dev = selector.best_score
    return result


def _draw_batch(cache: PLCache, rng, by_id, batch_frames: int) -> list[PLRecord]:
    out, frames = [], 0
    while len(cache) and frames < batch_frames:
        rec = cache.draw(rng)
        out.append(rec)
        frames += by_id[rec.uid].num_frames
    return out


# ----------------------------------------------------------------------
# end-to-end transfer and data scaling
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class PipelineConfig:
    hidden: int = 64
    source_train: TrainConfig = TrainConfig(max_iterations=600, warmup_steps=100, eval_interval=100)
    target_train: TrainConfig = TrainConfig(max_iterations=1000, warmup_steps=100, eval_interval=100)
    phase1: PhaseConfig = PhaseConfig()
    phase2: PhaseConfig = PhaseConfig(
        phase=2, max_iterations=400, stage_a_iterations=1000, train=TrainConfig(warmup_steps=200)
    )
    lm_order: int = 4
    eval_params: DecodeParams = DecodeParams(1.0, 0.0, 20)
    seed: int = 0

    def seeded(self, seed: int) -> "PipelineConfig":
        """Same settings with every random stream derived from ``seed``."""
        return replace(
            self,
            seed=seed,
            source_train=replace(self.source_train, seed=seed),
            target_train=replace(self.target_train, seed=seed + 1),
            phase1=replace(self.phase1, train=replace(self.phase1.train, seed=seed + 2)),
            phase2=replace(self.phase2, train=replace(self.phase2.train, seed=seed + 3)),
        )


def train_source(bench, cfg: PipelineConfig, ts: TokenSet, subset: Sequence[Utterance] | None = None) -> AcousticModel:
    from .am import ArchSpec, train_supervised

    spec = ArchSpec(bench.config.feat_dim, len(ts), hidden=cfg.hidden)
    init = AcousticModel.init(spec, np.random.default_rng([cfg.seed, 10]))
    data = labeled_examples(subset if subset is not None else bench.source_train, ts)
    model, _ = train_supervised(init, data, cfg.source_train, evaluate=dev_scorer(bench.source_dev, ts))
    return model


def train_target_supervised(bench, cfg: PipelineConfig, ts: TokenSet) -> AcousticModel:
    """Topline: the unlabeled target audio with its hidden transcripts as labels."""
    from .am import ArchSpec, train_supervised

    spec = ArchSpec(bench.config.feat_dim, len(ts), hidden=cfg.hidden)
    init = AcousticModel.init(spec, np.random.default_rng([cfg.seed, 11]))
    utts = [replace(u, text=bench.target_sealed[u.uid]) for u in bench.target_unlabeled]
    model, _ = train_supervised(init, labeled_examples(utts, ts), cfg.target_train, evaluate=dev_scorer(bench.target_dev, ts))
    return model


def target_lm_and_lexicon(bench, cfg: PipelineConfig, ts: TokenSet):
    from .lm import train_lm

    lm = train_lm(bench.target_text, order=cfg.lm_order)
    return lm, Lexicon.from_words(bench.lexicon_words(), ts)


def run_transfer(bench, cfg: PipelineConfig, ts: TokenSet, workers: int = 1, supervised: bool = True) -> dict:
    """All systems of the transfer comparison, scored by WER on the target test set."""
    lm, lexicon = target_lm_and_lexicon(bench, cfg, ts)
    source = train_source(bench, cfg, ts)
    test = bench.target_test
    zs = zero_shot_eval(source, lm, lexicon, test, cfg.eval_params, workers)
    p1 = phase1_ipl(source, bench.target_unlabeled, lm, lexicon, cfg.phase1, bench.target_dev, bench.target_sealed, workers)
    p2 = phase2_slimipl(
        source, p1.model, bench.target_unlabeled, lexicon, lm, cfg.phase2, bench.target_dev, bench.target_sealed, workers
    )
    out = {
        "zero_shot_greedy": zs["greedy"][0].rate,
        "zero_shot_beam": zs["beam"][0].rate,
        "phase1": evaluate(p1.model, test, ts)[0].rate,
        "phase2": evaluate(p2.model, test, ts)[0].rate,
        "phase1_beam": evaluate(p1.model, test, ts, lexicon, lm, cfg.eval_params, workers)[0].rate,
        "phase2_beam": evaluate(p2.model, test, ts, lexicon, lm, cfg.eval_params, workers)[0].rate,
        "pl_wer": [h["pl_wer"] for h in p1.history],
    }
    if supervised:
        out["supervised"] = evaluate(train_target_supervised(bench, cfg, ts), test, ts)[0].rate
    return out


def data_scaling_experiment(
    bench,
    cfg: PipelineConfig,
    ts: TokenSet,
    fractions: Sequence[float],
    axis: str,
    workers: int = 1,
) -> list[dict]:
    """Phase-1 greedy test WER per fraction of source labeled or target unlabeled data.

    Subsets are nested and keep each speaker's share (see ``nested_subset``).
    """
    if axis not in ("source-labeled", "target-unlabeled"):
        raise ValueError(f"unknown axis {axis!r}")
    if not fractions or any(not 0.0 < f <= 1.0 for f in fractions):
        raise ValueError("fractions must lie in (0, 1]")
    lm, lexicon = target_lm_and_lexicon(bench, cfg, ts)
    fixed_source = train_source(bench, cfg, ts) if axis == "target-unlabeled" else None
    rows = []
    for f in fractions:
        if axis == "source-labeled":
            subset = nested_subset(bench.source_train, f, cfg.seed)
            source = train_source(bench, cfg, ts, subset)
            unlabeled = bench.target_unlabeled
        else:
            source = fixed_source
            subset = unlabeled = nested_subset(bench.target_unlabeled, f, cfg.seed)
        p1 = phase1_ipl(source, unlabeled, lm, lexicon, cfg.phase1, bench.target_dev, None, workers)
        rows.append({"fraction": f, "utterances": len(subset), "wer": evaluate(p1.model, bench.target_test, ts)[0].rate})
    return rows


def monotonicity_report(rows: Sequence[dict]) -> dict:
    """Whether WER is non-increasing as the fraction grows."""
    ordered = sorted(rows, key=lambda r: r["fraction"])
    pairs = list(zip(ordered, ordered[1:]))
    return {
        "monotone": all(b["wer"] <= a["wer"] for a, b in pairs),
        "full_le_smallest": ordered[-1]["wer"] <= ordered[0]["wer"],
        "violations": [(a["fraction"], b["fraction"]) for a, b in pairs if b["wer"] > a["wer"]],
    }
