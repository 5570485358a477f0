"""Command-line entry point: one binary, one subcommand per pipeline stage.

Every subcommand reads an optional INI config (unknown sections or keys are
rejected), writes its outputs into ``--out`` and records a ``run.json`` with
the config hash, derived seeds, build id and SHA-256 of every artifact.
Logs go to stderr as JSON lines.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import math
import os
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .am import AcousticModel, ArchSpec, NaNGradientError, TrainConfig, train_supervised
from .ctc import CTCNumericError
from .decoder import DecodeParams, Lexicon, SearchSpace, decode_many, greedy_words, tune_decode_params
from .lm import ArpaParseError, UndefinedPerplexityError, oov_rate, perplexity, read_arpa, train_lm, write_arpa
from .metrics import corpus_report
from .pl import (
    NoUsablePseudoLabelsError,
    PhaseConfig,
    PipelineConfig,
    TokenSetMismatchError,
    data_scaling_experiment,
    dev_scorer,
    labeled_examples,
    monotonicity_report,
    phase1_ipl,
    phase2_slimipl,
    zero_shot_eval,
)
from .synthdata import PRESETS, BenchmarkConfig, make_benchmark, read_jsonl_texts, read_manifest, write_manifest, write_sealed
from .textnorm import PRESETS as TOKEN_PRESETS
from .textnorm import TokenSet

log = logging.getLogger("xlpl")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING_INPUT = 4
EXIT_NAN = 5
EXIT_NO_PSEUDO_LABELS = 6
EXIT_BAD_INPUT = 7

EXIT_CODES_HELP = """exit codes:
  0  success
  1  unexpected internal error
  2  command-line usage error
  3  invalid configuration (unknown section or key, bad value)
  4  missing input file
  5  training aborted on a non-finite loss or gradient
  6  no usable pseudo-labels at bootstrap
  7  malformed input (ARPA, manifest, token-set mismatch, ...)
"""

SEED_STREAMS = ("data", "init", "augment", "decode-tune")


class ConfigError(ValueError):
    pass


class MissingInputError(FileNotFoundError):
    pass


class BadInputError(ValueError):
    pass


# ----------------------------------------------------------------------
# configuration
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class LMSettings:
    order: int = 4
    vocab_limit: int = 0  # 0 keeps every word
    prune: str = ""  # e.g. "2:2,3:2" = minimum raw count per order


@dataclass(frozen=True)
class TuneSettings:
    trials: int = 64
    alpha_min: float = 0.3
    alpha_max: float = 5.0
    beta_min: float = -10.0
    beta_max: float = 10.0


@dataclass(frozen=True)
class RunSettings:
    seed: int = 0
    tokens: str = "latin"
    hidden: int = 64
    workers: int = 1


_PIPE = PipelineConfig()
_PHASE_KEYS = {f.name for f in fields(PhaseConfig)} - {"phase", "train"}


@dataclass(frozen=True)
class ExperimentConfig:
    run: RunSettings = RunSettings()
    benchmark: BenchmarkConfig = PRESETS["default"]
    lm: LMSettings = LMSettings()
    source_train: TrainConfig = _PIPE.source_train
    target_train: TrainConfig = _PIPE.target_train
    phase1_train: TrainConfig = _PIPE.phase1.train
    phase2_train: TrainConfig = _PIPE.phase2.train
    decode: DecodeParams = _PIPE.eval_params
    phase1: PhaseConfig = _PIPE.phase1
    phase2: PhaseConfig = _PIPE.phase2
    tune: TuneSettings = TuneSettings()

    def seeds(self) -> dict[str, int]:
        return {"root": self.run.seed, **{name: substream(self.run.seed, name) for name in SEED_STREAMS}}

    def token_set(self) -> TokenSet:
        return TOKEN_PRESETS[self.run.tokens]()

    def benchmark_config(self) -> BenchmarkConfig:
        return replace(self.benchmark, seed=substream(self.run.seed, "data"))

    def pipeline(self) -> PipelineConfig:
        aug = substream(self.run.seed, "augment")
        return PipelineConfig(
            hidden=self.run.hidden,
            source_train=replace(self.source_train, seed=aug),
            target_train=replace(self.target_train, seed=aug),
            phase1=replace(self.phase1, train=replace(self.phase1_train, seed=aug)),
            phase2=replace(self.phase2, train=replace(self.phase2_train, seed=aug)),
            lm_order=self.lm.order,
            eval_params=self.decode,
            seed=substream(self.run.seed, "init"),
        )

    def as_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()


def substream(root: int, name: str) -> int:
    """Seed of the named random stream under ``root``."""
    digest = hashlib.sha256(f"{root}/{name}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def _coerce(raw: str, current, where: str):
    try:
        if isinstance(current, bool):
            return {"true": True, "false": False, "1": True, "0": False}[raw.strip().lower()]
        if isinstance(current, int) or current is None:
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        return raw.strip()
    except (ValueError, KeyError):
        raise ConfigError(f"{where}: cannot parse {raw!r}") from None


def _apply(obj, section: configparser.SectionProxy, allowed: set[str]):
    updates = {}
    for key, raw in section.items():
        if key not in allowed:
            raise ConfigError(f"[{section.name}] unknown key {key!r}")
        updates[key] = _coerce(raw, getattr(obj, key), f"[{section.name}] {key}")
    try:
        return replace(obj, **updates)
    except ValueError as e:
        raise ConfigError(f"[{section.name}] {e}") from None


def load_config(path: str | None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is None:
        return cfg
    if not Path(path).is_file():
        raise MissingInputError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as e:
        raise ConfigError(str(e)) from None
    updates = {}
    for name in parser.sections():
        if name not in {f.name for f in fields(ExperimentConfig)}:
            raise ConfigError(f"unknown section [{name}]")
        section = parser[name]
        current = getattr(cfg, name)
        if name == "benchmark":
            preset = section.get("preset")
            if preset is not None:
                if preset not in PRESETS:
                    raise ConfigError(f"[benchmark] unknown preset {preset!r}")
                current = PRESETS[preset]
            allowed = {f.name for f in fields(BenchmarkConfig)} - {"seed"}
            keys = {k: v for k, v in section.items() if k != "preset"}
            updates[name] = _apply(current, _Section(name, keys), allowed)
        elif name in ("phase1", "phase2"):
            updates[name] = _apply(current, section, _PHASE_KEYS)
        elif name in ("source_train", "target_train", "phase1_train", "phase2_train"):
            updates[name] = _apply(current, section, {f.name for f in fields(TrainConfig)} - {"seed"})
        else:
            updates[name] = _apply(current, section, {f.name for f in fields(current)})
    cfg = replace(cfg, **updates)
    validate(cfg)
    return cfg


class _Section(dict):
    """Minimal stand-in for a config section after keys were filtered."""

    def __init__(self, name, items):
        super().__init__(items)
        self.name = name


def validate(cfg: ExperimentConfig) -> None:
    if cfg.run.tokens not in TOKEN_PRESETS:
        raise ConfigError(f"[run] unknown token preset {cfg.run.tokens!r}")
    if cfg.run.workers < 1 or cfg.run.hidden < 1:
        raise ConfigError("[run] workers and hidden must be >= 1")
    if cfg.lm.order < 1 or cfg.lm.vocab_limit < 0:
        raise ConfigError("[lm] order must be >= 1 and vocab_limit >= 0")
    parse_prune(cfg.lm.prune)
    if cfg.phase1.phase != 1 or cfg.phase2.phase != 2:
        raise ConfigError("phase ids are fixed by section name")
    if cfg.tune.trials < 1 or cfg.tune.alpha_min > cfg.tune.alpha_max or cfg.tune.beta_min > cfg.tune.beta_max:
        raise ConfigError("[tune] needs trials >= 1 and ordered ranges")
    bad = set(cfg.benchmark.alphabet) - set(cfg.token_set().characters)
    if bad:
        raise ConfigError(f"[benchmark] alphabet has characters outside the token set: {sorted(bad)}")


def parse_prune(spec: str) -> dict[int, int]:
    out = {}
    for part in filter(None, (p.strip() for p in spec.split(","))):
        try:
            order, count = (int(x) for x in part.split(":"))
        except ValueError:
            raise ConfigError(f"[lm] prune entry {part!r} is not ORDER:COUNT") from None
        if order < 2 or count < 1:
            raise ConfigError(f"[lm] prune entry {part!r} out of range")
        out[order] = count
    return out


# ----------------------------------------------------------------------
# provenance and logging
# ----------------------------------------------------------------------


class JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        rec = {
            "ts": round(record.created, 3),
            "level": record.levelname.lower(),
            "logger": record.name,
            "msg": record.getMessage(),
        }
        extra = getattr(record, "data", None)
        if extra:
            rec.update(extra)
        if record.exc_info:
            rec["traceback"] = self.formatException(record.exc_info)
        return json.dumps(rec, default=str)


def setup_logging(level: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level.upper())


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=10,
        )
    except (OSError, subprocess.SubprocessError):
        return f"xlpl-{__version__}"
    return out.stdout.strip() or f"xlpl-{__version__}"


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class FileAudit:
    """Records every file the process opens while active (``sys.addaudithook``)."""

    _instance: FileAudit | None = None
    _hooked = False

    def __init__(self):
        self.paths: set[str] = set()
        self.active = False

    @classmethod
    def _hook(cls, event, args):
        audit = cls._instance
        if audit is not None and audit.active and event == "open" and args:
            p = args[0]
            if isinstance(p, (str, bytes, os.PathLike)):
                p = os.fsdecode(p)
                if not p.endswith((".py", ".pyc", ".so")):
                    audit.paths.add(os.path.abspath(p))

    def __enter__(self):
        if not FileAudit._hooked:
            sys.addaudithook(FileAudit._hook)
            FileAudit._hooked = True
        FileAudit._instance = self
        self.active = True
        return self

    def __exit__(self, *exc):
        self.active = False
        FileAudit._instance = None


PATH_ARGS = ("text", "lm", "train", "labels", "dev", "init", "model", "manifest", "lexicon", "hyp", "ref",
             "source", "unlabeled", "phase1")


def write_run_record(out: Path, command: str, args: dict, cfg: ExperimentConfig) -> None:
    """Provenance that depends only on config, seeds, build and file contents, never on paths."""
    artifacts = {
        str(p.relative_to(out)): sha256_file(p)
        for p in sorted(out.rglob("*"))
        if p.is_file() and p.name not in ("run.json", "opened_files.txt")
    }
    record = {
        "command": command,
        "args": {k: v for k, v in args.items() if k not in PATH_ARGS},
        "config_hash": cfg.hash(),
        "config": cfg.as_dict(),
        "seeds": cfg.seeds(),
        "build": git_describe(),
        "version": __version__,
        "inputs": {k: sha256_file(Path(args[k])) for k in PATH_ARGS if args.get(k)},
        "artifacts": artifacts,
    }
    (out / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")


# ----------------------------------------------------------------------
# helpers shared by subcommands
# ----------------------------------------------------------------------


def need(*paths) -> None:
    for p in paths:
        if p is not None and not Path(p).exists():
            raise MissingInputError(f"input not found: {p}")


def load_model(path, ts: TokenSet) -> AcousticModel:
    need(path)
    model = AcousticModel.load(path)
    if model.spec.num_tokens != len(ts):
        raise TokenSetMismatchError(f"{path}: model emits {model.spec.num_tokens} tokens, token set has {len(ts)}")
    return model


def load_lm(path):
    if path is None:
        return None
    need(path)
    return read_arpa(path)


def load_lexicon(path, ts: TokenSet) -> Lexicon:
    need(path)
    return Lexicon.load(path, ts)


def load_manifest(path, labels: str | None = None):
    need(path, labels)
    try:
        utts = read_manifest(path)
    except (KeyError, json.JSONDecodeError) as e:
        raise BadInputError(f"{path}: malformed manifest ({e})") from None
    if labels is not None:
        texts = read_jsonl_texts(labels)
        missing = [u.uid for u in utts if u.uid not in texts]
        if missing:
            raise BadInputError(f"{labels}: no transcript for {missing[0]} and {len(missing) - 1} more")
        utts = [replace(u, text=texts[u.uid]) for u in utts]
    return utts


def require_text(utts, path) -> None:
    if any(u.text is None for u in utts):
        raise BadInputError(f"{path}: manifest lacks reference transcripts")


def write_jsonl(path: Path, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows), encoding="utf-8")


def write_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        if not rows:
            return
        w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def report_dict(wer_report, cer_report) -> dict:
    return {"wer": wer_report.as_dict(), "cer": cer_report.as_dict()}


def pl_rows(records):
    return [
        {"id": r.uid, "text": r.text, "teacher": r.teacher, "score": None if math.isnan(r.score) else r.score}
        for r in records
    ]


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------


def cmd_gen_data(args, cfg: ExperimentConfig, out: Path) -> None:
    ts = cfg.token_set()
    bench = make_benchmark(cfg.benchmark_config())
    feats = out / "feats"
    for name in ("source_train", "source_dev", "target_dev", "target_test"):
        write_manifest(out / f"{name}.jsonl", getattr(bench, name), feats)
    write_manifest(out / "target_unlabeled.jsonl", bench.target_unlabeled, feats, with_text=False)
    (out / "sealed").mkdir(exist_ok=True)
    write_sealed(out / "sealed" / "target_unlabeled_refs.jsonl", bench.target_sealed)
    (out / "target_text.txt").write_text("\n".join(bench.target_text) + "\n", encoding="utf-8")
    Lexicon.from_words(bench.lexicon_words(), ts).save(out / "lexicon.txt")
    ts.save(out / "tokens.txt")
    log.info("benchmark written", extra={"data": {"source_train": len(bench.source_train), "target_unlabeled": len(bench.target_unlabeled)}})


def cmd_train_lm(args, cfg, out) -> None:
    need(args.text)
    lines = Path(args.text).read_text(encoding="utf-8").splitlines()
    lm = train_lm(
        (line for line in lines if line.strip()),
        order=cfg.lm.order,
        vocab_limit=cfg.lm.vocab_limit or None,
        prune_min_count=parse_prune(cfg.lm.prune) or None,
    )
    write_arpa(lm, out / "lm.arpa")


def cmd_ppl(args, cfg, out) -> None:
    lm = load_lm(args.lm)
    need(args.text)
    lines = [line for line in Path(args.text).read_text(encoding="utf-8").splitlines() if line.strip()]
    try:
        result = {
            "ppl": perplexity(lm, lines, include_oov=True),
            "ppl_no_oov": perplexity(lm, lines, include_oov=False),
            "oov_rate": oov_rate(lm, lines),
            "sentences": len(lines),
        }
    except UndefinedPerplexityError as e:
        raise BadInputError(str(e)) from None
    print(json.dumps(result, sort_keys=True))
    if out is not None:
        write_json(out / "ppl.json", result)


def cmd_train_am(args, cfg, out) -> None:
    ts = cfg.token_set()
    train = load_manifest(args.train, args.labels)
    require_text(train, args.labels or args.train)
    dev = load_manifest(args.dev) if args.dev else None
    if dev is not None:
        require_text(dev, args.dev)
    pipe = cfg.pipeline()
    tcfg = pipe.source_train if args.section == "source_train" else pipe.target_train
    if args.init:
        init = load_model(args.init, ts)
    else:
        spec = ArchSpec(train[0].feats.shape[1], len(ts), hidden=cfg.run.hidden)
        init = AcousticModel.init(spec, np.random.default_rng([pipe.seed, 10]))

    def on_step(it, loss):
        if (it + 1) % max(tcfg.eval_interval, 1) == 0:
            log.info("train step", extra={"data": {"iteration": it + 1, "loss": loss}})

    model, history = train_supervised(init, labeled_examples(train, ts), tcfg, dev_scorer(dev, ts), ts.blank_id, on_step)
    model.save(out / "model.ckpt")
    best = history["best_dev"]
    write_json(out / "train_log.json", {
        "dev": history["dev"],
        "skipped": history["skipped"],
        "best_dev": best if math.isfinite(best) else None,
        "final_loss": history["loss"][-1],
    })


def cmd_decode(args, cfg, out) -> None:
    ts = cfg.token_set()
    model = load_model(args.model, ts)
    utts = load_manifest(args.manifest)
    logits = [model.forward(u.feats) for u in utts]
    if args.greedy:
        rows = [{"id": u.uid, "text": " ".join(greedy_words(x, ts))} for u, x in zip(utts, logits)]
    else:
        if args.lexicon is None:
            raise BadInputError("beam decoding needs --lexicon (or pass --greedy)")
        lexicon = load_lexicon(args.lexicon, ts)
        lm = load_lm(args.lm)
        params = replace(cfg.decode, beam_size=args.beam) if args.beam else cfg.decode
        hyps = decode_many(logits, lexicon, lm, params, args.workers or cfg.run.workers)
        rows = [{"id": u.uid, "text": h[0].text, "score": h[0].score} for u, h in zip(utts, hyps)]
    write_jsonl(out / "hyps.jsonl", rows)


def cmd_score(args, cfg, out) -> None:
    need(args.hyp, args.ref)
    hyps = read_jsonl_texts(args.hyp)
    refs = read_jsonl_texts(args.ref)
    missing = [k for k in refs if k not in hyps]
    if missing:
        raise BadInputError(f"{args.hyp}: no hypothesis for {missing[0]} and {len(missing) - 1} more")
    pairs = [(hyps[k], refs[k]) for k in refs]
    result = report_dict(corpus_report(pairs, "word"), corpus_report(pairs, "char"))
    print(json.dumps({"wer": result["wer"]["rate"], "cer": result["cer"]["rate"]}, sort_keys=True))
    if out is not None:
        write_json(out / "report.json", result)


def cmd_zero_shot(args, cfg, out) -> None:
    ts = cfg.token_set()
    model = load_model(args.model, ts)
    utts = load_manifest(args.manifest)
    require_text(utts, args.manifest)
    res = zero_shot_eval(model, load_lm(args.lm), load_lexicon(args.lexicon, ts), utts, cfg.decode,
                         args.workers or cfg.run.workers)
    result = {k: report_dict(*v) for k, v in res.items()}
    write_json(out / "report.json", result)
    print(json.dumps({k: v["wer"]["rate"] for k, v in result.items()}, sort_keys=True))


def _dev(path):
    if path is None:
        return None
    dev = load_manifest(path)
    require_text(dev, path)
    return dev


def cmd_ipl(args, cfg, out) -> None:
    ts = cfg.token_set()
    source = load_model(args.source, ts)
    unlabeled = load_manifest(args.unlabeled)
    lexicon = load_lexicon(args.lexicon, ts)
    res = phase1_ipl(source, unlabeled, load_lm(args.lm), lexicon, cfg.pipeline().phase1, _dev(args.dev),
                     None, args.workers or cfg.run.workers)
    res.model.save(out / "model.ckpt")
    for k, dump in enumerate(res.pl_dumps):
        write_jsonl(out / "pls" / f"refresh_{k:03d}.jsonl", pl_rows(dump))
    write_csv(out / "history.csv", [{k: v for k, v in h.items() if k != "pl_wer"} for h in res.history])
    write_csv(out / "dev.csv", [{"iteration": i, "wer": w} for i, w in res.dev])


def cmd_slimipl(args, cfg, out) -> None:
    ts = cfg.token_set()
    source = load_model(args.source, ts)
    phase1 = load_model(args.phase1, ts)
    unlabeled = load_manifest(args.unlabeled)
    lexicon = load_lexicon(args.lexicon, ts)
    res = phase2_slimipl(source, phase1, unlabeled, lexicon, load_lm(args.lm), cfg.pipeline().phase2, _dev(args.dev),
                         None, args.workers or cfg.run.workers)
    res.model.save(out / "model.ckpt")
    write_jsonl(out / "pls" / "stage_a.jsonl", pl_rows(res.pl_dumps[0]))
    write_json(out / "history.json", [{k: v for k, v in h.items() if k != "pl_wer"} for h in res.history])
    write_csv(out / "dev.csv", [{"iteration": i, "wer": w} for i, w in res.dev])


def cmd_tune_decode(args, cfg, out) -> None:
    ts = cfg.token_set()
    model = load_model(args.model, ts)
    utts = load_manifest(args.manifest)
    require_text(utts, args.manifest)
    t = cfg.tune
    res = tune_decode_params(
        [model.forward(u.feats) for u in utts],
        [u.text for u in utts],
        load_lexicon(args.lexicon, ts),
        load_lm(args.lm),
        SearchSpace((t.alpha_min, t.alpha_max), (t.beta_min, t.beta_max)),
        trials=t.trials,
        seed=substream(cfg.run.seed, "decode-tune"),
        base=cfg.decode,
        workers=args.workers or cfg.run.workers,
    )
    write_json(out / "params.json", {"alpha": res.params.alpha, "beta": res.params.beta,
                                     "beam_size": res.params.beam_size, "wer": res.wer,
                                     "trials": [list(x) for x in res.trials]})


def cmd_scaling(args, cfg, out) -> None:
    ts = cfg.token_set()
    try:
        fractions = [float(x) for x in args.fractions.split(",")]
    except ValueError:
        raise ConfigError(f"--fractions: cannot parse {args.fractions!r}") from None
    bench = make_benchmark(cfg.benchmark_config())
    rows = data_scaling_experiment(bench, cfg.pipeline(), ts, fractions, args.axis, args.workers or cfg.run.workers)
    write_csv(out / "scaling.csv", rows)
    write_json(out / "report.json", {"axis": args.axis, "rows": rows, **monotonicity_report(rows)})


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the synthetic benchmark (manifests, features, text, lexicon)"),
    "train-lm": (cmd_train_lm, "train a Kneser-Ney n-gram LM and write it as ARPA"),
    "ppl": (cmd_ppl, "perplexity of an ARPA LM on a text file, with and without OOV"),
    "train-am": (cmd_train_am, "train an acoustic model with CTC on a labeled manifest"),
    "decode": (cmd_decode, "greedy or lexicon+LM beam-search decoding of a manifest"),
    "score": (cmd_score, "WER/CER of hypotheses against references"),
    "zero-shot": (cmd_zero_shot, "evaluate a source model on target audio, greedy and beam+LM"),
    "ipl": (cmd_ipl, "phase 1: iterative pseudo-labeling with LM-constrained PLs"),
    "slimipl": (cmd_slimipl, "phase 2: re-init, larger-beam fine-tune, then LM-free slimIPL"),
    "tune-decode": (cmd_tune_decode, "random search over LM weight and word bonus on a dev set"),
    "scaling": (cmd_scaling, "data-scaling experiment over nested subsets"),
}

# subcommands that may run without --out (they print their result)
OPTIONAL_OUT = {"ppl", "score"}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI experiment config; unknown sections or keys are rejected")
    common.add_argument("--out", help="output directory (created if missing)")
    common.add_argument("--log-level", default="info", choices=["debug", "info", "warning", "error"])
    common.add_argument("--audit", action="store_true", help="record every file opened to OUT/opened_files.txt")

    parser = argparse.ArgumentParser(
        prog="xlpl",
        description="Cross-lingual pseudo-labeling toolkit.",
        epilog=EXIT_CODES_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"xlpl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    p = {}
    for name, (_, help_text) in COMMANDS.items():
        p[name] = sub.add_parser(name, parents=[common], help=help_text, description=help_text,
                                 epilog=EXIT_CODES_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)

    p["train-lm"].add_argument("--text", required=True)
    p["ppl"].add_argument("--lm", required=True)
    p["ppl"].add_argument("--text", required=True)

    a = p["train-am"]
    a.add_argument("--train", required=True, help="labeled manifest")
    a.add_argument("--labels", help="JSON-lines transcripts overriding the manifest text")
    a.add_argument("--dev", help="dev manifest for checkpoint selection")
    a.add_argument("--init", help="checkpoint to fine-tune instead of a fresh model")
    a.add_argument("--section", default="source_train", choices=["source_train", "target_train"])

    d = p["decode"]
    d.add_argument("--model", required=True)
    d.add_argument("--manifest", required=True)
    d.add_argument("--lexicon")
    d.add_argument("--lm")
    d.add_argument("--greedy", action="store_true")
    d.add_argument("--beam", type=int, help="override [decode] beam_size")

    p["score"].add_argument("--hyp", required=True, help="JSON-lines with id and text")
    p["score"].add_argument("--ref", required=True, help="manifest or JSON-lines with id and text")

    for name in ("zero-shot", "tune-decode"):
        p[name].add_argument("--model", required=True)
        p[name].add_argument("--manifest", required=True)
        p[name].add_argument("--lexicon", required=True)
        p[name].add_argument("--lm")

    for name in ("ipl", "slimipl"):
        p[name].add_argument("--source", required=True)
        p[name].add_argument("--unlabeled", required=True)
        p[name].add_argument("--lexicon", required=True)
        p[name].add_argument("--lm")
        p[name].add_argument("--dev")
    p["slimipl"].add_argument("--phase1", required=True)

    p["scaling"].add_argument("--axis", required=True, choices=["source-labeled", "target-unlabeled"])
    p["scaling"].add_argument("--fractions", default="0.125,0.25,0.5,1.0")

    for name in ("decode", "zero-shot", "ipl", "slimipl", "tune-decode", "scaling"):
        p[name].add_argument("--workers", type=int, help="decoder processes (default: [run] workers)")
    return parser


def run(args) -> int:
    cfg = load_config(args.config)
    if getattr(args, "workers", None) is not None and args.workers < 1:
        raise ConfigError("--workers must be >= 1")
    if args.out is None and args.command not in OPTIONAL_OUT:
        raise ConfigError(f"{args.command} needs --out")
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    fn = COMMANDS[args.command][0]
    log.info("start", extra={"data": {"command": args.command, "config_hash": cfg.hash()}})
    t0 = time.time()
    with FileAudit() as audit:
        if not args.audit:
            audit.active = False
        fn(args, cfg, out)
    if out is not None:
        recorded = {k: v for k, v in vars(args).items() if k not in ("out", "config", "log_level", "audit")}
        write_run_record(out, args.command, recorded, cfg)
        if args.audit:
            (out / "opened_files.txt").write_text("".join(p + "\n" for p in sorted(audit.paths)), encoding="utf-8")
    log.info("done", extra={"data": {"command": args.command, "seconds": round(time.time() - t0, 3)}})
    return EXIT_OK


ERROR_EXITS = [
    (ConfigError, EXIT_CONFIG),
    (FileNotFoundError, EXIT_MISSING_INPUT),
    ((NaNGradientError, CTCNumericError, FloatingPointError), EXIT_NAN),
    (NoUsablePseudoLabelsError, EXIT_NO_PSEUDO_LABELS),
    ((BadInputError, ArpaParseError, TokenSetMismatchError, ValueError, KeyError, json.JSONDecodeError), EXIT_BAD_INPUT),
]


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level)
    try:
        return run(args)
    except Exception as e:  # noqa: BLE001 - every failure becomes a structured exit
        code = next((c for types, c in ERROR_EXITS if isinstance(e, types)), EXIT_FAILURE)
        log.error(str(e), extra={"data": {"error": type(e).__name__, "exit_code": code}},
                  exc_info=code == EXIT_FAILURE)
        return code


if __name__ == "__main__":
    sys.exit(main())
