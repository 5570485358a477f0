import json
import math
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from oracles import BOS, EOS, UNK, KneserNeyOracle
from xlpl import cli
from xlpl.am import AcousticModel
from xlpl.ctc import greedy_decode, log_softmax
from xlpl.decoder import Lexicon, greedy_words
from xlpl.synthdata import Utterance, read_jsonl_texts, read_manifest, write_manifest
from xlpl.textnorm import latin_tokens

TS = latin_tokens()

TINY = """
[run]
seed = 3
hidden = 32

[benchmark]
preset = small
lm_lines = 1000

[lm]
order = 3

[source_train]
max_iterations = 60
warmup_steps = 20
eval_interval = 30

[phase1_train]
warmup_steps = 10

[phase2_train]
warmup_steps = 5

[decode]
beam_size = 5

[phase1]
refresh_interval = 10
beam_size = 4
max_iterations = 20
eval_interval = 10

[phase2]
refresh_interval = 5
beam_size = 4
max_iterations = 10
stage_a_iterations = 10
eval_interval = 5

[tune]
trials = 3
"""


def xlpl(*argv):
    return cli.main([str(a) for a in argv])


def recipe(root: Path, cfg: Path) -> dict[str, Path]:
    d = {k: root / k for k in ("data", "lm", "src", "zs", "ipl", "slim", "dec")}
    assert xlpl("gen-data", "--config", cfg, "--out", d["data"]) == 0
    assert xlpl("train-lm", "--config", cfg, "--text", d["data"] / "target_text.txt", "--out", d["lm"]) == 0
    assert xlpl("train-am", "--config", cfg, "--train", d["data"] / "source_train.jsonl",
                "--dev", d["data"] / "source_dev.jsonl", "--out", d["src"], "--audit") == 0
    common = ["--config", cfg, "--lexicon", d["data"] / "lexicon.txt", "--lm", d["lm"] / "lm.arpa"]
    assert xlpl("zero-shot", *common, "--model", d["src"] / "model.ckpt",
                "--manifest", d["data"] / "target_dev.jsonl", "--out", d["zs"]) == 0
    target = ["--unlabeled", d["data"] / "target_unlabeled.jsonl", "--dev", d["data"] / "target_dev.jsonl"]
    assert xlpl("ipl", *common, *target, "--source", d["src"] / "model.ckpt", "--out", d["ipl"], "--audit") == 0
    assert xlpl("slimipl", *common, *target, "--source", d["src"] / "model.ckpt",
                "--phase1", d["ipl"] / "model.ckpt", "--out", d["slim"], "--audit") == 0
    assert xlpl("decode", *common, "--model", d["slim"] / "model.ckpt",
                "--manifest", d["data"] / "target_test.jsonl", "--out", d["dec"]) == 0
    return d


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("recipe")
    cfg = root / "tiny.ini"
    cfg.write_text(TINY)
    return cfg, recipe(root, cfg)


def tree(d: Path) -> dict[str, bytes]:
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


class TestRecipe:
    def test_outputs(self, run):
        _, d = run
        assert {"source_train.jsonl", "target_unlabeled.jsonl", "lexicon.txt", "tokens.txt"} <= set(
            p.name for p in d["data"].iterdir()
        )
        assert (d["ipl"] / "pls" / "refresh_000.jsonl").exists()
        report = json.loads((d["zs"] / "report.json").read_text())
        assert set(report) == {"greedy", "beam"}

    def test_unlabeled_manifest_has_no_text(self, run):
        _, d = run
        assert all(u.text is None for u in read_manifest(d["data"] / "target_unlabeled.jsonl", load_features=False))

    def test_sealed_references_never_opened(self, run):
        _, d = run
        sealed = str((d["data"] / "sealed" / "target_unlabeled_refs.jsonl").resolve())
        for stage in ("src", "ipl", "slim"):
            opened = (d[stage] / "opened_files.txt").read_text().splitlines()
            assert opened, stage
            assert sealed not in opened
        assert str((d["data"] / "target_unlabeled.jsonl").resolve()) in (d["ipl"] / "opened_files.txt").read_text()

    def test_run_record(self, run):
        cfg, d = run
        rec = json.loads((d["ipl"] / "run.json").read_text())
        assert rec["config_hash"] == cli.load_config(str(cfg)).hash()
        assert set(rec["seeds"]) == {"root", "data", "init", "augment", "decode-tune"}
        assert rec["build"]
        for name, digest in rec["artifacts"].items():
            assert cli.sha256_file(d["ipl"] / name) == digest

    def test_rerun_is_byte_identical(self, run, tmp_path):
        cfg, d = run
        again = recipe(tmp_path, cfg)
        for key in ("data", "lm", "src", "ipl", "slim", "dec"):
            a, b = tree(d[key]), tree(again[key])
            assert a.keys() == b.keys()
            for name in a:
                if name == "opened_files.txt":
                    continue  # absolute paths of this run's inputs
                assert a[name] == b[name], (key, name)

    def test_workers_do_not_change_decode(self, run, tmp_path):
        cfg, d = run
        args = ["decode", "--config", cfg, "--model", d["ipl"] / "model.ckpt", "--manifest", d["data"] / "target_dev.jsonl",
                "--lexicon", d["data"] / "lexicon.txt", "--lm", d["lm"] / "lm.arpa"]
        assert xlpl(*args, "--workers", 1, "--out", tmp_path / "w1") == 0
        assert xlpl(*args, "--workers", 4, "--out", tmp_path / "w4") == 0
        assert (tmp_path / "w1" / "hyps.jsonl").read_bytes() == (tmp_path / "w4" / "hyps.jsonl").read_bytes()

    def test_score_pl_dump_against_sealed(self, run, tmp_path, capsys):
        _, d = run
        assert xlpl("score", "--hyp", d["ipl"] / "pls" / "refresh_000.jsonl",
                    "--ref", d["data"] / "sealed" / "target_unlabeled_refs.jsonl") == 0
        out = json.loads(capsys.readouterr().out)
        assert 0.0 <= out["wer"] and 0.0 <= out["cer"]


class TestDecodeModes:
    def test_beam_one_matches_greedy_on_in_lexicon_paths(self, run, tmp_path):
        cfg, d = run
        manifest = d["data"] / "target_test.jsonl"
        # scaling the output layer keeps every argmax and sharpens the posteriors
        am = AcousticModel.load(d["slim"] / "model.ckpt")
        am.params["out.w"] *= 4.0
        am.params["out.b"] *= 4.0
        model = tmp_path / "sharp.ckpt"
        am.save(model)
        wb = TS.word_boundary_id
        clean, vocab = [], set()
        for u in read_manifest(manifest):
            logits = am.forward(u.feats)
            path = greedy_decode(logits, TS.blank_id)
            words = greedy_words(logits, TS)
            if not words or path[0] == wb or path[-1] == wb or any(a == b == wb for a, b in zip(path, path[1:])):
                continue
            vocab.update(words)
            # prefix merging lets beam 1 leave the argmax path when frames are unsure
            if np.exp(log_softmax(logits)).max(axis=1).min() > 0.5:
                clean.append(u.uid)
        # a lexicon holding every greedy word makes each clean greedy path in-lexicon
        Lexicon.from_words(sorted(vocab), TS).save(tmp_path / "lex.txt")
        conf = tmp_path / "beam1.ini"
        conf.write_text(TINY.replace("[decode]\nbeam_size = 5", "[decode]\nalpha = 0\nbeta = 0\nbeam_size = 1"))
        common = ["--config", conf, "--model", model, "--manifest", manifest]
        assert xlpl("decode", *common, "--lexicon", tmp_path / "lex.txt", "--out", tmp_path / "beam") == 0
        assert xlpl("decode", *common, "--greedy", "--out", tmp_path / "greedy") == 0
        beam = read_jsonl_texts(tmp_path / "beam" / "hyps.jsonl")
        greedy = read_jsonl_texts(tmp_path / "greedy" / "hyps.jsonl")
        assert len(clean) >= 10
        assert [beam[k] for k in clean] == [greedy[k] for k in clean]


class TestPerplexity:
    def test_ppl_matches_oracle(self, tmp_path, capsys):
        train = ["a b c", "a c", "b c a b", "c c a"]
        held = ["a b", "c a d", "b b c"]
        (tmp_path / "train.txt").write_text("\n".join(train) + "\n")
        (tmp_path / "eval.txt").write_text("\n".join(held) + "\n")
        conf = tmp_path / "c.ini"
        conf.write_text("[lm]\norder = 2\n")
        assert xlpl("train-lm", "--config", conf, "--text", tmp_path / "train.txt", "--out", tmp_path / "lm") == 0
        capsys.readouterr()
        assert xlpl("ppl", "--lm", tmp_path / "lm" / "lm.arpa", "--text", tmp_path / "eval.txt") == 0
        got = json.loads(capsys.readouterr().out)

        kn = KneserNeyOracle([s.split() for s in train], {"a", "b", "c"}, 2)
        with_oov, without = [], []
        for s in held:
            hist = (BOS,)
            for w in s.split() + [EOS]:
                if w not in kn.vocab and w != EOS:
                    with_oov.append(math.log10(kn.prob(hist, UNK)))
                    hist = ()
                    continue
                lp = math.log10(kn.prob(hist, w))
                with_oov.append(lp)
                without.append(lp)
                hist = (w,)
        assert got["ppl"] == pytest.approx(10 ** (-np.mean(with_oov)), rel=1e-9)
        assert got["ppl_no_oov"] == pytest.approx(10 ** (-np.mean(without)), rel=1e-9)
        assert got["oov_rate"] == pytest.approx(1 / 8)


class TestErrors:
    def test_unknown_key(self, tmp_path):
        (tmp_path / "c.ini").write_text("[phase1]\nrefresh = 3\n")
        assert xlpl("gen-data", "--config", tmp_path / "c.ini", "--out", tmp_path / "o") == cli.EXIT_CONFIG

    def test_unknown_section(self, tmp_path):
        (tmp_path / "c.ini").write_text("[optimizer]\nlr = 1\n")
        assert xlpl("gen-data", "--config", tmp_path / "c.ini", "--out", tmp_path / "o") == cli.EXIT_CONFIG

    def test_invalid_value(self, tmp_path):
        (tmp_path / "c.ini").write_text("[phase2]\nbootstrap_beam = 3\n")
        assert xlpl("gen-data", "--config", tmp_path / "c.ini", "--out", tmp_path / "o") == cli.EXIT_CONFIG
        (tmp_path / "d.ini").write_text("[run]\nseed = many\n")
        assert xlpl("gen-data", "--config", tmp_path / "d.ini", "--out", tmp_path / "o") == cli.EXIT_CONFIG

    def test_missing_input(self, tmp_path):
        assert xlpl("train-lm", "--text", tmp_path / "nope.txt", "--out", tmp_path / "o") == cli.EXIT_MISSING_INPUT

    def test_malformed_arpa(self, tmp_path):
        (tmp_path / "bad.arpa").write_text("\\data\\\nngram 1=2\n\n\\1-grams:\n-1.0\ta\n\\end\\\n")
        (tmp_path / "t.txt").write_text("a\n")
        assert xlpl("ppl", "--lm", tmp_path / "bad.arpa", "--text", tmp_path / "t.txt") == cli.EXIT_BAD_INPUT

    def test_no_usable_pseudo_labels(self, run, tmp_path):
        cfg, d = run
        Lexicon.from_words(["a" * 400], TS).save(tmp_path / "lex.txt")
        code = xlpl("ipl", "--config", cfg, "--source", d["src"] / "model.ckpt",
                    "--unlabeled", d["data"] / "target_unlabeled.jsonl", "--lexicon", tmp_path / "lex.txt",
                    "--out", tmp_path / "o")
        assert code == cli.EXIT_NO_PSEUDO_LABELS

    def test_nan_abort(self, tmp_path):
        feats = np.full((30, 16), np.nan, dtype=np.float32)
        write_manifest(tmp_path / "m.jsonl", [Utterance("u0", feats, "s", "abc")], tmp_path / "feats")
        (tmp_path / "c.ini").write_text("[source_train]\nmax_iterations = 2\n")
        code = xlpl("train-am", "--config", tmp_path / "c.ini", "--train", tmp_path / "m.jsonl", "--out", tmp_path / "o")
        assert code == cli.EXIT_NAN

    def test_exit_codes_are_distinct(self):
        codes = [cli.EXIT_OK, cli.EXIT_FAILURE, cli.EXIT_USAGE, cli.EXIT_CONFIG, cli.EXIT_MISSING_INPUT,
                 cli.EXIT_NAN, cli.EXIT_NO_PSEUDO_LABELS, cli.EXIT_BAD_INPUT]
        assert len(set(codes)) == len(codes)

    def test_help_documents_exit_codes_and_logs_are_json(self, tmp_path):
        help_text = subprocess.run([sys.executable, "-m", "xlpl", "--help"], capture_output=True, text=True).stdout
        assert "exit codes" in help_text
        for name in cli.COMMANDS:
            assert name in help_text
        proc = subprocess.run([sys.executable, "-m", "xlpl", "train-lm", "--text", str(tmp_path / "x"),
                               "--out", str(tmp_path / "o")], capture_output=True, text=True)
        assert proc.returncode == cli.EXIT_MISSING_INPUT
        records = [json.loads(line) for line in proc.stderr.splitlines()]
        assert records[-1]["level"] == "error" and records[-1]["exit_code"] == cli.EXIT_MISSING_INPUT

    def test_usage_error(self):
        with pytest.raises(SystemExit) as err:
            cli.main(["decode"])
        assert err.value.code == cli.EXIT_USAGE


class TestConfig:
    def test_seed_streams_are_distinct_and_stable(self):
        seeds = cli.ExperimentConfig().seeds()
        assert len({seeds[k] for k in cli.SEED_STREAMS}) == 4
        assert cli.substream(0, "data") == cli.substream(0, "data") != cli.substream(1, "data")

    def test_hash_tracks_content(self, tmp_path):
        (tmp_path / "a.ini").write_text("[run]\nseed = 1\n")
        (tmp_path / "b.ini").write_text("[run]\nseed = 2\n")
        a, b = cli.load_config(str(tmp_path / "a.ini")), cli.load_config(str(tmp_path / "b.ini"))
        assert a.hash() != b.hash()
        assert a.hash() == cli.load_config(str(tmp_path / "a.ini")).hash()

    def test_defaults_follow_pipeline(self):
        cfg = cli.ExperimentConfig()
        pipe = cfg.pipeline()
        assert pipe.phase1.refresh_interval == 200 and pipe.phase2.bootstrap_params.beam_size == 100
        assert cfg.benchmark.relatedness == 0.7
