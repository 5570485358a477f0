"""Zero-shot transfer and both pseudo-labeling phases through the Python API.

    python3 demos/transfer.py [seed]

Runs on the small benchmark preset with short schedules, so it finishes in
a few minutes on one core. The numbers are greedy test WER unless marked.
"""

import sys
from dataclasses import replace

from xlpl.am import TrainConfig
from xlpl.pl import PhaseConfig, PipelineConfig, run_transfer
from xlpl.synthdata import PRESETS, make_benchmark
from xlpl.textnorm import latin_tokens

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
bench_cfg = replace(PRESETS["small"], seed=seed, lm_lines=5000)

short = TrainConfig(max_iterations=300, warmup_steps=50, eval_interval=100)
cfg = PipelineConfig(
    hidden=48,
    source_train=short,
    target_train=short,
    phase1=PhaseConfig(refresh_interval=100, beam_size=10, max_iterations=400, train=TrainConfig(warmup_steps=100)),
    phase2=PhaseConfig(
        phase=2, refresh_interval=50, beam_size=10, stage_a_iterations=300, max_iterations=150,
        cache_capacity=32, train=TrainConfig(warmup_steps=50),
    ),
    lm_order=3,
).seeded(seed)

out = run_transfer(make_benchmark(bench_cfg), cfg, latin_tokens())

print(f"zero-shot greedy     {out['zero_shot_greedy']:.3f}")
print(f"zero-shot beam+LM    {out['zero_shot_beam']:.3f}")
print(f"phase 1 (IPL)        {out['phase1']:.3f}   beam+LM {out['phase1_beam']:.3f}")
print(f"phase 2 (slimIPL)    {out['phase2']:.3f}   beam+LM {out['phase2_beam']:.3f}")
print(f"supervised target    {out['supervised']:.3f}")
print("PL WER per phase-1 refresh:", " ".join(f"{w:.3f}" for w in out["pl_wer"]))
