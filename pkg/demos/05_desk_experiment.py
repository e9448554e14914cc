"""The whole comparison at desk scale.

Six methods train from one shared FLOP budget on the synthetic tiered corpus:
the curriculum-plus-growth method and its one-tier-per-stage variant, a
fixed-depth baseline on shuffled data, a fixed-depth baseline walking the
tiers in order, growth without a curriculum, and copy-based stacking. Each run
leaves a directory with metrics, checkpoints and a budget audit; the summary
compares hard-tier perplexity on held-out text.

    python3 demos/05_desk_experiment.py [--flops 6e12] [--out runs/]

The default budget takes about a quarter of an hour on one core; pass
``--flops 5e11`` for a two-minute preview.
"""

import argparse
import tempfile
from pathlib import Path

from cgls.curriculum import TIERS
from cgls.evalsuite import perplexity
from cgls.stratify import synth_corpus, synth_documents
from cgls.trainer import METHODS, config_from_dict, run_pipeline

ap = argparse.ArgumentParser()
ap.add_argument("--flops", type=float, default=6e12)
ap.add_argument("--out", type=Path, default=None)
args = ap.parse_args()
out = args.out or Path(tempfile.mkdtemp(prefix="cgls-desk-"))

base = config_from_dict({
    "method": "cgls", "seed": 0,
    "model": {"d_model": 128, "n_heads": 4, "d_ff": 512, "seq_len": 64, "depth": 8},
    "growth": {"stage_depths": [4, 6, 8]}, "schedule": {"preset": "desk"},
    "budget": {"total_flops": args.flops}, "batch_size": 8,
    "optimizer": {"peak_lr": 3e-3, "new_layer_lr": 3e-3, "warmup_steps": 50},
})
corpora = tuple(synth_corpus(t, 1000, 0) for t in TIERS)
held_out = synth_documents("hard", 100, 12345)

print(f"budget {args.flops:.3g} FLOPs, runs under {out}\n")
print(f"{'method':<24}{'steps':>6}{'loss start':>12}{'loss end':>10}{'FLOPs':>12}"
      f"{'hard ppl':>10}{'sec':>7}")
for m in METHODS:
    r = run_pipeline(base.for_method(m), corpora, out_dir=out / m)
    ppl = perplexity(r.final_params, held_out)
    print(f"{m:<24}{len(r.metrics):>6}{r.initial_loss():>12.3f}{r.final_loss():>10.3f}"
          f"{r.flops_consumed:>12.4e}{ppl:>10.3f}{r.wall_clock_seconds:>7.0f}")
print("\nper-run details: cgls report --run-dir", out / "cgls")
