"""One FLOP budget, six ways to spend it.

Compute is counted as 6 * tokens * parameters * epochs. A growing model is
cheap per token early on, so it sees more tokens in its shallow stages. The
allocator turns a budget and a schedule into whole batches per phase; the
audit shows every method lands within a hair of the same total.

    python3 demos/03_spending_a_budget.py
"""

from cgls.budget import flops_for
from cgls.trainer import METHODS, config_from_dict, plan_budget

print(f"124M params on 700M tokens: {flops_for(700e6, 124e6, 1):.4g} FLOPs")
print(f"1.2B params on 2.5B tokens: {flops_for(2.5e9, 1.2e9, 1):.4g} FLOPs\n")

base = config_from_dict({
    "method": "cgls",
    "model": {"d_model": 128, "n_heads": 4, "d_ff": 512, "seq_len": 64, "depth": 8},
    "growth": {"stage_depths": [4, 6, 8]}, "schedule": {"preset": "desk"},
    "budget": {"total_flops": 6e12}, "batch_size": 8,
})

print(f"{'method':<24}{'depths':<12}{'batches (init, full) per stage':<42}{'realized':>12}")
for m in METHODS:
    cfg = base.for_method(m)
    plan = plan_budget(cfg)
    audit = plan.audit()
    depths = "/".join(str(s["depth"]) for s in audit["stages"])
    batches = ", ".join(f"({a},{b})" for a, b in plan.phase_batches())
    print(f"{m:<24}{depths:<12}{batches:<42}{audit['realized_flops']:>12.4e}")

table2 = config_from_dict({
    "method": "cgls",
    "model": {"d_model": 64, "n_heads": 4, "d_ff": 256, "seq_len": 32, "depth": 16},
    "growth": {"stage_depths": [8, 10, 13, 16]}, "schedule": {"preset": "table2_llama"},
    "budget": {"total_flops": 1e14}, "batch_size": 4,
})
audit = plan_budget(table2).audit()
print("\nfour-stage preset:")
for s in audit["stages"]:
    print(f"  depth {s['depth']:>2}  share {s['flop_fraction']:.1f}  "
          f"init {s['init_share']:.1f} / full {s['full_share']:.1f}")
