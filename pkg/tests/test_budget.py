import math
import random

import pytest

from cgls.budget import allocate, flops_for, tokens_for
from cgls.curriculum import load_preset
from cgls.errors import AllocationError, DomainError
from cgls.model import ModelConfig, count_params


def test_flops_headline_values():
    assert flops_for(700e6, 124e6, 1) == 5.208e17
    assert flops_for(2.5e9, 1.2e9, 1) == 1.8e19
    assert flops_for(1234, 567, 2) == 2 * flops_for(1234, 567, 1)


@pytest.mark.parametrize("args", [(0, 1, 1), (1, -5, 1), (1, 1, 0), (float("nan"), 1, 1)])
def test_flops_domain(args):
    with pytest.raises(DomainError):
        flops_for(*args)


def test_tokens_for_floors():
    assert tokens_for(6e12, 1e6) == 1_000_000
    assert tokens_for(6e12 + 5, 1e6) == 1_000_000
    with pytest.raises(DomainError):
        tokens_for(1e9, 0)


def test_tokens_for_round_trip_never_exceeds_budget():
    rng = random.Random(0)
    for _ in range(1000):
        f = rng.uniform(1e3, 1e20)
        p = rng.randint(1, 10**10)
        t = tokens_for(f, p)
        assert t == 0 or flops_for(t, p, 1) <= f


def test_table2_allocation_shares():
    s = load_preset("table2_llama")
    params = [count_params(ModelConfig(32000, 2048, 16, 5632, 2048, d)) for d in s.depths]
    plan = allocate(1e21, s.depths, params, s.flop_fractions, s.init_phase_fraction)
    total = plan.total_flops
    assert [p.stage_flops / total for p in plan.per_stage] == pytest.approx([0.2, 0.2, 0.2, 0.4])
    assert plan.per_stage[0].init_flops == 0 and plan.per_stage[0].init_tokens == 0
    for st in plan.per_stage[1:]:
        assert st.init_fraction == 0.2 and st.init_flops / st.stage_flops == pytest.approx(0.2)
    assert plan.per_stage[3].full_flops / total == pytest.approx(0.32)


def test_degenerate_single_stage():
    plan = allocate(6e12, [8], [1_000_000], [1.0], 0.0)
    assert plan.per_stage[0].init_tokens == 0
    assert plan.per_stage[0].full_tokens == 1_000_000


def test_desk_token_table_matches_independent_recomputation():
    cfg = ModelConfig(256, 128, 4, 512, 64, 8)
    s = load_preset("desk")
    params = [count_params(cfg.with_depth(d)) for d in s.depths]
    plan = allocate(6e13, s.depths, params, s.flop_fractions, s.init_phase_fraction)
    # recompute by hand: per layer 4*d^2 + 2*d*dff + 2*d, embeddings 2*V*d + T*d, final norm d
    per_layer = 4 * 128 * 128 + 2 * 128 * 512 + 2 * 128
    fixed = 2 * 256 * 128 + 64 * 128 + 128
    for (depth, frac), st in zip([(4, 0.3), (6, 0.3), (8, 0.4)], plan.per_stage):
        p = fixed + depth * per_layer
        assert st.params == p
        init = 0.0 if depth == 4 else 0.2
        assert st.init_tokens == math.floor(6e13 * frac * init / (6 * p))
        assert st.full_tokens == math.floor((6e13 * frac - 6e13 * frac * init) / (6 * p))


def test_budget_conservation_and_monotonicity():
    plan = allocate(6e12, [4, 6, 8], [300_000, 400_000, 500_000], [0.3, 0.3, 0.4], 0.2,
                    batch_tokens=512)
    audit = plan.audit()
    phases = sum(1 for st in plan.per_stage for t in (st.init_tokens, st.full_tokens) if t)
    per_batch = [6 * 512 * st.params for st in plan.per_stage]
    assert 0 <= plan.total_flops - audit["realized_flops"] <= phases * max(per_batch)
    a = allocate(1e12, [4], [1000], [1.0]).per_stage[0].full_tokens
    b = allocate(1e12, [4], [2000], [1.0]).per_stage[0].full_tokens
    assert b < a


def test_phase_batches_floor_and_shortfall():
    # 1,000-token stage, init share 0.2, 64-token batches -> 3 init and 12 full batches
    plan = allocate(2 * 6 * 1000, [1, 2], [1, 1], [0.5, 0.5], 0.2, batch_tokens=64)
    assert plan.phase_batches()[1] == (3, 12)
    row = plan.audit()["stages"][1]
    assert row["init_shortfall_tokens"] == 200 - 192 and row["full_shortfall_tokens"] == 800 - 768


def test_allocation_rejects_sub_batch_phase():
    with pytest.raises(AllocationError):
        allocate(6 * 100, [1, 2], [1, 1], [0.5, 0.5], 0.2, batch_tokens=64)
    with pytest.raises(AllocationError):
        allocate(1e9, [1, 2], [1, 1], [0.6, 0.6], 0.2)


def test_audit_reports_both_init_conventions():
    plan = allocate(6e9, [2, 4], [1000, 2000], [0.5, 0.5], 0.2, batch_tokens=10,
                    init_trainable_params=[None, 1000])
    audit = plan.audit()
    assert audit["realized_flops_trainable_only_init"] < audit["realized_flops"]
