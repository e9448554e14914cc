import dataclasses
import json

import pytest

from cgls import trainer
from cgls.checkpoint import load_checkpoint
from cgls.curriculum import MixtureWeights, SamplerState
from cgls.errors import ConfigValidationError, StateError, TrainingError
from cgls.growth import FULL_TUNING, INITIALIZATION, GrowthPlan, expand_random, freeze_mask
from cgls.model import new_model
from cgls.optim import init_state
from cgls.trainer import (
    METHODS, TrainingContext, compile_method, config_from_dict, plan_budget,
    run_pipeline, run_stage,
)

from .conftest import small_pipeline


@pytest.fixture(scope="module")
def cgls_run(small_corpora, tmp_path_factory):
    out = tmp_path_factory.mktemp("cgls") / "run"
    report = run_pipeline(small_pipeline("cgls"), small_corpora, out_dir=out)
    return report, out


def _metrics(out):
    return [json.loads(x) for x in (out / "metrics.jsonl").read_text().splitlines()]


def test_cgls_stage_structure(cgls_run):
    report, out = cgls_run
    assert [s["depth"] for s in report.stages] == [4, 6, 8]
    assert report.stages[0]["init_steps"] == 0
    assert all(s["init_steps"] > 0 for s in report.stages[1:])
    assert report.final_params.config.depth == 8
    phases = {(r["stage"], r["phase"]) for r in report.metrics}
    assert phases == {(1, FULL_TUNING), (2, INITIALIZATION), (2, FULL_TUNING),
                      (3, INITIALIZATION), (3, FULL_TUNING)}
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "completed"
    assert manifest["method"] == "cgls"


def test_metrics_fields_and_counters(cgls_run):
    report, out = cgls_run
    rows = _metrics(out)
    assert rows == report.metrics
    cfg = small_pipeline("cgls")
    for i, r in enumerate(rows):
        assert set(r) == {"step", "stage", "phase", "loss", "lr", "tokens_seen",
                          "flops_consumed", "tier_counts"}
        assert r["step"] == i
        assert r["tokens_seen"] == (i + 1) * cfg.batch_tokens
        assert sum(r["tier_counts"].values()) == cfg.batch_tokens
    assert rows[-1]["flops_consumed"] == report.audit["realized_flops"]
    assert [r["flops_consumed"] for r in rows] == sorted(r["flops_consumed"] for r in rows)


def test_run_follows_curriculum(cgls_run):
    report, _ = cgls_run

    def hard_share(stage):
        rows = [r["tier_counts"] for r in report.metrics
                if r["stage"] == stage and r["phase"] == FULL_TUNING]
        return sum(c["hard"] for c in rows) / sum(sum(c.values()) for c in rows)

    # desk preset hard weights rise 0.25 -> 0.50 -> 0.80
    assert hard_share(1) < hard_share(2) < hard_share(3)
    assert abs(hard_share(3) - 0.8) < 0.15


def test_freeze_invariant_by_checkpoint_diff(cgls_run):
    report, _ = cgls_run
    for stage in (2, 3):
        before, _, _ = load_checkpoint(report.checkpoints[f"stage{stage}_start"])
        after, _, _ = load_checkpoint(report.checkpoints[f"stage{stage}_init_end"])
        mask = freeze_mask(before, INITIALIZATION)
        a, b = before.named(), after.named()
        assert mask.frozen_names and mask.trainable_names
        for name in mask.frozen_names:
            assert a[name].tobytes() == b[name].tobytes(), name
        assert any(a[n].tobytes() != b[n].tobytes() for n in mask.trainable_names)


def test_stage_handoff_and_optimizer_reset(cgls_run):
    report, _ = cgls_run
    for stage in (2, 3):
        prev, _, _ = load_checkpoint(report.checkpoints[f"stage{stage - 1}_end"])
        start, state, meta = load_checkpoint(report.checkpoints[f"stage{stage}_start"])
        named_prev, named_start = prev.named(), start.named()
        for name, arr in named_prev.items():
            assert named_start[name].tobytes() == arr.tobytes(), name
        assert state.step_count == 0
        assert all(not m.any() for m in state.m.values())
        assert all(not v.any() for v in state.v.values())
        assert meta["stage"] == stage


def test_all_methods_compute_matched(small_corpora):
    realized = {}
    for m in METHODS:
        cfg = small_pipeline(m, total_flops=1e11)
        realized[m] = plan_budget(cfg).audit()["realized_flops"]
    spread = (max(realized.values()) - min(realized.values())) / max(realized.values())
    assert spread < 0.01, realized


def test_method_compilation():
    cur = compile_method(small_pipeline("baseline_curricularized"))
    assert [r.depth for r in cur] == [8, 8, 8]
    assert [r.weights for r in cur] == [MixtureWeights.one_hot(t) for t in range(3)]
    assert not any(r.reset_optimizer for r in cur)
    simple = compile_method(small_pipeline("cgls_simple"))
    assert [r.weights for r in simple] == [MixtureWeights.one_hot(t) for t in range(3)]
    stack = compile_method(small_pipeline("stacking"))
    assert [r.grow for r in stack] == [None, "copy_stack", "copy_stack"]
    assert all(r.init_fraction == 0 for r in stack)
    lso = compile_method(small_pipeline("layer_scaling_only"))
    assert all(r.weights is None for r in lso)
    assert [r.init_fraction > 0 for r in lso] == [False, True, True]


def test_curricularized_run_moves_through_tiers(small_corpora):
    report = run_pipeline(small_pipeline("baseline_curricularized"), small_corpora)
    order = []
    for r in report.metrics:
        (tier,) = [t for t, n in r["tier_counts"].items() if n]
        if not order or order[-1] != tier:
            order.append(tier)
    assert order == ["easy", "medium", "hard"]
    assert report.final_params.config.depth == 8


def test_stacking_run_has_no_init_phase(small_corpora):
    report = run_pipeline(small_pipeline("stacking"), small_corpora)
    assert {r["phase"] for r in report.metrics} == {FULL_TUNING}
    assert [s["depth"] for s in report.stages] == [4, 6, 8]


def test_identical_seeds_identical_outputs(small_corpora, tmp_path):
    cfg = small_pipeline("cgls_simple")
    run_pipeline(cfg, small_corpora, out_dir=tmp_path / "a")
    run_pipeline(cfg, small_corpora, out_dir=tmp_path / "b")
    assert (tmp_path / "a/metrics.jsonl").read_bytes() == (tmp_path / "b/metrics.jsonl").read_bytes()
    assert ((tmp_path / "a/checkpoints/final.ckpt").read_bytes()
            == (tmp_path / "b/checkpoints/final.ckpt").read_bytes())


def test_existing_run_dir_is_refused(cgls_run, small_corpora):
    _, out = cgls_run
    with pytest.raises(StateError):
        run_pipeline(small_pipeline("cgls"), small_corpora, out_dir=out)


def test_non_finite_loss_raises_with_checkpoint(small_corpora, tmp_path, monkeypatch):
    real = trainer.loss_and_grad
    calls = {"n": 0}

    def flaky(params, batch):
        calls["n"] += 1
        loss, grads = real(params, batch)
        return (float("nan") if calls["n"] == 30 else loss), grads

    monkeypatch.setattr(trainer, "loss_and_grad", flaky)
    with pytest.raises(TrainingError) as info:
        run_pipeline(small_pipeline("cgls"), small_corpora, out_dir=tmp_path / "run")
    err = info.value
    assert err.step == 29 and err.stage == 1
    assert err.checkpoint is not None and err.checkpoint.exists()
    params, _, meta = load_checkpoint(err.checkpoint)
    assert meta["step"] == 29
    manifest = json.loads((tmp_path / "run/manifest.json").read_text())
    assert manifest["status"] == "failed"


def test_run_stage_alone(small_corpora):
    cfg = small_pipeline("cgls")
    cfg = dataclasses.replace(cfg, optimizer=dataclasses.replace(cfg.optimizer, warmup_steps=2))
    params = expand_random(new_model(cfg.model.with_depth(4)), 6, seed=1)
    state = init_state(params, cfg.optimizer.hyper())
    runs = compile_method(cfg)
    ctx = TrainingContext(cfg, small_corpora, trainer._build_lr_schedule(cfg, runs, [(3, 4)]),
                          SamplerState(0), trainer.proportional_weights(small_corpora),
                          trainer._RunDir(None))
    stage = dataclasses.replace(runs[1], depth=6)
    out, state, rows = run_stage(params, state, stage, 1, (3, 4), ctx)
    assert [r["phase"] for r in rows] == [INITIALIZATION] * 3 + [FULL_TUNING] * 4
    assert ctx.step == 7 and ctx.tokens_seen == 7 * cfg.batch_tokens
    frozen = freeze_mask(params, INITIALIZATION).frozen_names
    # frozen tensors moved only during the four full-tuning steps
    assert all(state.steps[n] == 4 for n in frozen)
    assert all(state.steps[n] == 7 for n in freeze_mask(params, INITIALIZATION).trainable_names)


def _raw(**overrides):
    data = {
        "method": "cgls",
        "model": {"d_model": 32, "n_heads": 4, "d_ff": 128, "seq_len": 32, "depth": 8},
        "growth": {"stage_depths": [4, 6, 8]}, "schedule": {"preset": "desk"},
        "budget": {"total_flops": 2e10}, "batch_size": 4,
    }
    data.update(overrides)
    return data


def test_config_violations_are_listed_with_paths():
    with pytest.raises(ConfigValidationError) as info:
        config_from_dict(_raw(method="baseline_randomized"))
    assert any(v.startswith("growth.stage_depths") for v in info.value.violations)

    with pytest.raises(ConfigValidationError) as info:
        config_from_dict(_raw(method="stacking", growth={"stage_depths": [2, 5, 8]},
                              schedule={"preset": "desk"}))
    text = "\n".join(info.value.violations)
    assert "stacking can add at most" in text

    with pytest.raises(ConfigValidationError) as info:
        config_from_dict(_raw(batch_size="four", budget={}))
    paths = [v.split(":")[0] for v in info.value.violations]
    assert "batch_size" in paths and "budget" in paths


def test_cgls_simple_needs_three_stages():
    cfg = small_pipeline("cgls")
    bad = dataclasses.replace(cfg, method="cgls_simple", growth=GrowthPlan((4, 8)))
    assert any("exactly three stages" in v for v in bad.violations())


def test_for_method_keeps_budget_and_model():
    base = small_pipeline("cgls")
    for m in METHODS:
        c = base.for_method(m)
        assert c.total_flops == base.total_flops and c.model == base.model
        c.validate()
