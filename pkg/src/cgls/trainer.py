"""Pipeline orchestration for the six training methods.

Every method is compiled into a list of ``StageRun`` segments (depth, FLOP
share, optional initialization phase, mixture weights, how to grow into it).
One budget allocation covers all segments, so methods sharing a config differ
only in how they spend the same analytic FLOPs.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import jsonschema
import numpy as np

from . import tokenizer
from .budget import FLOPS_PER_TOKEN_PARAM, BudgetPlan, allocate
from .checkpoint import save_checkpoint
from .curriculum import (
    TIERS, MixtureWeights, SamplerState, StageSchedule, TierCorpus, load_corpora, load_preset,
    read_tier_manifest, sample_batch, validate_schedule,
)
from .errors import ConfigValidationError, NumericError, StateError, TrainingError
from .growth import FULL_TUNING, INITIALIZATION, GrowthPlan, expand_copy_stack, expand_random, freeze_mask
from .model import ModelConfig, ParameterSet, count_params, loss_and_grad, new_model
from .optim import AdamWHyper, LrSchedule, Phase, adamw_step, init_state, lr_at, param_groups

METHODS = ("cgls_simple", "cgls", "baseline_randomized", "baseline_curricularized",
           "layer_scaling_only", "stacking")
FIXED_DEPTH = ("baseline_randomized", "baseline_curricularized")


@dataclass(frozen=True)
class OptimizerConfig:
    peak_lr: float = 2e-4
    new_layer_lr: float = 5e-4
    warmup_steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float | None = None

    def hyper(self) -> AdamWHyper:
        return AdamWHyper(self.beta1, self.beta2, self.eps, self.weight_decay, self.clip_norm,
                          pad_id=tokenizer.PAD_ID)


@dataclass(frozen=True)
class PipelineConfig:
    method: str
    model: ModelConfig
    growth: GrowthPlan
    schedule: StageSchedule
    total_flops: float
    batch_size: int
    optimizer: OptimizerConfig = OptimizerConfig()
    seed: int = 0
    epochs: int = 1
    corpora: dict | None = None
    stacking_fractions: tuple[float, ...] | None = None
    curricularized_fractions: tuple[float, ...] | None = None
    schedule_source: dict = field(default_factory=dict)

    @property
    def batch_tokens(self) -> int:
        return self.batch_size * self.model.seq_len

    def violations(self) -> list[str]:
        out = [f"model: {v}" for v in self.model.violations()]
        out += [f"growth.stage_depths: {v}" for v in self.growth.violations()]
        if self.method not in METHODS:
            out.append(f"method: unknown method {self.method!r}")
        depths = self.growth.stage_depths
        if self.model.depth != self.growth.final_depth:
            out.append(f"model.depth: {self.model.depth} differs from the growth plan's final "
                       f"depth {self.growth.final_depth}")
        if self.method in FIXED_DEPTH:
            if len(depths) != 1:
                out.append(f"growth.stage_depths: {self.method} trains at a fixed depth and needs "
                           f"a single-entry plan, got {list(depths)}")
        else:
            if len(depths) < 2:
                out.append(f"growth.stage_depths: {self.method} needs at least two stages")
            out += [f"schedule: {v}" for v in validate_schedule(self.schedule, depths).violations]
        if self.method == "cgls_simple" and len(depths) != 3:
            out.append("growth.stage_depths: cgls_simple assigns one tier per stage and needs "
                       "exactly three stages")
        if self.method == "stacking":
            for i, (a, b) in enumerate(zip(depths, depths[1:])):
                if b - a > a:
                    out.append(f"growth.stage_depths[{i + 1}]: stacking can add at most the "
                               f"current depth ({a}) layers, asked for {b - a}")
        for name, expect in (("stacking_fractions", len(depths)), ("curricularized_fractions", 3)):
            fr = getattr(self, name)
            if fr is None:
                continue
            if len(fr) != expect:
                out.append(f"{name}: expected {expect} entries, got {len(fr)}")
            if abs(math.fsum(fr) - 1.0) > 1e-9:
                out.append(f"{name}: entries sum to {math.fsum(fr):g}, not 1")
        o = self.optimizer
        if o.clip_norm is not None and o.clip_norm <= 0:
            out.append("optimizer.clip_norm: must be positive")
        if self.batch_size < 1:
            out.append("batch_size: must be >= 1")
        return out

    def validate(self) -> "PipelineConfig":
        problems = self.violations()
        if problems:
            raise ConfigValidationError(problems)
        return self

    def for_method(self, method: str) -> "PipelineConfig":
        """Same model, schedule and budget, adjusted to ``method``'s growth plan."""
        if method in FIXED_DEPTH:
            growth = GrowthPlan((self.model.depth,))
        else:
            growth = GrowthPlan(tuple(self.schedule.depths))
        return dataclasses.replace(self, method=method, growth=growth)

    def to_dict(self) -> dict:
        data = {
            "method": self.method,
            "seed": self.seed,
            "model": self.model.to_dict(),
            "growth": {"stage_depths": list(self.growth.stage_depths)},
            "schedule": self.schedule.to_dict(),
            "budget": {"total_flops": self.total_flops, "epochs": self.epochs},
            "optimizer": dataclasses.asdict(self.optimizer),
            "batch_size": self.batch_size,
        }
        if self.corpora is not None:
            data["corpora"] = self.corpora
        if self.stacking_fractions is not None:
            data["stacking_fractions"] = list(self.stacking_fractions)
        if self.curricularized_fractions is not None:
            data["curricularized_fractions"] = list(self.curricularized_fractions)
        return data


def _schema():
    text = (resources.files("cgls") / "schema" / "pipeline.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def _path(parts) -> str:
    out = ""
    for p in parts:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out or "<root>"


def config_from_dict(data: dict, base_dir=None) -> PipelineConfig:
    """Validate raw config data and build a ``PipelineConfig``.

    Raises ``ConfigValidationError`` listing every schema and semantic
    violation, each with its path in the config.
    """
    validator = jsonschema.Draft202012Validator(_schema())
    errors = sorted(validator.iter_errors(data), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        raise ConfigValidationError([f"{_path(e.absolute_path)}: {e.message}" for e in errors])
    m = dict(data["model"])
    m.setdefault("vocab_size", tokenizer.VOCAB_SIZE)
    model = ModelConfig(**m)
    sched = data["schedule"]
    problems = []
    try:
        if "preset" in sched:
            schedule = load_preset(sched["preset"])
            source = {"preset": sched["preset"], "provenance": schedule.provenance}
        else:
            schedule = StageSchedule.from_dict(sched)
            source = {"inline": True, "provenance": schedule.provenance}
    except Exception as exc:
        raise ConfigValidationError([f"schedule: {exc}"]) from exc
    try:
        growth = GrowthPlan(tuple(data["growth"]["stage_depths"]))
    except Exception as exc:
        raise ConfigValidationError([f"growth.stage_depths: {exc}"]) from exc
    corpora = data.get("corpora")
    if corpora and "manifest" in corpora and base_dir is not None:
        p = Path(corpora["manifest"])
        corpora = {"manifest": str(p if p.is_absolute() else Path(base_dir) / p)}
    cfg = PipelineConfig(
        method=data["method"], model=model, growth=growth, schedule=schedule,
        total_flops=float(data["budget"]["total_flops"]), batch_size=int(data["batch_size"]),
        optimizer=OptimizerConfig(**data.get("optimizer", {})), seed=int(data.get("seed", 0)),
        epochs=int(data["budget"].get("epochs", 1)), corpora=corpora,
        stacking_fractions=tuple(data["stacking_fractions"]) if "stacking_fractions" in data else None,
        curricularized_fractions=(tuple(data["curricularized_fractions"])
                                  if "curricularized_fractions" in data else None),
        schedule_source=source,
    )
    problems += cfg.violations()
    if problems:
        raise ConfigValidationError(problems)
    return cfg


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigValidationError([f"<file>: not valid JSON ({exc})"]) from exc
    return config_from_dict(data, base_dir=path.parent)


# ---------------------------------------------------------------- method compilation


@dataclass(frozen=True)
class StageRun:
    depth: int
    flop_fraction: float
    init_fraction: float
    weights: MixtureWeights | None       # None: proportional to tier token totals
    init_weights: MixtureWeights | None
    grow: str | None                     # None, "random" or "copy_stack"
    reset_optimizer: bool


def compile_method(config: PipelineConfig) -> list[StageRun]:
    m, sched = config.method, config.schedule
    depths = config.growth.stage_depths
    if m == "baseline_randomized":
        return [StageRun(depths[0], 1.0, 0.0, None, None, None, False)]
    if m == "baseline_curricularized":
        fr = config.curricularized_fractions or (1 / 3, 1 / 3, 1 - 2 / 3)
        return [StageRun(depths[0], fr[t], 0.0, MixtureWeights.one_hot(t), None, None, False)
                for t in range(3)]
    runs = []
    for i, d in enumerate(depths):
        first = i == 0
        if m == "stacking":
            fr = config.stacking_fractions or sched.flop_fractions
            runs.append(StageRun(d, fr[i], 0.0, None, None, None if first else "copy_stack",
                                 not first))
            continue
        init_frac = sched.init_fraction_for(i)
        if m == "cgls":
            w, wi = sched.stages[i].weights, sched.init_weights_for(i)
        elif m == "cgls_simple":
            w = wi = MixtureWeights.one_hot(i)
        else:  # layer_scaling_only
            w = wi = None
        runs.append(StageRun(d, sched.stages[i].flop_fraction, init_frac, w, None if first else wi,
                             None if first else "random", not first))
    return runs


def plan_budget(config: PipelineConfig) -> BudgetPlan:
    runs = compile_method(config)
    cfg = config.model
    params = [count_params(cfg.with_depth(r.depth)) for r in runs]
    trainable = [None] + [count_params(cfg.with_depth(b.depth)) - count_params(cfg.with_depth(a.depth))
                          for a, b in zip(runs, runs[1:])]
    plan = allocate(config.total_flops, [r.depth for r in runs], params,
                    [r.flop_fraction for r in runs], [r.init_fraction for r in runs],
                    batch_tokens=config.batch_tokens, epochs=config.epochs,
                    init_trainable_params=trainable)
    notes = {"method": config.method, "schedule": config.schedule.name,
             "schedule_source": config.schedule_source}
    return dataclasses.replace(plan, notes=notes)


def proportional_weights(corpora: Sequence[TierCorpus]) -> MixtureWeights:
    """Mixture that samples every available token uniformly (no curriculum)."""
    totals = [c.total_tokens for c in corpora]
    n = sum(totals)
    p, q = totals[0] / n, totals[1] / n
    return MixtureWeights(p, q, max(0.0, 1.0 - p - q))


# ---------------------------------------------------------------- running


@dataclass
class RunReport:
    method: str
    metrics: list[dict]
    final_checkpoint: Path | None
    audit: dict
    stages: list[dict]
    wall_clock_seconds: float
    final_params: ParameterSet | None = None
    checkpoints: dict = field(default_factory=dict)

    @property
    def flops_consumed(self) -> float:
        return self.metrics[-1]["flops_consumed"] if self.metrics else 0.0

    @property
    def tokens_seen(self) -> int:
        return self.metrics[-1]["tokens_seen"] if self.metrics else 0

    def initial_loss(self, k: int = 10) -> float:
        return float(np.mean([r["loss"] for r in self.metrics[:k]]))

    def final_loss(self, k: int = 10) -> float:
        return float(np.mean([r["loss"] for r in self.metrics[-k:]]))

    def summary(self) -> dict:
        return {"method": self.method, "steps": len(self.metrics),
                "tokens_seen": self.tokens_seen, "flops_consumed": self.flops_consumed,
                "initial_loss": self.initial_loss(), "final_loss": self.final_loss(),
                "final_checkpoint": str(self.final_checkpoint) if self.final_checkpoint else None,
                "stages": self.stages, "wall_clock_seconds": self.wall_clock_seconds,
                "budget": {"total_flops": self.audit["total_flops"],
                           "realized_flops": self.audit["realized_flops"],
                           "relative_deviation": self.audit["relative_deviation"]}}


def resolve_corpora(config: PipelineConfig):
    spec = config.corpora
    if not spec:
        raise ConfigValidationError(["corpora: no corpora given in the config or the call"])
    if "manifest" in spec:
        return load_corpora(read_tier_manifest(spec["manifest"]))
    from .stratify import synth_corpus
    syn = spec["synthetic"]
    return tuple(synth_corpus(t, syn["docs_per_tier"], syn.get("seed", config.seed)) for t in TIERS)


def _build_lr_schedule(config, runs, batches) -> LrSchedule:
    phases, step = [], 0
    for i, (nb_init, nb_full) in enumerate(batches):
        if nb_init:
            phases.append(Phase(step, step + nb_init, i, INITIALIZATION))
            step += nb_init
        phases.append(Phase(step, step + nb_full, i, FULL_TUNING))
        step += nb_full
    # the decay window opens at the last growth stage's full-tuning phase; for
    # sequential tier segments at one depth that is the final segment
    o = config.optimizer
    return LrSchedule(tuple(phases), peak_lr=o.peak_lr, new_layer_lr=o.new_layer_lr,
                      warmup_steps=o.warmup_steps)


class _RunDir:
    def __init__(self, root):
        self.root = Path(root) if root is not None else None
        if self.root is None:
            return
        if (self.root / "manifest.json").exists():
            raise StateError(f"{self.root} already holds a run manifest; use a fresh directory")
        (self.root / "checkpoints").mkdir(parents=True, exist_ok=True)
        (self.root / "reports").mkdir(exist_ok=True)
        self.metrics = open(self.root / "metrics.jsonl", "w", encoding="utf-8")

    def write_json(self, rel, data):
        if self.root is not None:
            (self.root / rel).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")

    def record(self, rec):
        if self.root is not None:
            self.metrics.write(json.dumps(rec, sort_keys=True) + "\n")

    def checkpoint(self, name, params, state, meta):
        if self.root is None:
            return None
        self.metrics.flush()
        return save_checkpoint(self.root / "checkpoints" / f"{name}.ckpt", params, state, meta)

    def close(self):
        if self.root is not None:
            self.metrics.close()


@dataclass
class TrainingContext:
    """Mutable run-wide state threaded through the stages."""

    config: PipelineConfig
    corpora: tuple
    schedule: LrSchedule
    sampler: SamplerState
    fallback_weights: MixtureWeights
    rundir: _RunDir
    step: int = 0
    tokens_seen: int = 0
    flops: int = 0
    checkpoints: dict = field(default_factory=dict)
    last_good: Path | None = None

    def metadata(self, stage, phase) -> dict:
        return {"method": self.config.method, "stage": stage, "phase": phase, "step": self.step,
                "tokens_seen": self.tokens_seen, "flops_consumed": float(self.flops),
                "sampler": self.sampler.to_dict()}

    def save(self, name, params, state, stage, phase):
        path = self.rundir.checkpoint(name, params, state, self.metadata(stage, phase))
        if path is not None:
            self.checkpoints[name] = path
            self.last_good = path
        return path


def run_stage(params: ParameterSet, state, stage: StageRun, index: int,
              batches: tuple[int, int], ctx: TrainingContext):
    """Run one stage's initialization phase (if any) and its full-tuning phase.

    The initialization phase trains only new layers on the init mixture; then
    every tensor trains on the stage mixture. Returns ``(params, state, metrics)``.
    """
    cfg = ctx.config
    number = index + 1
    groups = param_groups(params)
    n_params = count_params(params.config)
    bt = cfg.batch_tokens
    metrics = []
    nb_init, nb_full = batches
    for phase, n_batches, weights in ((INITIALIZATION, nb_init, stage.init_weights),
                                      (FULL_TUNING, nb_full, stage.weights)):
        if n_batches == 0:
            continue
        mask = freeze_mask(params, phase)
        weights = weights or ctx.fallback_weights
        for _ in range(n_batches):
            batch, ctx.sampler = sample_batch(ctx.corpora, weights, ctx.sampler, cfg.batch_size,
                                              cfg.model.seq_len)
            cause = None
            try:
                loss, grads = loss_and_grad(params, batch)
            except NumericError as exc:
                loss, grads, cause = float("nan"), None, exc
            if not math.isfinite(loss):
                bad = ctx.rundir.checkpoint("last_good", params, state,
                                            ctx.metadata(number, phase))
                raise TrainingError(
                    f"non-finite loss at step {ctx.step} (stage {number}, {phase})",
                    stage=number, phase=phase, step=ctx.step,
                    checkpoint=bad or ctx.last_good) from cause
            lrs = {"base": lr_at(ctx.schedule, ctx.step, "base"),
                   "new_layers": lr_at(ctx.schedule, ctx.step, "new_layers")}
            params, state = adamw_step(params, grads, state, mask, lrs, groups)
            ctx.tokens_seen += bt
            ctx.flops += FLOPS_PER_TOKEN_PARAM * bt * n_params * cfg.epochs
            rec = {"step": ctx.step, "stage": number, "phase": phase, "loss": float(loss),
                   "lr": lrs["new_layers" if phase == INITIALIZATION else "base"],
                   "tokens_seen": ctx.tokens_seen, "flops_consumed": float(ctx.flops),
                   "tier_counts": dict(zip(TIERS, batch.tier_counts))}
            metrics.append(rec)
            ctx.rundir.record(rec)
            ctx.step += 1
        if phase == INITIALIZATION:
            ctx.save(f"stage{number}_init_end", params, state, number, phase)
    ctx.save(f"stage{number}_end", params, state, number, FULL_TUNING)
    return params, state, metrics


def run_pipeline(config: PipelineConfig, corpora=None, out_dir=None, threads: int | None = None,
                 keep_params: bool = True) -> RunReport:
    """Train ``config.method`` end to end; with ``out_dir`` write the run directory."""
    config.validate()
    if corpora is None:
        corpora = resolve_corpora(config)
    corpora = tuple(corpora)
    runs = compile_method(config)
    plan = plan_budget(config)
    batches = plan.phase_batches()

    rundir = _RunDir(out_dir)
    manifest = {
        "status": "running",
        "method": config.method,
        "seeds": {"run": config.seed, "model": config.model.seed},
        "threads": threads,
        "schedule_provenance": config.schedule_source,
        "artifacts": {"config": "config.json", "metrics": "metrics.jsonl",
                      "checkpoints": "checkpoints/", "reports": "reports/"},
    }
    rundir.write_json("manifest.json", manifest)
    rundir.write_json("config.json", config.to_dict())
    ctx = TrainingContext(config, corpora, _build_lr_schedule(config, runs, batches),
                          SamplerState(config.seed, stream=0), proportional_weights(corpora),
                          rundir)

    started = time.perf_counter()
    hyper = config.optimizer.hyper()
    params = new_model(config.model.with_depth(runs[0].depth))
    state = init_state(params, hyper)
    metrics, stage_rows = [], []
    try:
        for i, (run, stage_batches) in enumerate(zip(runs, batches)):
            if run.grow == "random":
                params = expand_random(params, run.depth, seed=config.model.seed)
            elif run.grow == "copy_stack":
                params = expand_copy_stack(params, run.depth - params.config.depth)
            if run.reset_optimizer:
                state = init_state(params, hyper)
            ctx.save(f"stage{i + 1}_start", params, state, i + 1, "start")
            params, state, stage_metrics = run_stage(params, state, run, i, stage_batches, ctx)
            metrics.extend(stage_metrics)
            stage_rows.append({"stage": i + 1, "depth": run.depth, "init_steps": stage_batches[0],
                               "full_steps": stage_batches[1], "grow": run.grow})
        final = ctx.save("final", params, state, len(runs), "end")
    except Exception as exc:
        rundir.close()
        manifest["status"] = "failed"
        rundir.write_json("manifest.json", manifest)
        if isinstance(exc, TrainingError):
            raise
        raise TrainingError(f"stage {len(stage_rows) + 1} failed at step {ctx.step}: {exc}",
                            stage=len(stage_rows) + 1, step=ctx.step,
                            checkpoint=ctx.last_good) from exc
    rundir.close()
    wall = time.perf_counter() - started

    audit = plan.audit()
    report = RunReport(config.method, metrics, final, audit, stage_rows, wall,
                       params if keep_params else None, dict(ctx.checkpoints))
    if out_dir is not None:
        rundir.write_json("reports/budget_audit.json", audit)
        rundir.write_json("reports/run_report.json", report.summary())
        manifest.update(status="completed", final_checkpoint="checkpoints/final.ckpt",
                        checkpoints={k: f"checkpoints/{Path(v).name}"
                                     for k, v in ctx.checkpoints.items()})
        rundir.write_json("manifest.json", manifest)
    return report
