"""Compute matching with the analytic rule FLOPs = 6 * tokens * params * epochs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

from .errors import AllocationError, DomainError

FLOPS_PER_TOKEN_PARAM = 6


def _exact(x, name):
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise DomainError(f"{name} must be a number, got {x!r}")
    if not (math.isfinite(x) and x > 0):
        raise DomainError(f"{name} must be positive and finite, got {x!r}")
    if isinstance(x, float) and x.is_integer():
        return int(x)
    return x


def flops_for(tokens, params, epochs=1) -> float:
    """Analytic training FLOPs. Integral inputs are multiplied exactly."""
    t, p, e = _exact(tokens, "tokens"), _exact(params, "params"), _exact(epochs, "epochs")
    return float(FLOPS_PER_TOKEN_PARAM * t * p * e)


def tokens_for(flops, params) -> int:
    """Largest token count whose analytic cost at ``params`` fits within ``flops``."""
    p = _exact(params, "params")
    if isinstance(flops, bool) or not isinstance(flops, (int, float)) or not math.isfinite(flops):
        raise DomainError(f"flops must be a finite number, got {flops!r}")
    if flops < 0:
        raise DomainError(f"flops must be non-negative, got {flops!r}")
    return math.floor(Fraction(flops) / (FLOPS_PER_TOKEN_PARAM * Fraction(p)))


@dataclass(frozen=True)
class StagePlan:
    depth: int
    params: int
    init_fraction: float
    init_flops: float
    full_flops: float
    init_tokens: int
    full_tokens: int
    init_trainable_params: int | None = None

    @property
    def stage_flops(self) -> float:
        return self.init_flops + self.full_flops


@dataclass(frozen=True)
class BudgetPlan:
    total_flops: float
    stage_fractions: tuple[float, ...]
    per_stage: tuple[StagePlan, ...]
    epochs: int = 1
    batch_tokens: int | None = None
    notes: dict = field(default_factory=dict)

    def phase_batches(self, batch_tokens: int | None = None) -> list[tuple[int, int]]:
        """Whole batches per (init, full) phase; remainders are dropped."""
        bt = batch_tokens or self.batch_tokens
        if not bt:
            raise AllocationError("batch_tokens is required to count batches")
        return [(s.init_tokens // bt, s.full_tokens // bt) for s in self.per_stage]

    def realized_flops(self, batch_tokens: int | None = None) -> float:
        bt = batch_tokens or self.batch_tokens
        total = 0
        for s, (nb_init, nb_full) in zip(self.per_stage, self.phase_batches(bt)):
            total += FLOPS_PER_TOKEN_PARAM * (nb_init + nb_full) * bt * s.params * self.epochs
        return float(total)

    def audit(self, batch_tokens: int | None = None) -> dict:
        bt = batch_tokens or self.batch_tokens
        rows = []
        realized = 0
        realized_trainable = 0
        for i, (s, (nb_i, nb_f)) in enumerate(zip(self.per_stage, self.phase_batches(bt))):
            init_real = FLOPS_PER_TOKEN_PARAM * nb_i * bt * s.params * self.epochs
            full_real = FLOPS_PER_TOKEN_PARAM * nb_f * bt * s.params * self.epochs
            trainable = s.init_trainable_params if s.init_trainable_params is not None else s.params
            init_real_trainable = FLOPS_PER_TOKEN_PARAM * nb_i * bt * trainable * self.epochs
            realized += init_real + full_real
            realized_trainable += init_real_trainable + full_real
            rows.append({
                "stage": i + 1,
                "depth": s.depth,
                "params": s.params,
                "flop_fraction": self.stage_fractions[i],
                "init_share": s.init_fraction,
                "full_share": 1.0 - s.init_fraction,
                "init_flops_budget": s.init_flops,
                "full_flops_budget": s.full_flops,
                "init_tokens": s.init_tokens,
                "full_tokens": s.full_tokens,
                "init_batches": nb_i,
                "full_batches": nb_f,
                "init_shortfall_tokens": s.init_tokens - nb_i * bt,
                "full_shortfall_tokens": s.full_tokens - nb_f * bt,
                "init_flops_realized": float(init_real),
                "full_flops_realized": float(full_real),
                "init_flops_realized_trainable_only": float(init_real_trainable),
            })
        return {
            "rule": "flops = 6 * tokens * params * epochs",
            "parameter_convention": "all parameters, embeddings and LM head included",
            "total_flops": self.total_flops,
            "epochs": self.epochs,
            "batch_tokens": bt,
            "stages": rows,
            "realized_flops": float(realized),
            "realized_flops_trainable_only_init": float(realized_trainable),
            "deviation": float(realized) - self.total_flops,
            "relative_deviation": (float(realized) - self.total_flops) / self.total_flops,
            **self.notes,
        }


def allocate(total_flops: float, stage_depths: Sequence[int], stage_params: Sequence[int],
             fractions: Sequence[float], init_fraction: float | Sequence[float] = 0.0,
             batch_tokens: int | None = None, epochs: int = 1,
             init_trainable_params: Sequence[int | None] | None = None) -> BudgetPlan:
    """Split a FLOP budget over stages and their init/full phases.

    ``init_fraction`` is either one share applied to every stage after the
    first, or one share per stage (the first must be 0).
    """
    n = len(stage_depths)
    if not (len(stage_params) == len(fractions) == n) or n == 0:
        raise AllocationError("stage depths, params and fractions must have equal nonzero length")
    if not (math.isfinite(total_flops) and total_flops > 0):
        raise AllocationError(f"total_flops must be positive, got {total_flops}")
    if any(f < 0 for f in fractions) or abs(math.fsum(fractions) - 1.0) > 1e-9:
        raise AllocationError(f"stage fractions must be non-negative and sum to 1, got {list(fractions)}")
    if isinstance(init_fraction, (int, float)):
        init_fracs = [0.0] + [float(init_fraction)] * (n - 1)
    else:
        init_fracs = [float(x) for x in init_fraction]
        if len(init_fracs) != n:
            raise AllocationError("one init fraction per stage is required")
        if init_fracs[0] != 0.0:
            raise AllocationError("the first stage has no new layers; its init fraction must be 0")
    if any(not 0 <= f < 1 for f in init_fracs):
        raise AllocationError(f"init fractions must lie in [0, 1), got {init_fracs}")
    trainable = list(init_trainable_params) if init_trainable_params else [None] * n

    stages = []
    for i in range(n):
        stage_flops = total_flops * fractions[i]
        init_flops = stage_flops * init_fracs[i]
        full_flops = stage_flops - init_flops
        p = int(stage_params[i])
        init_tokens = tokens_for(init_flops, p) if init_flops > 0 else 0
        full_tokens = tokens_for(full_flops, p) if full_flops > 0 else 0
        if batch_tokens:
            if fractions[i] > 0 and full_tokens < batch_tokens:
                raise AllocationError(
                    f"stage {i + 1}: full-tuning budget of {full_tokens} tokens is below one batch "
                    f"({batch_tokens} tokens)")
            if init_fracs[i] > 0 and init_tokens < batch_tokens:
                raise AllocationError(
                    f"stage {i + 1}: initialization budget of {init_tokens} tokens is below one "
                    f"batch ({batch_tokens} tokens)")
        stages.append(StagePlan(depth=int(stage_depths[i]), params=p, init_fraction=init_fracs[i],
                                init_flops=init_flops, full_flops=full_flops,
                                init_tokens=init_tokens, full_tokens=full_tokens,
                                init_trainable_params=trainable[i]))
    return BudgetPlan(total_flops=float(total_flops), stage_fractions=tuple(float(f) for f in fractions),
                      per_stage=tuple(stages), epochs=epochs, batch_tokens=batch_tokens)
