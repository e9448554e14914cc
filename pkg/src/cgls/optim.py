"""AdamW with freeze masks and per-group learning rates, plus the WSD schedule."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .errors import ScheduleError, StateError
from .growth import FULL_TUNING, INITIALIZATION, FreezeMask
from .model import ParameterSet, is_norm, layer_index


@dataclass(frozen=True)
class AdamWHyper:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float | None = None
    pad_id: int | None = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True, eq=False)
class OptimizerState:
    """First/second moments per tensor, per-tensor update counts and a global step."""

    m: dict
    v: dict
    steps: dict
    step_count: int
    hyper: AdamWHyper

    def key_shapes(self) -> dict:
        return {k: a.shape for k, a in self.m.items()}


def init_state(params: ParameterSet, hyper: AdamWHyper = AdamWHyper()) -> OptimizerState:
    named = params.named()
    return OptimizerState(
        m={k: np.zeros_like(a) for k, a in named.items()},
        v={k: np.zeros_like(a) for k, a in named.items()},
        steps={k: 0 for k in named},
        step_count=0,
        hyper=hyper,
    )


def reset_state(state: OptimizerState, params: ParameterSet | None = None) -> OptimizerState:
    """Zero every moment and counter, keeping hyperparameters.

    With ``params`` the state is re-keyed to that (possibly grown) model.
    """
    if params is not None:
        return init_state(params, state.hyper)
    return OptimizerState(
        m={k: np.zeros_like(a) for k, a in state.m.items()},
        v={k: np.zeros_like(a) for k, a in state.v.items()},
        steps={k: 0 for k in state.steps},
        step_count=0,
        hyper=state.hyper,
    )


def param_groups(params: ParameterSet) -> dict[str, str]:
    """Tensors of newly added layers form the ``new_layers`` group, the rest ``base``."""
    new = {i for i, o in enumerate(params.origins) if o.is_new}
    return {name: ("new_layers" if layer_index(name) in new else "base")
            for name in params.named()}


def _decay_factor(name, arr, hyper: AdamWHyper):
    if is_norm(name) or hyper.weight_decay == 0:
        return None
    if name == "embed" and hyper.pad_id is not None:
        mask = np.ones((arr.shape[0], 1), dtype=arr.dtype)
        mask[hyper.pad_id] = 0.0
        return mask
    return 1.0


def adamw_step(params: ParameterSet, grads: dict, state: OptimizerState, mask: FreezeMask,
               lr_by_group: dict, groups: dict | None = None
               ) -> tuple[ParameterSet, OptimizerState]:
    named = params.named()
    shapes = {k: a.shape for k, a in named.items()}
    if state.key_shapes() != shapes:
        raise StateError("optimizer moments do not mirror the parameter set")
    if set(grads) != set(shapes) or any(np.shape(grads[k]) != s for k, s in shapes.items()):
        raise StateError("gradients do not mirror the parameter set")
    if set(mask) != set(shapes):
        raise StateError("freeze mask does not mirror the parameter set")
    groups = groups or param_groups(params)
    h = state.hyper
    trainable = [k for k in named if mask[k]]

    scale = 1.0
    if h.clip_norm is not None and trainable:
        norm = math.sqrt(math.fsum(float(np.sum(np.square(grads[k]))) for k in trainable))
        if norm > h.clip_norm:
            scale = h.clip_norm / norm

    new_params, m, v, steps = {}, dict(state.m), dict(state.v), dict(state.steps)
    for k in trainable:
        # arithmetic runs in the parameter dtype: float32 in training, float64 in oracles
        arr = named[k]
        dt = arr.dtype
        lr = float(lr_by_group.get(groups[k], lr_by_group["base"]))
        g = np.asarray(grads[k], dtype=dt)
        if scale != 1.0:
            g = g * scale
        t = steps[k] + 1
        m_k = h.beta1 * state.m[k] + (1.0 - h.beta1) * g
        v_k = h.beta2 * state.v[k] + (1.0 - h.beta2) * (g * g)
        denom = np.sqrt(v_k / (1.0 - h.beta2 ** t))
        denom += h.eps
        update = (m_k / (1.0 - h.beta1 ** t)) / denom
        update *= lr
        decay = _decay_factor(k, arr, h)
        theta = arr if decay is None else arr * (1.0 - lr * h.weight_decay * decay)
        new_params[k] = (theta - update).astype(dt, copy=False)
        m[k] = m_k.astype(state.m[k].dtype, copy=False)
        v[k] = v_k.astype(state.v[k].dtype, copy=False)
        steps[k] = t
    out_state = OptimizerState(m=m, v=v, steps=steps, step_count=state.step_count + 1, hyper=h)
    return params.replace_tensors(new_params), out_state


# ---------------------------------------------------------------- schedule


@dataclass(frozen=True)
class Phase:
    start: int
    end: int
    stage: int
    kind: str


@dataclass(frozen=True)
class LrSchedule:
    """Warmup-stable-decay: linear warmup from 0, flat peak, cosine to 0 at the last step.

    The new-layer group runs at a constant ``new_layer_lr`` inside
    initialization phases and follows the base curve elsewhere.
    """

    phases: tuple[Phase, ...]
    peak_lr: float = 2e-4
    new_layer_lr: float = 5e-4
    warmup_steps: int = 1000
    decay_start: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "phases", tuple(self.phases))
        if not self.phases:
            raise ScheduleError("schedule needs at least one phase")
        if self.decay_start is None:
            object.__setattr__(self, "decay_start", _default_decay_start(self.phases,
                                                                         self.warmup_steps))
        last = self.total_steps - 1
        if not 0 <= self.warmup_steps <= self.decay_start < last:
            raise ScheduleError(
                f"need 0 <= warmup ({self.warmup_steps}) <= decay start ({self.decay_start}) "
                f"< last step ({last})")

    @property
    def total_steps(self) -> int:
        return self.phases[-1].end

    @property
    def phase_boundaries(self) -> list[int]:
        return [p.start for p in self.phases] + [self.total_steps]

    def phase_at(self, step: int) -> Phase:
        for p in self.phases:
            if p.start <= step < p.end:
                return p
        raise ScheduleError(f"step {step} outside schedule horizon [0, {self.total_steps})")


def _default_decay_start(phases, warmup):
    final_stage = phases[-1].stage
    full = [p for p in phases if p.stage == final_stage and p.kind == FULL_TUNING]
    start = full[0].start if full else phases[-1].start
    return max(start, warmup)


def warmup_lr(schedule: LrSchedule, step: float) -> float:
    return schedule.peak_lr * step / schedule.warmup_steps


def cosine_lr(schedule: LrSchedule, step: float) -> float:
    span = schedule.total_steps - 1 - schedule.decay_start
    frac = (step - schedule.decay_start) / span
    return schedule.peak_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def lr_at(schedule: LrSchedule, step: int, group: str = "base") -> float:
    phase = schedule.phase_at(step)
    if group == "new_layers" and phase.kind == INITIALIZATION:
        return schedule.new_layer_lr
    if group not in ("base", "new_layers"):
        raise ScheduleError(f"unknown parameter group {group!r}")
    if step < schedule.warmup_steps:
        return warmup_lr(schedule, step)
    if step < schedule.decay_start:
        return schedule.peak_lr
    return cosine_lr(schedule, step)
