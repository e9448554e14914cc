"""Depth-growth surgery between stages and per-phase freeze masks."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import GrowthError, MaskError
from .model import TRANSFERRED, ParameterSet, copied_from, init_layer, layer_index


@dataclass(frozen=True)
class GrowthPlan:
    stage_depths: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "stage_depths", tuple(int(d) for d in self.stage_depths))
        problems = self.violations()
        if problems:
            raise GrowthError("invalid growth plan: " + "; ".join(problems))

    def violations(self) -> list[str]:
        d = self.stage_depths
        out = []
        if not d:
            out.append("stage_depths must be nonempty")
        if any(x < 1 for x in d):
            out.append("every stage depth must be >= 1")
        if any(b <= a for a, b in zip(d, d[1:])):
            out.append(f"stage_depths must be strictly increasing, got {list(d)}")
        return out

    @property
    def n1(self) -> int:
        return self.stage_depths[0]

    @property
    def final_depth(self) -> int:
        return self.stage_depths[-1]

    @property
    def n_stages(self) -> int:
        return len(self.stage_depths)


def _with_transferred_base(params: ParameterSet, new_layers, new_depth: int) -> ParameterSet:
    base = [layer.copy(origin=TRANSFERRED) for layer in params.layers]
    return ParameterSet(
        config=params.config.with_depth(new_depth),
        embed=params.embed.copy(),
        pos_embed=params.pos_embed.copy(),
        layers=tuple(base + list(new_layers)),
        final_norm=params.final_norm.copy(),
        lm_head=params.lm_head.copy(),
    )


def expand_random(params: ParameterSet, new_depth: int, seed: int) -> ParameterSet:
    """Append ``new_depth - k`` freshly initialized layers after the existing k.

    Existing layers, embeddings, final norm and head are copied bit for bit and
    the transferred layers are tagged ``transferred``.
    """
    k = params.config.depth
    if new_depth <= k:
        raise GrowthError(f"new depth {new_depth} must exceed current depth {k}")
    cfg = params.config.with_depth(new_depth)
    fresh = [init_layer(cfg, i, seed) for i in range(k, new_depth)]
    return _with_transferred_base(params, fresh, new_depth)


def expand_copy_stack(params: ParameterSet, block_size: int) -> ParameterSet:
    """Stack copies of the topmost ``block_size`` layers on top of the model."""
    k = params.config.depth
    if block_size < 1 or block_size > k:
        raise GrowthError(f"block size {block_size} must lie in [1, {k}] (current depth)")
    copies = [params.layers[i].copy(origin=copied_from(i)) for i in range(k - block_size, k)]
    return _with_transferred_base(params, copies, k + block_size)


INITIALIZATION = "initialization"
FULL_TUNING = "full_tuning"


class FreezeMask(dict):
    """Maps tensor name -> True when trainable."""

    @property
    def trainable_names(self) -> list[str]:
        return [k for k, v in self.items() if v]

    @property
    def frozen_names(self) -> list[str]:
        return [k for k, v in self.items() if not v]


def freeze_mask(params: ParameterSet, phase: str) -> FreezeMask:
    names = params.named()
    if phase == FULL_TUNING:
        return FreezeMask({name: True for name in names})
    if phase != INITIALIZATION:
        raise MaskError(f"unknown phase {phase!r}")
    origins = params.origins
    new = {i for i, o in enumerate(origins) if o.is_new}
    if not new:
        raise MaskError("initialization phase needs at least one new (fresh or copied) layer")
    if len(new) == len(origins):
        raise MaskError("initialization phase needs a transferred base; every layer is new")
    return FreezeMask({name: layer_index(name) in new for name in names})
