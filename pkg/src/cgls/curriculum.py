"""Tiered corpora, per-stage mixture schedules and deterministic batch sampling."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tokenizer
from .errors import ConfigError, SamplingError
from .model import TokenBatch

TIERS = ("easy", "medium", "hard")
WEIGHT_TOL = 1e-9


@dataclass(frozen=True)
class MixtureWeights:
    p: float
    q: float
    r: float

    @classmethod
    def of(cls, values: Sequence[float]) -> "MixtureWeights":
        if len(values) != 3:
            raise ConfigError(f"mixture weights need exactly 3 values, got {list(values)}")
        return cls(*(float(v) for v in values))

    @classmethod
    def one_hot(cls, tier: int) -> "MixtureWeights":
        return cls.of([1.0 if i == tier else 0.0 for i in range(3)])

    def as_array(self) -> np.ndarray:
        return np.array([self.p, self.q, self.r], dtype=np.float64)

    def as_list(self) -> list[float]:
        return [self.p, self.q, self.r]

    def violations(self) -> list[str]:
        out = []
        for name, w in zip("pqr", self.as_list()):
            if not math.isfinite(w) or w < 0 or w > 1:
                out.append(f"weight {name}={w} outside [0, 1]")
        total = math.fsum(self.as_list())
        if abs(total - 1.0) > WEIGHT_TOL:
            out.append(f"weights sum to {total:g}, not 1")
        return out

    def check(self) -> "MixtureWeights":
        problems = self.violations()
        if problems:
            raise ConfigError(f"invalid mixture {self.as_list()}: " + "; ".join(problems))
        return self


@dataclass(frozen=True, eq=False)
class TierCorpus:
    """Tokenized documents of a single difficulty tier, stored back to back."""

    tier: str
    tokens: np.ndarray
    offsets: np.ndarray
    texts: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.tier not in TIERS:
            raise ConfigError(f"unknown tier {self.tier!r}")

    @classmethod
    def from_documents(cls, tier: str, documents: Iterable[Sequence[int]],
                       texts: Sequence[str] | None = None) -> "TierCorpus":
        docs = [np.asarray(d, dtype=np.int64) for d in documents]
        lengths = np.array([len(d) for d in docs], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
        tokens = np.concatenate(docs) if docs else np.zeros(0, dtype=np.int64)
        return cls(tier, tokens.astype(np.int64), offsets,
                   tuple(texts) if texts is not None else None)

    @classmethod
    def from_texts(cls, tier: str, texts: Sequence[str]) -> "TierCorpus":
        kept = [t for t in texts if len(tokenizer.encode(t)) >= 2]
        return cls.from_documents(tier, [tokenizer.encode(t) for t in kept], kept)

    @property
    def n_documents(self) -> int:
        return len(self.offsets) - 1

    @property
    def total_tokens(self) -> int:
        return int(self.offsets[-1])

    @property
    def lengths(self) -> np.ndarray:
        return np.diff(self.offsets)

    @property
    def documents(self) -> list[np.ndarray]:
        return [self.tokens[a:b] for a, b in zip(self.offsets[:-1], self.offsets[1:])]

    def _window_index(self, width: int) -> np.ndarray:
        cache = self.__dict__.setdefault("_windows", {})
        if width not in cache:
            counts = np.maximum(self.lengths - width + 1, 1)
            cache[width] = np.cumsum(counts)
        return cache[width]


# ---------------------------------------------------------------- schedules


@dataclass(frozen=True)
class StageSpec:
    depth: int
    weights: MixtureWeights
    flop_fraction: float
    init_weights: MixtureWeights | None = None
    init_fraction: float | None = None


@dataclass(frozen=True)
class StageSchedule:
    stages: tuple[StageSpec, ...]
    init_phase_weights: MixtureWeights
    init_phase_fraction: float
    name: str = "custom"
    provenance: str = ""

    @property
    def depths(self) -> list[int]:
        return [s.depth for s in self.stages]

    @property
    def flop_fractions(self) -> list[float]:
        return [s.flop_fraction for s in self.stages]

    def init_weights_for(self, i: int) -> MixtureWeights:
        spec = self.stages[i]
        return spec.init_weights if spec.init_weights is not None else self.init_phase_weights

    def init_fraction_for(self, i: int) -> float:
        if i == 0:
            return 0.0
        spec = self.stages[i]
        return spec.init_fraction if spec.init_fraction is not None else self.init_phase_fraction

    def to_dict(self) -> dict:
        stages = []
        for s in self.stages:
            entry = {"depth": s.depth, "weights": s.weights.as_list(),
                     "flop_fraction": s.flop_fraction}
            if s.init_weights is not None:
                entry["init_weights"] = s.init_weights.as_list()
            if s.init_fraction is not None:
                entry["init_fraction"] = s.init_fraction
            stages.append(entry)
        return {"name": self.name, "provenance": self.provenance, "stages": stages,
                "init_phase_weights": self.init_phase_weights.as_list(),
                "init_phase_fraction": self.init_phase_fraction}

    @classmethod
    def from_dict(cls, data: dict) -> "StageSchedule":
        stages = []
        for s in data["stages"]:
            stages.append(StageSpec(
                depth=int(s["depth"]),
                weights=MixtureWeights.of(s["weights"]),
                flop_fraction=float(s["flop_fraction"]),
                init_weights=MixtureWeights.of(s["init_weights"]) if "init_weights" in s else None,
                init_fraction=float(s["init_fraction"]) if "init_fraction" in s else None,
            ))
        return cls(stages=tuple(stages),
                   init_phase_weights=MixtureWeights.of(data["init_phase_weights"]),
                   init_phase_fraction=float(data["init_phase_fraction"]),
                   name=data.get("name", "custom"), provenance=data.get("provenance", ""))


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok


def validate_schedule(schedule: StageSchedule, stage_depths: Sequence[int] | None = None
                      ) -> ValidationReport:
    report = ValidationReport()
    add = report.violations.append
    if not schedule.stages:
        add("schedule has no stages")
        return report
    for i, stage in enumerate(schedule.stages):
        for v in stage.weights.violations():
            add(f"stages[{i}].weights: {v}")
        if stage.init_weights is not None:
            for v in stage.init_weights.violations():
                add(f"stages[{i}].init_weights: {v}")
        if not (0 <= stage.flop_fraction <= 1):
            add(f"stages[{i}].flop_fraction {stage.flop_fraction} outside [0, 1]")
        if stage.init_fraction is not None and not (0 <= stage.init_fraction < 1):
            add(f"stages[{i}].init_fraction {stage.init_fraction} outside [0, 1)")
    for v in schedule.init_phase_weights.violations():
        add(f"init_phase_weights: {v}")
    if not (0 < schedule.init_phase_fraction < 1):
        add(f"init_phase_fraction {schedule.init_phase_fraction} outside (0, 1)")
    total = math.fsum(schedule.flop_fractions)
    if abs(total - 1.0) > WEIGHT_TOL:
        add(f"flop fractions sum to {total:g}, not 1")
    depths = schedule.depths
    if any(b <= a for a, b in zip(depths, depths[1:])):
        add(f"stage depths must strictly increase, got {depths}")
    if stage_depths is not None and list(stage_depths) != depths:
        add(f"stage depths {depths} disagree with growth plan {list(stage_depths)}")
    return report


# ---------------------------------------------------------------- presets


def list_presets() -> list[str]:
    root = resources.files("cgls") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def preset_data(name: str) -> dict:
    path = resources.files("cgls") / "presets" / f"{name}.json"
    if not path.is_file():
        raise ConfigError(f"unknown schedule preset {name!r}; available: {list_presets()}")
    return json.loads(path.read_text(encoding="utf-8"))


def schedule_from_stage_tokens(data: dict, params_for_depth: Callable[[int], int]
                               ) -> StageSchedule:
    """Build a schedule whose fractions come from absolute per-stage token counts.

    Each stage lists ``[init_tokens, full_tokens]``; its FLOP share is
    ``6 * tokens * params(depth)`` over the whole run.
    """
    flops = []
    init_fracs = []
    for s in data["stages"]:
        init_t, full_t = s["tokens"]
        flops.append(6.0 * (init_t + full_t) * params_for_depth(s["depth"]))
        init_fracs.append(init_t / (init_t + full_t))
    total = math.fsum(flops)
    stages = []
    for s, f, fi in zip(data["stages"], flops, init_fracs):
        w = MixtureWeights.of(s["weights"])
        stages.append(StageSpec(depth=int(s["depth"]), weights=w, flop_fraction=f / total,
                                init_weights=MixtureWeights.of(s.get("init_weights", s["weights"])),
                                init_fraction=fi))
    return StageSchedule(stages=tuple(stages),
                         init_phase_weights=MixtureWeights.of(data["init_phase_weights"]),
                         init_phase_fraction=float(data["init_phase_fraction"]),
                         name=data["name"], provenance=data.get("provenance", ""))


def load_preset(name: str, params_for_depth: Callable[[int], int] | None = None
                ) -> StageSchedule:
    """Load a shipped schedule.

    Token-denominated presets need a parameter counter to turn tokens into
    FLOP fractions; by default the preset's own reference model is used.
    """
    data = preset_data(name)
    if data.get("units") == "tokens":
        if params_for_depth is None:
            from .model import ModelConfig, count_params
            ref = data["reference_model"]

            def params_for_depth(depth):
                return count_params(ModelConfig(**ref, depth=depth))
        return schedule_from_stage_tokens(data, params_for_depth)
    return StageSchedule.from_dict(data)


# ---------------------------------------------------------------- sampling


@dataclass(frozen=True)
class SamplerState:
    """Counter-based RNG position: (seed, stream) pick the key, counter the block."""

    seed: int
    stream: int = 0
    counter: int = 0

    def uniforms(self, n: int) -> tuple[np.ndarray, "SamplerState"]:
        key = (self.seed % 2**64) | (self.stream % 2**64) << 64
        gen = np.random.Generator(np.random.Philox(key=key, counter=self.counter))
        # Philox emits four 64-bit words per counter value, so advancing by n
        # counter values never reuses one.
        return gen.random(n), SamplerState(self.seed, self.stream, self.counter + n)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "stream": self.stream, "counter": self.counter}


def _as_tier_tuple(corpora) -> tuple[TierCorpus, TierCorpus, TierCorpus]:
    if isinstance(corpora, dict):
        corpora = [corpora[t] for t in TIERS]
    corpora = tuple(corpora)
    if len(corpora) != 3 or [c.tier for c in corpora] != list(TIERS):
        raise SamplingError("corpora must be the easy, medium and hard tiers in that order")
    return corpora


def sample_batch(corpora, weights: MixtureWeights, state: SamplerState, batch_size: int,
                 seq_len: int, pad_id: int = tokenizer.PAD_ID
                 ) -> tuple[TokenBatch, SamplerState]:
    """Draw ``batch_size`` windows of ``seq_len + 1`` tokens from the tier mixture.

    Each row independently picks a tier with probability (p, q, r), then a
    window uniformly among all windows of that tier. Windows never cross a
    document boundary; documents shorter than a window are right-padded.
    """
    corpora = _as_tier_tuple(corpora)
    weights.check()
    w = weights.as_array()
    for tier, corpus, wt in zip(TIERS, corpora, w):
        if wt > 0 and corpus.total_tokens == 0:
            raise SamplingError(f"tier {tier!r} has positive weight {wt} but is empty")
    width = seq_len + 1
    u, state = state.uniforms(2 * batch_size)
    u_tier, u_win = u[:batch_size], u[batch_size:]
    cum = np.cumsum(w)
    last = int(np.flatnonzero(w > 0)[-1])
    tiers = np.minimum(np.searchsorted(cum, u_tier, side="right"), last)

    tokens = np.full((batch_size, width), pad_id, dtype=np.int64)
    counts = [0, 0, 0]
    for t, corpus in enumerate(corpora):
        rows = np.flatnonzero(tiers == t)
        if rows.size == 0:
            continue
        counts[t] = int(rows.size) * seq_len
        cumwin = corpus._window_index(width)
        j = np.minimum((u_win[rows] * cumwin[-1]).astype(np.int64), cumwin[-1] - 1)
        doc = np.searchsorted(cumwin, j, side="right")
        start = j - np.concatenate([[0], cumwin])[doc]
        begin = corpus.offsets[doc] + start
        end = corpus.offsets[doc + 1]
        pos = begin[:, None] + np.arange(width)[None, :]
        valid = pos < end[:, None]
        window = corpus.tokens[np.minimum(pos, corpus.total_tokens - 1)]
        tokens[rows] = np.where(valid, window, pad_id)
    return TokenBatch(tokens, tier_counts=tuple(counts), pad_id=pad_id), state


def tokens_consumed(batches: Iterable[TokenBatch]) -> dict[str, int]:
    totals = {t: 0 for t in TIERS}
    total = 0
    for b in batches:
        for t, c in zip(TIERS, b.tier_counts):
            totals[t] += int(c)
        total += b.n_positions
    totals["total"] = total
    return totals


# ---------------------------------------------------------------- shard I/O


def read_shard(path) -> list[str]:
    """One document per line, UTF-8; blank lines are skipped."""
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.strip()]


def write_shard(path, documents: Iterable[str]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for doc in documents:
            if "\n" in doc:
                raise ValueError("documents written to a shard must not contain newlines")
            fh.write(doc + "\n")


def read_tier_manifest(path) -> dict[Path, str]:
    """Sidecar manifest ``{"shards": {shard_path: tier}}``; paths relative to the manifest."""
    path = Path(path)
    data = json.loads(path.read_text(encoding="utf-8"))
    out = {}
    for shard, tier in data["shards"].items():
        if tier not in TIERS:
            raise ConfigError(f"manifest {path}: unknown tier {tier!r} for shard {shard}")
        p = Path(shard)
        out[p if p.is_absolute() else path.parent / p] = tier
    return out


def write_tier_manifest(path, shards: dict[str, str]):
    path = Path(path)
    path.write_text(json.dumps({"shards": shards}, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def load_corpora(shards: dict) -> tuple[TierCorpus, TierCorpus, TierCorpus]:
    """Load tier corpora from a ``{path: tier}`` mapping (several shards per tier allowed)."""
    texts = {t: [] for t in TIERS}
    for shard, tier in shards.items():
        texts[tier].extend(read_shard(shard))
    return tuple(TierCorpus.from_texts(t, texts[t]) for t in TIERS)
