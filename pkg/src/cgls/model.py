"""Compact decoder-only transformer with an exact hand-written backward pass.

Architecture: learned token and position embeddings, pre-norm residual blocks
(RMSNorm -> causal multi-head attention, RMSNorm -> GELU MLP), a final
RMSNorm and an untied LM head. No biases anywhere.

Parameters are stored as float32. Forward and backward run in a selectable
compute dtype (float32 for training, float64 for gradient checks and
scoring); log-softmax, the loss and all returned gradients are float64.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError, NumericError, TruncationError

LAYER_TENSORS = ("wq", "wk", "wv", "wo", "w1", "w2", "norm1", "norm2")
EMBEDDING_TENSORS = ("embed", "pos_embed", "lm_head")
NORM_EPS = 1e-6
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


@dataclass(frozen=True)
class Origin:
    """Provenance of a transformer layer."""

    kind: str
    source: int | None = None

    def __post_init__(self):
        if self.kind not in ("fresh_random", "transferred", "copied_from"):
            raise ValueError(f"unknown origin kind {self.kind!r}")
        if (self.kind == "copied_from") != (self.source is not None):
            raise ValueError("copied_from origins need a source index, others must not")

    @property
    def is_new(self) -> bool:
        return self.kind != "transferred"

    def __str__(self):
        if self.kind == "copied_from":
            return f"copied_from({self.source})"
        return self.kind

    @classmethod
    def parse(cls, text: str) -> "Origin":
        if text.startswith("copied_from(") and text.endswith(")"):
            return cls("copied_from", int(text[len("copied_from("):-1]))
        return cls(text)


FRESH = Origin("fresh_random")
TRANSFERRED = Origin("transferred")


def copied_from(index: int) -> Origin:
    return Origin("copied_from", index)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int
    n_heads: int
    d_ff: int
    seq_len: int
    depth: int
    init_std: float = 0.02
    seed: int = 0

    def violations(self) -> list[str]:
        out = []
        for name in ("vocab_size", "d_model", "n_heads", "d_ff", "seq_len"):
            if int(getattr(self, name)) < 1:
                out.append(f"{name} must be positive, got {getattr(self, name)}")
        if self.depth < 1:
            out.append(f"depth must be >= 1, got {self.depth}")
        if self.seq_len < 2:
            out.append(f"seq_len must be >= 2, got {self.seq_len}")
        if self.vocab_size < 2:
            out.append(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.n_heads >= 1 and self.d_model % self.n_heads != 0:
            out.append(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if not (self.init_std > 0 and math.isfinite(self.init_std)):
            out.append(f"init_std must be a positive real, got {self.init_std}")
        if not 0 <= self.seed < 2**64:
            out.append(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        return out

    def validate(self) -> "ModelConfig":
        problems = self.violations()
        if problems:
            raise ConfigError("invalid model config: " + "; ".join(problems))
        return self

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def with_depth(self, depth: int) -> "ModelConfig":
        return dataclasses.replace(self, depth=depth)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**{f.name: data[f.name] for f in dataclasses.fields(cls) if f.name in data})


@dataclass(frozen=True, eq=False)
class LayerParams:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    norm1: np.ndarray
    norm2: np.ndarray
    origin: Origin = FRESH

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in LAYER_TENSORS}

    def with_origin(self, origin: Origin) -> "LayerParams":
        return dataclasses.replace(self, origin=origin)

    def copy(self, origin: Origin | None = None) -> "LayerParams":
        arrays = {k: v.copy() for k, v in self.tensors().items()}
        return LayerParams(**arrays, origin=self.origin if origin is None else origin)


@dataclass(frozen=True, eq=False)
class ParameterSet:
    """Complete model state: embedding segment, ordered layers, final norm, LM head."""

    config: ModelConfig
    embed: np.ndarray
    pos_embed: np.ndarray
    layers: tuple[LayerParams, ...]
    final_norm: np.ndarray
    lm_head: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if len(self.layers) != self.config.depth:
            raise ConfigError(
                f"layer count {len(self.layers)} does not match config depth {self.config.depth}")
        if np.shares_memory(self.lm_head, self.embed):
            raise ConfigError("lm_head must be a distinct tensor from embed")

    def named(self) -> dict[str, np.ndarray]:
        out = {"embed": self.embed, "pos_embed": self.pos_embed}
        for i, layer in enumerate(self.layers):
            for name, arr in layer.tensors().items():
                out[f"layers.{i}.{name}"] = arr
        out["final_norm"] = self.final_norm
        out["lm_head"] = self.lm_head
        return out

    @property
    def origins(self) -> list[Origin]:
        return [layer.origin for layer in self.layers]

    def replace_tensors(self, tensors: dict[str, np.ndarray]) -> "ParameterSet":
        """New ParameterSet with the named tensors swapped in; origins are kept."""
        named = self.named()
        unknown = set(tensors) - set(named)
        if unknown:
            raise KeyError(f"unknown tensor names: {sorted(unknown)}")
        named.update(tensors)
        return self._from_named(named, self.config, self.origins)

    def astype(self, dtype) -> "ParameterSet":
        return self.replace_tensors({k: v.astype(dtype) for k, v in self.named().items()})

    def copy(self) -> "ParameterSet":
        return self.replace_tensors({k: v.copy() for k, v in self.named().items()})

    @classmethod
    def _from_named(cls, named, config, origins) -> "ParameterSet":
        layers = []
        for i, origin in enumerate(origins):
            layers.append(LayerParams(
                **{name: named[f"layers.{i}.{name}"] for name in LAYER_TENSORS}, origin=origin))
        return cls(config=config, embed=named["embed"], pos_embed=named["pos_embed"],
                   layers=tuple(layers), final_norm=named["final_norm"],
                   lm_head=named["lm_head"])

    def check_finite(self):
        for name, arr in self.named().items():
            if not np.isfinite(arr).all():
                raise NumericError(f"non-finite values in parameter {name}")


def tensor_names(depth: int) -> list[str]:
    names = ["embed", "pos_embed"]
    names += [f"layers.{i}.{t}" for i in range(depth) for t in LAYER_TENSORS]
    return names + ["final_norm", "lm_head"]


def layer_index(name: str) -> int | None:
    if name.startswith("layers."):
        return int(name.split(".")[1])
    return None


def is_norm(name: str) -> bool:
    return name == "final_norm" or name.endswith(".norm1") or name.endswith(".norm2")


@dataclass(frozen=True, eq=False)
class TokenBatch:
    """A [batch, width] matrix of token ids. Inputs are columns :-1, targets 1:.

    Targets equal to ``pad_id`` (when set) are excluded from the loss.
    """

    tokens: np.ndarray
    tier_counts: tuple[int, int, int] = (0, 0, 0)
    pad_id: int | None = None

    def __post_init__(self):
        tokens = np.asarray(self.tokens)
        if tokens.ndim != 2 or tokens.shape[1] < 2:
            raise InputError(f"batch must be [batch, width>=2], got shape {tokens.shape}")
        if not np.issubdtype(tokens.dtype, np.integer):
            raise InputError("batch tokens must be integers")
        object.__setattr__(self, "tokens", tokens)

    @property
    def inputs(self) -> np.ndarray:
        return self.tokens[:, :-1]

    @property
    def targets(self) -> np.ndarray:
        return self.tokens[:, 1:]

    @property
    def n_positions(self) -> int:
        return self.tokens.shape[0] * (self.tokens.shape[1] - 1)


# ---------------------------------------------------------------- init


def _tensor_rng(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *path]))


def _normal(seed, path, shape, std):
    return (_tensor_rng(seed, *path).standard_normal(shape, dtype=np.float32)
            * np.float32(std))


def init_layer(config: ModelConfig, index: int, seed: int) -> LayerParams:
    """Fresh random layer at position ``index``; seeds are derived per tensor."""
    d, f = config.d_model, config.d_ff
    shapes = {"wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d), "w1": (d, f), "w2": (f, d)}
    arrays = {name: _normal(seed, (1, index, code), shape, config.init_std)
              for code, (name, shape) in enumerate(shapes.items())}
    arrays["norm1"] = np.ones(d, dtype=np.float32)
    arrays["norm2"] = np.ones(d, dtype=np.float32)
    return LayerParams(**arrays, origin=FRESH)


def new_model(config: ModelConfig) -> ParameterSet:
    config.validate()
    seed, std = config.seed, config.init_std
    return ParameterSet(
        config=config,
        embed=_normal(seed, (0, 0), (config.vocab_size, config.d_model), std),
        pos_embed=_normal(seed, (0, 1), (config.seq_len, config.d_model), std),
        layers=tuple(init_layer(config, i, seed) for i in range(config.depth)),
        final_norm=np.ones(config.d_model, dtype=np.float32),
        lm_head=_normal(seed, (0, 2), (config.d_model, config.vocab_size), std),
    )


def count_params(config: ModelConfig, include_embeddings: bool = True) -> int:
    d, f = config.d_model, config.d_ff
    per_layer = 4 * d * d + 2 * d * f + 2 * d
    total = config.depth * per_layer + d
    if include_embeddings:
        total += 2 * config.vocab_size * d + config.seq_len * d
    return total


def param_count(params: ParameterSet, include_embeddings: bool = True) -> int:
    return sum(int(arr.size) for name, arr in params.named().items()
               if include_embeddings or name not in EMBEDDING_TENSORS)


# ---------------------------------------------------------------- kernels


def _rmsnorm(x, g):
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + NORM_EPS)
    xhat = x * r
    return xhat * g, (xhat, r)


def _rmsnorm_back(dy, g, cache):
    xhat, r = cache
    dg = (dy * xhat).reshape(-1, dy.shape[-1]).sum(axis=0)
    dxhat = dy * g
    dx = r * (dxhat - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
    return dx, dg


def _gelu(u):
    # tanh approximation, written in place to avoid large temporaries
    z = u * u
    z *= _GELU_A
    z += 1.0
    z *= u
    z *= _GELU_C
    t = np.tanh(z, out=z)
    g = t + 1.0
    g *= u
    g *= 0.5
    return g, t


def _gelu_back(dg, u, t):
    inner = u * u
    inner *= 3.0 * _GELU_A * _GELU_C
    inner += _GELU_C
    s = t * t
    np.subtract(1.0, s, out=s)
    s *= u
    s *= inner
    s += t
    s += 1.0
    s *= 0.5
    s *= dg
    return s


def _causal_bias(T, dtype):
    bias = np.zeros((T, T), dtype=dtype)
    bias[np.triu_indices(T, 1)] = -np.inf
    return bias


def _block_forward(x, w, n_heads, bias):
    B, T, D = x.shape
    dh = D // n_heads
    xn1, n1 = _rmsnorm(x, w["norm1"])
    qkv = xn1.reshape(-1, D) @ w["wqkv"]
    qkv = qkv.reshape(B, T, 3, n_heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scale = 1.0 / math.sqrt(dh)
    s = (q @ k.transpose(0, 1, 3, 2)) * x.dtype.type(scale) + bias
    s -= s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    y = (p @ v).transpose(0, 2, 1, 3).reshape(B, T, D)
    h = x + (y.reshape(-1, D) @ w["wo"]).reshape(B, T, D)
    xn2, n2 = _rmsnorm(h, w["norm2"])
    u = xn2.reshape(-1, D) @ w["w1"]
    g, t = _gelu(u)
    out = h + (g @ w["w2"]).reshape(B, T, D)
    cache = (xn1, n1, q, k, v, p, y, xn2, n2, u, t, g)
    return out, cache


def _block_backward(dout, w, n_heads, cache):
    xn1, n1, q, k, v, p, y, xn2, n2, u, t, g = cache
    B, T, D = dout.shape
    dh = D // n_heads
    grads = {}
    dflat = dout.reshape(-1, D)
    grads["w2"] = g.T @ dflat
    du = _gelu_back(dflat @ w["w2"].T, u, t)
    grads["w1"] = xn2.reshape(-1, D).T @ du
    dxn2 = (du @ w["w1"].T).reshape(B, T, D)
    dh_norm, grads["norm2"] = _rmsnorm_back(dxn2, w["norm2"], n2)
    dhid = dout + dh_norm
    dflat = dhid.reshape(-1, D)
    grads["wo"] = y.reshape(-1, D).T @ dflat
    dy = (dflat @ w["wo"].T).reshape(B, T, n_heads, dh).transpose(0, 2, 1, 3)
    dp = dy @ v.transpose(0, 1, 3, 2)
    dv = p.transpose(0, 1, 3, 2) @ dy
    ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True))
    ds *= dout.dtype.type(1.0 / math.sqrt(dh))
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(B * T, 3 * D)
    dwqkv = xn1.reshape(-1, D).T @ dqkv
    grads["wq"], grads["wk"], grads["wv"] = np.split(dwqkv, 3, axis=1)
    dxn1 = (dqkv @ w["wqkv"].T).reshape(B, T, D)
    dx_norm, grads["norm1"] = _rmsnorm_back(dxn1, w["norm1"], n1)
    return dhid + dx_norm, grads


def _layer_weights(layer: LayerParams, dtype) -> dict:
    w = {name: np.asarray(arr, dtype=dtype) for name, arr in layer.tensors().items()}
    w["wqkv"] = np.concatenate([w["wq"], w["wk"], w["wv"]], axis=1)
    return w


def _check_tokens(params: ParameterSet, tokens: np.ndarray):
    if tokens.size and (tokens.min() < 0 or tokens.max() >= params.config.vocab_size):
        raise InputError(
            f"token ids must lie in [0, {params.config.vocab_size}); "
            f"got range [{tokens.min()}, {tokens.max()}]")
    if tokens.shape[-1] - 1 > params.config.seq_len:
        raise InputError(
            f"batch width {tokens.shape[-1]} exceeds seq_len+1 = {params.config.seq_len + 1}")


def _forward(params: ParameterSet, inputs: np.ndarray, dtype, keep_cache: bool):
    cfg = params.config
    B, T = inputs.shape
    x = (np.asarray(params.embed, dtype=dtype)[inputs]
         + np.asarray(params.pos_embed[:T], dtype=dtype))
    bias = _causal_bias(T, dtype)
    weights, caches = [], []
    for i, layer in enumerate(params.layers):
        w = _layer_weights(layer, dtype)
        with np.errstate(over="ignore", invalid="ignore"):
            # non-finite values are caught just below, with the layer index
            x, cache = _block_forward(x, w, cfg.n_heads, bias)
        if not np.isfinite(x).all():
            raise NumericError(f"non-finite activations after layer {i}", layer=i)
        if keep_cache:
            weights.append(w)
            caches.append(cache)
    gf = np.asarray(params.final_norm, dtype=dtype)
    xf, nf = _rmsnorm(x, gf)
    logits = xf @ np.asarray(params.lm_head, dtype=dtype)
    if not np.isfinite(logits).all():
        raise NumericError("non-finite logits after final layer", layer=cfg.depth)
    return logits, (weights, caches, xf, nf, gf)


def _log_softmax64(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z -= z.max(axis=-1, keepdims=True)
    z -= np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return z


def _target_mask(batch: TokenBatch) -> np.ndarray:
    if batch.pad_id is None:
        return np.ones(batch.targets.shape, dtype=bool)
    return batch.targets != batch.pad_id


def nll_sum(params: ParameterSet, batch: TokenBatch, dtype=np.float32) -> tuple[float, int]:
    """(sum of -ln P(target), number of scored positions), pads excluded."""
    _check_tokens(params, batch.tokens)
    logits, _ = _forward(params, batch.inputs, dtype, keep_cache=False)
    logp = _log_softmax64(logits)
    tgt = batch.targets
    picked = np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0]
    mask = _target_mask(batch)
    return float(-picked[mask].sum()), int(mask.sum())


def forward_loss(params: ParameterSet, batch: TokenBatch, dtype=np.float32) -> float:
    """Mean next-token negative log-likelihood in nats."""
    total, count = nll_sum(params, batch, dtype)
    if count == 0:
        raise InputError("batch has no scored (non-pad) target positions")
    return total / count


def loss_and_grad(params: ParameterSet, batch: TokenBatch, dtype=np.float32):
    """Mean NLL (accumulated in float64) and its gradient w.r.t. every tensor.

    Gradients come back in the compute ``dtype``.
    """
    _check_tokens(params, batch.tokens)
    cfg = params.config
    inputs, targets = batch.inputs, batch.targets
    B, T = inputs.shape
    logits, (weights, caches, xf, nf, gf) = _forward(params, inputs, dtype, keep_cache=True)
    logp = _log_softmax64(logits)
    mask = _target_mask(batch)
    count = int(mask.sum())
    if count == 0:
        raise InputError("batch has no scored (non-pad) target positions")
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = float(-picked[mask].sum() / count)

    dlogits = np.exp(logp)
    np.put_along_axis(dlogits, targets[..., None],
                      np.take_along_axis(dlogits, targets[..., None], axis=-1) - 1.0, axis=-1)
    dlogits *= mask[..., None] / count
    dlogits = dlogits.astype(dtype)

    grads: dict[str, np.ndarray] = {}
    lm_head = np.asarray(params.lm_head, dtype=dtype)
    grads["lm_head"] = xf.reshape(-1, cfg.d_model).T @ dlogits.reshape(-1, cfg.vocab_size)
    dx, grads["final_norm"] = _rmsnorm_back(dlogits @ lm_head.T, gf, nf)
    for i in reversed(range(cfg.depth)):
        dx, layer_grads = _block_backward(dx, weights[i], cfg.n_heads, caches[i])
        for name, g in layer_grads.items():
            grads[f"layers.{i}.{name}"] = g
    dflat = dx.reshape(-1, cfg.d_model)
    onehot = np.zeros((dflat.shape[0], cfg.vocab_size), dtype=dflat.dtype)
    onehot[np.arange(dflat.shape[0]), inputs.ravel()] = 1.0
    grads["embed"] = onehot.T @ dflat
    dpos = np.zeros(params.pos_embed.shape, dtype=dflat.dtype)
    dpos[:T] = dx.sum(axis=0)
    grads["pos_embed"] = dpos

    out = {}
    for name in tensor_names(cfg.depth):
        g = np.asarray(grads[name], dtype=dtype)
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}", layer=layer_index(name))
        out[name] = g
    return loss, out


def grad(params: ParameterSet, batch: TokenBatch, dtype=np.float32) -> dict[str, np.ndarray]:
    return loss_and_grad(params, batch, dtype)[1]


# ---------------------------------------------------------------- scoring


def token_logprobs(params: ParameterSet, tokens, dtype=np.float64) -> np.ndarray:
    """ln P(tokens[i] | tokens[:i]) for i = 1..len-1 of a single sequence."""
    tokens = np.asarray(tokens, dtype=np.int64)[None, :]
    _check_tokens(params, tokens)
    logits, _ = _forward(params, tokens[:, :-1], dtype, keep_cache=False)
    logp = _log_softmax64(logits)
    return np.take_along_axis(logp, tokens[:, 1:, None], axis=-1)[0, :, 0]


def next_token_logprobs(params: ParameterSet, context, dtype=np.float64) -> np.ndarray:
    context = np.asarray(context, dtype=np.int64)[None, :]
    if context.shape[1] < 1:
        raise InputError("context must be nonempty")
    if context.shape[1] > params.config.seq_len:
        raise TruncationError(
            f"context of {context.shape[1]} tokens exceeds seq_len {params.config.seq_len}")
    _check_tokens(params, context)
    logits, _ = _forward(params, context, dtype, keep_cache=False)
    return _log_softmax64(logits)[0, -1]


def logprob_continuation(params: ParameterSet, context, continuation,
                         dtype=np.float64) -> tuple[float, int]:
    """Sum of ln P(continuation token | everything before it) and the token count."""
    context = np.asarray(context, dtype=np.int64)
    continuation = np.asarray(continuation, dtype=np.int64)
    if context.size == 0:
        raise InputError("context must be nonempty")
    if continuation.size == 0:
        raise InputError("continuation must be nonempty")
    total = context.size + continuation.size
    if total > params.config.seq_len:
        raise TruncationError(
            f"context+continuation is {total} tokens, exceeds seq_len {params.config.seq_len}")
    lp = token_logprobs(params, np.concatenate([context, continuation]), dtype)
    return float(lp[context.size - 1:].sum()), int(continuation.size)
