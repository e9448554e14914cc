import math

import numpy as np
import pytest

from cgls import tokenizer
from cgls.errors import ConfigError, InputError, NumericError, TruncationError
from cgls.model import (
    FRESH, ModelConfig, Origin, TokenBatch, copied_from, count_params, forward_loss, grad,
    logprob_continuation, loss_and_grad, new_model, next_token_logprobs, param_count,
)

from .conftest import TINY, random_batch, uniform_params


def test_new_model_is_deterministic_per_seed(tiny_config):
    a, b = new_model(tiny_config), new_model(tiny_config)
    for (ka, va), (kb, vb) in zip(a.named().items(), b.named().items()):
        assert ka == kb and np.array_equal(va, vb)
    c = new_model(ModelConfig(**TINY, seed=8))
    assert any(not np.array_equal(a.named()[k], c.named()[k]) for k in a.named())


def test_new_model_layout(tiny_params):
    p = tiny_params
    assert len(p.layers) == 2
    assert all(o == FRESH for o in p.origins)
    assert p.lm_head is not p.embed and not np.shares_memory(p.lm_head, p.embed)
    assert np.all(p.layers[0].norm1 == 1.0) and np.all(p.final_norm == 1.0)
    assert p.embed.dtype == np.float32


@pytest.mark.parametrize("bad", [dict(depth=0), dict(d_model=9), dict(seq_len=1),
                                 dict(vocab_size=1)])
def test_invalid_config_is_rejected(bad):
    cfg = ModelConfig(**{**TINY, **bad})
    with pytest.raises(ConfigError):
        new_model(cfg)


def test_config_error_names_constraint():
    with pytest.raises(ConfigError, match="divisible"):
        ModelConfig(**{**TINY, "d_model": 9}).validate()


def test_origin_round_trip():
    for o in (FRESH, Origin("transferred"), copied_from(3)):
        assert Origin.parse(str(o)) == o


def test_uniform_logits_give_ln_vocab(tiny_config):
    p = uniform_params(tiny_config)
    loss = forward_loss(p, random_batch(0), dtype=np.float64)
    assert loss == pytest.approx(math.log(256), abs=1e-12)
    assert math.exp(loss) == pytest.approx(256.0, abs=1e-6)


def test_uniform_continuation_logprob(tiny_config):
    p = uniform_params(tiny_config)
    s, n = logprob_continuation(p, [5, 6], [7, 8, 9])
    assert n == 3 and s == pytest.approx(3 * math.log(1 / 256), abs=1e-9)


def test_single_token_continuation_equals_log_softmax(tiny_params):
    s, n = logprob_continuation(tiny_params, [3, 4, 5], [6])
    assert n == 1
    assert s == pytest.approx(next_token_logprobs(tiny_params, [3, 4, 5])[6], abs=1e-12)


def test_continuation_chain_rule():
    for seed in range(5):
        p = new_model(ModelConfig(**TINY, init_std=0.3, seed=seed))
        ctx, a, b = [1, 2, 3], 40, 41
        whole, _ = logprob_continuation(p, ctx, [a, b])
        first, _ = logprob_continuation(p, ctx, [a])
        second, _ = logprob_continuation(p, ctx + [a], [b])
        assert whole == pytest.approx(first + second, abs=1e-6)


def test_overlong_continuation_raises(tiny_params):
    with pytest.raises(TruncationError):
        logprob_continuation(tiny_params, list(range(1, 10)), list(range(1, 10)))


def test_out_of_vocab_token_is_input_error(tiny_params):
    bad = TokenBatch(np.full((1, 17), 300))
    with pytest.raises(InputError):
        forward_loss(tiny_params, bad)


def test_non_finite_reports_layer(tiny_params):
    layers = tiny_params.named()
    broken = tiny_params.replace_tensors({"layers.1.w2": np.full_like(layers["layers.1.w2"], np.inf)})
    with pytest.raises(NumericError) as err:
        forward_loss(broken, random_batch(1))
    assert err.value.layer == 1


def test_gradient_matches_finite_differences_depth1():
    cfg = ModelConfig(vocab_size=256, d_model=4, n_heads=2, d_ff=8, seq_len=6, depth=1,
                      init_std=0.2, seed=11)
    p = new_model(cfg).astype(np.float64)
    batch = random_batch(3, batch=2, width=7)
    _, g = loss_and_grad(p, batch, dtype=np.float64)
    rng = np.random.default_rng(0)
    named = p.named()
    names = list(named)
    worst = 0.0
    for _ in range(100):
        name = names[rng.integers(len(names))]
        idx = tuple(rng.integers(0, s) for s in named[name].shape)
        vals = []
        for k in (1, -1, 2, -2):
            arr = named[name].copy()
            arr[idx] += k * 1e-3
            vals.append(forward_loss(p.replace_tensors({name: arr}), batch, dtype=np.float64))
        num = (8 * (vals[0] - vals[1]) - (vals[2] - vals[3])) / 12e-3
        ana = g[name][idx]
        denom = max(abs(ana), abs(num))
        worst = max(worst, 0.0 if denom == 0 else abs(ana - num) / denom)
    assert worst < 1e-4


def test_absent_tokens_get_zero_embedding_rows(tiny_params):
    batch = TokenBatch(np.array([[10, 11, 12] * 5 + [10, 11]]), pad_id=0)
    g = grad(tiny_params, batch)
    used = {10, 11, 12}
    untouched = [r for r in range(256) if r not in used]
    assert np.all(g["embed"][untouched] == 0.0)
    assert np.any(g["embed"][10] != 0.0)


def test_grad_is_deterministic(tiny_params):
    b = random_batch(4)
    g1, g2 = grad(tiny_params, b), grad(tiny_params, b)
    assert all(np.array_equal(g1[k], g2[k]) for k in g1)


def test_pad_targets_do_not_count(tiny_params):
    full = np.array([[5, 6, 7, 8, 9] + [0] * 12])
    s = forward_loss(tiny_params, TokenBatch(full, pad_id=0), dtype=np.float64)
    short = forward_loss(tiny_params, TokenBatch(full[:, :5], pad_id=0), dtype=np.float64)
    assert s == pytest.approx(short, abs=1e-12)


def test_param_counts(tiny_config):
    p = new_model(tiny_config)
    assert p.embed.size == 2048
    non_emb = param_count(p, include_embeddings=False)
    full = param_count(p)
    assert full == non_emb + p.embed.size + p.lm_head.size + p.pos_embed.size
    assert full == count_params(tiny_config)
    deeper = new_model(tiny_config.with_depth(4))
    per_layer = non_emb - p.final_norm.size
    assert param_count(deeper, False) - deeper.final_norm.size == 2 * per_layer


def test_overfit_single_batch():
    from cgls.growth import FULL_TUNING, freeze_mask
    from cgls.optim import AdamWHyper, adamw_step, init_state

    p = new_model(ModelConfig(**TINY, seed=1))
    batch = TokenBatch(np.full((2, 17), 65), pad_id=0)
    state = init_state(p, AdamWHyper(weight_decay=0.0))
    mask = freeze_mask(p, FULL_TUNING)
    for _ in range(200):
        _, g = loss_and_grad(p, batch)
        p, state = adamw_step(p, g, state, mask, {"base": 1e-2})
    assert forward_loss(p, batch) < 0.1


def test_tokenizer_round_trip():
    text = "héllo wörld"
    toks = tokenizer.encode(text)
    assert tokenizer.PAD_ID not in toks
    assert tokenizer.decode(toks) == text
    assert tokenizer.decode(tokenizer.encode("a\x00b")) == "ab"
