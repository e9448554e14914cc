"""A tiny transformer, checked against finite differences.

The whole model is plain numpy, so every gradient is hand-derived. Before
trusting any training curve we compare those gradients with a numerical
estimate, then overfit one batch to show the optimizer drives the loss down.

    python3 demos/01_gradients_by_hand.py
"""

import numpy as np

from cgls.growth import FULL_TUNING, freeze_mask
from cgls.model import ModelConfig, TokenBatch, forward_loss, loss_and_grad, new_model
from cgls.optim import AdamWHyper, adamw_step, init_state

cfg = ModelConfig(vocab_size=256, d_model=8, n_heads=2, d_ff=16, seq_len=8, depth=2,
                  init_std=0.25, seed=1)
params = new_model(cfg).astype(np.float64)
rng = np.random.default_rng(0)
batch = TokenBatch(rng.integers(1, 256, size=(2, cfg.seq_len + 1)), pad_id=0)

loss, grads = loss_and_grad(params, batch, dtype=np.float64)
print(f"untrained loss {loss:.4f} nats (ln 256 = {np.log(256):.4f})")

print("\nanalytic vs numerical gradient on a few coordinates:")
h = 1e-3
for name in ("lm_head", "layers.1.w2", "layers.0.wq", "layers.0.norm1"):
    arr = params.named()[name]
    idx = tuple(int(rng.integers(s)) for s in arr.shape)
    f = []
    for k in (1, -1, 2, -2):
        bumped = arr.copy()
        bumped[idx] += k * h
        f.append(forward_loss(params.replace_tensors({name: bumped}), batch, dtype=np.float64))
    numeric = (8 * (f[0] - f[1]) - (f[2] - f[3])) / (12 * h)
    print(f"  {name:<16}{str(idx):<12} analytic {grads[name][idx]: .10f}  numeric {numeric: .10f}")

print("\noverfitting one repeated-token batch with AdamW:")
p = new_model(ModelConfig(256, 8, 2, 16, 16, 2, seed=1))
same = TokenBatch(np.full((2, 17), ord("A")), pad_id=0)
state = init_state(p, AdamWHyper(weight_decay=0.0))
mask = freeze_mask(p, FULL_TUNING)
for step in range(201):
    loss, g = loss_and_grad(p, same)
    if step % 50 == 0:
        print(f"  step {step:>3}  loss {loss:.4f}")
    p, state = adamw_step(p, g, state, mask, {"base": 1e-2})
