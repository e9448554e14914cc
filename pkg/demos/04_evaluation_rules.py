"""How multiple-choice answers get picked.

Two decision rules score each choice by its log-probability. Dividing by the
token count removes the bias toward short answers. Subtracting the score under
a bare "Answer:" prompt removes the bias toward answers that are likely
regardless of the question. A scripted scorer makes both effects exact.

    python3 demos/04_evaluation_rules.py
"""

import numpy as np

from cgls import tokenizer
from cgls.evalsuite import EvalItem, acc_pmi, acc_token, perplexity
from cgls.model import ModelConfig, new_model


class Scripted:
    def __init__(self, table):
        self.table = table

    def logprob(self, context, continuation):
        return self.table[(tokenizer.decode(context).strip(), tokenizer.decode(continuation))]


item = EvalItem("What do bees make?", ("golden honey", "wax"), gold=0)
scorer = Scripted({
    ("What do bees make?", "golden honey"): (-4.0, 4),
    ("What do bees make?", "wax"): (-3.0, 2),
    ("Answer:", "golden honey"): (-9.0, 4),
    ("Answer:", "wax"): (-2.0, 2),
})
print("raw log-probs favour 'wax' (-3.0 > -4.0)")
print(f"  per-token rule picks: {item.choices[acc_token(scorer, [item]).decisions[0]]!r}"
      "  (-1.0 per token beats -1.5)")
print(f"  PMI rule picks:       {item.choices[acc_pmi(scorer, [item]).decisions[0]]!r}"
      "  (+5.0 beats -1.0)")

cfg = ModelConfig(256, 16, 2, 32, 32, 1, seed=0)
p = new_model(cfg)
flat = p.replace_tensors({k: np.zeros_like(p.named()[k]) for k in ("embed", "lm_head", "pos_embed")})
text = ["a short passage to score", "and another one"]
print(f"\nperplexity of a uniform model: {perplexity(flat, text):.6f}")
print(f"perplexity of a random init:   {perplexity(p, text):.3f}")
