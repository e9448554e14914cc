"""Zero-shot evaluation: perplexity, length-normalized and PMI multiple choice,
and final-word prediction.

Multiple-choice metrics take any *scorer*: an object with
``logprob(context_tokens, continuation_tokens) -> (sum_logprob, n_tokens)``.
``ModelScorer`` wraps a parameter set; tests can substitute scripted scorers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import tokenizer
from .errors import EvalError, InputError, TruncationError
from .model import ParameterSet, TokenBatch, logprob_continuation, next_token_logprobs, nll_sum

DEFAULT_UNCONDITIONAL = "Answer:"
JOINER = " "


@dataclass(frozen=True)
class EvalItem:
    question: str
    choices: tuple[str, ...]
    gold: int
    unconditional_prompt: str = DEFAULT_UNCONDITIONAL
    category: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "choices", tuple(self.choices))
        if len(self.choices) < 2:
            raise InputError("an eval item needs at least two choices")
        if not 0 <= self.gold < len(self.choices):
            raise InputError(f"gold index {self.gold} out of range for {len(self.choices)} choices")
        if not self.unconditional_prompt:
            raise InputError("unconditional prompt must be nonempty")

    @classmethod
    def from_dict(cls, d: dict) -> "EvalItem":
        return cls(d["question"], tuple(d["choices"]), int(d["gold"]),
                   d.get("unconditional_prompt") or DEFAULT_UNCONDITIONAL, d.get("category"))


@dataclass
class EvalReport:
    metric: str
    correct: int
    total: int
    decisions: list
    skipped: list = field(default_factory=list)
    by_category: dict = field(default_factory=dict)

    @property
    def accuracy_exact(self) -> Fraction:
        return Fraction(self.correct, self.total) if self.total else Fraction(0)

    @property
    def accuracy(self) -> float:
        return float(self.accuracy_exact)

    def to_dict(self) -> dict:
        return {
            "metric": self.metric, "correct": self.correct, "total": self.total,
            "accuracy": self.accuracy, "decisions": self.decisions, "skipped": self.skipped,
            "by_category": {k: {"correct": c, "total": t, "accuracy": c / t if t else 0.0}
                            for k, (c, t) in sorted(self.by_category.items())},
        }


class Scorer(Protocol):
    def logprob(self, context: np.ndarray, continuation: np.ndarray) -> tuple[float, int]: ...


class ModelScorer:
    def __init__(self, params: ParameterSet):
        self.params = params

    def logprob(self, context, continuation):
        return logprob_continuation(self.params, context, continuation)


def _scorer(model) -> Scorer:
    return ModelScorer(model) if isinstance(model, ParameterSet) else model


# ---------------------------------------------------------------- decision rules


def decide_token(logprobs: Sequence[float], counts: Sequence[int]) -> int:
    """argmax of log-probability per continuation token; first index wins ties."""
    lp = np.asarray(logprobs, dtype=np.float64)
    n = np.asarray(counts, dtype=np.float64)
    if np.any(n <= 0):
        raise EvalError("every choice must have at least one token")
    return int(np.argmax(lp / n))


def decide_pmi(conditional: Sequence[float], unconditional: Sequence[float]) -> int:
    """argmax of ln P(a|q) - ln P(a|u); first index wins ties."""
    c = np.asarray(conditional, dtype=np.float64)
    u = np.asarray(unconditional, dtype=np.float64)
    return int(np.argmax(c - u))


# ---------------------------------------------------------------- multiple choice


def _choice_scores(scorer, context_text, choices):
    ctx = tokenizer.encode(context_text + JOINER)
    out = [scorer.logprob(ctx, tokenizer.encode(c)) for c in choices]
    return [s for s, _ in out], [n for _, n in out]


def _run_choice_metric(metric, scorer, items, decide):
    scorer = _scorer(scorer)
    correct = total = 0
    decisions, skipped, by_cat = [], [], {}
    for i, item in enumerate(items):
        try:
            choice = decide(scorer, item)
        except TruncationError as exc:
            skipped.append({"index": i, "reason": str(exc)})
            decisions.append(None)
            continue
        hit = int(choice == item.gold)
        correct += hit
        total += 1
        decisions.append(choice)
        if item.category is not None:
            c, t = by_cat.get(item.category, (0, 0))
            by_cat[item.category] = (c + hit, t + 1)
    return EvalReport(metric, correct, total, decisions, skipped, by_cat)


def acc_token(scorer, items: Sequence[EvalItem]) -> EvalReport:
    """Token-normalized accuracy. Overlength items are skipped and listed."""

    def decide(s, item):
        lp, n = _choice_scores(s, item.question, item.choices)
        return decide_token(lp, n)

    return _run_choice_metric("acc_token", scorer, items, decide)


def acc_pmi(scorer, items: Sequence[EvalItem]) -> EvalReport:
    def decide(s, item):
        cond, _ = _choice_scores(s, item.question, item.choices)
        # the unconditional prompt is used verbatim, followed by the joiner
        uncond, _ = _choice_scores(s, item.unconditional_prompt, item.choices)
        return decide_pmi(cond, uncond)

    return _run_choice_metric("acc_pmi", scorer, items, decide)


# ---------------------------------------------------------------- perplexity


def _doc_windows(tokens: np.ndarray, width: int):
    """Chunks of ``width`` tokens overlapping by one, so each token after the first is
    predicted exactly once."""
    step = width - 1
    for start in range(0, max(len(tokens) - 1, 0), step):
        yield tokens[start:start + width]


def perplexity(params: ParameterSet, documents, batch_size: int = 16) -> float:
    """exp of the mean next-token NLL over every predicted position; pads excluded.

    ``documents`` is an iterable of texts or token arrays (a ``TierCorpus`` works
    through its ``documents()`` method).
    """
    if hasattr(documents, "documents"):
        documents = documents.documents()
    width = params.config.seq_len + 1
    windows = []
    for doc in documents:
        toks = tokenizer.encode(doc) if isinstance(doc, str) else np.asarray(doc, dtype=np.int64)
        windows.extend(_doc_windows(toks, width))
    if not windows:
        raise InputError("perplexity needs at least one document of two or more tokens")
    parts, count = [], 0
    for i in range(0, len(windows), batch_size):
        chunk = windows[i:i + batch_size]
        w = max(len(c) for c in chunk)
        tokens = np.full((len(chunk), w), tokenizer.PAD_ID, dtype=np.int64)
        for r, c in enumerate(chunk):
            tokens[r, :len(c)] = c
        s, n = nll_sum(params, TokenBatch(tokens, pad_id=tokenizer.PAD_ID), dtype=np.float64)
        parts.append(s)
        count += n
    return math.exp(math.fsum(parts) / count)


# ---------------------------------------------------------------- final word


def split_final_word(passage: str) -> tuple[str, str]:
    text = passage.rstrip()
    cut = max(text.rfind(" "), text.rfind("\t"))
    if cut <= 0 or cut == len(text) - 1:
        raise EvalError("passage has no final word to predict")
    return text[:cut + 1], text[cut + 1:]


def greedy_word(params: ParameterSet, prefix: str, max_tokens: int = 32) -> str:
    """Greedy byte decoding until whitespace, a pad, or ``max_tokens``.

    Long prefixes keep only their most recent ``seq_len`` tokens.
    """
    ctx = list(tokenizer.encode(prefix))
    out = []
    for _ in range(max_tokens):
        window = ctx[-params.config.seq_len:]
        nxt = int(np.argmax(next_token_logprobs(params, window)))
        if nxt == tokenizer.PAD_ID or chr(nxt).isspace():
            break
        out.append(nxt)
        ctx.append(nxt)
    return tokenizer.decode(out)


def final_word_acc(params: ParameterSet, passages: Sequence[str], max_tokens: int = 32
                   ) -> EvalReport:
    """Exact-match accuracy on each passage's final word (punctuation included)."""
    correct = total = 0
    decisions, skipped = [], []
    for i, passage in enumerate(passages):
        try:
            if len(tokenizer.encode(passage)) < 2:
                raise EvalError("passage shorter than two tokens")
            prefix, target = split_final_word(passage)
        except EvalError as exc:
            skipped.append({"index": i, "reason": str(exc)})
            decisions.append(None)
            continue
        pred = greedy_word(params, prefix, max_tokens=max(max_tokens, len(target.encode()) + 1))
        correct += int(pred == target)
        total += 1
        decisions.append(pred)
    return EvalReport("final_word_acc", correct, total, decisions, skipped)


# ---------------------------------------------------------------- files


def read_items(path) -> list[EvalItem]:
    items = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                items.append(EvalItem.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise InputError(f"{path}:{lineno}: bad eval record ({exc})") from exc
    return items


def read_passages(path) -> list[str]:
    return [ln.rstrip("\n") for ln in Path(path).read_text(encoding="utf-8").splitlines()
            if ln.strip()]
