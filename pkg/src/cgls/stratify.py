"""Difficulty tiers for training text.

Two routes produce the easy/medium/hard corpora: a synthetic generator with
controllable difficulty, or a labeled-subset pipeline (label -> balance and
split -> fit a linear bag-of-words classifier -> classify everything).
"""

from __future__ import annotations

import json
import logging
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
import scipy.sparse as sp

from .curriculum import TIERS, TierCorpus, write_shard, write_tier_manifest
from .errors import ClassifierTrainingError, ConfigError, InputError, StratificationError

log = logging.getLogger(__name__)

# ---------------------------------------------------------------- synthetic tiers

_EASY_WORDS = (
    "the a and is was big small red blue happy sad little good "
    "cat dog bird fish sun moon tree ball cup hat box bed car boy girl mom dad "
    "sees likes has runs eats jumps plays sits sleeps finds wants holds "
    "home park day toy cake hop sing nap"
).split()
assert len(set(_EASY_WORDS)) == 50, len(set(_EASY_WORDS))

_CONNECTIVES = ("which", "because", "although", "while", "when", "that", "since", "whereas",
                "unless", "after")
_ONSETS = ("b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s", "t", "v", "br", "cl",
           "dr", "gr", "pl", "st", "tr", "th", "sh", "ch")
_VOWELS = ("a", "e", "i", "o", "u", "ai", "ea", "io", "ou")
_CODAS = ("", "", "n", "r", "s", "l", "m", "t", "nd", "st", "rk")
_TECH_SUFFIXES = ("ization", "ometric", "ase", "ide", "ology", "ivity", "ectomy", "otropic",
                  "ianism", "ential")
_SYMBOLS = ("x_{i}", "f(x)", "O(n log n)", "p < 0.05", "dL/dw", "H_2O", "sigma^2", "[{n}]",
            "Sec. {n}.{m}", "eq. ({n})", "{n}.{m}e-{k}", "{n}%", "0x{h}", "k = {n}")

# Fixed lexicon seed: tier vocabularies are a property of the generator, not of a run.
_LEXICON_SEED = 20250101


@dataclass(frozen=True)
class TierGrammar:
    vocab: tuple[str, ...]
    sentence_len: tuple[int, int]
    sentences_per_doc: tuple[int, int]
    clause_rate: float
    symbol_rate: float


def _pseudo_words(rng, n, syllables, suffixes=(), exclude=()):
    words, seen = [], set(exclude)
    while len(words) < n:
        k = int(rng.integers(syllables[0], syllables[1] + 1))
        w = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))]
                    + _CODAS[rng.integers(len(_CODAS))] for _ in range(k))
        if suffixes and rng.random() < 0.5:
            w += suffixes[rng.integers(len(suffixes))]
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def _grammars() -> dict[str, TierGrammar]:
    rng = np.random.default_rng(_LEXICON_SEED)
    medium = list(_CONNECTIVES) + _pseudo_words(rng, 500 - len(_CONNECTIVES), (2, 3),
                                                exclude=_EASY_WORDS)
    hard = _pseudo_words(rng, 5000, (3, 5), _TECH_SUFFIXES, exclude=medium + _EASY_WORDS)
    return {
        "easy": TierGrammar(tuple(_EASY_WORDS), (4, 7), (3, 6), 0.0, 0.0),
        "medium": TierGrammar(tuple(medium), (10, 18), (3, 6), 0.6, 0.0),
        "hard": TierGrammar(tuple(hard), (20, 35), (3, 6), 0.8, 0.12),
    }


_GRAMMARS = _grammars()


def tier_grammar(tier: str) -> TierGrammar:
    if tier not in _GRAMMARS:
        raise ConfigError(f"unknown tier {tier!r}")
    return _GRAMMARS[tier]


def _zipf_probs(n):
    w = 1.0 / np.arange(1, n + 1)
    return w / w.sum()


def _symbol(rng):
    s = _SYMBOLS[rng.integers(len(_SYMBOLS))]
    return s.format(i=rng.integers(1, 9), n=rng.integers(1, 99), m=rng.integers(0, 9),
                    k=rng.integers(2, 9), h=f"{rng.integers(16, 4096):x}")


def _sentence(rng, g: TierGrammar, probs):
    n = int(rng.integers(g.sentence_len[0], g.sentence_len[1] + 1))
    idx = rng.choice(len(g.vocab), size=n, p=probs)
    words = [g.vocab[i] for i in idx]
    if g.clause_rate and n > 6 and rng.random() < g.clause_rate:
        # embed a subordinate clause (possibly nested) mid-sentence
        for depth in range(1 + int(rng.random() < g.clause_rate / 2)):
            pos = int(rng.integers(2, len(words) - 2))
            words.insert(pos, "," if depth == 0 else "")
            words.insert(pos + 1, _CONNECTIVES[rng.integers(len(_CONNECTIVES))])
    if g.symbol_rate:
        for i in range(len(words)):
            if rng.random() < g.symbol_rate:
                words[i] = _symbol(rng)
    text = " ".join(w for w in words if w).replace(" ,", ",")
    return text[0].upper() + text[1:] + "."


def synth_documents(tier: str, doc_count: int, seed: int) -> list[str]:
    if doc_count < 1:
        raise InputError("doc_count must be >= 1")
    g = tier_grammar(tier)
    rng = np.random.default_rng([seed, TIERS.index(tier)])
    probs = _zipf_probs(len(g.vocab))
    order = rng.permutation(len(g.vocab))
    g = TierGrammar(tuple(g.vocab[i] for i in order), g.sentence_len, g.sentences_per_doc,
                    g.clause_rate, g.symbol_rate)
    docs = []
    for _ in range(doc_count):
        k = int(rng.integers(g.sentences_per_doc[0], g.sentences_per_doc[1] + 1))
        docs.append(" ".join(_sentence(rng, g, probs) for _ in range(k)))
    return docs


def synth_corpus(tier: str, doc_count: int, seed: int) -> TierCorpus:
    """Generated documents of one tier; identical for identical (tier, count, seed)."""
    return TierCorpus.from_texts(tier, synth_documents(tier, doc_count, seed))


# ---------------------------------------------------------------- labeled sets


@dataclass(frozen=True)
class LabeledDoc:
    text: str
    tier: str
    doc_id: str | int | None = None

    def __post_init__(self):
        if self.tier not in TIERS:
            raise StratificationError(f"unknown tier {self.tier!r}")


@dataclass
class Splits:
    train: list[LabeledDoc]
    val: list[LabeledDoc]
    test: list[LabeledDoc]


def split_sizes(n: int) -> tuple[int, int, int]:
    """80/10/10 rule: validation and test get floor(n/10) each, training the rest."""
    tenth = n // 10
    return n - 2 * tenth, tenth, tenth


def _cycle_to(items, n):
    return [items[i % len(items)] for i in range(n)]


def build_training_set(docs: Sequence[LabeledDoc], seed: int = 0, min_per_tier: int = 10
                       ) -> Splits:
    """Balance tiers by duplication, then split 80/10/10.

    Each tier is split before upsampling and duplicates are drawn within a
    split, so no document (by position in ``docs``) lands in two splits.
    """
    by_tier = {t: [] for t in TIERS}
    for i, d in enumerate(docs):
        by_tier[d.tier].append(i)
    for t, idx in by_tier.items():
        if len(idx) == 0:
            raise StratificationError(f"tier {t!r} has no labeled documents")
        if len(idx) < min_per_tier:
            raise StratificationError(
                f"tier {t!r} has {len(idx)} documents; at least {min_per_tier} are required")
    rng = np.random.default_rng(seed)
    target = split_sizes(max(len(v) for v in by_tier.values()))
    parts = ([], [], [])
    for t in TIERS:
        idx = [by_tier[t][i] for i in rng.permutation(len(by_tier[t]))]
        a, b, _ = split_sizes(len(idx))
        own = (idx[:a], idx[a:a + b], idx[a + b:])
        for part, members, size in zip(parts, own, target):
            part.extend(_cycle_to(members, size))
    out = []
    for part in parts:
        order = rng.permutation(len(part))
        out.append([docs[part[i]] for i in order])
    return Splits(*out)


# ---------------------------------------------------------------- classifier

_WORD = re.compile(r"[a-z0-9_]+")


def words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


@dataclass
class TierClassifier:
    """Multinomial linear model over log(1 + word count) features."""

    vocab: dict[str, int]
    weights: np.ndarray
    bias: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def accuracy(self) -> float:
        return self.metadata.get("test_accuracy", self.metadata.get("val_accuracy", 0.0))

    def features(self, texts: Sequence[str]) -> sp.csr_matrix:
        return featurize(texts, self.vocab)

    def scores(self, texts: Sequence[str]) -> np.ndarray:
        return self.features(texts) @ self.weights + self.bias

    def classify(self, texts: Sequence[str]) -> list[str]:
        # argmax takes the first maximum, i.e. ties resolve toward the easier tier
        return [TIERS[i] for i in np.argmax(self.scores(texts), axis=1)]

    def to_dict(self) -> dict:
        return {"vocab": self.vocab, "weights": self.weights.tolist(),
                "bias": self.bias.tolist(), "metadata": self.metadata}

    @classmethod
    def from_dict(cls, data) -> "TierClassifier":
        return cls(dict(data["vocab"]), np.array(data["weights"]), np.array(data["bias"]),
                   dict(data.get("metadata", {})))


def featurize(texts: Sequence[str], vocab: dict[str, int]) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    for r, text in enumerate(texts):
        counts: dict[int, int] = {}
        for w in words(text):
            j = vocab.get(w)
            if j is not None:
                counts[j] = counts.get(j, 0) + 1
        for j in sorted(counts):
            rows.append(r)
            cols.append(j)
            vals.append(np.log1p(counts[j]))
    return sp.csr_matrix((vals, (rows, cols)), shape=(len(texts), len(vocab)), dtype=np.float64)


def _accuracy(scores, labels):
    return float(np.mean(np.argmax(scores, axis=1) == labels))


def train_classifier(train: Sequence[LabeledDoc], val: Sequence[LabeledDoc], *,
                     lr: float = 1.0, l2: float = 1e-4, max_epochs: int = 2000,
                     eval_every: int = 10, patience: int = 5, min_accuracy: float = 0.40
                     ) -> TierClassifier:
    """Full-batch gradient descent on softmax cross-entropy with early stopping.

    Training documents are put in a canonical order first, so any permutation
    of ``train`` yields identical weights.
    """
    if not train or not val:
        raise StratificationError("train and validation splits must be nonempty")
    present = {d.tier for d in train}
    if present != set(TIERS):
        raise StratificationError(f"training split lacks tiers {sorted(set(TIERS) - present)}")
    train = sorted(train, key=lambda d: (d.tier, d.text))
    vocab = {w: i for i, w in enumerate(sorted({w for d in train for w in words(d.text)}))}
    X = featurize([d.text for d in train], vocab)
    y = np.array([TIERS.index(d.tier) for d in train])
    Xv = featurize([d.text for d in val], vocab)
    yv = np.array([TIERS.index(d.tier) for d in val])
    Y = np.eye(3)[y]
    n = X.shape[0]
    # step size scaled by the largest row norm keeps plain GD stable
    step = lr / max(1.0, float(X.multiply(X).sum(axis=1).max()))

    W = np.zeros((len(vocab), 3))
    b = np.zeros(3)
    best = (-1.0, W.copy(), b.copy(), 0)
    stale = 0
    for epoch in range(1, max_epochs + 1):
        z = X @ W + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        d = (p - Y) / n
        W -= step * n * (X.T @ d + l2 * W)
        b -= step * n * d.sum(axis=0)
        if epoch % eval_every == 0:
            acc = _accuracy(Xv @ W + b, yv)
            if acc > best[0]:
                best, stale = (acc, W.copy(), b.copy(), epoch), 0
            else:
                stale += 1
                if stale >= patience:
                    break
    acc, W, b, epoch = best
    if acc <= min_accuracy:
        raise ClassifierTrainingError(
            f"validation accuracy {acc:.3f} did not exceed {min_accuracy:.2f}; tiers look inseparable")
    return TierClassifier(vocab, W, b, {"val_accuracy": acc, "epochs": epoch,
                                        "train_size": n, "val_size": len(val)})


def evaluate_classifier(classifier: TierClassifier, docs: Sequence[LabeledDoc]) -> float:
    pred = classifier.classify([d.text for d in docs])
    return float(np.mean([p == d.tier for p, d in zip(pred, docs)]))


def fit_stratifier(docs: Sequence[LabeledDoc], seed: int = 0, **kwargs) -> TierClassifier:
    """Balance/split, train, then record test-split accuracy."""
    splits = build_training_set(docs, seed=seed)
    clf = train_classifier(splits.train, splits.val, **kwargs)
    clf.metadata["test_accuracy"] = evaluate_classifier(clf, splits.test)
    clf.metadata["test_size"] = len(splits.test)
    return clf


def stratify_corpus(classifier: TierClassifier, docs: Sequence[str], out_dir=None
                    ) -> tuple[tuple[TierCorpus, TierCorpus, TierCorpus], list[str]]:
    """Assign every document to its argmax tier; optionally write shards and a manifest."""
    if not docs:
        raise InputError("no documents to stratify")
    assigned = classifier.classify(docs)
    texts = {t: [d for d, a in zip(docs, assigned) if a == t] for t in TIERS}
    corpora = tuple(TierCorpus.from_texts(t, texts[t]) for t in TIERS)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for t in TIERS:
            write_shard(out / f"{t}.txt", texts[t])
        write_tier_manifest(out / "tiers.json", {f"{t}.txt": t for t in TIERS})
    return corpora, assigned


# ---------------------------------------------------------------- labelers

LEVEL_NAMES = {"easy": "High School", "medium": "Undergraduate", "hard": "Graduate"}

PROMPT_TEMPLATE = """Rate the reading level of the document below. Answer with exactly one label.

High School: plain, well-structured prose that needs little abstraction, e.g. news stories, \
introductory encyclopedia entries, everyday narratives.
Undergraduate: moderately demanding text that assumes some field knowledge and basic \
abstract reasoning, e.g. scientific abstracts or popular science writing.
Graduate: dense specialist material, e.g. research papers, legal or clinical documents, \
source code.

Document:
{document}

Level:"""

_LEVEL_RE = re.compile(r"\b(undergraduate|high[\s-]*school|graduate(?:\s*/\s*advanced)?|advanced)\b",
                       re.IGNORECASE)


def parse_level(response: str) -> str | None:
    """Map a labeler reply to a tier; None when absent or ambiguous."""
    found = set()
    for m in _LEVEL_RE.finditer(response or ""):
        token = m.group(1).lower()
        if token.startswith("under"):
            found.add("medium")
        elif token.startswith("high"):
            found.add("easy")
        else:
            found.add("hard")
    return found.pop() if len(found) == 1 else None


@dataclass
class LabelResult:
    labeled: list[LabeledDoc]
    errors: list[dict]


class LabelSource(Protocol):
    def label(self, docs: Sequence[tuple[object, str]]) -> LabelResult: ...


class FileLabelSource:
    """Labels from a JSON-lines file of ``{"id": ..., "tier": ...}`` records."""

    def __init__(self, path):
        self.path = Path(path)
        self.calls = 0

    def read(self) -> dict:
        labels = {}
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                rec = json.loads(line)
                tier = rec["tier"] if rec["tier"] in TIERS else parse_level(str(rec["tier"]))
                if tier is None:
                    raise StratificationError(f"{self.path}:{lineno}: unknown tier {rec['tier']!r}")
                labels[str(rec["id"])] = tier
        return labels

    def label(self, docs):
        labels = self.read()
        out = [LabeledDoc(text, labels[str(i)], i) for i, text in docs if str(i) in labels]
        return LabelResult(out, [])


@dataclass
class RemoteLabelerConfig:
    endpoint: str
    model: str
    token_env: str = "CGLS_LABELER_TOKEN"
    timeout: float = 30.0
    max_retries: int = 4
    backoff: float = 1.0
    max_in_flight: int = 4

    @classmethod
    def from_file(cls, path) -> "RemoteLabelerConfig":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


class RemoteLabeler:
    """Text-completion client that asks a remote model for a reading level per document."""

    def __init__(self, config: RemoteLabelerConfig, session=None,
                 sleep: Callable[[float], None] = time.sleep):
        if session is None:
            import requests
            session = requests.Session()
        self.config = config
        self.session = session
        self.sleep = sleep

    def _headers(self):
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.config.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    @staticmethod
    def _completion_text(payload) -> str:
        if isinstance(payload, dict):
            choices = payload.get("choices")
            if choices:
                c = choices[0]
                if "text" in c:
                    return c["text"]
                if "message" in c:
                    return c["message"].get("content", "")
            for key in ("text", "completion", "output"):
                if key in payload:
                    return str(payload[key])
        return str(payload)

    def _request(self, text: str) -> str:
        body = {"model": self.config.model, "prompt": PROMPT_TEMPLATE.format(document=text),
                "max_tokens": 8, "temperature": 0}
        last = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                self.sleep(self.config.backoff * 2 ** (attempt - 1))
            try:
                resp = self.session.post(self.config.endpoint, json=body, headers=self._headers(),
                                         timeout=self.config.timeout)
            except Exception as exc:  # network failures are retried
                last = f"{type(exc).__name__}: {exc}"
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = f"HTTP {resp.status_code}"
                continue
            if resp.status_code >= 400:
                raise RuntimeError(f"HTTP {resp.status_code}")
            return self._completion_text(resp.json())
        raise RuntimeError(f"gave up after {self.config.max_retries + 1} attempts ({last})")

    def _one(self, doc):
        doc_id, text = doc
        try:
            reply = self._request(text)
        except Exception as exc:
            return None, {"id": doc_id, "error": str(exc)}
        tier = parse_level(reply)
        if tier is None:
            return None, {"id": doc_id, "error": "unparseable", "response": reply}
        return LabeledDoc(text, tier, doc_id), None

    def label(self, docs):
        with ThreadPoolExecutor(max_workers=max(1, self.config.max_in_flight)) as pool:
            results = list(pool.map(self._one, docs))
        labeled = [r for r, _ in results if r is not None]
        errors = [e for _, e in results if e is not None]
        for e in errors:
            log.warning("labeling failed for doc %s: %s", e["id"], e["error"])
        return LabelResult(labeled, errors)
