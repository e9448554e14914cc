import collections
import json
import math
import threading

import numpy as np
import pytest

from cgls.curriculum import TIERS, read_tier_manifest
from cgls.errors import ClassifierTrainingError, InputError, StratificationError
from cgls.stratify import (
    FileLabelSource, LabeledDoc, RemoteLabeler, RemoteLabelerConfig, TierClassifier,
    build_training_set,
    fit_stratifier, parse_level, split_sizes, stratify_corpus, synth_corpus, synth_documents,
    train_classifier, words,
)


def _labeled(n_per_tier, seed=0):
    return [LabeledDoc(text, t, f"{t}-{seed}-{i}")
            for t, n in zip(TIERS, n_per_tier) if n
            for i, text in enumerate(synth_documents(t, n, seed))]


@pytest.fixture(scope="module")
def classifier():
    return fit_stratifier(_labeled((200, 200, 200)), seed=0)


def test_generator_statistics_increase_with_tier():
    sent_len, entropy = [], []
    for t in TIERS:
        docs = synth_documents(t, 1000, 5)
        sentences = [s for d in docs for s in d.split(". ") if s]
        sent_len.append(np.mean([len(s.split()) for s in sentences]))
        counts = collections.Counter(w for d in docs for w in words(d))
        n = sum(counts.values())
        entropy.append(-sum(c / n * math.log(c / n) for c in counts.values()))
    assert sent_len[0] < sent_len[1] < sent_len[2]
    assert entropy[0] < entropy[1] < entropy[2]


def test_generator_vocabulary_sizes():
    assert len({w for d in synth_documents("easy", 500, 0) for w in words(d)}) <= 50


def test_synth_is_deterministic():
    a, b = synth_corpus("hard", 50, 3), synth_corpus("hard", 50, 3)
    assert np.array_equal(a.tokens, b.tokens) and np.array_equal(a.offsets, b.offsets)
    assert not np.array_equal(a.tokens, synth_corpus("hard", 50, 4).tokens)
    with pytest.raises(InputError):
        synth_corpus("easy", 0, 0)


def test_split_arithmetic():
    splits = build_training_set(_labeled((100, 50, 50)), seed=1)
    assert (len(splits.train), len(splits.val), len(splits.test)) == (240, 30, 30)
    for part in (splits.train, splits.val, splits.test):
        counts = collections.Counter(d.tier for d in part)
        assert counts["easy"] == counts["medium"] == counts["hard"]
    assert split_sizes(20_000) == (16_000, 2_000, 2_000)


def test_splits_are_disjoint_and_deterministic():
    docs = _labeled((100, 50, 30))
    s1, s2 = build_training_set(docs, seed=4), build_training_set(docs, seed=4)
    assert s1 == s2
    ids = [{d.doc_id for d in part} for part in (s1.train, s1.val, s1.test)]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])


def test_balanced_input_has_no_duplicates():
    s = build_training_set(_labeled((50, 50, 50)), seed=0)
    all_ids = [d.doc_id for part in (s.train, s.val, s.test) for d in part]
    assert len(all_ids) == len(set(all_ids)) == 150


def test_missing_or_small_tier_rejected():
    with pytest.raises(StratificationError):
        build_training_set(_labeled((20, 20, 0)))
    with pytest.raises(StratificationError):
        build_training_set(_labeled((20, 20, 5)))


def test_classifier_accuracy_and_metadata(classifier):
    assert classifier.metadata["test_accuracy"] > 0.90
    assert 0 <= classifier.accuracy <= 1


def test_training_order_does_not_matter():
    s = build_training_set(_labeled((60, 60, 60)), seed=2)
    a = train_classifier(s.train, s.val)
    shuffled = [s.train[i] for i in np.random.default_rng(9).permutation(len(s.train))]
    b = train_classifier(shuffled, s.val)
    assert np.array_equal(a.weights, b.weights) and np.array_equal(a.bias, b.bias)


def test_single_tier_training_set_is_rejected():
    docs = [d for d in _labeled((30, 30, 30)) if d.tier == "easy"]
    with pytest.raises(StratificationError):
        train_classifier(docs, docs)


def test_inseparable_data_fails_training():
    rng = np.random.default_rng(0)
    docs = [LabeledDoc("same words every time", TIERS[rng.integers(3)], i) for i in range(90)]
    val = [LabeledDoc("same words every time", t, i) for i, t in enumerate(TIERS * 10)]
    with pytest.raises(ClassifierTrainingError):
        train_classifier(docs, val)


def test_stratify_partitions_and_agrees_with_generator(tmp_path, classifier):
    held = _labeled((100, 100, 100), seed=77)
    texts = [d.text for d in held]
    corpora, assigned = stratify_corpus(classifier, texts, tmp_path)
    assert sum(c.n_documents for c in corpora) == len(texts)
    assert stratify_corpus(classifier, texts)[1] == assigned
    agreement = np.mean([a == d.tier for a, d in zip(assigned, held)])
    assert agreement >= 0.90
    manifest = read_tier_manifest(tmp_path / "tiers.json")
    assert sorted(manifest.values()) == sorted(TIERS)
    with pytest.raises(InputError):
        stratify_corpus(classifier, [])


def test_ties_go_to_easier_tier():
    flat = TierClassifier({"w": 0}, np.zeros((1, 3)), np.array([0.0, 1.0, 1.0]))
    assert flat.classify(["w w"]) == ["medium"]
    flat.bias[:] = 0.0
    assert flat.classify(["anything"]) == ["easy"]


def test_score_monotone_in_characteristic_words(classifier):
    inv = {i: w for w, i in classifier.vocab.items()}
    base = synth_documents("medium", 1, 1)[0]
    for t in range(3):
        positive = [inv[j] for j in np.flatnonzero(classifier.weights[:, t] > 0)[:20]]
        before = classifier.scores([base])[0, t]
        after = classifier.scores([base + " " + " ".join(positive)])[0, t]
        assert after >= before


def test_parse_level_table():
    assert parse_level("Level: Undergraduate") == "medium"
    assert parse_level("High School") == "easy"
    assert parse_level("graduate/advanced") == "hard"
    assert parse_level("unsure") is None
    assert parse_level("High School or Graduate") is None


def test_file_label_source(tmp_path):
    path = tmp_path / "labels.jsonl"
    path.write_text("".join(json.dumps({"id": i, "tier": t}) + "\n"
                            for i, t in enumerate(["easy", "medium", "Graduate"])), encoding="utf-8")
    result = FileLabelSource(path).label([(0, "a"), (1, "b"), (2, "c"), (3, "unlabeled")])
    assert [d.tier for d in result.labeled] == ["easy", "medium", "hard"]
    assert result.errors == []


class _Resp:
    def __init__(self, status, payload=None):
        self.status_code = status
        self._payload = payload

    def json(self):
        return self._payload


class _Session:
    def __init__(self, script):
        self.script = list(script)
        self.calls = []
        self.lock = threading.Lock()

    def post(self, url, json=None, headers=None, timeout=None):
        with self.lock:
            self.calls.append((url, json, headers))
            item = self.script.pop(0)
        if isinstance(item, Exception):
            raise item
        return item


def test_remote_labeler_retries_and_parses(monkeypatch):
    monkeypatch.setenv("CGLS_LABELER_TOKEN", "secret")
    session = _Session([_Resp(503), ConnectionError("boom"),
                        _Resp(200, {"choices": [{"text": " Undergraduate"}]})])
    sleeps = []
    cfg = RemoteLabelerConfig("http://labeler.invalid/v1/completions", "m", max_in_flight=1)
    result = RemoteLabeler(cfg, session=session, sleep=sleeps.append).label([("d1", "text")])
    assert [d.tier for d in result.labeled] == ["medium"]
    assert sleeps == [1.0, 2.0]
    assert session.calls[0][2]["Authorization"] == "Bearer secret"
    assert "text" in session.calls[0][1]["prompt"]


def test_remote_labeler_flags_failures():
    session = _Session([_Resp(200, {"text": "unsure"}), _Resp(400)])
    cfg = RemoteLabelerConfig("http://labeler.invalid", "m", max_in_flight=1, max_retries=0)
    result = RemoteLabeler(cfg, session=session, sleep=lambda s: None).label(
        [("a", "x"), ("b", "y")])
    assert result.labeled == []
    assert {e["id"] for e in result.errors} == {"a", "b"}
    assert any(e["error"] == "unparseable" for e in result.errors)
