"""Synthetic dataset generators and JSONL ingestion.

Three seeded generators: a Gaussian-mixture classification task with a
controllable flipped-label fraction (the planted "bad" examples the data
score should down-rank), a quadratic regression task with per-example
curvature weights, and short character-LM sequences over a small vocabulary
whose response region follows a deterministic bigram rule."""

from __future__ import annotations

import json

import numpy as np

from .models import MAX_SEQ_LEN, PAD_TOKEN
from .objectives import DatasetSplit

MIXTURE = "mixture"
QUADRATIC = "quadratic"
CHAR_LM = "char_lm"
DATASET_KINDS = (MIXTURE, QUADRATIC, CHAR_LM)


def _default_sizes(spec: dict) -> tuple[int, int, int]:
    return (int(spec.get("train_size", 400)), int(spec.get("val_size", 128)),
            int(spec.get("anchor_size", 256)))


def _mixture_examples(rng, count, means, noise):
    num_classes, num_features = means.shape
    labels = rng.integers(0, num_classes, size=count)
    x = means[labels] + noise * rng.normal(size=(count, num_features))
    return [(x[i], int(labels[i])) for i in range(count)]


def _make_mixture(spec: dict, rng: np.random.Generator) -> DatasetSplit:
    train_n, val_n, anchor_n = _default_sizes(spec)
    num_features = int(spec.get("num_features", 6))
    num_classes = int(spec.get("num_classes", 2))
    separation = float(spec.get("class_separation", 2.0))
    noise = float(spec.get("feature_noise", 0.7))
    flip_fraction = float(spec.get("noise_fraction", 0.0))
    means = rng.normal(size=(num_classes, num_features))
    means *= separation / np.linalg.norm(means, axis=1, keepdims=True)
    train = _mixture_examples(rng, train_n, means, noise)
    val = _mixture_examples(rng, val_n, means, noise)
    anchor = _mixture_examples(rng, anchor_n, means, noise)
    flipped = np.zeros(0, dtype=np.int64)
    if flip_fraction > 0:
        n_flip = int(np.ceil(flip_fraction * train_n))
        flipped = np.sort(rng.choice(train_n, size=n_flip, replace=False))
        for i in flipped:
            x, y = train[i]
            wrong = (y + 1 + int(rng.integers(0, num_classes - 1))) % num_classes
            train[i] = (x, wrong)
    warm = np.sort(rng.choice(train_n, size=int(np.ceil(spec.get("warm_fraction", 0.05) * train_n)),
                              replace=False))
    return DatasetSplit(train, val, anchor, warm,
                        meta={"kind": MIXTURE, "flipped_train_indices": flipped.tolist()})


def _make_quadratic(spec: dict, rng: np.random.Generator) -> DatasetSplit:
    train_n, val_n, anchor_n = _default_sizes(spec)
    num_features = int(spec.get("num_features", 8))
    noise = float(spec.get("label_noise", 0.1))
    target = rng.normal(size=num_features)

    def draw(count):
        x = rng.normal(size=(count, num_features))
        y = x @ target + noise * rng.normal(size=count)
        curv = rng.uniform(0.5, 2.0, size=count)
        return [(x[i], float(y[i]), float(curv[i])) for i in range(count)]

    train = draw(train_n)
    warm = np.sort(rng.choice(train_n, size=int(np.ceil(spec.get("warm_fraction", 0.05) * train_n)),
                              replace=False))
    return DatasetSplit(train, draw(val_n), draw(anchor_n), warm,
                        meta={"kind": QUADRATIC})


def _make_char_lm(spec: dict, rng: np.random.Generator) -> DatasetSplit:
    train_n, val_n, anchor_n = _default_sizes(spec)
    vocab = int(spec.get("vocab_size", 16))
    prompt_len = int(spec.get("prompt_len", 3))
    response_len = int(spec.get("response_len", 5))
    if prompt_len + response_len > MAX_SEQ_LEN:
        raise ValueError("sequence length exceeds the model cap")
    mult = int(spec.get("rule_mult", 3))
    shift = int(spec.get("rule_shift", 1))
    slip = float(spec.get("slip_prob", 0.1))

    def draw(count):
        out = []
        for _ in range(count):
            tokens = np.empty(prompt_len + response_len, dtype=np.int64)
            tokens[:prompt_len] = rng.integers(1, vocab, size=prompt_len)
            for t in range(prompt_len, prompt_len + response_len):
                follow = (tokens[t - 1] * mult + shift) % (vocab - 1) + 1
                tokens[t] = follow if rng.uniform() > slip else rng.integers(1, vocab)
            out.append((tokens, prompt_len))
        return out

    train = draw(train_n)
    warm = np.sort(rng.choice(train_n, size=int(np.ceil(spec.get("warm_fraction", 0.05) * train_n)),
                              replace=False))
    return DatasetSplit(train, draw(val_n), draw(anchor_n), warm,
                        meta={"kind": CHAR_LM, "vocab_size": vocab})


def synth_dataset(spec: dict, rng: np.random.Generator) -> DatasetSplit:
    kind = spec.get("kind", MIXTURE)
    if kind == MIXTURE:
        return _make_mixture(spec, rng)
    if kind == QUADRATIC:
        return _make_quadratic(spec, rng)
    if kind == CHAR_LM:
        return _make_char_lm(spec, rng)
    raise ValueError(f"unknown dataset kind {kind!r}; choose from {DATASET_KINDS}")


# ---------------------------------------------------------------------------
# JSONL: classification {"x": [...], "y": int}, quadratic {"x": [...],
# "y": float, "curvature": float}, LM {"tokens": [...], "response_start": int}
# ---------------------------------------------------------------------------

def example_to_record(example) -> dict:
    if isinstance(example[0], np.ndarray) and example[0].dtype.kind == "i":
        return {"tokens": [int(t) for t in example[0]], "response_start": int(example[1])}
    if len(example) == 3:
        return {"x": [float(v) for v in example[0]], "y": float(example[1]),
                "curvature": float(example[2])}
    return {"x": [float(v) for v in example[0]], "y": int(example[1])}


def record_to_example(record: dict):
    if "tokens" in record:
        tokens = np.asarray(record["tokens"], dtype=np.int64)
        if np.any(tokens[: int(record["response_start"])] == PAD_TOKEN):
            raise ValueError("padding token inside the prompt region")
        return tokens, int(record["response_start"])
    x = np.asarray(record["x"], dtype=np.float64)
    if "curvature" in record:
        return x, float(record["y"]), float(record["curvature"])
    return x, int(record["y"])


def save_jsonl(examples, path):
    with open(path, "w") as fh:
        for example in examples:
            fh.write(json.dumps(example_to_record(example), sort_keys=True) + "\n")


def load_jsonl(path) -> list:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(record_to_example(json.loads(line)))
    return out
