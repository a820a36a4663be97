"""Bag-of-words TF-IDF features with a multinomial logistic-regression classifier."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .head import stable_softmax


@dataclass
class TfidfModel:
    vocabulary: dict[str, int]
    idf: np.ndarray
    weights: np.ndarray | None = None  # (features, classes)
    bias: np.ndarray | None = None
    loss_history: list[float] = field(default_factory=list)

    @property
    def n_features(self) -> int:
        return len(self.vocabulary)

    def to_json(self) -> dict:
        terms = sorted(self.vocabulary, key=self.vocabulary.__getitem__)
        return {
            "terms": terms,
            "idf": self.idf.tolist(),
            "weights": None if self.weights is None else self.weights.tolist(),
            "bias": None if self.bias is None else self.bias.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TfidfModel":
        w = obj.get("weights")
        b = obj.get("bias")
        return cls(
            {t: i for i, t in enumerate(obj["terms"])},
            np.asarray(obj["idf"], dtype=np.float64),
            None if w is None else np.asarray(w, dtype=np.float64).reshape(len(obj["terms"]), -1),
            None if b is None else np.asarray(b, dtype=np.float64),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "TfidfModel":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def tfidf_fit(streams: Sequence[Sequence[str]], max_features: int = 20000) -> TfidfModel:
    """Smoothed idf, ln((1 + N) / (1 + df)) + 1, over the ``max_features`` most common terms by df."""
    if not streams:
        raise ValueError("cannot fit TF-IDF on an empty corpus")
    df: Counter[str] = Counter()
    for toks in streams:
        df.update(set(toks))
    ranked = sorted(df.items(), key=lambda kv: (-kv[1], kv[0]))[:max_features]
    vocab = {t: i for i, (t, _) in enumerate(ranked)}
    n = len(streams)
    idf = np.array([np.log((1.0 + n) / (1.0 + c)) + 1.0 for _, c in ranked])
    return TfidfModel(vocab, idf)


def tfidf_transform(tokens: Sequence[str], model: TfidfModel) -> np.ndarray:
    """L2-normalized raw-count tf times idf; unseen terms are ignored."""
    vec = np.zeros(model.n_features)
    index = model.vocabulary
    for t, c in Counter(tokens).items():
        j = index.get(t)
        if j is not None:
            vec[j] = c * model.idf[j]
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else vec


def tfidf_matrix(streams: Sequence[Sequence[str]], model: TfidfModel) -> np.ndarray:
    return np.stack([tfidf_transform(s, model) for s in streams]) if streams else np.zeros((0, model.n_features))


def _ce_loss(X, Y, W, b, l2):
    p = stable_softmax(X @ W + b)
    nll = -np.log(np.clip((p * Y).sum(axis=1), 1e-300, None)).mean()
    return nll + 0.5 * l2 * float(np.sum(W * W)), p


def logreg_train(
    X: np.ndarray,
    labels: Sequence[int],
    n_classes: int | None = None,
    l2: float = 1e-4,
    epochs: int = 500,
    lr: float = 1.0,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Full-batch gradient descent on L2-regularized multinomial cross-entropy.

    The decay term is applied as an implicit (proximal) step so very large
    ``l2`` stays stable. Returns (weights, bias, per-epoch regularized loss).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] != y.size:
        raise ValueError(f"features {X.shape} and {y.size} labels disagree")
    if np.unique(y).size < 2:
        raise ValueError("logistic regression needs at least two classes in training")
    c = int(n_classes or y.max() + 1)
    rng = np.random.default_rng(seed)
    W = rng.normal(0.0, 0.01, size=(X.shape[1], c))
    b = np.zeros(c)
    Y = np.eye(c)[y]
    n = X.shape[0]
    history = []
    for _ in range(epochs):
        loss, p = _ce_loss(X, Y, W, b, l2)
        history.append(loss)
        g = (p - Y) / n
        W = (W - lr * (X.T @ g)) / (1.0 + lr * l2)
        b = b - lr * g.sum(axis=0)
    history.append(_ce_loss(X, Y, W, b, l2)[0])
    return W, b, history


def logreg_proba(X: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    return stable_softmax(np.asarray(X) @ W + b)


class TfidfClassifier:
    """TF-IDF features plus logistic regression, fit on whatever token streams it is given.

    Feeding full patient text gives the full-text baseline; feeding only the
    snippet tokens gives the snippet baseline.
    """

    def __init__(self, max_features: int = 20000, l2: float = 1e-4, epochs: int = 500, lr: float = 1.0, seed: int = 0):
        self.max_features = max_features
        self.l2 = l2
        self.epochs = epochs
        self.lr = lr
        self.seed = seed
        self.model: TfidfModel | None = None

    def fit(self, streams, labels, n_classes: int | None = None) -> "TfidfClassifier":
        model = tfidf_fit(streams, self.max_features)
        X = tfidf_matrix(streams, model)
        model.weights, model.bias, model.loss_history = logreg_train(
            X, labels, n_classes, self.l2, self.epochs, self.lr, self.seed
        )
        self.model = model
        return self

    def predict_proba(self, streams) -> np.ndarray:
        if self.model is None:
            raise RuntimeError("classifier is not fit")
        return logreg_proba(tfidf_matrix(streams, self.model), self.model.weights, self.model.bias)
