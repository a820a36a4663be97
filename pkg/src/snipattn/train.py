"""Finetuning, Adam, checkpoints, MLM pretraining and the attention FLOP profiler."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .corpus import PatientRecord, Vocab, words
from .encoder import EncoderConfig, FlopCounter, as_leaves, encode, init_encoder, mlm_step
from .head import ConcatModel, HeadConfig, SnippetModel
from .metrics import early_stop_score
from .snippets import PatternSet, SnippetSet, build_snippet_corpus

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    epochs: int = 10
    patience: int = 2
    seed: int = 0
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    class_weighting: bool = False

    def __post_init__(self):
        if abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise ValueError(f"split fractions {self.split} must be nonnegative and sum to 1")
        if self.batch_size <= 0 or self.epochs <= 0 or self.patience < 0 or self.lr <= 0:
            raise ValueError("batch size, epochs and learning rate must be positive")


class Adam:
    """Adaptive-moment gradient descent over a dict of float64 arrays."""

    def __init__(self, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        out = {}
        for k, p in params.items():
            g = grads[k]
            m = self.beta1 * self.m.get(k, 0.0) + (1.0 - self.beta1) * g
            v = self.beta2 * self.v.get(k, 0.0) + (1.0 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            out[k] = p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


def split_indices(labels: Sequence[int], fractions=(0.8, 0.1, 0.1), seed: int = 0) -> tuple[list[int], list[int], list[int]]:
    """Stratified, seeded train/valid/test index lists (each sorted)."""
    y = np.asarray(labels)
    rng = np.random.default_rng(seed)
    parts: list[list[int]] = [[], [], []]
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        idx = idx[rng.permutation(idx.size)]
        n_train = int(round(fractions[0] * idx.size))
        n_valid = int(round(fractions[1] * idx.size))
        parts[0].extend(idx[:n_train].tolist())
        parts[1].extend(idx[n_train : n_train + n_valid].tolist())
        parts[2].extend(idx[n_train + n_valid :].tolist())
    return sorted(parts[0]), sorted(parts[1]), sorted(parts[2])


def _labels(sets: Sequence[SnippetSet]) -> np.ndarray:
    if any(s.label is None for s in sets):
        raise ValueError("snippet sets need labels for training and evaluation")
    return np.array([s.label for s in sets], dtype=np.int64)


def predict_probs(model, params: dict[str, np.ndarray], sets: Sequence[SnippetSet], batch_size: int = 32) -> np.ndarray:
    leaves = as_leaves(params, requires_grad=False)
    out = []
    for i in range(0, len(sets), batch_size):
        logits, _ = model.forward(leaves, sets[i : i + batch_size])
        z = logits.data - logits.data.max(axis=1, keepdims=True)
        e = np.exp(z)
        out.append(e / e.sum(axis=1, keepdims=True))
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.head_config.n_classes))


def mean_ce(probs: np.ndarray, labels: np.ndarray) -> float:
    return float(-np.mean(np.log(np.clip(probs[np.arange(labels.size), labels], 1e-300, None))))


@dataclass
class FinetuneResult:
    params: dict[str, np.ndarray]
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0


def finetune(
    model,
    train_sets: Sequence[SnippetSet],
    valid_sets: Sequence[SnippetSet],
    config: TrainConfig,
    init: dict[str, np.ndarray] | None = None,
) -> FinetuneResult:
    """End-to-end cross-entropy training with early stopping on the validation score.

    The validation score is PR-AUC for binary tasks and macro-F1 otherwise;
    ties are broken by validation loss. The best epoch's parameters are kept.
    """
    if not train_sets:
        raise ValueError("training split is empty")
    y_train = _labels(train_sets)
    y_valid = _labels(valid_sets) if valid_sets else None
    params = dict(init) if init is not None else model.init_params(np.random.default_rng(config.seed))
    shuffle_rng = np.random.default_rng([config.seed, 1])
    drop_rng = np.random.default_rng([config.seed, 2])
    n_classes = model.head_config.n_classes
    sample_w = None
    if config.class_weighting:
        counts = np.bincount(y_train, minlength=n_classes).astype(float)
        sample_w = (counts.sum() / (n_classes * np.maximum(counts, 1.0)))[y_train]
    opt = Adam(config.lr, config.beta1, config.beta2, config.eps)
    best = (-np.inf, np.inf)
    result = FinetuneResult(params)
    bad = 0
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(len(train_sets))
        losses = []
        for i in range(0, order.size, config.batch_size):
            idx = order[i : i + config.batch_size]
            leaves = as_leaves(params)
            logits, _ = model.forward(leaves, [train_sets[j] for j in idx], rng=drop_rng)
            loss = ag.cross_entropy(logits, y_train[idx], None if sample_w is None else sample_w[idx])
            grads = ag.backward(loss, list(leaves.values()))
            params = opt.step(params, {k: grads[t] for k, t in leaves.items()})
            losses.append(loss.item() * idx.size)
        record = {"epoch": epoch, "train_loss": float(np.sum(losses) / len(train_sets))}
        if y_valid is not None:
            probs = predict_probs(model, params, valid_sets)
            record["valid_loss"] = mean_ce(probs, y_valid)
            record["valid_score"] = early_stop_score(probs, y_valid)
            key = (record["valid_score"], -record["valid_loss"])
        else:
            key = (-record["train_loss"], 0.0)
        result.history.append(record)
        log.info("epoch %d %s", epoch, record)
        if key > (best[0], -best[1]):
            best = (key[0], -key[1])
            result.params, result.best_epoch = params, epoch
            bad = 0
        else:
            bad += 1
            if bad > config.patience:
                break
    return result


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    model: object
    params: dict[str, np.ndarray]
    meta: dict


def save_checkpoint(path: str | Path, model, params: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """``<path>.bin`` holds the parameters, ``<path>.json`` the configs and vocabulary hash."""
    path = Path(path)
    sidecar = {
        "format": ag.SERIAL_VERSION,
        "kind": model.kind,
        "encoder": model.enc_config.to_json(),
        "head": model.head_config.to_json(),
        **(meta or {}),
    }
    path.with_suffix(".bin").write_bytes(ag.dump_params(dict(sorted(params.items()))))
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    params = ag.load_params(path.with_suffix(".bin").read_bytes())
    enc = EncoderConfig.from_json(meta["encoder"])
    head = HeadConfig.from_json(meta["head"])
    cls = {"snippet": SnippetModel, "concat": ConcatModel}[meta["kind"]]
    return Checkpoint(cls(enc, head), params, meta)


# ---------------------------------------------------------------------------
# masked-LM pretraining
# ---------------------------------------------------------------------------


def pretraining_sequences(
    corpus: Sequence[PatientRecord], vocab: Vocab, patterns: PatternSet | None, length: int, width: int, seed: int = 0
) -> list[list[int]]:
    """Unlabeled id sequences of at most ``length`` tokens: every snippet window plus as many random windows."""
    rng = np.random.default_rng(seed)
    seqs: list[list[int]] = []
    if patterns is not None:
        sc = build_snippet_corpus(corpus, patterns, vocab, width, length, cap=10**9)
        seqs.extend(list(s.token_ids) for ss in sc.sets for s in ss.snippets)
    n_random = max(len(seqs), len(corpus))
    docs = [vocab.encode(words(d)) for rec in corpus for d in rec.documents]
    docs = [d for d in docs if d]
    for _ in range(n_random if docs else 0):
        d = docs[int(rng.integers(len(docs)))]
        start = int(rng.integers(max(len(d) - length, 0) + 1))
        seqs.append(d[start : start + length])
    return seqs


def mlm_eval(params: dict[str, np.ndarray], config: EncoderConfig, seqs, mask_prob: float = 0.15, seed: int = 0, batch_size: int = 64) -> tuple[float, float]:
    """Held-out masked-token loss and accuracy with a fixed masking draw, dropout off."""
    rng = np.random.default_rng(seed)
    leaves = as_leaves(params, requires_grad=False)
    tot_loss = tot_acc = tot_n = 0.0
    for i in range(0, len(seqs), batch_size):
        loss, acc, n = mlm_step(seqs[i : i + batch_size], mask_prob, leaves, config, rng, train=False)
        tot_loss += loss.item() * n
        tot_acc += acc * n
        tot_n += n
    return tot_loss / tot_n, tot_acc / tot_n


@dataclass
class PretrainResult:
    params: dict[str, np.ndarray]
    history: list[dict]


def pretrain(
    config: EncoderConfig,
    seqs: Sequence[Sequence[int]],
    epochs: int = 3,
    batch_size: int = 32,
    lr: float = 1e-3,
    mask_prob: float = 0.15,
    seed: int = 0,
    heldout: Sequence[Sequence[int]] | None = None,
) -> PretrainResult:
    rng = np.random.default_rng(seed)
    params = init_encoder(config, rng)
    opt = Adam(lr)
    hist = []
    seqs = list(seqs)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(seqs))
        losses = []
        for i in range(0, order.size, batch_size):
            leaves = as_leaves(params)
            loss, _, _ = mlm_step([seqs[j] for j in order[i : i + batch_size]], mask_prob, leaves, config, rng)
            grads = ag.backward(loss, list(leaves.values()))
            params = opt.step(params, {k: grads[t] for k, t in leaves.items()})
            losses.append(loss.item())
        rec = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if heldout:
            rec["heldout_loss"], rec["heldout_acc"] = mlm_eval(params, config, heldout, mask_prob, seed)
        hist.append(rec)
        log.info("pretrain epoch %d %s", epoch, rec)
    return PretrainResult(params, hist)


# ---------------------------------------------------------------------------
# attention cost
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ComplexityModel:
    """Attention cost gamma * n^2 per encoded sequence of n tokens."""

    gamma: float
    m: int
    L: int
    mode: str = "snippet"

    def __post_init__(self):
        if self.gamma <= 0 or self.m <= 0 or self.L <= 0 or self.mode not in ("concat", "snippet"):
            raise ValueError("gamma, m, L must be positive and mode concat|snippet")

    def cost(self) -> float:
        if self.mode == "concat":
            return self.gamma * (self.m * self.L) ** 2
        return self.gamma * self.L**2 * self.m


def profiler_config(dim: int = 16, layers: int = 1, heads: int = 2) -> EncoderConfig:
    return EncoderConfig(vocab_size=32, dim=dim, layers=layers, heads=heads, ffn_dim=2 * dim, max_positions=1, dropout=0.0)


def pair_cost(config: EncoderConfig) -> int:
    """Attention multiplies per (query, key) pair: d for the score plus d for the value mix, per layer."""
    return 2 * config.dim * config.layers


def attention_flops(model: ComplexityModel, config: EncoderConfig | None = None, seed: int = 0) -> tuple[float, int]:
    """(analytic cost, multiplies counted inside the kernels while actually encoding)."""
    config = config or profiler_config()
    n = model.m * model.L if model.mode == "concat" else model.L
    rows = 1 if model.mode == "concat" else model.m
    cfg = EncoderConfig(**{**config.to_json(), "max_positions": n})
    rng = np.random.default_rng(seed)
    params = as_leaves(init_encoder(cfg, rng, mlm_head=False), requires_grad=False)
    ids = rng.integers(4, cfg.vocab_size, size=(rows, n))
    counter = FlopCounter()
    encode(params, cfg, ids, np.ones((rows, n), dtype=bool), counter=counter)
    return model.cost(), counter.total


def profile(m: int, L: int, config: EncoderConfig | None = None) -> dict:
    config = config or profiler_config()
    gamma = float(pair_cost(config))
    a_cat, m_cat = attention_flops(ComplexityModel(gamma, m, L, "concat"), config)
    a_snip, m_snip = attention_flops(ComplexityModel(gamma, m, L, "snippet"), config)
    return {
        "m": m,
        "L": L,
        "gamma": gamma,
        "analytic_concat": a_cat,
        "analytic_snippet": a_snip,
        "analytic_ratio": a_cat / a_snip,
        "measured_concat": m_cat,
        "measured_snippet": m_snip,
        "measured_ratio": m_cat / m_snip,
    }


def snippet_streams(sets: Sequence[SnippetSet]) -> list[list[str]]:
    return [[t for s in ss.snippets for t in s.tokens] for ss in sets]


def full_streams(corpus: Sequence[PatientRecord]) -> list[list[str]]:
    return [[t for d in rec.documents for t in words(d)] for rec in corpus]
