"""Hierarchical attention pooling over snippet encodings, and the concatenation baseline.

Token-level additive attention pools each snippet's token states into one
vector; a second additive attention with its own parameters pools the
snippet vectors into a patient vector, which a linear decoder maps to
class logits. Snippets never see each other inside the encoder.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .corpus import CLS
from .encoder import EncoderConfig, FlopCounter, _xavier, encode, init_encoder, pad_batch
from .snippets import SnippetSet


@dataclass(frozen=True)
class HeadConfig:
    dim: int
    n_classes: int
    attn_dim: int | None = None

    @property
    def a(self) -> int:
        return self.attn_dim or self.dim

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "HeadConfig":
        return cls(**obj)


def init_head(config: HeadConfig, rng: np.random.Generator, attention: bool = True) -> dict[str, np.ndarray]:
    d, a, c = config.dim, config.a, config.n_classes
    p: dict[str, np.ndarray] = {}
    if attention:
        for pre in ("head.tok", "head.snip"):
            p[pre + ".w"] = _xavier(rng, d, a)
            p[pre + ".b"] = np.zeros(a)
            p[pre + ".v"] = rng.normal(0.0, 1.0 / np.sqrt(a), size=(a, 1))
    p["head.dec.w"] = _xavier(rng, d, c)
    p["head.dec.b"] = np.zeros(c)
    return p


@dataclass
class Prediction:
    probs: np.ndarray
    logits: np.ndarray
    patient_vector: np.ndarray | None
    snippet_weights: np.ndarray | None = None
    token_weights: list[np.ndarray] | None = None
    dropped_snippets: int = 0

    @property
    def label(self) -> int:
        return int(np.argmax(self.logits))


def stable_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _scores(x: Tensor, params, prefix: str) -> Tensor:
    """Additive attention logits v . tanh(W x + b) along the last axis of ``x``."""
    u = ag.tanh(ag.add_bias(ag.matmul(x, params[prefix + ".w"]), params[prefix + ".b"]))
    s = ag.matmul(u, params[prefix + ".v"])
    return ag.reshape(s, s.shape[:-1])


def token_attend(states: Tensor, mask: np.ndarray, params) -> tuple[Tensor, Tensor]:
    """Pool (m, L, d) token states into (m, d) snippet vectors; weights are (m, L)."""
    mask = np.asarray(mask, dtype=bool)
    if states.ndim == 2:
        states = ag.reshape(states, (1,) + states.shape)
        mask = mask.reshape(1, -1)
    m, L, d = states.shape
    if not mask.any(axis=1).all():
        raise ValueError("token_attend: a snippet has every position masked")
    weights = ag.softmax(_scores(states, params, "head.tok"), mask=mask)
    pooled = ag.matmul(ag.reshape(weights, (m, 1, L)), states)
    return ag.reshape(pooled, (m, d)), weights


def snippet_attend(vectors: Tensor, params) -> tuple[Tensor, Tensor]:
    """Pool (m, d) snippet vectors into a (1, d) patient vector; weights are (1, m)."""
    m, d = vectors.shape
    if m == 0:
        raise ValueError("snippet_attend: patient has no snippets")
    weights = ag.softmax(ag.reshape(_scores(vectors, params, "head.snip"), (1, m)))
    return ag.matmul(weights, vectors), weights


def decode(h: Tensor | None, params) -> Tensor:
    """(1, C) logits; ``h`` None means an empty patient, scored by the bias alone."""
    bias = params["head.dec.b"]
    if h is None:
        return ag.reshape(bias, (1, bias.shape[0]))
    return ag.add_bias(ag.matmul(h, params["head.dec.w"]), bias)


def ce_loss(logits: Tensor, labels, weights=None) -> Tensor:
    return ag.cross_entropy(logits, labels, weights)


# ---------------------------------------------------------------------------
# full models
# ---------------------------------------------------------------------------


class SnippetModel:
    """Truncated encoder applied per snippet plus the two-level attention head."""

    kind = "snippet"

    def __init__(self, enc_config: EncoderConfig, head_config: HeadConfig):
        if enc_config.dim != head_config.dim:
            raise ValueError("encoder and head dims differ")
        self.enc_config = enc_config
        self.head_config = head_config

    def init_params(self, rng: np.random.Generator, encoder_params: dict | None = None) -> dict[str, np.ndarray]:
        enc = init_encoder(self.enc_config, rng, mlm_head=False)
        if encoder_params is not None:
            enc = {k: np.array(encoder_params[k]) for k in enc}
        return {**enc, **init_head(self.head_config, rng)}

    def forward(self, params, ssets: Sequence[SnippetSet], rng=None, counter: FlopCounter | None = None):
        """Logits (B, C) for a batch of patients plus per-patient attention tensors.

        All snippets of the batch go through the encoder in one call; they are
        independent rows, so this matches encoding each one on its own.
        """
        L = self.enc_config.max_positions
        seqs = [s.token_ids for ss in ssets for s in ss.snippets]
        pooled = None
        tok_w = None
        if seqs:
            ids, mask = pad_batch(seqs, L)
            active = mask.any(axis=0)
            n = int(np.flatnonzero(active).max()) + 1
            states = encode(params, self.enc_config, ids[:, :n], mask[:, :n], rng, counter)
            pooled, tok_w = token_attend(states, mask[:, :n], params)
        logits, snip_ws, h_list = [], [], []
        start = 0
        for ss in ssets:
            if ss.m == 0:
                logits.append(decode(None, params))
                snip_ws.append(None)
                h_list.append(None)
                continue
            rows = ag.take_rows(pooled, np.arange(start, start + ss.m))
            h, w = snippet_attend(rows, params)
            logits.append(decode(h, params))
            snip_ws.append(w)
            h_list.append(h)
            start += ss.m
        out = ag.concat(logits, axis=0) if len(logits) > 1 else logits[0]
        return out, {"token_weights": tok_w, "snippet_weights": snip_ws, "patient_vectors": h_list}

    def predict(self, params, sset: SnippetSet) -> Prediction:
        logits, aux = self.forward(params, [sset])
        lg = logits.data[0]
        if sset.m == 0:
            return Prediction(stable_softmax(lg), lg.copy(), None, np.zeros(0), [])
        tw = aux["token_weights"].data
        token_w = [tw[i, : len(s)].copy() for i, s in enumerate(sset.snippets)]
        return Prediction(
            probs=stable_softmax(lg),
            logits=lg.copy(),
            patient_vector=aux["patient_vectors"][0].data[0].copy(),
            snippet_weights=aux["snippet_weights"][0].data[0].copy(),
            token_weights=token_w,
        )


def concat_ids(sset: SnippetSet, n_max: int, sep: int = CLS) -> tuple[list[int], int]:
    """Snippets joined by ``sep`` in order; snippets that do not fit whole are dropped.

    Separators count against ``n_max``. Returns (ids, number of dropped snippets).
    """
    ids: list[int] = []
    kept = 0
    for s in sset.snippets:
        need = len(s) + (1 if ids else 0)
        if len(ids) + need > n_max:
            break
        if ids:
            ids.append(sep)
        ids.extend(s.token_ids)
        kept += 1
    return ids, sset.m - kept


class ConcatModel:
    """Baseline: one long sequence of joined snippets, mean-pooled, then the linear decoder."""

    kind = "concat"

    def __init__(self, enc_config: EncoderConfig, head_config: HeadConfig):
        if enc_config.dim != head_config.dim:
            raise ValueError("encoder and head dims differ")
        self.enc_config = enc_config
        self.head_config = head_config

    @property
    def n_max(self) -> int:
        return self.enc_config.max_positions

    def init_params(self, rng: np.random.Generator, encoder_params: dict | None = None) -> dict[str, np.ndarray]:
        enc = init_encoder(self.enc_config, rng, mlm_head=False)
        if encoder_params is not None:
            # a pretrained table may be shorter than n_max; its rows seed the front
            pos = enc["enc.pos_emb"].copy()
            src = np.asarray(encoder_params["enc.pos_emb"])[: pos.shape[0]]
            pos[: src.shape[0]] = src
            enc = {k: np.array(encoder_params[k]) for k in enc if k != "enc.pos_emb"}
            enc["enc.pos_emb"] = pos
        return {**enc, **init_head(self.head_config, rng, attention=False)}

    def forward(self, params, ssets: Sequence[SnippetSet], rng=None, counter: FlopCounter | None = None):
        joined = [concat_ids(ss, self.n_max) for ss in ssets]
        dropped = [d for _, d in joined]
        nonempty = [i for i, (ids, _) in enumerate(joined) if ids]
        rows: dict[int, Tensor] = {}
        if nonempty:
            seqs = [joined[i][0] for i in nonempty]
            n = max(len(s) for s in seqs)
            ids, mask = pad_batch(seqs, n)
            states = encode(params, self.enc_config, ids, mask, rng, counter)
            pool = mask / mask.sum(axis=1, keepdims=True)
            pooled = ag.reshape(ag.matmul(Tensor(pool.reshape(len(seqs), 1, n)), states), (len(seqs), self.head_config.dim))
            for r, i in enumerate(nonempty):
                rows[i] = ag.take_rows(pooled, [r])
        logits = [decode(rows.get(i), params) for i in range(len(ssets))]
        out = ag.concat(logits, axis=0) if len(logits) > 1 else logits[0]
        return out, {"dropped": dropped, "patient_vectors": [rows.get(i) for i in range(len(ssets))]}

    def predict(self, params, sset: SnippetSet) -> Prediction:
        logits, aux = self.forward(params, [sset])
        lg = logits.data[0]
        h = aux["patient_vectors"][0]
        return Prediction(
            probs=stable_softmax(lg),
            logits=lg.copy(),
            patient_vector=None if h is None else h.data[0].copy(),
            dropped_snippets=aux["dropped"][0],
        )
