"""Small post-LN transformer encoder with learned absolute positions and an MLM head."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .corpus import MASK, PAD, RESERVED


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    dim: int = 64
    layers: int = 2
    heads: int = 4
    ffn_dim: int = 128
    max_positions: int = 64
    dropout: float = 0.1
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if min(self.vocab_size, self.dim, self.layers, self.heads, self.ffn_dim, self.max_positions) <= 0:
            raise ValueError("encoder sizes must be positive")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "EncoderConfig":
        return cls(**obj)


class FlopCounter:
    """Multiply counts from the attention kernels (query-key scores and weighted values)."""

    def __init__(self):
        self.score_mults = 0
        self.value_mults = 0

    @property
    def total(self) -> int:
        return self.score_mults + self.value_mults


def _xavier(rng, fan_in, fan_out):
    return rng.normal(0.0, math.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))


def init_encoder(config: EncoderConfig, rng: np.random.Generator, mlm_head: bool = True) -> dict[str, np.ndarray]:
    d, f, V = config.dim, config.ffn_dim, config.vocab_size
    p: dict[str, np.ndarray] = {
        "enc.tok_emb": rng.normal(0.0, 1.0, size=(V, d)),
        "enc.pos_emb": rng.normal(0.0, 0.1, size=(config.max_positions, d)),
        "enc.emb_ln.g": np.ones(d),
        "enc.emb_ln.b": np.zeros(d),
    }
    for i in range(config.layers):
        pre = f"enc.l{i}."
        for name in ("q", "k", "v", "o"):
            p[pre + name + ".w"] = _xavier(rng, d, d)
            # a key bias adds a per-query constant to every score, which softmax cancels
            if name != "k":
                p[pre + name + ".b"] = np.zeros(d)
        p[pre + "ln1.g"], p[pre + "ln1.b"] = np.ones(d), np.zeros(d)
        p[pre + "ff1.w"], p[pre + "ff1.b"] = _xavier(rng, d, f), np.zeros(f)
        p[pre + "ff2.w"], p[pre + "ff2.b"] = _xavier(rng, f, d), np.zeros(d)
        p[pre + "ln2.g"], p[pre + "ln2.b"] = np.ones(d), np.zeros(d)
    if mlm_head:
        p["mlm.dense.w"], p["mlm.dense.b"] = _xavier(rng, d, d), np.zeros(d)
        p["mlm.ln.g"], p["mlm.ln.b"] = np.ones(d), np.zeros(d)
        p["mlm.out.w"] = rng.normal(0.0, 0.02, size=(d, V))
        p["mlm.out.b"] = np.zeros(V)
    return p


def as_leaves(params: dict[str, np.ndarray], requires_grad: bool = True) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


def _ln(x: Tensor, params, prefix: str, eps: float) -> Tensor:
    return ag.add_bias(ag.mul_bias(ag.layer_norm(x, eps), params[prefix + ".g"]), params[prefix + ".b"])


def _linear(x: Tensor, params, prefix: str) -> Tensor:
    return ag.add_bias(ag.matmul(x, params[prefix + ".w"]), params[prefix + ".b"])


def attention_kernel(q: Tensor, k: Tensor, v: Tensor, key_mask: np.ndarray, counter: FlopCounter | None = None) -> Tensor:
    """Scaled dot-product attention on (B, h, n, dh) tensors.

    ``key_mask`` is (B, n), true for real tokens; masked keys get zero weight.
    """
    B, h, n, dh = q.shape
    scores = ag.scale(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    weights = ag.softmax(scores, mask=key_mask[:, None, None, :])
    if counter is not None:
        counter.score_mults += B * h * n * n * dh
        counter.value_mults += B * h * n * n * dh
    return ag.matmul(weights, v)


def encode(
    params: dict[str, Tensor],
    config: EncoderConfig,
    ids: np.ndarray,
    mask: np.ndarray,
    rng: np.random.Generator | None = None,
    counter: FlopCounter | None = None,
) -> Tensor:
    """Hidden states (B, n, d) for a batch of id rows padded to a common length n <= max positions."""
    ids = np.asarray(ids, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if ids.ndim != 2 or mask.shape != ids.shape:
        raise ag.ShapeError(f"encode: ids {ids.shape} and mask {mask.shape} must be equal 2-D shapes")
    B, n = ids.shape
    if n > config.max_positions:
        raise ValueError(f"sequence of {n} tokens exceeds {config.max_positions} positions")
    d, H = config.dim, config.heads
    dh = d // H
    rate = config.dropout if rng is not None else 0.0
    pos = ag.embedding(params["enc.pos_emb"], np.broadcast_to(np.arange(n), (B, n)))
    x = ag.add(ag.embedding(params["enc.tok_emb"], ids), pos)
    x = ag.dropout(_ln(x, params, "enc.emb_ln", config.ln_eps), rate, rng)

    def heads(t: Tensor) -> Tensor:
        return ag.transpose(ag.reshape(t, (B, n, H, dh)), (0, 2, 1, 3))

    for i in range(config.layers):
        pre = f"enc.l{i}."
        q = heads(_linear(x, params, pre + "q"))
        k = heads(ag.matmul(x, params[pre + "k.w"]))
        v = heads(_linear(x, params, pre + "v"))
        ctx = ag.reshape(ag.transpose(attention_kernel(q, k, v, mask, counter), (0, 2, 1, 3)), (B, n, d))
        att = ag.dropout(_linear(ctx, params, pre + "o"), rate, rng)
        x = _ln(ag.add(x, att), params, pre + "ln1", config.ln_eps)
        ff = _linear(ag.gelu(_linear(x, params, pre + "ff1")), params, pre + "ff2")
        x = _ln(ag.add(x, ag.dropout(ff, rate, rng)), params, pre + "ln2", config.ln_eps)
    return x


def pad_batch(seqs, length: int) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad id sequences with PAD to ``length``; returns (ids, mask)."""
    ids = np.full((len(seqs), length), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), length), dtype=bool)
    for r, s in enumerate(seqs):
        if len(s) > length:
            raise ValueError(f"sequence of {len(s)} tokens exceeds {length} positions")
        ids[r, : len(s)] = s
        mask[r, : len(s)] = True
    return ids, mask


def encode_snippet(token_ids, params: dict[str, Tensor], config: EncoderConfig, rng=None) -> tuple[Tensor, np.ndarray]:
    """States (L, d) for one snippet padded to L = max positions, and its pad mask."""
    ids, mask = pad_batch([list(token_ids)], config.max_positions)
    states = encode(params, config, ids, mask, rng)
    return ag.reshape(states, (config.max_positions, config.dim)), mask[0]


def truncate_positions(params: dict, config: EncoderConfig, length: int) -> tuple[dict, EncoderConfig]:
    """Keep the first ``length`` position rows; every other parameter is shared unchanged."""
    if config.max_positions < length:
        raise ValueError(f"cannot truncate {config.max_positions} positions to {length}")
    out = dict(params)
    pos = params["enc.pos_emb"]
    out["enc.pos_emb"] = pos[:length] if isinstance(pos, np.ndarray) else Tensor(pos.data[:length], pos.requires_grad)
    return out, replace(config, max_positions=length)


def encoder_names(params) -> list[str]:
    return [k for k in params if k.startswith("enc.")]


def mlm_select(ids: np.ndarray, mask: np.ndarray, prob: float, vocab_size: int, rng: np.random.Generator):
    """Pick positions to predict and corrupt them 80/10/10 (MASK / random token / unchanged).

    Returns (corrupted ids, flat indices of selected positions, original ids there).
    """
    if not 0.0 < prob < 1.0:
        raise ValueError("mask probability must lie in (0, 1)")
    maskable = mask & (ids >= len(RESERVED))
    if not maskable.any():
        raise ValueError("batch has no maskable tokens")
    chosen = maskable & (rng.random(ids.shape) < prob)
    if not chosen.any():
        flat = np.flatnonzero(maskable)
        chosen.reshape(-1)[flat[int(rng.integers(flat.size))]] = True
    sel = np.flatnonzero(chosen)
    targets = ids.reshape(-1)[sel].copy()
    corrupted = ids.copy().reshape(-1)
    roll = rng.random(sel.size)
    corrupted[sel[roll < 0.8]] = MASK
    rand_pos = sel[(roll >= 0.8) & (roll < 0.9)]
    corrupted[rand_pos] = rng.integers(len(RESERVED), max(vocab_size, len(RESERVED) + 1), size=rand_pos.size)
    return corrupted.reshape(ids.shape), sel, targets


def mlm_logits(states: Tensor, params: dict[str, Tensor], config: EncoderConfig, flat_index: np.ndarray) -> Tensor:
    B, n, d = states.shape
    picked = ag.take_rows(ag.reshape(states, (B * n, d)), flat_index)
    hdn = _ln(ag.gelu(_linear(picked, params, "mlm.dense")), params, "mlm.ln", config.ln_eps)
    return _linear(hdn, params, "mlm.out")


def mlm_step(
    seqs,
    mask_prob: float,
    params: dict[str, Tensor],
    config: EncoderConfig,
    rng: np.random.Generator,
    train: bool = True,
) -> tuple[Tensor, float, int]:
    """Masked-token loss (mean over selected positions), accuracy, and number selected."""
    length = max(len(s) for s in seqs)
    ids, mask = pad_batch(seqs, length)
    corrupted, sel, targets = mlm_select(ids, mask, mask_prob, config.vocab_size, rng)
    states = encode(params, config, corrupted, mask, rng if train else None)
    logits = mlm_logits(states, params, config, sel)
    loss = ag.cross_entropy(logits, targets)
    acc = float((logits.data.argmax(axis=1) == targets).mean())
    return loss, acc, int(sel.size)
