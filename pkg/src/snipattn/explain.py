"""Attention explanations for one patient: ranked snippets with token weights, as JSON or static HTML."""

from __future__ import annotations

import html
import json
from dataclasses import asdict, dataclass, field
from html.parser import HTMLParser

import numpy as np

from .corpus import PatientRecord, Vocab
from .encoder import as_leaves
from .snippets import DEFAULT_CAP, DEFAULT_MAX_LEN, DEFAULT_WIDTH, PatternSet, snippets_for_patient
from .train import Checkpoint

DEFAULT_K = 5


@dataclass
class SnippetExplanation:
    rank: int
    index: int  # position in extraction order
    weight: float
    document: int
    hit_span: list[int]
    window: list[int]
    pattern: str
    tokens: list[str]
    token_weights: list[float] | None = None


@dataclass
class AttentionReport:
    patient_id: str
    predicted: str
    predicted_index: int
    class_names: list[str]
    probabilities: list[float]
    no_evidence: bool
    top_k: int
    m: int
    snippets: list[SnippetExplanation] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, obj: dict) -> "AttentionReport":
        obj = dict(obj)
        obj["snippets"] = [SnippetExplanation(**s) for s in obj["snippets"]]
        return cls(**obj)


def explain(checkpoint: Checkpoint, record: PatientRecord, patterns: PatternSet, vocab: Vocab, k: int = DEFAULT_K) -> AttentionReport:
    """Rank the patient's snippets by snippet attention; token weights for the top ``k`` only.

    Weights are the model's raw attention values. Truncation to ``k`` is
    presentational and never renormalizes.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    model = checkpoint.model
    if getattr(model, "kind", None) != "snippet":
        raise ValueError("explanations need a snippet-attention checkpoint")
    meta = checkpoint.meta
    want = meta.get("vocab_hash")
    if want is not None and want != vocab.content_hash:
        raise ValueError("vocabulary does not match the checkpoint")
    snip = meta.get("snippets", {})
    sset, _ = snippets_for_patient(
        record,
        patterns,
        vocab,
        snip.get("width", DEFAULT_WIDTH),
        snip.get("max_len", DEFAULT_MAX_LEN),
        snip.get("cap", DEFAULT_CAP),
    )
    pred = model.predict(as_leaves(checkpoint.params, requires_grad=False), sset)
    names = list(meta.get("class_names") or [str(i) for i in range(model.head_config.n_classes)])
    label = pred.label
    report = AttentionReport(
        patient_id=record.id,
        predicted=names[label],
        predicted_index=label,
        class_names=names,
        probabilities=[float(p) for p in pred.probs],
        no_evidence=sset.empty,
        top_k=min(k, sset.m),
        m=sset.m,
    )
    if sset.empty:
        return report
    w = pred.snippet_weights
    order = sorted(range(sset.m), key=lambda i: (-w[i], i))
    for rank, i in enumerate(order):
        s = sset.snippets[i]
        report.snippets.append(
            SnippetExplanation(
                rank=rank + 1,
                index=i,
                weight=float(w[i]),
                document=s.document,
                hit_span=list(s.hit_span),
                window=list(s.window),
                pattern=patterns.lines()[s.pattern],
                tokens=list(s.tokens),
                token_weights=[float(x) for x in pred.token_weights[i]] if rank < k else None,
            )
        )
    return report


_STYLE = (
    "body{font-family:sans-serif;max-width:60em;margin:2em auto;line-height:1.6}"
    ".snippet{border:1px solid #ccc;border-radius:4px;padding:.5em;margin:.5em 0}"
    ".meta{color:#555;font-size:.85em}"
)


def _token_span(token: str, weight: float | None, scale: float) -> str:
    text = html.escape(token)
    if not weight:
        return f'<span class="tok">{text}</span>'
    alpha = min(1.0, weight / scale) if scale > 0 else 0.0
    return f'<span class="tok" data-w="{weight:.6g}" style="background-color:rgba(255,140,0,{alpha:.3f})">{text}</span>'


def render_html(report: AttentionReport) -> str:
    """Self-contained HTML: one block per snippet in rank order, tokens shaded by weight.

    Shading is scaled by the largest weight within each snippet; a zero-weight
    token carries no style at all.
    """
    parts = [
        "<!DOCTYPE html>",
        '<html><head><meta charset="utf-8">',
        f"<title>Attention for {html.escape(report.patient_id)}</title>",
        f"<style>{_STYLE}</style></head><body>",
        f"<h1>{html.escape(report.patient_id)}</h1>",
        '<p class="summary">predicted <b>{}</b> ({})</p>'.format(
            html.escape(report.predicted),
            ", ".join(f"{html.escape(n)}={p:.4f}" for n, p in zip(report.class_names, report.probabilities)),
        ),
    ]
    if report.no_evidence:
        parts.append('<p class="no-evidence">no-evidence: no snippets matched; prediction is the decoder bias</p>')
    for s in report.snippets:
        tw = s.token_weights
        scale = max(tw) if tw else 0.0
        toks = " ".join(_token_span(t, tw[i] if tw else None, scale) for i, t in enumerate(s.tokens))
        parts.append(
            f'<div class="snippet" data-rank="{s.rank}">'
            f'<div class="meta">#{s.rank} weight {s.weight:.4f} document {s.document} '
            f"chars {s.hit_span[0]}-{s.hit_span[1]} pattern {html.escape(s.pattern)}</div>"
            f'<div class="tokens">{toks}</div></div>'
        )
    parts.append("</body></html>")
    return "\n".join(parts) + "\n"


class _TokenCollector(HTMLParser):
    def __init__(self):
        super().__init__()
        self.blocks: list[list[str]] = []
        self._in_tok = False

    def handle_starttag(self, tag, attrs):
        cls = dict(attrs).get("class")
        if tag == "div" and cls == "snippet":
            self.blocks.append([])
        elif tag == "span" and cls == "tok":
            self._in_tok = True
            self.blocks[-1].append("")

    def handle_endtag(self, tag):
        if tag == "span":
            self._in_tok = False

    def handle_data(self, data):
        if self._in_tok:
            self.blocks[-1][-1] += data


def html_tokens(doc: str) -> list[list[str]]:
    """Token texts per snippet block, parsed back out of ``render_html`` output."""
    p = _TokenCollector()
    p.feed(doc)
    return p.blocks


def weights_resum(report: AttentionReport) -> float:
    return float(np.sum([s.weight for s in report.snippets]))
