"""Pattern search over patient text and fixed-width token windows around each hit."""

from __future__ import annotations

import bisect
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import regex

from .corpus import PatientRecord, Vocab, word_spans

DEFAULT_WIDTH = 16
DEFAULT_MAX_LEN = 64
DEFAULT_CAP = 64


class PatternSet:
    """Case-insensitive literal terms and regular expressions for one task.

    Matching uses POSIX leftmost-longest semantics per expression.
    """

    def __init__(self, patterns: Sequence[str], task: str = "", regex_flags: Sequence[bool] | None = None):
        if not patterns:
            raise ValueError("pattern set is empty")
        if regex_flags is None:
            regex_flags = [p.startswith("re:") for p in patterns]
            patterns = [p[3:] if p.startswith("re:") else p for p in patterns]
        self.task = task
        self.patterns = list(patterns)
        self.is_regex = list(regex_flags)
        self._compiled = []
        for text, is_re in zip(self.patterns, self.is_regex):
            source = text if is_re else regex.escape(text)
            try:
                self._compiled.append(regex.compile(source, regex.IGNORECASE | regex.POSIX | regex.V0))
            except regex.error as exc:
                raise ValueError(f"pattern {text!r} does not compile: {exc}") from None

    def __len__(self) -> int:
        return len(self.patterns)

    def lines(self) -> list[str]:
        return [("re:" + p) if r else p for p, r in zip(self.patterns, self.is_regex)]

    @classmethod
    def load(cls, path: str | Path, task: str = "") -> "PatternSet":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln.rstrip("\r") for ln in lines if ln.strip()], task=task or Path(path).stem)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.lines()) + "\n", encoding="utf-8")


class Hit(NamedTuple):
    start: int
    end: int
    pattern: int


def find_hits(text: str, patterns: PatternSet) -> list[Hit]:
    """Non-overlapping hits, leftmost first, longest on ties, across all patterns."""
    hits: list[Hit] = []
    pending: list = [None] * len(patterns)
    pos = 0
    while True:
        best = None
        for i, rx in enumerate(patterns._compiled):
            m = pending[i]
            if m is False:
                continue
            if m is None or m.start() < pos:
                m = _search_nonempty(rx, text, pos)
                pending[i] = False if m is None else m
                if m is None:
                    continue
            if best is None or (m.start(), -(m.end() - m.start())) < (best[0], -(best[1] - best[0])):
                best = (m.start(), m.end(), i)
        if best is None:
            return hits
        hits.append(Hit(*best))
        pos = best[1]


def _search_nonempty(rx, text: str, pos: int):
    while pos <= len(text):
        m = rx.search(text, pos)
        if m is None:
            return None
        if m.end() > m.start():
            return m
        pos = m.start() + 1
    return None


@dataclass(frozen=True)
class TokenizedDocument:
    text: str
    tokens: tuple[str, ...]
    starts: tuple[int, ...]
    ends: tuple[int, ...]
    ids: tuple[int, ...]

    @classmethod
    def from_text(cls, text: str, vocab: Vocab) -> "TokenizedDocument":
        spans = word_spans(text)
        toks = tuple(s[0] for s in spans)
        return cls(text, toks, tuple(s[1] for s in spans), tuple(s[2] for s in spans), tuple(vocab.encode(toks)))

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class Snippet:
    token_ids: tuple[int, ...]
    tokens: tuple[str, ...]
    patient_id: str
    document: int
    hit_span: tuple[int, int]
    window: tuple[int, int]
    hit_tokens: tuple[int, int]
    pattern: int

    def __len__(self) -> int:
        return len(self.token_ids)

    def to_json(self) -> dict:
        return {
            "token_ids": list(self.token_ids),
            "tokens": list(self.tokens),
            "document": self.document,
            "hit_span": list(self.hit_span),
            "window": list(self.window),
            "hit_tokens": list(self.hit_tokens),
            "pattern": self.pattern,
        }

    @classmethod
    def from_json(cls, obj: dict, patient_id: str) -> "Snippet":
        return cls(
            token_ids=tuple(obj["token_ids"]),
            tokens=tuple(obj["tokens"]),
            patient_id=patient_id,
            document=int(obj["document"]),
            hit_span=tuple(obj["hit_span"]),
            window=tuple(obj["window"]),
            hit_tokens=tuple(obj["hit_tokens"]),
            pattern=int(obj["pattern"]),
        )


@dataclass
class SnippetSet:
    patient_id: str
    snippets: list[Snippet]
    label: int | None = None
    dropped_by_cap: int = 0

    @property
    def m(self) -> int:
        return len(self.snippets)

    @property
    def empty(self) -> bool:
        return not self.snippets

    def permuted(self, order: Sequence[int]) -> "SnippetSet":
        return SnippetSet(self.patient_id, [self.snippets[i] for i in order], self.label, self.dropped_by_cap)

    def to_json(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "label": self.label,
            "m": self.m,
            "empty": self.empty,
            "dropped_by_cap": self.dropped_by_cap,
            "snippets": [s.to_json() for s in self.snippets],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SnippetSet":
        pid = obj["patient_id"]
        return cls(pid, [Snippet.from_json(s, pid) for s in obj["snippets"]], obj.get("label"), obj.get("dropped_by_cap", 0))


def _clip_window(a: int, b: int, n: int, width: int, max_len: int) -> tuple[int, int, int, int]:
    """Window around hit tokens [a, b), at most ``max_len`` tokens; returns (lo, hi, a, b)."""
    if b - a >= max_len:
        return a, a + max_len, a, a + max_len
    lo, hi = max(0, a - width), min(n, b + width)
    if hi - lo <= max_len:
        return lo, hi, a, b
    spare = max_len - (b - a)
    left = min(a - lo, spare // 2)
    right = min(hi - b, spare - left)
    left = min(a - lo, spare - right)
    return a - left, b + right, a, b


def extract_snippets(
    doc: TokenizedDocument,
    hits: Sequence[Hit],
    width: int = DEFAULT_WIDTH,
    max_len: int = DEFAULT_MAX_LEN,
    patient_id: str = "",
    document: int = 0,
) -> list[Snippet]:
    """One window of ``width`` tokens either side of every hit, clipped to the document and ``max_len``.

    Windows covering exactly the same token span are emitted once.
    """
    out: list[Snippet] = []
    seen: set[tuple[int, int]] = set()
    n = len(doc)
    for hit in hits:
        covered = list(_overlapping(doc, hit))
        if not covered:
            continue
        lo, hi, a, b = _clip_window(covered[0], covered[-1] + 1, n, width, max_len)
        if (lo, hi) in seen:
            continue
        seen.add((lo, hi))
        out.append(
            Snippet(
                token_ids=doc.ids[lo:hi],
                tokens=doc.tokens[lo:hi],
                patient_id=patient_id,
                document=document,
                hit_span=(hit.start, hit.end),
                window=(lo, hi),
                hit_tokens=(a, b),
                pattern=hit.pattern,
            )
        )
    return out


def _overlapping(doc: TokenizedDocument, hit: Hit):
    i = bisect.bisect_right(doc.ends, hit.start)
    while i < len(doc) and doc.starts[i] < hit.end:
        yield i
        i += 1


@dataclass
class SnippetCorpus:
    sets: list[SnippetSet]
    width: int
    max_len: int
    cap: int
    stats: dict = field(default_factory=dict)

    def by_id(self) -> dict[str, SnippetSet]:
        return {s.patient_id: s for s in self.sets}


def snippets_for_patient(
    record: PatientRecord,
    patterns: PatternSet,
    vocab: Vocab,
    width: int = DEFAULT_WIDTH,
    max_len: int = DEFAULT_MAX_LEN,
    cap: int = DEFAULT_CAP,
) -> tuple[SnippetSet, list[int]]:
    """SnippetSet for one patient plus the per-pattern raw hit counts."""
    found: list[Snippet] = []
    per_pattern = [0] * len(patterns)
    for d, text in enumerate(record.documents):
        hits = find_hits(text, patterns)
        for h in hits:
            per_pattern[h.pattern] += 1
        doc = TokenizedDocument.from_text(text, vocab)
        found.extend(extract_snippets(doc, hits, width, max_len, record.id, d))
    kept = found[:cap]
    return SnippetSet(record.id, kept, record.label, len(found) - len(kept)), per_pattern


def build_snippet_corpus(
    corpus: Sequence[PatientRecord],
    patterns: PatternSet,
    vocab: Vocab,
    width: int = DEFAULT_WIDTH,
    max_len: int = DEFAULT_MAX_LEN,
    cap: int = DEFAULT_CAP,
) -> SnippetCorpus:
    if max_len < 1 or width < 0 or cap < 1:
        raise ValueError("width must be >= 0, max_len and cap >= 1")
    sets = []
    hits_per_pattern = [0] * len(patterns)
    patients_per_pattern = [0] * len(patterns)
    for rec in corpus:
        sset, counts = snippets_for_patient(rec, patterns, vocab, width, max_len, cap)
        sets.append(sset)
        for i, c in enumerate(counts):
            hits_per_pattern[i] += c
            patients_per_pattern[i] += c > 0
    ms = [s.m for s in sets]
    n = max(len(sets), 1)
    stats = {
        "patients": len(sets),
        "m_mean": sum(ms) / n,
        "m_min": min(ms, default=0),
        "m_max": max(ms, default=0),
        "m_histogram": {str(k): v for k, v in sorted(Counter(ms).items())},
        "empty_patients": [s.patient_id for s in sets if s.empty],
        "capped_patients": sum(1 for s in sets if s.dropped_by_cap),
        "patterns": [
            {"pattern": p, "hits": h, "patient_hit_rate": c / n}
            for p, h, c in zip(patterns.lines(), hits_per_pattern, patients_per_pattern)
        ],
    }
    return SnippetCorpus(sets, width, max_len, cap, stats)


def write_snippets(path: str | Path, sets: Sequence[SnippetSet]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in sets:
            fh.write(json.dumps(s.to_json(), ensure_ascii=False) + "\n")


def read_snippets(path: str | Path) -> list[SnippetSet]:
    with open(path, encoding="utf-8") as fh:
        return [SnippetSet.from_json(json.loads(line)) for line in fh if line.strip()]
