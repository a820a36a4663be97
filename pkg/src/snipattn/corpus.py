"""Patient records, word-level tokenizer, vocabulary and the synthetic corpus generator."""

from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, UNK, MASK, CLS = 0, 1, 2, 3
RESERVED = ("[PAD]", "[UNK]", "[MASK]", "[CLS]")

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
_CHOICE_RE = re.compile(r"\{([^{}]*)\}")


@dataclass
class PatientRecord:
    id: str
    documents: list[str]
    label: int

    def __post_init__(self):
        if not self.documents:
            raise ValueError(f"patient {self.id!r} has no documents")

    def to_json(self) -> dict:
        return {"id": self.id, "label": self.label, "documents": list(self.documents)}

    @classmethod
    def from_json(cls, obj: dict) -> "PatientRecord":
        return cls(id=str(obj["id"]), documents=list(obj["documents"]), label=int(obj["label"]))


def check_labels(corpus: Sequence[PatientRecord], n_classes: int) -> None:
    for rec in corpus:
        if not 0 <= rec.label < n_classes:
            raise ValueError(f"patient {rec.id!r}: label {rec.label} outside {n_classes} classes")


def write_corpus(path: str | Path, corpus: Iterable[PatientRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in corpus:
            fh.write(json.dumps(rec.to_json(), ensure_ascii=False) + "\n")


def read_corpus(path: str | Path) -> list[PatientRecord]:
    with open(path, encoding="utf-8") as fh:
        return [PatientRecord.from_json(json.loads(line)) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# tokenizer and vocabulary
# ---------------------------------------------------------------------------


def word_spans(text: str) -> list[tuple[str, int, int]]:
    """Lowercased tokens with their character spans in ``text``.

    Tokens are runs of word characters or single punctuation marks, so
    ``"PD-L1"`` splits into ``pd``, ``-``, ``l1``.
    """
    return [(m.group().lower(), m.start(), m.end()) for m in _TOKEN_RE.finditer(text)]


def words(text: str) -> list[str]:
    return [m.group().lower() for m in _TOKEN_RE.finditer(text)]


class Vocab:
    """Token/id bijection with the four reserved ids first."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def encode(self, toks: Iterable[str]) -> list[int]:
        get = self.stoi.get
        return [get(t, UNK) for t in toks]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    @property
    def content_hash(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()

    def to_json(self) -> dict:
        return {"tokens": self.itos, "hash": self.content_hash}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), ensure_ascii=False, indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        vocab = cls(obj["tokens"])
        if "hash" in obj and obj["hash"] != vocab.content_hash:
            raise ValueError(f"vocabulary hash mismatch in {path}")
        return vocab


def build_vocab(corpus: Sequence[PatientRecord], max_size: int = 20000) -> Vocab:
    """Most frequent tokens first; equal counts ordered lexicographically."""
    if max_size < len(RESERVED) + 1:
        raise ValueError(f"max_size must be at least {len(RESERVED) + 1}")
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts: Counter[str] = Counter()
    for rec in corpus:
        for doc in rec.documents:
            counts.update(words(doc))
    for r in RESERVED:
        counts.pop(r, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = [t for t, _ in ranked[: max_size - len(RESERVED)]]
    return Vocab(list(RESERVED) + keep)


def tokenize(text: str, vocab: Vocab) -> list[int]:
    return vocab.encode(words(text))


# ---------------------------------------------------------------------------
# synthetic corpora
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a seeded corpus of long noise documents with planted phrases.

    ``trigger_phrases[c]`` lists templates for class ``c``; every patient of
    class ``c`` receives exactly one of them. Templates may contain
    ``{a|b|c}`` choice groups. Distractors are extra phrases mentioning the
    search term in misleading context, planted into patients whose class is
    in ``distractor_classes`` (all classes when None).
    """

    patients_per_class: int
    documents_per_patient: int
    noise_tokens_per_document: int
    trigger_phrases: tuple[tuple[str, ...], ...]
    distractor_phrases: tuple[str, ...] = ()
    distractors_per_patient: int = 0
    distractor_classes: tuple[int, ...] | None = None
    noise_sentences: tuple[str, ...] = field(default_factory=lambda: NOISE_SENTENCES)
    hit_sentences: tuple[str, ...] = ()
    hit_sentence_rate: float = 0.0
    seed: int = 0
    id_prefix: str = "p"

    def __post_init__(self):
        if self.patients_per_class <= 0 or self.documents_per_patient <= 0:
            raise ValueError("patient and document counts must be positive")
        if self.noise_tokens_per_document < 0 or self.distractors_per_patient < 0:
            raise ValueError("token and distractor counts must be nonnegative")
        if not self.trigger_phrases or any(len(t) == 0 for t in self.trigger_phrases):
            raise ValueError("every class needs at least one trigger phrase")
        if self.distractors_per_patient and not self.distractor_phrases:
            raise ValueError("distractors requested but no distractor phrases given")
        if not self.noise_sentences and self.noise_tokens_per_document:
            raise ValueError("noise requested but no noise sentences given")
        if not 0.0 <= self.hit_sentence_rate <= 1.0:
            raise ValueError("hit_sentence_rate must lie in [0, 1]")

    @property
    def n_classes(self) -> int:
        return len(self.trigger_phrases)


def expand_template(template: str, rng: np.random.Generator) -> str:
    def pick(m: re.Match) -> str:
        options = m.group(1).split("|")
        return options[int(rng.integers(len(options)))]

    return _CHOICE_RE.sub(pick, template)


def _noise_words(spec: SyntheticSpec, rng: np.random.Generator) -> list[str]:
    out: list[str] = []
    n = spec.noise_tokens_per_document
    while len(out) < n:
        if spec.hit_sentences and rng.random() < spec.hit_sentence_rate:
            sent = spec.hit_sentences[int(rng.integers(len(spec.hit_sentences)))]
        else:
            sent = spec.noise_sentences[int(rng.integers(len(spec.noise_sentences)))]
        out.extend(sent.split())
    return out[:n]


def _plant(noise: list[str], phrases: list[list[str]], rng: np.random.Generator) -> list[str]:
    """Insert whole phrases at random word boundaries without splitting each other."""
    slots = sorted((int(rng.integers(len(noise) + 1)), k) for k in range(len(phrases)))
    out: list[str] = []
    prev = 0
    for pos, k in slots:
        out.extend(noise[prev:pos])
        out.extend(phrases[k])
        prev = pos
    out.extend(noise[prev:])
    return out


def generate_synthetic(spec: SyntheticSpec) -> list[PatientRecord]:
    """Deterministic corpus for ``spec``; class counts are exact and patient order is shuffled."""
    rng = np.random.default_rng(spec.seed)
    labels = np.repeat(np.arange(spec.n_classes), spec.patients_per_class)
    labels = labels[rng.permutation(labels.size)]
    distract = set(range(spec.n_classes) if spec.distractor_classes is None else spec.distractor_classes)
    n_noise = spec.noise_tokens_per_document
    width = len(str(labels.size))
    corpus = []
    for k, label in enumerate(labels.tolist()):
        planted: list[tuple[int, list[str]]] = []
        templates = spec.trigger_phrases[label]
        trigger = expand_template(templates[int(rng.integers(len(templates)))], rng).split()
        if 0 < n_noise < len(trigger):
            raise ValueError(
                f"trigger phrase of {len(trigger)} tokens is longer than a {n_noise}-token document"
            )
        planted.append((int(rng.integers(spec.documents_per_patient)), trigger))
        if label in distract:
            for _ in range(spec.distractors_per_patient):
                tmpl = spec.distractor_phrases[int(rng.integers(len(spec.distractor_phrases)))]
                planted.append((int(rng.integers(spec.documents_per_patient)), expand_template(tmpl, rng).split()))
        docs = []
        for d in range(spec.documents_per_patient):
            noise = _noise_words(spec, rng)
            docs.append(" ".join(_plant(noise, [p for doc, p in planted if doc == d], rng)))
        corpus.append(PatientRecord(id=f"{spec.id_prefix}{k:0{width}d}", documents=docs, label=label))
    return corpus


NOISE_SENTENCES: tuple[str, ...] = (
    "patient seen in clinic today for routine follow up",
    "vital signs stable and within normal limits",
    "no acute distress noted on examination today",
    "labs reviewed with patient and family at bedside",
    "plan to continue current medication regimen",
    "imaging results discussed at length with the patient",
    "patient reports mild fatigue and decreased appetite",
    "denies fever chills or night sweats",
    "return to clinic in three weeks for next cycle",
    "prior biopsy confirms benign tissue in left axilla",
    "no evidence of infection at the port site",
    "breast exam performed without new findings",
    "carcinoma history reviewed in detail with family",
    "ordering repeat labs before the next infusion",
    "insurance authorization pending for infusion",
    "patient tolerating therapy well overall",
    "high blood pressure managed by primary care",
    "expression of concern about side effects addressed",
    "testing schedule explained to the patient",
    "tissue sample sent to outside laboratory for review",
    "result of the lipid panel is normal",
    "positive attitude and good family support",
    "negative review of systems otherwise",
    "percent of doses received on schedule is high",
    "tumor markers trending down since last visit",
    "considered referral to physical therapy",
    "sequencing of treatments discussed with oncology team",
    "staging scans are scheduled for next month",
    "result is pending from the outside laboratory",
    "insufficient sleep reported due to anxiety",
    "patient declined flu vaccine today",
    "report received from radiology and filed",
    "imaging shows stable nodules in the lung",
    "liver function tests remain within normal range",
    "bone pain improved with current analgesics",
    "panel of blood counts returned without concerns",
    "unknown allergy history clarified with pharmacy",
    "physician discussed goals of care with family",
    "assay results from prior hospital were requested",
    "zero falls reported since last visit",
    "weight stable compared to prior measurement",
    "hemoglobin level is low but stable",
    "the patient will call with any questions",
    "nurse provided education on neutropenic precautions",
    "appetite improved after dose adjustment",
)
