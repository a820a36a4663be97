"""Built-in synthetic tasks: two binary tasks and one three-class task with distractors.

Each task bundles its search patterns with the phrases the generator plants.
Noise sentences that mention the search term ("hit sentences") make every
patient produce several uninformative snippets around the informative one.
"""

from __future__ import annotations

from dataclasses import dataclass

from .corpus import NOISE_SENTENCES, SyntheticSpec
from .snippets import PatternSet


@dataclass(frozen=True)
class Task:
    name: str
    class_names: tuple[str, ...]
    patterns: tuple[str, ...]
    triggers: tuple[tuple[str, ...], ...]
    hit_sentences: tuple[str, ...]
    distractors: tuple[str, ...] = ()
    distractor_classes: tuple[int, ...] | None = None

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def pattern_set(self) -> PatternSet:
        return PatternSet(list(self.patterns), task=self.name)

    def spec(
        self,
        patients_per_class: int,
        noise_tokens: int = 2000,
        documents: int = 1,
        hits_per_document: float = 10.0,
        distractors_per_patient: int = 0,
        seed: int = 0,
    ) -> SyntheticSpec:
        mean_len = sum(len(s.split()) for s in NOISE_SENTENCES) / len(NOISE_SENTENCES)
        sentences = max(noise_tokens / mean_len, 1.0)
        rate = min(1.0, hits_per_document / sentences) if self.hit_sentences else 0.0
        return SyntheticSpec(
            patients_per_class=patients_per_class,
            documents_per_patient=documents,
            noise_tokens_per_document=noise_tokens,
            trigger_phrases=self.triggers,
            distractor_phrases=self.distractors,
            distractors_per_patient=distractors_per_patient if self.distractors else 0,
            distractor_classes=self.distractor_classes,
            hit_sentences=self.hit_sentences,
            hit_sentence_rate=rate,
            seed=seed,
            id_prefix=f"{self.name}-",
        )


MBC = Task(
    name="mbc",
    class_names=("NEG", "POS"),
    patterns=("metastatic", r"re:\bmets\b"),
    triggers=(
        (
            "{staging|restaging} scans show no metastatic breast carcinoma",
            "no evidence of metastatic breast carcinoma on {imaging|biopsy}",
        ),
        (
            "{biopsy|imaging} confirms metastatic breast carcinoma {in liver|in bone|in lung}",
            "new metastatic breast carcinoma {in liver|in bone} confirmed on biopsy",
        ),
    ),
    hit_sentences=(
        "family history of metastatic disease in an aunt",
        "education on metastatic spread provided to patient",
        "questions about mets screening answered today",
        "discussed general risk of metastatic recurrence",
        "metastatic workup considered by outside physician",
        "support group for metastatic patients recommended",
    ),
    distractors=("possible metastatic breast carcinoma to be ruled out",),
    distractor_classes=(0,),
)

NGS = Task(
    name="ngs",
    class_names=("NEG", "POS"),
    patterns=(r"re:\bngs\b", "next generation sequencing"),
    triggers=(
        (
            "ngs not performed {tissue insufficient|patient declined}",
            "next generation sequencing was not {ordered|done}",
        ),
        (
            "ngs {panel|report} resulted from {foundation|tempus} laboratory",
            "next generation sequencing {panel|report} received and reviewed",
        ),
    ),
    hit_sentences=(
        "ngs explained as a future option",
        "next generation sequencing coverage question from insurance",
        "ngs may be considered at progression",
        "brochure on next generation sequencing given to patient",
    ),
    distractors=("physician considered ordering ngs panel",),
    distractor_classes=(0,),
)

PDL1 = Task(
    name="pdl1",
    class_names=("NEG", "POS", "UNK"),
    patterns=(r"re:pd-?l1",),
    triggers=(
        ("pd-l1 {negative|not expressed} tps {0|zero|under one} percent",),
        ("pd-l1 {high|strongly positive} expression tps {60|80|90} percent",),
        ("pd-l1 result {indeterminate|unknown} {insufficient tissue|failed stain}",),
    ),
    hit_sentences=(
        "pd-l1 testing discussed with patient",
        "pd-l1 significance explained to family",
        "outside records mention pd-l1 without details",
    ),
    distractors=(
        "physician considered ordering pd-l1 {assay|test}",
        "pd-l1 {high|positive} result would qualify for trial",
        "pd-l1 {negative|indeterminate} results are common in this setting",
    ),
    distractor_classes=None,
)

TASKS = {t.name: t for t in (MBC, NGS, PDL1)}


def get_task(name: str) -> Task:
    try:
        return TASKS[name]
    except KeyError:
        raise ValueError(f"unknown task {name!r}; choose from {sorted(TASKS)}") from None
