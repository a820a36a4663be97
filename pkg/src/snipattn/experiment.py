"""The baseline-versus-snippet experiment grid on one task, with shared splits and seed."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .baselines import TfidfClassifier
from .corpus import PatientRecord, Vocab, build_vocab, generate_synthetic, read_corpus
from .encoder import EncoderConfig, init_encoder
from .head import ConcatModel, HeadConfig, SnippetModel
from .metrics import EvalReport, evaluate_probs
from .snippets import PatternSet, build_snippet_corpus
from .tasks import get_task
from .train import (
    TrainConfig,
    finetune,
    full_streams,
    mlm_eval,
    predict_probs,
    pretrain,
    pretraining_sequences,
    save_checkpoint,
    snippet_streams,
    split_indices,
)

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)

CELLS = ("TF-IDF-Full", "TF-IDF-Snip", "Concat", "Snippet", "Snippet+pretraining")
SETUP = {"TF-IDF-Full": "TF-IDF", "TF-IDF-Snip": "TF-IDF", "Concat": "Concat", "Snippet": "Snippet", "Snippet+pretraining": "Snippet"}


@dataclass
class EncoderSettings:
    dim: int = 32
    layers: int = 2
    heads: int = 2
    ffn_dim: int = 64
    dropout: float = 0.1


@dataclass
class PretrainSettings:
    patients_per_class: int = 300
    noise_tokens: int | None = None
    epochs: int = 3
    batch_size: int = 32
    lr: float = 1e-3
    mask_prob: float = 0.15
    seed: int = 1000
    heldout_fraction: float = 0.1


@dataclass
class TfidfSettings:
    max_features: int = 20000
    l2: float = 1e-4
    epochs: int = 500
    lr: float = 1.0


@dataclass
class ExperimentConfig:
    task: str = "mbc"
    corpus_path: str | None = None
    patterns_path: str | None = None
    patients_per_class: int = 1000
    noise_tokens: int = 2000
    documents: int = 1
    hits_per_document: float = 10.0
    distractors_per_patient: int = 1
    corpus_seed: int = 0
    width: int = 8
    max_len: int = 24
    cap: int = 64
    concat_n_max: int | None = None
    vocab_max_size: int = 20000
    train_fraction: float = 1.0
    cells: tuple[str, ...] = CELLS
    encoder: EncoderSettings = field(default_factory=EncoderSettings)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=1e-3, epochs=6, patience=2))
    pretrain: PretrainSettings = field(default_factory=PretrainSettings)
    tfidf: TfidfSettings = field(default_factory=TfidfSettings)
    output_dir: str | None = None

    def __post_init__(self):
        unknown = set(self.cells) - set(CELLS)
        if unknown:
            raise ValueError(f"unknown experiment cells {sorted(unknown)}")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ValueError("train_fraction must lie in (0, 1]")

    @property
    def n_max(self) -> int:
        return self.concat_n_max or 8 * self.max_len

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        obj = dict(obj)
        nested = {"encoder": EncoderSettings, "pretrain": PretrainSettings, "tfidf": TfidfSettings}
        for key, typ in nested.items():
            if key in obj:
                obj[key] = typ(**obj[key])
        if "train" in obj:
            t = dict(obj["train"])
            if "split" in t:
                t["split"] = tuple(t["split"])
            obj["train"] = TrainConfig(**t)
        if "cells" in obj:
            obj["cells"] = tuple(obj["cells"])
        known = {f.name for f in fields(cls)}
        extra = set(obj) - known
        if extra:
            raise ValueError(f"unknown experiment config keys {sorted(extra)}")
        return cls(**obj)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        obj = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
        cfg = cls.from_dict(obj)
        # relative paths in the file are relative to the file
        for attr in ("corpus_path", "patterns_path", "output_dir"):
            val = getattr(cfg, attr)
            if val and not Path(val).is_absolute():
                setattr(cfg, attr, str(path.parent / val))
        return cfg

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    reports: dict[str, dict[str, EvalReport]]
    histories: dict[str, list]
    summary_csv: str
    extra: dict = field(default_factory=dict)

    def metric(self, cell: str, name: str, split: str = "test") -> float:
        return self.reports[cell][split].metrics[name]


def _corpus_and_patterns(cfg: ExperimentConfig) -> tuple[list[PatientRecord], PatternSet, tuple[str, ...]]:
    if cfg.corpus_path:
        if not cfg.patterns_path:
            raise ValueError("corpus_path needs patterns_path")
        corpus = read_corpus(cfg.corpus_path)
        patterns = PatternSet.load(cfg.patterns_path)
        n_classes = max(r.label for r in corpus) + 1
        try:
            names = get_task(cfg.task).class_names
        except ValueError:
            names = tuple(str(i) for i in range(n_classes))
        return corpus, patterns, names
    task = get_task(cfg.task)
    spec = task.spec(
        cfg.patients_per_class,
        cfg.noise_tokens,
        cfg.documents,
        cfg.hits_per_document,
        cfg.distractors_per_patient,
        cfg.corpus_seed,
    )
    return generate_synthetic(spec), task.pattern_set(), task.class_names


def _pretraining_corpus(cfg: ExperimentConfig) -> list[PatientRecord]:
    task = get_task(cfg.task)
    spec = task.spec(
        cfg.pretrain.patients_per_class,
        cfg.pretrain.noise_tokens or cfg.noise_tokens,
        cfg.documents,
        cfg.hits_per_document,
        cfg.distractors_per_patient,
        cfg.pretrain.seed,
    )
    return generate_synthetic(replace(spec, id_prefix=f"pre-{task.name}-"))


def _subsample(indices: list[int], labels: Sequence[int], fraction: float, seed: int) -> list[int]:
    if fraction >= 1.0:
        return indices
    keep, _, _ = split_indices([labels[i] for i in indices], (fraction, 1.0 - fraction, 0.0), seed)
    return sorted(indices[k] for k in keep)


def summary_table(reports: dict[str, dict[str, EvalReport]], class_names: Sequence[str], split: str = "test") -> str:
    cols = ["setup", "model", "roc_auc", "pr_auc", "pr95", "macro_f1"] + [f"f1_{c}" for c in class_names]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for cell in CELLS:
        if cell not in reports:
            continue
        rep = reports[cell][split]
        row = [SETUP[cell], cell]
        for k in ("roc_auc", "pr_auc", "pr95", "macro_f1"):
            v = rep.metrics.get(k)
            row.append("" if v is None else f"{v:.6f}")
        row.extend(f"{rep.per_class[c]['f1']:.6f}" for c in class_names)
        w.writerow(row)
    return buf.getvalue()


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    corpus, patterns, class_names = _corpus_and_patterns(cfg)
    labels = [r.label for r in corpus]
    n_classes = len(class_names)
    tr, va, te = split_indices(labels, cfg.train.split, cfg.train.seed)
    tr = _subsample(tr, labels, cfg.train_fraction, cfg.train.seed)
    wants_pretrain = "Snippet+pretraining" in cfg.cells
    pre_corpus = _pretraining_corpus(cfg) if wants_pretrain else []
    vocab = build_vocab([corpus[i] for i in tr] + pre_corpus, cfg.vocab_max_size)
    sc = build_snippet_corpus(corpus, patterns, vocab, cfg.width, cfg.max_len, cfg.cap)
    sets = sc.sets
    pick = lambda idx: [sets[i] for i in idx]  # noqa: E731
    y_va = [labels[i] for i in va]
    y_te = [labels[i] for i in te]
    reports: dict[str, dict[str, EvalReport]] = {}
    histories: dict[str, list] = {}
    extra: dict = {"snippet_stats": {k: v for k, v in sc.stats.items() if k != "empty_patients"}, "vocab_size": len(vocab)}
    out = Path(cfg.output_dir) if cfg.output_dir else None
    if out:
        (out / "reports").mkdir(parents=True, exist_ok=True)
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        vocab.save(out / "vocab.json")

    def record(cell: str, p_va: np.ndarray, p_te: np.ndarray) -> None:
        reports[cell] = {
            "valid": evaluate_probs(p_va, y_va, cfg.task, "valid", cfg.train.seed, class_names, cell),
            "test": evaluate_probs(p_te, y_te, cfg.task, "test", cfg.train.seed, class_names, cell),
        }
        log.info("%s test %s", cell, reports[cell]["test"].metrics)

    if "TF-IDF-Full" in cfg.cells or "TF-IDF-Snip" in cfg.cells:
        t = cfg.tfidf
        streams = {"TF-IDF-Full": full_streams(corpus), "TF-IDF-Snip": snippet_streams(sets)}
        for cell in ("TF-IDF-Full", "TF-IDF-Snip"):
            if cell not in cfg.cells:
                continue
            s = streams[cell]
            clf = TfidfClassifier(t.max_features, t.l2, t.epochs, t.lr, cfg.train.seed)
            clf.fit([s[i] for i in tr], [labels[i] for i in tr], n_classes)
            record(cell, clf.predict_proba([s[i] for i in va]), clf.predict_proba([s[i] for i in te]))
            if out:
                clf.model.save(out / "checkpoints" / f"{cell}.json")

    e = cfg.encoder
    enc_cfg = EncoderConfig(len(vocab), e.dim, e.layers, e.heads, e.ffn_dim, cfg.max_len, e.dropout)
    head_cfg = HeadConfig(e.dim, n_classes)
    meta = {
        "task": cfg.task,
        "class_names": list(class_names),
        "vocab_hash": vocab.content_hash,
        "snippets": {"width": cfg.width, "max_len": cfg.max_len, "cap": cfg.cap},
        "split": {"fractions": list(cfg.train.split), "seed": cfg.train.seed},
    }

    def neural(cell: str, model, init=None) -> None:
        res = finetune(model, pick(tr), pick(va), cfg.train, init)
        histories[cell] = res.history
        record(cell, predict_probs(model, res.params, pick(va)), predict_probs(model, res.params, pick(te)))
        if out:
            save_checkpoint(out / "checkpoints" / cell, model, res.params, meta)

    if "Concat" in cfg.cells:
        cat_cfg = EncoderConfig(**{**enc_cfg.to_json(), "max_positions": cfg.n_max})
        neural("Concat", ConcatModel(cat_cfg, head_cfg))
    if "Snippet" in cfg.cells:
        neural("Snippet", SnippetModel(enc_cfg, head_cfg))
    if wants_pretrain:
        p = cfg.pretrain
        seqs = pretraining_sequences(pre_corpus, vocab, patterns, cfg.max_len, cfg.width, p.seed)
        rng = np.random.default_rng(p.seed)
        order = rng.permutation(len(seqs))
        n_held = max(1, int(len(seqs) * p.heldout_fraction))
        held = [seqs[i] for i in order[:n_held]]
        train_seqs = [seqs[i] for i in order[n_held:]]
        init_loss, init_acc = mlm_eval(init_encoder(enc_cfg, np.random.default_rng(p.seed)), enc_cfg, held, p.mask_prob, p.seed)
        pre = pretrain(enc_cfg, train_seqs, p.epochs, p.batch_size, p.lr, p.mask_prob, p.seed, held)
        histories["pretrain"] = pre.history
        extra["mlm"] = {
            "ln_vocab": math.log(len(vocab)),
            "init_heldout_loss": init_loss,
            "init_heldout_acc": init_acc,
            "heldout_loss": pre.history[-1]["heldout_loss"],
            "heldout_acc": pre.history[-1]["heldout_acc"],
            "sequences": len(train_seqs),
        }
        model = SnippetModel(enc_cfg, head_cfg)
        init = model.init_params(np.random.default_rng(cfg.train.seed), encoder_params=pre.params)
        neural("Snippet+pretraining", model, init)

    summary = summary_table(reports, class_names)
    if out:
        for cell, by_split in reports.items():
            for split, rep in by_split.items():
                (out / "reports" / f"{cell}.{split}.json").write_text(rep.dumps(), encoding="utf-8")
        (out / "summary.csv").write_text(summary, encoding="utf-8")
        (out / "histories.json").write_text(json.dumps(histories, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        (out / "extra.json").write_text(json.dumps(extra, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return ExperimentResult(cfg, reports, histories, summary, extra)


def vocab_for(cfg: ExperimentConfig) -> Vocab:
    """The vocabulary ``run_experiment`` builds for ``cfg`` (train split plus pretraining text)."""
    corpus, _, _ = _corpus_and_patterns(cfg)
    labels = [r.label for r in corpus]
    tr, _, _ = split_indices(labels, cfg.train.split, cfg.train.seed)
    tr = _subsample(tr, labels, cfg.train_fraction, cfg.train.seed)
    pre = _pretraining_corpus(cfg) if "Snippet+pretraining" in cfg.cells else []
    return build_vocab([corpus[i] for i in tr] + pre, cfg.vocab_max_size)
