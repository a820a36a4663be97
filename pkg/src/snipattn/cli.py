"""Command-line entry point: ``snipattn <subcommand> ...``.

Machine-readable output goes to the paths named by flags; progress goes to stderr.
Exit status is 0 on success, 2 for bad flags or missing inputs, 1 for runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import autograd as ag
from .corpus import Vocab, build_vocab, generate_synthetic, read_corpus, write_corpus
from .encoder import EncoderConfig, as_leaves
from .experiment import ExperimentConfig, run_experiment
from .explain import DEFAULT_K, explain, render_html
from .head import ConcatModel, HeadConfig, SnippetModel
from .metrics import evaluate_probs
from .snippets import DEFAULT_CAP, DEFAULT_MAX_LEN, DEFAULT_WIDTH, PatternSet, build_snippet_corpus, write_snippets
from .tasks import TASKS, get_task
from .train import (
    TrainConfig,
    finetune,
    load_checkpoint,
    predict_probs,
    pretrain,
    pretraining_sequences,
    profile,
    save_checkpoint,
    split_indices,
)

log = logging.getLogger("snipattn")


class UsageError(Exception):
    """Bad input path or inconsistent flags; reported with exit status 2."""


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"no such file: {path}")
    return p


def _write_json(path: str | Path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _class_names(task: str, n: int) -> list[str]:
    if task in TASKS and TASKS[task].n_classes == n:
        return list(TASKS[task].class_names)
    return [str(i) for i in range(n)]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_corpus(a) -> None:
    task = get_task(a.task)
    spec = task.spec(a.patients_per_class, a.noise_tokens, a.documents, a.hits_per_document, a.distractors, a.seed)
    corpus = generate_synthetic(spec)
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    write_corpus(a.out, corpus)
    if a.patterns_out:
        task.pattern_set().save(a.patterns_out)
    log.info("wrote %d patients to %s", len(corpus), a.out)


def cmd_build_vocab(a) -> None:
    corpus = read_corpus(_existing(a.corpus))
    vocab = build_vocab(corpus, a.max_size)
    vocab.save(a.out)
    log.info("vocabulary of %d tokens, hash %s", len(vocab), vocab.content_hash[:12])


def cmd_snip(a) -> None:
    corpus = read_corpus(_existing(a.corpus))
    patterns = PatternSet.load(_existing(a.patterns))
    vocab = Vocab.load(_existing(a.vocab)) if a.vocab else build_vocab(corpus)
    sc = build_snippet_corpus(corpus, patterns, vocab, a.width, a.max_len, a.cap)
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    write_snippets(a.out, sc.sets)
    stats_path = a.stats or str(a.out) + ".stats.json"
    _write_json(stats_path, sc.stats)
    log.info("m mean %.2f max %d, %d empty patients", sc.stats["m_mean"], sc.stats["m_max"], len(sc.stats["empty_patients"]))


def _encoder_config(a, vocab_size: int) -> EncoderConfig:
    return EncoderConfig(vocab_size, a.dim, a.layers, a.heads, a.ffn_dim, a.max_len, a.dropout)


def cmd_pretrain(a) -> None:
    corpus = read_corpus(_existing(a.corpus))
    vocab = Vocab.load(_existing(a.vocab))
    patterns = PatternSet.load(_existing(a.patterns)) if a.patterns else None
    cfg = _encoder_config(a, len(vocab))
    seqs = pretraining_sequences(corpus, vocab, patterns, a.max_len, a.width, a.seed)
    order = np.random.default_rng(a.seed).permutation(len(seqs))
    n_held = max(1, int(len(seqs) * a.heldout))
    held = [seqs[i] for i in order[:n_held]]
    res = pretrain(cfg, [seqs[i] for i in order[n_held:]], a.epochs, a.batch_size, a.lr, a.mask_prob, a.seed, held)
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.with_suffix(".bin").write_bytes(ag.dump_params(dict(sorted(res.params.items()))))
    _write_json(
        out.with_suffix(".json"),
        {"format": ag.SERIAL_VERSION, "kind": "encoder", "encoder": cfg.to_json(), "vocab_hash": vocab.content_hash, "history": res.history},
    )
    log.info("held-out MLM loss %.4f (ln V = %.4f)", res.history[-1]["heldout_loss"], np.log(len(vocab)))


def _load_encoder(path: str, vocab: Vocab) -> tuple[dict, EncoderConfig]:
    p = Path(path)
    meta = json.loads(_existing(str(p.with_suffix(".json"))).read_text(encoding="utf-8"))
    if meta.get("vocab_hash") not in (None, vocab.content_hash):
        raise UsageError("pretrained encoder was built with a different vocabulary")
    return ag.load_params(p.with_suffix(".bin").read_bytes()), EncoderConfig.from_json(meta["encoder"])


def _splits(corpus, seed: int, fractions):
    return split_indices([r.label for r in corpus], fractions, seed)


def cmd_train(a) -> None:
    corpus = read_corpus(_existing(a.corpus))
    patterns = PatternSet.load(_existing(a.patterns))
    vocab = Vocab.load(_existing(a.vocab))
    n_classes = max(r.label for r in corpus) + 1
    sets = build_snippet_corpus(corpus, patterns, vocab, a.width, a.max_len, a.cap).sets
    tc = TrainConfig(a.lr, batch_size=a.batch_size, epochs=a.epochs, patience=a.patience, seed=a.seed, split=tuple(a.split), class_weighting=a.class_weighting)
    tr, va, _ = _splits(corpus, a.seed, tc.split)
    enc_cfg = _encoder_config(a, len(vocab))
    head_cfg = HeadConfig(a.dim, n_classes)
    init = None
    if a.model == "concat":
        n_max = a.n_max or 8 * a.max_len
        model = ConcatModel(EncoderConfig(**{**enc_cfg.to_json(), "max_positions": n_max}), head_cfg)
    else:
        model = SnippetModel(enc_cfg, head_cfg)
    if a.init_encoder:
        enc_params, pre_cfg = _load_encoder(a.init_encoder, vocab)
        if (pre_cfg.dim, pre_cfg.layers, pre_cfg.heads, pre_cfg.ffn_dim) != (a.dim, a.layers, a.heads, a.ffn_dim):
            raise UsageError("pretrained encoder shape differs from the requested encoder flags")
        init = model.init_params(np.random.default_rng(a.seed), encoder_params=enc_params)
    res = finetune(model, [sets[i] for i in tr], [sets[i] for i in va], tc, init)
    meta = {
        "task": a.task,
        "class_names": _class_names(a.task, n_classes),
        "vocab_hash": vocab.content_hash,
        "snippets": {"width": a.width, "max_len": a.max_len, "cap": a.cap},
        "split": {"fractions": list(tc.split), "seed": a.seed},
        "history": res.history,
        "best_epoch": res.best_epoch,
    }
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(a.out, model, res.params, meta)
    log.info("best epoch %d, checkpoint %s", res.best_epoch, a.out)


def cmd_eval(a) -> None:
    _existing(str(Path(a.checkpoint).with_suffix(".json")))
    ck = load_checkpoint(a.checkpoint)
    corpus = read_corpus(_existing(a.corpus))
    patterns = PatternSet.load(_existing(a.patterns))
    vocab = Vocab.load(_existing(a.vocab))
    if ck.meta.get("vocab_hash") not in (None, vocab.content_hash):
        raise UsageError("vocabulary does not match the checkpoint")
    sn = ck.meta.get("snippets", {})
    sets = build_snippet_corpus(corpus, patterns, vocab, sn.get("width", DEFAULT_WIDTH), sn.get("max_len", DEFAULT_MAX_LEN), sn.get("cap", DEFAULT_CAP)).sets
    sp = ck.meta.get("split", {"fractions": [0.8, 0.1, 0.1], "seed": 0})
    parts = dict(zip(("train", "valid", "test"), _splits(corpus, sp["seed"], sp["fractions"])))
    idx = list(range(len(corpus))) if a.split == "all" else parts[a.split]
    chosen = [sets[i] for i in idx]
    probs = predict_probs(ck.model, ck.params, chosen)
    names = ck.meta.get("class_names") or _class_names(a.task, ck.model.head_config.n_classes)
    report = evaluate_probs(probs, [corpus[i].label for i in idx], ck.meta.get("task", ""), a.split, sp["seed"], names, ck.model.kind)
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    Path(a.out).write_text(report.dumps(), encoding="utf-8")
    if a.predictions:
        leaves = as_leaves(ck.params, requires_grad=False)
        with open(a.predictions, "w", encoding="utf-8", newline="\n") as fh:
            for ss, p in zip(chosen, probs):
                row = {"patient_id": ss.patient_id, "label": ss.label, "probabilities": [float(x) for x in p]}
                if ck.model.kind == "snippet" and ss.m:
                    pred = ck.model.predict(leaves, ss)
                    w = pred.snippet_weights
                    row["snippet_weights"] = [float(x) for x in w]
                    top = sorted(range(ss.m), key=lambda i: (-w[i], i))[: a.k]
                    row["top_token_weights"] = {str(i): [float(x) for x in pred.token_weights[i]] for i in top}
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    log.info("%s %s", a.split, report.metrics)


def cmd_experiment(a) -> None:
    cfg = ExperimentConfig.load(_existing(a.config))
    if a.out_dir:
        cfg.output_dir = a.out_dir
    if not cfg.output_dir:
        raise UsageError("set output_dir in the config or pass --out-dir")
    res = run_experiment(cfg)
    sys.stderr.write(res.summary_csv)


def cmd_profile(a) -> None:
    rows = [profile(m, a.L) for m in a.m]
    for r in rows:
        print(f"m={r['m']} L={r['L']} analytic_ratio={r['analytic_ratio']:.6f} measured_ratio={r['measured_ratio']:.6f}")
    if a.out:
        _write_json(a.out, rows)


def cmd_explain(a) -> None:
    _existing(str(Path(a.checkpoint).with_suffix(".json")))
    ck = load_checkpoint(a.checkpoint)
    corpus = read_corpus(_existing(a.corpus))
    patterns = PatternSet.load(_existing(a.patterns))
    vocab = Vocab.load(_existing(a.vocab))
    records = {r.id: r for r in corpus}
    if a.patient not in records:
        raise UsageError(f"patient {a.patient!r} is not in {a.corpus}")
    report = explain(ck, records[a.patient], patterns, vocab, a.k)
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    Path(a.out).write_text(report.dumps(), encoding="utf-8")
    if a.html:
        Path(a.html).write_text(render_html(report), encoding="utf-8")
    log.info("%s predicted %s over %d snippets", report.patient_id, report.predicted, report.m)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _snippet_flags(p) -> None:
    p.add_argument("--width", type=int, default=DEFAULT_WIDTH, help="context tokens on each side of a hit")
    p.add_argument("--max-len", type=int, default=DEFAULT_MAX_LEN, help="snippet length L in tokens")
    p.add_argument("--cap", type=int, default=DEFAULT_CAP, help="max snippets per patient")


def _encoder_flags(p) -> None:
    d = {f.name: f.default for f in fields(EncoderConfig)}
    p.add_argument("--dim", type=int, default=d["dim"])
    p.add_argument("--layers", type=int, default=d["layers"])
    p.add_argument("--heads", type=int, default=d["heads"])
    p.add_argument("--ffn-dim", type=int, default=d["ffn_dim"])
    p.add_argument("--dropout", type=float, default=d["dropout"])


def _inputs(p, vocab=True) -> None:
    p.add_argument("--corpus", required=True, help="patient JSON-lines file")
    p.add_argument("--patterns", required=True, help="one pattern per line; prefix re: for regex")
    if vocab:
        p.add_argument("--vocab", required=True)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="snipattn", description=__doc__.splitlines()[0])
    ap.add_argument("-q", "--quiet", action="store_true", help="only warnings on stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="write a seeded synthetic corpus")
    p.add_argument("--task", choices=sorted(TASKS), default="mbc")
    p.add_argument("--patients-per-class", type=int, default=100)
    p.add_argument("--noise-tokens", type=int, default=2000)
    p.add_argument("--documents", type=int, default=1)
    p.add_argument("--hits-per-document", type=float, default=10.0)
    p.add_argument("--distractors", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--patterns-out", help="also write the task's pattern file here")
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("build-vocab", help="word vocabulary from a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--max-size", type=int, default=20000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("snip", help="extract snippets and statistics")
    _inputs(p, vocab=False)
    p.add_argument("--vocab", help="vocabulary JSON; built from the corpus when omitted")
    _snippet_flags(p)
    p.add_argument("--out", default="snippets.jsonl")
    p.add_argument("--stats", help="statistics JSON (default: <out>.stats.json)")
    p.set_defaults(func=cmd_snip)

    p = sub.add_parser("pretrain", help="masked-LM pretraining of the encoder")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--patterns", help="add snippet windows around these patterns to the random windows")
    _snippet_flags(p)
    _encoder_flags(p)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--mask-prob", type=float, default=0.15)
    p.add_argument("--heldout", type=float, default=0.1, help="held-out fraction of sequences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint prefix (.bin and .json)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="finetune a snippet or concat classifier")
    _inputs(p)
    p.add_argument("--task", default="", help="task name, used for class names")
    p.add_argument("--model", choices=("snippet", "concat"), default="snippet")
    p.add_argument("--n-max", type=int, help="concat token budget (default 8 * max-len)")
    _snippet_flags(p)
    _encoder_flags(p)
    p.add_argument("--init-encoder", help="pretrained encoder checkpoint prefix")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--epochs", type=int, default=6)
    p.add_argument("--patience", type=int, default=2)
    p.add_argument("--split", type=float, nargs=3, default=(0.8, 0.1, 0.1), metavar=("TRAIN", "VALID", "TEST"))
    p.add_argument("--class-weighting", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint prefix (.bin and .json)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics for a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    _inputs(p)
    p.add_argument("--task", default="")
    p.add_argument("--split", choices=("train", "valid", "test", "all"), default="test")
    p.add_argument("--out", required=True, help="EvalReport JSON")
    p.add_argument("--predictions", help="per-patient probabilities and snippet weights (JSON-lines)")
    p.add_argument("--k", type=int, default=DEFAULT_K, help="snippets per patient with token weights in --predictions")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("experiment", help="run the baseline-versus-snippet grid from a TOML or JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("profile", help="attention multiply counts, concat versus snippet")
    p.add_argument("--m", type=int, nargs="+", default=[8])
    p.add_argument("--L", type=int, default=32)
    p.add_argument("--out")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("explain", help="attention report for one patient")
    p.add_argument("--checkpoint", required=True)
    _inputs(p)
    p.add_argument("--patient", required=True)
    p.add_argument("--k", type=int, default=DEFAULT_K)
    p.add_argument("--out", required=True, help="AttentionReport JSON")
    p.add_argument("--html", help="also write a static HTML view")
    p.set_defaults(func=cmd_explain)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        a = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if a.quiet else logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        a.func(a)
    except UsageError as exc:
        ap.print_usage(sys.stderr)
        print(f"snipattn: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"snipattn: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
