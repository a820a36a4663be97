"""End-to-end acceptance checks; each records one PASS/FAIL line in the terminal summary."""

import itertools
import time

import numpy as np
import pytest

from cli_pipeline import output_files, run_pipeline
from conftest import ACCEPTANCE
from oracles import ap_oracle, f1_oracle, pr_at_recall_oracle, roc_oracle
from snipattn import autograd as ag
from snipattn.corpus import _CHOICE_RE, generate_synthetic, words
from snipattn.encoder import EncoderConfig, as_leaves
from snipattn.experiment import ExperimentConfig, run_experiment, vocab_for
from snipattn.head import HeadConfig, SnippetModel
from snipattn.metrics import f1_per_class, pr_auc, precision_at_recall, roc_auc
from snipattn.snippets import Snippet, SnippetSet, build_snippet_corpus, find_hits
from snipattn.tasks import TASKS
from snipattn.train import TrainConfig, load_checkpoint, profile, split_indices


def record(n: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    ACCEPTANCE[n] = line
    print(line)
    assert ok, line


def snip(ids):
    ids = tuple(int(i) for i in ids)
    return Snippet(ids, tuple(str(i) for i in ids), "p", 0, (0, 1), (0, len(ids)), (0, 1), 0)


def random_patient(rng, vocab, L, m_max=6):
    m = int(rng.integers(1, m_max + 1))
    return SnippetSet("p", [snip(rng.integers(4, vocab, size=rng.integers(1, L + 1))) for _ in range(m)], 0)


def test_criterion_1_full_pipeline_gradient():
    ec = EncoderConfig(vocab_size=12, dim=16, layers=1, heads=2, ffn_dim=32, max_positions=8, dropout=0.0)
    model = SnippetModel(ec, HeadConfig(16, 2))
    p0 = model.init_params(np.random.default_rng(0))
    names = list(p0)
    patient = SnippetSet("toy", [snip([4, 5, 6, 7, 8, 9, 10, 11]), snip([5, 6, 11, 4, 9])], 1)

    def f(ts):
        logits, _ = model.forward(dict(zip(names, ts)), [patient])
        return ag.cross_entropy(logits, [1])

    t0 = time.perf_counter()
    err = ag.grad_check(f, [p0[n] for n in names])
    dt = time.perf_counter() - t0
    n_params = sum(v.size for v in p0.values())
    record(1, err < 1e-5 and dt < 10.0, f"max relative error {err:.2e} over {n_params} parameters in {dt:.1f} s")


def test_criterion_2_normalization():
    rng = np.random.default_rng(2)
    worst = 0.0
    models = []
    for k in range(10):
        L, d = int(rng.integers(2, 13)), int(rng.choice([4, 8, 16]))
        ec = EncoderConfig(30, d, int(rng.integers(1, 3)), 2, 2 * d, L, 0.0)
        model = SnippetModel(ec, HeadConfig(d, int(rng.integers(2, 4))))
        raw = model.init_params(np.random.default_rng(k))
        # widen the scores so softmax is exercised far from uniform
        for name in ("head.tok.v", "head.snip.v"):
            raw[name] = raw[name] * 10.0
        models.append((model, as_leaves(raw, False), L))
    for i in range(1000):
        model, params, L = models[i % len(models)]
        pred = model.predict(params, random_patient(rng, 30, L))
        worst = max(worst, abs(pred.snippet_weights.sum() - 1.0), abs(pred.probs.sum() - 1.0))
        worst = max(worst, max(abs(t.sum() - 1.0) for t in pred.token_weights))
        assert np.all(pred.snippet_weights >= 0) and all(np.all(t >= 0) for t in pred.token_weights)
    record(2, worst < 1e-9, f"1000 forwards, worst |sum - 1| = {worst:.1e}")


def test_criterion_3_permutation_invariance():
    rng = np.random.default_rng(3)
    ec = EncoderConfig(30, 16, 2, 2, 32, 10, 0.0)
    model = SnippetModel(ec, HeadConfig(16, 3))
    params = as_leaves(model.init_params(np.random.default_rng(0)), False)
    worst, identical = 0.0, 0
    for _ in range(100):
        patient = random_patient(rng, 30, 10, m_max=10)
        base = model.predict(params, patient).probs
        perm = rng.permutation(patient.m).tolist()
        again = model.predict(params, patient.permuted(perm)).probs
        diff = float(np.max(np.abs(again - base)))
        worst = max(worst, diff)
        identical += int(diff == 0.0)
    record(3, worst < 1e-12, f"100 patients, {identical} bit-identical, max change {worst:.1e}")


def test_criterion_4_attention_cost_ratio():
    t0 = time.perf_counter()
    rows = [profile(m, 32) for m in (2, 4, 8, 16)]
    dt = time.perf_counter() - t0
    rel = max(abs(r["measured_ratio"] - r["m"]) / r["m"] for r in rows)
    ratios = ", ".join(f"m={r['m']}: {r['measured_ratio']:g}" for r in rows)
    record(4, rel < 0.05 and dt < 60.0, f"measured ratios {ratios} (max deviation {rel:.1%}) in {dt:.1f} s")


def test_criterion_5_metric_oracles():
    rng = np.random.default_rng(5)
    mismatches = {"roc_auc": 0, "pr_auc": 0, "pr95": 0, "f1": 0}
    ap_exact = 0
    for case in range(10_000):
        n = int(rng.integers(2, 13))
        y = rng.integers(0, 2, size=n)
        if y.min() == y.max():
            y[int(rng.integers(n))] ^= 1
        # half the cases draw from a coarse grid so ties are common
        s = rng.integers(0, 5, size=n) / 4 if case % 2 else rng.random(n)
        s, y = s.tolist(), y.tolist()
        mismatches["roc_auc"] += roc_auc(s, y) != float(roc_oracle(s, y))
        ap = pr_auc(s, y)
        ap_exact += ap == float(ap_oracle(s, y))
        mismatches["pr_auc"] += abs(ap - float(ap_oracle(s, y))) > 1e-12
        mismatches["pr95"] += precision_at_recall(s, y, 0.95) != float(pr_at_recall_oracle(s, y, 0.95))
        c = int(rng.integers(2, 5))
        pred, truth = rng.integers(0, c, size=n).tolist(), rng.integers(0, c, size=n).tolist()
        mismatches["f1"] += f1_per_class(pred, truth, c).f1.tolist() != [float(v) for v in f1_oracle(pred, truth, c)]
    ok = not any(mismatches.values())
    record(5, ok, f"10000 cohorts, mismatches {mismatches}; AP bit-equal to the rational in {ap_exact}/10000")


@pytest.mark.slow
def test_criterion_6_directional_ordering():
    cfg = ExperimentConfig(
        task="mbc", patients_per_class=1000, noise_tokens=2000, distractors_per_patient=1, corpus_seed=0,
        cells=("TF-IDF-Full", "TF-IDF-Snip", "Concat", "Snippet"),
    )
    t0 = time.perf_counter()
    res = run_experiment(cfg)
    dt = time.perf_counter() - t0
    corpus = generate_synthetic(TASKS["mbc"].spec(1000, 2000, 1, cfg.hits_per_document, 1, 0))
    total = sum(len(d.split()) for r in corpus for d in r.documents)
    noise = cfg.noise_tokens * sum(len(r.documents) for r in corpus)
    snip_roc, cat_roc = res.metric("Snippet", "roc_auc"), res.metric("Concat", "roc_auc")
    full95, snip95 = res.metric("TF-IDF-Full", "pr95"), res.metric("TF-IDF-Snip", "pr95")
    ok = (
        len(corpus) == 2000 and noise / total >= 0.95
        and snip_roc >= 0.95 and snip_roc >= cat_roc and snip95 >= full95 and dt < 1800
    )
    record(
        6, ok,
        f"{len(corpus)} patients, {noise / total:.2%} noise tokens; ROC-AUC Snippet {snip_roc:.4f} vs Concat {cat_roc:.4f}; "
        f"PR95 TF-IDF-Snip {snip95:.4f} vs TF-IDF-Full {full95:.4f}; {dt:.0f} s",
    )


@pytest.mark.slow
def test_criterion_7_interference():
    L = 24
    gaps, rows = [], []
    for seed in (0, 1, 2):
        cfg = ExperimentConfig(
            task="pdl1", patients_per_class=200, noise_tokens=1000, distractors_per_patient=3, corpus_seed=seed,
            max_len=L, concat_n_max=4 * L, cells=("Concat", "Snippet"),
            train=TrainConfig(lr=1e-3, epochs=8, patience=2, seed=seed),
        )
        res = run_experiment(cfg)
        s, c = res.metric("Snippet", "macro_f1"), res.metric("Concat", "macro_f1")
        gaps.append(s - c)
        rows.append(f"seed {seed}: {s:.3f} vs {c:.3f}")
    gap = float(np.mean(gaps))
    record(7, gap >= 0.05, f"macro-F1 snippet minus concat at N_max=4L, mean {gap:.3f} ({'; '.join(rows)})")


@pytest.mark.slow
def test_criterion_8_pretraining(tmp_path):
    scores, mlm_ok, rows = [], True, []
    for seed in (0, 1, 2):
        cfg = ExperimentConfig(
            task="mbc", patients_per_class=300, corpus_seed=seed, train_fraction=0.1,
            cells=("Snippet", "Snippet+pretraining"),
            train=TrainConfig(lr=1e-3, epochs=30, patience=5, seed=seed),
        )
        res = run_experiment(cfg)
        mlm = res.extra["mlm"]
        bound = 0.8 * mlm["ln_vocab"]
        mlm_ok &= mlm["heldout_loss"] < bound
        s, p = res.metric("Snippet", "pr_auc", "valid"), res.metric("Snippet+pretraining", "pr_auc", "valid")
        scores.append((s, p))
        rows.append(f"seed {seed}: MLM {mlm['heldout_loss']:.3f} < {bound:.3f}, PR-AUC {p:.4f} vs {s:.4f}")
    scratch, pretrained = np.mean(scores, axis=0)
    record(
        8, bool(mlm_ok) and pretrained >= scratch,
        f"valid PR-AUC pretrained {pretrained:.4f} vs scratch {scratch:.4f} at 10% training data ({'; '.join(rows)})",
    )


def expansions(template):
    groups = [g.split("|") for g in _CHOICE_RE.findall(template)]
    for combo in itertools.product(*groups):
        it = iter(combo)
        yield _CHOICE_RE.sub(lambda m: next(it), template)


@pytest.mark.slow
def test_criterion_9_trigger_gets_top_weight(tmp_path):
    task = TASKS["pdl1"]
    cfg = ExperimentConfig(
        task="pdl1", patients_per_class=1000, hits_per_document=38, cells=("Snippet",), output_dir=str(tmp_path),
    )
    run_experiment(cfg)
    ck = load_checkpoint(tmp_path / "checkpoints" / "Snippet")
    corpus = generate_synthetic(task.spec(1000, cfg.noise_tokens, 1, 38, cfg.distractors_per_patient, cfg.corpus_seed))
    _, _, te = split_indices([r.label for r in corpus], cfg.train.split, cfg.train.seed)
    positives = [corpus[i] for i in te if corpus[i].label == 1]
    sets = build_snippet_corpus(positives, task.pattern_set(), vocab_for(cfg), cfg.width, cfg.max_len, cfg.cap).sets
    phrases = [e for t in task.triggers[1] for e in expansions(t)]
    params = as_leaves(ck.params, False)
    hit = covered = 0
    sizes = []
    for rec, s in zip(positives, sets):
        doc = rec.documents[0]
        phrase = next(p for p in phrases if p in doc)
        c0 = doc.index(phrase)
        start = c0 + find_hits(phrase, task.pattern_set())[0].start
        first = len(words(doc[:c0]))
        span = set(range(first, first + len(words(phrase))))
        top = s.snippets[int(np.argmax(ck.model.predict(params, s).snippet_weights))]
        hit += top.hit_span[0] == start
        covered += span <= set(range(*top.window))
        sizes.append(s.m)
    n = len(sets)
    record(
        9, hit / n >= 0.9,
        f"{n} positive test patients with {np.mean(sizes):.1f} snippets on average; top-weighted snippet is the "
        f"trigger hit in {hit / n:.1%}, its window covers the trigger in {covered / n:.1%}",
    )


def test_criterion_10_cli_determinism(tmp_path):
    codes = [run_pipeline(tmp_path / run) for run in ("first", "second")]
    a, b = output_files(tmp_path / "first"), output_files(tmp_path / "second")
    differ = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    failed = sorted({name for c in codes for name, code in c.items() if code != 0})
    subcommands = sorted({name.split("-concat")[0] for name in codes[0]})
    record(
        10,
        not differ and not failed,
        f"{len(subcommands)} subcommands, {len(a)} output files, {len(differ)} differ, failures {failed or 'none'}",
    )
