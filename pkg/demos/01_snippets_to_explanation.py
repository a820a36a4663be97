"""From a noisy synthetic corpus to a per-patient attention report.

Run: python demos/01_snippets_to_explanation.py  (about a minute on one core)
"""

from pathlib import Path

import numpy as np

from snipattn import (
    Checkpoint,
    EncoderConfig,
    HeadConfig,
    SnippetModel,
    TrainConfig,
    build_snippet_corpus,
    build_vocab,
    explain,
    finetune,
    generate_synthetic,
    macro_f1,
    predict_probs,
    render_html,
    split_indices,
)
from snipattn.tasks import TASKS

out = Path("demo_out")
out.mkdir(exist_ok=True)

# each patient gets 2,000 noise tokens, one class phrase, and ~10 sentences that
# mention the search term without saying anything about the label
task = TASKS["pdl1"]
corpus = generate_synthetic(task.spec(200, noise_tokens=2000, distractors_per_patient=1, seed=0))
print(len(corpus), "patients;", len(corpus[0].documents[0].split()), "tokens in the first note")

# the search patterns cut every note down to a handful of short windows
tr, va, te = split_indices([r.label for r in corpus], seed=0)
vocab = build_vocab([corpus[i] for i in tr])
sc = build_snippet_corpus(corpus, task.pattern_set(), vocab, width=8, max_len=24)
print("snippets per patient: mean", round(sc.stats["m_mean"], 2), "max", sc.stats["m_max"])
print("first snippet:", " ".join(sc.sets[0].snippets[0].tokens))

# a small truncated encoder reads one snippet at a time; two attention layers pool it
enc = EncoderConfig(len(vocab), dim=32, layers=2, heads=2, ffn_dim=64, max_positions=24)
model = SnippetModel(enc, HeadConfig(32, task.n_classes))
pick = lambda idx: [sc.sets[i] for i in idx]  # noqa: E731
res = finetune(model, pick(tr), pick(va), TrainConfig(lr=1e-3, epochs=6, seed=0))
for rec in res.history:
    print("epoch", rec["epoch"], "train loss %.4f valid loss %.4f" % (rec["train_loss"], rec["valid_loss"]))

probs = predict_probs(model, res.params, pick(te))
print("test macro-F1", macro_f1(probs.argmax(axis=1), [corpus[i].label for i in te], task.n_classes))

# which snippets did the model look at for one positive test patient?
patient = next(corpus[i] for i in te if corpus[i].label == 1)
ck = Checkpoint(model, res.params, {"class_names": list(task.class_names), "vocab_hash": vocab.content_hash,
                                    "snippets": {"width": 8, "max_len": 24, "cap": 64}})
report = explain(ck, patient, task.pattern_set(), vocab, k=3)
print("predicted", report.predicted, np.round(report.probabilities, 4))
for s in report.snippets[:3]:
    print("  #%d  weight %.3f  %s" % (s.rank, s.weight, " ".join(s.tokens)))
(out / "explain.json").write_text(report.dumps())
(out / "explain.html").write_text(render_html(report))
print("wrote", out / "explain.html")
