"""The five-way comparison on a small synthetic task, written as a CSV table.

Run: python demos/03_baseline_grid.py  (several minutes on one core)
"""

from snipattn import ExperimentConfig, run_experiment

# TF-IDF on all text, TF-IDF on snippet text only, the concatenation baseline,
# the snippet model from scratch, and the snippet model after masked-LM pretraining
cfg = ExperimentConfig(task="mbc", patients_per_class=200, noise_tokens=2000, output_dir="demo_out/grid")
result = run_experiment(cfg)
print(result.summary_csv)

mlm = result.extra["mlm"]
print("masked-LM held-out loss %.3f -> %.3f (ln V = %.3f)" % (mlm["init_heldout_loss"], mlm["heldout_loss"], mlm["ln_vocab"]))
print("full reports in demo_out/grid/reports/")
