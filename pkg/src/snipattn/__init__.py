"""Snippet-level hierarchical attention for classifying long patient records, on numpy."""

from .corpus import PatientRecord, Vocab, build_vocab, generate_synthetic, read_corpus, write_corpus
from .encoder import EncoderConfig
from .experiment import ExperimentConfig, run_experiment
from .explain import AttentionReport, explain, render_html
from .head import ConcatModel, HeadConfig, SnippetModel
from .metrics import evaluate_probs, f1_per_class, macro_f1, pr_auc, precision_at_recall, roc_auc
from .snippets import PatternSet, SnippetSet, build_snippet_corpus
from .tasks import TASKS, get_task
from .train import (
    Checkpoint,
    TrainConfig,
    finetune,
    load_checkpoint,
    predict_probs,
    pretrain,
    profile,
    save_checkpoint,
    split_indices,
)

__version__ = "0.1.0"
