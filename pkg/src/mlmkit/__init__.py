"""Masked-language-model toolkit for low-resource corpora.

Corpus cleaning and splits, BPE subword tokenization, a transformer
encoder trained with masked language modeling on a hand-rolled autodiff
core, and an evaluation harness covering accuracy, precision/F1, MRR,
CER, hit@k, BLEU, and perplexity.
"""

from .autodiff import Tensor, backward, finite_diff_check
from .corpus import (
    Corpus,
    CorpusStats,
    FilterConfig,
    LanguageTag,
    RawDocument,
    Split,
    build_corpus,
    corpus_stats,
    filter_lines,
    load_corpus,
    normalize_line,
    split_corpus,
)
from .metrics import EvalReport, PredictionRecord, evaluate_model, render_report
from .model import Model, ModelConfig, count_parameters, forward, new_model, predict_topk
from .tokenizer import TokenizerModel, decode, encode, load_tokenizer, save_tokenizer, train_bpe
from .training import (
    AdamState,
    MaskedBatch,
    TrainConfig,
    TrainLog,
    adam_step,
    load_checkpoint,
    mask_batch,
    mlm_loss,
    pack_blocks,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "Corpus",
    "CorpusStats",
    "EvalReport",
    "FilterConfig",
    "LanguageTag",
    "MaskedBatch",
    "Model",
    "ModelConfig",
    "PredictionRecord",
    "RawDocument",
    "Split",
    "Tensor",
    "TokenizerModel",
    "TrainConfig",
    "TrainLog",
    "adam_step",
    "backward",
    "build_corpus",
    "corpus_stats",
    "count_parameters",
    "decode",
    "encode",
    "evaluate_model",
    "filter_lines",
    "finite_diff_check",
    "forward",
    "load_checkpoint",
    "load_corpus",
    "load_tokenizer",
    "mask_batch",
    "mlm_loss",
    "new_model",
    "normalize_line",
    "pack_blocks",
    "predict_topk",
    "render_report",
    "save_checkpoint",
    "save_tokenizer",
    "split_corpus",
    "train",
    "train_bpe",
]
