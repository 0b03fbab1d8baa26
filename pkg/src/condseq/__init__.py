"""condseq: conditioned recurrent sequence models.

Train LSTM language models whose first step can be conditioned on image
features and/or on hidden states extracted from a model of another language;
generate descriptions greedily; evaluate with corpus BLEU-4; and orchestrate
multi-seed transfer experiments from the command line or the API.
"""

from .data import (
    BOS_INDEX,
    EOS_INDEX,
    PAD_INDEX,
    UNK_INDEX,
    Corpus,
    FeatureStore,
    PreparedDataset,
    Vocabulary,
    build_vocabulary,
    load_features,
    split_dataset,
    tokenize,
    write_features,
)
from .estimator import ConditionedLanguageModel
from .generation import GenerationConfig, generate_corpus, greedy_generate
from .metrics import aggregate_runs, bleu4, nearest_neighbors, score_histogram, sentence_bleu
from .model import (
    ConditioningSpec,
    ModelConfig,
    ModelParams,
    SequenceModel,
    extract_final_hidden,
    forward_sequence,
    load_checkpoint,
    save_checkpoint,
)
from .tensor import Tape, Tensor, grad_check
from .training import TrainerConfig, TrainLog, adam_step, evaluate_perplexity, should_stop, train
from .transfer import (
    ExperimentConfig,
    ExperimentReport,
    TransferFeatures,
    Variant,
    compare_variants,
    extract_stage,
    run_experiment,
)

__version__ = "0.1.0"

__all__ = [
    "BOS_INDEX",
    "EOS_INDEX",
    "PAD_INDEX",
    "UNK_INDEX",
    "ConditionedLanguageModel",
    "ConditioningSpec",
    "Corpus",
    "ExperimentConfig",
    "ExperimentReport",
    "FeatureStore",
    "GenerationConfig",
    "ModelConfig",
    "ModelParams",
    "PreparedDataset",
    "SequenceModel",
    "Tape",
    "Tensor",
    "TrainLog",
    "TrainerConfig",
    "TransferFeatures",
    "Variant",
    "Vocabulary",
    "adam_step",
    "aggregate_runs",
    "bleu4",
    "build_vocabulary",
    "compare_variants",
    "evaluate_perplexity",
    "extract_final_hidden",
    "extract_stage",
    "forward_sequence",
    "generate_corpus",
    "grad_check",
    "greedy_generate",
    "load_checkpoint",
    "load_features",
    "nearest_neighbors",
    "run_experiment",
    "save_checkpoint",
    "score_histogram",
    "sentence_bleu",
    "should_stop",
    "split_dataset",
    "tokenize",
    "train",
    "write_features",
    "__version__",
]
