"""Training, evaluation, ablations, embedding dumps and the CLI.

The ``train`` and ``evaluate`` functions live in the submodules of the same name.
"""

from .ablation import TABLE3, TABLE4, AblationError, AblationResult, run_ablation
from .checkpoint import CheckpointError
from .config import RunConfig, load_config
from .embeddings import EmbeddingFile, matched_cosine
from .evaluate import MetricsReport, MissingMasksError, evaluate_model, load_eval_split
from .metrics import confusion_matrix, f_beta, fscore, frame_audio_accuracy, miou
from .train import PCASModel, TrainingAborted, load_model, untrained_model
