"""Black-box unlearning audit from the loss landscape around each input."""

__version__ = "0.1.0"

from .classifiers import CLASSES, LabeledDataset, load_model, predict, predict_proba, save_model, split, train
from .config import ExperimentConfig, load_config
from .datasets import load_corpus, select_view
from .embedding_store import TokenEmbeddingTable, load_embedding_table, nearest_neighbor
from .errors import CapabilityError, ConfigError, DataError, FormatError, OracleError, ParameterError, RemindError
from .ill_features import IllFeatureVector, extract_features, features_from_losses
from .metrics import multiclass_auc, partial_auc, roc_auc, tpr_at_fpr
from .oracle import CachedOracle, HTTPOracle, LossProfile, SyntheticOracle
from .perturbation import NeighborhoodSet, PerturbationConfig, perturb
from .runner import EvaluationReport, run_experiment

__all__ = [
    "CLASSES", "CachedOracle", "CapabilityError", "ConfigError", "DataError", "EvaluationReport",
    "ExperimentConfig", "FormatError", "HTTPOracle", "IllFeatureVector", "LabeledDataset", "LossProfile",
    "NeighborhoodSet", "OracleError", "ParameterError", "PerturbationConfig", "RemindError",
    "SyntheticOracle", "TokenEmbeddingTable", "extract_features", "features_from_losses", "load_config",
    "load_corpus", "load_embedding_table", "load_model", "multiclass_auc", "nearest_neighbor",
    "partial_auc", "perturb", "predict", "predict_proba", "roc_auc", "run_experiment", "save_model",
    "select_view", "split", "tpr_at_fpr", "train",
]
