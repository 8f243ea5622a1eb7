"""Federated-learning simulator with adversarial model fingerprinting.

A trusted aggregation server trains a global model with FedAvg while
maintaining a set of bounded adversarial fingerprints and a distribution
detector that can later prove ownership of the model through nothing but
black-box queries.
"""

from .attacks import AttackResult, CollabSpec, adaptive_retrain, fine_tune, prune
from .config import ExperimentConfig
from .data import Dataset, Partition, load_idx, make_key_samples, partition_dirichlet, partition_iid, synth_blobs
from .detector import (
    Detector,
    FeatureMatrix,
    Verdict,
    calibrate_alpha,
    extract_features,
    new_detector,
    train_detector,
    verify,
)
from .federation import ClientState, RoundRecord, ServerState, aggregate, local_update, run_round
from .fingerprint import (
    FingerprintSet,
    checkpoint,
    enhance,
    generate,
    interclass_mse,
    new_fingerprint_set,
    should_start,
)
from .harness import compare_fidelity, run_attack, run_experiment
from .nn import MlpModel, ModelParams, backward, forward, init_model, sgd_step, softmax

__version__ = "0.1.0"

__all__ = [
    "AttackResult",
    "ClientState",
    "CollabSpec",
    "Dataset",
    "Detector",
    "ExperimentConfig",
    "FeatureMatrix",
    "FingerprintSet",
    "MlpModel",
    "ModelParams",
    "Partition",
    "RoundRecord",
    "ServerState",
    "Verdict",
    "adaptive_retrain",
    "aggregate",
    "backward",
    "calibrate_alpha",
    "checkpoint",
    "compare_fidelity",
    "enhance",
    "extract_features",
    "fine_tune",
    "forward",
    "generate",
    "init_model",
    "interclass_mse",
    "load_idx",
    "local_update",
    "make_key_samples",
    "new_detector",
    "new_fingerprint_set",
    "partition_dirichlet",
    "partition_iid",
    "prune",
    "run_attack",
    "run_experiment",
    "run_round",
    "sgd_step",
    "should_start",
    "softmax",
    "synth_blobs",
    "train_detector",
    "verify",
]
