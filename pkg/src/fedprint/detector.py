"""Output-distribution features, detector training, and ownership verdicts.

The detector is a small MLP that maps a model's softmax distribution on a
fingerprint back to the fingerprint's key class. Verification is strictly
black-box: both feature extraction and the verdict need nothing but a
query function mapping sample batches to class distributions, so a suspect
model behind an API works the same as a local one.

The decision threshold alpha separates protected-model detector accuracy
from the accuracy chance or an independently trained model can reach. On
full-scale image classifiers calibrated thresholds typically land well
below 0.2 while protected models sit at 1.0, leaving a wide margin.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .nn import MlpModel, ShapeError, SgdTrainer, init_model, predict_proba

QueryFn = Callable[[np.ndarray], np.ndarray]


class CalibrationError(ValueError):
    """Non-IP and protected DMC distributions overlap; carries both values."""

    def __init__(self, nonip_max: float, protected_min: float):
        super().__init__(
            f"cannot calibrate: max non-IP DMC {nonip_max:.4f} >= "
            f"min protected DMC {protected_min:.4f}"
        )
        self.nonip_max = nonip_max
        self.protected_min = protected_min


@dataclass
class FeatureMatrix:
    """Per-fingerprint class distributions plus their assigned labels.

    Rows are softmax outputs unless distributions=False (the raw-logit
    variant some callers opt into).
    """

    features: np.ndarray
    labels: np.ndarray
    distributions: bool = True

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.features) != len(self.labels):
            raise ValueError("feature/label count mismatch")
        if self.distributions and len(self.features):
            sums = self.features.sum(axis=1)
            if np.abs(sums - 1.0).max() > 1e-4:
                raise ValueError("feature rows must be distributions (sum to 1)")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class Detector:
    """Distribution classifier plus its calibrated decision threshold."""

    model: MlpModel
    key_class_count: int
    alpha: float = 0.5
    training_rounds_seen: int = 0
    use_logits: bool = False
    calibration: dict = field(default_factory=dict)
    _trainer: SgdTrainer | None = field(default=None, repr=False)

    @property
    def input_width(self) -> int:
        return self.model.input_width


@dataclass
class Verdict:
    dmc: float
    alpha: float
    owned: bool
    per_class_accuracy: np.ndarray
    n_fingerprints: int

    def to_dict(self) -> dict:
        return {
            "dmc": self.dmc,
            "alpha": self.alpha,
            "owned": bool(self.owned),
            "per_class_accuracy": [float(v) for v in self.per_class_accuracy],
            "n_fingerprints": self.n_fingerprints,
        }


def new_detector(
    task_class_count: int,
    key_class_count: int,
    rng: np.random.Generator,
    hidden_width: int | None = None,
) -> Detector:
    """Detector MLP: one ReLU hidden layer, 4x the input width by default."""
    hidden = hidden_width if hidden_width is not None else 4 * task_class_count
    model = init_model((task_class_count, hidden, key_class_count), rng)
    return Detector(model=model, key_class_count=key_class_count)


def as_query_fn(model_or_fn: MlpModel | QueryFn, use_logits: bool = False) -> QueryFn:
    """Normalize a local model or a callable into a black-box query function."""
    if isinstance(model_or_fn, MlpModel):
        model = model_or_fn
        if use_logits:
            from .nn import forward

            return lambda batch: forward(model, batch)
        return lambda batch: predict_proba(model, batch)
    return model_or_fn


def extract_features(
    model_or_fn: MlpModel | QueryFn,
    fingerprints: np.ndarray,
    labels: np.ndarray | None = None,
    use_logits: bool = False,
) -> FeatureMatrix:
    """Query the model on every fingerprint and stack the outputs.

    Only forward outputs are used; passing a bare query function instead of
    a model is fully supported (and is all verification ever needs).
    """
    query = as_query_fn(model_or_fn, use_logits)
    feats = np.asarray(query(np.asarray(fingerprints, dtype=np.float32)))
    if feats.ndim != 2 or len(feats) != len(fingerprints):
        raise ShapeError(f"query returned shape {feats.shape}")
    if labels is None:
        labels = np.zeros(len(feats), dtype=np.int64)
    return FeatureMatrix(features=feats, labels=labels, distributions=not use_logits)


def train_detector(
    det: Detector,
    feats: FeatureMatrix,
    epochs: int,
    lr: float,
    rng: np.random.Generator,
    momentum: float = 0.9,
    batch_size: int = 32,
) -> Detector:
    """Warm-start SGD on the current round's feature matrix.

    The optimizer state persists across calls, so per-round training keeps
    refining the same detector as the global model evolves.
    """
    if len(feats) == 0:
        raise ValueError("empty feature matrix")
    if len(np.unique(feats.labels)) < 2:
        raise ValueError("detector training needs features from >= 2 classes")
    if feats.features.shape[1] != det.input_width:
        raise ShapeError(
            f"feature width {feats.features.shape[1]} != detector input "
            f"{det.input_width}"
        )
    if det._trainer is None or det._trainer.model is not det.model:
        det._trainer = SgdTrainer(
            det.model, lr=lr, momentum=momentum, batch_size=batch_size
        )
    det._trainer.lr = lr
    for _ in range(epochs):
        det._trainer.epoch(feats.features, feats.labels, rng)
    det.training_rounds_seen += 1
    return det


def detector_accuracy(det: Detector, feats: FeatureMatrix) -> float:
    preds = predict_proba(det.model, feats.features).argmax(axis=1)
    return float((preds == feats.labels).mean())


def calibrate_alpha(
    det: Detector,
    protected_runs: list[float],
    nonip_runs: list[float],
    attacked_runs: list[float],
) -> float:
    """Midpoint threshold between the non-IP band and the protected band.

    The upper anchor is the worst DMC among protected runs and
    attacked-but-still-usable runs; the lower anchor is the best non-IP
    DMC. The result is clamped inside (1/c, 1) and the inputs are kept on
    the detector for audit.
    """
    for name, runs in (
        ("protected", protected_runs),
        ("non-IP", nonip_runs),
        ("attacked", attacked_runs),
    ):
        if not runs:
            raise ValueError(f"need at least one {name} DMC value")
    nonip_max = float(max(nonip_runs))
    protected_min = float(min(list(protected_runs) + list(attacked_runs)))
    if nonip_max >= protected_min:
        raise CalibrationError(nonip_max, protected_min)
    alpha = (nonip_max + protected_min) / 2.0
    chance = 1.0 / det.key_class_count
    alpha = min(max(alpha, np.nextafter(chance, 1.0)), np.nextafter(1.0, 0.0))
    det.alpha = float(alpha)
    det.calibration = {
        "protected_runs": [float(v) for v in protected_runs],
        "nonip_runs": [float(v) for v in nonip_runs],
        "attacked_runs": [float(v) for v in attacked_runs],
        "nonip_max": nonip_max,
        "protected_min": protected_min,
        "alpha": det.alpha,
    }
    return det.alpha


def verify(
    det: Detector,
    suspect_forward: MlpModel | QueryFn,
    fingerprints: np.ndarray,
    targets: np.ndarray,
) -> Verdict:
    """Black-box ownership check of a suspect model.

    Queries the suspect on every fingerprint, classifies the resulting
    distributions, and claims ownership when the detector accuracy against
    the assigned labels reaches alpha.
    """
    targets = np.asarray(targets, dtype=np.int64)
    feats = extract_features(
        suspect_forward, fingerprints, targets, use_logits=det.use_logits
    )
    if feats.features.shape[1] != det.input_width:
        raise ShapeError(
            f"suspect returned width {feats.features.shape[1]}, "
            f"detector expects {det.input_width}"
        )
    preds = predict_proba(det.model, feats.features).argmax(axis=1)
    correct = preds == targets
    dmc = float(correct.mean())
    per_class = np.zeros(det.key_class_count, dtype=np.float64)
    for k in range(det.key_class_count):
        mask = targets == k
        per_class[k] = float(correct[mask].mean()) if mask.any() else 0.0
    return Verdict(
        dmc=dmc,
        alpha=det.alpha,
        owned=dmc >= det.alpha,
        per_class_accuracy=per_class,
        n_fingerprints=len(targets),
    )
