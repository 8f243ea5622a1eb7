"""Adversary harness: fine-tuning, pruning, adversarial retraining, collusion.

Every attack takes the protected model by value and returns a modified
copy; the protected artifact itself is never touched. Attack RNG comes
from a dedicated seed stream so attack sweeps cannot perturb training or
fingerprinting results.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .fingerprint import signed_gradient_examples
from .nn import MlpModel, SgdTrainer, predict_proba

COLLAB_MODES = ("up", "up+ftune", "up+prune")


@dataclass
class AttackResult:
    attack_name: str
    params: dict
    gmc_before: float
    gmc_after: float
    dmc_att: float
    owned_after: bool

    def __post_init__(self) -> None:
        for name in ("gmc_before", "gmc_after", "dmc_att"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def to_dict(self) -> dict:
        return {
            "attack": self.attack_name,
            "params": self.params,
            "gmc_before": self.gmc_before,
            "gmc_after": self.gmc_after,
            "dmc_att": self.dmc_att,
            "owned_after": bool(self.owned_after),
        }


def fine_tune(
    model: MlpModel,
    data: Dataset,
    fraction: float,
    epochs: int,
    lr: float,
    seed: int = 0,
    momentum: float = 0.0,
    batch_size: int = 32,
) -> MlpModel:
    """Continue SGD on a seeded random fraction of the given data."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF7]))
    n = max(1, int(fraction * len(data)))
    if len(data) == 0:
        raise ValueError("empty dataset")
    idx = rng.choice(len(data), size=n, replace=False)
    subset = data.subset(idx)
    tuned = model.copy()
    trainer = SgdTrainer(tuned, lr=lr, momentum=momentum, batch_size=batch_size)
    for _ in range(epochs):
        trainer.epoch(subset.samples, subset.labels, rng)
    return tuned


def prune(model: MlpModel, fraction: float, per_layer: bool = False) -> MlpModel:
    """Zero the smallest-magnitude weights (biases exempt).

    Global mode ranks all weight entries together and zeroes exactly
    floor(fraction * n) of them; ties break by flat index order. Per-layer
    mode applies the same rule within each weight matrix.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    pruned = model.copy()
    mats = [w for w, _ in pruned.params.layers]
    if per_layer:
        for w in mats:
            k = int(fraction * w.size)
            if k == 0:
                continue
            order = np.argsort(np.abs(w.ravel()), kind="stable")
            w.ravel()[order[:k]] = 0.0
        return pruned
    flat = np.concatenate([w.ravel() for w in mats])
    k = int(fraction * flat.size)
    if k == 0:
        return pruned
    order = np.argsort(np.abs(flat), kind="stable")
    flat[order[:k]] = 0.0
    offset = 0
    for w in mats:
        w.ravel()[:] = flat[offset : offset + w.size]
        offset += w.size
    return pruned


def adaptive_retrain(
    model: MlpModel,
    variant: int,
    train_fraction: Dataset | None,
    key_samples: Dataset | None,
    epochs: int,
    lr: float,
    epsilon: float,
    seed: int = 0,
    batch_size: int = 32,
) -> MlpModel:
    """Adversarial-retraining attacks with increasing attacker knowledge.

    Variant 1: the attacker holds a fraction of real training data and
    retrains on adversarial examples built from it (true labels).
    Variant 2: the attacker holds the key samples; lacking the owner's
    secret target assignment, it self-labels them with the model's own
    clean predictions and adversarially retrains on those.
    Variant 3: variant 2 followed by clean retraining on the data fraction.
    """
    if variant not in (1, 2, 3):
        raise ValueError(f"variant must be 1, 2, or 3, got {variant}")
    if variant in (1, 3) and train_fraction is None:
        raise ValueError(f"variant {variant} needs a training-data fraction")
    if variant in (2, 3) and key_samples is None:
        raise ValueError(f"variant {variant} needs the key samples")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xADA, variant]))
    attacked = model.copy()
    trainer = SgdTrainer(attacked, lr=lr, momentum=0.0, batch_size=batch_size)

    if variant == 1:
        samples, labels = train_fraction.samples, train_fraction.labels
        for _ in range(epochs):
            adv = signed_gradient_examples(attacked, samples, labels, epsilon)
            trainer.epoch(adv, labels, rng)
        return attacked

    # Variants 2 and 3 start from key-sample adversarial retraining.
    keys = key_samples.samples
    self_labels = predict_proba(attacked, keys).argmax(axis=1)
    for _ in range(epochs):
        adv = signed_gradient_examples(attacked, keys, self_labels, epsilon)
        trainer.epoch(adv, self_labels, rng)
    if variant == 2:
        return attacked

    clean = SgdTrainer(attacked, lr=lr, momentum=0.0, batch_size=batch_size)
    for _ in range(epochs):
        clean.epoch(train_fraction.samples, train_fraction.labels, rng)
    return attacked


@dataclass
class CollabSpec:
    """Configuration of a collaborative (upstream + downstream) attack."""

    mode: str
    malicious_fraction: float
    ftune_epochs: int = 100
    ftune_fraction: float = 0.1
    ftune_lr: float = 0.01
    prune_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in COLLAB_MODES:
            raise ValueError(f"unknown collab mode {self.mode!r}")
        if self.malicious_fraction >= 1.0:
            warnings.warn(
                "malicious_fraction leaves no honest client; running anyway",
                stacklevel=2,
            )


def mark_malicious(clients: list, malicious_fraction: float) -> list[int]:
    """Flag the first ceil(fraction * K) clients as adaptive retrainers."""
    from .federation import ADAPTIVE_RETRAINER

    k = int(np.ceil(malicious_fraction * len(clients)))
    flagged = []
    for client in clients[:k]:
        client.malicious_role = ADAPTIVE_RETRAINER
        flagged.append(client.id)
    return flagged


def downstream_attack(model: MlpModel, spec: CollabSpec, eval_set: Dataset) -> MlpModel:
    """Apply the configured downstream stage to a final global model."""
    if spec.mode == "up":
        return model.copy()
    if spec.mode == "up+ftune":
        return fine_tune(
            model,
            eval_set,
            spec.ftune_fraction,
            spec.ftune_epochs,
            spec.ftune_lr,
            seed=spec.seed,
        )
    return prune(model, spec.prune_fraction)
