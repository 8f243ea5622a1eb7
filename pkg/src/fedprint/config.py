"""Experiment configuration: one versioned JSON document describes a run.

Three independent seed streams (train / fingerprint / attack) keep the
copyright side-task from ever touching training randomness; that isolation
is what makes protected and unprotected runs bit-identical on the main
task.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSpec:
    kind: str = "blobs"  # blobs | idx
    classes: int = 10
    train_per_class: int = 200
    eval_per_class: int = 50
    dim: int = 96
    spread: float = 0.1
    pair_gap: float = 0.5
    images_path: str | None = None
    labels_path: str | None = None


@dataclass
class PartitionSpec:
    kind: str = "iid"  # iid | dirichlet
    beta: float = 0.5


@dataclass
class FingerprintSpec:
    epsilon: float = 0.08
    iters: int = 50
    step: float | None = None  # default epsilon / 10
    start_policy: str = "fixed-round"
    start_fraction: float = 0.3
    start_round: int | None = None
    knee_fraction: float = 0.25
    key_kind: str = "structured-noise"
    n: int = 200
    c: int = 10


@dataclass
class DetectorSpec:
    hidden_width: int | None = None  # default 4 * task classes
    epochs: int = 20
    lr: float = 0.1
    use_logits: bool = False


@dataclass
class CalibrationSpec:
    nonip_models: int = 3
    nonip_rounds: int = 40
    attack_prune_fractions: tuple = (0.3, 0.5, 0.7)
    attack_ftune_epochs: int = 20
    usable_gmc_drop: float = 0.05


@dataclass
class AttackSpec:
    """One entry of the attack sweep list."""

    kind: str  # prune | fine-tune | adaptive | collab
    params: dict = field(default_factory=dict)


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    clients: int = 5
    rounds: int = 80
    local_epochs: int = 1
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 32
    hidden_layers: list[int] = field(default_factory=lambda: [128, 64])
    fingerprint: FingerprintSpec = field(default_factory=FingerprintSpec)
    detector: DetectorSpec = field(default_factory=DetectorSpec)
    calibration: CalibrationSpec = field(default_factory=CalibrationSpec)
    attacks: list[AttackSpec] = field(default_factory=list)
    seed_train: int = 1
    seed_fingerprint: int = 2
    seed_attack: int = 3
    protect: bool = True
    isolate_streams: bool = True
    weighted_aggregation: bool = False
    malicious_fraction: float = 0.0
    schema: int = SCHEMA_VERSION

    def __post_init__(self) -> None:
        if self.fingerprint.c < 2:
            raise ConfigError(f"key class count must be >= 2, got {self.fingerprint.c}")
        seeds = (self.seed_train, self.seed_fingerprint, self.seed_attack)
        if len(set(seeds)) != 3:
            raise ConfigError(f"seed streams must be independent, got {seeds}")
        if self.schema != SCHEMA_VERSION:
            raise ConfigError(
                f"unsupported schema version {self.schema}, expected {SCHEMA_VERSION}"
            )

    @property
    def architecture(self) -> tuple[int, ...]:
        return (self.dataset.dim, *self.hidden_layers, self.dataset.classes)

    def fingerprint_start_round(self) -> int:
        fp = self.fingerprint
        if fp.start_round is not None:
            return fp.start_round
        return int(fp.start_fraction * self.rounds)


def to_dict(config: ExperimentConfig) -> dict:
    return asdict(config)


def to_json(config: ExperimentConfig, indent: int = 2) -> str:
    return json.dumps(to_dict(config), indent=indent, sort_keys=True)


def from_dict(doc: dict) -> ExperimentConfig:
    doc = dict(doc)
    try:
        nested = {
            "dataset": DatasetSpec,
            "partition": PartitionSpec,
            "fingerprint": FingerprintSpec,
            "detector": DetectorSpec,
            "calibration": CalibrationSpec,
        }
        for key, cls in nested.items():
            if key in doc and isinstance(doc[key], dict):
                doc[key] = cls(**doc[key])
        if "attacks" in doc:
            doc["attacks"] = [
                AttackSpec(**a) if isinstance(a, dict) else a for a in doc["attacks"]
            ]
        return ExperimentConfig(**doc)
    except TypeError as exc:
        raise ConfigError(f"bad config document: {exc}") from exc


def from_json(text: str) -> ExperimentConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    return from_dict(doc)


def load(path: str) -> ExperimentConfig:
    with open(path) as fh:
        return from_json(fh.read())


def save(config: ExperimentConfig, path: str) -> None:
    with open(path, "w") as fh:
        fh.write(to_json(config))
        fh.write("\n")
