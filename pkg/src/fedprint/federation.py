"""Horizontal federated learning round loop.

One server, K clients, full participation. Each round the server
distributes the global parameters, every client runs local minibatch SGD
on its shard, and the server aggregates the uploads with an unweighted
element-wise mean. Client RNG streams are derived by seed-splitting on
(train seed, client id), so runs are bit-reproducible and adding or
removing a client never perturbs the others.

Mean accumulation happens in float64 and is cast back to float32, which
keeps aggregation deterministic and makes "K identical uploads average to
exactly that upload" hold bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .nn import MlpModel, ModelParams, SgdTrainer, accuracy

HONEST = "honest"
ADAPTIVE_RETRAINER = "adaptive-retrainer"


class EmptyShardError(ValueError):
    pass


class ArchitectureMismatchError(ValueError):
    pass


@dataclass
class ClientState:
    """One federated client: shard view plus local training knobs."""

    id: int
    dataset: Dataset
    indices: np.ndarray
    epochs_per_round: int
    lr: float
    momentum: float = 0.0
    batch_size: int = 32
    weight_decay: float = 0.0
    malicious_role: str = HONEST
    attack_epsilon: float = 0.08
    rng: np.random.Generator = field(default=None, repr=False)  # type: ignore[assignment]

    def bind_rng(self, train_seed: int) -> None:
        """Derive this client's persistent RNG stream from (seed, id)."""
        self.rng = np.random.default_rng(
            np.random.SeedSequence([train_seed, self.id, 0xC11])
        )

    @property
    def samples(self) -> np.ndarray:
        return self.dataset.samples[self.indices]

    @property
    def labels(self) -> np.ndarray:
        return self.dataset.labels[self.indices]


@dataclass
class ServerState:
    global_params: ModelParams
    round: int = 0

    @property
    def model(self) -> MlpModel:
        return MlpModel(self.global_params)


@dataclass
class RoundRecord:
    round: int
    gmc: float
    update_rate: float
    fingerprint_events: list = field(default_factory=list)

    def __post_init__(self) -> None:
        if not 0.0 <= self.gmc <= 1.0:
            raise ValueError(f"gmc {self.gmc} outside [0, 1]")


def local_update(
    client: ClientState,
    global_params: ModelParams,
    rng: np.random.Generator | None = None,
) -> ModelParams:
    """Copy the global model, train locally, return the new parameters.

    An adaptive-retrainer client replaces its clean minibatches with
    signed-gradient adversarial examples built from its own shard (same
    labels), the standard adversarial-training recipe.
    """
    if len(client.indices) == 0:
        raise EmptyShardError(f"client {client.id} has no data")
    rng = rng if rng is not None else client.rng
    model = MlpModel(global_params.copy())
    trainer = SgdTrainer(
        model,
        lr=client.lr,
        momentum=client.momentum,
        batch_size=client.batch_size,
        weight_decay=client.weight_decay,
    )
    samples, labels = client.samples, client.labels
    if client.malicious_role == ADAPTIVE_RETRAINER:
        from .fingerprint import signed_gradient_examples

        for _ in range(client.epochs_per_round):
            adv = signed_gradient_examples(
                model, samples, labels, client.attack_epsilon
            )
            trainer.epoch(adv, labels, rng)
    else:
        for _ in range(client.epochs_per_round):
            trainer.epoch(samples, labels, rng)
    return model.params


def aggregate(uploads: list[ModelParams], weights: list[float] | None = None) -> ModelParams:
    """Element-wise mean of the uploads, in upload order.

    Pass per-client weights for data-size-weighted averaging; default is
    the plain unweighted mean.
    """
    if not uploads:
        raise ValueError("no uploads to aggregate")
    arch = uploads[0].architecture
    for i, up in enumerate(uploads):
        if up.architecture != arch:
            raise ArchitectureMismatchError(
                f"upload {i} architecture {up.architecture} != {arch}"
            )
    if weights is None:
        scale = [1.0] * len(uploads)
        divisor = float(len(uploads))
    else:
        if len(weights) != len(uploads):
            raise ValueError("one weight per upload required")
        scale = [float(w) for w in weights]
        divisor = float(sum(weights))

    layers = []
    for li in range(len(arch) - 1):
        w_acc = np.zeros(uploads[0].layers[li][0].shape, dtype=np.float64)
        b_acc = np.zeros(uploads[0].layers[li][1].shape, dtype=np.float64)
        for up, s in zip(uploads, scale):
            w_acc += up.layers[li][0].astype(np.float64) * s
            b_acc += up.layers[li][1].astype(np.float64) * s
        layers.append(
            ((w_acc / divisor).astype(np.float32), (b_acc / divisor).astype(np.float32))
        )
    return ModelParams(layers)


def update_rate(old: ModelParams, new: ModelParams) -> float:
    """Relative L2 parameter change ||w_new - w_old|| / ||w_old||."""
    old_flat = old.flat().astype(np.float64)
    new_flat = new.flat().astype(np.float64)
    denom = np.linalg.norm(old_flat)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(new_flat - old_flat) / denom)


def run_round(
    server: ServerState,
    clients: list[ClientState],
    eval_set: Dataset,
    weighted: bool = False,
) -> RoundRecord:
    """Distribute, train, aggregate, evaluate; advances server.round."""
    old_params = server.global_params
    uploads = [local_update(c, old_params) for c in clients]
    weights = [float(len(c.indices)) for c in clients] if weighted else None
    new_params = aggregate(uploads, weights)
    rate = update_rate(old_params, new_params)
    server.global_params = new_params
    server.round += 1
    gmc = accuracy(server.model, eval_set.samples, eval_set.labels)
    return RoundRecord(round=server.round, gmc=gmc, update_rate=rate)


def make_clients(
    dataset: Dataset,
    assignments: list[np.ndarray],
    epochs_per_round: int,
    lr: float,
    momentum: float,
    batch_size: int,
    train_seed: int,
    weight_decay: float = 0.0,
) -> list[ClientState]:
    clients = []
    for cid, indices in enumerate(assignments):
        client = ClientState(
            id=cid,
            dataset=dataset,
            indices=np.asarray(indices),
            epochs_per_round=epochs_per_round,
            lr=lr,
            momentum=momentum,
            batch_size=batch_size,
            weight_decay=weight_decay,
        )
        client.bind_rng(train_seed)
        clients.append(client)
    return clients
