"""Adversarial model fingerprints with per-round adaptive enhancement.

A fingerprint starts from a secret key sample and accumulates a bounded
adversarial perturbation that drives the current global model to a chosen
target class. The optimizer takes iterative signed-gradient steps on a
penalized targeted objective

    epsilon * ||perturbation||_2 + targeted cross-entropy,

clamps the total perturbation to +-epsilon per coordinate around the base
key (and the sample to [0, 1]), and stops each fingerprint early as soon
as its argmax hits the target, keeping perturbations minimal.

Because federated training keeps moving the global model, a fingerprint
that was valid in one round can silently go stale in the next. The
validity checkpoint re-tests every fingerprint against the current model,
and enhancement re-perturbs only the stale ones under the same epsilon
budget, so the set tracks the model round by round.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .data import Dataset
from .nn import MlpModel, ShapeError, backward, one_hot, predict_proba

START_POLICIES = ("fixed-round", "update-rate-knee")


@dataclass
class FingerprintSet:
    """Key samples plus their accumulated adversarial state."""

    base_keys: Dataset
    current: np.ndarray
    targets: np.ndarray
    valid: np.ndarray
    birth_round: np.ndarray
    epsilon: float
    start_round: int = 0

    def __post_init__(self) -> None:
        n = len(self.base_keys)
        self.current = np.asarray(self.current, dtype=np.float32)
        self.targets = np.asarray(self.targets, dtype=np.int64)
        self.valid = np.asarray(self.valid, dtype=bool)
        self.birth_round = np.asarray(self.birth_round, dtype=np.int64)
        for name, arr in (
            ("current", self.current),
            ("targets", self.targets),
            ("valid", self.valid),
            ("birth_round", self.birth_round),
        ):
            if len(arr) != n:
                raise ValueError(f"{name} length {len(arr)} != {n} keys")
        if self.current.shape != self.base_keys.samples.shape:
            raise ShapeError("current perturbation shape differs from keys")

    def __len__(self) -> int:
        return len(self.targets)

    @property
    def valid_fraction(self) -> float:
        return float(self.valid.mean()) if len(self.valid) else 0.0

    def copy(self) -> "FingerprintSet":
        return FingerprintSet(
            self.base_keys,
            self.current.copy(),
            self.targets.copy(),
            self.valid.copy(),
            self.birth_round.copy(),
            self.epsilon,
            self.start_round,
        )


@dataclass
class FingerprintMetrics:
    interclass_mse: float
    valid_fraction: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.valid_fraction <= 1.0:
            raise ValueError("valid_fraction outside [0, 1]")
        if self.interclass_mse < 0.0:
            raise ValueError("interclass_mse negative")


def new_fingerprint_set(
    keys: Dataset,
    epsilon: float,
    rng: np.random.Generator,
    start_round: int = 0,
    shuffle_targets: bool = False,
) -> FingerprintSet:
    """Fresh set: current == keys, targets default to the key-class labels.

    With shuffle_targets the class-to-target assignment is a secret seeded
    permutation instead of the identity.
    """
    targets = keys.labels.copy()
    if shuffle_targets:
        perm = rng.permutation(keys.class_count)
        targets = perm[targets]
    n = len(keys)
    return FingerprintSet(
        base_keys=keys,
        current=keys.samples.copy(),
        targets=targets,
        valid=np.zeros(n, dtype=bool),
        birth_round=np.full(n, start_round, dtype=np.int64),
        epsilon=float(epsilon),
        start_round=start_round,
    )


def _clamp(adv: np.ndarray, base: np.ndarray, epsilon: float) -> np.ndarray:
    """Clamp to the epsilon box around base and to [0, 1], exactly.

    float32 `base + epsilon` rounds, so a plain clip can overshoot the box
    by an ulp; the correction loop nudges any such coordinate back inside
    (float64 differences of float32 values are exact, so the check is too).
    """
    np.clip(adv, base - epsilon, base + epsilon, out=adv)
    np.clip(adv, 0.0, 1.0, out=adv)
    diff = adv.astype(np.float64) - base.astype(np.float64)
    over = diff > epsilon
    under = diff < -epsilon
    while over.any() or under.any():
        adv[over] = np.nextafter(adv[over], -np.inf, dtype=np.float32)
        adv[under] = np.nextafter(adv[under], np.inf, dtype=np.float32)
        diff = adv.astype(np.float64) - base.astype(np.float64)
        over = diff > epsilon
        under = diff < -epsilon
    return adv


def generate(
    model: MlpModel,
    keys: Dataset,
    targets: np.ndarray,
    epsilon: float,
    iters: int,
    step: float | None = None,
    targeted: bool = True,
    start: np.ndarray | None = None,
) -> np.ndarray:
    """Iterative signed-gradient attack from the key samples.

    Targeted mode walks down the cross-entropy toward `targets`; untargeted
    mode walks up the cross-entropy of the given (original) labels. Both
    include the epsilon-scaled perturbation-norm penalty in the descent
    direction, clamp the running perturbation to +-epsilon around the keys,
    and freeze each sample once its goal is met.

    Args:
        model: model snapshot to attack (read-only).
        keys: base key samples.
        targets: per-sample target labels (targeted) or original labels to
            escape (untargeted).
        epsilon: per-coordinate perturbation bound; 0 returns keys as-is.
        iters: maximum optimization iterations.
        step: per-iteration step size, default epsilon / 10.
        start: optional warm-start samples (defaults to the keys).

    Returns:
        float32 adversarial samples, same shape as keys.samples.
    """
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    targets = np.asarray(targets, dtype=np.int64)
    if len(targets) != len(keys):
        raise ShapeError(f"{len(targets)} targets for {len(keys)} keys")
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= model.class_count:
        raise ValueError("targets outside model class range")

    base = keys.samples
    adv = (start if start is not None else base).astype(np.float32).copy()
    if adv.shape != base.shape:
        raise ShapeError("warm-start shape differs from keys")
    if epsilon == 0.0 or iters == 0:
        return _clamp(adv, base, epsilon)

    step = float(step) if step is not None else epsilon / 10.0
    labels = one_hot(targets, model.class_count)
    active = np.arange(len(keys))
    for _ in range(iters):
        preds = predict_proba(model, adv[active]).argmax(axis=1)
        done = preds == targets[active] if targeted else preds != targets[active]
        active = active[~done]
        if len(active) == 0:
            break
        _, _, grad_in = backward(model, adv[active], labels[active])
        # backward returns the batch-mean gradient; the objective is
        # per-sample, so undo the 1/rows scaling before mixing terms.
        grad_in = grad_in * np.float32(len(active))
        rho = (adv[active] - base[active]).astype(np.float64)
        norms = np.linalg.norm(rho.reshape(len(active), -1), axis=1)
        norms = np.maximum(norms, 1e-12)
        penalty = (epsilon * rho / norms[:, None]).astype(np.float32)
        direction = penalty + grad_in if targeted else penalty - grad_in
        adv[active] = adv[active] - step * np.sign(direction)
        adv[active] = _clamp(adv[active], base[active], epsilon)
    return adv


def signed_gradient_examples(
    model: MlpModel,
    samples: np.ndarray,
    labels: np.ndarray,
    epsilon: float,
    iters: int = 1,
) -> np.ndarray:
    """Untargeted adversarial examples for arbitrary labeled samples.

    Single-step by default (the classic sign attack); used by adversarial
    retraining attackers rather than by fingerprint generation.
    """
    adv = samples.astype(np.float32).copy()
    targets = one_hot(np.asarray(labels, dtype=np.int64), model.class_count)
    step = epsilon / iters
    for _ in range(iters):
        _, _, grad_in = backward(model, adv, targets)
        adv = adv + step * np.sign(grad_in)
        np.clip(adv, samples - epsilon, samples + epsilon, out=adv)
        np.clip(adv, 0.0, 1.0, out=adv)
    return adv


def checkpoint(model: MlpModel, fp: FingerprintSet) -> np.ndarray:
    """Re-test validity: does each fingerprint still hit its target label."""
    preds = predict_proba(model, fp.current).argmax(axis=1)
    fp.valid = preds == fp.targets
    return fp.valid


def enhance(
    model: MlpModel,
    fp: FingerprintSet,
    iters: int,
    step: float | None = None,
    current_round: int | None = None,
) -> FingerprintSet:
    """Re-perturb stale fingerprints against the current model.

    Valid fingerprints pass through bit-identical; invalid ones receive
    additional signed-gradient iterations warm-started from their current
    state, still clamped to the +-epsilon box around the base keys. The
    validity flags are refreshed afterwards, so the valid fraction can only
    grow within one call.
    """
    stale = np.flatnonzero(~fp.valid)
    if len(stale) == 0:
        return fp
    subset_keys = fp.base_keys.subset(stale)
    fp.current[stale] = generate(
        model,
        subset_keys,
        fp.targets[stale],
        fp.epsilon,
        iters,
        step,
        start=fp.current[stale],
    )
    if current_round is not None:
        fp.birth_round[stale] = current_round
    checkpoint(model, fp)
    return fp


def should_start(
    records: list,
    policy: str = "fixed-round",
    total_rounds: int | None = None,
    start_fraction: float = 0.3,
    start_round: int | None = None,
    knee_fraction: float = 0.25,
    smooth_window: int = 5,
) -> bool:
    """Decide whether fingerprinting should begin given the round history.

    fixed-round: current round >= start_round (default floor of
    start_fraction * total_rounds). update-rate-knee: the smoothed update
    rate has fallen below knee_fraction of its observed peak.
    """
    if policy not in START_POLICIES:
        raise ValueError(f"unknown start policy {policy!r}")
    if not records:
        raise ValueError("need at least one round record")
    current = records[-1].round
    if current <= 0:
        return False
    if policy == "fixed-round":
        if start_round is None:
            if total_rounds is None:
                raise ValueError("fixed-round policy needs total_rounds or start_round")
            start_round = int(start_fraction * total_rounds)
        return current >= start_round
    rates = np.array([r.update_rate for r in records], dtype=np.float64)
    if len(rates) < smooth_window:
        return False
    kernel = np.ones(smooth_window) / smooth_window
    smoothed = np.convolve(rates, kernel, mode="valid")
    peak = smoothed.max()
    if peak <= 0:
        return False
    return bool(smoothed[-1] < knee_fraction * peak)


def interclass_mse(fp: FingerprintSet) -> float:
    """Mean squared distance between class-mean fingerprint vectors.

    Averaged over unordered pairs of target classes present in the set.
    """
    classes = np.unique(fp.targets)
    if len(classes) < 2:
        raise ValueError("interclass MSE needs at least two target classes")
    means = {
        int(k): fp.current[fp.targets == k].mean(axis=0, dtype=np.float64)
        for k in classes
    }
    pair_values = [
        float(np.mean((means[a] - means[b]) ** 2))
        for a, b in combinations(sorted(means), 2)
    ]
    return float(np.mean(pair_values))


def metrics(fp: FingerprintSet) -> FingerprintMetrics:
    return FingerprintMetrics(
        interclass_mse=interclass_mse(fp), valid_fraction=fp.valid_fraction
    )
