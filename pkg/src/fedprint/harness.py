"""Experiment orchestration: train, fingerprint, calibrate, attack, persist.

A run executes the full pipeline round by round: clients train and upload,
the server aggregates, and (once the start policy fires) the server clones
the fresh global model, refreshes the fingerprints against it, and trains
the detector on their output distributions. The copyright side-task reads
the global parameters but never writes them, and draws randomness from its
own seed stream, so the main-task trajectory is bit-identical with
protection on or off.

Everything a run produces lands in one output directory: the final model
(`model.frw`), fingerprints (`fingerprints.frf`), detector
(`detector.frd`), the config echo, a JSON-lines round log, the report, and
attack-sweep CSVs. Reports are deterministic; wall-clock timings go to a
separate sidecar so reruns stay byte-identical.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import serial
from .attacks import (
    AttackResult,
    CollabSpec,
    adaptive_retrain,
    downstream_attack,
    fine_tune,
    mark_malicious,
    prune,
)
from .config import AttackSpec, ExperimentConfig, to_dict
from .data import Dataset, make_key_samples, partition_dirichlet, partition_iid, synth_blobs
from .detector import (
    Detector,
    calibrate_alpha,
    detector_accuracy,
    extract_features,
    new_detector,
    train_detector,
    verify,
)
from .federation import ServerState, make_clients, run_round
from .fingerprint import (
    FingerprintSet,
    checkpoint,
    enhance,
    generate,
    interclass_mse,
    new_fingerprint_set,
    should_start,
)
from .nn import MlpModel, SgdTrainer, accuracy, init_model, init_params

MODEL_FILE = "model.frw"
FINGERPRINT_FILE = "fingerprints.frf"
DETECTOR_FILE = "detector.frd"
CONFIG_FILE = "config.json"
REPORT_FILE = "report.json"
ROUNDS_FILE = "rounds.jsonl"
TIMINGS_FILE = "timings.json"
SWEEP_FILE = "sweep.csv"


class PhaseError(RuntimeError):
    """An experiment phase failed; carries the phase name."""

    def __init__(self, phase: str, cause: BaseException):
        super().__init__(f"phase {phase!r} failed: {cause}")
        self.phase = phase
        self.cause = cause


@dataclass
class RoundLog:
    """One JSON-serializable row of the run log."""

    round: int
    gmc: float
    update_rate: float
    fingerprint_valid_count: int = 0
    dmc: float | None = None
    valid_fraction: float | None = None
    interclass_mse: float | None = None
    enhanced: int = 0

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "gmc": self.gmc,
            "update_rate": self.update_rate,
            "fingerprint_valid_count": self.fingerprint_valid_count,
            "dmc": self.dmc,
            "valid_fraction": self.valid_fraction,
            "interclass_mse": self.interclass_mse,
            "enhanced": self.enhanced,
        }


@dataclass
class ExperimentResult:
    """Everything a finished run leaves in memory."""

    config: ExperimentConfig
    model: MlpModel
    train_set: Dataset
    eval_set: Dataset
    rounds: list[RoundLog]
    fingerprints: FingerprintSet | None
    detector: Detector | None
    alpha: float | None
    final_gmc: float
    final_dmc: float | None
    attack_results: list[AttackResult] = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    out_dir: str | None = None

    def report_dict(self) -> dict:
        return {
            "config": to_dict(self.config),
            "rounds": [r.to_dict() for r in self.rounds],
            "final_gmc": self.final_gmc,
            "final_dmc": self.final_dmc,
            "alpha": self.alpha,
            "calibration": self.detector.calibration if self.detector else {},
            "attacks": [a.to_dict() for a in self.attack_results],
            "isolate_streams": self.config.isolate_streams,
        }


def build_task(config: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Materialize the train/eval datasets described by the config."""
    ds = config.dataset
    if ds.kind == "blobs":
        total = ds.train_per_class + ds.eval_per_class
        full = synth_blobs(
            ds.classes,
            total,
            ds.dim,
            ds.spread,
            config.seed_train,
            name="blobs",
            pair_gap=ds.pair_gap,
        )
        train_idx, eval_idx = [], []
        for k in range(ds.classes):
            start = k * total
            train_idx.extend(range(start, start + ds.train_per_class))
            eval_idx.extend(range(start + ds.train_per_class, start + total))
        return (
            full.subset(np.array(train_idx), "blobs-train"),
            full.subset(np.array(eval_idx), "blobs-eval"),
        )
    if ds.kind == "idx":
        from .data import load_idx

        full = load_idx(ds.images_path, ds.labels_path)
        rng = np.random.default_rng(np.random.SeedSequence([config.seed_train, 0x1D]))
        order = rng.permutation(len(full))
        n_eval = min(ds.eval_per_class * ds.classes, len(full) // 5)
        return (
            full.subset(np.sort(order[n_eval:]), "idx-train"),
            full.subset(np.sort(order[:n_eval]), "idx-eval"),
        )
    raise ValueError(f"unknown dataset kind {ds.kind!r}")


def build_partition(config: ExperimentConfig, train_set: Dataset):
    if config.partition.kind == "iid":
        return partition_iid(train_set, config.clients, config.seed_train)
    if config.partition.kind == "dirichlet":
        return partition_dirichlet(
            train_set, config.clients, config.partition.beta, config.seed_train
        )
    raise ValueError(f"unknown partition kind {config.partition.kind!r}")


def build_keys(config: ExperimentConfig) -> Dataset:
    fp = config.fingerprint
    return make_key_samples(
        fp.key_kind, fp.n, fp.c, config.dataset.dim, config.seed_fingerprint
    )


class _Stopwatch:
    def __init__(self) -> None:
        self.totals: dict[str, float] = {}

    def add(self, phase: str, start: float) -> None:
        self.totals[phase] = self.totals.get(phase, 0.0) + (time.perf_counter() - start)


def run_experiment(
    config: ExperimentConfig, out_dir: str | None = None
) -> ExperimentResult:
    """Execute the full pipeline described by the config.

    Returns the in-memory result; when out_dir is given, also persists the
    model, fingerprints, detector, config echo, round log, report, and
    timing sidecar there.
    """
    watch = _Stopwatch()
    phase = "setup"
    try:
        train_set, eval_set = build_task(config)
        partition = build_partition(config, train_set)
        train_rng = np.random.default_rng(
            np.random.SeedSequence([config.seed_train, 0x90])
        )
        fp_rng = (
            np.random.default_rng(np.random.SeedSequence([config.seed_fingerprint, 0xF0]))
            if config.isolate_streams
            else train_rng
        )
        server = ServerState(init_params(config.architecture, train_rng))
        clients = make_clients(
            train_set,
            partition.assignments,
            config.local_epochs,
            config.lr,
            config.momentum,
            config.batch_size,
            config.seed_train,
            config.weight_decay,
        )
        if not config.isolate_streams:
            # Debug mode: every client and the fingerprint side share one
            # sequential stream, so side-task work perturbs training.
            for c in clients:
                c.rng = train_rng
        if config.malicious_fraction > 0.0:
            mark_malicious(clients, config.malicious_fraction)
            for c in clients:
                c.attack_epsilon = config.fingerprint.epsilon

        fingerprints: FingerprintSet | None = None
        detector: Detector | None = None
        keys = build_keys(config) if config.protect else None

        start_gmc = accuracy(server.model, eval_set.samples, eval_set.labels)
        rounds: list[RoundLog] = [RoundLog(round=0, gmc=start_gmc, update_rate=0.0)]
        records = []

        phase = "federated-training"
        for _ in range(config.rounds):
            t0 = time.perf_counter()
            record = run_round(
                server, clients, eval_set, weighted=config.weighted_aggregation
            )
            records.append(record)
            watch.add("fl_rounds", t0)
            log = RoundLog(
                round=record.round, gmc=record.gmc, update_rate=record.update_rate
            )

            if config.protect and should_start(
                records,
                policy=config.fingerprint.start_policy,
                total_rounds=config.rounds,
                start_fraction=config.fingerprint.start_fraction,
                start_round=config.fingerprint.start_round,
                knee_fraction=config.fingerprint.knee_fraction,
            ):
                t0 = time.perf_counter()
                snapshot = MlpModel(server.global_params)
                fp_spec = config.fingerprint
                if fingerprints is None:
                    fingerprints = new_fingerprint_set(
                        keys, fp_spec.epsilon, fp_rng, start_round=record.round
                    )
                    fingerprints.current = generate(
                        snapshot,
                        keys,
                        fingerprints.targets,
                        fp_spec.epsilon,
                        fp_spec.iters,
                        fp_spec.step,
                    )
                    checkpoint(snapshot, fingerprints)
                    log.enhanced = len(fingerprints)
                else:
                    checkpoint(snapshot, fingerprints)
                    stale = int((~fingerprints.valid).sum())
                    enhance(
                        snapshot,
                        fingerprints,
                        fp_spec.iters,
                        fp_spec.step,
                        current_round=record.round,
                    )
                    log.enhanced = stale
                watch.add("fingerprint", t0)

                t0 = time.perf_counter()
                if detector is None:
                    detector = new_detector(
                        config.dataset.classes,
                        fp_spec.c,
                        fp_rng,
                        config.detector.hidden_width,
                    )
                    detector.use_logits = config.detector.use_logits
                feats = extract_features(
                    snapshot,
                    fingerprints.current,
                    fingerprints.targets,
                    use_logits=detector.use_logits,
                )
                train_detector(
                    detector,
                    feats,
                    config.detector.epochs,
                    config.detector.lr,
                    fp_rng,
                )
                log.dmc = detector_accuracy(detector, feats)
                log.valid_fraction = fingerprints.valid_fraction
                log.fingerprint_valid_count = int(fingerprints.valid.sum())
                log.interclass_mse = interclass_mse(fingerprints)
                watch.add("detector", t0)

            rounds.append(log)

        final_gmc = rounds[-1].gmc
        final_dmc = None
        alpha = None

        if config.protect and detector is not None and fingerprints is not None:
            phase = "calibration"
            t0 = time.perf_counter()
            final_model = server.model
            final_dmc = verify(
                detector, final_model, fingerprints.current, fingerprints.targets
            ).dmc
            alpha = _calibrate(
                config, detector, fingerprints, train_set, eval_set, final_model,
                final_dmc,
            )
            watch.add("calibration", t0)

        result = ExperimentResult(
            config=config,
            model=server.model,
            train_set=train_set,
            eval_set=eval_set,
            rounds=rounds,
            fingerprints=fingerprints,
            detector=detector,
            alpha=alpha,
            final_gmc=final_gmc,
            final_dmc=final_dmc,
            timings=dict(watch.totals),
            out_dir=out_dir,
        )

        if config.attacks and config.protect:
            phase = "attack-sweep"
            t0 = time.perf_counter()
            result.attack_results = run_attack_sweep(result, config.attacks)
            watch.add("attacks", t0)
            result.timings = dict(watch.totals)

        if out_dir is not None:
            phase = "persist"
            persist(result, out_dir)
        return result
    except PhaseError:
        raise
    except Exception as exc:
        if out_dir is not None:
            _persist_failure(out_dir, phase, exc)
        raise PhaseError(phase, exc) from exc


def _persist_failure(out_dir: str, phase: str, exc: BaseException) -> None:
    try:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, REPORT_FILE), "w") as fh:
            json.dump(
                {"failed_phase": phase, "error": str(exc), "partial": True},
                fh,
                indent=2,
                sort_keys=True,
            )
            fh.write("\n")
    except OSError:
        pass


def _central_model(
    train_set: Dataset,
    architecture: tuple[int, ...],
    epochs: int,
    lr: float,
    momentum: float,
    batch_size: int,
    seed: int,
) -> MlpModel:
    """Train a standalone (non-federated) model on the full training set."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xCE]))
    model = init_model(architecture, rng)
    trainer = SgdTrainer(model, lr=lr, momentum=momentum, batch_size=batch_size)
    for _ in range(epochs):
        trainer.epoch(train_set.samples, train_set.labels, rng)
    return model


def train_nonip_model(config: ExperimentConfig, seed: int) -> MlpModel:
    """An independently trained model with no ownership claim."""
    train_set, _ = build_task(config)
    return _central_model(
        train_set,
        config.architecture,
        config.calibration.nonip_rounds,
        config.lr,
        config.momentum,
        config.batch_size,
        seed,
    )


def _calibrate(
    config: ExperimentConfig,
    detector: Detector,
    fingerprints: FingerprintSet,
    train_set: Dataset,
    eval_set: Dataset,
    final_model: MlpModel,
    final_dmc: float,
) -> float:
    cal = config.calibration
    nonip = []
    for i in range(cal.nonip_models):
        model = train_nonip_model(config, seed=config.seed_attack + 101 + i)
        nonip.append(
            verify(detector, model, fingerprints.current, fingerprints.targets).dmc
        )

    # Attacked-but-still-usable anchors: the prune ladder plus light
    # fine-tuning, keeping only states whose accuracy stays usable.
    gmc_before = accuracy(final_model, eval_set.samples, eval_set.labels)
    attacked = []
    for fraction in cal.attack_prune_fractions:
        pruned = prune(final_model, fraction)
        if (
            accuracy(pruned, eval_set.samples, eval_set.labels)
            >= gmc_before - cal.usable_gmc_drop
        ):
            attacked.append(
                verify(
                    detector, pruned, fingerprints.current, fingerprints.targets
                ).dmc
            )
    tuned = fine_tune(
        final_model,
        eval_set,
        0.1,
        cal.attack_ftune_epochs,
        config.lr / 5.0,
        seed=config.seed_attack,
    )
    if (
        accuracy(tuned, eval_set.samples, eval_set.labels)
        >= gmc_before - cal.usable_gmc_drop
    ):
        attacked.append(
            verify(detector, tuned, fingerprints.current, fingerprints.targets).dmc
        )
    if not attacked:
        attacked = [final_dmc]
    return calibrate_alpha(detector, [final_dmc], nonip, attacked)


def run_attack_sweep(
    result: ExperimentResult, specs: list[AttackSpec]
) -> list[AttackResult]:
    """Apply each configured attack to the protected model and verify."""
    out = []
    for spec in specs:
        out.append(run_attack(result, spec.kind, **spec.params))
    return out


def run_attack(result: ExperimentResult, kind: str, **params) -> AttackResult:
    """One attack on a finished protected run, verified against its detector."""
    if result.detector is None or result.fingerprints is None:
        raise ValueError("attack harness needs a protected run")
    config = result.config
    model = result.model
    eval_set = result.eval_set
    gmc_before = accuracy(model, eval_set.samples, eval_set.labels)

    if kind == "prune":
        fraction = float(params.get("fraction", 0.5))
        attacked = prune(model, fraction, per_layer=params.get("per_layer", False))
        shown = {"fraction": fraction}
    elif kind == "fine-tune":
        fraction = float(params.get("fraction", 0.1))
        epochs = int(params.get("epochs", 100))
        lr = float(params.get("lr", config.lr / 5.0))
        seed = int(params.get("seed", config.seed_attack))
        attacked = fine_tune(model, eval_set, fraction, epochs, lr, seed=seed)
        shown = {"fraction": fraction, "epochs": epochs, "lr": lr}
    elif kind == "adaptive":
        variant = int(params.get("variant", 1))
        epochs = int(params.get("epochs", 30))
        lr = float(params.get("lr", config.lr / 5.0))
        seed = int(params.get("seed", config.seed_attack))
        frac = float(params.get("data_fraction", 0.1))
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))
        n = max(1, int(frac * len(result.train_set)))
        idx = rng.choice(len(result.train_set), size=n, replace=False)
        data_fraction = result.train_set.subset(idx)
        attacked = adaptive_retrain(
            model,
            variant,
            data_fraction,
            result.fingerprints.base_keys,
            epochs,
            lr,
            config.fingerprint.epsilon,
            seed=seed,
        )
        shown = {"variant": variant, "epochs": epochs, "data_fraction": frac}
    elif kind == "collab":
        spec = CollabSpec(
            mode=params.get("mode", "up"),
            malicious_fraction=float(params.get("malicious_fraction", 0.4)),
            prune_fraction=float(params.get("prune_fraction", 0.5)),
            ftune_epochs=int(params.get("ftune_epochs", 100)),
            seed=int(params.get("seed", config.seed_attack)),
        )
        return collab_attack(config, spec)
    else:
        raise ValueError(f"unknown attack kind {kind!r}")

    gmc_after = accuracy(attacked, eval_set.samples, eval_set.labels)
    verdict = verify(
        result.detector,
        attacked,
        result.fingerprints.current,
        result.fingerprints.targets,
    )
    return AttackResult(
        attack_name=kind,
        params=shown,
        gmc_before=gmc_before,
        gmc_after=gmc_after,
        dmc_att=verdict.dmc,
        owned_after=verdict.owned,
    )


def collab_attack(config: ExperimentConfig, spec: CollabSpec) -> AttackResult:
    """Collaborative attack: malicious upstream clients, optional downstream.

    Reruns the protected pipeline with the requested fraction of clients
    performing adversarial retraining during training, then applies the
    downstream stage to the final global model and verifies ownership.
    """
    attacked_config = replace(config, malicious_fraction=spec.malicious_fraction,
                              attacks=[])
    run = run_experiment(attacked_config)
    eval_set = run.eval_set
    gmc_before = accuracy(run.model, eval_set.samples, eval_set.labels)
    final = downstream_attack(run.model, spec, eval_set)
    gmc_after = accuracy(final, eval_set.samples, eval_set.labels)
    verdict = verify(
        run.detector, final, run.fingerprints.current, run.fingerprints.targets
    )
    return AttackResult(
        attack_name=f"collab-{spec.mode}",
        params={
            "mode": spec.mode,
            "malicious_fraction": spec.malicious_fraction,
        },
        gmc_before=gmc_before,
        gmc_after=gmc_after,
        dmc_att=verdict.dmc,
        owned_after=verdict.owned,
    )


def compare_fidelity(config: ExperimentConfig) -> tuple[list[float], list[float]]:
    """GMC traces with and without the copyright side-task, same seeds."""
    protected = run_experiment(replace(config, protect=True, attacks=[]))
    plain = run_experiment(replace(config, protect=False, attacks=[]))
    return (
        [r.gmc for r in protected.rounds],
        [r.gmc for r in plain.rounds],
    )


def persist(result: ExperimentResult, out_dir: str) -> None:
    """Write every artifact of a finished run into out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    serial.save_model(result.model, os.path.join(out_dir, MODEL_FILE))
    if result.fingerprints is not None:
        serial.save_fingerprints(
            result.fingerprints, os.path.join(out_dir, FINGERPRINT_FILE)
        )
    if result.detector is not None:
        serial.save_detector(result.detector, os.path.join(out_dir, DETECTOR_FILE))
    from .config import save as save_config

    save_config(result.config, os.path.join(out_dir, CONFIG_FILE))
    with open(os.path.join(out_dir, ROUNDS_FILE), "w") as fh:
        for log in result.rounds:
            fh.write(json.dumps(log.to_dict(), sort_keys=True))
            fh.write("\n")
    with open(os.path.join(out_dir, REPORT_FILE), "w") as fh:
        json.dump(result.report_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, TIMINGS_FILE), "w") as fh:
        json.dump(result.timings, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if result.attack_results:
        write_sweep_csv(result.attack_results, os.path.join(out_dir, SWEEP_FILE))
    result.out_dir = out_dir


def write_sweep_csv(results: list[AttackResult], path: str) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["attack", "param", "gmc_before", "gmc_after", "dmc_att", "owned"]
        )
        for r in results:
            writer.writerow(
                [
                    r.attack_name,
                    json.dumps(r.params, sort_keys=True),
                    f"{r.gmc_before:.4f}",
                    f"{r.gmc_after:.4f}",
                    f"{r.dmc_att:.4f}",
                    int(r.owned_after),
                ]
            )


def load_run(out_dir: str) -> ExperimentResult:
    """Rehydrate a persisted run (rebuilding datasets from the config)."""
    from .config import load as load_config

    config = load_config(os.path.join(out_dir, CONFIG_FILE))
    model = serial.load_model(os.path.join(out_dir, MODEL_FILE))
    fingerprints = None
    det = None
    fp_path = os.path.join(out_dir, FINGERPRINT_FILE)
    det_path = os.path.join(out_dir, DETECTOR_FILE)
    if os.path.exists(fp_path):
        fingerprints = serial.load_fingerprints(fp_path)
    if os.path.exists(det_path):
        det = serial.load_detector(det_path)
    with open(os.path.join(out_dir, REPORT_FILE)) as fh:
        report = json.load(fh)
    train_set, eval_set = build_task(config)
    rounds = [
        RoundLog(
            round=row["round"],
            gmc=row["gmc"],
            update_rate=row["update_rate"],
            fingerprint_valid_count=row.get("fingerprint_valid_count", 0),
            dmc=row.get("dmc"),
            valid_fraction=row.get("valid_fraction"),
            interclass_mse=row.get("interclass_mse"),
            enhanced=row.get("enhanced", 0),
        )
        for row in report["rounds"]
    ]
    result = ExperimentResult(
        config=config,
        model=model,
        train_set=train_set,
        eval_set=eval_set,
        rounds=rounds,
        fingerprints=fingerprints,
        detector=det,
        alpha=report.get("alpha"),
        final_gmc=report["final_gmc"],
        final_dmc=report.get("final_dmc"),
        out_dir=out_dir,
    )
    if det is not None and report.get("calibration"):
        det.calibration = report["calibration"]
    return result
