"""Command-line interface.

Subcommands: train, fingerprint, verify, attack, sweep, report. Exit codes:
0 success, 1 usage error, 2 runtime error, 3 verification negative (only
with `verify --expect-owned`).

`verify` accepts either a serialized suspect model or an external query
command template; the template is run with `{input}` replaced by a CSV of
fingerprint samples and must print one distribution row per sample, which
keeps the whole check black-box.
"""

from __future__ import annotations

import argparse
import json
import os
import shlex
import subprocess
import sys
import tempfile

import numpy as np

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_NOT_OWNED = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so we control exit codes."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fedprint", description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the full protected pipeline")
    p_train.add_argument("--config", required=True, help="experiment config JSON")
    p_train.add_argument("--out", required=True, help="output directory")
    p_train.add_argument(
        "--no-protect", action="store_true", help="plain federated training only"
    )

    p_fp = sub.add_parser(
        "fingerprint", help="one-shot fingerprint generation for a saved model"
    )
    p_fp.add_argument("--config", required=True)
    p_fp.add_argument("--model", required=True, help="FRW1 model file")
    p_fp.add_argument("--out", required=True, help="fingerprint output file (.frf)")

    p_ver = sub.add_parser("verify", help="black-box ownership verification")
    p_ver.add_argument("--detector", required=True, help="FRD1 detector file")
    p_ver.add_argument("--fingerprints", required=True, help="FRF1 fingerprint file")
    group = p_ver.add_mutually_exclusive_group(required=True)
    group.add_argument("--suspect", help="FRW1 model file of the suspect")
    group.add_argument(
        "--query-cmd",
        help="command template queried instead of a local model; "
        "{input} is replaced by a CSV of samples, stdout must be "
        "one distribution row per sample",
    )
    p_ver.add_argument(
        "--expect-owned",
        action="store_true",
        help="exit 3 when the verdict is not owned",
    )

    p_att = sub.add_parser("attack", help="attack a finished run and re-verify")
    p_att.add_argument("--run", required=True, help="run directory from `train`")
    p_att.add_argument(
        "--kind", required=True, choices=["prune", "fine-tune", "adaptive", "collab"]
    )
    p_att.add_argument("--fraction", type=float, help="prune/fine-tune fraction")
    p_att.add_argument("--epochs", type=int)
    p_att.add_argument("--variant", type=int, choices=[1, 2, 3])
    p_att.add_argument("--mode", choices=["up", "up+ftune", "up+prune"])
    p_att.add_argument("--malicious-fraction", type=float)

    p_sweep = sub.add_parser("sweep", help="run the config's attack list")
    p_sweep.add_argument("--run", required=True, help="run directory from `train`")

    p_rep = sub.add_parser("report", help="render figures and CSV summaries")
    p_rep.add_argument("--run", required=True)
    p_rep.add_argument("--out", help="defaults to the run directory")

    return parser


def _load_config(path: str):
    from .config import load

    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    return load(path)


def _cmd_train(args) -> int:
    from dataclasses import replace

    from .harness import run_experiment

    config = _load_config(args.config)
    if args.no_protect:
        config = replace(config, protect=False)
    result = run_experiment(config, out_dir=args.out)
    print(
        json.dumps(
            {
                "out": args.out,
                "final_gmc": result.final_gmc,
                "final_dmc": result.final_dmc,
                "alpha": result.alpha,
                "rounds": len(result.rounds) - 1,
            },
            indent=2,
        )
    )
    return EXIT_OK


def _cmd_fingerprint(args) -> int:
    from . import serial
    from .fingerprint import checkpoint, generate, new_fingerprint_set
    from .harness import build_keys

    config = _load_config(args.config)
    model = serial.load_model(args.model)
    keys = build_keys(config)
    rng = np.random.default_rng(
        np.random.SeedSequence([config.seed_fingerprint, 0xF0])
    )
    fp_spec = config.fingerprint
    fp = new_fingerprint_set(keys, fp_spec.epsilon, rng)
    fp.current = generate(
        model, keys, fp.targets, fp_spec.epsilon, fp_spec.iters, fp_spec.step
    )
    checkpoint(model, fp)
    serial.save_fingerprints(fp, args.out)
    print(
        json.dumps(
            {"out": args.out, "count": len(fp), "valid_fraction": fp.valid_fraction}
        )
    )
    return EXIT_OK


def _query_command_fn(template: str):
    """Black-box query via an external command producing distribution rows."""

    def query(batch: np.ndarray) -> np.ndarray:
        with tempfile.NamedTemporaryFile(
            "w", suffix=".csv", delete=False
        ) as tmp:
            np.savetxt(tmp, batch, delimiter=",", fmt="%.9g")
            tmp_path = tmp.name
        try:
            argv = [
                part.replace("{input}", tmp_path) for part in shlex.split(template)
            ]
            proc = subprocess.run(
                argv, capture_output=True, text=True, check=True
            )
            rows = np.loadtxt(proc.stdout.splitlines(), delimiter=",", ndmin=2)
            return rows.astype(np.float32)
        finally:
            os.unlink(tmp_path)

    return query


def _cmd_verify(args) -> int:
    from . import serial
    from .detector import verify

    det = serial.load_detector(args.detector)
    fp = serial.load_fingerprints(args.fingerprints)
    if args.suspect:
        suspect = serial.load_model(args.suspect)
    else:
        suspect = _query_command_fn(args.query_cmd)
    verdict = verify(det, suspect, fp.current, fp.targets)
    print(json.dumps(verdict.to_dict(), indent=2))
    if args.expect_owned and not verdict.owned:
        return EXIT_NOT_OWNED
    return EXIT_OK


def _attack_params(args) -> dict:
    params = {}
    if args.fraction is not None:
        params["fraction"] = args.fraction
    if args.epochs is not None:
        params["epochs"] = args.epochs
    if args.variant is not None:
        params["variant"] = args.variant
    if args.mode is not None:
        params["mode"] = args.mode
    if args.malicious_fraction is not None:
        params["malicious_fraction"] = args.malicious_fraction
    return params


def _cmd_attack(args) -> int:
    from .harness import load_run, run_attack

    result = load_run(args.run)
    attack_result = run_attack(result, args.kind, **_attack_params(args))
    print(json.dumps(attack_result.to_dict(), indent=2))
    return EXIT_OK


def _cmd_sweep(args) -> int:
    from .harness import SWEEP_FILE, load_run, run_attack_sweep, write_sweep_csv

    result = load_run(args.run)
    if not result.config.attacks:
        raise UsageError("config has no attack list to sweep")
    results = run_attack_sweep(result, result.config.attacks)
    path = os.path.join(args.run, SWEEP_FILE)
    write_sweep_csv(results, path)
    print(json.dumps({"sweep": path, "attacks": len(results)}, indent=2))
    return EXIT_OK


def _cmd_report(args) -> int:
    from .report import render_run

    written = render_run(args.run, args.out)
    print(json.dumps({"out": args.out or args.run, "files": written}, indent=2))
    return EXIT_OK


_COMMANDS = {
    "train": _cmd_train,
    "fingerprint": _cmd_fingerprint,
    "verify": _cmd_verify,
    "attack": _cmd_attack,
    "sweep": _cmd_sweep,
    "report": _cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
