"""Command-line entry point.

Usage::

    cmap-lab <subcommand> --config cfg.json [--set key.path=value ...] [--workers N]

Every invocation writes into ``<runs root>/<timestamp>-<config hash>/``. The
runs root is ``runs`` under the working directory unless ``CMAP_LAB_RUNS_DIR``
is set. Exit codes: 0 success, 1 validation error, 2 runtime error, 3 failed
verification.
"""
from __future__ import annotations

import argparse
import inspect
import json
import os
import shutil
import subprocess
import sys
import time
from pathlib import Path

from . import __version__
from . import experiments as ex
from .config import ConfigError, apply_overrides, config_hash, from_dict, to_dict
from .numerics import NumericsError

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3

COMMANDS = {
    "gen-data": (ex.GenDataConfig, ex.run_gen_data),
    "train-cm": (ex.TrainCmConfig, ex.run_train_cm),
    "train-clf": (ex.TrainClfConfig, ex.run_train_clf),
    "attack": (ex.AttackRunConfig, ex.run_attack),
    "purify": (ex.PurifyRunConfig, ex.run_purify),
    "eval": (ex.EvalConfig, ex.run_eval),
    "verify-theorem": (ex.TheoremRunConfig, ex.run_verify_theorem),
    "verify-prop": (ex.PropRunConfig, ex.run_verify_prop),
    "observe": (ex.ObserveConfig, ex.run_observe),
    "ablate": (ex.AblateConfig, ex.run_ablate),
}
VERIFY_COMMANDS = ("verify-theorem", "verify-prop")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cmap-lab", description="Consistency-model adversarial purification experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND", parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name, help=f"run {name}")
        s.add_argument("--config", required=True, metavar="PATH", help="JSON config file")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", dest="overrides",
                       help="dotted-key override; VALUE is parsed as JSON when possible")
        s.add_argument("--workers", type=int, default=1, help="worker processes (results do not depend on it)")
    return p


def code_version() -> str:
    here = Path(__file__).resolve().parent
    try:
        desc = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                              capture_output=True, text=True, timeout=10)
        if desc.returncode == 0 and desc.stdout.strip():
            return f"{__version__}+g{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def runs_root() -> Path:
    return Path(os.environ.get("CMAP_LAB_RUNS_DIR", "runs"))


def new_run_dir(effective: dict) -> Path:
    root = runs_root()
    root.mkdir(parents=True, exist_ok=True)
    base = f"{time.strftime('%Y%m%d-%H%M%S')}-{config_hash(effective)}"
    path, n = root / base, 1
    while True:
        try:
            path.mkdir()
            return path
        except FileExistsError:
            n += 1
            path = root / f"{base}-{n}"


def _seeds(obj, prefix="") -> dict:
    out = {}
    if isinstance(obj, dict):
        for k, v in obj.items():
            key = f"{prefix}.{k}" if prefix else k
            if k == "seed":
                out[key] = v
            else:
                out.update(_seeds(v, key))
    return out


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    cls, runner = COMMANDS[args.command]
    if args.workers < 1:
        print("error: --workers must be at least 1", file=sys.stderr)
        return EXIT_VALIDATION
    cfg_path = Path(args.config)
    try:
        raw = cfg_path.read_bytes()
    except OSError as exc:
        print(f"error: --config {args.config}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        data = json.loads(raw)
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        cfg = from_dict(cls, apply_overrides(data, args.overrides))
        effective = to_dict(cfg)
    except (json.JSONDecodeError, ConfigError, NumericsError) as exc:
        print(f"error: --config {args.config}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION

    out = new_run_dir(effective)
    shutil.copyfile(cfg_path, out / "config.json")
    (out / "effective_config.json").write_text(json.dumps(effective, indent=2, sort_keys=True) + "\n")
    record = {"run_id": out.name, "command": args.command, "overrides": args.overrides,
              "workers": args.workers, "code_version": code_version(), "seeds": _seeds(effective)}
    start = time.time()
    kwargs = {"workers": args.workers} if "workers" in inspect.signature(runner).parameters else {}
    code, files = EXIT_OK, []
    try:
        passed, files = runner(cfg, out, **kwargs)
        if args.command in VERIFY_COMMANDS and not passed:
            code = EXIT_VERIFY
        record["status"] = "ok" if code == EXIT_OK else "verification-failed"
    except (ConfigError, NumericsError) as exc:
        code = EXIT_VALIDATION
        record.update(status="validation-error", error=str(exc))
    except Exception as exc:  # noqa: BLE001 - reported through the exit code
        code = EXIT_RUNTIME
        record.update(status="runtime-error", error=f"{type(exc).__name__}: {exc}")
    record["duration_s"] = time.time() - start
    record["exit_code"] = code
    manifest = ["config.json", "effective_config.json"] + [str(Path(f).relative_to(out)) for f in files]
    record["files"] = [m for m in manifest if (out / m).exists()]
    (out / "run_record.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    if code == EXIT_OK or code == EXIT_VERIFY:
        print(out)
    if "error" in record:
        print(f"error: {record['error']}", file=sys.stderr)
    return code


def entry() -> None:
    sys.exit(main())
