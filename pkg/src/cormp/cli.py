"""``cormp`` command line: gen-data, train, eval, selftest.

Settings come from built-in defaults, then an optional ``--config`` file
(``key=value`` lines or a JSON object), then explicit flags.  Every command
writes its resolved settings to ``config.txt`` and ``config.json`` in its
output directory.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from . import dataset as ds
from . import pipeline as pl
from .errors import (CheckpointError, ContractViolation, DataError, DimensionError,
                     OptimizationError)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _seeds(value):
    if isinstance(value, (list, tuple)):
        return [int(v) for v in value]
    return [int(v) for v in str(value).replace(" ", "").split(",") if v]


def _bool(value):
    if isinstance(value, bool):
        return value
    return str(value).strip().lower() in ("1", "true", "yes", "on")


# per command: setting -> (converter, default); None default means required
SETTINGS = {
    "gen-data": {"n": (int, 200), "seed": (int, 0), "out": (str, None), "force": (_bool, False)},
    "train": {"mode": (str, "pc"), "budget": (int, 200_000), "data": (str, None),
              "out": (str, None), "seeds": (_seeds, [0, 1, 2]), "lr": (float, 1e-4),
              "n_targets": (int, 1), "obs_max": (int, 5), "ae_epochs": (int, 70),
              "force": (_bool, False)},
    "eval": {"models": (str, None), "data": (str, None), "out": (str, None),
             "trials": (str, ""), "threads": (int, 1), "force": (_bool, False)},
    "selftest": {},
}


def parse_config_text(text):
    """Parse ``key=value`` lines (``#`` comments) or a JSON object."""
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            data = json.loads(stripped)
        except json.JSONDecodeError as exc:
            raise UsageError(f"config is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise UsageError("JSON config must be an object")
        return data
    data = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        data[key.replace("-", "_")] = value
    return data


def format_config_text(settings):
    lines = []
    for key in sorted(settings):
        v = settings[key]
        if isinstance(v, (list, tuple)):
            v = ",".join(str(x) for x in v)
        lines.append(f"{key}={v}")
    return "\n".join(lines) + "\n"


def resolve(command, flags, config_path=None):
    """Merge defaults, config file and flags into one settings dict."""
    schema = SETTINGS[command]
    settings = {k: d for k, (_, d) in schema.items()}
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise UsageError(f"config file {path} does not exist")
        file_values = parse_config_text(path.read_text())
        unknown = sorted(set(file_values) - set(schema))
        if unknown:
            raise UsageError(f"unknown setting(s) for {command}: {', '.join(unknown)}")
        settings.update(file_values)
    settings.update({k: v for k, v in flags.items() if k in schema and v is not None})
    resolved = {}
    for key, (conv, _) in schema.items():
        value = settings[key]
        if value is None:
            raise UsageError(f"{command}: --{key.replace('_', '-')} is required")
        try:
            resolved[key] = conv(value)
        except (TypeError, ValueError):
            raise UsageError(f"{command}: invalid value {value!r} for {key}") from None
    return resolved


def write_resolved(out_dir, command, settings):
    record = dict(settings, command=command, version=__version__)
    out = Path(out_dir)
    (out / "config.txt").write_text(format_config_text(record))
    (out / "config.json").write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")


def prepare_out(path, force):
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise UsageError(f"{out} exists and is not a directory")
    if out.is_dir() and any(out.iterdir()) and not force:
        raise UsageError(f"{out} is not empty; pass --force to write into it")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _err(msg):
    print(f"cormp: {msg}", file=sys.stderr)


# -- commands -------------------------------------------------------------------------

def cmd_gen_data(s):
    out = prepare_out(s["out"], s["force"])
    if s["n"] < 1:
        raise UsageError("--n must be at least 1")
    t0 = time.perf_counter()
    data = ds.build_dataset(s["n"], s["seed"])
    ds.save_dataset(data, out)
    write_resolved(out, "gen-data", s)
    kinds = {k: sum(d.correction_kind == k for d in data.demos) for k in ("push", "no_correction",
                                                                          "pull")}
    tests = {k: sum(t.split(",")[2] == k for t in (out / "test_contexts.csv").read_text()
                    .splitlines()[1:]) for k in kinds}
    print(f"demonstrations: {len(data.demos)} ({', '.join(f'{k} {v}' for k, v in kinds.items())})")
    print(f"images: {data.n_images}")
    print(f"test scenes: {len(data.test_scenes)} ({', '.join(f'{k} {v}' for k, v in tests.items())})")
    print(f"train/validation split: {len(data.train_indices)}/{len(data.validation_indices)}")
    print(f"fingerprint: {data.fingerprint}")
    print(f"written to {out} in {time.perf_counter() - t0:.1f} s")
    return EXIT_OK


def cmd_train(s):
    if s["mode"] not in pl.MODES:
        raise UsageError(f"--mode must be one of {', '.join(pl.MODES)}")
    data = ds.load_dataset(s["data"])
    out = prepare_out(s["out"], s["force"])
    try:
        config = pl.ExperimentConfig(context_mode=s["mode"], budget=s["budget"],
                                     seeds=tuple(s["seeds"]), dataset_path=str(s["data"]),
                                     lr=s["lr"], n_targets=s["n_targets"], obs_max=s["obs_max"],
                                     ae_epochs=s["ae_epochs"])
    except ContractViolation as exc:
        raise UsageError(str(exc)) from None
    write_resolved(out, "train", s)
    t0 = time.perf_counter()

    def progress(name, step, row):
        print(f"  {name:<8} step {step:>8d}  train {row[1]:+.4f}  val {row[2]:+.4f}",
              file=sys.stderr, flush=True)

    def ae_progress(rec):
        print(f"  ae epoch {rec['epoch']:>3d}  train mse {rec['train_mse']:.5f}  "
              f"test mse {rec['test_mse']:.5f}", file=sys.stderr, flush=True)

    sets, ae_history = pl.train_all(data, config, progress, ae_progress)
    manifest = pl.save_model_sets(sets, out, config, data.fingerprint)
    with open(out / "loss_curves.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["seed", "model", "step", "train_loss", "validation_nll"])
        for ms in sets:
            for key, prim in ms.primitives.items():
                for step, tr, val in prim.curve:
                    writer.writerow([ms.seed, prim.name, step, repr(tr), repr(val)])
    if ae_history:
        with open(out / "ae_history.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "train_mse", "test_mse"])
            for rec in ae_history:
                writer.writerow([rec["epoch"], repr(rec["train_mse"]), repr(rec["test_mse"])])
    lines = [f"mode: {config.context_mode}",
             f"segmented parameter sum: {config.segmented_parameter_count()}"]
    for ms in sets:
        parts = ", ".join(f"{k} {p.model.parameter_count}" for k, p in ms.primitives.items())
        lines.append(f"seed {ms.seed}: {ms.parameter_count} ({parts})")
    if config.context_mode == "mono":
        ratio = sets[0].parameter_count / config.segmented_parameter_count() - 1
        lines.append(f"monolithic width {config.monolithic_width()}, "
                     f"{100 * ratio:+.3f}% vs segmented sum")
    (out / "parameters.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    print(f"trained {len(sets)} seed(s) in {time.perf_counter() - t0:.1f} s; "
          f"checkpoints in {out} (fingerprint {manifest['dataset_fingerprint'][:12]})")
    return EXIT_OK


def cmd_eval(s):
    data = ds.load_dataset(s["data"])
    sets, manifest = pl.load_model_sets(s["models"], data.fingerprint)
    scenes = ds.read_test_contexts(s["trials"], data.config) if s["trials"] else data.test_scenes
    if not scenes:
        raise DataError("no test scenes: the dataset has none and --trials was not given")
    if s["threads"] < 1:
        raise UsageError("--threads must be at least 1")
    out = prepare_out(s["out"], s["force"])
    write_resolved(out, "eval", s)
    rep, _ = pl.run_evaluation(sets, scenes, out, data.config, s["threads"],
                               data.header["n_points"])
    print(pl.summary_text(rep), end="")
    aborted = [r for r in rep.trials if not r.executed]
    if aborted:
        _err(f"{len(aborted)} trial(s) could not be executed")
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_selftest(_s):
    from . import selftest
    return EXIT_OK if selftest.run() == 0 else EXIT_NUMERIC


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "selftest": cmd_selftest}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="cormp", description="Segmented corrective movement primitives.")
    p.add_argument("--version", action="version", version=f"cormp {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress details")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate demonstrations and test contexts")
    g.add_argument("--n", type=int, help="number of demonstrations (200)")
    g.add_argument("--seed", type=int, help="dataset seed (0)")
    g.add_argument("--out", help="output directory")

    t = sub.add_parser("train", help="train the primitives of one mode")
    t.add_argument("--mode", choices=pl.MODES, help="pc, ae or mono (pc)")
    t.add_argument("--budget", type=int, help="updates per CNMP (200000)")
    t.add_argument("--data", help="dataset directory")
    t.add_argument("--out", help="output directory for checkpoints")
    t.add_argument("--seeds", help="comma separated training seeds (0,1,2)")
    t.add_argument("--lr", type=float, help="CNMP learning rate (1e-4)")
    t.add_argument("--n-targets", dest="n_targets", type=int, help="targets per update (1)")
    t.add_argument("--obs-max", dest="obs_max", type=int, help="max observations per update (5)")
    t.add_argument("--ae-epochs", dest="ae_epochs", type=int, help="autoencoder epochs (70)")

    e = sub.add_parser("eval", help="run the trial suite and write the metrics report")
    e.add_argument("--models", help="directory written by train")
    e.add_argument("--data", help="dataset directory")
    e.add_argument("--out", help="report directory")
    e.add_argument("--trials", help="CSV of test contexts overriding the dataset's")
    e.add_argument("--threads", type=int, help="worker threads for trials (1)")

    for parser in (g, t, e):
        parser.add_argument("--config", help="key=value or JSON settings file")
        parser.add_argument("--force", action="store_const", const=True,
                            help="write into a non-empty output directory")
    sub.add_parser("selftest", help="run gradient, invariance and simulator checks")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
        settings = resolve(args.command, flags, getattr(args, "config", None))
        return COMMANDS[args.command](settings)
    except UsageError as exc:
        _err(f"usage: {exc}")
        return EXIT_USAGE
    except (DataError, CheckpointError, DimensionError, OSError) as exc:
        _err(f"data error: {exc}")
        return EXIT_DATA
    except (OptimizationError, ArithmeticError) as exc:
        _err(f"numeric failure: {exc}")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
