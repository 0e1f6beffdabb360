"""Command-line front end: ``rpolab {gen,train,solve,sweep,figure1,check}``.

A run is described by a TOML (or JSON) config; ``--seed``, ``--out`` and
``--format`` override the file. With ``--out`` every command writes its
artifacts plus a ``manifest.json`` listing each file's sha256 and the hash of
the canonical config; without it the main artifact goes to stdout.

Exit codes: 0 success, 2 configuration error, 3 solver or certification
failure, 4 I/O error. Failures print a one-line JSON error to stderr.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import platform
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .adversarial import RewardClassSpec, duality_gap, solve_maximin, solve_minimax, theory_hyperparams
from .analysis import SweepConfig, figure1_study, gap_sweep, gnuplot_script, rate_instance, trace_gnuplot_script
from .checks import SUITES, run_suites
from .direct_opt import TrainerConfig, train
from .errors import ConfigurationError, InputError, SolverError
from .instances import feature_instance, figure1_instance, multiscale_instance, random_instance
from .policy import chosen_policy
from .preference import BanditInstance, PreferenceDataset, generate_dataset
from .rng import check_seed, make_rng

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

COMMANDS = ("gen", "train", "solve", "sweep", "figure1", "check")
EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4

# section -> key -> default; None means "no default, optional"
SCHEMA = {
    "instance": {
        "kind": "random",
        "K": 2,
        "M": 4,
        "R": 1.0,
        "d": 2,
        "seed": 0,
        "feature_scale": 1.0,
        "pairs": "all",
        "path": None,
    },
    "data": {"N": 200, "path": None},
    "gen": {},
    "train": {
        "method": "rpo",
        "beta": 1.0,
        "eta": 0.005,
        "learning_rate": 0.1,
        "steps": 1000,
        "batch": "full",
        "baseline": "chosen",
        "chosen_smoothing": 0.5,
        "epsilon_floor": 1e-12,
        "log_every": 1,
    },
    "solve": {
        "mode": "minimax",
        "hyper": "fixed",
        "beta": 1.0,
        "eta": 0.005,
        "delta": 0.1,
        "base": "chosen",
        "tol": 1e-8,
        "outer_tol": 1e-6,
        "certify_tol": 1e-4,
    },
    "sweep": {
        "N_grid": [64, 128, 256, 512, 1024, 2048, 4096, 8192, 16384],
        "seeds_per_N": 20,
        "method": "minimax",
        "hyper": "theory",
        "delta": 0.1,
        "beta": 0.1,
        "eta": 0.005,
        "base": "chosen",
        "learning_rate": 0.1,
        "steps": 500,
        "tol": 1e-8,
        "bootstrap": 200,
    },
    "figure1": {"eta": 0.005, "eta_grid": None, "beta": 1.0, "steps": 2000, "learning_rate": 0.1, "delta": 1e-4},
    "check": {"suites": list(SUITES)},
}
TOP_LEVEL = {"seed": None, "format": "json", "out": None, "command": None}
COMMAND_SECTIONS = {"gen", "train", "solve", "sweep", "figure1", "check"}
CHOICES = {
    ("instance", "kind"): ("random", "figure1", "feature", "multiscale", "rate", "file"),
    ("instance", "pairs"): ("all", "star"),
    ("train", "method"): ("rpo", "dpo"),
    ("train", "baseline"): ("chosen", "ref"),
    ("solve", "mode"): ("minimax", "maximin", "duality"),
    ("solve", "hyper"): ("fixed", "theory"),
    ("solve", "base"): ("chosen", "ref"),
    ("sweep", "method"): ("maximin", "minimax", "rpo", "dpo"),
    ("sweep", "hyper"): ("fixed", "theory"),
    ("sweep", "base"): ("chosen", "ref"),
    ("format",): ("csv", "json"),
}
NONNEGATIVE = {"eta", "delta", "chosen_smoothing"}
POSITIVE = {"beta", "learning_rate", "tol", "outer_tol", "certify_tol", "R", "epsilon_floor", "feature_scale"}
COUNTS = {"K", "M", "d", "N", "steps", "log_every", "seeds_per_N", "bootstrap"}


@dataclass
class RunConfig:
    command: str
    seed: int
    format: str = "json"
    out: str | None = None
    sections: dict = field(default_factory=dict)

    def to_dict(self):
        out = {"command": self.command, "seed": self.seed, "format": self.format}
        out.update(copy.deepcopy(self.sections))
        return out

    def canonical(self):
        """Serialized form written as ``config.json``; the manifest hashes these bytes."""
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"

    def sha256(self):
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def __getitem__(self, section):
        return self.sections[section]


def _load_source(source):
    if isinstance(source, dict):
        return copy.deepcopy(source), "<inline>"
    path = Path(source)
    text = path.read_text()
    if path.suffix == ".json":
        try:
            return json.loads(text), str(path)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"{path}: invalid JSON: {e}") from None
    try:
        return tomllib.loads(text), str(path)
    except tomllib.TOMLDecodeError as e:
        raise ConfigurationError(f"{path}: invalid TOML: {e}") from None


def _check_value(section, key, value, where):
    loc = f"{where}: [{section}] {key}"
    choices = CHOICES.get((section, key))
    if choices is not None and value not in choices:
        raise ConfigurationError(f"{loc} must be one of {list(choices)}, got {value!r}")
    if key in COUNTS and not (isinstance(value, int) and not isinstance(value, bool) and value >= 1):
        raise ConfigurationError(f"{loc} must be a positive integer")
    if key in POSITIVE and not (isinstance(value, (int, float)) and value > 0):
        raise ConfigurationError(f"{loc} must be positive")
    if key in NONNEGATIVE and not (isinstance(value, (int, float)) and value >= 0):
        raise ConfigurationError(f"{loc} must be nonnegative")
    if key == "batch" and value != "full" and not (isinstance(value, int) and value >= 1):
        raise ConfigurationError(f"{loc} must be 'full' or a positive integer")
    if key == "N_grid":
        ok = isinstance(value, list) and value and all(isinstance(n, int) and n >= 1 for n in value)
        if not ok or any(b <= a for a, b in zip(value, value[1:])):
            raise ConfigurationError(f"{loc} must be a strictly increasing list of positive integers")
    if key in ("eta_grid",) and value is not None:
        if not isinstance(value, list) or not all(isinstance(v, (int, float)) and v >= 0 for v in value):
            raise ConfigurationError(f"{loc} must be a list of nonnegative numbers")
    if key == "suites" and (not isinstance(value, list) or any(v not in SUITES for v in value)):
        raise ConfigurationError(f"{loc} must be a list drawn from {list(SUITES)}")


def parse_config(source=None, command=None, seed=None, out=None, fmt=None):
    """Validate a config (path, dict, or ``None``) and fill in defaults.

    ``command`` may come from the caller (the CLI subcommand) or from a
    top-level ``command`` key; they must agree. A config may carry at most one
    command block; the block of the selected command is created with defaults
    when absent. Unknown sections or keys raise :class:`ConfigurationError`
    naming the key and where it appeared.
    """
    raw, where = ({}, "<defaults>") if source is None else _load_source(source)
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{where}: config must be a table")
    for key in raw:
        if key not in TOP_LEVEL and key not in SCHEMA:
            raise ConfigurationError(f"{where}: unknown key '{key}' at top level")
    file_cmd = raw.get("command")
    if command is None:
        command = file_cmd
    elif file_cmd is not None and file_cmd != command:
        raise ConfigurationError(f"{where}: config is for '{file_cmd}', not '{command}'")
    if command not in COMMANDS:
        raise ConfigurationError(f"{where}: command must be one of {list(COMMANDS)}")
    blocks = [k for k in raw if k in COMMAND_SECTIONS]
    if len(blocks) > 1 or (blocks and blocks[0] != command):
        raise ConfigurationError(f"{where}: expected only a [{command}] block, found {blocks}")

    seed = raw.get("seed") if seed is None else seed
    if seed is None:
        raise ConfigurationError(f"{where}: 'seed' is required (config or --seed)")
    try:
        seed = check_seed(seed)
    except InputError as e:
        raise ConfigurationError(f"{where}: seed: {e}") from None
    fmt = raw.get("format", "json") if fmt is None else fmt
    if fmt not in CHOICES[("format",)]:
        raise ConfigurationError(f"{where}: format must be 'csv' or 'json'")

    needed = {"gen": ("instance", "data"), "train": ("instance", "data"), "solve": ("instance", "data")}
    sections = {}
    for name in needed.get(command, ()) + (command,):
        given = raw.get(name, {})
        if not isinstance(given, dict):
            raise ConfigurationError(f"{where}: [{name}] must be a table")
        for key in given:
            if key not in SCHEMA[name]:
                raise ConfigurationError(f"{where}: unknown key '{key}' in [{name}]")
        merged = {k: copy.deepcopy(v) for k, v in SCHEMA[name].items()}
        merged.update(copy.deepcopy(given))
        for key, val in merged.items():
            if val is not None:
                _check_value(name, key, val, where)
        sections[name] = {k: v for k, v in merged.items() if v is not None}
    for name in SCHEMA:
        if name in raw and name not in sections:
            raise ConfigurationError(f"{where}: [{name}] is not used by '{command}'")
    return RunConfig(command, seed, fmt, raw.get("out") if out is None else out, sections)


def dump_config(cfg):
    """Config as JSON that :func:`parse_config` maps back to an equal config."""
    return cfg.canonical()


# ---------------------------------------------------------------------------
# command bodies: each returns {filename: text} with the main artifact first


def build_instance(spec):
    kind = spec["kind"]
    if kind == "random":
        return random_instance(spec["K"], spec["M"], spec["R"], seed=spec["seed"])
    if kind == "figure1":
        return figure1_instance()
    if kind == "feature":
        return feature_instance(spec["K"], spec["M"], spec["d"], spec["R"], spec["seed"], spec["feature_scale"])
    if kind == "multiscale":
        return multiscale_instance(spec["K"], spec["M"], spec["R"], pairs=spec["pairs"])
    if kind == "rate":
        return rate_instance()
    if "path" not in spec:
        raise ConfigurationError("[instance] kind 'file' needs a path")
    return BanditInstance.from_dict(json.loads(Path(spec["path"]).read_text()))


def _dataset(cfg, inst):
    spec = cfg["data"]
    if "path" in spec:
        data = PreferenceDataset.load(spec["path"])
    else:
        data = generate_dataset(inst, spec["N"], make_rng(cfg.seed, 0), seed=cfg.seed)
    data.check_indices(inst.K, inst.M)
    return data


def _json(obj):
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def cmd_generate(cfg):
    inst = build_instance(cfg["instance"])
    data = _dataset(cfg, inst)
    return {"dataset.jsonl": data.to_jsonl(), "instance.json": _json(inst.to_dict())}


def cmd_train(cfg):
    inst = build_instance(cfg["instance"])
    data = _dataset(cfg, inst)
    t = dict(cfg["train"])
    method = t.pop("method")
    pol, trace = train(inst, data, TrainerConfig(seed=cfg.seed, **t), method)
    if cfg.format == "csv":
        files = {"trace.csv": trace.to_csv(), "trace.gp": trace_gnuplot_script("trace.csv")}
    else:
        rows = [{c: getattr(r, c) for c in r.__dataclass_fields__} for r in trace.rows]
        files = {"trace.json": _json(rows)}
    files["policy.json"] = _json(pol.to_dict())
    return files


def cmd_solve(cfg):
    inst = build_instance(cfg["instance"])
    data = _dataset(cfg, inst)
    s = cfg["solve"]
    if s["hyper"] == "theory":
        hp = theory_hyperparams(len(data), s["delta"], inst.R, inst.K, inst.M)
        beta, eta = hp.beta, hp.eta
    else:
        beta, eta = s["beta"], s["eta"]
    base = chosen_policy(data, inst) if s["base"] == "chosen" else inst.reference_policy
    cls = RewardClassSpec(inst.R)
    if s["mode"] == "minimax":
        rep = solve_minimax(inst, base, data, cls, beta, eta, s["tol"])
    elif s["mode"] == "maximin":
        rep = solve_maximin(inst, base, data, cls, beta, eta, s["tol"], s["outer_tol"])
    else:
        rep = duality_gap(inst, base, data, cls, beta, eta, s["tol"], s["outer_tol"], s["certify_tol"])
    out = rep.to_dict()
    out["beta"], out["eta"] = beta, eta
    return {"report.json": _json(out)}


def cmd_sweep(cfg):
    s = dict(cfg["sweep"])
    sc = SweepConfig(N_grid=tuple(s.pop("N_grid")), seed=cfg.seed, **s)
    res = gap_sweep(sc)
    files = {"sweep.csv": res.to_csv(), "sweep_summary.json": _json(res.summary())}
    files["sweep.gp"] = gnuplot_script("sweep.csv")
    return files


def figure1_table(report):
    lines = ["policy,pi(a),pi(b),pi(c),J,loss"]
    for r in report.rows:
        p = r["probs"]
        loss = r.get("loss", float("nan"))
        lines.append(f"{r['policy']},{p[0]:.6f},{p[1]:.6f},{p[2]:.6f},{r['J']:.6f},{loss:.6g}")
    return "\n".join(lines) + "\n"


def cmd_figure1(cfg):
    f = cfg["figure1"]
    grid = f.get("eta_grid") or [f["eta"]]
    rep = figure1_study(tuple(grid), f["beta"], f["steps"], f["learning_rate"], f["delta"])
    if cfg.format == "csv":
        return {"figure1.csv": figure1_table(rep), "figure1.json": _json(rep.to_dict())}
    return {"figure1.json": _json(rep.to_dict())}


def cmd_check(cfg):
    results = run_suites(cfg["check"]["suites"], seed=cfg.seed)
    payload = {"suites": [r.to_dict() for r in results], "passed": all(r.passed for r in results)}
    if not payload["passed"]:
        failed = [r.name for r in results if not r.passed]
        raise _SuiteFailure(f"check suites failed: {failed}", {"check.json": _json(payload)})
    return {"check.json": _json(payload)}


class _SuiteFailure(SolverError):
    def __init__(self, message, files):
        super().__init__(message)
        self.files = files


DISPATCH = {
    "gen": cmd_generate,
    "train": cmd_train,
    "solve": cmd_solve,
    "sweep": cmd_sweep,
    "figure1": cmd_figure1,
    "check": cmd_check,
}


def manifest(cfg, files):
    out = {
        "command": cfg.command,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "config_sha256": cfg.sha256(),
        "versions": {
            "rpolab": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
        "artifacts": {name: hashlib.sha256(text.encode()).hexdigest() for name, text in sorted(files.items())},
    }
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch is not None:
        out["timestamp"] = int(epoch)
    return out


def write_bundle(out_dir, cfg, files):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = dict(files)
    files["config.json"] = dump_config(cfg)
    for name, text in files.items():
        (out / name).write_text(text)
    (out / "manifest.json").write_text(_json(manifest(cfg, files)))
    return out


def _fail(code, err, details=None):
    payload = {"error": type(err).__name__, "message": str(err), "exit_code": code}
    if details:
        payload["details"] = details
    print(json.dumps(payload, sort_keys=True, default=str), file=sys.stderr)
    return code


def build_parser():
    parser = argparse.ArgumentParser(prog="rpolab", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"rpolab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "gen": "sample a preference dataset",
        "train": "train a DPO or RPO policy",
        "solve": "solve the adversarial objective",
        "sweep": "gap versus sample size",
        "figure1": "three-response study",
        "check": "run the self-check suites",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", help="TOML or JSON config file")
        p.add_argument("--seed", type=int, help="64-bit seed (overrides the config)")
        p.add_argument("--out", help="output directory for the artifact bundle")
        p.add_argument("--format", choices=("csv", "json"), help="tabular artifact format")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config, args.command, args.seed, args.out, args.format)
    except ConfigurationError as e:
        return _fail(EXIT_CONFIG, e)
    except OSError as e:
        return _fail(EXIT_IO, e)
    try:
        files = DISPATCH[cfg.command](cfg)
    except _SuiteFailure as e:
        files, code, err = e.files, EXIT_SOLVER, e
    except (ConfigurationError, InputError) as e:
        return _fail(EXIT_CONFIG, e)
    except SolverError as e:
        return _fail(EXIT_SOLVER, e, e.diagnostics)
    except OSError as e:
        return _fail(EXIT_IO, e)
    else:
        code, err = EXIT_OK, None
    try:
        if cfg.out is not None:
            write_bundle(cfg.out, cfg, files)
        else:
            sys.stdout.write(next(iter(files.values())))
    except OSError as e:
        return _fail(EXIT_IO, e)
    return code if err is None else _fail(code, err)


if __name__ == "__main__":
    sys.exit(main())
