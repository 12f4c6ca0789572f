"""Command-line entry point: ``feast train | eval | synth | sweep``.

Configuration is a flat JSON object; every key can also be given as a
kebab-case flag (``--k-shot 5``), and flags win over the file. Every output
directory receives ``config.json`` (the resolved configuration) and
``run.json`` (seed, split and a content hash of the input CSV).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import logging
import shutil
import sys
import types
import typing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .datasets import (DataValidationError, SamplingInfeasibleError, Schema, SchemaError, SyntheticSpec,
                       make_split, make_synthetic, read_csv, standardize, write_synthetic)
from .engine import (ConfigError, DivergenceError, TrainConfig, evaluate, load_checkpoint, save_checkpoint,
                     train)

log = logging.getLogger("feast")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4

SWEEP_AXES = ("gamma", "aux_size", "k_shot", "variant")
SWEEP_COLUMNS = ("variant", "gamma", "aux_size", "k_shot", "dp", "eo", "acc")


@dataclass
class RunConfig:
    """Training hyper-parameters plus data, split and output settings."""

    # training (see TrainConfig)
    alpha: float = 0.01
    beta1: float = 0.001
    beta2: float = 0.001
    tau: int = 10
    gamma: float = 0.5
    lam: float = 1.0
    k_shot: int = 5
    aux_size: int | None = None
    T: int = 500
    T_test: int = 500
    query_size: int = 10
    capacity: int = 64
    weight_decay: float = 1e-4
    seed: int = 0
    variant: str = "feast"
    regularizer: str = "dp"
    adapted_keys: bool = False
    # data
    data: str | None = None
    label: str = "y"
    sensitive: str = "a"
    subset: str = "subset"
    categorical: list[str] = field(default_factory=list)
    drop: list[str] = field(default_factory=list)
    sensitive_as_feature: bool = True
    # split; unset counts follow a 22:6:6 proportion of the subsets
    n_train: int | None = None
    n_val: int | None = None
    n_test: int | None = None
    split_seed: int | None = None
    eval_split: str = "test"
    # outputs and execution
    out: str | None = None
    checkpoint: str | None = None
    checkpoint_every: int = 0
    workers: int = 1
    grid: dict[str, list] = field(default_factory=dict)
    parallel: int = 1

    def train_config(self, **overrides) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in asdict(self).items() if k in names}, **overrides)

    def schema(self) -> Schema:
        return Schema(self.label, self.sensitive, self.subset, tuple(self.categorical), tuple(self.drop),
                      self.sensitive_as_feature)

    def validate(self) -> None:
        self.train_config()
        if self.eval_split not in ("test", "val"):
            raise ConfigError(f"eval_split must be 'test' or 'val', got {self.eval_split!r}")
        if self.workers < 1 or self.parallel < 1 or self.checkpoint_every < 0:
            raise ConfigError("workers and parallel must be >= 1, checkpoint_every >= 0")
        unknown = set(self.grid) - set(SWEEP_AXES)
        if unknown:
            raise ConfigError(f"grid keys {sorted(unknown)} not in {SWEEP_AXES}")
        for key, values in self.grid.items():
            if not isinstance(values, list) or not values:
                raise ConfigError(f"grid[{key!r}] must be a non-empty list")


_HINTS = typing.get_type_hints(RunConfig)


def _coerce(key: str, value, from_text: bool = False):
    """Check (and, for command-line text, convert) ``value`` against the declared type of ``key``."""
    hint = _HINTS[key]
    args = typing.get_args(hint)
    optional = isinstance(hint, types.UnionType) and type(None) in args
    base = next(a for a in args if a is not type(None)) if optional else hint
    origin = typing.get_origin(base) or base
    if value is None or (from_text and optional and value.lower() in ("none", "null")):
        if optional:
            return None
        raise ConfigError(f"{key} may not be null")
    if from_text:
        try:
            if origin is bool:
                if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return value.lower() in ("true", "1", "yes")
            if origin is list:
                return [v for v in value.split(",") if v]
            if origin is dict:
                return json.loads(value)
            return origin(value)
        except (ValueError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{key}: cannot parse {value!r} as {origin.__name__}") from exc
    if origin is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if origin is int and isinstance(value, float) and value.is_integer():
        return int(value)
    if not isinstance(value, origin) or (origin is not bool and isinstance(value, bool)):
        raise ConfigError(f"{key}: expected {origin.__name__}, got {type(value).__name__} {value!r}")
    return value


def parse_config(path=None, overrides: dict | None = None, from_text: bool = False) -> RunConfig:
    """Merge a JSON config file with overrides (flags win) into a validated RunConfig.

    Unknown keys and type mismatches raise ConfigError naming the key.
    """
    values = {}
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        values.update(loaded)
    for key, value in (overrides or {}).items():
        values[key.replace("-", "_")] = value
    unknown = sorted(set(values) - set(_HINTS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    text_keys = {k.replace("-", "_") for k in overrides or {}} if from_text else set()
    clean = {k: _coerce(k, v, k in text_keys) for k, v in values.items()}
    cfg = RunConfig(**clean)
    cfg.validate()
    return cfg


# -- helpers ------------------------------------------------------------------

def git_blob_hash(path) -> str:
    """Content hash of a file as git computes it for a blob (SHA-1 over header + bytes)."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def prepare_output(out, force: bool) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ConfigError(f"output directory {out} exists and is not empty (use --force to overwrite)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def load_data(rc: RunConfig):
    """Read the CSV, split its subsets and z-score with meta-training statistics."""
    if rc.data is None:
        raise ConfigError("data: a dataset CSV path is required")
    if not Path(rc.data).is_file():
        raise ConfigError(f"data: file not found: {rc.data}")
    raw = read_csv(rc.data, rc.schema())
    seed = rc.seed if rc.split_seed is None else rc.split_seed
    split = make_split(raw, rc.n_train, rc.n_val, rc.n_test, seed=seed)
    return standardize(raw, split.train), split


def write_run_files(out: Path, rc: RunConfig, split=None, table=None, extra: dict | None = None) -> None:
    (out / "config.json").write_text(json.dumps(asdict(rc), indent=2, sort_keys=True) + "\n")
    run = {"seed": rc.seed, "command_line": sys.argv[1:]}
    if rc.data is not None and Path(rc.data).is_file():
        run.update(data=str(rc.data), data_git_sha1=git_blob_hash(rc.data))
    if split is not None:
        run["split"] = asdict(split)
        if table is not None:
            run["subset_names"] = {name: [table.subset_names[c] for c in getattr(split, name)]
                                   for name in ("train", "val", "test")}
    run.update(extra or {})
    (out / "run.json").write_text(json.dumps(run, indent=2, sort_keys=True) + "\n")


def _history_jsonl(history) -> str:
    return "".join(json.dumps(h) + "\n" for h in history)


def run_training(rc: RunConfig, out: Path, table, split, cfg: TrainConfig | None = None):
    """Train (resuming from ``rc.checkpoint`` if set); on divergence, checkpoint then re-raise."""
    cfg = cfg or rc.train_config()
    state = None
    if rc.checkpoint:
        # resume: the checkpoint's own configuration wins, except for the step budget
        state = load_checkpoint(rc.checkpoint, table)
        cfg = state.config = replace(state.config, T=cfg.T)
    try:
        step = rc.checkpoint_every or cfg.T
        while state is None or state.step < cfg.T:
            state = train(cfg, table, split, state=state, until=(state.step if state else 0) + step)
            if state.step < cfg.T:
                save_checkpoint(state, out / "checkpoint")
    except DivergenceError as exc:
        if getattr(exc, "state", None) is not None:
            save_checkpoint(exc.state, out / "checkpoint-diverged")
        raise
    save_checkpoint(state, out / "checkpoint")
    (out / "history.jsonl").write_text(_history_jsonl(state.history))
    return state


def _eval_subsets(rc: RunConfig, split):
    return split.test if rc.eval_split == "test" else split.val


# -- subcommands --------------------------------------------------------------

def cmd_train(rc: RunConfig, force: bool = False) -> Path:
    table, split = load_data(rc)
    out = prepare_output(rc.out or "runs/train", force)
    write_run_files(out, rc, split, table)
    state = run_training(rc, out, table, split)
    log.info("trained %d steps; checkpoint in %s", state.step, out / "checkpoint")
    return out


def cmd_eval(rc: RunConfig, force: bool = False) -> Path:
    """Evaluate a checkpoint (or a freshly initialized model when none is given)."""
    from .engine import init_state

    table, split = load_data(rc)
    out = prepare_output(rc.out or "runs/eval", force)
    if rc.checkpoint:
        state = load_checkpoint(rc.checkpoint, table)
        cfg = replace(state.config, T_test=rc.T_test)
    else:
        cfg = rc.train_config()
        state = init_state(cfg, table, split)
    write_run_files(out, rc, split, table, {"evaluated_config": asdict(cfg)})
    report = evaluate(state, table, _eval_subsets(rc, split), cfg, workers=rc.workers)
    report.write(out, {"variant": cfg.variant, "seed": cfg.seed, "trained_steps": state.step})
    log.info("dp=%.4f acc=%.4f over %d tasks", report.mean("dp"), report.mean("acc"), report.n_tasks)
    return out


def cmd_synth(spec: SyntheticSpec, n_samples: int, n_subsets: int, seed: int, path, force: bool = False) -> Path:
    path = Path(path)
    if path.exists() and not force:
        raise ConfigError(f"{path} exists (use --force to overwrite)")
    path.parent.mkdir(parents=True, exist_ok=True)
    write_synthetic(make_synthetic(spec, n_samples, n_subsets, seed), path)
    return path


def sweep_cells(rc: RunConfig) -> list[dict]:
    grid = rc.grid or {"variant": [rc.variant]}
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def _cell_name(i: int, cell: dict) -> str:
    return f"cell{i:03d}-" + "-".join(f"{k}={v}" for k, v in cell.items())


def _run_cell(args) -> dict:
    rc, cell, out = args
    table, split = load_data(rc)
    cell_rc = replace(rc, **cell)
    cell_rc.validate()
    cfg = cell_rc.train_config()
    out.mkdir(parents=True, exist_ok=True)
    write_run_files(out, cell_rc, split, table, {"cell": cell})
    state = run_training(replace(cell_rc, checkpoint=None), out, table, split, cfg)
    report = evaluate(state, table, _eval_subsets(rc, split), workers=1)
    report.write(out, {"variant": cfg.variant, "seed": cfg.seed, "cell": cell})
    return {"variant": cfg.variant, "gamma": cfg.gamma, "aux_size": cfg.eff_aux_size, "k_shot": cfg.k_shot,
            "dp": report.mean("dp"), "eo": report.mean("eo"), "acc": report.mean("acc")}


def cmd_sweep(rc: RunConfig, force: bool = False) -> Path:
    """Train and evaluate every grid cell in its own subdirectory; summarize into ``sweep.csv``."""
    load_data(rc)  # fail early on bad data
    out = prepare_output(rc.out or "runs/sweep", force)
    write_run_files(out, rc)
    jobs = [(rc, cell, out / _cell_name(i, cell)) for i, cell in enumerate(sweep_cells(rc))]
    if rc.parallel > 1:
        with ProcessPoolExecutor(rc.parallel) as pool:
            rows = list(pool.map(_run_cell, jobs))
    else:
        rows = [_run_cell(j) for j in jobs]
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    return out


# -- argument parsing ---------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--force", action="store_true", help="overwrite an existing output directory")
    for name in _HINTS:
        if name == "grid":
            continue
        p.add_argument("--" + name.replace("_", "-"), dest="cfg_" + name, default=None, metavar="VALUE")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="feast", description="Meta-learned few-shot classifiers with fairness adaptation and retrieved helper batches.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("train", "meta-train and write a checkpoint"),
                       ("eval", "adapt and score meta-test tasks"),
                       ("sweep", "train and evaluate a grid of configurations")):
        p = sub.add_parser(name, help=text)
        _add_config_flags(p)
        if name == "sweep":
            p.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2",
                           help=f"grid axis, one of {', '.join(SWEEP_AXES)}; repeatable")
    p = sub.add_parser("synth", help="write a synthetic biased dataset")
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--force", action="store_true")
    p.add_argument("--n-samples", type=int, default=8000)
    p.add_argument("--n-subsets", type=int, default=12)
    p.add_argument("--seed", type=int, default=0)
    for f in fields(SyntheticSpec):
        p.add_argument("--" + f.name.replace("_", "-"), type=type(f.default), default=f.default)
    return parser


def _parse_grid(items) -> dict:
    grid = {}
    for item in items:
        key, sep, values = item.partition("=")
        key = key.replace("-", "_")
        if not sep or key not in SWEEP_AXES:
            raise ConfigError(f"bad --grid {item!r}; expected KEY=V1,V2 with KEY in {SWEEP_AXES}")
        grid[key] = [_coerce(key, v, from_text=True) for v in values.split(",")]
    return grid


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            spec = SyntheticSpec(**{f.name: getattr(args, f.name) for f in fields(SyntheticSpec)})
            path = cmd_synth(spec, args.n_samples, args.n_subsets, args.seed, args.out, args.force)
            print(path)
            return EXIT_OK
        flags = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
        rc = parse_config(args.config, flags, from_text=True)
        if args.command == "sweep" and args.grid:
            rc = replace(rc, grid=dict(rc.grid, **_parse_grid(args.grid)))
            rc.validate()
        command = {"train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep}[args.command]
        print(command(rc, args.force))
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SchemaError, DataValidationError, SamplingInfeasibleError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"diverged at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
