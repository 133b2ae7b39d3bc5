"""``green <command> [--config PATH] [--out DIR] [--seed N] [key=value ...]``

Commands: gen-data, train, eval, inspect-prior. Settings come from built-in
defaults, then the config file (flat JSON object, or ``key = value`` lines),
then ``key=value`` overrides, then ``--seed``. Unknown keys are rejected and
the resolved settings are written to ``config.resolved.json`` beside the
outputs. Outputs are staged and only moved into ``--out`` once everything
succeeded.

Exit codes: 0 ok, 1 usage, 2 IO/format, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import data as D
from . import metrics as M
from .errors import ContractError, FormatError, NumericalError, ParameterError
from .head import init_adjacency
from .training import (TrainConfig, cross_validate, read_checkpoint, save_checkpoint,
                       score)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
STAGE_NAMES = {0: "NO", 1: "MI", 2: "MO", 3: "SE", 4: "PR"}


class UsageError(Exception):
    pass


def _fields(cls, base=None) -> dict:
    base = base or cls()
    return {f.name: getattr(base, f.name) for f in dataclasses.fields(cls)}


SCHEMAS = {
    "gen-data": {**_fields(D.SynthConfig), "format": "auto", "name": "dataset"},
    "train": {**_fields(TrainConfig, TrainConfig.desk()), "data": "", "log_val_metrics": False},
    "eval": {"data": "", "run": "", "checkpoint": "", "split": "val", "seed": 0},
    "inspect-prior": {"checkpoint": "", "seed": 0, "cell": 16},
}


# configuration ------------------------------------------------------------------

def _coerce(key, value, default):
    kind = type(default)
    if kind is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
    elif kind is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if isinstance(value, str):
            try:
                return int(value)
            except ValueError:
                pass
    elif kind is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
    else:
        return str(value)
    raise UsageError(f"{key}: expected {kind.__name__}, got {value!r}")


def _parse_scalar(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def read_config_file(path) -> dict:
    text = Path(path).read_text()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError:
        obj = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            obj[key.strip()] = _parse_scalar(value.strip())
    if not isinstance(obj, dict) or any(isinstance(v, (dict, list)) for v in obj.values()):
        raise UsageError(f"{path}: config must be a flat key-value object")
    return obj


def resolve(command: str, file_cfg: dict, overrides: list, seed=None) -> dict:
    schema = SCHEMAS[command]
    raw = dict(file_cfg)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"override {item!r} is not key=value")
        raw[key] = _parse_scalar(value)
    if seed is not None:
        raw["seed"] = seed
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise UsageError(f"unknown key(s) for {command}: {', '.join(unknown)}")
    return {k: _coerce(k, raw[k], d) if k in raw else d for k, d in schema.items()}


def _pick(cfg: dict, cls) -> dict:
    names = {f.name for f in dataclasses.fields(cls)}
    return {k: v for k, v in cfg.items() if k in names}


def _require(cfg, key):
    if not cfg[key]:
        raise UsageError(f"missing required key {key!r}")
    return cfg[key]


# output helpers -----------------------------------------------------------------

def _write_csv(path: Path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def matrix_csv(path: Path, mat: np.ndarray):
    _write_csv(path, [f"c{j}" for j in range(mat.shape[1])], [[repr(float(v)) for v in row] for row in mat])


def read_matrix_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[float(v) for v in r] for r in rows])


def write_pgm(path: Path, mat: np.ndarray, cell: int = 16):
    """Binary grayscale PGM; each entry becomes a ``cell`` x ``cell`` block, max -> white."""
    lo, hi = float(mat.min()), float(mat.max())
    level = np.full(mat.shape, 128.0) if hi == lo else (mat - lo) / (hi - lo) * 255.0
    pix = np.kron(np.rint(level).astype(np.uint8), np.ones((cell, cell), dtype=np.uint8))
    h, w = pix.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, dims, maxval, rest = raw.split(b"\n", 3)
    if magic != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h = (int(v) for v in dims.split())
    return np.frombuffer(rest, dtype=np.uint8).reshape(h, w)


def _log_rows(log):
    keys = list(log[0].keys()) if log else ["epoch", "mean_loss"]
    return keys, [[str(r[k]) if k == "epoch" else repr(float(r[k])) for k in keys] for r in log]


# commands ---------------------------------------------------------------------------

def cmd_gen_data(cfg: dict, out: Path) -> str:
    synth = D.SynthConfig(**_pick(cfg, D.SynthConfig))
    ds = D.generate_synthetic(synth)
    fmt = cfg["format"]
    if fmt == "auto":
        fmt = "bin" if ds.kind == "image" else "csv"
    if fmt not in ("csv", "bin"):
        raise UsageError(f"format must be csv, bin or auto, got {fmt!r}")
    path = out / f"{cfg['name']}.{fmt}"
    D.save_dataset(ds, path)
    info = D.summary(ds)
    (out / "summary.json").write_text(json.dumps(info, indent=2) + "\n")
    return (f"wrote {path.name}: {info['samples']} samples, {ds.n} classes, "
            f"flip rate {info['flip_rate']:.4f}\nobserved histogram {info['observed_histogram']}")


def _load_data(cfg) -> D.Dataset:
    return D.load_dataset(_require(cfg, "data"))


def cmd_train(cfg: dict, out: Path) -> str:
    ds = _load_data(cfg)
    config = TrainConfig(**_pick(cfg, TrainConfig))
    if config.extractor == "tinyconv" and ds.kind != "image":
        raise UsageError("tinyconv extractor needs an image dataset")
    if config.extractor == "mlp" and ds.kind != "vector":
        raise UsageError("mlp extractor needs a vector dataset")
    splits = []

    def write_fold(fold):
        save_checkpoint(fold.model, out / f"fold{fold.fold}.ckpt", config, fold.log)
        header, rows = _log_rows(fold.log)
        _write_csv(out / f"fold{fold.fold}_log.csv", header, rows)
        splits.append(fold.val_idx.tolist())

    folds = cross_validate(ds, config, val_metrics_per_epoch=cfg["log_val_metrics"], on_fold=write_fold)
    (out / "splits.json").write_text(json.dumps({"size": len(ds), "val": splits}, separators=(",", ":")) + "\n")
    sections = {src: [f.metrics[src] for f in folds] for src in ("true", "observed") if src in folds[0].metrics}
    rows = M.report_rows(sections)
    (out / "summary.csv").write_text(M.report_csv(rows))
    table = M.report_table(rows)
    (out / "summary.txt").write_text(table)
    return f"{config.mode} model, {config.folds} folds, {config.epochs} epochs\n{table}"


def cmd_eval(cfg: dict, out: Path) -> str:
    ds = _load_data(cfg)
    if bool(cfg["run"]) == bool(cfg["checkpoint"]):
        raise UsageError("give exactly one of run=<train output dir> or checkpoint=<file>")
    if cfg["checkpoint"]:
        jobs = [(read_checkpoint(cfg["checkpoint"]).model, np.arange(len(ds)))]
    else:
        run = Path(cfg["run"])
        splits = json.loads((run / "splits.json").read_text())
        if splits["size"] != len(ds):
            raise ContractError(f"run was split over {splits['size']} samples, dataset has {len(ds)}")
        jobs = []
        for k, val in enumerate(splits["val"]):
            val = np.array(val, dtype=np.int64)
            if cfg["split"] == "val":
                idx = val
            elif cfg["split"] == "train":
                idx = np.setdiff1d(np.arange(len(ds)), val)
            elif cfg["split"] == "all":
                idx = np.arange(len(ds))
            else:
                raise UsageError(f"split must be val, train or all, got {cfg['split']!r}")
            jobs.append((read_checkpoint(run / f"fold{k}.ckpt").model, idx))
    per_fold = []
    for model, idx in jobs:
        if model.n_classes != ds.n:
            raise ContractError(f"checkpoint predicts {model.n_classes} classes, dataset has {ds.n}")
        per_fold.append(score(model, ds.subset(idx)))
    sections = {src: [f[src] for f in per_fold] for src in ("true", "observed") if src in per_fold[0]}
    rows = M.report_rows(sections)
    (out / "metrics.csv").write_text(M.report_csv(rows))
    table = M.report_table(rows)
    (out / "metrics.txt").write_text(table)
    return table


def structure_report(mats: dict) -> str:
    n = next(iter(mats.values())).shape[0]
    i, j = np.indices((n, n))
    gap = np.abs(i - j)
    lines = [f"{'matrix':<10}{'|i-j|=0':>10}{'|i-j|=1':>10}{'|i-j|>=2':>10}"]
    for name, A in mats.items():
        cells = [np.abs(A[gap == 0]).mean(), np.abs(A[gap == 1]).mean(),
                 np.abs(A[gap >= 2]).mean() if n > 2 else float("nan")]
        lines.append(f"{name:<10}" + "".join(f"{c:>10.4f}" for c in cells))
    names = [STAGE_NAMES.get(k, str(k)) if n == 5 else str(k) for k in range(n)]
    lines.append("adjacent pairs (initial -> learned, symmetrised):")
    for k in range(n - 1):
        pair = [0.5 * (A[k, k + 1] + A[k + 1, k]) for A in mats.values()]
        lines.append(f"  {names[k]}-{names[k + 1]}: " + " -> ".join(f"{v:.4f}" for v in pair))
    return "\n".join(lines)


def cmd_inspect_prior(cfg: dict, out: Path) -> str:
    ckpt = read_checkpoint(_require(cfg, "checkpoint"))
    head = ckpt.model.head
    if head is None:
        raise ContractError("no head present: inspect-prior needs a green-mode checkpoint")
    sigma = float(ckpt.config.get("sigma_init", 1.0))
    initial = init_adjacency(head.n, sigma).data
    learned = head.A.data
    prior = head.cached_prior.data if head.frozen else None
    matrix_csv(out / "A_initial.csv", initial)
    matrix_csv(out / "A_learned.csv", learned)
    write_pgm(out / "A_initial.pgm", initial, cfg["cell"])
    write_pgm(out / "A_learned.pgm", learned, cfg["cell"])
    if prior is not None:
        matrix_csv(out / "prior_C.csv", prior)
    report = structure_report({"initial": initial, "learned": learned})
    (out / "structure.txt").write_text(report + "\n")
    return report


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "inspect-prior": cmd_inspect_prior,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="green", description="Graph residual re-ranking: data, training, evaluation.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="flat JSON object or key = value file")
    p.add_argument("--out", default="out", help="output directory (default: ./out)")
    p.add_argument("--seed", type=int)
    p.add_argument("overrides", nargs="*", metavar="key=value")
    return p


def _commit(stage: Path, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    for item in sorted(stage.iterdir()):
        os.replace(item, out / item.name)


def main(argv=None) -> int:
    stage = None
    try:
        args = build_parser().parse_intermixed_args(argv)
        file_cfg = read_config_file(args.config) if args.config else {}
        cfg = resolve(args.command, file_cfg, args.overrides, args.seed)
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        stage = Path(tempfile.mkdtemp(prefix=f".{out.name}.stage-", dir=out.parent))
        (stage / "config.resolved.json").write_text(
            json.dumps({"command": args.command, **cfg}, indent=2, sort_keys=True) + "\n")
        message = COMMANDS[args.command](cfg, stage)
        _commit(stage, out)
        print(message)
        return EXIT_OK
    except (UsageError, ParameterError) as exc:
        print(f"green: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"green: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError, ContractError, json.JSONDecodeError, KeyError) as exc:
        print(f"green: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_IO
    finally:
        if stage is not None and stage.exists():
            shutil.rmtree(stage, ignore_errors=True)


if __name__ == "__main__":
    sys.exit(main())
