"""Command line entry point: train, merge, eval, gradcheck and ablate.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure
(diverged training, failed gradient check, non-finite merge).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from reslora.autodiff import gradcheck_batch, gradient_check
from reslora.experiments import fnorm_diff
from reslora.merge import METHODS, MergedModel, MergeError, merge
from reslora.model import (
    ACTIVATIONS,
    STRUCTURES,
    AdapterBlock,
    BaseLayer,
    Layer,
    ResLoRAModel,
    base_forward,
    build_model,
    forward,
    random_model,
)
from reslora.tensor import as_matrix
from reslora.train import (
    OPTIMIZERS,
    NormWindow,
    SyntheticTask,
    TrainConfig,
    TrainingDivergedError,
    make_task,
    mse_loss,
    train,
)

log = logging.getLogger("reslora")

FORMAT_VERSION = 1
GRADCHECK_TOL = 1e-6
EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


class NumericalFailure(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    structure: str = "none"
    depth: int = 4
    width: int = 8
    rank: int = 4
    alpha: float = 8.0
    pre_num: int = 4
    activation: str = "tanh"
    steps: int = 300
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    window_capacity: int = 64
    task_seed: int = 0
    shift: float = 0.1
    gain: float | None = None
    residual: bool = False
    out_dir: str = "out"

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config: expected a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown field")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"config: cannot read {path}: {e.strerror}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config: invalid JSON ({e})") from None
        return cls.from_dict(data)

    def validate(self):
        def is_int(v):
            return isinstance(v, int) and not isinstance(v, bool)

        def is_real(v):
            return (is_int(v) or isinstance(v, float)) and np.isfinite(v)

        checks = [
            ("structure", self.structure in STRUCTURES, f"must be one of {list(STRUCTURES)}"),
            ("activation", self.activation in ACTIVATIONS, f"must be one of {list(ACTIVATIONS)}"),
            ("optimizer", self.optimizer in OPTIMIZERS, f"must be one of {list(OPTIMIZERS)}"),
            ("out_dir", isinstance(self.out_dir, str) and self.out_dir != "", "must be a non-empty string"),
            ("residual", isinstance(self.residual, bool), "must be true or false"),
            ("pre_num", is_int(self.pre_num) and self.pre_num >= -1, "must be an integer >= -1"),
            ("seed", is_int(self.seed) and self.seed >= 0, "must be a nonnegative integer"),
            ("task_seed", is_int(self.task_seed) and self.task_seed >= 0, "must be a nonnegative integer"),
            ("alpha", is_real(self.alpha) and self.alpha > 0, "must be a positive number"),
            ("learning_rate", is_real(self.learning_rate) and self.learning_rate > 0, "must be a positive number"),
            ("shift", is_real(self.shift) and self.shift >= 0, "must be a nonnegative number"),
            ("gain", self.gain is None or (is_real(self.gain) and self.gain > 0), "must be null or a positive number"),
        ]
        for name in ("depth", "width", "rank", "steps", "batch_size", "window_capacity"):
            v = getattr(self, name)
            checks.append((name, is_int(v) and v >= 1, "must be a positive integer"))
        for name, ok, msg in checks:
            if not ok:
                raise ConfigError(f"{name}: {msg} (got {getattr(self, name)!r})")
        if self.rank > self.width:
            raise ConfigError(f"rank: must not exceed width {self.width} (got {self.rank})")

    def to_dict(self) -> dict:
        return asdict(self)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.steps, self.batch_size, float(self.learning_rate), self.optimizer,
                           self.seed, self.window_capacity)

    def task(self, task_seed: int | None = None) -> tuple[list[BaseLayer], SyntheticTask]:
        seed = self.task_seed if task_seed is None else task_seed
        return make_task(seed, self.depth, self.width, self.shift, activation=self.activation,
                         gain=self.gain, residual=self.residual)

    def model(self) -> ResLoRAModel:
        bases, _ = self.task()
        return build_model(bases, self.structure, rank=self.rank, alpha=self.alpha,
                           pre_num=self.pre_num, seed=self.seed)


# serialization --------------------------------------------------------------

def dumps(obj) -> str:
    """Canonical JSON: insertion key order, shortest round-trip floats."""
    return json.dumps(obj, indent=1, allow_nan=False) + "\n"


def atomic_write(path: str | os.PathLike, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(header: list[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _nested(m) -> list:
    return np.asarray(m, dtype=np.float64).tolist()


def checkpoint_dict(model: ResLoRAModel, windows: list[NormWindow] | None, config: ExperimentConfig) -> dict:
    layers = []
    for layer in model.layers:
        ad = layer.adapter
        layers.append({
            "activation": layer.base.activation,
            "scale": float(ad.scale),
            "W": _nested(layer.base.W),
            "A": _nested(ad.A),
            "B": _nested(ad.B),
        })
    return {
        "format_version": FORMAT_VERSION,
        "kind": "checkpoint",
        "structure": model.structure,
        "pre_num": model.pre_num,
        "config": config.to_dict(),
        "layers": layers,
        "windows": [list(w.values) for w in windows] if windows is not None else [[] for _ in model.layers],
    }


def _check_version(data: dict, kind: str):
    if not isinstance(data, dict) or data.get("kind") != kind:
        raise ConfigError(f"kind: expected a {kind} file")
    if data.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"format_version: unsupported {data.get('format_version')!r}")


def checkpoint_from_dict(data: dict) -> tuple[ResLoRAModel, list[NormWindow], ExperimentConfig]:
    _check_version(data, "checkpoint")
    config = ExperimentConfig.from_dict(data["config"])
    layers = []
    for entry in data["layers"]:
        base = BaseLayer(as_matrix(entry["W"]), entry["activation"])
        layers.append(Layer(base, AdapterBlock(as_matrix(entry["A"]), as_matrix(entry["B"]), entry["scale"])))
    model = ResLoRAModel(layers, data["structure"], data["pre_num"])
    windows = [NormWindow(n, config.window_capacity, vals) for n, vals in enumerate(data["windows"])]
    return model, windows, config


def merged_dict(merged: MergedModel, method: str, structure: str, config: ExperimentConfig) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": "merged",
        "structure": structure,
        "method": method,
        "config": config.to_dict(),
        "layers": [{"activation": l.activation, "W": _nested(l.W)} for l in merged.layers],
    }


def merged_from_dict(data: dict) -> tuple[MergedModel, ExperimentConfig]:
    _check_version(data, "merged")
    config = ExperimentConfig.from_dict(data["config"])
    return MergedModel([BaseLayer(as_matrix(e["W"]), e["activation"]) for e in data["layers"]]), config


def _read_json(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None


def save_checkpoint(path, model, windows, config):
    atomic_write(path, dumps(checkpoint_dict(model, windows, config)))


def load_checkpoint(path) -> tuple[ResLoRAModel, list[NormWindow], ExperimentConfig]:
    try:
        return checkpoint_from_dict(_read_json(path))
    except (KeyError, TypeError) as e:
        raise ConfigError(f"{path}: malformed checkpoint ({e!r})") from None


# subcommands ----------------------------------------------------------------

def cmd_train(args) -> int:
    config = ExperimentConfig.load(args.config)
    if args.out:
        config = replace(config, out_dir=args.out)
    _, task = config.task()
    model, curve, windows = train(config.model(), task, config.train_config())
    out = Path(config.out_dir)
    atomic_write(out / "loss.csv", csv_text(["step", "loss"], zip(curve.steps, curve.losses)))
    save_checkpoint(out / "checkpoint.json", model, windows, config)
    print(f"trained {config.structure} for {config.steps} steps; final loss {curve.final:.6g}; wrote {out}")
    return EXIT_OK


def cmd_merge(args) -> int:
    model, windows, config = load_checkpoint(args.checkpoint)
    if args.method == "bi" and not all(len(w) for w in windows):
        raise MergeError("merge method bi needs the training norm windows, but the checkpoint has empty ones")
    _, task = config.task()
    x, y = task.eval_batch()
    merged, report = merge(model, args.method, windows, x, y)
    if not all(np.all(np.isfinite(W)) for W in merged.weights):
        raise NumericalFailure("merged weights are not finite")
    out = Path(args.out)
    atomic_write(out / "merged.json", dumps(merged_dict(merged, args.method, model.structure, config)))
    atomic_write(out / "merge_report.json", dumps(report.to_dict()))
    print(f"{args.method} merge of {model.structure}: mean_div {report.mean_div:.3e} max_div {report.max_div:.3e}")
    return EXIT_OK


def cmd_eval(args) -> int:
    source = args.checkpoint or args.merged
    if args.checkpoint:
        model, _, config = load_checkpoint(args.checkpoint)
        run = lambda x: forward(model, x).output  # noqa: E731
    else:
        try:
            merged, config = merged_from_dict(_read_json(args.merged))
        except (KeyError, TypeError) as e:
            raise ConfigError(f"{args.merged}: malformed merged model ({e!r})") from None
        run = merged.forward
    task_seed = config.task_seed if args.task_seed is None else args.task_seed
    bases, task = config.task(task_seed)
    if task.d_in != (model.d_in if args.checkpoint else merged.layers[0].shape[1]):
        raise ConfigError("task_seed: task width does not match the model")
    x, y = task.eval_batch(args.batch)
    metrics = {
        "source": "checkpoint" if args.checkpoint else "merged",
        "task_seed": task_seed,
        "batch": args.batch,
        "loss": mse_loss(run(x), y),
        "base_loss": mse_loss(base_forward(bases, x), y),
    }
    if not np.isfinite(metrics["loss"]):
        raise NumericalFailure("evaluation loss is not finite")
    out = Path(args.out) if args.out else Path(source).parent
    atomic_write(out / "metrics.json", dumps(metrics))
    print(f"loss {metrics['loss']:.6g} (frozen base {metrics['base_loss']:.6g})")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    model = random_model(args.seed, args.structure, args.depth, args.width, args.rank, pre_num=args.pre_num)
    x, y = gradcheck_batch(args.seed, args.width)
    result = gradient_check(model, x, y, corrupt=args.corrupt)
    print(f"max relative error {result.max_rel_error:.3e} over {result.checked} coordinates "
          f"({result.skipped} below floor); worst {result.worst}")
    if not result.max_rel_error < GRADCHECK_TOL:
        print(f"gradient check FAILED (tolerance {GRADCHECK_TOL:g})", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _parse_pre_nums(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip() != ""]
    except ValueError:
        raise ConfigError(f"pre_num_list: expected comma-separated integers, got {text!r}") from None
    if not values:
        raise ConfigError("pre_num_list: must not be empty")
    if len(set(values)) != len(values):
        raise ConfigError("pre_num_list: values must be distinct")
    if any(v < -1 for v in values):
        raise ConfigError("pre_num_list: values must be >= -1")
    return values


def cmd_ablate(args) -> int:
    values = _parse_pre_nums(args.pre_num_list)
    config = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = {k: getattr(args, k) for k in ("depth", "width", "rank", "steps", "seed", "task_seed")
                 if getattr(args, k) is not None}
    config = replace(config, structure="bs", **overrides)
    if args.fnorm_pre_num is not None:
        config = replace(config, pre_num=args.fnorm_pre_num)
    config.validate()
    _, task = config.task()
    tc = config.train_config()

    def run(structure, m):
        model = replace(config, structure=structure, pre_num=m).model()
        return train(model, task, tc)

    curves = {}
    for v in values:
        _, curve, _ = run("bs", v)
        curves[v] = curve.losses
        log.info("pre_num %d: final loss %.4g", v, curve.final)
    rows = [[step] + [curves[v][step] for v in values] for step in range(config.steps)]
    out = Path(args.out)
    atomic_write(out / "ablate.csv", csv_text(["step"] + [f"pre_num_{v}" for v in values], rows))

    lora, _, _ = run("none", config.pre_num)
    bs, _, _ = run("bs", config.pre_num)
    diffs = fnorm_diff(lora, bs)
    if not all(np.isfinite(diffs)):
        raise NumericalFailure("fnorm_diff produced non-finite values")
    atomic_write(out / "fnorm_diff.csv", csv_text(["layer", "fnorm_diff"], enumerate(diffs)))
    print(f"ablated pre_num {values} over {config.steps} steps; wrote {out}")
    return EXIT_OK


# argument parsing -----------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    """Usage errors exit with 1, the configuration-error code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="reslora", description="Train, merge and analyse LoRA / ResLoRA models on synthetic tasks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train from a JSON config; writes checkpoint.json and loss.csv")
    t.add_argument("config")
    t.add_argument("--out", help="output directory (overrides out_dir in the config)")
    t.set_defaults(func=cmd_train)

    m = sub.add_parser("merge", help="fold a checkpoint into plain weights")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--method", required=True, choices=METHODS)
    m.add_argument("--out", required=True, help="output directory")
    m.set_defaults(func=cmd_merge)

    e = sub.add_parser("eval", help="task loss of a checkpoint or merged model")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--merged")
    e.add_argument("--task-seed", type=int)
    e.add_argument("--batch", type=int, default=256)
    e.add_argument("--out", help="output directory (default: next to the input)")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="compare backward with finite differences")
    g.add_argument("--structure", required=True, choices=STRUCTURES)
    g.add_argument("--depth", type=int, required=True)
    g.add_argument("--width", type=int, required=True)
    g.add_argument("--rank", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--pre-num", type=int, default=-1)
    g.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="loss curves over pre_num values plus the F-norm comparison")
    a.add_argument("--pre-num-list", required=True)
    a.add_argument("--structure", choices=("bs",), default="bs")
    a.add_argument("--config", help="base JSON config (defaults otherwise)")
    a.add_argument("--out", required=True, help="output directory")
    a.add_argument("--fnorm-pre-num", type=int, help="pre_num of the bs model in fnorm_diff.csv")
    for name in ("depth", "width", "rank", "steps", "seed", "task-seed"):
        a.add_argument(f"--{name}", type=int)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (TrainingDivergedError, NumericalFailure, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        # ConfigError, MergeError, StructureError, ShapeError
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
