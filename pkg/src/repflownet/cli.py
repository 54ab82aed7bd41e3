"""``repflow`` command line: flow export, benchmarks, training, evaluation, ablation.

Exit codes: 0 success, 1 usage or configuration error, 2 I/O error,
3 numeric failure (non-finite values, training divergence).
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import bench as bench_mod
from .io.config import ConfigError, Field, parse_bool, parse_list, read_config
from .io.flo import FloError, write_flo
from .io.flowviz import flow_to_ppm
from .io.pgm import FormatError, read_pgm
from .model import checkpoint
from .model.ablation import SWEEPS, ablate
from .model.data import SyntheticDatasetConfig, synth_dataset
from .model.training import STAGES, TrainConfig, TrainingDivergedError, evaluate, train_pipeline
from .model.twostream import ModelConfig, TwoStreamModel
from .repflow import DEFAULT_LAMBDA, DEFAULT_TAU, DEFAULT_THETA, FlowParams, rep_flow
from .tensor import NonFiniteError

EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 1, 2, 3


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_or_auto(s: str):
    return "auto" if s == "auto" else float(s)


FLOW_SCHEMA = {
    "flow.n_iters": Field(int, 20),
    "flow.tau": Field(float, DEFAULT_TAU),
    "flow.theta": Field(float, DEFAULT_THETA),
    "flow.lambda": Field(float, DEFAULT_LAMBDA),
    "flow.dual_denominator": Field(str, "grad_u"),
    "output.ppm": Field(parse_bool, False),
    "output.max_magnitude": Field(_positive_or_auto, "auto"),
}

BENCH_SCHEMA = {
    "bench.resolutions": Field(parse_list(int)),
    "bench.channels": Field(parse_list(int)),
    "bench.iters": Field(parse_list(int)),
    "bench.runs": Field(int, bench_mod.MIN_RUNS),
    "bench.warmup": Field(int, 1),
}

_STAGE_DEFAULTS = {
    "rgb_stage1": (5, 8, 1e-2, "adam"),
    "rgb_stage2": (10, 8, 1e-3, "adam"),
    "flow": (10, 8, 1e-2, "adam"),
    "fusion": (10, 8, 1e-2, "adam"),
}

MODEL_SCHEMA = {
    "seed": Field(int),
    "data.n_classes": Field(int, 4),
    "data.frames": Field(int, 6),
    "data.image_size": Field(int, 16),
    "data.radius": Field(float, 3.0),
    "data.speed": Field(float, 1.0),
    "data.noise_std": Field(float, 0.02),
    "data.n_train": Field(int, 48),
    "data.n_test": Field(int, 32),
    "model.backbone": Field(parse_list(int), (8, 16)),
    "model.convlstm_hidden": Field(int, 8),
    "model.convlstm_variant": Field(str, "standard"),
    "model.stem": Field(lambda s: () if s.strip() in ("", "none") else parse_list(int)(s), ()),
    "model.tail": Field(parse_list(int), (8,)),
    "flow.layers": Field(int, 1),
    "flow.reduce_channels": Field(int, 4),
    "flow.n_iters": Field(int, 10),
    "flow.dual_denominator": Field(str, "grad_u"),
    "train.stages": Field(parse_list(str), STAGES),
}
for _stage, (_ep, _bs, _lr, _opt) in _STAGE_DEFAULTS.items():
    MODEL_SCHEMA[f"{_stage}.epochs"] = Field(int, _ep)
    MODEL_SCHEMA[f"{_stage}.batch_size"] = Field(int, _bs)
    MODEL_SCHEMA[f"{_stage}.lr"] = Field(float, _lr)
    MODEL_SCHEMA[f"{_stage}.optimizer"] = Field(str, _opt)

ABLATE_SCHEMA = {**MODEL_SCHEMA, "ablate.dimension": Field(str)}


def _load(path, schema):
    try:
        return read_config(path, schema)
    except FileNotFoundError as exc:
        raise CliError(f"cannot read config {path}: {exc.strerror}", EXIT_IO) from exc
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}", EXIT_IO) from exc
    except (ConfigError, UnicodeDecodeError) as exc:
        raise CliError(f"{path}: {exc}", EXIT_USAGE) from exc


def build_experiment(cfg: dict):
    """Typed config dict -> (dataset, model config, stage configs)."""
    try:
        data_cfg = SyntheticDatasetConfig(
            n_classes=cfg["data.n_classes"], frames_per_clip=cfg["data.frames"], image_size=cfg["data.image_size"],
            radius=cfg["data.radius"], speed=cfg["data.speed"], noise_std=cfg["data.noise_std"],
            n_train=cfg["data.n_train"], n_test=cfg["data.n_test"], rng_seed=cfg["seed"])
        model_cfg = ModelConfig(
            n_classes=cfg["data.n_classes"], backbone_stages=tuple(cfg["model.backbone"]),
            convlstm_hidden=cfg["model.convlstm_hidden"], convlstm_variant=cfg["model.convlstm_variant"],
            flow_stem_channels=tuple(cfg["model.stem"]), flow_layers=cfg["flow.layers"],
            reduce_channels=cfg["flow.reduce_channels"], n_iters=cfg["flow.n_iters"],
            flow_tail_channels=tuple(cfg["model.tail"]), dual_denominator=cfg["flow.dual_denominator"])
        stages = []
        for s in cfg["train.stages"]:
            if s not in STAGES:
                raise ValueError(f"unknown stage {s!r} in train.stages")
            stages.append(TrainConfig(s, epochs=cfg[f"{s}.epochs"], batch_size=cfg[f"{s}.batch_size"],
                                      learning_rate=cfg[f"{s}.lr"], optimizer=cfg[f"{s}.optimizer"],
                                      clip_length=cfg["data.frames"], rng_seed=cfg["seed"]))
        if model_cfg.convlstm_variant not in ("standard", "as_printed"):
            raise ValueError(f"unknown model.convlstm_variant {model_cfg.convlstm_variant!r}")
        if model_cfg.dual_denominator not in ("grad_u", "u"):
            raise ValueError(f"unknown flow.dual_denominator {model_cfg.dual_denominator!r}")
        if model_cfg.flow_layers < 0:
            raise ValueError("flow.layers must be >= 0")
        dataset = synth_dataset(data_cfg)
    except ValueError as exc:
        raise CliError(f"invalid configuration: {exc}", EXIT_USAGE) from exc
    return dataset, model_cfg, stages


def _result_rows(model, split):
    streams = ("rgb",) if model.config.flow_layers == 0 else ("rgb", "flow", "fused")
    return [(s, evaluate(model, split, s)) for s in streams]


def _write(path, data: bytes):
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc.strerror or exc}", EXIT_IO) from exc


def cmd_flow(args):
    cfg = _load(args.config, FLOW_SCHEMA) if args.config else {k: f.default for k, f in FLOW_SCHEMA.items()}
    if len(args.frames) < 2:
        raise CliError("need at least two frames", EXIT_USAGE)
    try:
        params = FlowParams(tau=cfg["flow.tau"], theta=cfg["flow.theta"], lambda_=cfg["flow.lambda"],
                            n_iters=cfg["flow.n_iters"], dual_denominator=cfg["flow.dual_denominator"])
    except ValueError as exc:
        raise CliError(f"invalid configuration: {exc}", EXIT_USAGE) from exc
    frames = []
    for path in args.frames:
        try:
            frames.append(read_pgm(path))
        except FileNotFoundError as exc:
            raise CliError(f"cannot read frame {path}: no such file", EXIT_IO) from exc
        except (OSError, FormatError) as exc:
            raise CliError(f"cannot read frame {path}: {exc}", EXIT_IO) from exc
    if len({f.shape for f in frames}) != 1:
        raise CliError("frames have inconsistent dimensions", EXIT_USAGE)
    os.makedirs(args.out, exist_ok=True)
    for i in range(len(frames) - 1):
        u = rep_flow(frames[i][None], frames[i + 1][None], params)[0]
        if not np.all(np.isfinite(u)):
            raise CliError(f"non-finite flow for frame pair {i}", EXIT_NUMERIC)
        base = os.path.join(args.out, f"flow_{i:04d}")
        try:
            write_flo(base + ".flo", u)
        except OSError as exc:
            raise CliError(f"cannot write {base}.flo: {exc.strerror or exc}", EXIT_IO) from exc
        except FloError as exc:
            raise CliError(str(exc), EXIT_NUMERIC) from exc
        if cfg["output.ppm"]:
            _write(base + ".ppm", flow_to_ppm(u, cfg["output.max_magnitude"]))
    return 0


def cmd_bench(args):
    cfg = _load(args.config, BENCH_SCHEMA)
    try:
        results = bench_mod.bench_grid(cfg["bench.resolutions"], cfg["bench.channels"], cfg["bench.iters"],
                                       cfg["bench.runs"], cfg["bench.warmup"])
    except ValueError as exc:
        raise CliError(f"invalid benchmark grid: {exc}", EXIT_USAGE) from exc
    sys.stdout.write(bench_mod.to_csv(results))
    return 0


def metrics_csv(metrics) -> str:
    lines = ["stage,epoch,loss,accuracy"]
    lines += [f"{m['stage']},{m['epoch']},{m['loss']!r},{m['accuracy']!r}" for m in metrics]
    return "\n".join(lines) + "\n"


def cmd_train(args):
    dataset, model_cfg, stages = build_experiment(_load(args.config, MODEL_SCHEMA))
    seed = dataset.config.rng_seed
    model, metrics = train_pipeline(TwoStreamModel.initialize(model_cfg, seed), stages, dataset.train)
    os.makedirs(args.out, exist_ok=True)
    _write(os.path.join(args.out, "metrics.csv"), metrics_csv(metrics).encode())
    _write(os.path.join(args.out, "checkpoint.rfk"), checkpoint.encode(model.params))
    sys.stdout.write(_accuracy_csv(_result_rows(model, dataset.test)))
    return 0


def _accuracy_csv(rows, header="stream,accuracy") -> str:
    return "\n".join([header, *(f"{k},{acc!r}" for k, acc in rows)]) + "\n"


def cmd_eval(args):
    dataset, model_cfg, _ = build_experiment(_load(args.config, MODEL_SCHEMA))
    try:
        params = checkpoint.load(args.checkpoint)
    except OSError as exc:
        raise CliError(f"cannot read checkpoint {args.checkpoint}: {exc.strerror or exc}", EXIT_IO) from exc
    except checkpoint.CheckpointError as exc:
        raise CliError(f"{args.checkpoint}: {exc}", EXIT_IO) from exc
    reference = TwoStreamModel.initialize(model_cfg, 0).params
    if set(params) != set(reference) or any(params[k].shape != reference[k].shape for k in params):
        raise CliError("checkpoint does not match the configured model", EXIT_USAGE)
    sys.stdout.write(_accuracy_csv(_result_rows(TwoStreamModel(model_cfg, params), dataset.test)))
    return 0


def cmd_ablate(args):
    cfg = _load(args.config, ABLATE_SCHEMA)
    dim = cfg["ablate.dimension"]
    if dim not in SWEEPS:
        raise CliError(f"ablate.dimension must be one of {', '.join(sorted(SWEEPS))}", EXIT_USAGE)
    dataset, model_cfg, stages = build_experiment(cfg)
    if dim == "flow_layers":
        needed = max(SWEEPS[dim]) + 1
    else:
        needed = model_cfg.min_frames
    if dataset.config.frames_per_clip < needed:
        raise CliError(f"data.frames must be at least {needed} for this sweep", EXIT_USAGE)
    rows = ablate(model_cfg, dim, dataset, stages, seed=cfg["seed"])
    sys.stdout.write(_accuracy_csv(rows, header="setting,accuracy"))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="repflow", description="Representation-flow tools: flow export, benchmarks, training, evaluation, ablation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("flow", help="estimate flow between consecutive PGM frames")
    f.add_argument("frames", nargs="+", help="PGM frames in temporal order")
    f.add_argument("-o", "--out", required=True, help="output directory")
    f.add_argument("-c", "--config", help="flow configuration file")
    f.set_defaults(func=cmd_flow)

    b = sub.add_parser("bench", help="time the flow layer over a grid; CSV on stdout")
    b.add_argument("config")
    b.set_defaults(func=cmd_bench)

    t = sub.add_parser("train", help="train on the synthetic dataset; writes metrics.csv and checkpoint.rfk")
    t.add_argument("config")
    t.add_argument("-o", "--out", required=True, help="output directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the synthetic test split")
    e.add_argument("config")
    e.add_argument("checkpoint")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="sweep flow layers or iterations; setting,accuracy CSV on stdout")
    a.add_argument("config")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"repflow: {exc}", file=sys.stderr)
        return exc.code
    except (TrainingDivergedError, NonFiniteError, FloatingPointError) as exc:
        print(f"repflow: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
