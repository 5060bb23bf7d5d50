"""Command-line entry point: gen-data, train, eval, bench, gradcheck.

Configuration is a text file of flat ``section.key = value`` lines validated
against a closed schema (unknown keys are errors). CLI flags override file
values; every run writes a timestamped directory holding the effective
config echo plus its artifacts, and re-running from the echo reproduces the
run. Exit codes: 0 ok, 2 config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import os
import sys
import time

import numpy as np

from .data import SynthConfig, gen_synthetic, load_dataset, save_dataset
from .errors import (ConfigError, ContractError, FormatError, GenerationError,
                     InvalidSpecError, NumericalError, PairingError, ShapeError)
from .networks import VARIANTS, NetworkSpec, build_model, load_checkpoint, save_checkpoint
from .train import (METRICS_HEADER, TrainConfig, benchmark_fps, deterministic_mode,
                    evaluate, train, write_metrics_csv)
from .verify import run_gradient_suite

_USAGE_ERRORS = (ConfigError, InvalidSpecError, ContractError, FormatError,
                 PairingError, GenerationError, ShapeError)


def _p_int(s: str) -> int:
    try:
        return int(s)
    except ValueError:
        raise ConfigError(f"expected an integer, got {s!r}")


def _p_float(s: str) -> float:
    try:
        return float(s)
    except ValueError:
        raise ConfigError(f"expected a number, got {s!r}")


def _p_bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "false"):
        return low == "true"
    raise ConfigError(f"expected true or false, got {s!r}")


def _p_str(s: str) -> str:
    return s


def _p_ints(n):
    def parse(s: str) -> tuple:
        parts = tuple(_p_int(p.strip()) for p in s.split(","))
        if n is not None and len(parts) != n:
            raise ConfigError(f"expected {n} comma-separated integers, got {s!r}")
        return parts
    return parse


def _p_floats(n):
    def parse(s: str) -> tuple:
        parts = tuple(_p_float(p.strip()) for p in s.split(","))
        if n is not None and len(parts) != n:
            raise ConfigError(f"expected {n} comma-separated numbers, got {s!r}")
        return parts
    return parse


def _p_pooling(s: str) -> tuple:
    """Five entries, each 'none' or 'TxHxW', e.g. 1x2x2,2x2x2,2x2x2,2x2x2,none."""
    out = []
    for part in (p.strip() for p in s.split(",")):
        if part.lower() == "none":
            out.append(None)
        else:
            dims = part.split("x")
            if len(dims) != 3:
                raise ConfigError(f"pool entry must be TxHxW or none, got {part!r}")
            out.append(tuple(_p_int(d) for d in dims))
    if len(out) != 5:
        raise ConfigError(f"pooling needs 5 entries, got {len(out)}")
    return tuple(out)


def _p_programs(s: str) -> tuple:
    """Empty for evenly spaced directions, else 'angle:speed' pairs."""
    if not s.strip():
        return ()
    programs = []
    for part in (p.strip() for p in s.split(",")):
        bits = part.split(":")
        if len(bits) != 2:
            raise ConfigError(f"motion program must be angle:speed, got {part!r}")
        programs.append((_p_float(bits[0]), _p_float(bits[1])))
    return tuple(programs)


def _p_kinds(s: str) -> tuple:
    return tuple(p.strip() for p in s.split(",") if p.strip())


def _p_variant(s: str) -> str:
    if s not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {s!r}")
    return s


# key -> (parser, default-as-string)
SCHEMA = {
    "network.num_classes": (_p_int, "4"),
    "network.clip": (_p_ints(4), "3,8,32,32"),
    "network.conv_channels": (_p_ints(5), "64,128,256,256,256"),
    "network.kernel": (_p_ints(3), "3,3,3"),
    "network.fc_width": (_p_int, "2048"),
    "network.width_factor": (_p_float, "0.125"),
    "network.pooling": (_p_pooling, "1x2x2,2x2x2,2x2x2,2x2x2,none"),
    "network.motion_tap": (_p_str, "fc7"),
    "train.learning_rate": (_p_float, "0.01"),
    "train.momentum": (_p_float, "0.9"),
    "train.weight_decay": (_p_float, "0.0005"),
    "train.batch_size": (_p_int, "8"),
    "train.epochs": (_p_int, "200"),
    "train.lambda_flow": (_p_float, "1.0"),
    "train.seed": (_p_int, "0"),
    "train.scheme": (_p_str, "auto"),
    "train.lr_decay": (_p_float, "0.1"),
    "train.lr_decay_every": (_p_int, "80"),
    "train.phase_fractions": (_p_floats(3), "0.4,0.4,0.2"),
    "train.target_train_acc": (_p_float, "0.0"),
    "train.target_train_epe": (_p_float, "0.0"),
    "synth.num_classes": (_p_int, "4"),
    "synth.clips_per_class": (_p_int, "22"),
    "synth.frames": (_p_int, "8"),
    "synth.height": (_p_int, "32"),
    "synth.width": (_p_int, "32"),
    "synth.shape_kinds": (_p_kinds, "rectangle,disc"),
    "synth.motion_programs": (_p_programs, ""),
    "synth.default_speed": (_p_float, "2.0"),
    "synth.min_shape": (_p_int, "6"),
    "synth.max_shape": (_p_int, "11"),
    "synth.background_level": (_p_float, "0.4"),
    "synth.shape_level": (_p_float, "0.6"),
    "synth.seed": (_p_int, "0"),
    "run.variant": (_p_variant, "twostream"),
    "run.data_dir": (_p_str, ""),
    "run.out_dir": (_p_str, "runs"),
    "run.checkpoint": (_p_str, ""),
    "run.deterministic": (_p_bool, "false"),
    "bench.batch": (_p_int, "2"),
    "bench.runs": (_p_int, "24"),
    "bench.warmup": (_p_int, "3"),
    "bench.request_flow": (_p_bool, "false"),
    "bench.seed": (_p_int, "0"),
}


class RunConfig:
    """Validated flat key/value view; every value parses at load time."""

    def __init__(self, raw: dict):
        for key in raw:
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
        merged = {k: default for k, (_, default) in SCHEMA.items()}
        merged.update(raw)
        self.raw = merged
        for key in self.raw:    # reject bad values before any command runs
            self[key]

    def __getitem__(self, key: str):
        parser, _ = SCHEMA[key]
        try:
            return parser(self.raw[key])
        except ConfigError as err:
            raise ConfigError(f"{key}: {err}") from None

    def echo_text(self) -> str:
        return "\n".join(f"{k} = {self.raw[k]}" for k in sorted(self.raw)) + "\n"

    def network_spec(self) -> NetworkSpec:
        return NetworkSpec(
            num_classes=self["network.num_classes"],
            clip=self["network.clip"],
            conv_channels=self["network.conv_channels"],
            kernel=self["network.kernel"],
            fc_width=self["network.fc_width"],
            width_factor=self["network.width_factor"],
            pooling=self["network.pooling"],
            motion_tap=self["network.motion_tap"],
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self["train.learning_rate"],
            momentum=self["train.momentum"],
            weight_decay=self["train.weight_decay"],
            batch_size=self["train.batch_size"],
            epochs=self["train.epochs"],
            lambda_flow=self["train.lambda_flow"],
            seed=self["train.seed"],
            scheme=self["train.scheme"],
            lr_decay=self["train.lr_decay"],
            lr_decay_every=self["train.lr_decay_every"],
            phase_fractions=self["train.phase_fractions"],
            target_train_acc=self["train.target_train_acc"],
            target_train_epe=self["train.target_train_epe"],
        )

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            num_classes=self["synth.num_classes"],
            clips_per_class=self["synth.clips_per_class"],
            frames=self["synth.frames"],
            height=self["synth.height"],
            width=self["synth.width"],
            shape_kinds=self["synth.shape_kinds"],
            motion_programs=self["synth.motion_programs"],
            default_speed=self["synth.default_speed"],
            min_shape=self["synth.min_shape"],
            max_shape=self["synth.max_shape"],
            background_level=self["synth.background_level"],
            shape_level=self["synth.shape_level"],
            seed=self["synth.seed"],
        )


def parse_config_text(text: str) -> dict:
    raw = {}
    for ln, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {ln}: expected 'section.key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        if key in raw:
            raise ConfigError(f"line {ln}: duplicate key {key!r}")
        raw[key] = value
    return raw


def load_config(args) -> RunConfig:
    raw = {}
    if args.config:
        if not os.path.exists(args.config):
            raise ConfigError(f"config file not found: {args.config}")
        with open(args.config) as fh:
            raw = parse_config_text(fh.read())
    if args.variant is not None:
        raw["run.variant"] = args.variant
    if args.lambda_flow is not None:
        raw["train.lambda_flow"] = repr(args.lambda_flow)
    if args.seed is not None:
        raw["train.seed"] = str(args.seed)
        raw["synth.seed"] = str(args.seed)
    if args.deterministic:
        raw["run.deterministic"] = "true"
    if args.out is not None:
        raw["run.out_dir"] = args.out
    return RunConfig(raw)


def _make_run_dir(cfg: RunConfig, command: str) -> str:
    base = cfg["run.out_dir"]
    stamp = time.strftime("%Y%m%d-%H%M%S")
    for attempt in range(1000):
        suffix = "" if attempt == 0 else f"-{attempt}"
        path = os.path.join(base, f"{command}-{stamp}{suffix}")
        try:
            os.makedirs(path)
            return path
        except FileExistsError:
            continue
    raise ConfigError(f"cannot create a fresh run directory under {base}")


def _echo_config(cfg: RunConfig, run_dir: str) -> None:
    with open(os.path.join(run_dir, "config.txt"), "w") as fh:
        fh.write(cfg.echo_text())


def _load_or_generate(cfg: RunConfig):
    data_dir = cfg["run.data_dir"]
    if data_dir:
        return load_dataset(data_dir)
    return gen_synthetic(cfg.synth_config())


def _maybe_deterministic(cfg: RunConfig):
    if cfg["run.deterministic"]:
        return deterministic_mode()
    return contextlib.nullcontext()


def cmd_gen_data(cfg: RunConfig) -> int:
    dataset = gen_synthetic(cfg.synth_config())
    run_dir = cfg["run.data_dir"] or _make_run_dir(cfg, "dataset")
    save_dataset(dataset, run_dir)
    _echo_config(cfg, run_dir)
    print(f"wrote {len(dataset.train)} train / {len(dataset.test)} test clips to {run_dir}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    dataset = _load_or_generate(cfg)
    variant = cfg["run.variant"]
    tcfg = cfg.train_config()
    model = build_model(variant, cfg.network_spec(), seed=tcfg.seed)
    run_dir = _make_run_dir(cfg, "train")
    _echo_config(cfg, run_dir)
    print(f"training {variant} for up to {tcfg.epochs} epochs -> {run_dir}")
    with _maybe_deterministic(cfg):
        history = train(model, dataset, tcfg,
                        log=lambda m: print(f"  epoch {m.epoch}: cls {m.cls_loss:.4f} "
                                            f"epe {m.flow_epe:.4f} train {m.train_acc:.3f} "
                                            f"test {m.test_acc:.3f}"))
    write_metrics_csv(os.path.join(run_dir, "metrics.csv"), history)
    ckpt = os.path.join(run_dir, "checkpoint")
    save_checkpoint(model, ckpt)
    last = history[-1]
    print(f"done: epoch {last.epoch} train_acc {last.train_acc:.3f} "
          f"test_acc {last.test_acc:.3f} epe {last.flow_epe:.4f}")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    ckpt = cfg["run.checkpoint"]
    if not ckpt:
        raise ConfigError("eval requires run.checkpoint (a checkpoint directory)")
    dataset = _load_or_generate(cfg)
    model = build_model(cfg["run.variant"], cfg.network_spec(), seed=cfg["train.seed"])
    load_checkpoint(model, ckpt)
    with _maybe_deterministic(cfg):
        acc, epe = evaluate(model, dataset.test, cfg["train.batch_size"])
    print(f"test accuracy {acc:.4f}  flow EPE {epe:.4f} px")
    return 0


BENCH_ORDER = ("combined", "twostream", "initial")


def cmd_bench(cfg: RunConfig) -> int:
    spec = cfg.network_spec()
    results = {}
    with _maybe_deterministic(cfg):
        for variant in BENCH_ORDER:
            model = build_model(variant, spec, seed=cfg["train.seed"])
            results[variant] = benchmark_fps(
                model, batch=cfg["bench.batch"], runs=cfg["bench.runs"],
                warmup=cfg["bench.warmup"], request_flow=cfg["bench.request_flow"],
                seed=cfg["bench.seed"])
    print(f"{'variant':<12}{'fps':>10}")
    for variant in BENCH_ORDER:
        print(f"{variant:<12}{results[variant]:>10.1f}")
    ordered = (results["combined"] >= results["twostream"] >= results["initial"])
    print(f"ordering combined >= twostream >= initial: {'PASS' if ordered else 'FAIL'}")
    return 0


def cmd_gradcheck(cfg: RunConfig) -> int:
    results = run_gradient_suite(seed=cfg["train.seed"], log=print)
    bad = [r for r in results if not r.ok]
    if bad:
        print(f"{len(bad)} of {len(results)} gradient checks failed")
        raise NumericalError(f"gradient checks failed: {', '.join(r.name for r in bad)}")
    print(f"all {len(results)} gradient checks passed")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxelstream",
        description="Two-stream 3D conv/deconv video networks on synthetic flow data.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", metavar="PATH", help="flat section.key = value file")
        p.add_argument("--variant", choices=VARIANTS)
        p.add_argument("--lambda-flow", type=float, dest="lambda_flow", metavar="F")
        p.add_argument("--seed", type=int, metavar="N",
                       help="overrides both train.seed and synth.seed")
        p.add_argument("--deterministic", action="store_true")
        p.add_argument("--out", metavar="DIR", help="parent directory for run outputs")
    return parser


def entry(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](cfg)
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 3
    except _USAGE_ERRORS as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(entry())
