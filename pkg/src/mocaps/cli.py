"""``mocaps`` command line: train, eval, benchmarks and verification checks.

Effective settings are resolved as built-in defaults, then per-command
defaults, then the ``--config`` file, then ``-o key=value`` pairs, then
explicit flags.  Every command writes ``resolved_config.toml`` to
``out_dir``.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 a verification
check exceeded its tolerance.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_CHECK_FAILED = 0, 1, 2, 3

COMMANDS = {
    "train": "train a network, write metrics.csv and checkpoint.mocp",
    "eval": "test accuracy of a saved checkpoint",
    "bench-memory": "peak activation bytes vs depth",
    "bench-time": "training-step and inference wall-clock vs depth",
    "check-invert": "round-trip error of the momentum chain inverse",
    "check-grad": "tape gradients vs finite differences",
    "check-equivalence": "reversible vs stored gradients",
}

log = logging.getLogger("mocaps")


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_str(text):
    return None if text in (None, "") else str(text)


# name -> (parser, default, help)
KNOBS = {
    "dataset": (str, "mnist", "mnist | cifar10 | svhn | synthetic"),
    "data_dir": (_opt_str, None, "dataset directory (falls back to $MOCAPS_DATA_DIR)"),
    "variant": (str, "mocapsnet", "mocapsnet | rescapsnet | capsnet"),
    "blocks": (int, 1, "residual blocks; for bench/check commands the deepest depth tried"),
    "gamma": (float, 0.9, "momentum factor in [0, 1]"),
    "capsules": (int, 32, "capsules per chain layer"),
    "capsule_dim": (int, 16, "capsule dimension in the chain"),
    "routing_iters": (int, 3, "routing-by-agreement iterations"),
    "batch_size": (int, 128, "training batch size"),
    "lr": (float, 1e-3, "base learning rate"),
    "lr_decay": (float, 0.96, "per-epoch learning-rate decay"),
    "epochs": (int, 30, "training epochs"),
    "lambda_recon": (float, 5e-4, "reconstruction loss weight"),
    "seed": (int, 0, "master seed; every random stream is split from it"),
    "dtype": (str, "f32", "f32 | f64"),
    "mode": (str, "reversible", "reversible | stored backward"),
    "out_dir": (str, "runs", "artifact directory"),
    "init_std": (float, 0.01, "stddev of capsule transformation matrices"),
    "stem_channels": (int, 256, "channels of the convolutional stem"),
    "primary_groups": (int, 32, "primary capsule channel groups"),
    "n_train": (int, 0, "use the first N training samples (0 = all; synthetic default 1000)"),
    "n_test": (int, 0, "use the first N test samples (0 = all; synthetic default 500)"),
    "eval_batch_size": (int, 256, "evaluation batch size"),
    "clip_norm": (float, 0.0, "global gradient-norm clip (0 = off)"),
    "augment": (_bool, True, "pad-and-crop augmentation during training"),
    "threads": (int, 1, "BLAS/OpenMP threads (1 = single-threaded, reproducible)"),
    "checkpoint": (_opt_str, None, "checkpoint path for eval (default out_dir/checkpoint.mocp)"),
    "trials": (int, 20, "random trials per depth for checks"),
    "tolerance": (float, 0.0, "check tolerance (0 = the command's default)"),
    "repeats": (int, 5, "timed repeats per point in bench-time"),
    "bench_batch": (int, 32, "batch size for benchmarks"),
    "emit_plot_data": (_bool, False, "write x/y series files for plotting"),
}

_DESK = {"dataset": "synthetic", "stem_channels": 32, "primary_groups": 8, "init_std": 0.1}

COMMAND_DEFAULTS = {
    "train": {},
    "eval": {},
    "bench-memory": {**_DESK, "blocks": 8},
    "bench-time": {**_DESK, "blocks": 8},
    "check-invert": {"blocks": 8, "dtype": "f64", "init_std": 0.1},
    "check-grad": {"dtype": "f64"},
    "check-equivalence": {"blocks": 4, "dtype": "f64", "trials": 10},
}

CHECK_TOLERANCE = {"check-invert": 1e-6, "check-grad": 1e-4, "check-equivalence": 1e-6}


class UsageError(Exception):
    pass


def _coerce(key, raw):
    if key not in KNOBS:
        raise UsageError(f"unknown key {key!r}; valid keys: {', '.join(sorted(KNOBS))}")
    parse = KNOBS[key][0]
    try:
        return parse(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad value for {key}: {raw!r} ({exc})") from None


def load_config_file(path) -> dict:
    """Flat TOML: strings, integers, floats and booleans only.

    A top-level ``command`` key (as written to ``resolved_config.toml``) is
    ignored, so a resolved config can be fed back in.
    """
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"invalid config {path}: {exc}") from None
    out = {}
    raw.pop("command", None)
    for key, val in raw.items():
        if isinstance(val, (dict, list)):
            raise UsageError(f"config key {key!r}: nested tables and arrays are not supported")
        out[key] = _coerce(key, val)
    return out


def _gamma_arg(text):
    try:
        g = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid float {text!r}") from None
    if not 0.0 <= g <= 1.0:
        raise argparse.ArgumentTypeError(f"gamma must lie in [0, 1], got {g}")
    return g


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="mocaps",
        description="Capsule networks with momentum-reversible residual blocks.",
        epilog="exit codes: 0 ok, 1 runtime failure, 2 usage error, 3 check failed",
    )
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    for name in COMMANDS:
        sp = sub.add_parser(name, help=COMMANDS[name], argument_default=argparse.SUPPRESS)
        sp.add_argument("--config", help="flat TOML file of key = value settings")
        sp.add_argument("-o", "--override", action="append", metavar="KEY=VALUE",
                        help="set any key (repeatable)")
        sp.add_argument("-v", "--verbose", action="store_true")
        for key, (parse, default, text) in KNOBS.items():
            flag = "--" + key.replace("_", "-")
            if parse is _bool:
                sp.add_argument(flag, dest=key, action=argparse.BooleanOptionalAction,
                                help=f"{text} (default {default})")
            else:
                kind = _gamma_arg if key == "gamma" else (str if parse is _opt_str else parse)
                sp.add_argument(flag, dest=key, type=kind, help=f"{text} (default {default})")
    return p


def resolve(args: argparse.Namespace) -> dict:
    ns = vars(args)
    cfg = {k: spec[1] for k, spec in KNOBS.items()}
    cfg.update(COMMAND_DEFAULTS[args.command])
    if ns.get("config"):
        cfg.update(load_config_file(ns["config"]))
    for item in ns.get("override") or ():
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"override {item!r} is not KEY=VALUE")
        cfg[key.strip()] = _coerce(key.strip(), raw.strip())
    for key in KNOBS:
        if key in ns:
            cfg[key] = ns[key]
    if cfg["data_dir"] is None and os.environ.get("MOCAPS_DATA_DIR"):
        cfg["data_dir"] = os.environ["MOCAPS_DATA_DIR"]
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    from mocaps.model import DATASETS, VARIANTS
    from mocaps.reversible import MODES

    if not 0.0 <= cfg["gamma"] <= 1.0:
        raise UsageError(f"gamma must lie in [0, 1], got {cfg['gamma']}")
    choices = {"dataset": sorted(DATASETS), "variant": VARIANTS, "mode": MODES,
               "dtype": ("f32", "f64", "float32", "float64")}
    for key, allowed in choices.items():
        if cfg[key] not in allowed:
            raise UsageError(f"{key} must be one of {', '.join(allowed)}; got {cfg[key]!r}")
    for key in ("capsules", "capsule_dim", "routing_iters", "batch_size", "epochs", "threads",
                "trials", "repeats", "bench_batch", "eval_batch_size"):
        if cfg[key] < 1:
            raise UsageError(f"{key} must be >= 1")
    for key in ("blocks", "n_train", "n_test", "seed", "clip_norm", "tolerance"):
        if cfg[key] < 0:
            raise UsageError(f"{key} must be >= 0")
    if cfg["lr"] <= 0 or not 0 < cfg["lr_decay"] <= 1:
        raise UsageError("need lr > 0 and lr_decay in (0, 1]")


def write_resolved(cfg: dict, command: str, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"# effective settings for `mocaps {command}`", f'command = "{command}"']
    for key in KNOBS:
        val = cfg[key]
        if val is None:
            lines.append(f"# {key} unset")
        elif isinstance(val, bool):
            lines.append(f"{key} = {'true' if val else 'false'}")
        elif isinstance(val, str):
            lines.append(f"{key} = {json.dumps(val)}")
        else:
            lines.append(f"{key} = {val!r}")
    path = out_dir / "resolved_config.toml"
    path.write_text("\n".join(lines) + "\n")
    return path


# -- command implementations --------------------------------------------------

def network_config(cfg: dict):
    from mocaps.model import NetworkConfig
    return NetworkConfig(
        dataset=cfg["dataset"], n_blocks=cfg["blocks"], capsules=cfg["capsules"],
        capsule_dim=cfg["capsule_dim"], routing_iterations=cfg["routing_iters"], gamma=cfg["gamma"],
        variant=cfg["variant"], dtype=cfg["dtype"], stem_channels=cfg["stem_channels"],
        primary_groups=cfg["primary_groups"], lambda_recon=cfg["lambda_recon"], init_std=cfg["init_std"],
    )


def load_split(cfg: dict, split: str):
    """Dataset for ``split`` ("train" or "test"), truncated to n_train/n_test."""
    from mocaps import data as D
    from mocaps.tensor import RngState

    limit = cfg["n_train" if split == "train" else "n_test"]
    name = cfg["dataset"]
    if name == "synthetic":
        n = limit or (1000 if split == "train" else 500)
        return D.synthetic(10, n, 28, RngState(cfg["seed"]).split(f"data-{split}"))
    if not cfg["data_dir"]:
        raise FileNotFoundError(f"dataset {name!r} needs --data-dir or $MOCAPS_DATA_DIR")
    root = Path(cfg["data_dir"])
    if not root.is_dir():
        raise FileNotFoundError(f"data directory {root} does not exist")
    if name == "mnist":
        ds = D.load_idx(*D.find_mnist(root, split))
    elif name == "cifar10":
        ds = D.load_cifar10(root, split)
    else:
        ds = D.load_svhn_idx(root / f"{split}-images-idx4-ubyte", root / f"{split}-labels-idx1-ubyte")
    return ds.subset(slice(0, limit)) if limit else ds


def cmd_train(cfg: dict, out: Path) -> int:
    from mocaps.model import checkpoint_save
    from mocaps.optim import TrainConfig, train

    net = network_config(cfg)
    train_set, test_set = load_split(cfg, "train"), load_split(cfg, "test")
    tc = TrainConfig(network=net, epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"],
                     lr_decay=cfg["lr_decay"], seed=cfg["seed"], mode=cfg["mode"],
                     clip_norm=cfg["clip_norm"] or None, eval_batch_size=cfg["eval_batch_size"],
                     augment=cfg["augment"])
    with open(out / "metrics.csv", "w", newline="") as sink:
        report = train(tc, train_set, test_set, sink=sink)
    checkpoint_save(report.params, out / "checkpoint.mocp")
    last = report.rows[-1] if report.rows else None
    if last is not None:
        print(f"epoch {last.epoch}: train_loss {last.train_loss:.5f} test_acc {last.test_acc:.4f}")
    print(f"wrote {out / 'metrics.csv'} and {out / 'checkpoint.mocp'}")
    return EXIT_OK


def cmd_eval(cfg: dict, out: Path) -> int:
    from mocaps.model import checkpoint_load
    from mocaps.optim import evaluate

    net = network_config(cfg)
    path = Path(cfg["checkpoint"]) if cfg["checkpoint"] else out / "checkpoint.mocp"
    params = checkpoint_load(path, net)
    acc = evaluate(net, params, load_split(cfg, "test"), cfg["eval_batch_size"])
    print(f"test_acc {acc:.6f}")
    return EXIT_OK


def _bench_base(cfg: dict):
    from dataclasses import replace
    return replace(network_config(cfg), n_blocks=1)


def _depths(cfg: dict) -> range:
    if cfg["blocks"] < 2:
        raise UsageError("benchmarks fit a slope and need --blocks >= 2")
    return range(1, cfg["blocks"] + 1)


def cmd_bench_memory(cfg: dict, out: Path) -> int:
    from mocaps.bench.measure import measure_memory, write_csv, write_plot_data

    runs = ("reversible", "stored", "rescapsnet")
    rep = measure_memory(_depths(cfg), runs, _bench_base(cfg), cfg["bench_batch"], cfg["seed"])
    write_csv(rep.csv_rows(), out / "bench_memory.csv")
    print(rep.table())
    ratio = rep.fits["reversible"].slope / rep.fits["stored"].slope
    print(f"reversible/stored slope ratio = {ratio:.3g}")
    if cfg["emit_plot_data"]:
        write_plot_data({f"memory_{r}": (list(_depths(cfg)), rep.peaks(r)) for r in runs}, out / "plot")
    return EXIT_OK


def cmd_bench_time(cfg: dict, out: Path) -> int:
    from mocaps.bench.measure import measure_time, write_csv, write_plot_data

    runs = ("reversible", "stored", "rescapsnet")
    rep = measure_time(_depths(cfg), runs, _bench_base(cfg), cfg["bench_batch"], cfg["repeats"], cfg["seed"])
    write_csv(rep.csv_rows(), out / "bench_time.csv")
    print(rep.table())
    for base in ("rescapsnet", "stored"):
        print(f"vs {base}: train slope ratio {rep.train_slope_ratio('reversible', base):.3f}, "
              f"inference ratio {rep.inference_ratio('reversible', base):.3f}")
    if cfg["emit_plot_data"]:
        series = {}
        for r in runs:
            series[f"train_{r}"] = (list(_depths(cfg)), rep._col(r, "train_median"))
            series[f"infer_{r}"] = (list(_depths(cfg)), rep._col(r, "infer_median"))
        write_plot_data(series, out / "plot")
    return EXIT_OK


def _tolerance(cfg: dict, command: str) -> float:
    return cfg["tolerance"] or CHECK_TOLERANCE[command]


def cmd_check_invert(cfg: dict, out: Path) -> int:
    from mocaps.bench.checks import invert_check

    if cfg["gamma"] == 0:
        raise UsageError("the momentum step is not invertible at gamma = 0")
    rep = invert_check(cfg["gamma"], range(1, cfg["blocks"] + 1), cfg["trials"], cfg["dtype"],
                       cfg["capsules"], cfg["capsule_dim"], init_std=cfg["init_std"],
                       routing_iterations=cfg["routing_iters"],
                       tolerance=_tolerance(cfg, "check-invert"), seed=cfg["seed"])
    for line in rep.lines():
        print(line)
    print(f"worst relative error {rep.worst:.3e} (tolerance {rep.tolerance:g}): "
          f"{'PASS' if rep.passed else 'FAIL'}")
    return EXIT_OK if rep.passed else EXIT_CHECK_FAILED


def cmd_check_grad(cfg: dict, out: Path) -> int:
    from mocaps.bench.checks import model_grad_check, tiny_config

    net = tiny_config(gamma=cfg["gamma"], variant=cfg["variant"], dtype=cfg["dtype"],
                      n_blocks=max(cfg["blocks"], 0), routing_iterations=cfg["routing_iters"])
    rep = model_grad_check(net, cfg["mode"] if cfg["variant"] == "mocapsnet" else "stored",
                           tolerance=_tolerance(cfg, "check-grad"), seed=cfg["seed"])
    for name, err in rep.max_rel_error.items():
        print(f"{name:<12} max_rel_err={err:.3e}")
    print(f"{rep.param_count} parameters, worst {rep.worst:.3e} (tolerance {rep.tolerance:g}): "
          f"{'PASS' if rep.passed else 'FAIL'}")
    return EXIT_OK if rep.passed else EXIT_CHECK_FAILED


def cmd_check_equivalence(cfg: dict, out: Path) -> int:
    from mocaps.bench.checks import equivalence_check, tiny_config

    if cfg["gamma"] == 0:
        raise UsageError("reversible mode needs gamma > 0")
    base = tiny_config(capsules=8, capsule_dim=8, gamma=cfg["gamma"], dtype=cfg["dtype"],
                       routing_iterations=cfg["routing_iters"])
    rep = equivalence_check(base, range(1, max(cfg["blocks"], 1) + 1), cfg["trials"],
                            tolerance=_tolerance(cfg, "check-equivalence"), seed=cfg["seed"])
    for line in rep.lines():
        print(line)
    print(f"worst relative error {rep.worst:.3e} (tolerance {rep.tolerance:g}), finite={rep.finite}: "
          f"{'PASS' if rep.passed else 'FAIL'}")
    return EXIT_OK if rep.passed else EXIT_CHECK_FAILED


HANDLERS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "bench-memory": cmd_bench_memory,
    "bench-time": cmd_bench_time,
    "check-invert": cmd_check_invert,
    "check-grad": cmd_check_grad,
    "check-equivalence": cmd_check_equivalence,
}


def run(command: str, cfg: dict) -> int:
    from threadpoolctl import threadpool_limits

    out = Path(cfg["out_dir"])
    write_resolved(cfg, command, out)
    with threadpool_limits(limits=cfg["threads"]):
        return HANDLERS[command](cfg, out)


def main(argv=None) -> int:
    from mocaps.model import CheckpointError

    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve(args)
        return run(args.command, cfg)
    except UsageError as exc:
        print(f"mocaps {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError, CheckpointError) as exc:
        print(f"mocaps {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
