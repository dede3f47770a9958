"""Command-line entry points: gen-data, train, eval, gradcheck, route-stats.

Configuration precedence is flags over config file over defaults; the
config file is plain ``key=value`` lines (``#`` comments allowed) using
the flag names with underscores. The environment variable ``MOME_SEED``
is the seed fallback when neither a flag nor the config file sets one.

Exit codes: 0 success, 1 validation or tolerance failure, 2 usage or
configuration error, 3 data or file-format error.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import numcore as nc
from .bpe import load_checkpoint
from .data import synthesize_cohort
from .errors import ConfigError, DataError, MetricError, MomeError, NumericError, UsageError
from .experts import EXPERT_ABBREVIATIONS, ROUTING_LOG_HEADER, ExpertId, format_routing_record
from .gradcheck import DEFAULT_TOLERANCE, run_suite
from .training import (
    METRICS_HEADER,
    RunConfig,
    TrainingAbort,
    evaluate,
    format_metrics_record,
    load_cohort,
    routing_statistics,
    train_cohort,
)

EXIT_OK = 0
EXIT_TOLERANCE = 1
EXIT_USAGE = 2
EXIT_DATA = 3


def _parse_experts(spec: str) -> tuple[bool, bool, bool, bool]:
    """Comma-separated expert abbreviations, e.g. 'tf,snn' or 'all'."""
    if spec.strip().lower() == "all":
        return (True, True, True, True)
    mask = [False] * 4
    for token in spec.split(","):
        token = token.strip().lower()
        if token not in EXPERT_ABBREVIATIONS:
            raise ConfigError(
                f"unknown expert '{token}' (choose from {sorted(EXPERT_ABBREVIATIONS)})"
            )
        mask[int(EXPERT_ABBREVIATIONS[token])] = True
    if not any(mask):
        raise ConfigError("at least one expert must be enabled")
    return tuple(mask)


def _read_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    try:
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value, got '{line}'")
                key, value = line.split("=", 1)
                values[key.strip().replace("-", "_")] = value.strip()
    except OSError as err:
        raise ConfigError(f"cannot read config file {path}: {err}")
    return values


def _env_seed() -> int | None:
    raw = os.environ.get("MOME_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"MOME_SEED must be an integer, got '{raw}'")


_TRAIN_DEFAULTS = RunConfig()

# (flag, config key, type, default, help)
_TRAIN_OPTIONS = [
    ("--epochs", "epochs", int, _TRAIN_DEFAULTS.epochs, "training epochs per fold"),
    ("--lr", "lr", float, _TRAIN_DEFAULTS.lr, "Adam learning rate"),
    ("--weight-decay", "weight_decay", float, _TRAIN_DEFAULTS.weight_decay,
     "L2 weight decay folded into the gradient"),
    ("--folds", "folds", int, _TRAIN_DEFAULTS.folds,
     "fold count when the manifest has no assignment"),
    ("--key-chunk", "key_chunk", int, _TRAIN_DEFAULTS.key_chunk,
     "streaming attention key-block size"),
    ("--dim", "d", int, _TRAIN_DEFAULTS.d, "shared embedding width"),
    ("--rounds", "rounds", int, _TRAIN_DEFAULTS.rounds, "alternating encoding rounds"),
    ("--nb", "n_b", int, _TRAIN_DEFAULTS.n_b, "bottleneck token count"),
    ("--heads", "head_count", int, _TRAIN_DEFAULTS.head_count, "attention heads"),
    ("--bins", "time_bins", int, _TRAIN_DEFAULTS.time_bins, "discrete time bins"),
    ("--dropout", "dropout_rate", float, _TRAIN_DEFAULTS.dropout_rate,
     "alpha-dropout rate inside the SNN expert"),
    ("--grad-accum", "grad_accum", int, _TRAIN_DEFAULTS.grad_accum,
     "samples accumulated per optimizer step"),
    ("--seed", "seed", int, None, "run seed (falls back to MOME_SEED, then 0)"),
]


def _add_train_options(parser: argparse.ArgumentParser) -> None:
    for flag, key, typ, default, help_text in _TRAIN_OPTIONS:
        shown = "MOME_SEED or 0" if default is None else default
        parser.add_argument(flag, dest=key, type=typ, default=argparse.SUPPRESS,
                            help=f"{help_text} (default: {shown})")
    parser.add_argument("--experts", default=argparse.SUPPRESS,
                        help="comma list of enabled experts: tf,btf,snn,df (default: all)")
    parser.add_argument("--first-encoded", choices=("pathology", "genomics"),
                        default=argparse.SUPPRESS,
                        help="modality encoded first each round (default: pathology)")
    parser.add_argument("--risk-mode", choices=("neg_survival_sum", "hazard_sum"),
                        default=argparse.SUPPRESS,
                        help="risk scalar reduction (default: neg_survival_sum)")
    parser.add_argument("--no-prob-scaling", action="store_true", default=argparse.SUPPRESS,
                        help="do not scale expert outputs by the gate probability")
    parser.add_argument("--decoupled-wd", action="store_true", default=argparse.SUPPRESS,
                        help="decoupled weight decay instead of L2-coupled")
    parser.add_argument("--config", help="key=value config file (flags override it)")


def _build_run_config(args: argparse.Namespace) -> RunConfig:
    """Merge defaults < config file < explicit flags into a RunConfig."""
    file_values = _read_config_file(args.config) if getattr(args, "config", None) else {}
    merged: dict[str, object] = {}
    for flag, key, typ, _default, _help in _TRAIN_OPTIONS:
        flag_name = flag.lstrip("-").replace("-", "_")
        for spelling in (key, flag_name):
            if spelling in file_values:
                merged[key] = typ(file_values[spelling])
    for key, caster in (
        ("experts", str), ("first_encoded", str), ("risk_mode", str),
        ("no_prob_scaling", lambda v: v.lower() in ("1", "true", "yes")),
        ("decoupled_wd", lambda v: v.lower() in ("1", "true", "yes")),
    ):
        if key in file_values:
            merged[key] = caster(file_values[key])
    for key, value in vars(args).items():
        if key in ("command", "manifest", "out", "config", "checkpoint", "metrics", "func"):
            continue
        merged[key] = value

    run = RunConfig()
    if merged.get("seed") is None:
        env = _env_seed()
        merged["seed"] = env if env is not None else run.seed
    for key in ("epochs", "lr", "weight_decay", "folds", "key_chunk", "d", "rounds",
                "n_b", "head_count", "time_bins", "dropout_rate", "grad_accum", "seed",
                "first_encoded", "risk_mode"):
        if key in merged and merged[key] is not None:
            setattr(run, key, merged[key])
    if "experts" in merged:
        run.enable_mask = _parse_experts(str(merged["experts"]))
    if merged.get("no_prob_scaling"):
        run.scale_by_gate_prob = False
    if merged.get("decoupled_wd"):
        run.decoupled_decay = True
    return run


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args: argparse.Namespace) -> int:
    seed = args.seed
    if seed is None:
        env = _env_seed()
        seed = env if env is not None else 0
    manifest = synthesize_cohort(
        n_samples=args.n,
        n_patches=args.patches,
        dim=args.dim,
        signal=args.signal,
        censor_rate=args.censor_rate,
        seed=seed,
        out_dir=args.out,
        folds=args.folds,
    )
    print(manifest)
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    run = _build_run_config(args)
    os.makedirs(args.out, exist_ok=True)
    metrics_path = os.path.join(args.out, "metrics.csv")
    with open(metrics_path, "w") as metrics:
        metrics.write(METRICS_HEADER + "\n")

        def emit(record):
            line = format_metrics_record(record)
            metrics.write(line + "\n")
            print(line)

        summary = train_cohort(run, args.manifest, args.out, emit)
    for result in summary.fold_results:
        print(
            f"fold {result.fold} best_val_c_index={result.best_c_index:.6f} "
            f"(epoch {result.best_epoch}) checkpoint={result.checkpoint_path}"
        )
    print(f"c_index {summary.mean_c_index:.6f}±{summary.std_c_index:.6f}")
    print(f"metrics written to {metrics_path}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.checkpoint)
    cohort = load_cohort(args.manifest, model.config.time_bins)
    if args.fold is not None:
        indices = [i for i, r in enumerate(cohort.rows) if r.fold == args.fold]
        if not indices:
            raise DataError(f"manifest has no rows in fold {args.fold}")
    else:
        indices = list(range(len(cohort.rows)))
    with nc.no_grad():
        loss, score, _ = evaluate(model, cohort, indices, key_chunk=args.key_chunk)
    print(f"samples={len(indices)} loss={loss:.6f} c_index={score:.6f}")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    components = [args.component] if args.component else None
    results = run_suite(components, seeds=args.seeds, tolerance=args.tolerance)
    failed = False
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        note = ""
        if r.name == "dropf2" and r.max_error == 0.0:
            note = " (reference-modality gradient exactly zero)"
        print(
            f"{r.name:24s} max_rel_err={r.max_error:.3e} seeds={r.seeds} "
            f"{status}{note} [{r.wall_seconds:.2f}s]"
        )
        failed = failed or not r.passed
    return EXIT_TOLERANCE if failed else EXIT_OK


def cmd_route_stats(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.checkpoint)
    cohort = load_cohort(args.manifest, model.config.time_bins)
    stats = routing_statistics(model, cohort, key_chunk=args.key_chunk)
    n = len(cohort.rows)
    names = [e.name.lower() for e in ExpertId]
    print("layer," + ",".join(names))
    for layer, counts in enumerate(stats.histogram):
        assert int(counts.sum()) == n
        print(f"{layer}," + ",".join(str(int(c)) for c in counts))
    print(f"sample_level_diversity={'yes' if stats.sample_level_diversity else 'no'}")
    print(f"layer_level_diversity={'yes' if stats.layer_level_diversity else 'no'}")
    if args.log_out:
        with open(args.log_out, "w") as fh:
            fh.write(ROUTING_LOG_HEADER + "\n")
            for record in stats.records:
                fh.write(format_routing_record(record) + "\n")
        print(f"routing log written to {args.log_out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mome",
        description="Multimodal mixture-of-experts survival model: data synthesis, "
        "training, evaluation, gradient checking, and routing analysis.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="synthesize a multimodal cohort")
    gen.add_argument("--n", type=int, default=64, help="number of samples (default: 64)")
    gen.add_argument("--patches", type=int, default=128,
                     help="patch tokens per sample (default: 128)")
    gen.add_argument("--dim", type=int, default=64, help="patch feature width (default: 64)")
    gen.add_argument("--signal", choices=("patho", "geno", "cross"), default="cross",
                     help="where the risk signal is planted (default: cross)")
    gen.add_argument("--censor-rate", type=float, default=0.3,
                     help="target censoring fraction (default: 0.3)")
    gen.add_argument("--folds", type=int, default=5,
                     help="cross-validation folds to assign (default: 5)")
    gen.add_argument("--seed", type=int, default=None,
                     help="generator seed (default: MOME_SEED or 0)")
    gen.add_argument("--out", required=True, help="output directory (required)")
    gen.set_defaults(func=cmd_gen_data)

    train = sub.add_parser("train", help="cross-validated training with metrics stream")
    train.add_argument("--manifest", required=True, help="cohort manifest path")
    train.add_argument("--out", required=True, help="directory for checkpoints and metrics")
    _add_train_options(train)
    train.set_defaults(func=cmd_train)

    evl = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    evl.add_argument("--checkpoint", required=True)
    evl.add_argument("--manifest", required=True)
    evl.add_argument("--fold", type=int, default=None, help="restrict to one fold")
    evl.add_argument("--key-chunk", type=int, default=RunConfig().key_chunk,
                     help=f"attention key-block size (default: {RunConfig().key_chunk})")
    evl.set_defaults(func=cmd_eval)

    grad = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    grad.add_argument("--component", default=None,
                      help="check one named component instead of all")
    grad.add_argument("--seeds", type=int, default=100,
                      help="random instances per component (default: 100)")
    grad.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE,
                      help=f"max relative error allowed (default: {DEFAULT_TOLERANCE})")
    grad.set_defaults(func=cmd_gradcheck)

    route = sub.add_parser("route-stats", help="expert routing histogram for a checkpoint")
    route.add_argument("--checkpoint", required=True)
    route.add_argument("--manifest", required=True)
    route.add_argument("--key-chunk", type=int, default=RunConfig().key_chunk)
    route.add_argument("--log-out", default=None, help="also write the full routing log CSV")
    route.set_defaults(func=cmd_route_stats)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except TrainingAbort as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_TOLERANCE
    except (ConfigError, UsageError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, MetricError) as err:  # FormatError is a DataError
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_TOLERANCE
    except MomeError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
