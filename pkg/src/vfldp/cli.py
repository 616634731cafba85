"""Command-line entry point: ``vfldp {run,sweep,calibrate,gradcheck}``.

Exit codes: 0 success, 2 configuration error, 3 runtime fault,
4 privacy budget exhausted.
"""
import argparse
import json
import logging
import sys
from pathlib import Path


from . import data as dpl
from . import dp as dpe
from . import protocol, rng, runner
from .errors import BudgetExhausted, ConfigError, IngestionError, VfldpError
from .tensor import finite_difference_check

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_BUDGET = 4

# flag name -> (dest field, argparse kwargs)
_EXPERIMENT_FLAGS = [
    ("--dataset", dict(choices=sorted(dpl.DATASETS))),
    ("--n-owners", dict(type=int)),
    ("--mode", dict(choices=runner.MODES)),
    ("--epsilon", dict(type=float)),
    ("--delta", dict(type=float)),
    ("--epochs", dict(type=int)),
    ("--batch-size", dict(type=int)),
    ("--lr", dict(type=float)),
    ("--seed", dict(type=int)),
    ("--noise-point", dict(choices=dpe.NOISE_POINTS)),
    ("--clip-mode", dict(choices=("warmup", "fixed"))),
    ("--clip-s", dict(type=float)),
    ("--clip-percentile", dict(type=float)),
    ("--clip-window", dict(type=int)),
    ("--per-layer-limits", dict(help="comma-separated per-layer limits")),
    ("--layer-limit-rule", dict(choices=(dpe.AS_PRINTED, dpe.SUM_OF_SQUARES))),
    ("--c2", dict(type=float)),
    ("--dp-iterations", dict(type=int, help="T used for calibration and accounting")),
    ("--lam", dict(type=float, help="L2 regularization strength on bottom models")),
    ("--data-source", dict(choices=("fixture", "full"))),
    ("--data-dir", dict(help=f"directory of full datasets (default ${dpl.DATA_DIR_ENV})")),
    ("--feature-subsample", dict(type=int)),
    ("--test-fraction", dict(type=float)),
    ("--scheduler", dict(choices=("sequential", "threaded"))),
]


def _add_experiment_flags(p, skip=()):
    for flag, kw in _EXPERIMENT_FLAGS:
        if flag in skip:
            continue
        p.add_argument(flag, default=None, **kw)
    p.add_argument("--config", type=Path, help="key = value file mirroring these flags")


def _experiment_mapping(args, skip=()):
    mapping = runner.read_config_file(args.config) if args.config else {}
    for flag, _ in _EXPERIMENT_FLAGS:
        if flag in skip:
            continue
        dest = flag[2:].replace("-", "_")
        value = getattr(args, dest)
        if value is not None:
            mapping[dest] = value
    return mapping


def build_parser():
    parser = argparse.ArgumentParser(prog="vfldp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment cell")
    _add_experiment_flags(p)
    p.add_argument("--out", type=Path, default=Path("results"))
    p.add_argument("--timing", action="store_true", help="include wall_ms in records")

    p = sub.add_parser("sweep", help="run a resumable experiment grid")
    _add_experiment_flags(p, skip=("--dataset", "--n-owners", "--mode", "--epsilon"))
    p.add_argument("--datasets", default=",".join(runner.DEFAULT_DATASETS))
    p.add_argument("--owners", default=",".join(str(n) for n in runner.DEFAULT_OWNERS))
    p.add_argument("--epsilons", default=",".join(f"{e:g}" for e in runner.DEFAULT_EPSILONS))
    p.add_argument("--no-baselines", action="store_true")
    p.add_argument("--out", type=Path, default=Path("results"))
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--timing", action="store_true")

    p = sub.add_parser("calibrate", help="print the Gaussian noise multiplier sigma")
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--delta", type=float, default=0.001)
    p.add_argument("--iterations", type=int, default=100)
    p.add_argument("--sample-prob", type=float, default=1.0)
    p.add_argument("--c2", type=float, default=1.0)

    p = sub.add_parser("gradcheck", help="finite-difference check of the split architecture")
    p.add_argument("--dataset", default="adult", choices=sorted(dpl.DATASETS))
    p.add_argument("--n-owners", type=int, default=3)
    p.add_argument("--rows", type=int, default=16)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data-source", default="fixture", choices=("fixture", "full"))
    p.add_argument("--data-dir")
    p.add_argument("--feature-subsample", type=int)
    return parser


def _split_list(text, cast):
    try:
        return tuple(cast(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"cannot parse list {text!r}") from None


def cmd_run(args):
    cfg = runner.config_from_mapping(_experiment_mapping(args))
    result = runner.run(cfg)
    path = runner.write_results(result, args.out, args.timing)
    summary = result.summary()
    print(json.dumps(summary))
    print(f"wrote {path}", file=sys.stderr)
    return EXIT_BUDGET if result.status == "budget_exhausted" else EXIT_OK


def cmd_sweep(args):
    skip = ("--dataset", "--n-owners", "--mode", "--epsilon")
    base = {k: runner.coerce_field(k, v) for k, v in _experiment_mapping(args, skip).items()}
    grid = runner.GridSpec(
        datasets=_split_list(args.datasets, str),
        owners=_split_list(args.owners, int),
        epsilons=_split_list(args.epsilons, float),
        baselines=not args.no_baselines,
        base=base,
    )
    cells = grid.cells()  # validates every cell before training starts
    res = runner.sweep(grid, args.out, timing=args.timing, jobs=args.jobs,
                       on_cell=lambda cid: print(f"done {cid}", file=sys.stderr))
    print(json.dumps({"cells": len(cells), "executed": len(res.executed),
                      "skipped": len(res.skipped), "summary": str(res.summary_path)}))
    return EXIT_OK


def cmd_calibrate(args):
    cfg = dpe.DpConfig(epsilon=args.epsilon, delta=args.delta, iterations=args.iterations,
                       sample_prob=args.sample_prob, c2=args.c2)
    print(f"{dpe.calibrate_sigma(cfg):.10g}")
    return EXIT_OK


def gradcheck(dataset="adult", n_owners=3, rows=16, step=1e-5, tolerance=1e-4, seed=0,
              data_source="fixture", data_dir=None, feature_subsample=None):
    """Finite-difference check of the monolithic equivalent of the split network."""
    table = dpl.load_dataset(dataset, data_source, data_dir, feature_subsample)
    spec = table.spec
    pre = dpl.preprocess(table)
    cols = dpl.partition_columns(spec.n_features, n_owners).expand(pre.groups)
    bottoms = [
        protocol.bottom_model(len(c), rng.generator("gradcheck", seed, i)) for i, c in enumerate(cols)
    ]
    top = protocol.top_model(n_owners, spec.n_outputs, rng.generator("gradcheck", seed, "host"))
    model = protocol.monolithic_model(bottoms, top, cols, pre.features.shape[1])
    # move biases off zero so bias gradients are exercised away from the init point
    for k, layer in enumerate(model.layers):
        layer.bias[:] = rng.generator("gradcheck-bias", seed, k).normal(0.0, 0.1, layer.bias.shape)
    pick = rng.generator("gradcheck-rows", seed).choice(pre.features.shape[0], size=rows, replace=False)
    return finite_difference_check(model, pre.features[pick], pre.labels[pick], spec.loss_kind, step, tolerance)


def cmd_gradcheck(args):
    report = gradcheck(args.dataset, args.n_owners, args.rows, args.step, args.tolerance, args.seed,
                       args.data_source, args.data_dir, args.feature_subsample)
    print(json.dumps(report.as_dict()))
    return EXIT_OK if report.passed else EXIT_RUNTIME


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "calibrate": cmd_calibrate, "gradcheck": cmd_gradcheck}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, IngestionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BudgetExhausted as exc:
        print(f"budget exhausted: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except VfldpError as exc:
        print(f"runtime fault: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
