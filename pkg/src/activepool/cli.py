"""Command-line entry points.

    activepool gen-data --classes 8 --dim 32 --per-class 250 --seed 0 --out data.alp
    activepool run --config experiment.json
    activepool ablate --config experiment.json
    activepool time --config experiment.json --strategies vaal,random,coreset
    activepool export --manifest out/results.manifest.json --out copy.csv
    activepool serve --experiment-config service.json --port 8765 --data-dir ./journals

Output directory defaults to $ACTIVEPOOL_OUTPUT_DIR, then the working
directory. Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from .errors import ConfigurationError, ContractViolation, NumericFailure
from .harness import (
    CurvePoint,
    OUTPUT_DIR_ENV,
    export_results,
    load_config,
    repetition_seeds,
    run_ablation,
    run_experiment,
    time_sampling,
)
from .pool import make_gaussian_mixture, save_dataset


def _out_dir(args) -> Path:
    base = args.out_dir or os.environ.get(OUTPUT_DIR_ENV) or "."
    path = Path(base)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _cmd_gen_data(args) -> int:
    dataset = make_gaussian_mixture(
        classes=args.classes, dim=args.dim, per_class=args.per_class, seed=args.seed,
        test_count=args.test_count, separation=args.separation, spread=args.spread,
        superclasses=args.superclasses)
    save_dataset(dataset, args.out)
    print(f"wrote {args.out}: {len(dataset.train_indices)} train / "
          f"{len(dataset.test_indices)} test, {args.classes} classes, dim {args.dim}")
    return 0


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args)
    curves = run_experiment(cfg, out_dir=out)
    csv_path, manifest_path = export_results(curves, out / "results.csv", cfg=cfg,
                                             seeds=repetition_seeds(cfg))
    for p in curves:
        print(f"fraction {p.labeled_fraction:.2f}: accuracy {p.mean_accuracy:.4f} "
              f"± {p.std_accuracy:.4f} (sampling {p.mean_sample_seconds:.3f}s)")
    print(f"wrote {csv_path} and {manifest_path}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args)
    for variant, curves in run_ablation(cfg).items():
        variant_cfg = dataclasses.replace(cfg, ablation=(variant,))
        csv_path, _ = export_results(curves, out / f"ablation_{variant}.csv", cfg=variant_cfg,
                                     seeds=repetition_seeds(cfg))
        final = curves[-1]
        print(f"{variant}: final accuracy {final.mean_accuracy:.4f} -> {csv_path}")
    return 0


def _cmd_time(args) -> int:
    cfg = load_config(args.config)
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    rows = time_sampling(cfg, strategies, repeats=args.repeats)
    out = _out_dir(args)
    table = out / "sampling_times.csv"
    with open(table, "w") as fh:
        fh.write("strategy,seconds\n")
        for row in rows:
            fh.write(f"{row.strategy},{row.seconds!r}\n")
            print(f"{row.strategy}: {row.seconds:.3f}s")
    print(f"wrote {table}")
    return 0


def _cmd_export(args) -> int:
    manifest = json.loads(Path(args.manifest).read_text())
    curves = [CurvePoint(c["labeled_fraction"], c["mean_accuracy"],
                         c["std_accuracy"], c["mean_sample_seconds"])
              for c in manifest["curves"]]
    with open(args.out, "w") as fh:
        fh.write("fraction,mean,std,time\n")
        for p in curves:
            fh.write(f"{p.labeled_fraction!r},{p.mean_accuracy!r},"
                     f"{p.std_accuracy!r},{p.mean_sample_seconds!r}\n")
    print(f"wrote {args.out}")
    return 0


def _cmd_serve(args) -> int:
    from .service import serve

    serve(args.experiment_config, port=args.port, data_dir=args.data_dir,
          host=args.host, ui_dir=args.ui_dir, ready_file=args.ready_file)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="activepool",
                                     description="Pool-based active-learning engine")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate a synthetic Gaussian-mixture dataset")
    gen.add_argument("--classes", type=int, default=8)
    gen.add_argument("--dim", type=int, default=32)
    gen.add_argument("--per-class", type=int, default=250)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--test-count", type=int, default=None)
    gen.add_argument("--separation", type=float, default=2.2)
    gen.add_argument("--spread", type=float, default=1.0)
    gen.add_argument("--superclasses", type=int, default=None)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=_cmd_gen_data)

    run = sub.add_parser("run", help="run an experiment from a config file")
    run.add_argument("--config", required=True)
    run.add_argument("--out-dir", default=None)
    run.set_defaults(func=_cmd_run)

    ablate = sub.add_parser("ablate", help="run the configured ablation variants")
    ablate.add_argument("--config", required=True)
    ablate.add_argument("--out-dir", default=None)
    ablate.set_defaults(func=_cmd_ablate)

    timing = sub.add_parser("time", help="benchmark selection wall time per strategy")
    timing.add_argument("--config", required=True)
    timing.add_argument("--strategies", default="vaal,random,max_entropy,coreset")
    timing.add_argument("--repeats", type=int, default=3)
    timing.add_argument("--out-dir", default=None)
    timing.set_defaults(func=_cmd_time)

    export = sub.add_parser("export", help="re-export a results manifest as CSV")
    export.add_argument("--manifest", required=True)
    export.add_argument("--out", required=True)
    export.set_defaults(func=_cmd_export)

    serve_cmd = sub.add_parser("serve", help="run the labeling service")
    serve_cmd.add_argument("--experiment-config", required=True)
    serve_cmd.add_argument("--port", type=int, default=8765)
    serve_cmd.add_argument("--data-dir", default=".")
    serve_cmd.add_argument("--host", default="127.0.0.1")
    serve_cmd.add_argument("--ui-dir", default=None)
    serve_cmd.add_argument("--ready-file", default=None, help=argparse.SUPPRESS)
    serve_cmd.set_defaults(func=_cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, ContractViolation) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
