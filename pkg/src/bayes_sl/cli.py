"""Command line: ``bayes-sl [--seed N] [--out-dir DIR] <command> ...``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import nets
from .dropout import count_units
from .errors import BayesSLError, ConfigError
from .experiments import (ExperimentConfig, calibrate_checkpoint, evaluate_checkpoint, run_experiment,
                          shipped_configs, shipped_resource, write_grid)

log = logging.getLogger("bayes_sl")


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out_dir is not None:
        changes["out_dir"] = args.out_dir
    return cfg.replace(**changes) if changes else cfg


def _run_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.out_dir) / cfg.name


def cmd_train(args) -> int:
    cfg = _config(args)
    result = run_experiment(cfg, _run_dir(cfg))
    for r in result.metrics:
        print(f"{r.metric:<28} horizon={r.horizon!s:<3} k={r.k!s:<5} {r.value:.6g}")
    print(f"wrote {result.out_dir} in {result.seconds:.1f}s")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    rows = evaluate_checkpoint(cfg, args.checkpoint, _run_dir(cfg))
    for r in rows:
        print(f"{r.metric:<28} horizon={r.horizon!s:<3} k={r.k!s:<5} {r.value:.6g}")
    return 0


def cmd_calibrate(args) -> int:
    cfg = _config(args)
    checkpoint = args.checkpoint or _run_dir(cfg) / "checkpoint.npz"
    table = calibrate_checkpoint(cfg, checkpoint, _run_dir(cfg))
    for b, conf, freq, count in table.rows():
        print(f"bin {b:2d}  confidence {conf:.4f}  frequency {freq:.4f}  count {count}")
    print(f"ECE {table.ece:.4f}")
    return 0


def load_unit_spec(ref: str) -> dict:
    """A JSON unit-count spec from a path or a shipped name such as ``table10``."""
    path = Path(ref)
    text = path.read_text() if path.exists() else None
    if text is None:
        try:
            text = shipped_resource(f"{ref}.json")
        except FileNotFoundError:
            raise ConfigError(f"no architecture file or shipped spec named {ref!r}") from None
    spec = json.loads(text)
    if "arch" not in spec or "input_hw" not in spec:
        raise ConfigError("a unit-count spec needs 'arch' and 'input_hw'")
    return spec


def unit_report(spec: dict) -> tuple[list[dict], dict]:
    """Formula counts per layer, compared against any printed values in the unit table."""
    exclude = set(spec.get("exclude", []))
    rows = [r for r in nets.conv_rows(spec["arch"], tuple(spec["input_hw"])) if r["name"] not in exclude]
    report = count_units(rows)
    printed = spec.get("printed", {})
    table = []
    for unit in report.rows:
        p_patch, p_weight = printed.get(unit.name, [None, None])
        table.append({"layer": unit.name, "patches": unit.patch_count, "weights": unit.weight_count,
                      "printed_patches": p_patch, "printed_weights": p_weight,
                      "patches_match": p_patch is None or p_patch == unit.patch_count,
                      "weights_match": p_weight is None or p_weight == unit.weight_count})
    totals = {"patches": report.total_patches, "weights": report.total_weights,
              "reduction": report.reduction}
    if "printed_totals" in spec:
        pt = spec["printed_totals"]
        totals.update(printed_patches=pt[0], printed_weights=pt[1], printed_reduction=pt[2])
    return table, totals


def cmd_count_units(args) -> int:
    table, totals = unit_report(load_unit_spec(args.arch))
    header = ["layer", "patches", "weights", "printed_patches", "printed_weights"]
    print(f"{'layer':<8} {'patches':>11} {'weights':>11} {'printed':>23}  note")
    for row in table:
        printed = " / ".join("-" if v is None else f"{v:,}"
                             for v in (row["printed_patches"], row["printed_weights"]))
        notes = [what for what in ("patches", "weights") if not row[f"{what}_match"]]
        note = "differs from printed " + " and ".join(notes) if notes else ""
        print(f"{row['layer']:<8} {row['patches']:>11,} {row['weights']:>11,} {printed:>23}  {note}")
    print(f"total    {totals['patches']:>11,} {totals['weights']:>11,}  reduction {100 * totals['reduction']:.1f}%")
    if "printed_patches" in totals:
        print(f"printed  {totals['printed_patches']:>11,} {totals['printed_weights']:>11,}  "
              f"reduction {totals['printed_reduction']:.1f}%")
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "unit_counts.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=header + ["patches_match", "weights_match"])
            writer.writeheader()
            writer.writerows(table)
    return 0


def cmd_gen_data(args) -> int:
    out = Path(args.out_dir or "data") / args.task
    seed = 0 if args.seed is None else args.seed
    if args.task == "bimodal":
        x, y = D.gen_bimodal_2d(D.Bimodal2DSpec(n=args.n or 2000), seed)
        write_grid(out / "bimodal.csv", np.column_stack([x, y]), header=["x", "y"])
    elif args.task == "mnist":
        paths = D.write_mnist_subset(out, seed=seed)
        for p in paths.values():
            print(p)
    elif args.task == "shapes":
        spec = D.MovingShapesSpec()
        seqs = D.gen_moving_shapes(spec, args.n or 100, seed)
        out.mkdir(parents=True, exist_ok=True)
        np.savez(out / "shapes.npz", frames=seqs.frames, modes=seqs.modes)
        for i in range(min(4, len(seqs.modes))):
            for t in range(seqs.frames.shape[1]):
                write_grid(out / f"seq{i:03d}_t{t}.csv", seqs.frames[i, t])
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bayes-sl", description=__doc__)
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out-dir", default=None, help="override the output root")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train, checkpoint and evaluate one config")
    p.add_argument("config", help=f"JSON path or shipped name ({', '.join(shipped_configs())})")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved checkpoint")
    p.add_argument("config")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("calibrate", help="write calibration.csv for a checkpoint")
    p.add_argument("config")
    p.add_argument("--checkpoint", default=None, help="default: <out-dir>/<name>/checkpoint.npz")
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("count-units", help="patch versus weight dropout unit counts")
    p.add_argument("arch", help="unit-count JSON path or shipped name (table10)")
    p.set_defaults(fn=cmd_count_units)

    p = sub.add_parser("gen-data", help="materialize a dataset")
    p.add_argument("task", choices=["bimodal", "mnist", "shapes"])
    p.add_argument("--n", type=int, default=None, help="number of samples / sequences")
    p.set_defaults(fn=cmd_gen_data)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except BayesSLError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
