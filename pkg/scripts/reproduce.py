"""Run shipped experiments over several seeds and print one summary table.

    python3 scripts/reproduce.py --configs bimodal-sl bimodal-s --seeds 0 1 2
"""
import argparse
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

from bayes_sl.experiments import ExperimentConfig, run_experiment

DEFAULT_CONFIGS = ["bimodal-sl", "bimodal-s", "mnist-sl", "mnist-s", "shapes-sl", "shapes-det"]


@dataclass
class ReproduceConfig:
    configs: list[str] = field(default_factory=lambda: list(DEFAULT_CONFIGS))
    seeds: list[int] = field(default_factory=lambda: [0])
    out_dir: Path = Path("runs")


def reproduce(rc: ReproduceConfig) -> list[dict]:
    summary = []
    for name in rc.configs:
        for seed in rc.seeds:
            cfg = ExperimentConfig.load(name).replace(seed=seed, out_dir=str(rc.out_dir))
            result = run_experiment(cfg, rc.out_dir / f"{name}_seed{seed}")
            for r in result.metrics:
                summary.append({"config": name, "seed": seed, "metric": r.metric, "horizon": r.horizon,
                                "k": r.k, "value": r.value, "seconds": round(result.seconds, 1)})
            print(f"{name} seed {seed}: {result.seconds:.0f}s -> {result.out_dir}", flush=True)
    return summary


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--configs", nargs="+", default=DEFAULT_CONFIGS)
    parser.add_argument("--seeds", nargs="+", type=int, default=[0])
    parser.add_argument("--out-dir", type=Path, default=Path("runs"))
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    rc = ReproduceConfig(args.configs, args.seeds, args.out_dir)
    summary = reproduce(rc)
    rc.out_dir.mkdir(parents=True, exist_ok=True)
    with open(rc.out_dir / "summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(summary[0]))
        writer.writeheader()
        writer.writerows(summary)
    for row in summary:
        k = f" k={row['k']}" if row["k"] != "" else ""
        h = f" h={row['horizon']}" if row["horizon"] != "" else ""
        print(f"{row['config']:<11} seed {row['seed']}  {row['metric']}{h}{k}: {row['value']:.4g}")


if __name__ == "__main__":
    main()
