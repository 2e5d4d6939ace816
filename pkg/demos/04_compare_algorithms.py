"""Side-by-side run of every local objective on one toy federation.

All algorithms share the data, the partition, the initial model and the
client sampling, so the curves differ only through the local loss. The
table reports the final and best global accuracy and how many rounds each
method needed to reach FedAvg's final accuracy.
"""

from __future__ import annotations

import argparse

from fedssd import cli
from fedssd.federation import run_federation
from fedssd.metrics import rounds_to_target


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--rounds", type=int, default=30)
    ap.add_argument("--m-max", type=float, default=0.1)
    args = ap.parse_args()

    cfg = cli.parse_config(
        overrides={
            "federation.rounds": str(args.rounds),
            "algorithm.m_max": str(args.m_max),
        },
        preset="toy-synthetic-compare",
    )
    seeds = cli.derive_seeds(args.seed)
    data = cli.build_data(cfg, seeds)
    curves = {}
    for algo in ("fedavg", "fedprox", "kl", "mse", "ssd"):
        records = run_federation(cfg.federation(algo, seeds), data).records
        curves[algo] = [r.metrics.acc_global for r in records]

    target = curves["fedavg"][-1]
    print(f"target = FedAvg final accuracy {target:.4f}\n")
    print("algorithm  final    best     rounds_to_target")
    for algo, series in curves.items():
        rtt = rounds_to_target(series, target)
        print(f"{algo:9s}  {series[-1]:.4f}  {max(series):.4f}  {'-' if rtt is None else rtt}")


if __name__ == "__main__":
    main()
