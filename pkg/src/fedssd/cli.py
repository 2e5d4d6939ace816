"""Command-line front end: ``fedssd run | compare | inspect``.

Experiment files are INI-style (``[section]`` headers, ``key = value``
lines). Values come from, in increasing precedence: built-in defaults, a
named preset, the config file, command-line flags.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fedssd.data import generate_synthetic, load_idx, sample_auxiliary
from fedssd.distill import ALGORITHMS, CompositeLossSpec
from fedssd.errors import ConfigError, FedSSDError
from fedssd.federation import (
    FederationConfig,
    build_federated_data,
    load_checkpoint,
    params_digest,
    run_federation,
    save_checkpoint,
)
from fedssd.metrics import emit, read_metrics_csv, rounds_to_target

log = logging.getLogger("fedssd")

OUTPUT_ROOT_ENV = "FEDSSD_OUTPUT_ROOT"

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# section -> key -> (parser, default); default None means required
SCHEMA: dict[str, dict[str, tuple]] = {
    "dataset": {
        "kind": (str, None),
        "classes": (int, 10),
        "dims": (int, 20),
        "n_per_class": (int, 300),
        "test_per_class": (int, 100),
        "separation": (float, 2.0),
        "images": (str, ""),
        "labels": (str, ""),
        "test_images": (str, ""),
        "test_labels": (str, ""),
    },
    "partition": {
        "strategy": (str, "dirichlet"),
        "delta": (float, 0.5),
        "labels_per_client": (int, 2),
        "aux_per_class": (int, 64),
    },
    "federation": {
        "clients": (int, 10),
        "participation": (float, 1.0),
        "rounds": (int, 100),
        "local_epochs": (int, 10),
        "batch_size": (int, 64),
        "lr": (float, 0.01),
        "momentum": (float, 0.9),
        "hidden": (_int_list, (64, 32)),
        "workers": (int, 1),
    },
    "algorithm": {
        "name": (_str_list, None),
        "m_max": (float, 0.01),
        "mu": (float, 0.01),
        "alpha": (float, 0.01),
        "tau": (float, 1.0),
    },
    "run": {
        "seeds": (_int_list, None),
        "out": (str, "runs"),
        "round_checkpoints": (_bool, False),
    },
}

# Toy-scale recipes on synthetic Gaussian data; they do not reproduce the
# CIFAR/TinyImageNet numbers, only the experimental protocol.
PRESETS: dict[str, str] = {
    "toy-synthetic-defaults": """
        [dataset]
        kind = synthetic
        [algorithm]
        name = fedavg
        [run]
        seeds = 0
    """,
    "toy-synthetic-forgetting": """
        [dataset]
        kind = synthetic
        classes = 10
        dims = 20
        [partition]
        delta = 0.1
        [federation]
        rounds = 30
        [algorithm]
        name = fedavg
        [run]
        seeds = 0, 1, 2, 3, 4
    """,
    "toy-synthetic-compare": """
        [dataset]
        kind = synthetic
        [partition]
        delta = 0.1
        [federation]
        rounds = 30
        [algorithm]
        name = fedavg, fedprox, ssd
        m_max = 0.1
        [run]
        seeds = 0
    """,
}


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict[str, dict[str, object]]

    def __getitem__(self, section: str) -> dict[str, object]:
        return self.values[section]

    @property
    def seeds(self) -> tuple[int, ...]:
        return self.values["run"]["seeds"]

    @property
    def algorithms(self) -> tuple[str, ...]:
        return self.values["algorithm"]["name"]

    def echo(self) -> dict:
        """JSON-friendly copy of every resolved value."""
        return {
            s: {k: list(v) if isinstance(v, tuple) else v for k, v in kv.items()}
            for s, kv in self.values.items()
        }

    def federation(self, algorithm: str, seeds: dict[str, int]) -> FederationConfig:
        fed, alg = self["federation"], self["algorithm"]
        return FederationConfig(
            n_clients=fed["clients"],
            participation=fed["participation"],
            rounds=fed["rounds"],
            local_epochs=fed["local_epochs"],
            batch_size=fed["batch_size"],
            learning_rate=fed["lr"],
            momentum=fed["momentum"],
            hidden=tuple(fed["hidden"]),
            workers=fed["workers"],
            loss=CompositeLossSpec.for_algorithm(
                algorithm, m_max=alg["m_max"], mu=alg["mu"], alpha=alg["alpha"], tau=alg["tau"]
            ),
            init_seed=seeds["init"],
            sampling_seed=seeds["sampling"],
            training_seed=seeds["training"],
        )


def _read_ini(text: str, origin: str) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None, empty_lines_in_values=False)
    parser.optionxform = str
    try:
        parser.read_string(_dedent(text), source=origin)
    except configparser.Error as exc:
        raise ConfigError(f"{origin}: {exc}") from exc
    return parser


def _dedent(text: str) -> str:
    return "\n".join(line.strip() for line in text.splitlines())


def _merge(raw: dict[str, dict[str, str]], parser: configparser.ConfigParser, origin: str):
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{origin}: unknown section [{section}]")
        for key, value in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"{origin}: unknown key {section}.{key}")
            raw.setdefault(section, {})[key] = value


def parse_config(
    path: str | os.PathLike | None = None,
    overrides: dict[str, str] | None = None,
    preset: str | None = None,
    text: str | None = None,
) -> ExperimentConfig:
    """Resolve and validate an experiment configuration.

    ``overrides`` maps ``section.key`` to raw string values and wins over
    everything else.
    """
    raw: dict[str, dict[str, str]] = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        _merge(raw, _read_ini(PRESETS[preset], f"preset {preset}"), f"preset {preset}")
    if path is not None:
        try:
            body = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        _merge(raw, _read_ini(body, str(path)), str(path))
    if text is not None:
        _merge(raw, _read_ini(text, "<text>"), "<text>")
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if key not in SCHEMA.get(section, {}):
            raise ConfigError(f"unknown key {dotted}")
        raw.setdefault(section, {})[key] = value

    missing = [
        f"{s}.{k}"
        for s, keys in SCHEMA.items()
        for k, (_, default) in keys.items()
        if default is None and k not in raw.get(s, {})
    ]
    if missing:
        raise ConfigError(f"missing required keys: {', '.join(missing)}")

    values: dict[str, dict[str, object]] = {}
    for section, keys in SCHEMA.items():
        values[section] = {}
        for key, (conv, default) in keys.items():
            if key in raw.get(section, {}):
                text_value = raw[section][key]
                try:
                    values[section][key] = conv(text_value)
                except ValueError as exc:
                    raise ConfigError(
                        f"{section}.{key}: cannot parse {text_value!r} as {conv.__name__.lstrip('_')}"
                    ) from exc
            else:
                values[section][key] = default
    cfg = ExperimentConfig(values)
    _validate(cfg)
    return cfg


def _check(ok: bool, key: str, constraint: str) -> None:
    if not ok:
        raise ConfigError(f"{key}: must satisfy {constraint}")


def _validate(cfg: ExperimentConfig) -> None:
    ds, part, fed, alg, run = (cfg[s] for s in ("dataset", "partition", "federation", "algorithm", "run"))
    _check(ds["kind"] in ("synthetic", "idx"), "dataset.kind", "one of synthetic, idx")
    if ds["kind"] == "synthetic":
        _check(ds["classes"] >= 2, "dataset.classes", ">= 2")
        _check(ds["dims"] >= 2, "dataset.dims", ">= 2")
        _check(ds["test_per_class"] >= 1, "dataset.test_per_class", ">= 1")
        _check(ds["separation"] >= 0, "dataset.separation", ">= 0")
        _check(
            ds["n_per_class"] > part["aux_per_class"],
            "dataset.n_per_class",
            "> partition.aux_per_class",
        )
    else:
        for key in ("images", "labels", "test_images", "test_labels"):
            _check(bool(ds[key]), f"dataset.{key}", "set when kind = idx")
    _check(part["strategy"] in ("dirichlet", "quantity", "iid"), "partition.strategy", "one of dirichlet, quantity, iid")
    _check(part["delta"] > 0, "partition.delta", "> 0")
    _check(part["labels_per_client"] >= 1, "partition.labels_per_client", ">= 1")
    if part["strategy"] == "quantity" and ds["kind"] == "synthetic":
        _check(part["labels_per_client"] <= ds["classes"], "partition.labels_per_client", "<= dataset.classes")
    _check(part["aux_per_class"] >= 1, "partition.aux_per_class", ">= 1")
    _check(fed["clients"] >= 1, "federation.clients", ">= 1")
    _check(0 < fed["participation"] <= 1, "federation.participation", "0 < C <= 1")
    _check(fed["rounds"] >= 0, "federation.rounds", ">= 0")
    _check(fed["local_epochs"] >= 0, "federation.local_epochs", ">= 0")
    _check(fed["batch_size"] >= 1, "federation.batch_size", ">= 1")
    _check(fed["lr"] > 0, "federation.lr", "> 0")
    _check(0 <= fed["momentum"] < 1, "federation.momentum", "0 <= momentum < 1")
    _check(all(h >= 1 for h in fed["hidden"]), "federation.hidden", "positive widths")
    _check(fed["workers"] >= 1, "federation.workers", ">= 1")
    _check(len(cfg.algorithms) >= 1, "algorithm.name", "at least one algorithm")
    for name in cfg.algorithms:
        _check(name in ALGORITHMS, "algorithm.name", f"one of {', '.join(ALGORITHMS)}")
    for key in ("m_max", "mu", "alpha"):
        _check(alg[key] >= 0, f"algorithm.{key}", ">= 0")
    _check(alg["tau"] > 0, "algorithm.tau", "> 0")
    _check(len(run["seeds"]) >= 1, "run.seeds", "at least one seed")
    _check(len(set(run["seeds"])) == len(run["seeds"]), "run.seeds", "distinct values")


SEED_STREAMS = ("data", "test_split", "aux", "partition", "init", "sampling", "training")


def derive_seeds(master: int) -> dict[str, int]:
    """Expand one master seed into independent per-purpose seeds."""
    words = np.random.SeedSequence(master).generate_state(len(SEED_STREAMS), dtype=np.uint32)
    return {name: int(w) for name, w in zip(SEED_STREAMS, words)}


def build_data(cfg: ExperimentConfig, seeds: dict[str, int]):
    ds, part, fed = cfg["dataset"], cfg["partition"], cfg["federation"]
    if ds["kind"] == "synthetic":
        full = generate_synthetic(
            ds["classes"], ds["dims"], ds["n_per_class"] + ds["test_per_class"],
            ds["separation"], seeds["data"],
        )
        split = sample_auxiliary(full, ds["test_per_class"], seeds["test_split"])
        test = split.auxiliary
        train = full.subset(split.remaining, "synthetic/train")
    else:
        train = load_idx(ds["images"], ds["labels"])
        test = load_idx(ds["test_images"], ds["test_labels"], train.n_classes)
    parameter = {
        "dirichlet": part["delta"],
        "quantity": part["labels_per_client"],
        "iid": 0.0,
    }[part["strategy"]]
    return build_federated_data(
        train, test, fed["clients"],
        strategy=part["strategy"], parameter=parameter, aux_per_class=part["aux_per_class"],
        partition_seed=seeds["partition"], aux_seed=seeds["aux"],
    )


def resolve_output(out: str) -> Path:
    path = Path(out)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@dataclass
class RunSummary:
    out_dir: Path
    artifacts: list[Path] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)

    @property
    def exit_code(self) -> int:
        return EXIT_RUNTIME if self.failures else EXIT_OK


def run_experiment(cfg: ExperimentConfig, out_dir: Path | None = None) -> RunSummary:
    out_dir = Path(out_dir) if out_dir is not None else resolve_output(cfg["run"]["out"])
    summary = RunSummary(out_dir)
    for seed in cfg.seeds:
        seeds = derive_seeds(seed)
        try:
            data = build_data(cfg, seeds)
        except (FedSSDError, ValueError, OSError) as exc:
            msg = f"seed {seed}: data preparation failed: {exc}"
            log.error(msg)
            summary.failures.extend(f"{a}/seed{seed}: {msg}" for a in cfg.algorithms)
            continue
        for algo in cfg.algorithms:
            run_dir = out_dir / algo / f"seed{seed}"
            try:
                fed_cfg = cfg.federation(algo, seeds)
                result = run_federation(
                    fed_cfg, data, keep_round_params=cfg["run"]["round_checkpoints"]
                )
                meta = {
                    "algorithm": algo,
                    "loss": {
                        "mode": fed_cfg.loss.mode.value,
                        "coefficient": fed_cfg.loss.coefficient,
                        "tau": fed_cfg.loss.tau,
                    },
                    "config": cfg.echo(),
                    "seed": seed,
                    "derived_seeds": seeds,
                    "n_classes": data.n_classes,
                    "client_sizes": [len(c) for c in data.clients],
                    "final_params_sha256": params_digest(result.final),
                }
                written = list(
                    emit(
                        result.records, run_dir / "metrics.csv", run_dir / "results.json",
                        n_classes=data.n_classes, meta=meta,
                    )
                )
                written.append(save_checkpoint(result.final, run_dir / "final.ckpt"))
                for t, params in enumerate(result.round_params):
                    written.append(save_checkpoint(params, run_dir / f"round{t:04d}.ckpt"))
                summary.artifacts.extend(written)
                log.info("%s seed %d: done, %d rounds", algo, seed, len(result.records))
            except (FedSSDError, ValueError, OSError) as exc:
                msg = f"{algo}/seed{seed}: {exc}"
                log.error(msg)
                summary.failures.append(msg)
    manifest = {
        "artifacts": [
            {
                "path": p.relative_to(out_dir).as_posix(),
                "sha256": _sha256(p),
                "bytes": p.stat().st_size,
            }
            for p in sorted(summary.artifacts)
        ],
        "failures": summary.failures,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    return summary


@dataclass
class ComparisonRow:
    run: str
    final_accuracy: float
    best_accuracy: float
    rounds_to_target: int | None


def _metrics_path(run: str | os.PathLike) -> Path:
    p = Path(run)
    return p / "metrics.csv" if p.is_dir() else p


def compare(runs: list[str | os.PathLike]) -> tuple[float, list[ComparisonRow]]:
    """Final/best accuracy and rounds to reach the first run's final accuracy."""
    if len(runs) < 2:
        raise ValueError("compare needs at least two runs")
    series = [read_metrics_csv(_metrics_path(r))["acc_global"] for r in runs]
    lengths = {len(s) for s in series}
    if len(lengths) != 1:
        raise ValueError(f"runs have different round counts: {[len(s) for s in series]}")
    if 0 in lengths:
        raise ValueError("runs have no rounds")
    target = float(series[0][-1])
    rows = [
        ComparisonRow(str(r), float(s[-1]), float(s.max()), rounds_to_target(s, target))
        for r, s in zip(runs, series)
    ]
    return target, rows


def format_comparison(target: float, rows: list[ComparisonRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["run", "final_accuracy", "best_accuracy", "rounds_to_target", "target"])
    for r in rows:
        writer.writerow(
            [
                r.run,
                format(r.final_accuracy, ".17g"),
                format(r.best_accuracy, ".17g"),
                "" if r.rounds_to_target is None else r.rounds_to_target,
                format(target, ".17g"),
            ]
        )
    return buf.getvalue()


def inspect(path: str | os.PathLike) -> str:
    """Human-readable summary of a checkpoint, results document or run directory."""
    p = Path(path)
    lines: list[str] = []
    if p.is_dir():
        for name in ("final.ckpt", "results.json"):
            if (p / name).exists():
                lines.append(inspect(p / name))
        if not lines:
            raise FileNotFoundError(f"{p} holds no checkpoint or results")
        return "\n".join(lines)
    if p.suffix == ".json":
        doc = json.loads(p.read_text(encoding="utf-8"))
        lines.append(f"{p}: algorithm={doc.get('algorithm')} seed={doc.get('seed')} rounds={len(doc['rounds'])}")
        for r in doc["rounds"]:
            line = (
                f"  round {r['round']:4d}  acc_global={r['acc_global']:.4f}"
                f"  acc_local_mean={r['acc_local_mean']:.4f}  gap={r['gap']:+.4f}"
            )
            if r.get("credibility"):
                diag = np.diag(np.asarray(r["credibility"]["matrix"]))
                line += "  recall=[" + " ".join(f"{v:.2f}" for v in diag) + "]"
            lines.append(line)
        return "\n".join(lines)
    params = load_checkpoint(p)
    lines.append(f"{p}: {len(params.layers)} layers, {params.size} parameters")
    for i, (w, b) in enumerate(params.layers):
        lines.append(f"  layer {i}: {w.shape[1]} -> {w.shape[0]}  |W|={np.linalg.norm(w):.4f} |b|={np.linalg.norm(b):.4f}")
    lines.append(f"  sha256(params)={params_digest(params)}")
    return "\n".join(lines)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedssd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment")
    run.add_argument("--config", help="INI experiment file")
    run.add_argument("--preset", choices=sorted(PRESETS))
    run.add_argument("--seed", type=int, action="append", help="repeatable; replaces run.seeds")
    run.add_argument("--algo", action="append", choices=sorted(ALGORITHMS), help="repeatable")
    run.add_argument("--m-max", type=str)
    run.add_argument("--mu", type=str)
    run.add_argument("--alpha", type=str)
    run.add_argument("--tau", type=str)
    run.add_argument("--rounds", type=str)
    run.add_argument("--workers", type=str)
    run.add_argument("--out", type=str, help=f"output directory (relative paths go under ${OUTPUT_ROOT_ENV})")

    cmp_ = sub.add_parser("compare", help="compare finished runs")
    cmp_.add_argument("runs", nargs="+", help="run directories or metrics.csv files")
    cmp_.add_argument("--out", help="also write the table to this CSV file")

    ins = sub.add_parser("inspect", help="summarise a checkpoint, results.json or run directory")
    ins.add_argument("path")
    return parser


def _overrides(args: argparse.Namespace) -> dict[str, str]:
    flags = {
        "algorithm.m_max": args.m_max,
        "algorithm.mu": args.mu,
        "algorithm.alpha": args.alpha,
        "algorithm.tau": args.tau,
        "federation.rounds": args.rounds,
        "federation.workers": args.workers,
        "run.out": args.out,
    }
    out = {k: v for k, v in flags.items() if v is not None}
    if args.seed:
        out["run.seeds"] = ",".join(str(s) for s in args.seed)
    if args.algo:
        out["algorithm.name"] = ",".join(args.algo)
    return out


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "run":
            if args.config is None and args.preset is None:
                raise ConfigError("give --config and/or --preset")
            cfg = parse_config(args.config, _overrides(args), preset=args.preset)
            summary = run_experiment(cfg)
            print(f"{len(summary.artifacts)} artifacts in {summary.out_dir}")
            for failure in summary.failures:
                print(f"FAILED {failure}", file=sys.stderr)
            return summary.exit_code
        if args.command == "compare":
            target, rows = compare(args.runs)
            table = format_comparison(target, rows)
            if args.out:
                Path(args.out).write_text(table, encoding="utf-8")
            print(table, end="")
            return EXIT_OK
        print(inspect(args.path))
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FedSSDError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
