"""Experiment harness: strict JSON config parsing, seeded runs, reports.

Artifacts per run directory:
  config_echo.json      normalized config (byte-stable)
  rounds_seed<k>.csv    one row per round
  summary_seed<k>.txt   windowed metrics, key=value lines with a schema tag
  timing_seed<k>.txt    wall-clock sidecar (the only files allowed to differ
                        between identical runs)
  aggregate.txt         cross-seed mean and sample standard deviation
  report.csv            written by the report subcommand

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .attacks import AttackStrategy
from .defenses import DefenseConfig
from .errors import ConfigError, InputError, PolarSimError
from .polar import PolarConfig
from .sim import DataSpec, ExperimentResult, SimConfig, run_experiment

SUMMARY_SCHEMA = "polarsim.summary.v1"
AGGREGATE_SCHEMA = "polarsim.aggregate.v1"
TIMING_SCHEMA = "polarsim.timing.v1"
WORKERS_ENV = "POLARSIM_MAX_WORKERS"

ROUND_COLUMNS = [
    "round",
    "acc",
    "bsr",
    "scheduled_benign",
    "scheduled_malicious",
    "accepted",
    "accepted_malicious_count",
    "selected_layer_count",
    "mask_bits",
    "policy_logits",
]

SUMMARY_METRICS = ["final_acc", "absr", "bbsr", "mar", "bar"]


@dataclass(frozen=True)
class ExperimentConfig:
    sim: SimConfig
    defense: DefenseConfig
    attack: AttackStrategy
    data: DataSpec
    hidden_dims: tuple[int, ...]
    seeds: tuple[int, ...]
    output_dir: str

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if not self.hidden_dims or any(h < 1 for h in self.hidden_dims):
            raise ConfigError("hidden_dims must be positive")


def _build_section(cls, section, path: str):
    if not isinstance(section, dict):
        raise ConfigError(f"{path}: expected an object")
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in section.items():
        if key not in known:
            raise ConfigError(f"unknown key: {path}.{key}")
        kwargs[key] = value
    return cls(**kwargs)


def parse_config(path: str) -> ExperimentConfig:
    """Strict parse: unknown keys are rejected, missing ones use defaults."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    text = Path(path).read_text().strip()
    if not text:
        raw = {}
    else:
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")

    allowed = {"sim", "defense", "attack", "data", "model", "seeds", "output_dir"}
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"unknown key: {key}")

    if "seed" in raw.get("sim", {}):
        raise ConfigError("unknown key: sim.seed (use the top-level seeds list)")
    sim = _build_section(SimConfig, raw.get("sim", {}), "sim")
    defense = _build_section(DefenseConfig, raw.get("defense", {}), "defense")

    attack_raw = dict(raw.get("attack", {}))
    polar_raw = attack_raw.pop("polar", None)
    polar_cfg = None
    if polar_raw is not None:
        polar_cfg = _build_section(PolarConfig, polar_raw, "attack.polar")
    attack = _build_section(AttackStrategy, {**attack_raw, "polar": polar_cfg}, "attack")

    data = _build_section(DataSpec, raw.get("data", {}), "data")

    model_raw = dict(raw.get("model", {}))
    hidden = model_raw.pop("hidden_dims", [32, 32, 32])
    if model_raw:
        raise ConfigError(f"unknown key: model.{next(iter(model_raw))}")
    if not isinstance(hidden, list):
        raise ConfigError("model.hidden_dims must be a list of ints")

    seeds = raw.get("seeds", [0, 1, 2, 3, 4])
    if not isinstance(seeds, list) or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds must be a list of integers")
    output_dir = raw.get("output_dir", "runs/experiment")
    if not isinstance(output_dir, str):
        raise ConfigError("output_dir must be a string")

    return ExperimentConfig(
        sim=sim,
        defense=defense,
        attack=attack,
        data=data,
        hidden_dims=tuple(int(h) for h in hidden),
        seeds=tuple(seeds),
        output_dir=output_dir,
    )


def _config_echo(cfg: ExperimentConfig) -> str:
    def as_dict(obj):
        if hasattr(obj, "__dataclass_fields__"):
            return {f.name: as_dict(getattr(obj, f.name)) for f in fields(obj)}
        if isinstance(obj, (tuple, list)):
            return [as_dict(v) for v in obj]
        return obj

    payload = as_dict(cfg)
    payload["sim"].pop("seed", None)
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def _fmt(x) -> str:
    return "absent" if x is None else repr(float(x))


def write_round_log(path: Path, records) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ROUND_COLUMNS)
    for rec in records:
        writer.writerow(
            [
                rec.round,
                repr(float(rec.acc)),
                repr(float(rec.bsr)),
                ";".join(str(i) for i in rec.benign_ids),
                ";".join(str(i) for i in rec.malicious_ids),
                ";".join(str(i) for i in rec.accepted_ids),
                rec.accepted_malicious,
                "" if rec.selected_count is None else rec.selected_count,
                "" if rec.mask is None else "".join(str(b) for b in rec.mask),
                "" if rec.policy_logits is None
                else ";".join(repr(v) for v in rec.policy_logits),
            ]
        )
    path.write_text(buf.getvalue())


def read_round_log(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ROUND_COLUMNS:
            raise InputError(f"{path}: unexpected round-log header")
        for row in reader:
            rows.append(
                {
                    "round": int(row["round"]),
                    "acc": float(row["acc"]),
                    "bsr": float(row["bsr"]),
                    "scheduled_benign": _ids(row["scheduled_benign"]),
                    "scheduled_malicious": _ids(row["scheduled_malicious"]),
                    "accepted": _ids(row["accepted"]),
                    "accepted_malicious_count": int(row["accepted_malicious_count"]),
                    "selected_layer_count": (
                        None if row["selected_layer_count"] == "" else int(row["selected_layer_count"])
                    ),
                    "mask_bits": row["mask_bits"],
                    "policy_logits": (
                        [] if row["policy_logits"] == ""
                        else [float(v) for v in row["policy_logits"].split(";")]
                    ),
                }
            )
    return rows


def _ids(cell: str) -> list[int]:
    return [int(v) for v in cell.split(";")] if cell else []


def write_summary(path: Path, cfg: ExperimentConfig, seed: int, result: ExperimentResult) -> None:
    rep = result.report
    lines = [
        f"schema={SUMMARY_SCHEMA}",
        f"seed={seed}",
        f"rounds={cfg.sim.rounds}",
        f"defense={cfg.defense.kind}",
        f"attack={cfg.attack.kind}",
        f"final_acc={_fmt(rep.acc)}",
        f"absr={_fmt(rep.absr)}",
        f"bbsr={_fmt(rep.bbsr)}",
        f"mar={_fmt(rep.mar)}",
        f"bar={_fmt(rep.bar)}",
    ]
    path.write_text("\n".join(lines) + "\n")


def parse_summary(path) -> dict:
    entries = {}
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        if "=" not in line:
            raise InputError(f"{path}:{ln}: expected key=value")
        key, value = line.split("=", 1)
        entries[key] = value
    if entries.get("schema") != SUMMARY_SCHEMA:
        raise InputError(f"{path}: unsupported schema {entries.get('schema')!r}")
    for key in ("seed", "rounds"):
        entries[key] = int(entries[key])
    for key in SUMMARY_METRICS:
        entries[key] = None if entries[key] == "absent" else float(entries[key])
    return entries


def _mean_std(values: list[float]) -> tuple[float, float]:
    n = len(values)
    mean = sum(values) / n
    std = (sum((v - mean) ** 2 for v in values) / (n - 1)) ** 0.5 if n > 1 else 0.0
    return mean, std


def write_aggregate(path: Path, cfg: ExperimentConfig, summaries: list[dict]) -> None:
    lines = [
        f"schema={AGGREGATE_SCHEMA}",
        f"defense={cfg.defense.kind}",
        f"attack={cfg.attack.kind}",
        "seeds=" + ";".join(str(s["seed"]) for s in summaries),
        f"completed={len(summaries)}",
    ]
    for metric in SUMMARY_METRICS:
        values = [s[metric] for s in summaries if s[metric] is not None]
        if values:
            mean, std = _mean_std(values)
            lines.append(f"{metric}_mean={repr(mean)}")
            lines.append(f"{metric}_std={repr(std)}")
        else:
            lines.append(f"{metric}_mean=absent")
            lines.append(f"{metric}_std=absent")
    path.write_text("\n".join(lines) + "\n")


def _run_one_seed(cfg: ExperimentConfig, seed: int, out: Path) -> dict:
    sim = replace(cfg.sim, seed=seed)
    result = run_experiment(sim, cfg.defense, cfg.attack, cfg.data, cfg.hidden_dims)
    write_round_log(out / f"rounds_seed{seed}.csv", result.records)
    write_summary(out / f"summary_seed{seed}.txt", cfg, seed, result)
    timing = [
        f"schema={TIMING_SCHEMA}",
        f"seed={seed}",
        f"wall_seconds={result.wall_time:.3f}",
        f"attacker_seconds={result.attacker_time:.3f}",
    ]
    (out / f"timing_seed{seed}.txt").write_text("\n".join(timing) + "\n")
    return parse_summary(out / f"summary_seed{seed}.txt")


def run(cfg: ExperimentConfig) -> int:
    """Execute every seed, retaining completed outputs even if one fails."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config_echo.json").write_text(_config_echo(cfg))

    workers = max(1, int(os.environ.get(WORKERS_ENV, "1")))
    summaries: dict[int, dict] = {}
    failures: list[tuple[int, BaseException]] = []
    if workers == 1:
        for seed in cfg.seeds:
            try:
                summaries[seed] = _run_one_seed(cfg, seed, out)
            except Exception as exc:  # keep remaining seeds alive
                failures.append((seed, exc))
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {seed: pool.submit(_run_one_seed, cfg, seed, out) for seed in cfg.seeds}
        for seed, fut in futures.items():
            try:
                summaries[seed] = fut.result()
            except Exception as exc:
                failures.append((seed, exc))

    if summaries:
        ordered = [summaries[s] for s in sorted(summaries)]
        write_aggregate(out / "aggregate.txt", cfg, ordered)
    for seed, exc in failures:
        print(f"seed {seed} failed: {exc}", file=sys.stderr)
    return 2 if failures else 0


def report(run_dir: str) -> int:
    """Comparison table across all summaries found under run_dir."""
    root = Path(run_dir)
    if not root.exists():
        print(f"run directory not found: {run_dir}", file=sys.stderr)
        return 1
    paths = sorted(root.rglob("summary_seed*.txt"))
    groups: dict[tuple[str, str], list[dict]] = {}
    broken: list[str] = []
    for path in paths:
        try:
            summary = parse_summary(path)
        except (InputError, ValueError, KeyError) as exc:
            broken.append(f"{path}: {exc}")
            continue
        groups.setdefault((summary["defense"], summary["attack"]), []).append(summary)
    for line in broken:
        print(f"skipped corrupt summary: {line}", file=sys.stderr)
    if not groups:
        print("no readable summaries found", file=sys.stderr)
        return 1

    header = f"{'defense':<12}{'attack':<12}" + "".join(
        f"{m:>18}" for m in ("bbsr", "absr", "final_acc", "mar", "bar")
    )
    print(header)
    print("-" * len(header))
    rows = []
    for (defense, attack) in sorted(groups):
        cells = {}
        for metric in SUMMARY_METRICS:
            values = [s[metric] for s in groups[(defense, attack)] if s[metric] is not None]
            if values:
                mean, std = _mean_std(values)
                cells[metric] = (mean, std, len(values))
            else:
                cells[metric] = None
        line = f"{defense:<12}{attack:<12}"
        for metric in ("bbsr", "absr", "final_acc", "mar", "bar"):
            if cells[metric] is None:
                line += f"{'absent':>18}"
            else:
                mean, std, _ = cells[metric]
                line += f"{mean:>10.4f}±{std:<7.4f}"
        print(line)
        for metric, cell in cells.items():
            if cell is not None:
                rows.append([defense, attack, metric, repr(cell[0]), repr(cell[1]), cell[2]])
            else:
                rows.append([defense, attack, metric, "absent", "absent", 0])

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["defense", "attack", "metric", "mean", "std", "n"])
    writer.writerows(rows)
    (root / "report.csv").write_text(buf.getvalue())
    return 0


def selftest() -> int:
    """Built-in oracle checks; one PASS/FAIL line per check."""
    from . import selfcheck

    ok = True
    for name, fn in selfcheck.CHECKS:
        try:
            fn()
            print(f"PASS {name}")
        except Exception as exc:
            ok = False
            print(f"FAIL {name}: {exc}")
    return 0 if ok else 2


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="polarsim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a seeded experiment grid")
    p_run.add_argument("config", help="JSON config file (empty file = all defaults)")
    p_run.add_argument("--seed-override", type=int, default=None,
                       help="run only this seed instead of the configured list")
    p_run.add_argument("--rounds-override", type=int, default=None)
    p_run.add_argument("--output", default=None, help="override output_dir")

    p_rep = sub.add_parser("report", help="tabulate summaries under a run directory")
    p_rep.add_argument("run_dir")

    sub.add_parser("selftest", help="run the built-in oracle checks")

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            cfg = parse_config(args.config)
            if args.seed_override is not None:
                cfg = replace(cfg, seeds=(args.seed_override,))
            if args.rounds_override is not None:
                cfg = replace(cfg, sim=replace(cfg.sim, rounds=args.rounds_override))
            if args.output is not None:
                cfg = replace(cfg, output_dir=args.output)
            return run(cfg)
        if args.command == "report":
            return report(args.run_dir)
        return selftest()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except PolarSimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
