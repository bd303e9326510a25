"""Command-line front end: deterministic experiment orchestration.

Subcommands
    calibrate      score heads on a planted workload and split them into
                   retrieval and local sets (partition.csv, head_scores.csv)
    train-indexer  fit one low-rank projector per retrieval head
                   (projector-L{l}H{h}.json/.bin, stage1-loss-L{l}H{h}.csv)
    distill-toy    teacher-cache a small dense model and train its sparse
                   twin against it (teacher-cache.*, distill_loss.csv,
                   distill_summary.json)
    run            sparse-decode a workload and emit decode_trace.csv,
                   sparsity_report.json, head_token_counts.csv,
                   mass_sweep.csv
    bench          per-step decode latency, dense oracle vs both sparse
                   selector modes (bench.csv, bench_meta.json)
    report         print a digest of whatever artifacts the output
                   directory holds

Configuration is one JSON file (--config) whose sections mirror the
dataclasses: geometry, workload, stage1, stage2, plus scalar keys mode,
top_k, seed, output_dir, bench_lengths, bench_steps.  Unknown keys are
rejected at every level.  Precedence, highest first: command-line flag,
config file, the HEADSPARSE_OUT environment variable (output directory
only), built-in default.  Every command writes the fully resolved config
it ran under to config_used.json.

All randomness flows from the single seed; module-level streams split off
it by label, so each command is deterministic given (config, seed), bench
timings aside.  Exit codes: 0 success, 2 usage or configuration error,
3 violated internal invariant.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .calibration import calibrate, load_partitions, save_partitions
from .distill import (
    Stage2Config,
    build_teacher_cache,
    gen_toy_corpus,
    make_toy_model,
    toy_self_distill,
)
from .engine import run_workload
from .errors import ArgumentError, ConfigError, InternalError, NumericError
from .indexer import Projector, Stage1Config, build_stage1_dataset, train_projector
from .reports import (
    HEAD_COUNT_HEADER,
    LOSS_HEADER,
    SCORE_HEADER,
    SWEEP_HEADER,
    bench_decode,
    bench_metadata,
    head_token_count_rows,
    mass_budget_sweep,
    read_bench,
    read_csv,
    read_decode_trace,
    read_sparsity_report,
    write_bench,
    write_csv,
    write_decode_trace,
    write_sparsity_report,
)
from .workload import (
    ModelGeometry,
    WorkloadSpec,
    default_workload_geometry,
    gen_synthetic_workload,
)

ENV_OUT = "HEADSPARSE_OUT"
DEFAULT_OUT = "headsparse-out"
MODES = ("exact", "histogram", "top_k")

_SECTIONS = {
    "geometry": ModelGeometry.from_dict,
    "workload": WorkloadSpec.from_dict,
    "stage1": Stage1Config.from_dict,
    "stage2": Stage2Config.from_dict,
}
_SCALARS = ("mode", "top_k", "seed", "output_dir", "bench_lengths", "bench_steps")


@dataclass(frozen=True)
class RunConfig:
    """Everything a subcommand needs, validated up front."""

    geometry: ModelGeometry = field(default_factory=default_workload_geometry)
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    mode: str = "exact"
    top_k: int | None = None
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    seed: int = 0
    output_dir: str | None = None
    bench_lengths: tuple[int, ...] = (4096, 32768)
    bench_steps: int = 30

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown selector mode {self.mode!r}")
        if self.mode == "top_k" and self.top_k is None:
            raise ConfigError("top_k mode needs a top_k budget")
        if self.top_k is not None and self.top_k < 1:
            raise ConfigError(f"top_k budget must be >= 1, got {self.top_k}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError(f"seed must be an integer, got {self.seed!r}")
        if not self.bench_lengths or min(self.bench_lengths) < 1:
            raise ConfigError("bench_lengths must be a non-empty list of positive ints")
        if self.bench_steps < 1:
            raise ConfigError("bench_steps must be >= 1")

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        unknown = sorted(set(d) - set(_SECTIONS) - set(_SCALARS))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        kwargs: dict = {}
        for key, parse in _SECTIONS.items():
            if key in d:
                if not isinstance(d[key], dict):
                    raise ConfigError(f"config section {key!r} must be an object")
                try:
                    kwargs[key] = parse(d[key])
                except TypeError as e:
                    # unknown nested keys surface as unexpected keyword args
                    raise ConfigError(f"config section {key!r}: {e}") from e
        for key in _SCALARS:
            if key in d:
                kwargs[key] = d[key]
        if "bench_lengths" in kwargs:
            try:
                kwargs["bench_lengths"] = tuple(int(v) for v in kwargs["bench_lengths"])
            except (TypeError, ValueError) as e:
                raise ConfigError(f"bench_lengths: {e}") from e
        try:
            return RunConfig(**kwargs)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    def to_dict(self) -> dict:
        return {
            "geometry": self.geometry.to_dict(),
            "workload": self.workload.to_dict(),
            "mode": self.mode,
            "top_k": self.top_k,
            "stage1": self.stage1.to_dict(),
            "stage2": self.stage2.to_dict(),
            "seed": self.seed,
            "output_dir": self.output_dir,
            "bench_lengths": list(self.bench_lengths),
            "bench_steps": self.bench_steps,
        }


def _load_json_dict(path: Path) -> dict:
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return data


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Merge config file, flags, and environment into one RunConfig."""
    raw: dict = {}
    if getattr(args, "config", None):
        raw = _load_json_dict(Path(args.config))
    cfg = RunConfig.from_dict(raw)
    updates: dict = {}
    for name in ("seed", "mode", "top_k", "bench_steps"):
        value = getattr(args, name, None)
        if value is not None:
            updates[name] = value
    lengths = getattr(args, "lengths", None)
    if lengths:
        try:
            updates["bench_lengths"] = tuple(int(v) for v in lengths.split(","))
        except ValueError as e:
            raise ConfigError(f"--lengths: {e}") from e
    out = getattr(args, "out", None) or cfg.output_dir \
        or os.environ.get(ENV_OUT) or DEFAULT_OUT
    updates["output_dir"] = str(out)
    return dataclasses.replace(cfg, **updates)


def _ensure_out(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = json.dumps(cfg.to_dict(), indent=2, sort_keys=True)
    (out / "config_used.json").write_text(payload + "\n")
    return out


def _load_partition_file(cfg: RunConfig, out: Path):
    path = out / "partition.csv"
    if not path.exists():
        raise ConfigError(f"missing partition file {path} (run calibrate first)")
    return load_partitions(path, cfg.geometry.retrieval_ratio)


def cmd_calibrate(cfg: RunConfig, args: argparse.Namespace) -> None:
    out = _ensure_out(cfg)
    workload = gen_synthetic_workload(cfg.workload, cfg.seed, cfg.geometry)
    partitions = calibrate(workload)
    save_partitions(out / "partition.csv", partitions)
    rows = []
    for layer, part in enumerate(partitions):
        order = sorted(range(part.n_heads), key=lambda h: (-part.scores[h], h))
        rows.extend([layer, h, repr(float(part.scores[h]))] for h in order)
    write_csv(out / "head_scores.csv", SCORE_HEADER, rows)
    for layer, part in enumerate(partitions):
        print(f"layer {layer}: retrieval heads {sorted(part.retrieval_set)} "
              f"of {part.n_heads}")


def cmd_train_indexer(cfg: RunConfig, args: argparse.Namespace) -> None:
    out = _ensure_out(cfg)
    partitions = _load_partition_file(cfg, out)
    geo = cfg.geometry
    workload = gen_synthetic_workload(cfg.workload, cfg.seed, geo)
    for layer, part in enumerate(partitions):
        for h in sorted(part.retrieval_set):
            dataset = build_stage1_dataset(workload, geo, layer, h, cfg.seed)
            projector, trace = train_projector(
                dataset, cfg.stage1, cfg.seed, r=geo.low_dim,
                head_dim=geo.head_dim, label=f"stage1-L{layer}H{h}",
            )
            projector.save(out / f"projector-L{layer}H{h}", layer, h)
            write_csv(out / f"stage1-loss-L{layer}H{h}.csv", LOSS_HEADER,
                      [[step, repr(v)] for step, v in enumerate(trace)])
            print(f"layer {layer} head {h}: loss {trace[0]:.5f} -> {trace[-1]:.5f}")


def _load_projectors(cfg: RunConfig, out: Path, partitions) -> dict:
    projectors = {}
    for layer, part in enumerate(partitions):
        for h in sorted(part.retrieval_set):
            stem = out / f"projector-L{layer}H{h}"
            if not stem.with_suffix(".json").exists():
                raise ConfigError(
                    f"missing projector {stem}.json (run train-indexer first)")
            projector, _ = Projector.load(stem)
            if projector.r != cfg.geometry.low_dim:
                raise ConfigError(
                    f"{stem.name} has r={projector.r} but geometry.low_dim="
                    f"{cfg.geometry.low_dim}")
            projectors[(layer, h)] = projector
    return projectors


def cmd_run(cfg: RunConfig, args: argparse.Namespace) -> None:
    out = _ensure_out(cfg)
    partitions = _load_partition_file(cfg, out)
    projectors = _load_projectors(cfg, out, partitions)
    geo = cfg.geometry
    workload = gen_synthetic_workload(cfg.workload, cfg.seed, geo)
    result = run_workload(
        workload, geo, partitions, projectors,
        p=geo.top_p, mode=cfg.mode, top_k=cfg.top_k,
        oracle=bool(getattr(args, "oracle", False)),
    )
    write_decode_trace(out / "decode_trace.csv", result.traces)
    write_sparsity_report(out / "sparsity_report.json", result.report)
    write_csv(out / "head_token_counts.csv", HEAD_COUNT_HEADER,
              head_token_count_rows(result.traces))
    ret_heads = sorted(partitions[0].retrieval_set)
    sweep_head = ret_heads[0] if ret_heads else 0
    positions = np.linspace(workload.prefill_len, workload.seq_len - 1, 6,
                            dtype=int).tolist()
    sweep = mass_budget_sweep(workload, geo, 0, sweep_head, positions,
                              budgets=[8, 64, 512], p=geo.top_p)
    write_csv(out / "mass_sweep.csv", SWEEP_HEADER, sweep)
    print(f"decoded {len(result.traces)} head-steps in mode {cfg.mode!r}")
    print(f"compute sparsity {result.report.compute_sparsity:.4f}, "
          f"memory sparsity {result.report.memory_sparsity:.4f}")


def _smoothed(trace: list[float], window: int = 20) -> np.ndarray:
    w = min(window, len(trace))
    return np.convolve(trace, np.ones(w) / w, mode="valid")


def cmd_distill_toy(cfg: RunConfig, args: argparse.Namespace) -> None:
    out = _ensure_out(cfg)
    model = make_toy_model(cfg.seed)
    corpus = gen_toy_corpus(cfg.seed)
    teacher = build_teacher_cache(model, corpus)
    teacher.save(out / "teacher-cache")
    _, trace = toy_self_distill(model, corpus, teacher, cfg.stage2, cfg.seed)
    write_csv(out / "distill_loss.csv", LOSS_HEADER,
              [[step, repr(v)] for step, v in enumerate(trace)])
    sm = _smoothed(trace)
    summary = {
        "steps": len(trace),
        "top_p": cfg.stage2.top_p,
        "initial_smoothed": float(sm[0]),
        "final_smoothed": float(sm[-1]),
        "ratio": float(sm[-1] / sm[0]) if sm[0] > 0 else 0.0,
    }
    (out / "distill_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"distilled {len(trace)} steps: smoothed loss "
          f"{summary['initial_smoothed']:.5f} -> {summary['final_smoothed']:.5f}")


def cmd_bench(cfg: RunConfig, args: argparse.Namespace) -> None:
    out = _ensure_out(cfg)
    geo = cfg.geometry
    rows = bench_decode(cfg.bench_lengths, cfg.seed, n_steps=cfg.bench_steps,
                        p=geo.top_p, head_dim=geo.head_dim, r=geo.low_dim,
                        block_size=geo.block_size)
    write_bench(out / "bench.csv", rows)
    meta = json.dumps(bench_metadata(cfg.seed), indent=2, sort_keys=True)
    (out / "bench_meta.json").write_text(meta + "\n")
    for r in rows:
        print(f"L={r.length:>7d} {r.mode:<17s} median {r.median_ms:8.3f} ms  "
              f"p95 {r.p95_ms:8.3f} ms")


def cmd_report(cfg: RunConfig, args: argparse.Namespace) -> None:
    out = Path(cfg.output_dir)
    found = 0
    partition = out / "partition.csv"
    if partition.exists():
        found += 1
        for layer, part in enumerate(load_partitions(partition,
                                                     cfg.geometry.retrieval_ratio)):
            print(f"partition layer {layer}: retrieval {sorted(part.retrieval_set)}")
    sparsity = out / "sparsity_report.json"
    if sparsity.exists():
        found += 1
        rep = read_sparsity_report(sparsity)
        print(f"compute sparsity {rep.compute_sparsity:.4f}, "
              f"memory sparsity {rep.memory_sparsity:.4f}")
    trace_file = out / "decode_trace.csv"
    if trace_file.exists():
        found += 1
        rows = read_decode_trace(trace_file)
        sizes = [r["tokens_selected"] for r in rows]
        floor = min(r["projected_mass"] for r in rows)
        print(f"decode trace: {len(rows)} rows, mean selected {np.mean(sizes):.1f}, "
              f"mass floor {floor:.4f}")
    counts = out / "head_token_counts.csv"
    if counts.exists():
        found += 1
        print("per-head token counts:")
        for row in read_csv(counts, HEAD_COUNT_HEADER):
            print("  " + " ".join(row))
    sweep = out / "mass_sweep.csv"
    if sweep.exists():
        found += 1
        print("mass vs budget:")
        for row in read_csv(sweep, SWEEP_HEADER):
            print("  " + " ".join(row))
    bench = out / "bench.csv"
    if bench.exists():
        found += 1
        for r in read_bench(bench):
            print(f"bench L={r.length} {r.mode}: median {r.median_ms:.3f} ms")
    summary = out / "distill_summary.json"
    if summary.exists():
        found += 1
        data = json.loads(summary.read_text())
        print(f"distill: smoothed {data['initial_smoothed']:.5f} -> "
              f"{data['final_smoothed']:.5f} over {data['steps']} steps")
    if found == 0:
        raise ConfigError(f"no artifacts found in {out}")


_COMMANDS = {
    "calibrate": cmd_calibrate,
    "train-indexer": cmd_train_indexer,
    "distill-toy": cmd_distill_toy,
    "run": cmd_run,
    "bench": cmd_bench,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="headsparse",
        description="Head-wise sparse attention: calibration, indexing, "
                    "decode, and measurement.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--out", help=f"output directory (overrides config and "
                                     f"${ENV_OUT})")
        p.add_argument("--seed", type=int, help="root seed override")
        p.add_argument("--mode", choices=MODES, help="selector mode override")
        p.add_argument("--top-k", dest="top_k", type=int,
                       help="token budget for top_k mode")
        if name == "run":
            p.add_argument("--oracle", action="store_true",
                           help="also record dense-attention mass per trace row")
        if name == "bench":
            p.add_argument("--lengths", help="comma-separated cache lengths")
            p.add_argument("--bench-steps", dest="bench_steps", type=int,
                           help="measured iterations per mode")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        _COMMANDS[args.command](cfg, args)
    except (ArgumentError, NumericError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except InternalError as e:
        print(f"internal error: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
