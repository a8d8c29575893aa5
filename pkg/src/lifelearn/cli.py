"""Command-line interface.

Four subcommands: ``synth`` writes a labelled synthetic stream (plus its
entity lexicon as a TSV sidecar), ``train`` runs strategies over a
stream and writes reports, figures and checkpoints, ``compare`` merges
finished report directories, and ``gradcheck`` runs the
finite-difference suites.

``train`` records a ``manifest.json`` before training starts (stream
digest, seeds, settings) and marks it done afterwards, so a run can be
re-executed or audited later. Exit codes: 0 success, 1 operational
failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .config import apply_config_values, parse_config_file
from .errors import ConfigError, LifelearnError
from .evaluation import StageReport, run_experiment, write_all_reports
from .figures import render_accuracy_figures, render_report_figures
from .gradcheck import run_layer_checks, run_model_checks
from .numeric import RngStream
from .stream import load_stream, save_stream, synthesize_stream

_OUT_ENV = "LIFELEARN_OUT"


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _resolve_out(arg: str | None) -> Path:
    out = arg or os.environ.get(_OUT_ENV)
    if not out:
        raise ConfigError(f"no output directory: pass --out or set ${_OUT_ENV}")
    return Path(out)


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    overrides: dict[str, object] = {}
    if args.classes is not None:
        overrides["synth.classes"] = args.classes
    if args.tasks is not None:
        overrides["synth.tasks"] = args.tasks
    if args.notes_per_class is not None:
        overrides["synth.notes_per_class"] = args.notes_per_class
    if args.noise_rate is not None:
        overrides["synth.noise_rate"] = args.noise_rate
    file_values = parse_config_file(args.config) if args.config else {}
    file_values.update(overrides)
    _, spec = apply_config_values(file_values)

    stream = synthesize_stream(spec, RngStream(args.seed))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_stream(stream, out)
    lexicon_path = out.with_suffix(".lexicon.tsv")
    stream.lexicon.save(lexicon_path)
    n = sum(len(t.train) + len(t.test) for t in stream.tasks)
    print(
        f"wrote {n} notes over {len(stream.tasks)} tasks to {out} "
        f"(lexicon: {lexicon_path})"
    )
    return 0


# ---------------------------------------------------------------------------
# train


def _train_overrides(args) -> dict[str, object]:
    overrides: dict[str, object] = {}
    if args.strategy:
        names: list[str] = []
        for chunk in args.strategy:
            names.extend(s.strip() for s in chunk.split(",") if s.strip())
        overrides["experiment.strategies"] = names
    if args.seeds:
        overrides["experiment.seeds"] = args.seeds
    if args.alpha is not None:
        overrides["train.alpha"] = args.alpha
    if args.beta is not None:
        overrides["train.beta"] = args.beta
    if args.budget is not None:
        overrides["train.budget"] = args.budget
    if args.epochs is not None:
        overrides["train.epochs_per_task"] = args.epochs
    if args.jobs is not None:
        overrides["experiment.jobs"] = args.jobs
    return overrides


def cmd_train(args) -> int:
    stream_path = Path(args.stream)
    if not stream_path.exists():
        raise ConfigError(f"stream file not found: {stream_path}")
    file_values = parse_config_file(args.config) if args.config else {}
    file_values.update(_train_overrides(args))
    config, _ = apply_config_values(file_values)
    config.validate()

    stream = load_stream(stream_path)
    out = _resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)

    manifest = {
        "kind": "lifelearn-run",
        "version": __version__,
        "stream": {
            "path": str(stream_path),
            "sha256": _sha256(stream_path),
            "tasks": len(stream.tasks),
            "classes": len(stream.label_names),
        },
        "strategies": list(config.strategies),
        "seeds": list(config.seeds),
        "model": asdict(config.model),
        "train": asdict(config.train),
        "ewc": {"lam": config.ewc_lambda, "sample": config.ewc_sample},
        "started": _utc_now(),
        "status": "running",
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")

    reports = run_experiment(stream, config, out)
    write_all_reports(reports, out)
    figures = render_report_figures(reports, out)

    manifest["status"] = "done"
    manifest["finished"] = _utc_now()
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")

    final = [r for r in reports if r.stage == len(stream.tasks)]
    for r in final:
        print(
            f"{r.strategy} seed {r.seed}: stage {r.stage} "
            f"acc_first={r.acc_first:.3f} acc_avg={r.acc_avg:.3f}"
        )
    print(f"reports in {out} ({len(figures)} figures)")
    return 0


# ---------------------------------------------------------------------------
# compare


def _read_stage_reports(path: Path) -> list[dict]:
    lines = path.read_text(encoding="utf-8").splitlines()
    header = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        parts = line.split(",")
        row = dict(zip(header, parts))
        rows.append(row)
    return rows


def cmd_compare(args) -> int:
    merged: list[dict] = []
    for run_dir in args.runs:
        path = Path(run_dir) / "stage_reports.csv"
        if not path.exists():
            raise ConfigError(f"no stage_reports.csv under {run_dir}")
        merged.extend(_read_stage_reports(path))

    stages_by_strategy: dict[str, set[int]] = {}
    for row in merged:
        stages_by_strategy.setdefault(row["strategy"], set()).add(int(row["stage"]))
    stage_sets = {frozenset(v) for v in stages_by_strategy.values()}
    if len(stage_sets) > 1:
        detail = ", ".join(
            f"{name}: {len(v)}" for name, v in sorted(stages_by_strategy.items())
        )
        raise ConfigError(f"runs cover different stage counts ({detail})")

    out = _resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = merged[0].keys()
    lines = [",".join(header)]
    for row in merged:
        lines.append(",".join(row[k] for k in header))
    (out / "comparison.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    last_stage = max(int(r["stage"]) for r in merged)
    finals: dict[str, list[float]] = {}
    for row in merged:
        if int(row["stage"]) == last_stage:
            finals.setdefault(row["strategy"], []).append(float(row["acc_avg"]))
    means = {name: sum(v) / len(v) for name, v in finals.items()}
    candidates = {n: m for n, m in means.items() if n != "multitask"}
    best = max(candidates, key=candidates.get) if candidates else None
    print(f"final stage {last_stage}, mean acc_avg over seeds:")
    for name in sorted(means):
        marker = " *" if name == best else ""
        print(f"  {name:20s} {means[name]:.3f}{marker}")

    reports = [
        StageReport(
            strategy=row["strategy"],
            seed=int(row["seed"]),
            stage=int(row["stage"]),
            acc_first=float(row["acc_first"]),
            acc_avg=float(row["acc_avg"]),
            per_task_acc=(),
            aggregation_degree=float(row["aggregation_degree"]),
            wall_time=0.0,
            omega_probe_before=float(row["omega_probe_before"]),
            omega_probe_after=float(row["omega_probe_after"]),
            mean_omega_c=float(row["mean_omega_c"]),
            mean_omega_s=float(row["mean_omega_s"]),
        )
        for row in merged
    ]
    render_accuracy_figures(reports, out)
    print(f"comparison written to {out}")
    return 0


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args) -> int:
    ok = True
    for i in range(args.repeat):
        seed = args.seed + i
        results = []
        if args.scope in ("layer", "all"):
            results += run_layer_checks(seed, inject_fault=args.inject_fault)
        if args.scope in ("model", "all"):
            results += run_model_checks(seed, inject_fault=args.inject_fault)
        for name, report in results:
            status = "PASS" if report.passed else "FAIL"
            print(f"seed {seed} {status} {name} max_rel_err={report.max_rel_err:.3e}")
            if not report.passed:
                ok = False
                print(report.summary())
    print("gradient checks " + ("PASSED" if ok else "FAILED"))
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lifelearn",
        description="Lifelong text classification over task streams.",
    )
    parser.add_argument("--version", action="version", version=f"lifelearn {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic note stream")
    p.add_argument("--out", required=True, help="output JSONL path")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--config", help="config file with synth.* keys")
    p.add_argument("--classes", type=int)
    p.add_argument("--tasks", type=int)
    p.add_argument("--notes-per-class", type=int, dest="notes_per_class")
    p.add_argument("--noise-rate", type=float, dest="noise_rate")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train strategies over a stream")
    p.add_argument("--stream", required=True, help="stream JSONL from synth")
    p.add_argument("--out", help=f"report directory (default ${_OUT_ENV})")
    p.add_argument("--config", help="config file")
    p.add_argument(
        "--strategy",
        action="append",
        help="strategy name, repeatable or comma-separated",
    )
    p.add_argument("--seed", action="append", type=int, dest="seeds",
                   help="training seed, repeatable")
    p.add_argument("--alpha", type=float, help="context consolidation weight")
    p.add_argument("--beta", type=float, help="entity consolidation weight")
    p.add_argument("--budget", type=int, help="episodic memory per stage")
    p.add_argument("--epochs", type=int, help="epochs per task")
    p.add_argument("--jobs", type=int, help="parallel (strategy, seed) workers")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compare", help="merge finished report directories")
    p.add_argument("runs", nargs="+", help="directories written by train")
    p.add_argument("--out", help=f"output directory (default ${_OUT_ENV})")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--scope", choices=("layer", "model", "all"), default="all")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--repeat", type=int, default=1, help="number of seeds to run")
    p.add_argument(
        "--inject-fault",
        action="store_true",
        help="corrupt one gradient to demonstrate failure detection",
    )
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except LifelearnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
