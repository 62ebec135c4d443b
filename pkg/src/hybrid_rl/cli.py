"""Command line: ``run`` a configured pipeline, ``ablate`` a matrix, ``report`` on metrics files.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import traceback
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import policy as P
from .config import ConfigError, TrainConfig, apply_override, load_config
from .trainer import METRIC_COLUMNS, MetricRecord, Trainer, freeze_matrix, pipeline_matrix, run_ablation, \
    ssb_matrix, threshold_matrix

log = logging.getLogger("hybrid_rl")

MANIFEST_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def code_version() -> str:
    """Package version plus a digest of the package sources."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def build_manifest(cfg: TrainConfig) -> dict:
    return {"manifest_version": MANIFEST_VERSION, "seed": cfg.seed, "code_version": code_version(),
            "metrics_columns": list(METRIC_COLUMNS), "config": cfg.to_dict()}


def resolve_config(args) -> TrainConfig:
    cfg = load_config(args.config)
    for assignment in args.override or []:
        cfg = apply_override(cfg, assignment)
    if args.stage:
        cfg = apply_override(cfg, f"stages={json.dumps(args.stage)}")
    if args.ssb:
        cfg = apply_override(cfg, f"grpo.buffer.enabled={'true' if args.ssb == 'on' else 'false'}")
    if args.seed is not None:
        cfg = apply_override(cfg, f"seed={args.seed}")
    return cfg


class MetricsWriter:
    """Appends one CSV row per record and flushes, so partial runs leave valid files."""

    def __init__(self, out: Path):
        self.metrics = open(out / "metrics.csv", "w", newline="", encoding="utf-8")
        self.timing = open(out / "timing.csv", "w", newline="", encoding="utf-8")
        self._m = csv.writer(self.metrics, lineterminator="\n")
        self._t = csv.writer(self.timing, lineterminator="\n")
        self._m.writerow(METRIC_COLUMNS)
        self._t.writerow(("step", "stage", "wall_clock"))

    def __call__(self, rec: MetricRecord) -> None:
        self._m.writerow(rec.row())
        self._t.writerow((rec.step, rec.stage, f"{rec.wall_clock:.3f}"))
        self.metrics.flush()
        self.timing.flush()

    def close(self) -> None:
        self.metrics.close()
        self.timing.close()


def cmd_run(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(build_manifest(cfg), indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")
    writer = MetricsWriter(out)
    trainer = None

    def on_stage_end(stage: str, params) -> None:
        P.save_checkpoint(params, out / "checkpoints" / f"{stage}.ckpt", {"stage": stage})

    try:
        trainer = Trainer(cfg, on_record=writer)
        params = trainer.run(on_stage_end=on_stage_end)
        P.save_checkpoint(params, out / "checkpoints" / "final.ckpt", {"stage": "final"})
    except ConfigError:
        raise
    except Exception as exc:  # noqa: BLE001 - record and report any runtime failure
        last = trainer.records[-1] if trainer and trainer.records else None
        failure = {"error": type(exc).__name__, "message": str(exc), "traceback": traceback.format_exc(),
                   "last_stage": last.stage if last else None, "last_step": last.step if last else None}
        (out / "failure.json").write_text(json.dumps(failure, indent=2) + "\n", encoding="utf-8")
        print(f"error: run failed: {type(exc).__name__}: {exc} (see {out / 'failure.json'})", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        writer.close()
    final = trainer.final()
    print(f"done: {len(trainer.records)} records, final eval accuracy {final.eval_accuracy:.3f}, "
          f"hallucination proxy {final.hallucination_rate:.3f} -> {out}")
    return EXIT_OK


MATRICES = {"ssb": ssb_matrix, "pipeline": pipeline_matrix, "freeze": freeze_matrix, "threshold": threshold_matrix}


def cmd_ablate(args) -> int:
    args.seed = None
    cfg = resolve_config(args)
    out = Path(args.out)
    matrix = MATRICES[args.matrix](cfg)
    cells = run_ablation(matrix, args.seeds)
    failed = 0
    for cell in cells:
        cell_dir = out / f"{cell.name}__seed{cell.seed}"
        cell_dir.mkdir(parents=True, exist_ok=True)
        (cell_dir / "manifest.json").write_text(json.dumps(build_manifest(cell.config), indent=2, sort_keys=True)
                                                + "\n", encoding="utf-8")
        if cell.error:
            failed += 1
            (cell_dir / "failure.json").write_text(json.dumps({"error": cell.error}) + "\n", encoding="utf-8")
            continue
        with open(cell_dir / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRIC_COLUMNS)
            for rec in cell.records:
                w.writerow(rec.row())
    print(f"ablation {args.matrix}: {len(cells)} cells, {failed} failed -> {out}")
    return EXIT_RUNTIME if failed else EXIT_OK


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

class SchemaError(Exception):
    pass


def read_metrics(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return []
    if tuple(rows[0]) != METRIC_COLUMNS:
        raise SchemaError(f"{path}: header does not match the metrics column registry")
    out = []
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(METRIC_COLUMNS):
            raise SchemaError(f"{path}:{i}: expected {len(METRIC_COLUMNS)} fields, got {len(row)}")
        rec = {}
        for name, value in zip(METRIC_COLUMNS, row):
            if name == "stage":
                rec[name] = value
            elif value == "":
                rec[name] = None
            else:
                try:
                    rec[name] = float(value)
                except ValueError as exc:
                    raise SchemaError(f"{path}:{i}: column {name} is not numeric: {value!r}") from exc
        out.append(rec)
    return out


def _steps_to(records: list[dict], threshold: float) -> float | None:
    for r in records:
        if r["eval_accuracy"] is not None and r["eval_accuracy"] >= threshold:
            return r["step"]
    return None


def summarize(label: str, records: list[dict], manifest: dict | None) -> dict:
    final = records[-1]
    grpo = [r for r in records if r["stage"] == "grpo" and r["effective_fraction"] is not None]
    tail = grpo[-max(1, len(grpo) // 4):] if grpo else []

    def mean(key, rows):
        vals = [r[key] for r in rows if r[key] is not None]
        return float(np.mean(vals)) if vals else None

    cfg = (manifest or {}).get("config", {})
    return {
        "run": label,
        "seed": (manifest or {}).get("seed"),
        "stages": "+".join(cfg.get("stages", [])) or None,
        "ssb": cfg.get("grpo", {}).get("buffer", {}).get("enabled"),
        "final_step": final["step"],
        "eval_accuracy": final["eval_accuracy"],
        "hallucination_rate": final["hallucination_rate"],
        "fresh_effective_last_quarter": mean("effective_fraction", tail),
        "batch_effective_mean": mean("batch_effective_fraction", grpo),
        "steps_to_90": _steps_to(records, 0.9),
    }


SUMMARY_COLUMNS = ("run", "seed", "stages", "ssb", "final_step", "eval_accuracy", "hallucination_rate",
                   "fresh_effective_last_quarter", "batch_effective_mean", "steps_to_90")
SERIES = ("eval_accuracy", "hallucination_rate", "effective_fraction", "batch_effective_fraction", "mean_rule")


def _pair_key(manifest: dict) -> str:
    cfg = json.loads(json.dumps(manifest["config"]))
    cfg["grpo"]["buffer"].pop("enabled", None)
    return json.dumps(cfg, sort_keys=True)


def ssb_deltas(rows: list[dict], manifests: list[dict | None]) -> list[dict]:
    """Rows for runs that differ only in the buffer flag: (on - off) deltas."""
    by_key: dict[str, dict[bool, dict]] = {}
    for row, man in zip(rows, manifests):
        if man and "config" in man:
            by_key.setdefault(_pair_key(man), {})[bool(row["ssb"])] = row
    deltas = []
    for pair in by_key.values():
        if True in pair and False in pair:
            on, off = pair[True], pair[False]
            d = {"run": f"delta({on['run']} - {off['run']})", "seed": on["seed"], "stages": on["stages"],
                 "ssb": "on-off"}
            for key in SUMMARY_COLUMNS[4:]:
                a, b = on[key], off[key]
                d[key] = None if a is None or b is None else a - b
            deltas.append(d)
    return deltas


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


def format_table(rows: list[dict]) -> str:
    cells = [list(SUMMARY_COLUMNS)] + [[_fmt(r[c]) for c in SUMMARY_COLUMNS] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(SUMMARY_COLUMNS))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in cells)


def _label(path: Path, used: set[str]) -> str:
    label = path.parent.name if path.name == "metrics.csv" and path.parent.name else path.stem
    base, n = label, 1
    while label in used:
        n += 1
        label = f"{base}#{n}"
    used.add(label)
    return label


def cmd_report(args) -> int:
    rows, manifests, used = [], [], set()
    series: dict[str, list[dict]] = {}
    for name in args.files:
        path = Path(name)
        if not path.is_file():
            raise UsageError(f"metrics file not found: {path}")
        records = read_metrics(path)
        if not records:
            print(f"{path}: no records", file=sys.stderr)
            continue
        man_path = path.parent / "manifest.json"
        manifest = json.loads(man_path.read_text(encoding="utf-8")) if man_path.is_file() else None
        label = _label(path, used)
        rows.append(summarize(label, records, manifest))
        manifests.append(manifest)
        series[label] = records
    if not rows:
        print("no records in any input file", file=sys.stderr)
        return EXIT_USAGE
    table = rows + ssb_deltas(rows, manifests)
    print(format_table(table))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SUMMARY_COLUMNS)
            for r in table:
                w.writerow(["" if r[c] is None else r[c] for c in SUMMARY_COLUMNS])
        for label, records in series.items():
            for col in SERIES:
                points = [(r["step"], r[col]) for r in records if r[col] is not None]
                if not points:
                    continue
                with open(out / f"{label}__{col}.csv", "w", newline="", encoding="utf-8") as fh:
                    w = csv.writer(fh, lineterminator="\n")
                    w.writerow(("step", "value"))
                    w.writerows((int(s), repr(v)) for s, v in points)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hybrid-rl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", required=True, help="YAML/JSON config or a run manifest")
        p.add_argument("--out", default="runs/latest", help="output directory")
        p.add_argument("--stage", action="extend", nargs="+", choices=("sft", "mpo", "grpo"),
                       help="stage to run (repeatable; replaces the configured list)")
        p.add_argument("--override", action="extend", nargs="+", metavar="KEY=VALUE", help="dotted config override")
        p.add_argument("--ssb", choices=("on", "off"), help="enable or disable the sample buffer")

    run = sub.add_parser("run", help="run the configured pipeline")
    common(run)
    run.add_argument("--seed", type=int)
    run.set_defaults(func=cmd_run)

    ablate = sub.add_parser("ablate", help="run an ablation matrix over seeds")
    common(ablate)
    ablate.add_argument("--matrix", choices=sorted(MATRICES), required=True)
    ablate.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ablate.set_defaults(func=cmd_ablate)

    report = sub.add_parser("report", help="summarise metrics files")
    report.add_argument("files", nargs="+")
    report.add_argument("--out", help="directory for summary.csv and per-run series files")
    report.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SchemaError as exc:
        print(f"error: schema mismatch: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
