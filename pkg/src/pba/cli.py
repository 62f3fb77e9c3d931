"""Command line entry point: ``search``, ``train``, ``baseline``, ``report``.

Exit codes: 0 on success, 2 for a bad config or bad arguments, 3 for any
failure while running.  Every artifact is written atomically.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import plotting
from ._io import atomic_write_bytes, atomic_write_text
from .config import ConfigError, RunConfig, load_config
from .harness import (
    RandomScheduleSpec,
    ReplayMode,
    best_of_n_curve,
    random_baseline,
    schedule_summary,
    train_with_schedule,
)
from .pbt import SEARCH_LOG_COLUMNS, run_search, search_log_csv
from .policy import schedule_from_json, schedule_to_json
from .trainer import ToyFactory

log = logging.getLogger("pba")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

SCHEDULE_FILE = "schedule.json"
SEARCH_LOG_FILE = "search_log.csv"
SEARCH_SUMMARY_FILE = "search_summary.json"
RANDOM_SCORES_FILE = "random_scores.csv"
BEST_OF_N_FILE = "best_of_n.csv"
TRAIN_COLUMNS = ("epoch", "loss", "train_acc", "val_acc", "test_acc")


class ReportError(RuntimeError):
    pass


def _csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, columns, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(row.get(k)) for k in columns})
    return buf.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return v


def _outdir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- commands --------------------------------------------------------------


def cmd_search(cfg: RunConfig, out: Path) -> None:
    search = cfg.require_search()
    data = cfg.load_data()
    factory = ToyFactory(cfg.trainer, total_epochs=search.epochs)

    def progress(rec):
        best = max(rec.scores.values())
        log.info("interval %d, epoch %d: best val %.4f, %d clones", rec.interval, rec.epoch, best, len(rec.clones))

    result = run_search(search, factory, data, progress)
    atomic_write_text(out / SCHEDULE_FILE, schedule_to_json(result.schedule))
    atomic_write_text(out / SEARCH_LOG_FILE, search_log_csv(result))
    summary = {
        "best_score": result.best_score,
        "winner": result.winner,
        "total_epochs": result.total_epochs,
        "segments": len(result.schedule.entries),
    }
    atomic_write_text(out / SEARCH_SUMMARY_FILE, json.dumps(summary, indent=1) + "\n")
    print(f"best val {result.best_score:.4f} from trial {result.winner}; "
          f"{len(result.schedule.entries)} segments; {result.total_epochs} trial-epochs")


def cmd_train(cfg: RunConfig, schedule_path: Path, mode: ReplayMode, out: Path) -> None:
    schedule = None
    if mode is not ReplayMode.NONE:
        schedule = schedule_from_json(schedule_path.read_text())
    data = cfg.load_data()
    seed = cfg.harness.seed
    if mode is ReplayMode.ORDER_SHUFFLED:
        log.info("order-shuffled replay: segment shuffle drawn from seed %d (third spawned stream)", seed)
    run = train_with_schedule(data, schedule, mode, cfg.trainer, seed, eval_every=cfg.harness.eval_every)
    atomic_write_text(out / f"train_{mode.value}.csv", _csv(run.history, TRAIN_COLUMNS))
    if run.replayed is not None:
        atomic_write_text(out / f"replayed_{mode.value}.json", schedule_to_json(run.replayed))
    final = run.final
    print(f"{mode.value}: final val {final['val_acc']:.4f} test {final['test_acc']:.4f}")


def cmd_baseline(cfg: RunConfig, trials: int, out: Path) -> None:
    if trials < 1:
        raise ConfigError("--trials must be at least 1")
    h = cfg.harness
    try:
        spec = RandomScheduleSpec(cfg.trainer.epochs, h.interval_len_min, h.interval_len_max)
    except ValueError as exc:
        raise ConfigError(f"harness: {exc}") from None
    data = cfg.load_data()
    rows = random_baseline(data, cfg.trainer, trials, h.seed, spec)
    atomic_write_text(out / RANDOM_SCORES_FILE, _csv(rows, ("trial", "seed", "segments", "val_acc", "test_acc")))
    curve = best_of_n_curve([r["test_acc"] for r in rows], trials)
    atomic_write_text(out / BEST_OF_N_FILE, _csv(
        [{"n": n, "expected_best_test_acc": v} for n, v in curve], ("n", "expected_best_test_acc")))
    print(f"{trials} random schedules: mean test {curve[0][1]:.4f}, expected best of {trials} {curve[-1][1]:.4f}")


# --- report ----------------------------------------------------------------


def _read_rows(path: Path, columns: Sequence[str], types: dict) -> list[dict]:
    """Parse a CSV whose header must equal ``columns``; cells are converted
    with ``types`` (empty cells become None where the type allows)."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != tuple(columns):
            raise ReportError(f"{path}:1: expected header {','.join(columns)}, got {','.join(header or [])}")
        for line, cells in enumerate(reader, start=2):
            if len(cells) != len(columns):
                raise ReportError(f"{path}:{line}: expected {len(columns)} fields, got {len(cells)}")
            row = {}
            for name, cell in zip(columns, cells):
                conv, optional = types[name]
                if cell == "" and optional:
                    row[name] = None
                    continue
                try:
                    row[name] = conv(cell)
                except ValueError:
                    raise ReportError(f"{path}:{line}: field '{name}' has invalid value {cell!r}") from None
            rows.append(row)
    return rows


_LOG_TYPES = {
    "interval": (int, False), "trial_id": (int, False), "epoch": (int, False),
    "score": (float, False), "cloned_from": (int, True), "params_digest": (str, False),
}
_TRAIN_TYPES = {"epoch": (int, False), "loss": (float, False), "train_acc": (float, False),
                "val_acc": (float, True), "test_acc": (float, True)}


def _figure_path(out: Path, name: str) -> Path:
    return out.with_name(f"{out.stem}_{name}.png")


def cmd_report(src: Path, out: Path) -> list[Path]:
    """Summarise a run directory.  Writes the schedule summary CSV to ``out``
    and one PNG per available artifact next to it; returns every path written.

    All inputs are parsed before anything is written."""
    if not src.is_dir():
        raise ReportError(f"{src}: not a directory")
    schedule_file = src / SCHEDULE_FILE
    if not schedule_file.exists():
        raise ReportError(f"{schedule_file}: missing (run `search` first)")
    summary = schedule_summary(schedule_from_json(schedule_file.read_text()))
    log_rows = []
    if (src / SEARCH_LOG_FILE).exists():
        log_rows = _read_rows(src / SEARCH_LOG_FILE, SEARCH_LOG_COLUMNS, _LOG_TYPES)
    runs = {path.stem[len("train_"):]: _read_rows(path, TRAIN_COLUMNS, _TRAIN_TYPES)
            for path in sorted(src.glob("train_*.csv"))}
    curve_rows = None
    if (src / BEST_OF_N_FILE).exists():
        curve_rows = _read_rows(src / BEST_OF_N_FILE, ("n", "expected_best_test_acc"),
                                {"n": (int, False), "expected_best_test_acc": (float, False)})

    figures = {"schedule": plotting.schedule_figure(summary)}
    if log_rows:
        figures["search_scores"] = plotting.search_scores_figure(log_rows)
    if runs:
        figures["training"] = plotting.training_figure(runs)
    if curve_rows:
        full = runs.get(ReplayMode.FULL_SCHEDULE.value)
        reference = full[-1]["test_acc"] if full else None
        figures["best_of_n"] = plotting.best_of_n_figure(
            [(r["n"], r["expected_best_test_acc"]) for r in curve_rows], reference)

    out.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out, _csv(summary, ("epoch", "op", "mean_prob", "mean_mag", "prob_share")))
    written = [out]
    for name, png in figures.items():
        path = _figure_path(out, name)
        atomic_write_bytes(path, png)
        written.append(path)
    print(f"wrote {out} and {len(figures)} figure(s)")
    return written


# --- entry point -----------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse already exits 2; keep the code explicit
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser = _Parser(prog="pba", description="Population based augmentation search at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("search", parents=[common], help="run the population search and write the schedule")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", parents=[common], help="train an evaluation model under a replayed schedule")
    p.add_argument("--schedule", required=True)
    p.add_argument("--mode", required=True, choices=[m.value for m in ReplayMode])
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("baseline", parents=[common], help="score random schedules and the best-of-n curve")
    p.add_argument("--config", required=True)
    p.add_argument("--trials", required=True, type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", parents=[common], help="summarise a run directory as CSV plus figures")
    p.add_argument("--in", dest="src", required=True)
    p.add_argument("--out", required=True)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "report":
            cmd_report(Path(args.src), Path(args.out))
            return EXIT_OK
        cfg = load_config(args.config)
        if args.command == "search":
            cmd_search(cfg, _outdir(args.out))
        elif args.command == "train":
            cmd_train(cfg, Path(args.schedule), ReplayMode(args.mode), _outdir(args.out))
        else:
            cmd_baseline(cfg, args.trials, _outdir(args.out))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every other failure maps to one exit code
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
