"""``hdblock`` command line: block, evaluate, lsh-curve, stats.

Exit codes: 0 success, 1 usage or configuration error, 2 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
import time
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from . import __version__
from .blocking import ConfigError, build_index, load_config, lsh_probability, simulate_band_sharing
from .engine import hashed_dynamic_blocking
from .evaluation import (
    UndefinedMetricError,
    naive_pair_count,
    pair_completeness,
    pair_quality,
    read_labels,
    threshold_blocking,
    top_level_block_sizes,
)
from .model import EngineParams
from .pairs import read_pairs, remove_dupe_pairs, write_block_sets, write_pairs
from .sketches import ConfigurationError
from .validation import DataError

log = logging.getLogger("hdblock")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
THREADS_ENV = "HDBLOCK_THREADS"
STATS_FORMAT = "hdb-stats/1"
REPORT_FORMAT = "hdb-eval/1"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV}={raw!r} is not an integer") from None
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be >= 1, got {n}")
    return n


# ---------------------------------------------------------------------------
# input


def _detect_format(path: Path, fmt: str) -> str:
    if fmt != "auto":
        return fmt
    return "jsonl" if path.suffix.lower() in (".jsonl", ".ndjson") else "csv"


def read_records(paths: Sequence[str], fmt: str = "auto", delimiter: str = ",") -> pd.DataFrame:
    """Read and stack input files. Delimited text needs a header row; empty cells are missing."""
    frames = []
    for raw in paths:
        path = Path(raw)
        if not path.is_file():
            raise DataError(f"input {raw!r} does not exist")
        kind = _detect_format(path, fmt)
        try:
            if kind == "csv":
                frame = pd.read_csv(path, dtype=str, keep_default_na=False, sep=delimiter, encoding_errors="replace")
                frame = frame.replace("", None)
            else:
                rows = []
                with open(path, encoding="utf-8") as fh:
                    for lineno, line in enumerate(fh, 1):
                        if not line.strip():
                            continue
                        try:
                            obj = json.loads(line)
                        except json.JSONDecodeError as exc:
                            raise DataError(f"{raw}:{lineno}: invalid JSON ({exc.msg})") from None
                        if not isinstance(obj, dict):
                            raise DataError(f"{raw}:{lineno}: expected a JSON object per line")
                        rows.append(obj)
                frame = pd.DataFrame.from_records(rows)
        except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
            raise DataError(f"{raw}: cannot parse as {kind}: {exc}") from None
        frames.append(frame)
    return pd.concat(frames, ignore_index=True) if len(frames) > 1 else frames[0]


def _engine_params(args) -> EngineParams:
    try:
        return EngineParams(
            max_block_size=args.max_block_size,
            max_keys=args.max_keys,
            max_similarity=args.max_similarity,
            max_iterations=args.max_iterations,
            bloom_target_fpr=args.bloom_fpr,
            cms_width=args.cms_width,
            cms_depth=args.cms_depth,
            seed=args.seed,
            exact_membership=args.exact_membership,
            n_partitions=args.partitions or args.threads,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------------------
# output


class _AtomicOutputs:
    """Stage files in a scratch directory next to the target; move them in only on success."""

    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self.stage: Path | None = None
        self.created = False

    def __enter__(self) -> Path:
        self.created = not self.out_dir.exists()
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.stage = Path(tempfile.mkdtemp(prefix=".hdblock-", dir=self.out_dir))
        return self.stage

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None:
                for f in sorted(self.stage.iterdir()):
                    os.replace(f, self.out_dir / f.name)
        finally:
            shutil.rmtree(self.stage, ignore_errors=True)
            if exc_type is not None and self.created:
                shutil.rmtree(self.out_dir, ignore_errors=True)
        return False


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_block(args) -> int:
    threads = args.threads
    params = _engine_params(args)
    config = load_config(args.config)
    t0 = time.perf_counter()
    frame = read_records(args.input, args.format, args.delimiter)
    index = build_index(frame, config, args.id_column)
    t1 = time.perf_counter()
    stats: dict = {
        "format": STATS_FORMAT,
        "algorithm": args.algorithm,
        "records": len(frame),
        "key_occurrences": len(index),
        "params": {k: v for k, v in vars(params).items() if k != "n_partitions"},
        "config": config.to_dict(),
    }
    if args.algorithm == "hdb":
        result = hashed_dynamic_blocking(index, params, n_jobs=threads)
        t2 = time.perf_counter()
        output = remove_dupe_pairs(result.blocks)
        pairs = output.pairs
        stats.update(
            iterations=[{k: v for k, v in s.as_dict().items() if k != "seconds"} for s in result.iterations],
            n_iterations=len(result.iterations) - 1,
            converged=result.converged,
            abandoned_oversized_keys=result.abandoned_oversized_keys,
            blocks=int((output.retained > 0).sum()),
        )
    else:
        t2 = time.perf_counter()
        output = None
        pairs = threshold_blocking(index, params.max_block_size)
    t3 = time.perf_counter()
    stats["pairs"] = len(pairs)
    timings = {"index": t1 - t0, "engine": t2 - t1, "pairs": t3 - t2}

    with _AtomicOutputs(Path(args.out)) as stage:
        write_pairs(pairs, stage / "pairs.csv")
        if output is not None and not args.no_block_sets:
            write_block_sets(output.iter_block_pair_sets(), stage / "blocks.txt")
        _write_json(stage / "stats.json", stats)
        timings["total"] = time.perf_counter() - t0
        _write_json(stage / "timings.json", {"format": STATS_FORMAT, "seconds": timings})
    log.info("%d records -> %d pairs in %.2fs", len(frame), len(pairs), timings["total"])
    return EXIT_OK


def cmd_evaluate(args) -> int:
    labels_path = Path(args.labels)
    if not labels_path.is_file():
        raise DataError(f"labels {args.labels!r} do not exist")
    pairs_path = Path(args.pairs)
    if pairs_path.is_dir():
        pairs_path = pairs_path / "pairs.csv"
    if not pairs_path.is_file():
        raise DataError(f"pair file {str(pairs_path)!r} does not exist")
    labels = read_labels(labels_path, complete=not args.partial_labels)
    if not len(labels):
        raise DataError(f"label file {args.labels!r} holds no positive pairs")
    pairs = read_pairs(pairs_path)
    report = {
        "format": REPORT_FORMAT,
        "pairs": len(pairs),
        "positives": len(labels),
        "labels_complete": labels.complete,
        "pair_completeness": pair_completeness(pairs, labels),
    }
    if labels.complete:
        report["pair_quality"] = pair_quality(pairs, labels) if len(pairs) else None
    run_dir = pairs_path.parent
    if (run_dir / "stats.json").is_file():
        stats = json.loads((run_dir / "stats.json").read_text())
        report["n_iterations"] = stats.get("n_iterations")
        report["iterations"] = stats.get("iterations")
        report["algorithm"] = stats.get("algorithm")
    if (run_dir / "timings.json").is_file():
        report["runtime_seconds"] = json.loads((run_dir / "timings.json").read_text())["seconds"].get("total")
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def _parse_grid(raw: str) -> list[float]:
    try:
        grid = [float(x) for x in raw.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--grid must be comma-separated numbers, got {raw!r}") from None
    if not grid or any(not 0 <= j <= 1 for j in grid):
        raise UsageError("--grid values must lie in [0, 1]")
    return grid


def cmd_lsh_curve(args) -> int:
    if args.bands < 1 or args.width < 1:
        raise UsageError(f"bands and width must be >= 1, got {args.bands}, {args.width}")
    grid = _parse_grid(args.grid)
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        header = ["j", "closed_form"] + (["monte_carlo"] if args.samples else [])
        out.write(args.delimiter.join(header) + "\n")
        for j in grid:
            row = [f"{j:.6g}", f"{lsh_probability(args.bands, args.width, j):.6f}"]
            if args.samples:
                row.append(f"{simulate_band_sharing(args.bands, args.width, j, args.samples, args.seed):.6f}")
            out.write(args.delimiter.join(row) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_stats(args) -> int:
    config = load_config(args.config)
    frame = read_records(args.input, args.format, args.delimiter)
    index = build_index(frame, config, args.id_column)
    sizes = top_level_block_sizes(index)
    report = {
        "format": STATS_FORMAT,
        "records": len(frame),
        "key_occurrences": len(index),
        "blocks": len(sizes),
        "largest_block": int(sizes.max()) if len(sizes) else 0,
        "oversized_blocks": int((sizes > args.max_block_size).sum()),
        "threshold_pairs": len(threshold_blocking(index, args.max_block_size)),
    }
    if args.naive:
        report["naive_pairs"] = naive_pair_count(index)
    if len(sizes):
        report["block_size_quantiles"] = {
            str(q): float(np.quantile(sizes, q)) for q in (0.5, 0.9, 0.99)
        }
    sys.stdout.write(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_input(p: argparse.ArgumentParser) -> None:
    p.add_argument("input", nargs="+", help="record files (CSV with header, or JSON lines); stacked in order")
    p.add_argument("--format", choices=("auto", "csv", "jsonl"), default="auto")
    p.add_argument("--delimiter", default=",", help="field delimiter for delimited text (default ',')")
    p.add_argument("--id-column", help="integer record-ID column; default is the row ordinal")
    p.add_argument("--config", required=True, help="blocking config (YAML or JSON)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hdblock", description="Hashed dynamic blocking for record deduplication.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="log per-iteration statistics")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("block", help="block records and write candidate pairs")
    _add_input(p)
    p.add_argument("--out", required=True, help="output directory (pairs.csv, blocks.txt, stats.json)")
    p.add_argument("--algorithm", choices=("hdb", "threshold"), default="hdb")
    p.add_argument("--max-block-size", type=int, default=500)
    p.add_argument("--max-keys", type=int, default=80)
    p.add_argument("--max-similarity", type=float, default=0.9)
    p.add_argument("--max-iterations", type=int, default=20)
    p.add_argument("--bloom-fpr", type=float, default=1e-8)
    p.add_argument("--cms-width", type=int, default=1 << 20)
    p.add_argument("--cms-depth", type=int, default=5)
    p.add_argument("--seed", type=int, default=0, help="sketch seed")
    p.add_argument("--exact-membership", action="store_true", help="exact key set instead of a Bloom filter")
    p.add_argument("--threads", type=int, default=None, help=f"worker threads (default ${THREADS_ENV} or 1)")
    p.add_argument("--partitions", type=int, default=None, help="record partitions (default: threads)")
    p.add_argument("--no-block-sets", action="store_true", help="skip blocks.txt")
    p.set_defaults(func=cmd_block)

    p = sub.add_parser("evaluate", help="pair completeness / quality against labels")
    p.add_argument("pairs", help="pairs.csv or a block output directory")
    p.add_argument("labels", help="positive pairs, one 'rid1,rid2' per line")
    p.add_argument("--partial-labels", action="store_true", help="labels are incomplete: report PC only")
    p.add_argument("--out", help="also write the JSON report here")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("lsh-curve", help="band-sharing probability table")
    p.add_argument("--bands", "-b", type=int, required=True)
    p.add_argument("--width", "-w", type=int, required=True)
    p.add_argument("--grid", default="0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1")
    p.add_argument("--samples", type=int, default=0, help="Monte-Carlo samples per grid point (0 = skip)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--delimiter", default=",")
    p.add_argument("--out")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_lsh_curve)

    p = sub.add_parser("stats", help="top-level block statistics and baseline pair counts")
    _add_input(p)
    p.add_argument("--max-block-size", type=int, default=500)
    p.add_argument("--naive", action="store_true", help="also count naive pairs (materializes every pair)")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # --help / --version exit 0; argparse errors exit EXIT_USAGE
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(name)s %(levelname)s %(message)s"
    )
    try:
        if args.threads is None:
            args.threads = _default_threads()
        if args.threads < 1:
            raise UsageError(f"--threads must be >= 1, got {args.threads}")
        if getattr(args, "partitions", None) is not None and args.partitions < 1:
            raise UsageError(f"--partitions must be >= 1, got {args.partitions}")
        return args.func(args)
    except (UsageError, ConfigError, ConfigurationError) as exc:
        print(f"hdblock: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, UndefinedMetricError, FileNotFoundError) as exc:
        print(f"hdblock: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
