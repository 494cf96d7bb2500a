"""Command-line entry point: ``echelon <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 Tier-1-only fallback.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import ati, corpus, evaluation as ev, pipeline
from .config import PRESETS, RunConfig
from .exceptions import EchelonError, IoFailure, MalformedPe, ModelFormatError
from .tier2 import EchelonModel

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DEGENERATE = 0, 1, 2, 3

logger = logging.getLogger("echelon")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad arguments, which would collide with data errors
    def error(self, message):
        raise UsageError(message)


# Flags that override config keys; None means "not given".
_OVERRIDES = {
    "target_fpr": float, "window": int, "n_filters": int, "embed_dim": int, "hidden": int,
    "batch_size": int, "lr": float, "max_epochs": int, "patience": int, "cutoff_step": float,
    "cutoff_max": float, "mode": str, "boosting": str, "folds": int, "seed": int,
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML config file")
    p.add_argument("--preset", choices=sorted(PRESETS), help="base preset (default: desk)")
    for name, typ in _OVERRIDES.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)
    p.add_argument("--strict-threshold", action="store_true", default=None)


def resolve_config(args) -> RunConfig:
    """Preset, then config file, then flags; later layers win."""
    doc = {}
    if args.config is not None:
        import yaml
        try:
            doc = yaml.safe_load(args.config.read_text()) or {}
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from exc
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a mapping")
    if args.preset is not None:
        doc["preset"] = args.preset
    for name in list(_OVERRIDES) + ["strict_threshold"]:
        value = getattr(args, name, None)
        if value is not None:
            doc[name] = value
    try:
        return RunConfig.from_dict(doc)
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def _load_dataset(source):
    ds = corpus.ingest(source)
    for path, reason in ds.skipped:
        logger.warning("skipped %s: %s", path, reason)
    return ds.samples


def cmd_generate(args) -> int:
    if args.reference:
        spec = corpus.reference_spec(args.n_benign, args.n_malware, args.seed)
    else:
        spec = corpus.CorpusSpec(n_benign=args.n_benign, n_malware=args.n_malware,
                                 motifs=corpus.reference_motifs(args.seed), seed=args.seed)
    rows = corpus.generate(spec, args.out)
    print(f"wrote {len(rows)} samples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = resolve_config(args)
    res = pipeline.run_full(config, _load_dataset(args.data), args.out)
    print(ev.rows_to_table(res.rows))
    if res.degenerate:
        logger.warning("Tier-2 could not be trained; the saved model is Tier-1 only")
        return EXIT_DEGENERATE
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model = EchelonModel.load(args.model)
    samples = _load_dataset(args.data)
    result = ev.evaluate(model, samples)
    s_bias = len(model.selection) if model.selection is not None else 0
    n_names = len({n for s in samples for n in s.section_names})
    rows = [ev.report_row("evaluate", result.confusion, s_bias, n_names)]
    cols = pipeline.DETERMINISTIC_COLUMNS
    if args.out is not None:
        args.out.write_text(ev.rows_to_csv(rows, cols))
    print(ev.rows_to_table(rows, cols))
    return EXIT_OK


def cmd_predict(args) -> int:
    rows, errors = pipeline.predict(args.model, args.files)
    out = csv.DictWriter(sys.stdout, fieldnames=["id", "label", "tier1_score", "tier2_score",
                                                 "tier", "boost_short_circuit"],
                         lineterminator="\n")
    out.writeheader()
    for r in rows:
        out.writerow({**r, "tier2_score": "" if r["tier2_score"] is None else r["tier2_score"]})
    for path, reason in errors:
        print(f"error: {path}: {reason}", file=sys.stderr)
    return EXIT_DATA if not rows else EXIT_OK


def cmd_trace(args) -> int:
    model = EchelonModel.load(args.model)
    samples = _load_dataset(args.data)
    traces = ati.trace_samples(model.tier1, samples, model.max_len)
    stats = ati.compute_stats(traces, {s.id: s.label for s in samples})
    args.out.write_text(stats.to_csv())
    hist = stats.histogram()
    if args.histogram is not None:
        args.histogram.write_text(hist + "\n")
    else:
        print(hist)
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = resolve_config(args)
    try:
        widths = [int(w) for w in args.widths.split(",")]
    except ValueError as exc:
        raise UsageError(f"bad --widths: {exc}") from exc
    if any(w <= 0 for w in widths):
        raise UsageError("widths must be positive")
    rows = pipeline.sweep_filter_width(config, _load_dataset(args.data), widths)
    text = ev.rows_to_csv(rows, pipeline.SWEEP_COLUMNS)
    if args.out is not None:
        args.out.write_text(text)
    print(text, end="")
    return EXIT_OK if any(not r.get("error") for r in rows) else EXIT_DATA


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="echelon", description="Two-tier locked-FPR malware detector")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate-corpus", help="write a synthetic labelled PE corpus")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n-benign", type=int, default=2000)
    p.add_argument("--n-malware", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--reference", action="store_true", help="use the reference corpus layout")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train both tiers and evaluate on the held-out split")
    p.add_argument("--data", type=Path, required=True, help="manifest.csv or corpus directory")
    p.add_argument("--out", type=Path, required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a labelled dataset with a saved model")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, help="CSV report path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="label loose files")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("files", nargs="+", type=Path)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("trace", help="per-section activation statistics of the Tier-1 model")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="CSV path")
    p.add_argument("--histogram", type=Path, help="text histogram path (default: stdout)")
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("sweep", help="repeat training over several window widths")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--widths", required=True, help="comma-separated, e.g. 16,64,256")
    p.add_argument("--out", type=Path)
    _add_config_flags(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
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
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, MalformedPe, ModelFormatError, IoFailure, EchelonError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
