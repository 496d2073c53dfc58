"""Command-line entry point wiring the pipeline together.

Subcommands: ingest, qc, export, stats, ground-score, eval, taxonomy check,
gen-fixtures. Exit codes: 0 success, 1 validation failure, 2 I/O failure;
failures also emit one JSON error record on stderr. Every option can come
from (highest precedence first) a command-line flag, a MEDGROUND_* env var,
the [pipeline] table of a --config TOML file, or the built-in default.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError, MedgroundError, WriteFailure
from .evaluation import evaluate_corpus, load_predictions
from .export import compute_stats, corpus_from_coco, export_coco, load_coco
from .features import read_matrix
from .fixtures import gen_fixtures
from .grounding import (
    PhraseSpanMap,
    aggregate_phrase_probs,
    alignment_scores,
    build_prompt,
    tokenize_prompt,
)
from .ingest import pair_corpus, run_ingest
from .manifest import load_manifest, save_manifest
from .qc import run_qc
from .taxonomy import load_taxonomy, serialize_taxonomy

logger = logging.getLogger("medground")

ENV_PREFIX = "MEDGROUND_"

_DEFAULTS = {
    "manifest": None,
    "taxonomy": None,
    "out": None,
    "min_area_fraction": 0.015,
    "connectivity": 8,
    "axes": None,  # None = per-dataset manifest setting
    "bbox_mode": "per-component",
    "workers": 1,
    "seed": 7,
}


@dataclass
class PipelineConfig:
    manifest: str | None
    taxonomy: str | None
    out: str | None
    min_area_fraction: float
    connectivity: int
    axes: tuple | None
    bbox_mode: str
    workers: int
    seed: int


class _UsageError(Exception):
    def __init__(self, message: str, usage: str):
        super().__init__(message)
        self.usage = usage


class _Parser(argparse.ArgumentParser):
    """argparse that reports bad usage as exit code 1 instead of 2."""

    def error(self, message):
        raise _UsageError(message, self.format_usage())


def _parse_axes(text: str) -> tuple:
    try:
        axes = tuple(int(a) for a in text.split(",") if a != "")
    except ValueError:
        raise ConfigError(f"axes must be comma-separated integers, got {text!r}") from None
    if not axes or any(a not in (0, 1, 2) for a in axes) or len(set(axes)) != len(axes):
        raise ConfigError(f"axes must be distinct values from {{0,1,2}}, got {text!r}")
    return axes


def _load_config_file(path) -> dict:
    try:
        doc = tomllib.loads(Path(path).read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file is not valid TOML: {exc}") from exc
    table = doc.get("pipeline", {})
    unknown = set(table) - set(_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown [pipeline] config keys: {sorted(unknown)}")
    return table


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    """Merge flag > env > config-file > default for every pipeline option."""
    file_values = _load_config_file(args.config) if getattr(args, "config", None) else {}

    def pick(key: str, cast):
        flag = getattr(args, key, None)
        if flag is not None:
            return flag
        env = os.environ.get(ENV_PREFIX + key.upper())
        if env is not None:
            return cast(env)
        if key in file_values:
            value = file_values[key]
            return cast(value) if isinstance(value, str) and cast is not str else value
        return _DEFAULTS[key]

    axes = pick("axes", str)
    if isinstance(axes, str):
        axes = _parse_axes(axes)
    elif isinstance(axes, list):
        axes = tuple(axes)
    cfg = PipelineConfig(
        manifest=pick("manifest", str),
        taxonomy=pick("taxonomy", str),
        out=pick("out", str),
        min_area_fraction=float(pick("min_area_fraction", float)),
        connectivity=int(pick("connectivity", int)),
        axes=axes,
        bbox_mode=pick("bbox_mode", str),
        workers=int(pick("workers", int)),
        seed=int(pick("seed", int)),
    )
    if not 0 <= cfg.min_area_fraction < 1:
        raise ConfigError(f"min-area-fraction must be in [0, 1), got {cfg.min_area_fraction}")
    if cfg.connectivity not in (4, 8):
        raise ConfigError(f"connectivity must be 4 or 8, got {cfg.connectivity}")
    if cfg.bbox_mode not in ("per-component", "per-mask"):
        raise ConfigError(f"bbox-mode must be per-component or per-mask, got {cfg.bbox_mode!r}")
    if cfg.workers < 1:
        raise ConfigError(f"workers must be >= 1, got {cfg.workers}")
    return cfg


def _require(cfg_value, name: str):
    if cfg_value is None:
        raise ConfigError(f"--{name} is required (flag, env, or config)")
    return cfg_value


def _write_text(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8", newline="\n")
    except OSError as exc:
        raise WriteFailure(f"cannot write {path}: {exc}") from exc


def _write_json(path: Path, obj) -> None:
    _write_text(path, json.dumps(obj, indent=2) + "\n")


def _log_scan(scan) -> None:
    if not logger.isEnabledFor(logging.INFO):
        return
    for sample in scan.samples:
        logger.info(
            json.dumps(
                {
                    "event": "sample",
                    "image": sample.image.file_name,
                    "dataset": sample.source_dataset,
                    "masks": len(sample.masks),
                }
            )
        )
    for defect in scan.defects:
        logger.info(
            json.dumps(
                {"event": "defect", "image": defect.image_path, "kind": defect.kind, "detail": defect.detail}
            )
        )


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def _cmd_ingest(args) -> int:
    cfg = resolve_config(args)
    manifest = load_manifest(_require(cfg.manifest, "manifest"))
    out = Path(_require(cfg.out, "out"))
    derived, report = run_ingest(manifest, out, axes_override=cfg.axes, workers=cfg.workers)
    save_manifest(derived, out / "manifest.toml")
    _write_json(out / "ingest_report.json", report.as_records())
    for row in report.as_records():
        print(
            f"{row['dataset']}: {row['volumes_sliced']} volumes, "
            f"{row['images_written']} images, {row['masks_written']} masks"
        )
    return 0


def _scan_and_qc(cfg: PipelineConfig, keep_rle: bool = False):
    manifest = load_manifest(_require(cfg.manifest, "manifest"))
    taxonomy = load_taxonomy(_require(cfg.taxonomy, "taxonomy"))
    scan = pair_corpus(manifest, workers=cfg.workers)
    _log_scan(scan)
    accepted, report = run_qc(
        scan,
        min_area_fraction=cfg.min_area_fraction,
        taxonomy=taxonomy,
        connectivity=cfg.connectivity,
        bbox_mode=cfg.bbox_mode,
        keep_rle=keep_rle,
    )
    return taxonomy, accepted, report


def _cmd_qc(args) -> int:
    cfg = resolve_config(args)
    _, _, report = _scan_and_qc(cfg)
    print(report.to_text(), end="")
    if cfg.out:
        out = Path(cfg.out)
        _write_text(out / "qc_report.txt", report.to_text())
        _write_json(out / "qc_report.json", report.as_records())
    return 0


def _cmd_export(args) -> int:
    cfg = resolve_config(args)
    taxonomy, accepted, report = _scan_and_qc(cfg, keep_rle=args.rle)
    out = Path(_require(cfg.out, "out"))
    out.mkdir(parents=True, exist_ok=True)
    doc = export_coco(accepted, taxonomy, out / "coco.json", include_rle=args.rle)
    _write_json(out / "qc_report.json", report.as_records())
    print(
        f"exported {len(doc.images)} images, {len(doc.annotations)} annotations, "
        f"{len(doc.categories)} categories -> {out / 'coco.json'}"
    )
    return 0


def _cmd_stats(args) -> int:
    cfg = resolve_config(args)
    doc = load_coco(args.coco)
    taxonomy = load_taxonomy(_require(cfg.taxonomy, "taxonomy"))
    stats = compute_stats(corpus_from_coco(doc), taxonomy)
    print(stats.to_text(), end="")
    if cfg.out:
        out = Path(cfg.out)
        _write_text(out / "stats.txt", stats.to_text())
        _write_json(out / "stats.json", stats.as_records())
    return 0


def _load_span_map(args):
    if args.spans:
        obj = json.loads(Path(args.spans).read_text(encoding="utf-8"))
        span_map = PhraseSpanMap.from_records(obj)
        concepts = obj.get("concepts") or [f"phrase_{k}" for k in range(span_map.num_phrases)]
        return span_map, list(concepts)
    if not args.concepts:
        raise ConfigError("ground-score needs --concepts or --spans")
    concepts = [c.strip() for c in args.concepts.split(",")]
    subwords = None
    if args.subwords:
        subwords = json.loads(Path(args.subwords).read_text(encoding="utf-8"))
    prompt = build_prompt(concepts)
    return tokenize_prompt(prompt, subword_table=subwords), concepts


def _cmd_ground_score(args) -> int:
    cfg = resolve_config(args)
    span_map, concepts = _load_span_map(args)
    regions = read_matrix(args.regions)
    tokens = read_matrix(args.tokens)
    scores = alignment_scores(regions, tokens)
    probs = aggregate_phrase_probs(scores, span_map, aggregator=args.aggregate)
    boxes = None
    if args.boxes:
        boxes = json.loads(Path(args.boxes).read_text(encoding="utf-8"))
        if len(boxes) != probs.shape[0]:
            raise ConfigError(f"{len(boxes)} boxes for {probs.shape[0]} regions")
    out_rows = []
    for i in range(probs.shape[0]):
        phrase_probs = {concepts[k]: float(probs[i, k]) for k in range(len(concepts))}
        best = max(range(len(concepts)), key=lambda k: (probs[i, k], -k))
        row = {
            "region": i,
            "box": boxes[i] if boxes else None,
            "phrase_probs": phrase_probs,
            "best_phrase": concepts[best],
            "best_prob": float(probs[i, best]),
            "detected": sorted(k for k in phrase_probs if phrase_probs[k] >= args.threshold),
        }
        out_rows.append(row)
    payload = {
        "concepts": concepts,
        "aggregate": args.aggregate,
        "threshold": args.threshold,
        "regions": out_rows,
    }
    if cfg.out:
        _write_json(Path(cfg.out) / "ground_scores.json", payload)
    print(json.dumps(payload, indent=2))
    return 0


def _cmd_eval(args) -> int:
    cfg = resolve_config(args)
    doc = load_coco(args.gt)
    detections = load_predictions(args.pred)
    result = evaluate_corpus(doc, detections)
    table = result.to_table(run_label=args.label)
    print(table, end="")
    if cfg.out:
        out = Path(cfg.out)
        _write_text(out / "eval_table.txt", table)
        _write_json(out / "eval.json", result.as_records())
    return 0


def _cmd_taxonomy(args) -> int:
    if args.action != "check":
        raise ConfigError(f"unknown taxonomy action {args.action!r}")
    cfg = resolve_config(args)
    path = _require(cfg.taxonomy, "taxonomy")
    tax = load_taxonomy(path)
    original = Path(path).read_text(encoding="utf-8")
    canonical = serialize_taxonomy(tax) == original
    print(f"taxonomy ok: {len(tax.synonyms)} synonyms, {len(tax.fine_to_category)} fine labels, "
          f"{len(tax.category_to_region)} categories, {len(tax.regions)} regions")
    print(f"canonical serialization: {'yes' if canonical else 'no'}")
    return 0


def _cmd_gen_fixtures(args) -> int:
    cfg = resolve_config(args)
    summary = gen_fixtures(_require(cfg.out, "out"), seed=cfg.seed)
    print(json.dumps(summary, indent=2))
    return 0


# --------------------------------------------------------------------------
# Parser wiring
# --------------------------------------------------------------------------


def _add_common(p: _Parser, *names: str) -> None:
    p.add_argument("--config", help="TOML config file with a [pipeline] table")
    p.add_argument("-v", "--verbose", action="store_true", help="per-sample log records")
    if "manifest" in names:
        p.add_argument("--manifest", help="corpus manifest (TOML)")
    if "taxonomy" in names:
        p.add_argument("--taxonomy", help="taxonomy table file")
    if "out" in names:
        p.add_argument("--out", help="output directory")
    if "workers" in names:
        p.add_argument("--workers", type=int, help="parallel decode workers (default 1)")
    if "qc" in names:
        p.add_argument("--min-area-fraction", dest="min_area_fraction", type=float,
                       help="minimum mask area as a fraction of the image (default 0.015)")
        p.add_argument("--connectivity", type=int, choices=(4, 8), help="component connectivity (default 8)")
        p.add_argument("--bbox-mode", dest="bbox_mode", choices=("per-component", "per-mask"),
                       help="one box per connected component (default) or per label mask")


def build_parser() -> _Parser:
    parser = _Parser(prog="medground", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("ingest", help="slice volumes and standardize rasters", parents=[], add_help=True)
    _add_common(p, "manifest", "out", "workers")
    p.add_argument("--axes", help="slicing axes override, e.g. 0,1,2")
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("qc", help="run the three-tier quality gate")
    _add_common(p, "manifest", "taxonomy", "out", "workers", "qc")
    p.set_defaults(func=_cmd_qc)

    p = sub.add_parser("export", help="QC then write the unified annotation document")
    _add_common(p, "manifest", "taxonomy", "out", "workers", "qc")
    p.add_argument("--rle", action="store_true", help="embed run-length masks in annotations")
    p.set_defaults(func=_cmd_export)

    p = sub.add_parser("stats", help="corpus statistics from an annotation document")
    _add_common(p, "taxonomy", "out")
    p.add_argument("--coco", required=True, help="annotation document (JSON)")
    p.set_defaults(func=_cmd_stats)

    p = sub.add_parser("ground-score", help="score regions against prompt phrases")
    _add_common(p, "out")
    p.add_argument("--regions", required=True, help="region feature matrix file")
    p.add_argument("--tokens", required=True, help="token feature matrix file")
    p.add_argument("--concepts", help="comma-separated concept phrases")
    p.add_argument("--spans", help="span-map JSON (alternative to --concepts)")
    p.add_argument("--subwords", help="JSON word -> subword pieces table")
    p.add_argument("--boxes", help="JSON list of per-region boxes")
    p.add_argument("--aggregate", choices=("mean", "max"), default="mean")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=_cmd_ground_score)

    p = sub.add_parser("eval", help="AP/AP50 of predictions against a document")
    _add_common(p, "out")
    p.add_argument("--gt", required=True, help="ground-truth annotation document")
    p.add_argument("--pred", required=True, help="prediction document (JSON list)")
    p.add_argument("--label", default="run", help="row label for the result table")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("taxonomy", help="taxonomy utilities")
    p.add_argument("action", choices=("check",))
    _add_common(p, "taxonomy")
    p.set_defaults(func=_cmd_taxonomy)

    p = sub.add_parser("gen-fixtures", help="write the synthetic fixture tree")
    _add_common(p, "out")
    p.add_argument("--seed", type=int, help="generator seed (default 7)")
    p.set_defaults(func=_cmd_gen_fixtures)

    return parser


def _error_record(exc: Exception) -> str:
    return json.dumps({"error": type(exc).__name__, "message": str(exc)})


def run_cli(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc.usage, file=sys.stderr, end="")
        print(_error_record(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else int(exc.code)
    if not getattr(args, "command", None):
        print(parser.format_usage(), file=sys.stderr, end="")
        print(_error_record(ConfigError("no subcommand given")), file=sys.stderr)
        return 1

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except WriteFailure as exc:
        print(_error_record(exc), file=sys.stderr)
        return 2
    except MedgroundError as exc:
        print(_error_record(exc), file=sys.stderr)
        return 1
    except OSError as exc:
        print(_error_record(exc), file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
