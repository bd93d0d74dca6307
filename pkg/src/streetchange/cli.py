"""Multi-command pipeline front end.

Stages communicate only through files in the output directory (or
explicitly configured external inputs); every command overwrites its
outputs atomically and drops a machine-readable run report next to them.

Exit codes: 0 success, 1 validation/configuration error, 2 I/O or parse
error, 3 metadata-backend failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import analytics, classifier, decoder, embeddings, geo, timeseries
from .config import ARTIFACTS, PipelineConfig, load_config
from .errors import (
    ConfigError,
    DataFormatError,
    MetadataClientError,
    MissingEmbeddingError,
)
from .fileio import atomic_write_text, sha256_file

logger = logging.getLogger(__name__)

API_KEY_ENV = "STREETCHANGE_API_KEY"
BASE_URL_ENV = "STREETCHANGE_METADATA_URL"

PROXIES = ("change_share", "permits_all", "permits_highvalue")
VARIABLES = {
    "median_household_income": "income_pct_change",
    "population": "population_pct_change",
}


class RunContext:
    """Collects inputs, counts, and warnings for the per-command run report."""

    def __init__(self, command: str, config: PipelineConfig):
        self.command = command
        self.config = config
        self.started = time.monotonic()
        self.inputs: list[Path] = []
        self.row_counts: dict[str, int] = {}
        self.warnings: list[str] = []

    def read_input(self, path: Path) -> Path:
        if not path.exists():
            raise FileNotFoundError(f"input file not found: {path}")
        self.inputs.append(path)
        return path

    def warn(self, message: str) -> None:
        logger.warning(message)
        self.warnings.append(message)

    def write_report(self) -> None:
        report = {
            "command": self.command,
            "input_digests": {str(p): sha256_file(p) for p in sorted(set(self.inputs))},
            "config_digest": self.config.digest(),
            "wall_time_s": round(time.monotonic() - self.started, 6),
            "row_counts": self.row_counts,
            "warnings": self.warnings,
        }
        path = self.config.output_dir / f"report_{self.command.replace('-', '_')}.json"
        atomic_write_text(path, json.dumps(report, indent=2, sort_keys=True) + "\n")


# --- commands ----------------------------------------------------------------

def cmd_sample(ctx: RunContext, args: argparse.Namespace) -> None:
    cfg = ctx.config
    footprints = geo.load_footprints(ctx.read_input(cfg.require_input("footprints")))
    lines = []
    degenerate = 0
    for fp in footprints:
        centroid = geo.polygon_centroid(fp.exterior)
        degenerate += int(centroid.degenerate)
        lines.append(json.dumps({
            "scene_id": fp.building_id,
            "lat": centroid.point[0],
            "lon": centroid.point[1],
            "degenerate": centroid.degenerate,
        }, separators=(",", ":")))
    if degenerate:
        ctx.warn(f"{degenerate} footprint(s) had degenerate rings; used vertex means")
    atomic_write_text(cfg.artifact("scene_points"), "\n".join(lines) + ("\n" if lines else ""))
    ctx.row_counts["scenes"] = len(lines)


def _metadata_client(ctx: RunContext, args: argparse.Namespace) -> geo.MetadataClient:
    cfg = ctx.config
    fixtures = cfg.paths.get("metadata_fixtures")
    if fixtures is not None:
        return geo.FixtureMetadataClient(ctx.read_input(fixtures))
    base_url = getattr(args, "base_url", None) or os.environ.get(BASE_URL_ENV)
    if not base_url:
        raise ConfigError(
            "no metadata source: set paths.metadata_fixtures or provide "
            f"--base-url / ${BASE_URL_ENV}"
        )
    return geo.HttpMetadataClient(base_url, api_key=os.environ.get(API_KEY_ENV, ""))


def cmd_fetch_metadata(ctx: RunContext, args: argparse.Namespace) -> None:
    cfg = ctx.config
    client = _metadata_client(ctx, args)
    points_path = ctx.read_input(cfg.artifact("scene_points"))
    scenes = []
    empty = 0
    with open(points_path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            series = geo.build_series_from_point(
                rec["scene_id"], (rec["lat"], rec["lon"]), client, cfg.sampling_radius_m
            )
            if series is None:
                empty += 1
            else:
                scenes.append(series)
    if empty:
        ctx.warn(f"{empty} scene(s) had no panorama coverage and were dropped")
    records = [timeseries.series_to_record(s) for s in scenes]
    atomic_write_text(
        cfg.artifact("manifest"),
        "\n".join(json.dumps(r, separators=(",", ":")) for r in records) + ("\n" if records else ""),
    )
    ctx.row_counts["scenes"] = len(scenes)
    ctx.row_counts["images"] = sum(len(s) for s in scenes)


def cmd_pairs(ctx: RunContext, args: argparse.Namespace) -> None:
    cfg = ctx.config
    scenes = timeseries.load_manifest(ctx.read_input(cfg.artifact("manifest")))
    pairs: list[timeseries.PairSample] = []
    short = 0
    for series in scenes:
        if len(series) < 2:
            short += 1
            continue
        if args.mode == "all":
            pairs.extend(timeseries.generate_pairs(series))
        else:
            sample = timeseries.sample_pairwise_mode(series, cfg.split_seed)
            if sample is not None:
                pairs.append(sample)
    if short:
        ctx.warn(f"{short} series too short to pair")
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(timeseries.PAIRS_HEADER)
    for p in pairs:
        writer.writerow([p.scene_id, p.earlier_id, p.later_id, p.label])
    atomic_write_text(cfg.artifact("pairs"), buf.getvalue())
    ctx.row_counts["scenes"] = len(scenes)
    ctx.row_counts["pairs"] = len(pairs)
    ctx.row_counts["positive_pairs"] = sum(p.label for p in pairs)


def cmd_split(ctx: RunContext, args: argparse.Namespace) -> None:
    cfg = ctx.config
    scenes = timeseries.load_manifest(ctx.read_input(cfg.artifact("manifest")))
    split = timeseries.split_dataset(scenes, cfg.test_frac, cfg.val_frac_of_rest, cfg.split_seed)
    doc = {
        "seed": split.seed,
        "test": sorted(split.test_scene_ids),
        "val": sorted(split.val_scene_ids),
        "train": sorted(split.train_scene_ids),
    }
    atomic_write_text(cfg.artifact("split"), json.dumps(doc, indent=2, sort_keys=True) + "\n")
    for part in ("test", "val", "train"):
        ctx.row_counts[part] = len(doc[part])


def _load_split(ctx: RunContext) -> dict[str, list[str]]:
    path = ctx.read_input(ctx.config.artifact("split"))
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        return {part: list(doc[part]) for part in ("test", "val", "train")}
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataFormatError(f"{path}: malformed split file: {exc!r}") from exc


def _load_store(ctx: RunContext) -> embeddings.EmbeddingStore:
    cfg = ctx.config
    path = ctx.read_input(cfg.require_input("embeddings"))
    return embeddings.EmbeddingStore.load(path, normalize=cfg.normalize_embeddings)


def cmd_train(ctx: RunContext, args: argparse.Namespace) -> None:
    cfg = ctx.config
    pairs = timeseries.load_pairs(ctx.read_input(cfg.artifact("pairs")))
    split = _load_split(ctx)
    provider = _load_store(ctx)
    train_scenes = set(split["train"])
    val_scenes = set(split["val"])
    train_pairs = [p for p in pairs if p.scene_id in train_scenes]
    val_pairs = [p for p in pairs if p.scene_id in val_scenes]
    if not train_pairs:
        raise ConfigError("no training pairs after applying the split")
    result = classifier.train(train_pairs, provider, cfg.train, val_pairs or None)
    classifier.save_head(
        result.head,
        cfg.artifact("head"),
        threshold=cfg.train.class_threshold,
        config_digest=cfg.digest(),
    )
    classifier.write_train_log(result.log, cfg.artifact("train_log"))
    ctx.row_counts["train_pairs"] = len(train_pairs)
    ctx.row_counts["val_pairs"] = len(val_pairs)
    ctx.row_counts["epochs"] = cfg.train.epochs


def cmd_evaluate(ctx: RunContext, args: argparse.Namespace) -> None:
    cfg = ctx.config
    pairs = timeseries.load_pairs(ctx.read_input(cfg.artifact("pairs")))
    provider = _load_store(ctx)
    head, threshold = classifier.load_head(ctx.read_input(cfg.artifact("head")))
    if args.part != "all":
        split = _load_split(ctx)
        keep = set(split[args.part])
        pairs = [p for p in pairs if p.scene_id in keep]
    if not pairs:
        raise ConfigError(f"no pairs to evaluate in part {args.part!r}")
    if args.threshold is not None:
        threshold = args.threshold
    metrics = classifier.evaluate(head, pairs, provider, threshold, cfg.train.feature_order)
    doc = {
        "part": args.part,
        "n_pairs": len(pairs),
        "threshold": threshold,
        "accuracy": metrics.accuracy,
        "precision": metrics.precision,
        "recall": metrics.recall,
        "f1": metrics.f1,
        "tp": metrics.tp, "fp": metrics.fp, "tn": metrics.tn, "fn": metrics.fn,
        "precision_degenerate": metrics.precision_degenerate,
        "recall_degenerate": metrics.recall_degenerate,
    }
    atomic_write_text(cfg.artifact("metrics"), json.dumps(doc, indent=2, sort_keys=True) + "\n")
    ctx.row_counts["pairs"] = len(pairs)


def cmd_detect(ctx: RunContext, args: argparse.Namespace) -> None:
    cfg = ctx.config
    scenes = timeseries.load_manifest(ctx.read_input(cfg.artifact("manifest")))
    provider = _load_store(ctx)
    head, _threshold = classifier.load_head(ctx.read_input(cfg.artifact("head")))
    results, skipped = decoder.detect_all(
        head, provider, scenes, cfg.decoder, cfg.train.feature_order, jobs=args.jobs
    )
    if skipped:
        ctx.warn(f"{skipped} series skipped for missing embeddings")
    decoder.write_detections(results, cfg.artifact("detections"))
    ctx.row_counts["series"] = len(results)
    ctx.row_counts["skipped"] = skipped
    ctx.row_counts["change_points"] = sum(len(r.segmentation.change_points) for r in results)


def cmd_aggregate(ctx: RunContext, args: argparse.Namespace) -> None:
    cfg = ctx.config
    detections = decoder.load_detections(ctx.read_input(cfg.artifact("detections")))
    scenes = timeseries.load_manifest(ctx.read_input(cfg.artifact("manifest")))
    tracts = analytics.load_tracts(ctx.read_input(cfg.require_input("tracts")))
    scene_points = {s.scene_id: s.target_point for s in scenes}
    stats, unassigned = analytics.aggregate_change(detections, scene_points, tracts)
    if unassigned:
        ctx.warn(f"{unassigned} series fell outside all tracts")
    permits_path = cfg.paths.get("permits")
    if permits_path is not None:
        permits, skipped = analytics.load_permits(ctx.read_input(permits_path))
        if skipped:
            ctx.warn(f"{skipped} permit rows skipped as unparseable")
        all_kept, highvalue = analytics.filter_permits(permits)
        counts_all = analytics.count_permits_by_tract(all_kept, tracts)
        counts_high = analytics.count_permits_by_tract(highvalue, tracts)
        for entry in stats:
            entry.permits_all = counts_all.get(entry.geoid, 0)
            entry.permits_highvalue = counts_high.get(entry.geoid, 0)
        ctx.row_counts["permits_kept"] = len(all_kept)
        ctx.row_counts["permits_highvalue"] = len(highvalue)
    analytics.write_tract_stats(stats, cfg.artifact("tract_stats"))
    ctx.row_counts["tracts"] = len(stats)
    ctx.row_counts["series"] = len(detections)
    ctx.row_counts["unassigned"] = unassigned


def cmd_correlate(ctx: RunContext, args: argparse.Namespace) -> None:
    cfg = ctx.config
    stats = analytics.load_tract_stats(ctx.read_input(cfg.artifact("tract_stats")))
    acs = analytics.load_acs(ctx.read_input(cfg.require_input("acs")))
    deltas = {
        field: analytics.acs_pct_changes(acs, variable, cfg.acs_start_year, cfg.acs_end_year)
        for variable, field in VARIABLES.items()
    }
    for entry in stats:
        entry.income_pct_change = deltas["income_pct_change"].get(entry.geoid)
        entry.population_pct_change = deltas["population_pct_change"].get(entry.geoid)
    entries = []
    for proxy in PROXIES:
        for variable, field in VARIABLES.items():
            xs, ys = [], []
            for s in stats:
                xval = getattr(s, proxy)
                yval = getattr(s, field)
                if xval is None or yval is None:
                    continue
                xs.append(float(xval))
                ys.append(float(yval))
            try:
                res = analytics.pearson(xs, ys)
            except analytics.UndefinedStatisticError as exc:
                ctx.warn(f"correlation {proxy} vs {variable} undefined: {exc}")
                continue
            entries.append({
                "proxy": proxy,
                "variable": variable,
                "r": res.r,
                "r2": res.r_squared,
                "p": res.p_value,
                "n": res.n,
            })
    analytics.write_tract_stats(stats, cfg.artifact("tract_stats"))
    analytics.write_correlation_report(entries, cfg.artifact("correlations"))
    ctx.row_counts["tracts"] = len(stats)
    ctx.row_counts["correlations"] = len(entries)


def emit_report(
    stats: list[analytics.TractStats],
    correlations: list[dict],
    tracts: list[analytics.TractPolygon],
    out_dir: Path,
) -> dict[str, int]:
    """Write the choropleth, tract CSV, correlation JSON, and scatter CSV."""
    if not stats:
        raise ConfigError("no tract stats to report")
    analytics.write_choropleth(stats, tracts, out_dir / ARTIFACTS["choropleth"])
    analytics.write_tract_stats(stats, out_dir / "report_tract_stats.csv")
    analytics.write_correlation_report(correlations, out_dir / "report_correlations.json")
    scatter_lines = ["proxy,variable,geoid,x,y"]
    for proxy in PROXIES:
        for _variable, field in VARIABLES.items():
            for s in stats:
                xval = getattr(s, proxy)
                yval = getattr(s, field)
                if xval is None or yval is None:
                    continue
                scatter_lines.append(f"{proxy},{field},{s.geoid},{xval!r},{yval!r}")
    atomic_write_text(out_dir / ARTIFACTS["scatter"], "\n".join(scatter_lines) + "\n")
    return {"tracts": len(stats), "scatter_rows": len(scatter_lines) - 1}


def cmd_report(ctx: RunContext, args: argparse.Namespace) -> None:
    cfg = ctx.config
    stats = analytics.load_tract_stats(ctx.read_input(cfg.artifact("tract_stats")))
    tracts = analytics.load_tracts(ctx.read_input(cfg.require_input("tracts")))
    correlations_path = cfg.artifact("correlations")
    correlations = []
    if correlations_path.exists():
        ctx.read_input(correlations_path)
        correlations = json.loads(correlations_path.read_text(encoding="utf-8"))
    ctx.row_counts.update(emit_report(stats, correlations, tracts, cfg.output_dir))


COMMANDS = {
    "sample": cmd_sample,
    "fetch-metadata": cmd_fetch_metadata,
    "pairs": cmd_pairs,
    "split": cmd_split,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "detect": cmd_detect,
    "aggregate": cmd_aggregate,
    "correlate": cmd_correlate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="streetchange",
        description="Street-view time-series change detection pipeline.",
    )
    parser.add_argument("--config", help="TOML configuration file")
    parser.add_argument("--out", help="output directory (default: out)")
    parser.add_argument("--seed", type=int, help="override split/train/sampling seed")
    parser.add_argument("--jobs", type=int, default=1, help="worker threads for detect")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", help="footprint centroids -> scene points")
    p.add_argument("--footprints", help="GeoJSON building footprints")

    p = sub.add_parser("fetch-metadata", help="scene points -> series manifest")
    p.add_argument("--fixtures", help="JSONL metadata fixture file")
    p.add_argument("--base-url", help=f"metadata HTTP endpoint (or ${BASE_URL_ENV})")
    p.add_argument("--radius", type=float, help="panorama search radius, meters")

    p = sub.add_parser("pairs", help="manifest -> labeled pairs CSV")
    p.add_argument("--manifest", help="series manifest JSONL")
    p.add_argument("--mode", choices=["all", "sampled"], default="all")

    p = sub.add_parser("split", help="manifest -> scene-level split JSON")
    p.add_argument("--manifest")
    p.add_argument("--test-frac", type=float)
    p.add_argument("--val-frac", type=float)

    p = sub.add_parser("train", help="pairs + embeddings + split -> head JSON")
    p.add_argument("--pairs-file", dest="pairs_file", help="pairs CSV override")
    p.add_argument("--embeddings")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--normalize", action="store_true", default=None)

    p = sub.add_parser("evaluate", help="held-out pair metrics")
    p.add_argument("--embeddings")
    p.add_argument("--part", choices=["test", "val", "train", "all"], default="test")
    p.add_argument("--threshold", type=float)

    p = sub.add_parser("detect", help="decode change points for every series")
    p.add_argument("--manifest")
    p.add_argument("--embeddings")
    p.add_argument("--mode", choices=["dp", "consecutive"])
    p.add_argument("--penalty", type=float)
    p.add_argument("--consecutive-threshold", type=float)

    p = sub.add_parser("aggregate", help="detections -> per-tract stats CSV")
    p.add_argument("--manifest")
    p.add_argument("--tracts")
    p.add_argument("--permits")

    p = sub.add_parser("correlate", help="tract stats + ACS -> correlation JSON")
    p.add_argument("--acs")
    p.add_argument("--start-year", type=int)
    p.add_argument("--end-year", type=int)

    p = sub.add_parser("report", help="choropleth, tract CSV, correlations, scatter")
    p.add_argument("--tracts")

    return parser


def _overrides_from_args(args: argparse.Namespace) -> dict:
    overrides: dict[str, object] = {}
    mapping = {
        "out": "paths.output_dir",
        "footprints": "paths.footprints",
        "fixtures": "paths.metadata_fixtures",
        "manifest": "paths.manifest",
        "embeddings": "paths.embeddings",
        "tracts": "paths.tracts",
        "permits": "paths.permits",
        "acs": "paths.acs",
        "lr": "train.learning_rate",
        "epochs": "train.epochs",
        "batch_size": "train.batch_size",
        "threshold": "train.class_threshold",
        "normalize": "embedding.normalize",
        "penalty": "decoder.change_penalty",
        "consecutive_threshold": "decoder.consecutive_threshold",
        "test_frac": "split.test_frac",
        "val_frac": "split.val_frac_of_rest",
        "radius": "sampling.radius_m",
        "start_year": "acs_years.start",
        "end_year": "acs_years.end",
    }
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "command", None) == "detect" and getattr(args, "mode", None):
        overrides["decoder.mode"] = args.mode
    if getattr(args, "seed", None) is not None:
        overrides["split.seed"] = args.seed
        overrides["train.seed"] = args.seed
    if getattr(args, "pairs_file", None):
        overrides["__pairs_artifact__"] = args.pairs_file
    return overrides


def execute(command: str, config: PipelineConfig, args: argparse.Namespace) -> int:
    """Run one command; exceptions are translated to exit codes by main()."""
    config.output_dir.mkdir(parents=True, exist_ok=True)
    ctx = RunContext(command, config)
    COMMANDS[command](ctx, args)
    ctx.write_report()
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = _overrides_from_args(args)
        pairs_override = overrides.pop("__pairs_artifact__", None)
        config = load_config(args.config, overrides)
        if pairs_override:
            config.paths["pairs"] = Path(pairs_override).resolve()
        return execute(args.command, config, args)
    except ConfigError as exc:
        logger.error("configuration error: %s", exc)
        return 1
    except MetadataClientError as exc:
        logger.error("metadata backend failure: %s", exc)
        return 3
    except DataFormatError as exc:
        logger.error("data format error: %s", exc)
        return 2
    except MissingEmbeddingError as exc:
        logger.error("%s", exc)
        return 1
    except OSError as exc:
        logger.error("I/O error: %s", exc)
        return 2
    except ValueError as exc:
        logger.error("validation error: %s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
