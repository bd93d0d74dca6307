"""Pipeline configuration: TOML file plus command-line overrides.

External inputs are configured under [paths]; every intermediate artifact
lives in the output directory under a fixed name so stages can find each
other without hidden state. Command-line flags win over file values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from .classifier import TrainConfig
from .decoder import DecoderConfig
from .errors import ConfigError
from .fileio import sha256_bytes

PATH_KEYS = (
    "manifest", "embeddings", "tracts", "permits", "acs",
    "footprints", "metadata_fixtures", "output_dir",
)

VALID_KEYS = {
    **{f"paths.{k}": str for k in PATH_KEYS},
    "train.learning_rate": float,
    "train.batch_size": int,
    "train.epochs": int,
    "train.grad_clip_norm": float,
    "train.weight_average_tail": float,
    "train.seed": int,
    "train.class_threshold": float,
    "train.feature_order": str,
    "decoder.change_penalty": float,
    "decoder.epsilon": float,
    "decoder.mode": str,
    "decoder.consecutive_threshold": float,
    "split.seed": int,
    "split.test_frac": float,
    "split.val_frac_of_rest": float,
    "embedding.normalize": bool,
    "sampling.radius_m": float,
    "acs_years.start": int,
    "acs_years.end": int,
}

# Artifact names inside the output directory; stages communicate only
# through these files.
ARTIFACTS = {
    "scene_points": "scene_points.jsonl",
    "manifest": "manifest.jsonl",
    "pairs": "pairs.csv",
    "split": "split.json",
    "head": "head.json",
    "train_log": "train_log.csv",
    "metrics": "metrics.json",
    "detections": "detections.jsonl",
    "tract_stats": "tract_stats.csv",
    "correlations": "correlations.json",
    "choropleth": "choropleth.geojson",
    "scatter": "scatter.csv",
}


@dataclass
class PipelineConfig:
    paths: dict[str, Path | None] = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    split_seed: int = 0
    test_frac: float = 0.5
    val_frac_of_rest: float = 0.1
    normalize_embeddings: bool = False
    sampling_radius_m: float = 50.0
    acs_start_year: int = 2009
    acs_end_year: int = 2021

    @property
    def output_dir(self) -> Path:
        out = self.paths.get("output_dir")
        return out if out is not None else Path("out")

    def artifact(self, name: str) -> Path:
        """Path of a pipeline artifact: explicit [paths] entry, else output_dir default."""
        if name in self.paths and self.paths[name] is not None:
            return self.paths[name]  # type: ignore[return-value]
        return self.output_dir / ARTIFACTS[name]

    def require_input(self, key: str) -> Path:
        """Resolved path for a configured external input; missing key is a config error."""
        path = self.paths.get(key)
        if path is None:
            raise ConfigError(f"required path 'paths.{key}' is not configured")
        return path

    def digest(self) -> str:
        doc = {
            "paths": {k: str(v) for k, v in sorted(self.paths.items()) if v is not None},
            "train": {f.name: getattr(self.train, f.name) for f in fields(self.train)},
            "decoder": {f.name: getattr(self.decoder, f.name) for f in fields(self.decoder)},
            "split": {
                "seed": self.split_seed,
                "test_frac": self.test_frac,
                "val_frac_of_rest": self.val_frac_of_rest,
            },
            "embedding": {"normalize": self.normalize_embeddings},
            "sampling": {"radius_m": self.sampling_radius_m},
            "acs_years": {"start": self.acs_start_year, "end": self.acs_end_year},
        }
        return sha256_bytes(json.dumps(doc, sort_keys=True).encode())


def _flatten(doc: dict, prefix: str = "") -> dict[str, Any]:
    flat: dict[str, Any] = {}
    for key, value in doc.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, f"{dotted}."))
        else:
            flat[dotted] = value
    return flat


def _check_entries(flat: dict[str, Any]) -> None:
    for key, value in flat.items():
        if key not in VALID_KEYS:
            valid = ", ".join(sorted(VALID_KEYS))
            raise ConfigError(f"unknown configuration key {key!r}; valid keys: {valid}")
        want = VALID_KEYS[key]
        if want is float and isinstance(value, int) and not isinstance(value, bool):
            continue  # TOML integers are fine where floats are expected
        if not isinstance(value, want) or (want in (int, float) and isinstance(value, bool)):
            raise ConfigError(
                f"configuration key {key!r} expects {want.__name__}, got {type(value).__name__} ({value!r})"
            )


def load_config(
    path: str | Path | None = None, overrides: dict[str, Any] | None = None
) -> PipelineConfig:
    """Parse the TOML config and apply dotted-key overrides on top.

    Relative paths in the file resolve against the file's directory;
    relative override paths resolve against the working directory. All
    stored paths end up absolute.
    """
    flat: dict[str, Any] = {}
    base_dir = Path.cwd()
    if path is not None:
        cfg_path = Path(path)
        try:
            with open(cfg_path, "rb") as fh:
                doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{cfg_path}: invalid TOML: {exc}") from exc
        flat = _flatten(doc)
        _check_entries(flat)
        base_dir = cfg_path.resolve().parent
        for key in list(flat):
            if key.startswith("paths."):
                flat[key] = str((base_dir / flat[key]).resolve()) if not Path(flat[key]).is_absolute() else flat[key]
    if overrides:
        cleaned = {k: v for k, v in overrides.items() if v is not None}
        _check_entries(cleaned)
        for key, value in cleaned.items():
            if key.startswith("paths."):
                value = str(Path(value).resolve())
            flat[key] = value

    cfg = PipelineConfig()
    cfg.paths = {k: None for k in PATH_KEYS}
    train_kwargs: dict[str, Any] = {}
    decoder_kwargs: dict[str, Any] = {}
    for key, value in flat.items():
        section, name = key.split(".", 1)
        if section == "paths":
            cfg.paths[name] = Path(value)
        elif section == "train":
            train_kwargs[name] = value
        elif section == "decoder":
            decoder_kwargs[name] = value
        elif section == "split":
            if name == "seed":
                cfg.split_seed = value
            elif name == "test_frac":
                cfg.test_frac = float(value)
            else:
                cfg.val_frac_of_rest = float(value)
        elif section == "embedding":
            cfg.normalize_embeddings = value
        elif section == "sampling":
            cfg.sampling_radius_m = float(value)
        elif section == "acs_years":
            if name == "start":
                cfg.acs_start_year = value
            else:
                cfg.acs_end_year = value
    try:
        cfg.train = TrainConfig(**{k: (float(v) if VALID_KEYS[f"train.{k}"] is float else v) for k, v in train_kwargs.items()})
        cfg.decoder = DecoderConfig(**{k: (float(v) if VALID_KEYS[f"decoder.{k}"] is float else v) for k, v in decoder_kwargs.items()})
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg
