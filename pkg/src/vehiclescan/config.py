"""Pipeline configuration: one TOML file drives every stage."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .candidates import CandidateParams
from .classifier import TrainConfig
from .netcore import WarmupSchedule
from .postproc import NmsParams, ShadowParams

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CityConfig:
    id: str
    raster_before: str
    raster_after: str
    roads: str
    stringency_index: float | None = None
    truth_before: str | None = None
    truth_after: str | None = None


@dataclass
class AnalyticsConfig:
    block_m: float = 300.0
    jenks_k: int = 5
    equal_k: int = 5


@dataclass
class PipelineConfig:
    out: str = "run"
    seed: int = 0
    model: str | None = None
    bands: tuple = ("B", "G", "R", "NIR")
    cities: list = field(default_factory=list)
    candidates: CandidateParams = field(default_factory=CandidateParams)
    nms: NmsParams = field(default_factory=NmsParams)
    shadow: ShadowParams = field(default_factory=ShadowParams)
    shadow_enabled: bool = True
    train: TrainConfig = field(default_factory=TrainConfig)
    analytics: AnalyticsConfig = field(default_factory=AnalyticsConfig)
    match_mode: str = "center_cover"


def _build_dataclass(cls, table: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(table) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{where}]: {sorted(unknown)}")
    try:
        return cls(**table)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{where}]: {exc}") from exc


def _build_train(table: dict) -> TrainConfig:
    table = dict(table)
    sched = table.pop("schedule", None)
    wsched = table.pop("window_schedule", None)
    cfg = _build_dataclass(TrainConfig, table, "train")
    if sched is not None:
        cfg = replace(cfg, schedule=_build_dataclass(WarmupSchedule, sched, "train.schedule"))
    if wsched is not None:
        cfg = replace(
            cfg, window_schedule=_build_dataclass(WarmupSchedule, wsched, "train.window_schedule")
        )
    return cfg


def load_config(path) -> PipelineConfig:
    """Parse and validate a pipeline TOML; file paths resolve against it."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed TOML in {path}: {exc}") from exc

    base = path.parent
    pipe = doc.get("pipeline", {})
    cfg = PipelineConfig(
        out=str(pipe.get("out", "run")),
        seed=int(pipe.get("seed", 0)),
        model=pipe.get("model"),
        bands=tuple(pipe.get("bands", ("B", "G", "R", "NIR"))),
        shadow_enabled=bool(pipe.get("shadow_enabled", True)),
        match_mode=str(pipe.get("match_mode", "center_cover")),
    )
    if "candidates" in doc:
        table = {k: (None if v == "auto" else v) for k, v in doc["candidates"].items()}
        cfg.candidates = _build_dataclass(CandidateParams, table, "candidates")
    if "nms" in doc:
        cfg.nms = _build_dataclass(NmsParams, doc["nms"], "nms")
    if "shadow" in doc:
        table = {k: (None if v == "auto" else v) for k, v in doc["shadow"].items()}
        cfg.shadow = _build_dataclass(ShadowParams, table, "shadow")
    if "train" in doc:
        cfg.train = _build_train(doc["train"])
    stringency_table = {}
    if "analytics" in doc:
        table = dict(doc["analytics"])
        stringency_table = {str(k): float(v) for k, v in table.pop("stringency", {}).items()}
        cfg.analytics = _build_dataclass(AnalyticsConfig, table, "analytics")

    cities = doc.get("city", [])
    if not isinstance(cities, list):
        raise ConfigError("[[city]] must be an array of tables")
    seen = set()
    for c in cities:
        try:
            city_id = str(c["id"])
            stringency = c.get("stringency_index", stringency_table.get(city_id))
            city = CityConfig(
                id=city_id,
                raster_before=str(base / c["raster_before"]),
                raster_after=str(base / c["raster_after"]),
                roads=str(base / c["roads"]),
                stringency_index=float(stringency) if stringency is not None else None,
                truth_before=str(base / c["truth_before"]) if "truth_before" in c else None,
                truth_after=str(base / c["truth_after"]) if "truth_after" in c else None,
            )
        except KeyError as exc:
            raise ConfigError(f"city entry missing key {exc}") from exc
        if city.id in seen:
            raise ConfigError(f"duplicate city id {city.id!r}")
        seen.add(city.id)
        for label in ("raster_before", "raster_after", "roads", "truth_before", "truth_after"):
            p = getattr(city, label)
            if p is not None and not Path(p).exists():
                raise ConfigError(f"city {city.id}: {label} file not found: {p}")
        cfg.cities.append(city)

    if cfg.model is not None:
        cfg.model = str(base / cfg.model)
    if not Path(cfg.out).is_absolute():
        cfg.out = str(base / cfg.out)
    return cfg
