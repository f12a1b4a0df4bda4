"""Declarative record schemas for every JSONL artifact the pipeline emits,
plus a small validator so outputs stay machine-checkable."""

from __future__ import annotations

_NUMBER = (int, float)


def _box5(value):
    return (
        isinstance(value, list)
        and len(value) == 5
        and all(isinstance(v, _NUMBER) for v in value)
    )


SCHEMAS = {
    "anchor": {
        "id": lambda v: isinstance(v, int) and v >= 0,
        "source": lambda v: isinstance(v, int) and v >= 0,
        "box": _box5,
    },
    "candidate": {
        "id": lambda v: isinstance(v, int) and v >= 0,
        "polarity": lambda v: v in ("bright", "dark"),
        "area_px": lambda v: isinstance(v, int) and v > 0,
        "bbox": lambda v: isinstance(v, list) and len(v) == 4,
        "min_rect": _box5,
    },
    "score": {
        "anchor_id": lambda v: isinstance(v, int) and v >= 0,
        "prob": lambda v: isinstance(v, _NUMBER) and 0.0 <= v <= 1.0,
    },
    "detection": {
        "box": _box5,
        "prob": lambda v: isinstance(v, _NUMBER) and 0.0 <= v <= 1.0,
        "road_class": lambda v: isinstance(v, int) and 0 <= v <= 3,
    },
    "truth": {
        "box": _box5,
        "road_class": lambda v: isinstance(v, int) and 0 <= v <= 3,
        "polarity": lambda v: v in ("bright", "dark"),
    },
    "label": {
        "box": _box5,
        "region_id": lambda v: isinstance(v, str),
    },
}

OPTIONAL = {
    "detection": {"image_id": lambda v: isinstance(v, str)},
}


def validate_record(kind: str, record: dict) -> None:
    """Raise ValueError when a record does not match its schema."""
    if kind not in SCHEMAS:
        raise ValueError(f"unknown record kind {kind!r}")
    schema = SCHEMAS[kind]
    optional = OPTIONAL.get(kind, {})
    for key, check in schema.items():
        if key not in record:
            raise ValueError(f"{kind}: missing field {key!r}")
        if not check(record[key]):
            raise ValueError(f"{kind}: invalid value for {key!r}: {record[key]!r}")
    for key in record:
        if key not in schema and key not in optional:
            raise ValueError(f"{kind}: unexpected field {key!r}")
        if key in optional and not optional[key](record[key]):
            raise ValueError(f"{kind}: invalid value for {key!r}")


def validate_jsonl(kind: str, path) -> int:
    """Validate every record in a JSONL file; returns the record count."""
    import json

    count = 0
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{line_no}: not JSON ({exc})") from exc
            try:
                validate_record(kind, record)
            except ValueError as exc:
                raise ValueError(f"{path}:{line_no}: {exc}") from exc
            count += 1
    return count
