"""Event-stream parsing and alignment to the 5-minute CGM grid.

Timestamps are integer minutes since the Unix epoch (UTC).  Missing grid
slots are represented by ``NaN`` in :class:`GriddedSeries.values`.
"""

from __future__ import annotations

import csv
import io
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from typing import Iterable, Mapping

import numpy as np

from .errors import ParseError, RecordError, StructuralError

SLOT_MINUTES = 5
SLOTS_PER_DAY = 24 * 60 // SLOT_MINUTES

_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)


class EventKind(str, Enum):
    CGM = "cgm"
    FINGERSTICK = "fingerstick"
    BOLUS = "bolus"
    MEAL_CARBS = "meal_carbs"
    BASAL = "basal"
    STEPS = "steps"
    HEART_RATE = "heart_rate"
    GSR = "gsr"
    SKIN_TEMP = "skin_temp"
    AIR_TEMP = "air_temp"
    SLEEP = "sleep"
    EXERCISE = "exercise"


# Delivered mass must be preserved when several events share a slot.
IMPULSE_KINDS = frozenset({EventKind.MEAL_CARBS, EventKind.BOLUS})

XML_SECTIONS: dict[str, EventKind] = {
    "glucose_level": EventKind.CGM,
    "finger_stick": EventKind.FINGERSTICK,
    "bolus": EventKind.BOLUS,
    "meal": EventKind.MEAL_CARBS,
    "basal": EventKind.BASAL,
    "basis_steps": EventKind.STEPS,
    "basis_heart_rate": EventKind.HEART_RATE,
    "basis_gsr": EventKind.GSR,
    "basis_skin_temperature": EventKind.SKIN_TEMP,
    "basis_air_temperature": EventKind.AIR_TEMP,
    "sleep": EventKind.SLEEP,
    "exercise": EventKind.EXERCISE,
}

# Attribute lookup order for the event value, first hit wins.
_VALUE_ATTRS: dict[EventKind, tuple[str, ...]] = {
    EventKind.BOLUS: ("dose", "value"),
    EventKind.MEAL_CARBS: ("carbs", "value"),
    EventKind.SLEEP: ("quality", "value"),
    EventKind.EXERCISE: ("intensity", "value"),
}
_TS_ATTRS = ("ts", "ts_begin", "tbegin")


def minutes_from_datetime(dt: datetime) -> int:
    """Whole minutes since the epoch; naive datetimes are taken as UTC."""
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return math.floor((dt - _EPOCH).total_seconds() / 60.0)


def datetime_from_minutes(minutes: int) -> datetime:
    return datetime.fromtimestamp(minutes * 60, tz=timezone.utc)


def parse_ohio_timestamp(text: str) -> int:
    """Parse ``dd-mm-yyyy HH:MM:SS`` into epoch minutes."""
    dt = datetime.strptime(text.strip(), "%d-%m-%Y %H:%M:%S")
    return minutes_from_datetime(dt)


def format_ohio_timestamp(minutes: int) -> str:
    return datetime_from_minutes(minutes).strftime("%d-%m-%Y %H:%M:%S")


def parse_timestamp(text: str) -> int:
    """Integer epoch minutes or an ISO-8601 string."""
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        pass
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    return minutes_from_datetime(datetime.fromisoformat(text))


@dataclass(frozen=True)
class EventStream:
    """Time-ordered events of one kind, deduplicated on timestamp."""

    kind: EventKind
    ts: np.ndarray  # int64 epoch minutes, strictly ascending
    values: np.ndarray  # float64

    def __len__(self) -> int:
        return len(self.ts)

    @property
    def events(self) -> list[tuple[int, float]]:
        return list(zip(self.ts.tolist(), self.values.tolist()))

    def total(self) -> float:
        return float(self.values.sum())


def _check_value(kind: EventKind, value: float) -> str | None:
    if not math.isfinite(value):
        return "value is not finite"
    if kind in (EventKind.CGM, EventKind.FINGERSTICK) and value <= 0:
        return f"glucose value must be positive, got {value!r}"
    if kind in (EventKind.MEAL_CARBS, EventKind.BOLUS) and value < 0:
        return f"amount must be non-negative, got {value!r}"
    if kind is EventKind.STEPS and (value < 0 or value != int(value)):
        return f"step count must be a non-negative integer, got {value!r}"
    return None


def make_stream(kind: EventKind, events: Iterable[tuple[int, float]]) -> EventStream:
    """Validate, sort and deduplicate raw ``(ts, value)`` pairs.

    Duplicate timestamps collapse to the last occurrence in input order.
    Raises :class:`RecordError` naming the 1-based ordinal of a bad record.
    """
    kind = EventKind(kind)
    ts_list: list[int] = []
    val_list: list[float] = []
    for ordinal, (ts, value) in enumerate(events, start=1):
        value = float(value)
        if ts < 0:
            raise RecordError(kind.value, ordinal, f"negative timestamp {ts}")
        problem = _check_value(kind, value)
        if problem:
            raise RecordError(kind.value, ordinal, problem)
        ts_list.append(int(ts))
        val_list.append(value)
    ts_arr = np.asarray(ts_list, dtype=np.int64)
    val_arr = np.asarray(val_list, dtype=np.float64)
    if len(ts_arr):
        # Reverse, then take the first occurrence of each ts: last wins.
        rev_ts = ts_arr[::-1]
        uniq, first = np.unique(rev_ts, return_index=True)
        ts_arr = uniq
        val_arr = val_arr[::-1][first]
    return EventStream(kind, ts_arr, val_arr)


@dataclass
class PatientDataset:
    patient_id: str
    streams: dict[EventKind, EventStream]
    split_tag: str = "train"
    # Sections present in the source but not consumed downstream.
    extra_sections: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.patient_id:
            raise StructuralError("patient_id must be non-empty")
        cgm = self.streams.get(EventKind.CGM)
        if cgm is None or len(cgm) == 0:
            raise StructuralError(f"patient {self.patient_id!r} has no cgm stream")
        if self.split_tag not in ("train", "test"):
            raise StructuralError(f"split_tag must be 'train' or 'test', not {self.split_tag!r}")

    def stream(self, kind: EventKind) -> EventStream | None:
        return self.streams.get(EventKind(kind))

    def event_counts(self) -> dict[str, int]:
        return {k.value: len(s) for k, s in sorted(self.streams.items(), key=lambda kv: kv[0].value)}


@dataclass(frozen=True)
class GriddedSeries:
    """One channel on a uniform 5-minute grid; ``NaN`` marks a missing slot."""

    start: int
    values: np.ndarray
    step_minutes: int = SLOT_MINUTES

    def __post_init__(self) -> None:
        if self.step_minutes != SLOT_MINUTES:
            raise StructuralError("grid step must be 5 minutes")
        if self.start % SLOT_MINUTES:
            raise StructuralError(f"grid start {self.start} is not on a 5-minute boundary")
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or len(values) < 1:
            raise StructuralError("gridded series must be a non-empty 1-d array")
        if np.isinf(values).any():
            raise StructuralError("gridded values must be finite or missing")
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return len(self.values)

    @property
    def timestamps(self) -> np.ndarray:
        return self.start + SLOT_MINUTES * np.arange(len(self.values), dtype=np.int64)

    @property
    def present(self) -> np.ndarray:
        return ~np.isnan(self.values)

    def slot_of(self, ts: int) -> int:
        """Nearest slot index of ``ts`` (ties go to the earlier slot)."""
        return (ts - self.start + (SLOT_MINUTES - 1) // 2) // SLOT_MINUTES


# ---------------------------------------------------------------------------
# XML
# ---------------------------------------------------------------------------


def _xml_error_offset(data: bytes, err: ET.ParseError) -> int | None:
    try:
        line, col = err.position
    except (AttributeError, TypeError, ValueError):
        return None
    lines = data.split(b"\n")
    return sum(len(chunk) + 1 for chunk in lines[: line - 1]) + col


def parse_ohio_xml(data: bytes, split_tag: str = "train") -> PatientDataset:
    """Parse an OhioT1DM-style patient document.

    Each recognised section becomes an :class:`EventStream`; unrecognised
    sections are counted in ``extra_sections`` and otherwise ignored.
    Bolus doses are read from ``dose`` when present, else ``value``.
    """
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        raise ParseError(f"malformed XML: {exc}", _xml_error_offset(data, exc)) from None
    except (ValueError, UnicodeError) as exc:
        raise ParseError(f"malformed XML: {exc}", 0) from None
    if root.tag != "patient":
        raise StructuralError(f"root element must be <patient>, found <{root.tag}>")
    patient_id = root.get("id")
    if not patient_id:
        raise StructuralError("<patient> element has no id attribute")

    streams: dict[EventKind, EventStream] = {}
    extra: dict[str, int] = {}
    for section in root:
        kind = XML_SECTIONS.get(section.tag)
        if kind is None:
            extra[section.tag] = extra.get(section.tag, 0) + len(section)
            continue
        pairs = []
        for ordinal, event in enumerate(section.iter("event"), start=1):
            pairs.append(_xml_event(kind, ordinal, event))
        if kind in streams:
            pairs = streams[kind].events + pairs
        streams[kind] = make_stream(kind, pairs)
    if EventKind.CGM not in streams or len(streams[EventKind.CGM]) == 0:
        raise StructuralError(f"patient {patient_id!r} has no glucose_level events")
    return PatientDataset(patient_id, streams, split_tag, extra)


def _xml_event(kind: EventKind, ordinal: int, event: ET.Element) -> tuple[int, float]:
    ts_text = next((event.get(a) for a in _TS_ATTRS if event.get(a) is not None), None)
    if ts_text is None:
        raise RecordError(kind.value, ordinal, "event has no timestamp")
    try:
        ts = parse_ohio_timestamp(ts_text)
    except ValueError:
        raise RecordError(kind.value, ordinal, f"bad timestamp {ts_text!r}") from None
    attrs = _VALUE_ATTRS.get(kind, ("value",))
    raw = next((event.get(a) for a in attrs if event.get(a) is not None), None)
    if raw is None:
        raise RecordError(kind.value, ordinal, "event has no value")
    try:
        value = float(raw)
    except ValueError:
        raise RecordError(kind.value, ordinal, f"bad value {raw!r}") from None
    return ts, value


def dataset_to_xml(ds: PatientDataset) -> bytes:
    """Serialise a dataset back to the OhioT1DM-style layout."""
    section_of = {kind: name for name, kind in XML_SECTIONS.items()}
    root = ET.Element("patient", id=ds.patient_id)
    for kind in sorted(ds.streams, key=lambda k: k.value):
        section = ET.SubElement(root, section_of[kind])
        attr = "dose" if kind is EventKind.BOLUS else "value"
        for ts, value in ds.streams[kind].events:
            ET.SubElement(section, "event", {"ts": format_ohio_timestamp(ts), attr: repr(value)})
    return ET.tostring(root, encoding="utf-8")


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

DEFAULT_KIND_ALIASES: dict[str, str] = {
    "glucose": "cgm",
    "glucose_level": "cgm",
    "finger_stick": "fingerstick",
    "smbg": "fingerstick",
    "meal": "meal_carbs",
    "carbs": "meal_carbs",
    "insulin": "bolus",
    "basis_steps": "steps",
}


@dataclass(frozen=True)
class CsvSchema:
    ts_column: str = "ts"
    kind_column: str = "kind"
    value_column: str = "value"
    kind_aliases: Mapping[str, str] = field(default_factory=lambda: dict(DEFAULT_KIND_ALIASES))

    def resolve_kind(self, text: str) -> EventKind:
        key = text.strip().lower()
        key = self.kind_aliases.get(key, key)
        return EventKind(key)


def parse_csv(
    data: bytes,
    schema: CsvSchema | None = None,
    patient_id: str = "csv",
    split_tag: str = "train",
) -> PatientDataset:
    """Parse a long-format ``ts,kind,value`` event table."""
    schema = schema or CsvSchema()
    try:
        text = data.decode("utf-8-sig")
    except UnicodeDecodeError as exc:
        raise ParseError(f"CSV is not valid UTF-8: {exc.reason}", exc.start) from None
    reader = csv.reader(io.StringIO(text, newline=""))
    try:
        header = next(reader)
    except StopIteration:
        raise StructuralError("CSV has no header row") from None
    except csv.Error as exc:
        raise ParseError(f"malformed CSV header: {exc}") from None
    header = [h.strip() for h in header]
    try:
        i_ts = header.index(schema.ts_column)
        i_kind = header.index(schema.kind_column)
        i_val = header.index(schema.value_column)
    except ValueError:
        raise StructuralError(
            f"CSV header {header} lacks one of "
            f"{schema.ts_column!r}, {schema.kind_column!r}, {schema.value_column!r}"
        ) from None

    per_kind: dict[EventKind, list[tuple[int, float]]] = {}
    ordinals: dict[str, int] = {}
    width = max(i_ts, i_kind, i_val) + 1
    try:
        for row in reader:
            if not row or all(not cell.strip() for cell in row):
                continue
            kind_text = row[i_kind].strip() if len(row) > i_kind else ""
            ordinals[kind_text] = ordinals.get(kind_text, 0) + 1
            n = ordinals[kind_text]
            if len(row) < width:
                raise RecordError(kind_text or "?", n, f"expected {width} columns, got {len(row)}")
            try:
                kind = schema.resolve_kind(kind_text)
            except ValueError:
                raise RecordError(kind_text, n, f"unknown event kind {kind_text!r}") from None
            try:
                ts = parse_timestamp(row[i_ts])
            except ValueError:
                raise RecordError(kind.value, n, f"bad timestamp {row[i_ts]!r}") from None
            try:
                value = float(row[i_val])
            except ValueError:
                raise RecordError(kind.value, n, f"non-numeric value {row[i_val]!r}") from None
            per_kind.setdefault(kind, []).append((ts, value))
    except csv.Error as exc:
        raise ParseError(f"malformed CSV at line {reader.line_num}: {exc}") from None

    streams = {kind: make_stream(kind, pairs) for kind, pairs in per_kind.items()}
    if EventKind.CGM not in streams:
        raise StructuralError("CSV contains no cgm events")
    return PatientDataset(patient_id, streams, split_tag)


def dataset_to_csv(ds: PatientDataset) -> str:
    """Long-format CSV with epoch-minute timestamps, rows ordered by (ts, kind)."""
    rows = []
    for kind, stream in ds.streams.items():
        rows.extend((ts, kind.value, value) for ts, value in stream.events)
    rows.sort(key=lambda r: (r[0], r[1]))
    out = io.StringIO()
    out.write("ts,kind,value\n")
    for ts, kind, value in rows:
        out.write(f"{ts},{kind},{value!r}\n")
    return out.getvalue()


def load_dataset(path, patient_id: str | None = None, split_tag: str = "train") -> PatientDataset:
    """Read an ``.xml`` or ``.csv`` file, dispatching on the suffix."""
    from pathlib import Path

    path = Path(path)
    data = path.read_bytes()
    if path.suffix.lower() == ".xml":
        return parse_ohio_xml(data, split_tag=split_tag)
    return parse_csv(data, patient_id=patient_id or path.stem, split_tag=split_tag)


# ---------------------------------------------------------------------------
# Gridding
# ---------------------------------------------------------------------------


def align_to_grid(ds: PatientDataset) -> dict[EventKind, GriddedSeries]:
    """Resample every stream onto the grid spanned by the CGM stream.

    The grid runs from the earliest CGM timestamp floored to 5 minutes to
    the latest one ceiled to 5 minutes.  Events land in their nearest slot
    (ties go down) and events outside the grid are dropped.  Impulse kinds
    (meals, boluses) are summed per slot and default to 0; every other kind
    keeps the last value assigned to a slot and defaults to missing.
    """
    cgm = ds.streams.get(EventKind.CGM)
    if cgm is None or len(cgm) == 0:
        raise StructuralError("align_to_grid requires a non-empty cgm stream")
    start = int(cgm.ts[0]) // SLOT_MINUTES * SLOT_MINUTES
    end = -(-int(cgm.ts[-1]) // SLOT_MINUTES) * SLOT_MINUTES
    n = (end - start) // SLOT_MINUTES + 1

    out: dict[EventKind, GriddedSeries] = {}
    for kind, stream in ds.streams.items():
        idx = (stream.ts - start + (SLOT_MINUTES - 1) // 2) // SLOT_MINUTES
        keep = (idx >= 0) & (idx < n)
        idx, vals = idx[keep], stream.values[keep]
        if kind in IMPULSE_KINDS:
            grid = np.zeros(n)
            np.add.at(grid, idx, vals)
        else:
            grid = np.full(n, np.nan)
            # ts ascending, so the last event mapped to a slot is the latest.
            rev_idx = idx[::-1]
            slots, first = np.unique(rev_idx, return_index=True)
            grid[slots] = vals[::-1][first]
        out[kind] = GriddedSeries(start, grid)
    return out


def segment_contiguous(g: GriddedSeries | np.ndarray, max_gap_slots: int) -> list[tuple[int, int]]:
    """Maximal ``(offset, length)`` runs whose internal gaps are short enough.

    A run of missing slots longer than ``max_gap_slots`` ends a segment.
    Segments always begin and end on present slots.
    """
    if max_gap_slots < 0:
        raise ValueError("max_gap_slots must be >= 0")
    values = g.values if isinstance(g, GriddedSeries) else np.asarray(g, dtype=np.float64)
    present = np.flatnonzero(~np.isnan(values))
    if len(present) == 0:
        return []
    # Gap between consecutive present slots, in missing slots.
    gaps = np.diff(present) - 1
    breaks = np.flatnonzero(gaps > max_gap_slots)
    starts = np.concatenate(([present[0]], present[breaks + 1]))
    ends = np.concatenate((present[breaks], [present[-1]]))
    return [(int(s), int(e - s + 1)) for s, e in zip(starts, ends)]


def nearest_sample(g: GriddedSeries, ts: int, tolerance_minutes: int) -> float | None:
    """Value of the nearest present slot within tolerance, earlier slot on ties."""
    if tolerance_minutes < 0:
        raise ValueError("tolerance_minutes must be >= 0")
    lo = max(0, math.ceil((ts - tolerance_minutes - g.start) / SLOT_MINUTES))
    hi = min(len(g) - 1, math.floor((ts + tolerance_minutes - g.start) / SLOT_MINUTES))
    best, best_dist = None, None
    for k in range(lo, hi + 1):
        v = g.values[k]
        if np.isnan(v):
            continue
        dist = abs(g.start + SLOT_MINUTES * k - ts)
        if best_dist is None or dist < best_dist:
            best, best_dist = float(v), dist
    return best


def gridded_to_csv(g: GriddedSeries, column: str = "value") -> str:
    out = io.StringIO()
    out.write(f"slot_ts,{column}\n")
    for ts, v in zip(g.timestamps.tolist(), g.values.tolist()):
        out.write(f"{ts},{'' if math.isnan(v) else repr(v)}\n")
    return out.getvalue()
