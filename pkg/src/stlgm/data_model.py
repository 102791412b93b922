"""Domain types, plot-table ingestion, and the root transform.

Coordinates are planar easting/northing in kilometers and measurement times
are decimal years, so spatial lags are Euclidean km distances and temporal
lags are year differences. No geodesy happens here; tables must arrive
already projected.
"""

from __future__ import annotations

import csv
import datetime
import io
import math
from dataclasses import dataclass

import numpy as np

from .errors import SchemaError, ValidationError

__all__ = [
    "SpaceTimeCoord",
    "PlotMeasurement",
    "RootTransform",
    "ObservationSets",
    "to_decimal_year",
    "parse_plot_table",
    "load_plot_table",
    "write_plot_table",
    "split_observations",
    "inverse_transform",
    "write_observation_sets",
    "as_coord_array",
]


@dataclass(frozen=True)
class SpaceTimeCoord:
    """A point in space-time: easting/northing in km, time in decimal years."""

    x: float
    y: float
    t: float

    def __post_init__(self):
        for name in ("x", "y", "t"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValidationError(f"coordinate {name} must be finite, got {v!r}")


@dataclass(frozen=True)
class PlotMeasurement:
    """One visit to one inventory plot."""

    plot_id: str
    coord: SpaceTimeCoord
    agbd: float

    def __post_init__(self):
        if not math.isfinite(self.agbd) or self.agbd < 0:
            raise ValidationError(
                f"agbd must be finite and >= 0, got {self.agbd!r} for plot {self.plot_id!r}"
            )


@dataclass(frozen=True)
class RootTransform:
    """Power transform g(b) = b**(1/r) with clamped inverse max(y, 0)**r."""

    r: int

    def __post_init__(self):
        if not isinstance(self.r, int) or self.r < 1:
            raise ValidationError(f"root order must be a positive integer, got {self.r!r}")

    def apply(self, b):
        b = np.asarray(b, dtype=float)
        if np.any(b < 0):
            raise ValidationError("transform input must be >= 0")
        return np.power(b, 1.0 / self.r)

    def invert(self, y):
        """Map transformed values back to the measurement scale.

        Negative inputs clamp to zero before the power, so the result is
        nonnegative for every root order.
        """
        y = np.asarray(y, dtype=float)
        return np.power(np.maximum(y, 0.0), self.r)


def inverse_transform(y, transform: RootTransform):
    """Inverse root transform, max(y, 0)**r. Accepts scalars or arrays."""
    out = transform.invert(y)
    if out.ndim == 0:
        return float(out)
    return out


def to_decimal_year(date) -> float:
    """Convert a calendar date to decimal years: year + day_of_year/365.25.

    January 1 counts as day 1. Accepts a datetime.date, a datetime.datetime
    (its date part is used), or an ISO-8601 "YYYY-MM-DD" string.
    """
    if isinstance(date, str):
        try:
            date = datetime.date.fromisoformat(date)
        except ValueError as exc:
            raise ValidationError(f"invalid date {date!r}: {exc}") from exc
    elif isinstance(date, datetime.datetime):
        date = date.date()
    elif not isinstance(date, datetime.date):
        raise ValidationError(f"expected a date or ISO string, got {type(date).__name__}")
    doy = date.timetuple().tm_yday
    return date.year + doy / 365.25


_REQUIRED_COLUMNS = ("plot_id", "x_km", "y_km", "agbd_mg_ha")


def _parse_float(field, value, row_number):
    try:
        out = float(value)
    except (TypeError, ValueError):
        raise ValidationError(f"data row {row_number}: {field} value {value!r} is not numeric")
    if not math.isfinite(out):
        raise ValidationError(f"data row {row_number}: {field} value {value!r} is not finite")
    return out


def parse_plot_table(source) -> list[PlotMeasurement]:
    """Parse a plot table into measurements, preserving row order.

    Parameters
    ----------
    source : bytes, str, or readable file object
        CSV content (UTF-8, comma-delimited) with a header naming plot_id,
        x_km, y_km, agbd_mg_ha, and exactly one of year (decimal) or date
        (ISO-8601). Extra columns are ignored.

    Returns
    -------
    list of PlotMeasurement

    Raises
    ------
    SchemaError
        If a required column is missing or both/neither time columns appear.
    ValidationError
        On the first bad row, naming its 1-based data row number.
    """
    if isinstance(source, bytes):
        text = io.StringIO(source.decode("utf-8"))
    elif isinstance(source, str):
        text = io.StringIO(source)
    elif hasattr(source, "read"):
        raw = source.read()
        if isinstance(raw, bytes):
            raw = raw.decode("utf-8")
        text = io.StringIO(raw)
    else:
        raise SchemaError(f"unsupported plot-table source {type(source).__name__}")

    reader = csv.reader(text)
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError("plot table is empty, expected a header row")
    header = [h.strip() for h in header]
    positions = {name: i for i, name in enumerate(header)}

    problems = [
        f"plot table is missing required column {column!r}"
        for column in _REQUIRED_COLUMNS
        if column not in positions
    ]
    has_year = "year" in positions
    has_date = "date" in positions
    if has_year and has_date:
        problems.append(
            "plot table has both 'year' and 'date' columns, provide exactly one"
        )
    if not (has_year or has_date):
        problems.append(
            "plot table needs a 'year' (decimal) or 'date' (ISO-8601) column"
        )
    if problems:
        raise SchemaError("; ".join(problems))
    time_column = "year" if has_year else "date"

    measurements: list[PlotMeasurement] = []
    seen: set[tuple[str, float]] = set()
    for row_number, row in enumerate(reader, start=1):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue  # blank line
        if len(row) < len(header):
            raise ValidationError(
                f"data row {row_number}: expected {len(header)} fields, got {len(row)}"
            )
        plot_id = row[positions["plot_id"]].strip()
        if not plot_id:
            raise ValidationError(f"data row {row_number}: empty plot_id")
        x = _parse_float("x_km", row[positions["x_km"]], row_number)
        y = _parse_float("y_km", row[positions["y_km"]], row_number)
        if has_year:
            t = _parse_float("year", row[positions["year"]], row_number)
        else:
            try:
                t = to_decimal_year(row[positions["date"]].strip())
            except ValidationError as exc:
                raise ValidationError(f"data row {row_number}: {exc}") from exc
        agbd = _parse_float("agbd_mg_ha", row[positions["agbd_mg_ha"]], row_number)
        if agbd < 0:
            raise ValidationError(f"data row {row_number}: agbd_mg_ha must be >= 0, got {agbd}")
        key = (plot_id, t)
        if key in seen:
            raise ValidationError(
                f"data row {row_number}: duplicate measurement for plot {plot_id!r} at t={t}"
            )
        seen.add(key)
        measurements.append(PlotMeasurement(plot_id, SpaceTimeCoord(x, y, t), agbd))
    return measurements


def load_plot_table(path) -> list[PlotMeasurement]:
    """Read and parse a plot-table CSV file."""
    with open(path, "rb") as fh:
        return parse_plot_table(fh)


def write_plot_table(measurements, destination) -> None:
    """Write measurements in the standard input schema (decimal-year column)."""
    own = isinstance(destination, (str, bytes)) or hasattr(destination, "__fspath__")
    fh = open(destination, "w", newline="") if own else destination
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["plot_id", "x_km", "y_km", "year", "agbd_mg_ha"])
        for meas in measurements:
            c = meas.coord
            writer.writerow([meas.plot_id, repr(c.x), repr(c.y), repr(c.t), repr(meas.agbd)])
    finally:
        if own:
            fh.close()


@dataclass(frozen=True)
class ObservationSets:
    """Binary and continuous observation sets derived from one plot table.

    The binary set covers every measurement with z = 1[agbd > 0]; the
    continuous set covers exactly the forested rows with y = g(agbd).
    Coordinate arrays have columns (x, y, t); continuous_rows maps each
    continuous row back to its position in the binary arrays.
    """

    plot_ids: tuple
    binary_coords: np.ndarray
    z: np.ndarray
    continuous_coords: np.ndarray
    y: np.ndarray
    continuous_rows: np.ndarray
    transform: RootTransform

    @property
    def binary_set(self):
        return [
            (SpaceTimeCoord(*map(float, c)), int(zi))
            for c, zi in zip(self.binary_coords, self.z)
        ]

    @property
    def continuous_set(self):
        return [
            (SpaceTimeCoord(*map(float, c)), float(yi))
            for c, yi in zip(self.continuous_coords, self.y)
        ]

    @property
    def n(self) -> int:
        return len(self.z)

    @property
    def n_forested(self) -> int:
        return len(self.y)


def split_observations(measurements, transform: RootTransform) -> ObservationSets:
    """Split measurements into the binary and transformed continuous sets."""
    if len(measurements) == 0:
        raise ValidationError("no measurements to split")
    coords = np.array(
        [[m.coord.x, m.coord.y, m.coord.t] for m in measurements], dtype=float
    ).reshape(len(measurements), 3)
    agbd = np.array([m.agbd for m in measurements], dtype=float)
    z = (agbd > 0).astype(np.uint8)
    forested = np.flatnonzero(z)
    y = transform.apply(agbd[forested]) if forested.size else np.empty(0)
    return ObservationSets(
        plot_ids=tuple(m.plot_id for m in measurements),
        binary_coords=coords,
        z=z,
        continuous_coords=coords[forested],
        y=y,
        continuous_rows=forested,
        transform=transform,
    )


def write_observation_sets(obs: ObservationSets, binary_dest, continuous_dest) -> None:
    """Serialize both observation sets to CSV for audit."""

    def _write(dest, header, rows):
        own = isinstance(dest, (str, bytes)) or hasattr(dest, "__fspath__")
        fh = open(dest, "w", newline="") if own else dest
        try:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
        finally:
            if own:
                fh.close()

    _write(
        binary_dest,
        ["plot_id", "x_km", "y_km", "year", "z"],
        (
            [pid, repr(float(c[0])), repr(float(c[1])), repr(float(c[2])), int(zi)]
            for pid, c, zi in zip(obs.plot_ids, obs.binary_coords, obs.z)
        ),
    )
    _write(
        continuous_dest,
        ["plot_id", "x_km", "y_km", "year", "y"],
        (
            [
                obs.plot_ids[ri],
                repr(float(c[0])),
                repr(float(c[1])),
                repr(float(c[2])),
                repr(float(yi)),
            ]
            for ri, c, yi in zip(obs.continuous_rows, obs.continuous_coords, obs.y)
        ),
    )


def as_coord_array(coords) -> np.ndarray:
    """Coerce coordinates to a float array of shape (n, 3) with columns x, y, t."""
    if not isinstance(coords, np.ndarray) and len(coords) and isinstance(coords[0], SpaceTimeCoord):
        arr = np.array([[c.x, c.y, c.t] for c in coords], dtype=float)
    else:
        arr = np.asarray(coords, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValidationError(f"coordinate array must be (n, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("coordinates must be finite")
    return arr
