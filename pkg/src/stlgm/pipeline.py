"""Event-data ingestion and covariate derivation.

Reads event CSVs, derives the categorical and distance covariates, looks up
population offsets on a gridded raster substitute, computes descriptive
statistics, and builds prediction lattices.  Geographic distances use the
haversine formula (R = 6371 km); the model plane uses an equirectangular
projection about the data centroid with 111 km per degree of latitude.
"""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass

import numpy as np

from .mesh import DegenerateBBox

EARTH_RADIUS_KM = 6371.0
KM_PER_DEGREE = 111.0

EVENTS_HEADER = ["id", "date", "lon", "lat", "event_type", "actor",
                 "fatalities"]


class ParseError(ValueError):
    """Malformed CSV row or header (message carries the row number)."""


class InvalidCoordinate(ValueError):
    """Longitude/latitude outside valid ranges."""


class NegativeFatalities(ValueError):
    """Fatality counts must be nonnegative."""


class OutsideGrid(ValueError):
    """Event location falls outside the population grid."""


@dataclass(frozen=True)
class EventRecord:
    id: str
    date: dt.date
    lon: float
    lat: float
    event_type: str
    actor: str
    fatalities: int


def read_events(path) -> list:
    """Validated event records; row-numbered diagnostics on bad input."""
    records = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty events file") from None
        if header != EVENTS_HEADER:
            raise ParseError(
                f"bad header {header!r}, expected {EVENTS_HEADER!r}"
            )
        for rownum, row in enumerate(reader, start=2):
            if len(row) != len(EVENTS_HEADER):
                raise ParseError(f"row {rownum}: expected 7 fields, got {len(row)}")
            rid, date_s, lon_s, lat_s, etype, actor, fat_s = row
            try:
                date = dt.date.fromisoformat(date_s)
            except ValueError as err:
                raise ParseError(f"row {rownum}: bad date {date_s!r}") from err
            try:
                lon, lat = float(lon_s), float(lat_s)
            except ValueError as err:
                raise ParseError(f"row {rownum}: bad coordinate") from err
            if not (-180.0 <= lon <= 180.0) or not (-90.0 <= lat <= 90.0):
                raise InvalidCoordinate(
                    f"row {rownum}: lon={lon} lat={lat} out of range"
                )
            try:
                fatalities = int(fat_s)
            except ValueError as err:
                raise ParseError(f"row {rownum}: bad fatality count "
                                 f"{fat_s!r}") from err
            if fatalities < 0:
                raise NegativeFatalities(
                    f"row {rownum}: fatalities={fatalities}"
                )
            records.append(EventRecord(rid, date, lon, lat, etype, actor,
                                        fatalities))
    return records


def write_events(path, records) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EVENTS_HEADER)
        for r in records:
            writer.writerow([r.id, r.date.isoformat(), "%.6f" % r.lon,
                             "%.6f" % r.lat, r.event_type, r.actor,
                             r.fatalities])


_SEASON_BY_MONTH = {
    3: "Spring", 4: "Spring", 5: "Spring",
    6: "Summer", 7: "Summer", 8: "Summer",
    9: "Autumn", 10: "Autumn", 11: "Autumn",
    12: "Winter", 1: "Winter", 2: "Winter",
}


def derive_season(date: dt.date) -> str:
    """Month-based season: Mar-May spring, Jun-Aug summer, Sep-Nov autumn,
    Dec-Feb winter."""
    return _SEASON_BY_MONTH[date.month]


@dataclass(frozen=True)
class FeatureSet:
    """Border polylines and city points, both in (lon, lat) degrees."""

    border_polylines: tuple  # tuple of (k_i, 2) arrays
    city_points: np.ndarray  # (c, 2)

    def __post_init__(self):
        if not self.border_polylines or len(self.city_points) == 0:
            raise ValueError("feature set needs at least one border part "
                             "and one city")


def read_features(path) -> FeatureSet:
    """features.csv: kind,lon,lat,part_id with kinds 'border' and 'city'."""
    borders: dict = {}
    cities = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["kind", "lon", "lat", "part_id"]:
            raise ParseError(f"bad features header {reader.fieldnames!r}")
        for rownum, row in enumerate(reader, start=2):
            try:
                lon, lat = float(row["lon"]), float(row["lat"])
            except ValueError as err:
                raise ParseError(f"row {rownum}: bad coordinate") from err
            if row["kind"] == "border":
                borders.setdefault(row["part_id"], []).append((lon, lat))
            elif row["kind"] == "city":
                cities.append((lon, lat))
            else:
                raise ParseError(f"row {rownum}: unknown kind {row['kind']!r}")
    polylines = tuple(np.asarray(pts, dtype=np.float64)
                      for pts in borders.values())
    for poly in polylines:
        if len(poly) < 2:
            raise ParseError("border parts need at least two vertices")
    return FeatureSet(polylines, np.asarray(cities, dtype=np.float64))


def write_features(path, features: FeatureSet) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "lon", "lat", "part_id"])
        for pid, poly in enumerate(features.border_polylines):
            for lon, lat in poly:
                writer.writerow(["border", "%.6f" % lon, "%.6f" % lat, pid])
        for lon, lat in features.city_points:
            writer.writerow(["city", "%.6f" % lon, "%.6f" % lat, 0])


def haversine_km(lon1, lat1, lon2, lat2):
    """Great-circle distance in kilometres (R = 6371)."""
    lon1, lat1, lon2, lat2 = (np.radians(np.asarray(v, dtype=np.float64))
                              for v in (lon1, lat1, lon2, lat2))
    dlon = lon2 - lon1
    dlat = lat2 - lat1
    a = np.sin(dlat / 2.0) ** 2 \
        + np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(a))


def _nearest_on_segments(lon, lat, poly):
    """Haversine distance to the nearest point of one polyline.

    The perpendicular foot is found in a local planar approximation around
    the query point, then measured with the haversine formula.
    """
    scale = np.cos(np.radians(lat))
    px = (poly[:, 0] - lon) * scale
    py = poly[:, 1] - lat
    ax, ay = px[:-1], py[:-1]
    bx, by = px[1:], py[1:]
    dx, dy = bx - ax, by - ay
    seg_len2 = dx * dx + dy * dy
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.where(seg_len2 > 0, -(ax * dx + ay * dy) / seg_len2, 0.0)
    t = np.clip(t, 0.0, 1.0)
    fx = ax + t * dx
    fy = ay + t * dy
    foot_lon = lon + fx / scale
    foot_lat = lat + fy
    d = haversine_km(lon, lat, foot_lon, foot_lat)
    return float(np.min(d))


def distance_to_nearest(lon: float, lat: float, features: FeatureSet,
                        kind: str) -> float:
    """Distance in km to the nearest city point or border polyline."""
    if kind == "city":
        d = haversine_km(lon, lat, features.city_points[:, 0],
                         features.city_points[:, 1])
        return float(np.min(d))
    if kind == "border":
        return min(_nearest_on_segments(lon, lat, poly)
                   for poly in features.border_polylines)
    raise ValueError(f"unknown feature kind {kind!r}")


@dataclass(frozen=True)
class PopulationGrid:
    """Regular lon/lat grid with one population layer per year."""

    years: np.ndarray  # sorted (t,)
    lons: np.ndarray  # strictly increasing (nx,)
    lats: np.ndarray  # strictly increasing (ny,)
    values: np.ndarray  # (t, ny, nx)

    def __post_init__(self):
        if np.any(np.diff(self.lons) <= 0) or np.any(np.diff(self.lats) <= 0):
            raise ValueError("grid axes must be strictly increasing")


def read_population(path) -> PopulationGrid:
    """population.csv: year,lon,lat,pop over a complete regular grid."""
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["year", "lon", "lat", "pop"]:
            raise ParseError(f"bad population header {reader.fieldnames!r}")
        for row in reader:
            rows.append((int(row["year"]), float(row["lon"]),
                         float(row["lat"]), float(row["pop"])))
    years = np.array(sorted({r[0] for r in rows}))
    lons = np.array(sorted({r[1] for r in rows}))
    lats = np.array(sorted({r[2] for r in rows}))
    values = np.full((len(years), len(lats), len(lons)), np.nan)
    yi = {y: i for i, y in enumerate(years)}
    xi = {x: i for i, x in enumerate(lons)}
    li = {l: i for i, l in enumerate(lats)}
    for year, lon, lat, pop in rows:
        values[yi[year], li[lat], xi[lon]] = pop
    if np.any(np.isnan(values)):
        raise ParseError("population grid has missing cells")
    return PopulationGrid(years, lons, lats, values)


def population_offset(lon: float, lat: float, year: int,
                      grid: PopulationGrid) -> float:
    """log population at the event, bilinear on the grid, floored at 1.

    Years outside the grid use the nearest available year.
    """
    yi = int(np.argmin(np.abs(grid.years - year)))
    if not (grid.lons[0] <= lon <= grid.lons[-1]) \
            or not (grid.lats[0] <= lat <= grid.lats[-1]):
        raise OutsideGrid(f"({lon}, {lat}) outside population grid")
    ix = int(np.clip(np.searchsorted(grid.lons, lon) - 1, 0,
                     len(grid.lons) - 2))
    iy = int(np.clip(np.searchsorted(grid.lats, lat) - 1, 0,
                     len(grid.lats) - 2))
    x0, x1 = grid.lons[ix], grid.lons[ix + 1]
    y0, y1 = grid.lats[iy], grid.lats[iy + 1]
    tx = (lon - x0) / (x1 - x0)
    ty = (lat - y0) / (y1 - y0)
    layer = grid.values[yi]
    val = (layer[iy, ix] * (1 - tx) * (1 - ty)
           + layer[iy, ix + 1] * tx * (1 - ty)
           + layer[iy + 1, ix] * (1 - tx) * ty
           + layer[iy + 1, ix + 1] * tx * ty)
    return float(np.log(max(val, 1.0)))


@dataclass
class DescriptiveStats:
    n_events: int
    zero_proportion: float
    positive_mean: float
    positive_variance: float
    positive_max: int
    by_event_type: dict  # type -> (count, fatality sum, ratio)


def descriptive_stats(records) -> DescriptiveStats:
    fatalities = np.array([r.fatalities for r in records])
    if fatalities.size == 0:
        raise ValueError("no events")
    positive = fatalities[fatalities > 0]
    by_type: dict = {}
    for r in records:
        cnt, tot = by_type.get(r.event_type, (0, 0))
        by_type[r.event_type] = (cnt + 1, tot + r.fatalities)
    summary = {
        k: (cnt, tot, round(tot / cnt, 4))
        for k, (cnt, tot) in sorted(by_type.items())
    }
    return DescriptiveStats(
        n_events=len(records),
        zero_proportion=float(np.mean(fatalities == 0)),
        positive_mean=float(positive.mean()) if positive.size else 0.0,
        positive_variance=float(positive.var(ddof=1))
        if positive.size > 1 else 0.0,
        positive_max=int(positive.max()) if positive.size else 0,
        by_event_type=summary,
    )


def build_prediction_grid(bbox, resolution_km: float, years):
    """Regular lattice of (x, y) km points replicated per year.

    Points run from the bbox minimum in steps of ``resolution_km`` while
    inside the box.  An empty years list yields an empty grid.
    """
    xmin, ymin, xmax, ymax = (float(v) for v in bbox)
    if xmin >= xmax or ymin >= ymax:
        raise DegenerateBBox(f"degenerate bbox {bbox}")
    if resolution_km <= 0:
        raise ValueError("resolution must be positive")
    years = list(years)
    if not years:
        return np.zeros((0, 2)), []
    xs = np.arange(xmin, xmax + 1e-9, resolution_km)
    ys = np.arange(ymin, ymax + 1e-9, resolution_km)
    xx, yy = np.meshgrid(xs, ys)
    return np.column_stack([xx.ravel(), yy.ravel()]), years


def lonlat_to_km(lons, lats, center=None):
    """Equirectangular projection about ``center`` (defaults to centroid)."""
    lons = np.asarray(lons, dtype=np.float64)
    lats = np.asarray(lats, dtype=np.float64)
    if center is None:
        center = (float(lons.mean()), float(lats.mean()))
    lon0, lat0 = center
    x = (lons - lon0) * KM_PER_DEGREE * np.cos(np.radians(lat0))
    y = (lats - lat0) * KM_PER_DEGREE
    return np.column_stack([x, y]), center


def km_to_lonlat(points_km, center):
    pts = np.asarray(points_km, dtype=np.float64).reshape(-1, 2)
    lon0, lat0 = center
    lons = lon0 + pts[:, 0] / (KM_PER_DEGREE * np.cos(np.radians(lat0)))
    lats = lat0 + pts[:, 1] / KM_PER_DEGREE
    return lons, lats
