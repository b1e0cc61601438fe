"""Stations, forecast datasets, CSV ingestion, splits and input standardisation.

File layout (one directory per dataset part)::

    stations.csv      id,lat,lon,alt,orog
    forecasts.csv     day,station_id,member,<feature_1>,...,<feature_P>,yday_sin,yday_cos
    observations.csv  day,station_id,obs

Floats are written with ``repr`` so a save/load round trip is bitwise exact.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import kernels

log = logging.getLogger(__name__)

STATIC_NAMES = ("lat", "lon", "alt", "orog")
YDAY_NAMES = ("yday_sin", "yday_cos")


class DataError(Exception):
    """Base class for ingestion problems (CLI exit code 2)."""


class ParseError(DataError):
    pass


class SchemaError(DataError):
    pass


class AlignmentError(DataError):
    pass


@dataclass(frozen=True)
class Station:
    id: int
    lat: float
    lon: float
    alt: float
    orog: float

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"station {self.id}: latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"station {self.id}: longitude {self.lon} outside [-180, 180]")


@dataclass
class ForecastDataset:
    """Member forecasts ``features[t, s, n, p]`` with observations ``observations[t, s]``."""

    stations: list
    days: np.ndarray
    feature_names: list
    features: np.ndarray
    yday: np.ndarray
    observations: np.ndarray

    def __post_init__(self):
        self.days = np.asarray(self.days, dtype=np.int64)
        self.features = np.asarray(self.features, dtype=np.float64)
        self.yday = np.asarray(self.yday, dtype=np.float64)
        self.observations = np.asarray(self.observations, dtype=np.float64)
        T, S, N, P = self.features.shape
        if N < 1:
            raise SchemaError("a dataset needs at least one ensemble member")
        if len(self.stations) != S or len(self.days) != T or len(self.feature_names) != P:
            raise SchemaError("dataset dimensions disagree with stations/days/feature names")
        if self.yday.shape != (T, 2) or self.observations.shape != (T, S):
            raise SchemaError("yday or observation array has the wrong shape")
        ids = [st.id for st in self.stations]
        if len(set(ids)) != len(ids):
            raise SchemaError("duplicate station ids")
        if not np.all(np.isfinite(self.features)):
            raise SchemaError("feature tensor contains missing or non-finite entries")

    @property
    def n_days(self):
        return self.features.shape[0]

    @property
    def n_stations(self):
        return self.features.shape[1]

    @property
    def n_members(self):
        return self.features.shape[2]

    @property
    def n_features(self):
        return self.features.shape[3]

    @property
    def station_ids(self):
        return np.array([st.id for st in self.stations], dtype=np.int64)

    def static(self):
        """(S, 4) array of lat, lon, alt, orog."""
        return np.array([[st.lat, st.lon, st.alt, st.orog] for st in self.stations], dtype=np.float64)

    def input_names(self):
        return list(self.feature_names) + list(STATIC_NAMES) + list(YDAY_NAMES)

    def node_inputs(self):
        """Per-node input array (T, S, N, P + 6): member features, station statics, yday."""
        T, S, N, _ = self.features.shape
        static = np.broadcast_to(self.static()[None, :, None, :], (T, S, N, 4))
        yday = np.broadcast_to(self.yday[:, None, None, :], (T, S, N, 2))
        return np.concatenate([self.features, static, yday], axis=-1)

    def select(self, index):
        """Sub-dataset over the given day positions (mask or integer index)."""
        return replace(
            self,
            days=self.days[index],
            features=self.features[index],
            yday=self.yday[index],
            observations=self.observations[index],
        )

    def day_positions(self, days):
        lookup = {int(d): i for i, d in enumerate(self.days)}
        try:
            return np.array([lookup[int(d)] for d in days], dtype=np.int64)
        except KeyError as exc:
            raise AlignmentError(f"day {exc.args[0]} not in dataset") from None


@dataclass(frozen=True)
class SplitSpec:
    """Half-open day ranges ``[start, stop)`` for each part of a task."""

    train: tuple
    valid: tuple
    test: tuple
    label: str = "R2R"

    def __post_init__(self):
        if self.label not in ("R2R", "R2F"):
            raise ValueError(f"split label must be R2R or R2F, got {self.label!r}")
        parts = sorted([self.train, self.valid, self.test])
        for (a0, a1), (b0, b1) in zip(parts, parts[1:]):
            if a1 > b0 and a0 < a1 and b0 < b1:
                raise ValueError(f"split ranges overlap: {self}")

    def mask(self, ds, part):
        lo, hi = getattr(self, part)
        return (ds.days >= lo) & (ds.days < hi)

    def subset(self, ds, part):
        return ds.select(self.mask(ds, part))

    def sizes(self, ds):
        return {part: int(self.mask(ds, part).sum()) for part in ("train", "valid", "test")}

    def to_json(self):
        return {"train": list(self.train), "valid": list(self.valid), "test": list(self.test), "label": self.label}

    @classmethod
    def from_json(cls, blob):
        return cls(tuple(blob["train"]), tuple(blob["valid"]), tuple(blob["test"]), blob.get("label", "R2R"))


@dataclass
class Normalizer:
    names: list
    mean: np.ndarray
    std: np.ndarray
    clamped: list = field(default_factory=list)

    @classmethod
    def fit(cls, x, names):
        flat = np.asarray(x, dtype=np.float64).reshape(-1, x.shape[-1])
        if flat.shape[0] == 0:
            raise ValueError("cannot fit a normalizer on zero rows")
        mean = flat.mean(axis=0)
        std = flat.std(axis=0)
        clamped = [names[k] for k in np.flatnonzero(~(std > 0))]
        if clamped:
            warnings.warn(f"constant feature(s) {clamped}: std clamped to 1", RuntimeWarning, stacklevel=2)
            std = np.where(std > 0, std, 1.0)
        return cls(list(names), mean, std, clamped)

    def apply(self, x):
        return (x - self.mean) / self.std

    def invert(self, z):
        return z * self.std + self.mean

    def to_json(self):
        return {"names": self.names, "mean": self.mean.tolist(), "std": self.std.tolist(), "clamped": self.clamped}

    @classmethod
    def from_json(cls, blob):
        return cls(blob["names"], np.array(blob["mean"]), np.array(blob["std"]), blob.get("clamped", []))


def fit_normalizer(ds, split):
    """Standardisation fitted on the node inputs of the training days only."""
    train = split.subset(ds, "train")
    if train.n_days == 0:
        raise ValueError("training range of the split contains no days")
    return Normalizer.fit(train.node_inputs(), ds.input_names())


def summary_stats(x):
    """Member mean and sample std over axis 2 of (T, S, N, P); both exact in member order."""
    T, S, N, P = x.shape
    groups = np.ascontiguousarray(x.reshape(T * S, N, P))
    m = kernels.set_mean(groups)
    if N > 1:
        dev = groups - m[:, None, :]
        sd = np.sqrt(kernels.set_sum(dev * dev) / (N - 1))
    else:
        sd = np.zeros_like(m)
    return m.reshape(T, S, P), sd.reshape(T, S, P)


def summarize_inputs(x, n_dynamic):
    """Collapse node inputs (T, S, N, P + k) to (T, S, 1, 2P + k).

    The first ``n_dynamic`` columns become mean/std pairs; remaining columns
    (statics, yday) are replaced by their member mean.
    """
    m, sd = summary_stats(x)
    dyn = np.stack([m[..., :n_dynamic], sd[..., :n_dynamic]], axis=-1).reshape(*m.shape[:2], 2 * n_dynamic)
    return np.concatenate([dyn, m[..., n_dynamic:]], axis=-1)[:, :, None, :]


def summary_names(names):
    return [f"{name}_{stat}" for name in names for stat in ("mean", "std")]


def summarize_members(ds):
    """One pseudo-member per (day, station): member mean and sample std of each feature."""
    m, sd = summary_stats(ds.features)
    P = ds.n_features
    feats = np.stack([m, sd], axis=-1).reshape(ds.n_days, ds.n_stations, 2 * P)[:, :, None, :]
    return replace(ds, feature_names=summary_names(ds.feature_names), features=feats)


# -- CSV I/O ---------------------------------------------------------------------


def _read_rows(path, required):
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}:1: empty file") from None
        header = [h.strip() for h in header]
        missing = [c for c in required if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {missing}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            yield lineno, header, row


def _num(value, kind, path, lineno, col):
    try:
        return kind(value)
    except ValueError:
        raise ParseError(f"{path}:{lineno}: column {col!r}: cannot parse {value!r}") from None


def load_stations(path):
    stations = []
    for lineno, header, row in _read_rows(path, ("id", "lat", "lon", "alt", "orog")):
        rec = dict(zip(header, row))
        try:
            stations.append(
                Station(
                    id=_num(rec["id"], int, path, lineno, "id"),
                    lat=_num(rec["lat"], float, path, lineno, "lat"),
                    lon=_num(rec["lon"], float, path, lineno, "lon"),
                    alt=_num(rec["alt"], float, path, lineno, "alt"),
                    orog=_num(rec["orog"], float, path, lineno, "orog"),
                )
            )
        except ValueError as exc:
            if isinstance(exc, DataError):
                raise
            raise ParseError(f"{path}:{lineno}: {exc}") from None
    ids = [s.id for s in stations]
    if len(set(ids)) != len(ids):
        raise SchemaError(f"{path}: duplicate station ids")
    return stations


def load_dataset(stations_path, forecasts_path, observations_path):
    """Read the three CSV files into an aligned :class:`ForecastDataset`."""
    stations = load_stations(stations_path)
    sid_pos = {s.id: i for i, s in enumerate(stations)}

    feature_names = None
    records = {}
    yday = {}
    for lineno, header, row in _read_rows(forecasts_path, ("day", "station_id", "member") + YDAY_NAMES):
        if feature_names is None:
            feature_names = [h for h in header if h not in ("day", "station_id", "member") + YDAY_NAMES]
            col = {h: k for k, h in enumerate(header)}
            fcols = [col[h] for h in feature_names]
        day = _num(row[col["day"]], int, forecasts_path, lineno, "day")
        sid = _num(row[col["station_id"]], int, forecasts_path, lineno, "station_id")
        member = _num(row[col["member"]], int, forecasts_path, lineno, "member")
        if sid not in sid_pos:
            raise AlignmentError(f"{forecasts_path}:{lineno}: unknown station id {sid}")
        if member < 0:
            raise ParseError(f"{forecasts_path}:{lineno}: negative member index {member}")
        vals = [_num(row[c], float, forecasts_path, lineno, feature_names[k]) for k, c in enumerate(fcols)]
        key = (day, sid_pos[sid], member)
        if key in records:
            raise SchemaError(f"{forecasts_path}:{lineno}: duplicate row for day {day}, station {sid}, member {member}")
        records[key] = vals
        yday.setdefault(
            day,
            (
                _num(row[col["yday_sin"]], float, forecasts_path, lineno, "yday_sin"),
                _num(row[col["yday_cos"]], float, forecasts_path, lineno, "yday_cos"),
            ),
        )
    if not records:
        raise SchemaError(f"{forecasts_path}: no forecast rows")

    days = np.array(sorted(yday), dtype=np.int64)
    day_pos = {int(d): i for i, d in enumerate(days)}
    S = len(stations)
    counts = {}
    for day, s, member in records:
        counts.setdefault((day, s), set()).add(member)
    N = None
    for day in days:
        for s in range(S):
            members = counts.get((int(day), s))
            if members is None:
                raise SchemaError(f"{forecasts_path}: no forecasts for day {day}, station {stations[s].id}")
            if N is None:
                N = len(members)
            if len(members) != N or members != set(range(N)):
                raise SchemaError(
                    f"{forecasts_path}: day {day}, station {stations[s].id} has members "
                    f"{sorted(members)[:5]}..., expected 0..{N - 1}"
                )
    P = len(feature_names)
    features = np.empty((len(days), S, N, P))
    for (day, s, member), vals in records.items():
        features[day_pos[day], s, member] = vals

    obs = np.full((len(days), S), np.nan)
    for lineno, header, row in _read_rows(observations_path, ("day", "station_id", "obs")):
        rec = dict(zip(header, row))
        day = _num(rec["day"], int, observations_path, lineno, "day")
        sid = _num(rec["station_id"], int, observations_path, lineno, "station_id")
        if sid not in sid_pos:
            raise AlignmentError(f"{observations_path}:{lineno}: unknown station id {sid}")
        if day not in day_pos:
            continue
        obs[day_pos[day], sid_pos[sid]] = _num(rec["obs"], float, observations_path, lineno, "obs")
    missing = np.argwhere(np.isnan(obs))
    if missing.size:
        t, s = missing[0]
        raise AlignmentError(
            f"{observations_path}: missing observation for day {days[t]}, station {stations[s].id} "
            f"({len(missing)} missing in total)"
        )
    ydays = np.array([yday[int(d)] for d in days])
    return ForecastDataset(stations, days, feature_names, features, ydays, obs)


def load_dir(path):
    path = Path(path)
    return load_dataset(path / "stations.csv", path / "forecasts.csv", path / "observations.csv")


def save_dataset(ds, out_dir):
    """Write the three CSV files for ``ds`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "stations.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "lat", "lon", "alt", "orog"])
        for st in ds.stations:
            w.writerow([st.id, repr(float(st.lat)), repr(float(st.lon)), repr(float(st.alt)), repr(float(st.orog))])
    ids = ds.station_ids
    with (out / "forecasts.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["day", "station_id", "member", *ds.feature_names, *YDAY_NAMES])
        for t, day in enumerate(ds.days):
            ys = [repr(v) for v in ds.yday[t].tolist()]
            day = int(day)
            for s, sid in enumerate(ids.tolist()):
                for n, vals in enumerate(ds.features[t, s].tolist()):
                    w.writerow([day, sid, n, *map(repr, vals), *ys])
    with (out / "observations.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["day", "station_id", "obs"])
        for t, day in enumerate(ds.days.tolist()):
            for s, sid in enumerate(ids.tolist()):
                w.writerow([day, sid, repr(float(ds.observations[t, s]))])


def save_split(split, path):
    Path(path).write_text(json.dumps(split.to_json(), indent=2))


def load_split(path):
    return SplitSpec.from_json(json.loads(Path(path).read_text()))
