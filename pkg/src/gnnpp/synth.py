"""Synthetic station networks and ensemble forecasts with known error structure.

The generative model, per day ``t`` and station ``s``::

    truth[t, s]      = seasonal(t) - lapse * alt[s] + anomaly_t(lat, lon)
    obs[t, s]        = truth[t, s] + sigma_true * eps
    member[t, s, n]  = truth[t, s] + bias[s] + spread_error * sigma_true * eta

``anomaly_t`` is a smooth random field drawn afresh every day, so nearby
stations share most of their weather while member noise is independent per
station; pooling neighbours therefore sharpens the estimate of ``truth``.
With ``bias = 0`` and ``spread_error = 1`` observation and members are
exchangeable, i.e. the raw ensemble is calibrated.

All randomness tied to a station comes from ``seed``; all randomness tied to a
day comes from ``(seed, day)``. Generating days 0..99 and then 100..199 gives
the same truth as generating 0..199 in one go, and a 51-member forecast part
shares stations and bias field with an 11-member reforecast part.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import ForecastDataset, SplitSpec, Station
from .graph import geodesic_km

KM_PER_DEG = 111.19492664455873
LAPSE_RATE = 0.0065  # K per metre
N_MODES = 8


@dataclass(frozen=True)
class SynthConfig:
    n_stations: int = 20
    n_days: int = 2600
    n_members: int = 11
    n_features: int = 4
    seed: int = 0
    bias_field: str = "spatially-correlated"
    spread_error: float = 1.0
    spatial_corr_length: float = 300.0
    sigma_true: float = 1.0
    bias_mean: float = 0.0
    bias_amplitude: float = 2.0
    anomaly_amplitude: float = 3.0
    first_day: int = 0
    lat_range: tuple = (46.0, 54.0)
    lon_range: tuple = (2.0, 16.0)

    def validate(self):
        for name in ("n_stations", "n_days", "n_members", "n_features"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.bias_field not in ("per-station", "spatially-correlated"):
            raise ValueError(f"bias_field must be 'per-station' or 'spatially-correlated', got {self.bias_field!r}")
        if self.bias_field == "spatially-correlated" and not self.spatial_corr_length > 0:
            raise ValueError("spatial_corr_length must be > 0 for a spatially-correlated bias")
        if self.spread_error < 0 or self.sigma_true <= 0:
            raise ValueError("spread_error must be >= 0 and sigma_true > 0")
        return self


@dataclass
class SynthTruth:
    """Latent quantities behind a generated dataset, for oracle comparisons."""

    truth: np.ndarray
    bias: np.ndarray
    sigma_obs: float


def feature_names(n_features):
    base = ["t2m", "noise", "t850", "tsoil"]
    return (base + [f"aux{k}" for k in range(len(base), n_features)])[:n_features]


def _station_rng(cfg):
    return np.random.default_rng([cfg.seed, 0])


def _day_rng(cfg, day, stream):
    return np.random.default_rng([cfg.seed, stream, int(day)])


def place_stations(cfg):
    """Clustered station layout inside the configured lat/lon box.

    Stations are grown one at a time 35-90 km from a random existing one, so
    every station has a neighbour within 100 km, and every new station must
    also lie beyond 100 km of at least one existing station. From four
    stations on, layouts where some station is within 100 km of all others
    are redrawn; three stations only need one pair beyond 100 km.
    """
    cfg.validate()
    rng = _station_rng(cfg)
    lat0, lat1 = cfg.lat_range
    lon0, lon1 = cfg.lon_range
    for _ in range(1000):
        lat_c = rng.uniform(lat0 + 0.3 * (lat1 - lat0), lat1 - 0.3 * (lat1 - lat0))
        lon_c = rng.uniform(lon0 + 0.3 * (lon1 - lon0), lon1 - 0.3 * (lon1 - lon0))
        coords = [(lat_c, lon_c)]
        attempts = 0
        while len(coords) < cfg.n_stations and attempts < 100 * cfg.n_stations:
            attempts += 1
            lat_a, lon_a = coords[rng.integers(len(coords))]
            dist = rng.uniform(35.0, 90.0)
            bearing = rng.uniform(0.0, 2.0 * np.pi)
            lat = lat_a + dist * np.cos(bearing) / KM_PER_DEG
            lon = lon_a + dist * np.sin(bearing) / (KM_PER_DEG * np.cos(np.radians(lat_a)))
            if not (lat0 <= lat <= lat1 and lon0 <= lon <= lon1):
                continue
            d = np.array([geodesic_km((lat, lon), c) for c in coords])
            if d.min() < 15.0:
                continue
            if len(coords) >= 2 and d.max() < 100.0:
                continue
            coords.append((lat, lon))
        if len(coords) < cfg.n_stations:
            continue
        if cfg.n_stations >= 3:
            D = np.array([[geodesic_km(a, b) for b in coords] for a in coords])
            np.fill_diagonal(D, np.inf)
            if not np.all((D < 100.0).any(axis=1)):
                continue
            np.fill_diagonal(D, 0.0)
            far = (D >= 100.0).any(axis=1)
            # with three stations the middle one of a chain is near both others
            if not (far.all() if cfg.n_stations >= 4 else far.any()):
                continue
        break
    else:
        raise ValueError(f"could not place {cfg.n_stations} stations in the configured box")
    coords = np.array(coords)
    alt_field = _smooth_field(rng, coords, max(cfg.spatial_corr_length, 1.0))
    alt = np.clip(350.0 + 250.0 * alt_field + rng.normal(0.0, 40.0, len(coords)), 0.0, None)
    orog = rng.normal(0.0, 50.0, len(coords))
    return [
        Station(id=s + 1, lat=float(la), lon=float(lo), alt=float(a), orog=float(o))
        for s, ((la, lo), a, o) in enumerate(zip(coords, alt, orog))
    ]


def _smooth_field(rng, coords, length_km):
    """Unit-variance random Fourier field with squared-exponential correlation length ``length_km``."""
    xy = _project(coords)
    k = rng.normal(0.0, 1.0 / length_km, size=(N_MODES, 2))
    phase = rng.uniform(0.0, 2.0 * np.pi, size=N_MODES)
    return np.sqrt(2.0 / N_MODES) * np.cos(xy @ k.T + phase).sum(axis=1)


def _project(coords):
    coords = np.asarray(coords, dtype=np.float64)
    lat_ref = np.radians(coords[:, 0].mean())
    return np.column_stack([coords[:, 0] * KM_PER_DEG, coords[:, 1] * KM_PER_DEG * np.cos(lat_ref)])


def station_bias(cfg, stations):
    rng = np.random.default_rng([cfg.seed, 1])
    if cfg.bias_field == "per-station":
        z = rng.standard_normal(len(stations))
    else:
        coords = np.array([[s.lat, s.lon] for s in stations])
        z = _smooth_field(rng, coords, cfg.spatial_corr_length)
    return cfg.bias_mean + cfg.bias_amplitude * z


def yday_encoding(days):
    ang = 2.0 * np.pi * (np.asarray(days) % 365.25) / 365.25
    return np.column_stack([np.sin(ang), np.cos(ang)])


def generate_with_truth(cfg):
    """Generate a dataset and the latent truth/bias used to build it."""
    cfg.validate()
    stations = place_stations(cfg)
    S, N, P = cfg.n_stations, cfg.n_members, cfg.n_features
    coords = np.array([[s.lat, s.lon] for s in stations])
    alt = np.array([s.alt for s in stations])
    bias = station_bias(cfg, stations)
    days = np.arange(cfg.first_day, cfg.first_day + cfg.n_days, dtype=np.int64)
    yday = yday_encoding(days)
    corr_len = cfg.spatial_corr_length if cfg.spatial_corr_length > 0 else 300.0

    truth = np.empty((len(days), S))
    obs = np.empty((len(days), S))
    features = np.empty((len(days), S, N, P))
    for t, day in enumerate(days):
        field_rng = _day_rng(cfg, day, 1)
        seasonal = 10.0 + 8.0 * np.sin(2.0 * np.pi * (day % 365.25) / 365.25 - 1.8)
        clim = seasonal - LAPSE_RATE * alt
        truth[t] = clim + cfg.anomaly_amplitude * _smooth_field(field_rng, coords, corr_len)
        obs[t] = truth[t] + cfg.sigma_true * field_rng.standard_normal(S)

        member_rng = np.random.default_rng([cfg.seed, 2, int(day), N])
        eta = member_rng.standard_normal((S, N))
        members = truth[t][:, None] + bias[:, None] + cfg.spread_error * cfg.sigma_true * eta
        features[t, :, :, 0] = members
        if P > 1:
            features[t, :, :, 1] = member_rng.standard_normal((S, N))
        if P > 2:
            features[t, :, :, 2] = members - 8.0 + 0.004 * alt[:, None] + 1.5 * member_rng.standard_normal((S, N))
        if P > 3:
            features[t, :, :, 3] = clim[:, None] + 2.0 + 2.0 * member_rng.standard_normal((S, N))
        for p in range(4, P):
            features[t, :, :, p] = member_rng.normal(0.0, 1.0 + 0.1 * p, size=(S, N))

    ds = ForecastDataset(stations, days, feature_names(P), features, yday, obs)
    return ds, SynthTruth(truth=truth, bias=bias, sigma_obs=cfg.sigma_true)


def generate(cfg):
    """Deterministic synthetic :class:`ForecastDataset` for ``cfg``."""
    return generate_with_truth(cfg)[0]


def default_split(cfg, valid_frac=0.12, test_frac=0.12, label="R2R"):
    """Contiguous train/valid/test day ranges covering ``cfg``'s days."""
    n = cfg.n_days
    n_test = max(1, int(round(n * test_frac)))
    n_valid = max(1, int(round(n * valid_frac)))
    n_train = n - n_valid - n_test
    if n_train < 1:
        raise ValueError(f"{n} days are too few for a train/valid/test split")
    d0 = cfg.first_day
    return SplitSpec(
        train=(d0, d0 + n_train),
        valid=(d0 + n_train, d0 + n_train + n_valid),
        test=(d0 + n_train + n_valid, d0 + n),
        label=label,
    )


def forecast_part(cfg, n_days, n_members=51):
    """Operational-style test part following ``cfg``'s days, with a larger ensemble."""
    return replace(cfg, first_day=cfg.first_day + cfg.n_days, n_days=n_days, n_members=n_members)
