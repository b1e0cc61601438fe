"""CRPS (Gaussian closed form and ensemble), prediction intervals, PIT and CRPSS."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import special, stats

from . import tensor as T

INV_SQRT_PI = 1.0 / np.sqrt(np.pi)


class DomainError(ValueError):
    pass


def norm_cdf(z):
    return special.ndtr(z)


def norm_ppf(p):
    return special.ndtri(p)


def norm_pdf(z):
    return np.exp(-0.5 * np.square(z)) / np.sqrt(2.0 * np.pi)


def _check_sigma(sigma):
    if np.any(~(np.asarray(sigma) > 0)):
        raise DomainError("CRPS of a Gaussian needs sigma > 0")


def crps_gaussian(mu, sigma, y):
    """Closed-form CRPS of N(mu, sigma^2) at y."""
    mu, sigma, y = np.asarray(mu, float), np.asarray(sigma, float), np.asarray(y, float)
    _check_sigma(sigma)
    z = (y - mu) / sigma
    return sigma * (z * (2.0 * norm_cdf(z) - 1.0) + 2.0 * norm_pdf(z) - INV_SQRT_PI)


def crps_gaussian_grad(mu, sigma, y):
    """Partial derivatives (d/dmu, d/dsigma) of :func:`crps_gaussian`."""
    mu, sigma, y = np.asarray(mu, float), np.asarray(sigma, float), np.asarray(y, float)
    _check_sigma(sigma)
    z = (y - mu) / sigma
    return -(2.0 * norm_cdf(z) - 1.0), 2.0 * norm_pdf(z) - INV_SQRT_PI


def crps_integral(mu, sigma, y):
    """Numerical quadrature of the defining integral, for cross-checks only."""
    from scipy.integrate import quad

    F = lambda z: norm_cdf((z - mu) / sigma)  # noqa: E731
    lo = min(mu - 12 * sigma, y)
    hi = max(mu + 12 * sigma, y)
    left, _ = quad(lambda z: F(z) ** 2, lo, y, epsabs=1e-12, epsrel=1e-12, limit=200)
    right, _ = quad(lambda z: (1.0 - F(z)) ** 2, y, hi, epsabs=1e-12, epsrel=1e-12, limit=200)
    tail_lo, _ = quad(lambda z: F(z) ** 2, -np.inf, lo)
    tail_hi, _ = quad(lambda z: (1.0 - F(z)) ** 2, hi, np.inf)
    return left + right + tail_lo + tail_hi


def crps_loss(mu, sigma, y):
    """Mean Gaussian CRPS as a differentiable scalar of ``mu``/``sigma`` tensors."""
    y = np.asarray(y, dtype=np.float64)
    scores = crps_gaussian(mu.data, sigma.data, y)
    dmu, dsig = crps_gaussian_grad(mu.data, sigma.data, y)
    n = scores.size

    def backward(g):
        return g * dmu / n, g * dsig / n

    return T.Tensor(scores.mean(), parents=(mu, sigma), backward=backward)


def crps_ensemble(members, y):
    """Empirical-CDF CRPS: mean|x_i - y| - (1 / 2N^2) sum_ij |x_i - x_j|.

    ``members`` has the ensemble on its last axis; ``y`` broadcasts against
    the remaining axes.
    """
    x = np.asarray(members, dtype=np.float64)
    if x.shape[-1] == 0:
        raise DomainError("ensemble CRPS needs at least one member")
    y = np.asarray(y, dtype=np.float64)
    N = x.shape[-1]
    skill = np.abs(x - y[..., None]).mean(axis=-1)
    xs = np.sort(x, axis=-1)
    w = 2.0 * np.arange(N) - N + 1.0
    spread = 2.0 * (xs * w).sum(axis=-1)
    return skill - spread / (2.0 * N * N)


def nominal_level(n_members):
    return (n_members - 1.0) / (n_members + 1.0)


def gaussian_interval(mu, sigma, nominal):
    q = norm_ppf(0.5 * (1.0 + nominal))
    mu, sigma = np.asarray(mu, float), np.asarray(sigma, float)
    return mu - q * sigma, mu + q * sigma


def ensemble_interval(members):
    x = np.asarray(members, dtype=np.float64)
    return x.min(axis=-1), x.max(axis=-1)


def pi_metrics(lower, upper, y):
    """(mean interval length, coverage in percent); endpoints count as covered."""
    lower, upper, y = np.asarray(lower), np.asarray(upper), np.asarray(y)
    if not (lower.shape == upper.shape == y.shape):
        raise ValueError("interval bounds and observations must have the same shape")
    inside = (y >= lower) & (y <= upper)
    return float(np.mean(upper - lower)), 100.0 * float(np.mean(inside))


def pit(mu, sigma, y):
    _check_sigma(sigma)
    return norm_cdf((np.asarray(y, float) - np.asarray(mu, float)) / np.asarray(sigma, float))


def pit_histogram(values, bins=10):
    counts, edges = np.histogram(np.asarray(values).ravel(), bins=bins, range=(0.0, 1.0))
    return counts, edges


def ks_uniform(values):
    """Kolmogorov-Smirnov distance of a sample from U(0, 1) and its p value."""
    res = stats.kstest(np.asarray(values).ravel(), "uniform")
    return float(res.statistic), float(res.pvalue)


def ks_critical(n, alpha=0.01):
    """Asymptotic one-sample KS critical value."""
    return float(stats.kstwobign.ppf(1.0 - alpha) / np.sqrt(n))


def crpss(crps_model, crps_ref):
    """Per-station skill ``1 - mean(model) / mean(ref)``; NaN where the reference mean is 0."""
    m = np.asarray(crps_model, float).mean(axis=0)
    r = np.asarray(crps_ref, float).mean(axis=0)
    out = np.full(r.shape, np.nan)
    ok = r > 0
    out[ok] = 1.0 - m[ok] / r[ok]
    return out


@dataclass
class ScoreSeries:
    """Scores per (day, station)."""

    days: np.ndarray
    station_ids: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.days), len(self.station_ids)):
            raise ValueError("score array does not match days x stations")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("scores must be finite")

    def per_station(self):
        return self.values.mean(axis=0)

    def mean(self):
        return float(self.values.mean())

    def station(self, sid):
        k = int(np.flatnonzero(self.station_ids == sid)[0])
        return self.values[:, k]

    def to_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["day", "station_id", "crps"])
            for t, day in enumerate(self.days.tolist()):
                for s, sid in enumerate(self.station_ids.tolist()):
                    w.writerow([day, sid, repr(float(self.values[t, s]))])

    @classmethod
    def from_csv(cls, path):
        rows = list(csv.DictReader(Path(path).open(newline="")))
        days = sorted({int(r["day"]) for r in rows})
        sids = []
        for r in rows:
            sid = int(r["station_id"])
            if sid not in sids:
                sids.append(sid)
        dpos = {d: i for i, d in enumerate(days)}
        spos = {s: i for i, s in enumerate(sids)}
        vals = np.full((len(days), len(sids)), np.nan)
        for r in rows:
            vals[dpos[int(r["day"])], spos[int(r["station_id"])]] = float(r["crps"])
        if np.isnan(vals).any():
            raise ValueError(f"{path}: incomplete day x station score table")
        return cls(np.array(days), np.array(sids), vals)


@dataclass
class EvaluationReport:
    model: str
    stations: list
    days: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    members: np.ndarray
    obs: np.ndarray
    crps: ScoreSeries
    nominal: float
    pi_length: float
    pi_cover: float
    pit: np.ndarray
    crpss: np.ndarray
    reference: str
    groups: list

    def summary(self):
        per = self.crps.per_station()
        return {
            "model": self.model,
            "crps_mean": self.crps.mean(),
            "pi_length": self.pi_length,
            "pi_cover": self.pi_cover,
            "pi_nominal": 100.0 * self.nominal,
            "n_days": int(len(self.days)),
            "n_members": int(self.members.shape[-1]) if self.members is not None else None,
            "member_groups": self.groups,
            "crpss_reference": self.reference,
            "per_station": [
                {
                    "station_id": st.id,
                    "crps_mean": float(per[k]),
                    "crpss": None if np.isnan(self.crpss[k]) else float(self.crpss[k]),
                }
                for k, st in enumerate(self.stations)
            ],
        }

    def write(self, out_dir, pit_bins=10):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.crps.to_csv(out / "scores.csv")
        (out / "summary.json").write_text(json.dumps(self.summary(), indent=2))
        per = self.crps.per_station()
        with (out / "per_station.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["station_id", "lat", "lon", "crps_mean"])
            for k, st in enumerate(self.stations):
                w.writerow([st.id, st.lat, st.lon, repr(float(per[k]))])
        with (out / "crpss.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["station", "lat", "lon", "crpss"])
            for k, st in enumerate(self.stations):
                w.writerow([st.id, st.lat, st.lon, "" if np.isnan(self.crpss[k]) else repr(float(self.crpss[k]))])
        with (out / "predictions.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            if self.mu is not None:
                w.writerow(["day", "station_id", "mu", "sigma"])
                for t, day in enumerate(self.days.tolist()):
                    for k, st in enumerate(self.stations):
                        w.writerow([day, st.id, repr(float(self.mu[t, k])), repr(float(self.sigma[t, k]))])
            else:
                N = self.members.shape[-1]
                w.writerow(["day", "station_id", *[f"m{n}" for n in range(N)]])
                for t, day in enumerate(self.days.tolist()):
                    for k, st in enumerate(self.stations):
                        w.writerow([day, st.id, *map(repr, self.members[t, k].tolist())])
        if self.pit is not None:
            counts, edges = pit_histogram(self.pit, pit_bins)
            with (out / "pit_hist.csv").open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["bin_left", "bin_right", "count"])
                for a, b, c in zip(edges[:-1], edges[1:], counts):
                    w.writerow([repr(float(a)), repr(float(b)), int(c)])


def gaussian_report(model_name, ds, mu, sigma, ref_crps=None, reference="ENS", groups=None, nominal_members=None):
    """Evaluation report for Gaussian predictions on ``ds``.

    The PI nominal level follows the dataset's member count unless
    ``nominal_members`` is given. CRPSS is against ``ref_crps`` (days x
    stations), or the raw ensemble when omitted.
    """
    y = ds.observations
    scores = crps_gaussian(mu, sigma, y)
    nominal = nominal_level(nominal_members or ds.n_members)
    length, cover = pi_metrics(*gaussian_interval(mu, sigma, nominal), y)
    if ref_crps is None:
        ref_crps = crps_ensemble(ds.features[..., 0], y)
    return EvaluationReport(
        model=model_name,
        stations=list(ds.stations),
        days=np.asarray(ds.days),
        mu=np.asarray(mu),
        sigma=np.asarray(sigma),
        members=None,
        obs=y,
        crps=ScoreSeries(np.asarray(ds.days), ds.station_ids, scores),
        nominal=nominal,
        pi_length=length,
        pi_cover=cover,
        pit=pit(mu, sigma, y),
        crpss=crpss(scores, ref_crps),
        reference=reference,
        groups=groups,
    )


def ensemble_report(ds, ref_crps=None, reference="ENS"):
    """Report for the raw ensemble: empirical CRPS and the min-max interval."""
    y = ds.observations
    members = ds.features[..., 0]
    scores = crps_ensemble(members, y)
    length, cover = pi_metrics(*ensemble_interval(members), y)
    return EvaluationReport(
        model="ENS",
        stations=list(ds.stations),
        days=np.asarray(ds.days),
        mu=None,
        sigma=None,
        members=members,
        obs=y,
        crps=ScoreSeries(np.asarray(ds.days), ds.station_ids, scores),
        nominal=nominal_level(ds.n_members),
        pi_length=length,
        pi_cover=cover,
        pit=None,
        crpss=crpss(scores, scores if ref_crps is None else ref_crps),
        reference=reference,
        groups=None,
    )
