"""Diebold-Mariano tests with Benjamini-Hochberg correction, and permutation feature importance."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import special

from .metrics import crps_gaussian
from .models import EnsembleModel

ID_FEATURE = "id"


@dataclass(frozen=True)
class DmResult:
    station: int
    t: float
    p: float
    degenerate: bool = False

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p value {self.p} outside [0, 1]")


def dm_test(scores_f, scores_g, station=0, demeaned=False):
    """Two-sided DM test of equal mean score for two per-day series.

    ``t = sqrt(n) * mean(d) / s`` with ``d = F - G`` and ``s = sqrt(mean(d^2))``;
    ``demeaned=True`` uses the centred second moment instead. Negative ``t``
    favours F. All-zero differences give a flagged degenerate result with
    ``t = 0, p = 1``.
    """
    f = np.asarray(scores_f, dtype=np.float64).ravel()
    g = np.asarray(scores_g, dtype=np.float64).ravel()
    if f.shape != g.shape:
        raise ValueError(f"score series differ in length: {f.size} vs {g.size}")
    n = f.size
    if n < 2:
        raise ValueError("the DM test needs at least two days")
    d = f - g
    dbar = d.mean()
    s = np.sqrt(np.mean(np.square(d - dbar) if demeaned else np.square(d)))
    if s == 0.0:
        return DmResult(station, 0.0, 1.0, degenerate=True)
    t = np.sqrt(n) * dbar / s
    p = float(special.erfc(abs(t) / np.sqrt(2.0)))
    return DmResult(station, float(t), min(1.0, p))


@dataclass(frozen=True)
class BhResult:
    rejected: np.ndarray
    p_star: float | None
    alpha: float

    @property
    def n_rejected(self):
        return int(self.rejected.sum())


def bh_correct(p_values, alpha=0.05):
    """Benjamini-Hochberg: reject every p <= p*, the largest p_(i) with p_(i) <= alpha * i / M."""
    p = np.asarray(p_values, dtype=np.float64).ravel()
    if p.size == 0:
        raise ValueError("need at least one p value")
    if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
        raise ValueError("p values must lie in [0, 1]")
    M = p.size
    ps = np.sort(p)
    ok = ps <= alpha * np.arange(1, M + 1) / M
    if not ok.any():
        return BhResult(np.zeros(M, dtype=bool), None, alpha)
    p_star = float(ps[np.flatnonzero(ok)[-1]])
    return BhResult(p <= p_star, p_star, alpha)


@dataclass
class Comparison:
    results: list
    bh: BhResult

    @property
    def fraction_rejected(self):
        return self.bh.n_rejected / len(self.results)

    def fraction_favouring(self, first=True):
        """Share of stations rejected with the first (or second) system better."""
        sign = -1.0 if first else 1.0
        hits = [bool(rej) and sign * res.t > 0 for res, rej in zip(self.results, self.bh.rejected)]
        return float(np.mean(hits))


def compare_scores(series_f, series_g, alpha=0.05, demeaned=False):
    """Per-station DM tests of two :class:`ScoreSeries` plus BH correction."""
    sf, sg = [int(s) for s in series_f.station_ids], [int(s) for s in series_g.station_ids]
    if sf != sg:
        only_f, only_g = sorted(set(sf) - set(sg)), sorted(set(sg) - set(sf))
        raise ValueError(
            f"station sets differ: only in first {only_f}, only in second {only_g}"
            if only_f or only_g
            else "station order differs between the reports"
        )
    if not np.array_equal(series_f.days, series_g.days):
        raise ValueError("the reports cover different days")
    results = [dm_test(series_f.values[:, k], series_g.values[:, k], sid, demeaned) for k, sid in enumerate(sf)]
    decided = np.array([not r.degenerate for r in results])
    p = np.array([r.p for r in results])
    bh = bh_correct(p, alpha)
    bh = BhResult(bh.rejected & decided, bh.p_star, alpha)
    return Comparison(results, bh)


def write_dm_results(comparison, path):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["station", "t", "p", "rejected"])
        for res, rej in zip(comparison.results, comparison.bh.rejected):
            w.writerow([res.station, repr(res.t), repr(res.p), int(bool(rej))])


# -- permutation importance ----------------------------------------------------------


@dataclass
class ImportanceResult:
    feature: str
    imp_mean: float
    imp_std: float
    values: list
    normalized: float = 0.0

    def __post_init__(self):
        if len(self.values) < 1:
            raise ValueError("importance needs at least one repetition")


def two_stage_permutation(values, rng):
    """Shuffle a (T, S, N) feature across days, then jointly across (station, member) within each day."""
    T_, S, N = values.shape
    out = values[rng.permutation(T_)].reshape(T_, S * N)
    for t in range(T_):
        out[t] = out[t, rng.permutation(S * N)]
    return out.reshape(T_, S, N)


def _predict_fn(model):
    if isinstance(model, EnsembleModel):
        return model.predict_inputs

    def predict(x_raw, emb_index, obs, stations):
        return model.predict_encoded(model.encode_inputs(x_raw, emb_index, obs, stations))

    return predict


def _members(model):
    return model.members if isinstance(model, EnsembleModel) else [model]


def permutation_importance(model, ds, split, feature, repetitions=10, seed=0, part="test", permute=two_stage_permutation):
    """Relative CRPS inflation ``(CRPS_perm - CRPS_orig) / CRPS_orig`` of one input.

    ``feature`` names a model input column, or ``"id"`` to shuffle the
    station-embedding assignment instead. Topology always follows the station
    table. Repetition ``r`` draws from ``default_rng([seed, r])``.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    data = split.subset(ds, part) if split is not None else ds
    if data.n_days == 0:
        raise ValueError(f"the {part} part is empty")
    first = _members(model)[0]
    first.check_schema(data)
    names = data.input_names()
    if feature not in names and feature != ID_FEATURE:
        raise KeyError(f"unknown feature {feature!r}; available: {names + [ID_FEATURE]}")
    predict = _predict_fn(model)
    x = data.node_inputs()
    rows = first.station_rows(data.station_ids)
    emb = np.ascontiguousarray(np.broadcast_to(rows[None, :, None], x.shape[:3]))
    obs = data.observations

    def score(x_in, emb_in):
        mu, sigma = predict(x_in, emb_in, obs, data.stations)
        return float(crps_gaussian(mu, sigma, obs).mean())

    base = score(x, emb)
    values = []
    for r in range(repetitions):
        rng = np.random.default_rng([seed, r])
        if feature == ID_FEATURE:
            permuted = score(x, np.ascontiguousarray(permute(emb.copy(), rng)))
        else:
            col = names.index(feature)
            xp = x.copy()
            xp[..., col] = permute(x[..., col].copy(), rng)
            permuted = score(xp, emb)
        values.append((permuted - base) / base)
    values = np.array(values)
    return ImportanceResult(feature, float(values.mean()), float(values.std()), values.tolist())


def normalize_importance(results):
    """Set ``normalized`` to Imp / sum of positive Imps (0 for non-positive entries)."""
    total = sum(r.imp_mean for r in results if r.imp_mean > 0)
    for r in results:
        r.normalized = r.imp_mean / total if (r.imp_mean > 0 and total > 0) else 0.0
    return results


def write_importance(results, path):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["feature", "imp_mean", "imp_std", "imp_normalized"])
        for r in results:
            w.writerow([r.feature, repr(r.imp_mean), repr(r.imp_std), repr(r.normalized)])
