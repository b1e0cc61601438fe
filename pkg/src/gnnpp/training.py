"""CRPS training with AdamW and early stopping, plus the deep ensemble of models."""

from __future__ import annotations

import copy
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .metrics import crps_gaussian, crps_loss
from .models import EnsembleModel, Model, ModelConfig, build_model

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    """Training hit a non-finite loss or gradient.

    ``params`` holds the last finite snapshot (best epoch so far, or the
    initial values when no epoch finished) and ``trace`` the epochs completed.
    """

    def __init__(self, message, params=None, trace=None):
        super().__init__(message)
        self.params = params
        self.trace = trace or []


@dataclass(frozen=True)
class TrainConfig:
    lead_time: str = "custom"
    batch_size: int = 8
    max_epochs: int = 31
    learning_rate: float = 2e-4
    weight_decay: float = 1e-4
    patience: int = 10
    ensemble_size: int = 10
    seed: int = 0
    d_max: float = 100.0
    hidden: int = 265
    heads: int = 8
    n_blocks: int = 2
    embedding_dim: int = 20
    retrain_on_valid: bool = False
    workers: int = 1

    def __post_init__(self):
        for name in ("batch_size", "max_epochs", "ensemble_size", "hidden", "heads", "n_blocks", "embedding_dim", "workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if not (self.learning_rate > 0 and self.d_max > 0):
            raise ValueError("learning_rate and d_max must be > 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")

    def model_config(self, kind):
        return ModelConfig(
            kind=kind,
            hidden=self.hidden,
            heads=self.heads,
            n_blocks=self.n_blocks,
            embedding_dim=self.embedding_dim,
            d_max=self.d_max,
        )

    def to_text(self):
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())


PRESETS = {
    "24h": TrainConfig(lead_time="24h", max_epochs=31, learning_rate=2e-4, hidden=265, n_blocks=2),
    "72h": TrainConfig(lead_time="72h", max_epochs=42, learning_rate=1e-4, hidden=128, n_blocks=2),
    "120h": TrainConfig(lead_time="120h", max_epochs=35, learning_rate=5e-4, hidden=64, n_blocks=1),
}


def preset(name, **overrides):
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; available presets: {', '.join(PRESETS)}") from None
    return replace(base, **overrides)


def _coerce(kind, text):
    if kind is bool or kind == "bool":
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if kind is int or kind == "int":
        return int(text)
    if kind is float or kind == "float":
        return float(text)
    return text.strip()


def parse_config_text(text, base=None):
    """Parse flat ``key = value`` lines (``#`` comments) into a :class:`TrainConfig`.

    A ``preset`` key, if present, selects the starting point; other keys
    override it.
    """
    kinds = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    start = base or TrainConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key == "preset":
            start = preset(value)
            continue
        if key not in kinds:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        try:
            values[key] = _coerce(kinds[key], value)
        except ValueError as exc:
            raise ValueError(f"config line {lineno}: {exc}") from None
    return replace(start, **values)


def load_config(path, base=None):
    return parse_config_text(Path(path).read_text(), base)


# -- optimiser ---------------------------------------------------------------------


@dataclass
class AdamState:
    step: int
    m: list
    v: list

    @classmethod
    def zeros_like(cls, arrays):
        return cls(0, [np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays])


def adamw_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
    """One AdamW update, in place on the ``params`` arrays.

    Decay is decoupled: ``theta *= 1 - lr * wd`` first, then the
    bias-corrected Adam step from the gradient alone.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimiser state must have the same length")
    for k, g in enumerate(grads):
        if g.shape != params[k].shape or state.m[k].shape != params[k].shape:
            raise ValueError(f"shape mismatch for parameter {k}")
        if not np.all(np.isfinite(g)):
            raise T.NumericalError(f"non-finite gradient for parameter {k}")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


class EarlyStopping:
    """Stop after ``patience`` epochs without a new best (lowest) score."""

    def __init__(self, patience):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.best_score = np.inf
        self.best_epoch = 0
        self.best_state = None
        self.epoch = 0

    def update(self, score, state=None):
        """Record one epoch; returns True when training should stop."""
        self.epoch += 1
        if score < self.best_score:
            self.best_score = float(score)
            self.best_epoch = self.epoch
            self.best_state = copy.deepcopy(state)
        return self.epoch - self.best_epoch >= self.patience


def simulate_stopping(trace, patience):
    """(stop epoch, best epoch), 1-based, for a validation trace."""
    es = EarlyStopping(patience)
    for score in trace:
        if es.update(score):
            break
    return es.epoch, es.best_epoch


# -- training ----------------------------------------------------------------------


def _snapshot(model):
    return [p.data.copy() for p in model.params()]


def _restore(model, arrays):
    for p, a in zip(model.params(), arrays):
        p.data[...] = a


def mean_crps(model, enc):
    mu, sigma = model.predict_encoded(enc)
    return float(crps_gaussian(mu, sigma, enc.obs).mean())


def _run_epochs(model, enc_train, enc_valid, cfg, seed, n_epochs=None, stopper=None):
    params = model.params()
    state = AdamState.zeros_like([p.data for p in params])
    n_days = enc_train.x.shape[0]
    trace = []
    epochs = n_epochs or cfg.max_epochs
    for epoch in range(1, epochs + 1):
        order = np.random.default_rng([seed, 7, epoch]).permutation(n_days)
        total, count = 0.0, 0
        for start in range(0, n_days, cfg.batch_size):
            pos = np.sort(order[start : start + cfg.batch_size])
            for p in params:
                p.zero_grad()
            try:
                mu, sigma = model.forward(enc_train, pos)
                loss = crps_loss(mu, sigma, enc_train.obs[pos].ravel())
                if not np.isfinite(loss.data):
                    raise T.NumericalError("non-finite training loss")
                loss.backward()
                adamw_step([p.data for p in params], [p.grad for p in params], state, cfg.learning_rate,
                           weight_decay=cfg.weight_decay)
            except (T.NumericalError, FloatingPointError) as exc:
                last = stopper.best_state if stopper is not None and stopper.best_state is not None else None
                raise TrainingAborted(f"epoch {epoch}, batch at day {start}: {exc}", last, trace) from exc
            total += float(loss.data) * len(pos)
            count += len(pos)
        valid = mean_crps(model, enc_valid) if enc_valid is not None else float("nan")
        trace.append({"epoch": epoch, "train_crps": total / count, "valid_crps": valid})
        log.info("epoch %d train %.5f valid %.5f", epoch, total / count, valid)
        if stopper is not None and stopper.update(valid, _snapshot(model)):
            break
    return trace


@dataclass
class TrainResult:
    model: Model
    trace: list
    best_epoch: int
    valid_crps: float
    seed: int


def train_one(spec, ds, split, cfg, seed=None):
    """Train one model; returns the best-epoch model and its validation trace.

    ``spec`` is a model kind (``"GAT"``...) or a :class:`ModelConfig`.
    """
    seed = cfg.seed if seed is None else seed
    mcfg = cfg.model_config(spec) if isinstance(spec, str) else spec
    train_ds, valid_ds = split.subset(ds, "train"), split.subset(ds, "valid")
    if train_ds.n_days == 0 or valid_ds.n_days == 0:
        raise ValueError(f"train and valid parts must be non-empty, got {split.sizes(ds)}")
    model = build_model(mcfg, train_ds, seed=seed)
    initial = _snapshot(model)
    enc_train, enc_valid = model.encode(train_ds), model.encode(valid_ds)
    stopper = EarlyStopping(cfg.patience)
    try:
        trace = _run_epochs(model, enc_train, enc_valid, cfg, seed, stopper=stopper)
    except TrainingAborted as exc:
        if exc.params is None:
            exc.params = initial
        raise
    _restore(model, stopper.best_state)
    best_epoch, best = stopper.best_epoch, stopper.best_score
    if cfg.retrain_on_valid:
        # refit from the same initialisation on train + valid for the chosen epoch count
        full = ds.select(split.mask(ds, "train") | split.mask(ds, "valid"))
        model = build_model(mcfg, full, seed=seed)
        _run_epochs(model, model.encode(full), None, cfg, seed, n_epochs=best_epoch)
    return TrainResult(model, trace, best_epoch, best, seed)


def _train_member(args):
    spec, ds, split, cfg, seed = args
    try:
        return train_one(spec, ds, split, cfg, seed), None
    except TrainingAborted as exc:
        return None, f"seed {seed}: {exc}"


@dataclass
class EnsembleCheckpoint:
    models: list
    seeds: list
    valid_scores: list
    traces: list
    train_config: TrainConfig
    failures: list = field(default_factory=list)

    @property
    def ensemble(self):
        return EnsembleModel(self.models)

    @property
    def kind(self):
        return self.models[0].kind

    @property
    def flagged(self):
        return bool(self.failures)

    def to_json(self):
        return {
            "format": "gnnpp-ensemble/1",
            "train_config": asdict(self.train_config),
            "seeds": self.seeds,
            "valid_scores": self.valid_scores,
            "traces": self.traces,
            "failures": self.failures,
            "models": [m.to_json() for m in self.models],
        }

    @classmethod
    def from_json(cls, blob):
        if blob.get("format") != "gnnpp-ensemble/1":
            raise ValueError("not an ensemble checkpoint")
        return cls(
            models=[Model.from_json(m) for m in blob["models"]],
            seeds=blob["seeds"],
            valid_scores=blob["valid_scores"],
            traces=blob["traces"],
            train_config=TrainConfig(**blob["train_config"]),
            failures=blob.get("failures", []),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path):
        return cls.from_json(json.loads(Path(path).read_text()))


def train_ensemble(spec, ds, split, cfg):
    """Train ``cfg.ensemble_size`` models with seeds ``cfg.seed + k``.

    Aborted members are reported in ``failures`` and dropped; at least one
    must survive.
    """
    jobs = [(spec, ds, split, cfg, cfg.seed + k) for k in range(cfg.ensemble_size)]
    t0 = time.perf_counter()
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            outcomes = list(pool.map(_train_member, jobs))
    else:
        outcomes = [_train_member(job) for job in jobs]
    results = [r for r, _ in outcomes if r is not None]
    failures = [f for _, f in outcomes if f is not None]
    for f in failures:
        log.warning("ensemble member aborted: %s", f)
    if not results:
        raise TrainingAborted("every ensemble member aborted: " + "; ".join(failures))
    log.info("trained %d model(s) in %.1fs", len(results), time.perf_counter() - t0)
    return EnsembleCheckpoint(
        models=[r.model for r in results],
        seeds=[r.seed for r in results],
        valid_scores=[r.valid_crps for r in results],
        traces=[r.trace for r in results],
        train_config=cfg,
        failures=failures,
    )


def write_training_log(trace, path):
    with Path(path).open("w") as fh:
        fh.write("epoch,train_crps,valid_crps\n")
        for row in trace:
            fh.write(f"{row['epoch']},{row['train_crps']!r},{row['valid_crps']!r}\n")
