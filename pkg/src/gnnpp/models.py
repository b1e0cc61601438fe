"""Post-processing models behind one prediction interface.

* ``GAT``  - member nodes, full spatial graph, GNN stack, Deep Set head.
* ``SMRY`` - one node per station built from member mean/std, same spatial graph.
* ``DS``   - member nodes with self loops only, same stack and head.
* ``DRN``  - dense network on member summaries plus station embedding, no graph.
* ``ENS``  - the raw members, unprocessed.

Every trained model maps raw dataset inputs to ``(mu, sigma)`` per (day,
station). Inputs are standardised with statistics from the training days;
outputs are affine-mapped with the training observation mean and std so the
network emits target units directly.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .data import Normalizer, SchemaError, summarize_inputs, summary_names
from .graph import DEFAULT_EPS, topology_for
from .layers import DeepSetHead, Dense, GnnStack, gaussian_output

log = logging.getLogger(__name__)

MODEL_KINDS = ("GAT", "SMRY", "DS", "DRN", "ENS")


@dataclass
class ModelConfig:
    kind: str = "GAT"
    hidden: int = 32
    heads: int = 4
    n_blocks: int = 2
    embedding_dim: int = 20
    d_max: float = 100.0
    eps: float = DEFAULT_EPS
    phi_layers: int = 3
    rho_layers: int = 2

    def __post_init__(self):
        self.kind = self.kind.upper()
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; choose from {MODEL_KINDS}")


@dataclass
class GaussianPrediction:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        if np.any(~(np.asarray(self.sigma) > 0)):
            raise ValueError("predicted sigma must be strictly positive")


@dataclass
class Encoded:
    """Model-ready inputs for a set of days."""

    x: np.ndarray  # (T, S, N', F') standardised
    emb_index: np.ndarray  # (T, S, N') embedding rows
    obs: np.ndarray  # (T, S)
    topology: object


class Model:
    """A trainable post-processor. ``fit_preprocessing`` must run before use."""

    def __init__(self, config, input_names, station_ids, n_dynamic, seed=0):
        self.config = config
        self.input_names = list(input_names)
        self.station_ids = [int(s) for s in station_ids]
        self.n_dynamic = int(n_dynamic)
        self.normalizer = None
        self.loc, self.scale = 0.0, 1.0
        self.n_train_members = None
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.embedding = T.init_embedding(rng, len(self.station_ids), config.embedding_dim, "embedding")
        in_dim = len(self.model_input_names()) + config.embedding_dim
        if config.kind == "DRN":
            h = config.hidden
            self.mlp = [Dense(rng, in_dim, h, "drn.dense0"), Dense(rng, h, h, "drn.dense1"), Dense(rng, h, 2, "drn.out")]
        else:
            self.stack = GnnStack(rng, in_dim, config.hidden, config.heads, config.n_blocks)
            self.head = DeepSetHead(rng, config.hidden, config.hidden, config.phi_layers, config.rho_layers)

    @property
    def kind(self):
        return self.config.kind

    @property
    def summarizes(self):
        return self.kind in ("SMRY", "DRN")

    def model_input_names(self):
        if self.summarizes:
            return summary_names(self.input_names[: self.n_dynamic]) + self.input_names[self.n_dynamic :]
        return list(self.input_names)

    def params(self):
        out = [self.embedding]
        if self.kind == "DRN":
            for layer in self.mlp:
                out += layer.params()
        else:
            out += self.stack.params() + self.head.params()
        return out

    # -- preprocessing ---------------------------------------------------------

    def _transform_raw(self, x):
        return summarize_inputs(x, self.n_dynamic) if self.summarizes else x

    def fit_preprocessing(self, train_ds):
        x = self._transform_raw(train_ds.node_inputs())
        self.normalizer = Normalizer.fit(x, self.model_input_names())
        self.n_train_members = train_ds.n_members
        obs = train_ds.observations
        self.loc = float(obs.mean())
        self.scale = float(obs.std()) if obs.std() > 0 else 1.0
        if self.kind != "DRN":
            self.head.loc, self.head.scale = self.loc, self.scale

    def station_rows(self, station_ids):
        pos = {sid: k for k, sid in enumerate(self.station_ids)}
        try:
            return np.array([pos[int(s)] for s in station_ids], dtype=np.int64)
        except KeyError as exc:
            raise LookupError(f"station id {exc.args[0]} was not seen in training (no embedding)") from None

    def check_schema(self, ds):
        if ds.input_names() != self.input_names:
            expected, got = set(self.input_names), set(ds.input_names())
            raise SchemaError(
                f"feature schema mismatch: missing {sorted(expected - got)}, unexpected {sorted(got - expected)}"
                if expected != got
                else f"feature order differs: expected {self.input_names}, got {ds.input_names()}"
            )

    def encode_inputs(self, x_raw, emb_index, obs, stations):
        """Encode raw node inputs (T, S, N, F) with per-node embedding rows (T, S, N)."""
        x = self._transform_raw(x_raw)
        if self.summarizes:
            emb_index = emb_index[:, :, :1]
        x = self.normalizer.apply(x)
        topo = None
        if self.kind != "DRN":
            topo = topology_for(
                stations,
                x.shape[2],
                self.config.d_max,
                self.config.eps,
                self_loops_only=self.kind == "DS",
            )
        return Encoded(np.ascontiguousarray(x), np.ascontiguousarray(emb_index), obs, topo)

    def encode(self, ds):
        self.check_schema(ds)
        rows = self.station_rows(ds.station_ids)
        emb_index = np.broadcast_to(rows[None, :, None], (ds.n_days, ds.n_stations, ds.n_members))
        return self.encode_inputs(ds.node_inputs(), emb_index, ds.observations, ds.stations)

    # -- forward -----------------------------------------------------------------

    def forward(self, enc, positions):
        """(mu, sigma) tensors of shape (B * S,) for the given day positions."""
        x = enc.x[positions]
        B, S, N, F = x.shape
        emb = T.embedding_lookup(self.embedding, enc.emb_index[positions].reshape(-1))
        h0 = T.concat([T.Tensor(x.reshape(-1, F)), emb], axis=1)
        if self.kind == "DRN":
            h = T.elu(self.mlp[0](h0))
            h = T.elu(self.mlp[1](h))
            return gaussian_output(self.mlp[2](h), self.loc, self.scale)
        src, dst, attr = enc.topology.batched(B)
        H = self.stack(h0, src, dst, attr)
        H = T.reshape(H, (B * S, N, H.shape[1]))
        return self.head(H)

    def predict_encoded(self, enc, batch_days=16):
        n_days, S = enc.x.shape[:2]
        mu = np.empty((n_days, S))
        sigma = np.empty((n_days, S))
        for start in range(0, n_days, batch_days):
            pos = np.arange(start, min(start + batch_days, n_days))
            m, s = self.forward(enc, pos)
            T.check_finite(m.data, "mu")
            T.check_finite(s.data, "sigma")
            mu[pos] = m.data.reshape(len(pos), S)
            sigma[pos] = s.data.reshape(len(pos), S)
        return mu, sigma

    def predict(self, ds):
        return GaussianPrediction(*self.predict_encoded(self.encode(ds)))

    # -- persistence ---------------------------------------------------------------

    def to_json(self):
        return {
            "config": asdict(self.config),
            "input_names": self.input_names,
            "station_ids": self.station_ids,
            "n_dynamic": self.n_dynamic,
            "normalizer": self.normalizer.to_json(),
            "loc": self.loc,
            "scale": self.scale,
            "n_train_members": self.n_train_members,
            "seed": self.seed,
            "params": T.params_to_json(self.params()),
        }

    @classmethod
    def from_json(cls, blob):
        model = cls(ModelConfig(**blob["config"]), blob["input_names"], blob["station_ids"], blob["n_dynamic"], blob["seed"])
        model.normalizer = Normalizer.from_json(blob["normalizer"])
        model.loc, model.scale = blob["loc"], blob["scale"]
        model.n_train_members = blob.get("n_train_members")
        if model.kind != "DRN":
            model.head.loc, model.head.scale = model.loc, model.scale
        T.params_from_json(blob["params"], model.params())
        return model


def build_model(config, train_ds, seed=0):
    model = Model(config, train_ds.input_names(), train_ds.station_ids, train_ds.n_features, seed=seed)
    model.fit_preprocessing(train_ds)
    return model


class EnsembleModel:
    """Average of the (mu, sigma) outputs of several trained models."""

    def __init__(self, members):
        if not members:
            raise ValueError("an ensemble needs at least one model")
        self.members = list(members)

    @property
    def kind(self):
        return self.members[0].kind

    def predict_inputs(self, x_raw, emb_index, obs, stations):
        mus, sigmas = [], []
        for m in self.members:
            mu, sigma = m.predict_encoded(m.encode_inputs(x_raw, emb_index, obs, stations))
            mus.append(mu)
            sigmas.append(sigma)
        return np.mean(mus, axis=0), np.mean(sigmas, axis=0)

    def predict(self, ds):
        preds = [m.predict(ds) for m in self.members]
        return GaussianPrediction(np.mean([p.mu for p in preds], axis=0), np.mean([p.sigma for p in preds], axis=0))


def group_sizes(n_test, n_train):
    """Member groups used to apply an ``n_train``-member model to ``n_test`` members.

    Groups of ``n_train - 1`` members, with the remainder folded into the last
    group; (51, 11) gives [10, 10, 10, 10, 11]. Fewer members than one group
    means a single group.
    """
    g = max(1, n_train - 1)
    if n_test <= g:
        return [n_test]
    k = n_test // g
    sizes = [g] * k
    sizes[-1] += n_test - g * k
    return sizes


def member_groups(n_test, n_train):
    bounds = np.cumsum([0] + group_sizes(n_test, n_train))
    return [np.arange(a, b) for a, b in zip(bounds[:-1], bounds[1:])]


def select_members(ds, members):
    from dataclasses import replace

    return replace(ds, features=ds.features[:, :, members])


def predict_grouped(model, ds, n_train):
    """Predict per member group and average the groups' (mu, sigma)."""
    groups = member_groups(ds.n_members, n_train)
    log.info("member groups %s", [len(g) for g in groups])
    preds = [model.predict(select_members(ds, g)) for g in groups]
    return GaussianPrediction(np.mean([p.mu for p in preds], axis=0), np.mean([p.sigma for p in preds], axis=0)), [
        len(g) for g in groups
    ]


def ens_prediction(ds):
    """Raw ensemble members for ``ENS`` (T, S, N) of the target feature."""
    return ds.features[..., 0]
