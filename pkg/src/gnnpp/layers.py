"""Graph attention blocks, the residual stack and the Deep Set output head."""

from __future__ import annotations

import numpy as np

from . import tensor as T

SIGMA_FLOOR = 1e-6


class Dense:
    def __init__(self, rng, fan_in, fan_out, name, bias=True):
        self.W, b = T.init_dense(rng, fan_in, fan_out, name)
        self.b = b if bias else None

    def __call__(self, x, rowwise=False):
        return T.dense(x, self.W, self.b, rowwise=rowwise)

    def params(self):
        return [self.W] if self.b is None else [self.W, self.b]


class GATLayer:
    """Multi-head GATv2 attention with a scalar edge attribute.

    For edge ``j -> i`` and head ``h``::

        e_ij = att_h . leaky_relu(Wt_h x_i + Ws_h x_j + we_h * edge_ij)
        alpha_ij = softmax of e_ij over the edges entering i
        m_i = concat_h sum_j alpha_ij (U_h x_j)

    and the layer output is ``mix(m_i) + gat_update(x_i)``. The edge attribute
    enters the score only.
    """

    def __init__(self, rng, in_dim, out_dim, heads, negative_slope=0.2, name="gat"):
        if heads < 1:
            raise ValueError("need at least one attention head")
        self.in_dim, self.out_dim, self.heads = in_dim, out_dim, heads
        # per-head width rounds up so any (out_dim, heads) pair works; the
        # concatenation (heads * channels wide) is mixed back to out_dim
        self.channels = -(-out_dim // heads)
        cat = heads * self.channels
        self.negative_slope = negative_slope
        bound = 1.0 / np.sqrt(in_dim)
        self.w_target = T.Parameter(rng.uniform(-bound, bound, (in_dim, cat)), name=f"{name}.w_target")
        self.w_source = T.Parameter(rng.uniform(-bound, bound, (in_dim, cat)), name=f"{name}.w_source")
        self.w_edge = T.Parameter(rng.uniform(-1.0, 1.0, cat), name=f"{name}.w_edge")
        cb = 1.0 / np.sqrt(self.channels)
        self.att = T.Parameter(rng.uniform(-cb, cb, (heads, self.channels)), name=f"{name}.att")
        self.value = T.Parameter(rng.uniform(-bound, bound, (in_dim, cat)), name=f"{name}.value")
        self.mix = Dense(rng, cat, out_dim, f"{name}.mix")
        self.gat_update = T.Parameter(rng.uniform(-bound, bound, (in_dim, out_dim)), name=f"{name}.gat_update")
        self.last_alpha = None

    def __call__(self, H, src, dst, edge_attr):
        n = H.shape[0]
        if n and np.bincount(dst, minlength=n).min() == 0:
            raise AssertionError("every node needs at least one incoming edge (self loops are always present)")
        xt = T.matmul(H, self.w_target)
        xs = T.matmul(H, self.w_source)
        scores = T.gatv2_scores(xt, xs, edge_attr, self.w_edge, self.att, src, dst, self.negative_slope)
        alpha = T.segment_softmax(scores, dst, n)
        self.last_alpha = alpha.data
        agg = T.attend(alpha, T.matmul(H, self.value), src, dst, n)
        return self.mix(agg) + T.matmul(H, self.gat_update)

    def params(self):
        return [self.w_target, self.w_source, self.w_edge, self.att, self.value, *self.mix.params(), self.gat_update]


class GnnStack:
    """Input projection followed by K residual blocks ``H <- H + elu(GAT(H))``."""

    def __init__(self, rng, in_dim, hidden, heads, n_blocks, name="gnn"):
        if n_blocks < 1:
            raise ValueError("need at least one GNN block")
        self.proj = Dense(rng, in_dim, hidden, f"{name}.proj")
        self.blocks = [GATLayer(rng, hidden, hidden, heads, name=f"{name}.block{k}") for k in range(n_blocks)]

    def __call__(self, H0, src, dst, edge_attr):
        H = self.proj(H0)
        for block in self.blocks:
            H = H + T.elu(block(H, src, dst, edge_attr))
        return H

    def params(self):
        out = self.proj.params()
        for block in self.blocks:
            out += block.params()
        return out


class DeepSetHead:
    """``(mu, sigma) = rho(mean_n ds_phi(h_n))`` per station.

    The member mean is exactly rounded and the dense layers are row-stable,
    so the output is bitwise invariant to member order and to duplicating the
    member set. ``loc``/``scale`` map the raw outputs to target units.
    """

    def __init__(self, rng, in_dim, hidden, n_phi=3, n_rho=2, loc=0.0, scale=1.0, name="head"):
        self.ds_phi = [Dense(rng, in_dim if k == 0 else hidden, hidden, f"{name}.phi{k}") for k in range(n_phi)]
        self.rho = [Dense(rng, hidden, hidden, f"{name}.rho{k}") for k in range(n_rho - 1)]
        self.rho.append(Dense(rng, hidden, 2, f"{name}.rho{n_rho - 1}"))
        self.loc, self.scale = float(loc), float(scale)

    def raw(self, H):
        """(G, N, D) member features -> (G, 2) unconstrained outputs."""
        for layer in self.ds_phi:
            H = T.elu(layer(H, rowwise=True))
        z = T.set_mean(H)
        for layer in self.rho[:-1]:
            z = T.elu(layer(z, rowwise=True))
        return self.rho[-1](z, rowwise=True)

    def __call__(self, H):
        return gaussian_output(self.raw(H), self.loc, self.scale)

    def params(self):
        return [p for layer in self.ds_phi + self.rho for p in layer.params()]


def gaussian_output(raw, loc, scale):
    """Split (G, 2) raw outputs into mu = loc + scale * r0, sigma = scale * softplus(r1) + floor."""
    mu = T.take(raw, 0, axis=1) * scale + loc
    sigma = T.softplus(T.take(raw, 1, axis=1)) * scale + SIGMA_FLOOR
    return mu, sigma
