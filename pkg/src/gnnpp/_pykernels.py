"""Pure numpy/scipy fallback for the compiled graph kernels.

Every function matches the signature and semantics of its counterpart in
``_ckernels.pyx``. Results agree to rounding; summation order may differ.
"""

import math

import numpy as np
import scipy.sparse as sp


def _incidence(index, n):
    E = index.shape[0]
    return sp.csr_matrix((np.ones(E), (index, np.arange(E))), shape=(n, E))


def scatter_add(values, index, n):
    return np.asarray(_incidence(index, n) @ values)


def _segment_max(scores, index, n):
    mx = np.full((n, scores.shape[1]), -np.inf)
    np.maximum.at(mx, index, scores)
    return mx


def segment_softmax(scores, index, n):
    ex = np.exp(scores - _segment_max(scores, index, n)[index])
    den = scatter_add(ex, index, n)
    return ex / den[index]


def segment_softmax_backward(alpha, grad, index, n):
    dot = scatter_add(alpha * grad, index, n)
    return alpha * (grad - dot[index])


def _pre_activation(xt, xs, dist, we, src, dst):
    return xt[dst] + xs[src] + dist[:, None] * we[None, :]


def gatv2_scores(xt, xs, dist, we, att, src, dst, slope):
    H, C = att.shape
    z = _pre_activation(xt, xs, dist, we, src, dst)
    act = np.where(z < 0.0, z * slope, z)
    return (act.reshape(-1, H, C) * att[None]).sum(axis=2)


def gatv2_scores_backward(grad, xt, xs, dist, we, att, src, dst, slope):
    H, C = att.shape
    E = src.shape[0]
    z = _pre_activation(xt, xs, dist, we, src, dst)
    neg = z < 0.0
    act = np.where(neg, z * slope, z)
    g3 = grad[:, :, None]
    g_att = (g3 * act.reshape(E, H, C)).sum(axis=0)
    dz = (g3 * att[None]).reshape(E, H * C)
    dz = np.where(neg, dz * slope, dz)
    g_xt = scatter_add(dz, dst, xt.shape[0])
    g_xs = scatter_add(dz, src, xs.shape[0])
    g_we = dist @ dz
    return g_xt, g_xs, g_we, g_att


def attend(alpha, v, src, dst, n):
    H = alpha.shape[1]
    C = v.shape[1] // H
    msg = (alpha[:, :, None] * v[src].reshape(-1, H, C)).reshape(-1, H * C)
    return scatter_add(msg, dst, n)


def attend_backward(grad, alpha, v, src, dst):
    H = alpha.shape[1]
    C = v.shape[1] // H
    gd = grad[dst].reshape(-1, H, C)
    g_alpha = (gd * v[src].reshape(-1, H, C)).sum(axis=2)
    g_msg = (alpha[:, :, None] * gd).reshape(-1, H * C)
    g_v = scatter_add(g_msg, src, v.shape[0])
    return g_alpha, g_v


def set_sum(x):
    """Correctly rounded sum over axis 1 of a (G, N, D) array."""
    G, N, D = x.shape
    cols = np.ascontiguousarray(x.transpose(0, 2, 1)).reshape(G * D, N)
    out = np.fromiter((math.fsum(row) for row in cols.tolist()), dtype=np.float64, count=G * D)
    return out.reshape(G, D)
