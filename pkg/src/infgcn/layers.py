"""Equivariant network layers: radial nets, tensor-product convolution,
norm-gated nonlinearity, and the scalar residual layer.

Features live on graph nodes as one block per degree, ``blocks[l]`` of shape
(n_nodes, channels, 2l+1). The convolution couples degree k features into
degree l messages through every admissible filter degree J with
|l - k| <= J <= l + k; the kernel for one edge is

    W^{lk}(r) = sum_J phi_J^{lk}(|r|) sum_M Y_J^M(rhat) Q_{JM}^{lk}

with Q the real Clebsch-Gordan blocks from so3. Radial nets see only |r|,
so the angular structure is carried entirely by the harmonics and the
coupling coefficients; that is what makes the layer equivariant.

The forward pass is staged so multiplies can be metered per stage:
``assembly`` builds the channel-free G_J = sum_M Y Q blocks, ``mixing``
combines them with the per-path radial scalars, ``matvec`` applies the
assembled kernel to the gathered neighbor features. The matvec stage costs
exactly |E| * C * (L+1)^4 multiplies, the compressed-vector budget.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import so3
from .errors import DomainError

__all__ = [
    "NodeFeatures",
    "OpCounters",
    "RadialNetParams",
    "ConvLayerParams",
    "ResidualParams",
    "make_paths",
    "init_radial_net",
    "init_conv_layer",
    "init_residual_layer",
    "radial_forward",
    "radial_dr",
    "radial_backward",
    "conv_forward",
    "conv_backward",
    "gate_forward",
    "gate_backward",
    "residual_forward",
    "residual_backward",
    "silu",
]

_EPS_NORM = 1e-12  # inside the gate's sqrt, keeps the derivative finite at 0
_EPS_EDGE = 1e-12  # shorter displacements have no usable direction


def make_paths(l_max):
    """All coupling paths (l, k, J), lexicographically ordered."""
    out = []
    for l in range(l_max + 1):
        for k in range(l_max + 1):
            for J in range(abs(l - k), l + k + 1):
                out.append((l, k, J))
    return tuple(out)


@dataclass
class NodeFeatures:
    """Per-node spherical-tensor features, uniform channel count."""

    l_max: int
    channels: int
    blocks: dict

    @staticmethod
    def zeros(n_nodes, l_max, channels):
        return NodeFeatures(l_max, channels, {
            l: np.zeros((n_nodes, channels, 2 * l + 1))
            for l in range(l_max + 1)})

    @property
    def n_nodes(self):
        return self.blocks[0].shape[0]

    def copy(self):
        return NodeFeatures(self.l_max, self.channels,
                            {l: b.copy() for l, b in self.blocks.items()})

    def rotate(self, R):
        """Apply the degree-l rotation matrix to every block."""
        D = so3.wigner_blocks(self.l_max, R)
        return NodeFeatures(self.l_max, self.channels,
                            {l: self.blocks[l] @ D[l].T
                             for l in range(self.l_max + 1)})

    def flat(self):
        return np.concatenate([b.reshape(-1) for _, b in
                               sorted(self.blocks.items())])

    def max_abs_diff(self, other):
        return max(np.abs(self.blocks[l] - other.blocks[l]).max()
                   for l in self.blocks)


@dataclass
class OpCounters:
    """Multiply counters keyed by stage name."""

    counts: dict = field(default_factory=dict)

    def add(self, key, n):
        self.counts[key] = self.counts.get(key, 0) + int(n)

    def total(self):
        return sum(self.counts.values())


def _sigmoid(x):
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x):
    x = np.asarray(x, dtype=float)
    return x * _sigmoid(x)


def _act(name):
    if name == "silu":
        return lambda x: x * _sigmoid(x)
    if name == "identity":
        return lambda x: x
    raise DomainError(f"unknown activation {name!r}")


def _act_grad(name):
    if name == "silu":
        def g(x):
            s = _sigmoid(x)
            return s * (1.0 + x * (1.0 - s))
        return g
    if name == "identity":
        return lambda x: np.ones_like(x)
    raise DomainError(f"unknown activation {name!r}")


# ---------------------------------------------------------------------------
# radial nets


@dataclass
class RadialNetParams:
    centers: np.ndarray  # (64,), fixed
    width: float         # fixed
    cutoff: float
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    head_w: np.ndarray
    head_b: np.ndarray

    @property
    def out_dim(self):
        return self.head_b.size

    def named_arrays(self, prefix):
        """Trainable arrays only; the embedding is a fixed featurizer."""
        return [(prefix + ".w1", self.w1), (prefix + ".b1", self.b1),
                (prefix + ".w2", self.w2), (prefix + ".b2", self.b2),
                (prefix + ".head_w", self.head_w),
                (prefix + ".head_b", self.head_b)]


def _glorot(rng, shape):
    bound = math.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-bound, bound, size=shape)


def init_radial_net(rng, cutoff, out_dim, n_embed=64, hidden=128,
                    zero_head=True):
    centers = np.linspace(0.0, cutoff, n_embed)
    width = centers[1] - centers[0]
    head_w = (np.zeros((hidden, out_dim)) if zero_head
              else 0.01 * _glorot(rng, (hidden, out_dim)))
    return RadialNetParams(
        centers=centers, width=float(width), cutoff=float(cutoff),
        w1=_glorot(rng, (n_embed, hidden)), b1=np.zeros(hidden),
        w2=_glorot(rng, (hidden, hidden)), b2=np.zeros(hidden),
        head_w=head_w, head_b=np.zeros(out_dim))


def _embed(params, r):
    return np.exp(-0.5 * ((r[:, None] - params.centers) / params.width) ** 2)


def radial_forward(params, r, counters=None):
    """Per-path scalars phi(r) for a batch of distances, shape (E, out_dim)."""
    r = np.asarray(r, dtype=float)
    if np.any(r < 0.0) or np.any(r > params.cutoff + 1e-9):
        raise DomainError("distance outside [0, cutoff]")
    e = _embed(params, r)
    h1 = silu(e @ params.w1 + params.b1)
    h2 = silu(h1 @ params.w2 + params.b2)
    out = h2 @ params.head_w + params.head_b
    if counters is not None:
        counters.add("radial", e.size * params.w1.shape[1]
                     + h1.size * params.w2.shape[1]
                     + h2.size * params.head_w.shape[1])
    return out


def radial_dr(params, r):
    """Analytic d phi / d r, same shape as radial_forward output."""
    r = np.asarray(r, dtype=float)
    e = _embed(params, r)
    de = e * (-(r[:, None] - params.centers) / params.width ** 2)
    a1 = e @ params.w1 + params.b1
    h1 = silu(a1)
    dh1 = (de @ params.w1) * _act_grad("silu")(a1)
    a2 = h1 @ params.w2 + params.b2
    dh2 = (dh1 @ params.w2) * _act_grad("silu")(a2)
    return dh2 @ params.head_w


def radial_backward(params, r, grad_out):
    """Gradients of sum(grad_out * phi) with respect to trainable arrays."""
    r = np.asarray(r, dtype=float)
    e = _embed(params, r)
    a1 = e @ params.w1 + params.b1
    h1 = silu(a1)
    a2 = h1 @ params.w2 + params.b2
    h2 = silu(a2)
    g_head_w = h2.T @ grad_out
    g_head_b = grad_out.sum(axis=0)
    g_h2 = grad_out @ params.head_w.T
    g_a2 = g_h2 * _act_grad("silu")(a2)
    g_w2 = h1.T @ g_a2
    g_b2 = g_a2.sum(axis=0)
    g_h1 = g_a2 @ params.w2.T
    g_a1 = g_h1 * _act_grad("silu")(a1)
    g_w1 = e.T @ g_a1
    g_b1 = g_a1.sum(axis=0)
    return {"w1": g_w1, "b1": g_b1, "w2": g_w2, "b2": g_b2,
            "head_w": g_head_w, "head_b": g_head_b}


# ---------------------------------------------------------------------------
# tensor-product convolution


@dataclass
class ConvLayerParams:
    l_max: int
    channels: int
    cutoff: float
    mode: str  # "channel" or "fc"
    paths: tuple
    radial: RadialNetParams
    self_w: np.ndarray  # (l_max+1, channels)

    def named_arrays(self, prefix):
        return (self.radial.named_arrays(prefix + ".radial")
                + [(prefix + ".self_w", self.self_w)])


def init_conv_layer(rng, l_max, channels, cutoff, mode="channel",
                    zero_head=True):
    if mode not in ("channel", "fc"):
        raise DomainError(f"unknown conv mode {mode!r}")
    paths = make_paths(l_max)
    per_path = channels if mode == "channel" else channels * channels
    radial = init_radial_net(rng, cutoff, len(paths) * per_path,
                             zero_head=zero_head)
    return ConvLayerParams(
        l_max=l_max, channels=channels, cutoff=float(cutoff), mode=mode,
        paths=paths, radial=radial,
        self_w=np.ones((l_max + 1, channels)))


def _check_layout(feats, l_max, channels):
    if feats.l_max != l_max or feats.channels != channels:
        raise DomainError("feature layout does not match layer parameters")


def _edge_geometry(graph):
    vec = graph.edge_vec
    r = np.sqrt(np.einsum("ex,ex->e", vec, vec))
    if np.any(r < _EPS_EDGE):
        raise DomainError("coincident atoms produce directionless edges")
    return r, vec / r[:, None]


def _phi_per_path(params, r, counters=None):
    phi = radial_forward(params.radial, r, counters)
    n_edge = r.shape[0]
    if params.mode == "channel":
        return phi.reshape(n_edge, len(params.paths), params.channels)
    return phi.reshape(n_edge, len(params.paths),
                       params.channels, params.channels)


def _coupling_blocks(paths, Y, counters=None):
    """Channel-free G_J^{lk}[e] = sum_M Y_J^M(rhat_e) Q_{JM}^{lk}."""
    out = {}
    for (l, k, J) in paths:
        Q = so3.cg_table(l, k, J).dense  # (2J+1, 2l+1, 2k+1)
        Yb = Y[:, so3.block_slice(J)]
        out[(l, k, J)] = np.einsum("eM,Mab->eab", Yb, Q)
        if counters is not None:
            counters.add("assembly", Yb.shape[0] * Q.size)
    return out


def conv_forward(graph, feats, params, counters=None):
    """One message-passing step: self-interaction plus neighbor messages."""
    _check_layout(feats, params.l_max, params.channels)
    L, C = params.l_max, params.channels
    n = feats.n_nodes
    out = NodeFeatures.zeros(n, L, C)
    for l in range(L + 1):
        out.blocks[l] += params.self_w[l][None, :, None] * feats.blocks[l]
    if graph.n_edges == 0:
        return out
    r, rhat = _edge_geometry(graph)
    Y = so3.eval_real_sh(2 * L, rhat, check_unit=False)
    phi = _phi_per_path(params, r, counters)
    G = _coupling_blocks(params.paths, Y, counters)
    src, dst = graph.edge_src, graph.edge_dst
    for l in range(L + 1):
        msg = np.zeros((graph.n_edges, C, 2 * l + 1))
        for k in range(L + 1):
            shape = ((graph.n_edges, C, 2 * l + 1, 2 * k + 1)
                     if params.mode == "channel" else
                     (graph.n_edges, C, C, 2 * l + 1, 2 * k + 1))
            W = np.zeros(shape)
            for p, (pl, pk, J) in enumerate(params.paths):
                if (pl, pk) != (l, k):
                    continue
                g = G[(l, k, J)]
                if params.mode == "channel":
                    W += phi[:, p, :, None, None] * g[:, None, :, :]
                else:
                    W += phi[:, p, :, :, None, None] * g[:, None, None, :, :]
                if counters is not None:
                    counters.add("mixing", phi[:, p].size * g[0].size)
            fk = feats.blocks[k][dst]
            if params.mode == "channel":
                msg += np.einsum("ecab,ecb->eca", W, fk)
            else:
                msg += np.einsum("ecdab,edb->eca", W, fk)
            if counters is not None:
                cc = C if params.mode == "channel" else C * C
                counters.add("matvec", fk.shape[0] * cc * (2 * l + 1) * (2 * k + 1))
        np.add.at(out.blocks[l], src, msg)
    return out


def conv_backward(graph, feats, params, grad_out):
    """Adjoint of conv_forward: gradients for features and parameters."""
    _check_layout(feats, params.l_max, params.channels)
    L, C = params.l_max, params.channels
    grad_f = NodeFeatures.zeros(feats.n_nodes, L, C)
    grad_self = np.zeros_like(params.self_w)
    for l in range(L + 1):
        g = grad_out.blocks[l]
        grad_f.blocks[l] += params.self_w[l][None, :, None] * g
        grad_self[l] = np.einsum("nca,nca->c", g, feats.blocks[l])
    if graph.n_edges == 0:
        # empty sums in radial_backward already yield zero gradients
        return grad_f, {"self_w": grad_self, "radial": radial_backward(
            params.radial, np.zeros(0),
            np.zeros((0, params.radial.out_dim)))}
    r, rhat = _edge_geometry(graph)
    Y = so3.eval_real_sh(2 * L, rhat, check_unit=False)
    phi = _phi_per_path(params, r)
    G = _coupling_blocks(params.paths, Y)
    src, dst = graph.edge_src, graph.edge_dst
    grad_phi = np.zeros_like(phi)
    for l in range(L + 1):
        gmsg = grad_out.blocks[l][src]  # (E, C, 2l+1)
        for k in range(L + 1):
            fk = feats.blocks[k][dst]
            acc_fk = np.zeros_like(fk)
            for p, (pl, pk, J) in enumerate(params.paths):
                if (pl, pk) != (l, k):
                    continue
                g = G[(l, k, J)]
                if params.mode == "channel":
                    grad_phi[:, p] = np.einsum("eca,ecb,eab->ec", gmsg, fk, g)
                    acc_fk += phi[:, p, :, None] * np.einsum(
                        "eca,eab->ecb", gmsg, g)
                else:
                    grad_phi[:, p] = np.einsum("eca,edb,eab->ecd", gmsg, fk, g)
                    acc_fk += np.einsum("ecd,eca,eab->edb",
                                        phi[:, p], gmsg, g)
            np.add.at(grad_f.blocks[k], dst, acc_fk)
    grad_radial = radial_backward(
        params.radial, r, grad_phi.reshape(graph.n_edges, -1))
    return grad_f, {"self_w": grad_self, "radial": grad_radial}


# ---------------------------------------------------------------------------
# gate nonlinearity


def gate_forward(feats, act0="silu", act_l="silu"):
    """Scalar activation on degree 0, norm gating on higher degrees.

    ``act_l="identity"`` bypasses the gate entirely (multiplier one), so the
    layer reduces to the identity operator on every degree.
    """
    s0 = _act(act0)
    out = {0: s0(feats.blocks[0])}
    for l in range(1, feats.l_max + 1):
        f = feats.blocks[l]
        if act_l == "identity":
            out[l] = f.copy()
            continue
        nrm = np.sqrt(np.einsum("nca,nca->nc", f, f) + _EPS_NORM)
        out[l] = _act(act_l)(nrm)[:, :, None] * f
    return NodeFeatures(feats.l_max, feats.channels, out)


def gate_backward(feats, grad_out, act0="silu", act_l="silu"):
    g0 = _act_grad(act0)
    out = {0: g0(feats.blocks[0]) * grad_out.blocks[0]}
    for l in range(1, feats.l_max + 1):
        f = feats.blocks[l]
        g = grad_out.blocks[l]
        if act_l == "identity":
            out[l] = g.copy()
            continue
        nrm = np.sqrt(np.einsum("nca,nca->nc", f, f) + _EPS_NORM)
        dot = np.einsum("nca,nca->nc", g, f)
        out[l] = (_act(act_l)(nrm)[:, :, None] * g
                  + (_act_grad(act_l)(nrm) * dot / nrm)[:, :, None] * f)
    return NodeFeatures(feats.l_max, feats.channels, out)


# ---------------------------------------------------------------------------
# residual operator layer


@dataclass
class ResidualParams:
    l_max: int
    channels: int
    cutoff: float
    radial: RadialNetParams

    def named_arrays(self, prefix):
        return self.radial.named_arrays(prefix + ".radial")


def init_residual_layer(rng, l_max, channels, cutoff, zero_head=True):
    radial = init_radial_net(rng, cutoff, (l_max + 1) * channels,
                             zero_head=zero_head)
    return ResidualParams(l_max=l_max, channels=channels,
                          cutoff=float(cutoff), radial=radial)


def _residual_edges(queries, coords, cutoff):
    """Query-atom pairs within the cutoff. Returns (q_idx, v_idx, r, rhat).

    A query sitting exactly on an atom keeps its isotropic k = 0 term but
    contributes nothing through k >= 1, where no direction exists; the
    direction is set to an arbitrary unit vector and the caller masks it.
    """
    diff = coords[None, :, :] - queries[:, None, :]
    dist = np.sqrt(np.einsum("qvx,qvx->qv", diff, diff))
    qi, vi = np.nonzero(dist <= cutoff)
    r = dist[qi, vi]
    degenerate = r < _EPS_EDGE
    safe = np.where(degenerate[:, None], np.array([0.0, 0.0, 1.0]),
                    diff[qi, vi] / np.maximum(r, _EPS_EDGE)[:, None])
    return qi, vi, r, safe, degenerate


def residual_forward(queries, coords, feats, params, counters=None):
    """Invariant scalar z per query from neighborhood feature contraction."""
    queries = np.asarray(queries, dtype=float)
    coords = np.asarray(coords, dtype=float)
    _check_layout(feats, params.l_max, params.channels)
    z = np.zeros(queries.shape[0])
    qi, vi, r, rhat, degen = _residual_edges(queries, coords, params.cutoff)
    if qi.size == 0:
        return z
    Y = so3.eval_real_sh(params.l_max, rhat, check_unit=False)
    phi = radial_forward(params.radial, r, counters).reshape(
        r.size, params.l_max + 1, params.channels)
    for k in range(params.l_max + 1):
        Q = so3.cg_table(0, k, k).dense[:, 0, :]  # (2k+1, 2k+1)
        t = Y[:, so3.block_slice(k)] @ Q  # (E, 2k+1)
        if k > 0:
            t[degen] = 0.0
        contrib = np.einsum("ec,ecb,eb->e", phi[:, k], feats.blocks[k][vi], t)
        np.add.at(z, qi, contrib)
        if counters is not None:
            counters.add("residual", t.size * (params.channels + 1))
    return z


def residual_backward(queries, coords, feats, params, grad_z):
    """Adjoint of residual_forward for features and radial parameters."""
    queries = np.asarray(queries, dtype=float)
    coords = np.asarray(coords, dtype=float)
    grad_f = NodeFeatures.zeros(feats.n_nodes, params.l_max, params.channels)
    qi, vi, r, rhat, degen = _residual_edges(queries, coords, params.cutoff)
    zero_phi = np.zeros((r.size, params.radial.out_dim))
    if qi.size == 0:
        return grad_f, {"radial": radial_backward(params.radial, r, zero_phi)}
    Y = so3.eval_real_sh(params.l_max, rhat, check_unit=False)
    phi = radial_forward(params.radial, r).reshape(
        r.size, params.l_max + 1, params.channels)
    ge = grad_z[qi]
    grad_phi = np.zeros_like(phi)
    for k in range(params.l_max + 1):
        Q = so3.cg_table(0, k, k).dense[:, 0, :]
        t = Y[:, so3.block_slice(k)] @ Q
        if k > 0:
            t[degen] = 0.0
        fk = feats.blocks[k][vi]
        grad_phi[:, k] = ge[:, None] * np.einsum("ecb,eb->ec", fk, t)
        gfk = (ge[:, None] * phi[:, k])[:, :, None] * t[:, None, :]
        np.add.at(grad_f.blocks[k], vi, gfk)
    grad_radial = radial_backward(params.radial, r,
                                  grad_phi.reshape(r.size, -1))
    return grad_f, {"radial": grad_radial}
