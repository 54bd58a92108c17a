"""Full predictor: atom embeddings, stacked conv+gate layers, basis
expansion at query points, and the optional scalar residual correction.

The degree-l, channel-n feature of an atom doubles as the coefficient of
basis function psi_{nlm} centered on that atom, so the network output is
read off directly as a coefficient field and expanded with the shared
radial table. Densities are in electrons per Bohr^3 throughout.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import basis, layers, so3
from .errors import DomainError, NonFiniteError

__all__ = [
    "ModelConfig",
    "ModelParams",
    "NMAEAccumulator",
    "init_params",
    "init_features",
    "features_to_coeffs",
    "coeff_grad_to_features",
    "forward_trace",
    "predict_density",
    "loss_l2",
    "nmae",
    "count_parameters",
    "save_checkpoint",
    "load_checkpoint",
    "equivariance_report",
]

_MAGIC = b"INFGCN1\n"


@dataclass(frozen=True)
class ModelConfig:
    l_max: int = 7
    channels: int = 16
    n_layers: int = 3
    cutoff: float = 3.0
    vocab: int = 5
    residual: bool = True
    mode: str = "channel"  # "channel" or "fc" tensor product
    act0: str = "silu"
    act_l: str = "silu"
    r_min: float = 0.5
    r_max: float = 5.0
    spacing: str = "linear"

    def __post_init__(self):
        if min(self.l_max, self.channels, self.n_layers, self.vocab) < 0:
            raise DomainError("config integers must be non-negative")
        if self.n_layers < 1 or self.channels < 1 or self.vocab < 1:
            raise DomainError("config integers must be positive")
        if self.cutoff <= 0.0:
            raise DomainError("cutoff must be positive")

    def basis_spec(self):
        # feature channels double as radial-basis indices
        return basis.RadialBasisSpec(
            basis.make_exponents(self.r_min, self.r_max, self.channels,
                                 self.spacing),
            self.l_max)


@dataclass
class ModelParams:
    config: ModelConfig
    embed: np.ndarray  # (vocab, channels), degree-0 initial features
    convs: list
    residual: object  # ResidualParams or None

    def named_arrays(self):
        out = [("embed", self.embed)]
        for i, cp in enumerate(self.convs):
            out.extend(cp.named_arrays(f"conv{i}"))
        if self.residual is not None:
            out.extend(self.residual.named_arrays("residual"))
        return out


def init_params(config, seed=0, zero_heads=True):
    rng = np.random.default_rng(seed)
    embed = rng.standard_normal((config.vocab, config.channels))
    convs = [layers.init_conv_layer(rng, config.l_max, config.channels,
                                    config.cutoff, mode=config.mode,
                                    zero_head=zero_heads)
             for _ in range(config.n_layers)]
    res = (layers.init_residual_layer(rng, config.l_max, config.channels,
                                      config.cutoff, zero_head=zero_heads)
           if config.residual else None)
    return ModelParams(config=config, embed=embed, convs=convs, residual=res)


def init_features(params, atom_types):
    """Isotropic initial tensors: embeddings on degree 0, zeros above."""
    types = np.asarray(atom_types, dtype=int)
    cfg = params.config
    if np.any(types < 0) or np.any(types >= cfg.vocab):
        raise DomainError("atom type outside the embedding vocabulary")
    f = layers.NodeFeatures.zeros(types.size, cfg.l_max, cfg.channels)
    f.blocks[0][:, :, 0] = params.embed[types]
    return f


def features_to_coeffs(feats):
    """(U, channels, n_sh) coefficient array from per-degree blocks."""
    n_sh = so3.num_sh(feats.l_max)
    out = np.zeros((feats.n_nodes, feats.channels, n_sh))
    for l in range(feats.l_max + 1):
        out[:, :, so3.block_slice(l)] = feats.blocks[l]
    return out


def coeff_grad_to_features(grad_coeffs, l_max, channels):
    blocks = {l: grad_coeffs[:, :, so3.block_slice(l)].copy()
              for l in range(l_max + 1)}
    return layers.NodeFeatures(l_max, channels, blocks)


def _check_finite(arrs, op_name):
    for a in arrs:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"non-finite values produced by {op_name}")


def forward_trace(params, graph, queries, counters=None):
    """Run the network, keeping the intermediates the adjoint pass needs."""
    cfg = params.config
    queries = np.asarray(queries, dtype=float)
    if not np.all(np.isfinite(queries)):
        raise DomainError("queries must be finite")
    f = init_features(params, graph.atom_type)
    pre_conv, pre_gate = [], []
    for i, cp in enumerate(params.convs):
        pre_conv.append(f)
        h = layers.conv_forward(graph, f, cp, counters)
        _check_finite(h.blocks.values(), f"conv_forward[{i}]")
        pre_gate.append(h)
        f = layers.gate_forward(h, cfg.act0, cfg.act_l)
    coeffs = features_to_coeffs(f)
    spec = cfg.basis_spec()
    dens = basis.expand_density(spec, coeffs, graph.atom_coord, queries)
    _check_finite([dens], "expand_density")
    if params.residual is not None:
        z = layers.residual_forward(queries, graph.atom_coord, f,
                                    params.residual, counters)
        _check_finite([z], "residual_forward")
        dens = dens + z
    trace = {"pre_conv": pre_conv, "pre_gate": pre_gate, "final": f,
             "coeffs": coeffs, "queries": queries, "spec": spec}
    return dens, trace


def predict_density(params, graph, queries, counters=None):
    dens, _ = forward_trace(params, graph, queries, counters)
    return dens


def loss_l2(pred, target, volume_weight=1.0):
    """Weighted squared-error loss, a Monte-Carlo estimate of the L2 norm."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise DomainError("prediction and target lengths differ")
    w = np.asarray(volume_weight, dtype=float)
    return float(np.sum(w * (pred - target) ** 2))


def nmae(pred, target):
    """Sum |pred - target| / sum |target|, reported as a percentage."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise DomainError("prediction and target lengths differ")
    denom = float(np.sum(np.abs(target)))
    if denom == 0.0:
        raise DomainError("NMAE undefined for an all-zero target")
    return 100.0 * float(np.sum(np.abs(pred - target))) / denom


class NMAEAccumulator:
    """Streaming NMAE over partitioned batches.

    Accumulating the two sums batch by batch makes the final value
    independent of how the grid was partitioned.
    """

    def __init__(self):
        self.abs_err = 0.0
        self.abs_target = 0.0

    def add(self, pred, target):
        pred = np.asarray(pred, dtype=float)
        target = np.asarray(target, dtype=float)
        if pred.shape != target.shape:
            raise DomainError("prediction and target lengths differ")
        self.abs_err += float(np.sum(np.abs(pred - target)))
        self.abs_target += float(np.sum(np.abs(target)))
        return self

    def value(self):
        if self.abs_target == 0.0:
            raise DomainError("NMAE undefined for an all-zero target")
        return 100.0 * self.abs_err / self.abs_target


def count_parameters(params):
    return sum(a.size for _, a in params.named_arrays())


def save_checkpoint(params, path):
    """Magic line, JSON header, then a little-endian float64 blob."""
    arrays = params.named_arrays()
    header = {
        "config": asdict(params.config),
        "arrays": [[name, list(a.shape)] for name, a in arrays],
        "exponents": params.config.basis_spec().exponents.tolist(),
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise DomainError("not a model checkpoint (bad magic)")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
        cfg = ModelConfig(**header["config"])
        params = init_params(cfg, seed=0, zero_heads=True)
        want = [[name, list(a.shape)] for name, a in params.named_arrays()]
        if want != [[n, list(s)] for n, s in header["arrays"]]:
            raise DomainError("checkpoint layout does not match its config")
        for _, a in params.named_arrays():
            raw = fh.read(a.size * 8)
            if len(raw) != a.size * 8:
                raise DomainError("checkpoint truncated")
            a[...] = np.frombuffer(raw, dtype="<f8").reshape(a.shape)
        if fh.read(1):
            raise DomainError("trailing bytes after checkpoint blob")
    return params


def equivariance_report(params, graph, queries, rotations=None, seed=0,
                        center=None):
    """Two-branch rotation comparison; returns the worst relative deviation.

    Each rotation is applied to atoms and queries about ``center`` (default:
    the centroid of the query cloud); the rotated-branch prediction is
    compared against the unrotated one pointwise.
    """
    if rotations is None:
        rng = np.random.default_rng(seed)
        rotations = [so3.random_rotation(rng) for _ in range(20)]
    queries = np.asarray(queries, dtype=float)
    c = (queries.mean(axis=0) if center is None
         else np.asarray(center, dtype=float))
    base = predict_density(params, graph, queries)
    scale = max(float(np.abs(base).max()), 1e-12)
    worst = 0.0
    for R in rotations:
        coords_r = c + (graph.atom_coord - c) @ R.T
        graph_r = type(graph).from_coords(graph.atom_type, coords_r,
                                          graph.cutoff)
        queries_r = c + (queries - c) @ R.T
        rot = predict_density(params, graph_r, queries_r)
        worst = max(worst, float(np.abs(rot - base).max()) / scale)
    return {"n_rotations": len(rotations), "max_rel_deviation": worst}
