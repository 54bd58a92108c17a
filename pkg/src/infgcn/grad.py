"""Reverse-mode gradients and desk-scale optimizers.

Every differentiable operation in the package carries a hand-written adjoint
(`layers.conv_backward`, `layers.gate_backward`, `layers.residual_backward`,
`basis.expand_density_backward`); this module chains them along the forward
trace and exposes the result through a flat parameter registry, plus a
finite-difference verifier and the two optimizers used for training.

There is no tape. The operation set is small and closed, so the chain is
written out explicitly in `loss_and_grad`.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import basis, layers, model
from .errors import DomainError, NonFiniteError


class ParamRegistry:
    """Ordered view of a model's trainable arrays as one flat vector.

    Order is fixed by ``ModelParams.named_arrays`` at construction; flatten
    and unflatten round-trip bitwise.
    """

    def __init__(self, params):
        self.names = []
        self.shapes = []
        self.offsets = []
        total = 0
        for name, arr in params.named_arrays():
            self.names.append(name)
            self.shapes.append(arr.shape)
            self.offsets.append(total)
            total += arr.size
        self.n_params = total

    def flatten(self, params):
        return np.concatenate(
            [np.asarray(a, dtype=float).ravel()
             for _, a in params.named_arrays()])

    def flatten_grads(self, grads):
        parts = []
        for name, shape in zip(self.names, self.shapes):
            g = grads[name]
            if g.shape != shape:
                raise DomainError(
                    f"gradient for {name} has shape {g.shape}, want {shape}")
            parts.append(g.ravel())
        return np.concatenate(parts)

    def unflatten(self, params, flat):
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.n_params,):
            raise DomainError("flat vector length does not match registry")
        for (name, arr), off, shape in zip(params.named_arrays(),
                                           self.offsets, self.shapes):
            arr[...] = flat[off:off + arr.size].reshape(shape)
        return params

    def slot_of(self, index):
        """Name and within-array offset for a flat index."""
        if not 0 <= index < self.n_params:
            raise DomainError("flat index out of range")
        pos = np.searchsorted(self.offsets, index, side="right") - 1
        return self.names[pos], index - self.offsets[pos]


def zero_grads(params):
    return {name: np.zeros_like(a) for name, a in params.named_arrays()}


def _accumulate_radial(grads, prefix, radial_grads):
    for key, g in radial_grads.items():
        grads[f"{prefix}.radial.{key}"] += g


def loss_and_grad(params, graph, queries, target, volume_weight=1.0,
                  counters=None):
    """Loss and exact gradients of loss_l2(predict_density) in one pass."""
    cfg = params.config
    target = np.asarray(target, dtype=float)
    dens, trace = model.forward_trace(params, graph, queries, counters)
    loss = model.loss_l2(dens, target, volume_weight)
    grads = zero_grads(params)

    w = np.asarray(volume_weight, dtype=float)
    grad_dens = 2.0 * w * (dens - target)

    if params.residual is not None:
        grad_fr, rgrads = layers.residual_backward(
            trace["queries"], graph.atom_coord, trace["final"],
            params.residual, grad_dens)
        _accumulate_radial(grads, "residual", rgrads["radial"])
    grad_coeffs = basis.expand_density_backward(
        trace["spec"], grad_dens, graph.atom_coord, trace["queries"])
    g = model.coeff_grad_to_features(grad_coeffs, cfg.l_max, cfg.channels)
    if params.residual is not None:
        for l in g.blocks:
            g.blocks[l] += grad_fr.blocks[l]

    for i in reversed(range(cfg.n_layers)):
        g = layers.gate_backward(trace["pre_gate"][i], g, cfg.act0, cfg.act_l)
        g, cgrads = layers.conv_backward(graph, trace["pre_conv"][i],
                                         params.convs[i], g)
        grads[f"conv{i}.self_w"] += cgrads["self_w"]
        _accumulate_radial(grads, f"conv{i}", cgrads["radial"])

    np.add.at(grads["embed"], graph.atom_type, g.blocks[0][:, :, 0])
    for name in grads:
        if not np.all(np.isfinite(grads[name])):
            raise NonFiniteError(f"non-finite gradient for {name}")
    return loss, grads


def check_gradient(params, graph, queries, target, n_sampled=200, h=1e-5,
                   seed=0, volume_weight=1.0, names=None):
    """Compare analytic gradients against central finite differences.

    Samples flat parameter indices without replacement (restricted to the
    arrays listed in `names` when given), perturbs each by
    ``h * max(1, |theta|)``, and reports the max and median relative error.
    Entries where both slopes sit below the loss-scaled noise floor are
    counted as agreeing; central differences cannot resolve them.
    """
    registry = ParamRegistry(params)
    loss0, grads = loss_and_grad(params, graph, queries, target,
                                 volume_weight)
    flat_g = registry.flatten_grads(grads)
    flat = registry.flatten(params)

    if names is None:
        pool = np.arange(registry.n_params)
    else:
        keep = []
        for name, off, shape in zip(registry.names, registry.offsets,
                                    registry.shapes):
            if name in names:
                keep.append(np.arange(off, off + int(np.prod(shape))))
        if not keep:
            raise DomainError("no registry arrays match the given names")
        pool = np.concatenate(keep)
    rng = np.random.default_rng(seed)
    k = min(int(n_sampled), pool.size)
    idx = rng.choice(pool, size=k, replace=False)

    floor = 1e-6 * max(1.0, abs(loss0))
    errs = np.zeros(k)
    worst = None
    work = flat.copy()

    def eval_at(i, value):
        work[i] = value
        registry.unflatten(params, work)
        d = model.predict_density(params, graph, queries)
        return model.loss_l2(d, target, volume_weight)

    try:
        for j, i in enumerate(idx):
            theta = flat[i]
            step = h * max(1.0, abs(theta))
            lp = eval_at(i, theta + step)
            lm = eval_at(i, theta - step)
            work[i] = theta
            fd = (lp - lm) / (2.0 * step)
            an = flat_g[i]
            scale = max(abs(fd), abs(an))
            errs[j] = abs(fd - an) / scale if scale > floor else 0.0
            if worst is None or errs[j] > worst[0]:
                worst = (errs[j], *registry.slot_of(int(i)), fd, an)
    finally:
        registry.unflatten(params, flat)

    report = {
        "n_sampled": k,
        "max_rel_error": float(errs.max()) if k else 0.0,
        "median_rel_error": float(np.median(errs)) if k else 0.0,
        "loss": loss0,
        "h": h,
    }
    if worst is not None:
        report["worst"] = {"error": worst[0], "name": worst[1],
                           "offset": int(worst[2]), "fd": worst[3],
                           "analytic": worst[4]}
    report["pass"] = report["max_rel_error"] < 1e-4
    return report


# ---------------------------------------------------------------------------
# optimizers

_METHODS = ("gradient-descent", "adaptive-moments")


@dataclass
class OptimizerState:
    method: str
    lr: float
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_factor: float = 0.5
    patience: int = 10
    best_val: float = field(default=math.inf)
    stale: int = 0


def init_optimizer(registry, method="adaptive-moments", lr=1e-3,
                   patience=10, decay_factor=0.5):
    if method not in _METHODS:
        raise DomainError(f"unknown optimizer method {method!r}")
    n = registry.n_params
    return OptimizerState(method=method, lr=float(lr), m=np.zeros(n),
                          v=np.zeros(n), patience=int(patience),
                          decay_factor=float(decay_factor))


def optimize_step(state, params, grads, registry):
    """One optimizer update, in place. Returns (params, state)."""
    g = registry.flatten_grads(grads)
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("non-finite gradient passed to optimize_step")
    if g.shape != state.m.shape:
        raise DomainError("gradient length does not match optimizer state")
    flat = registry.flatten(params)
    state.step += 1
    if state.method == "gradient-descent":
        flat -= state.lr * g
    else:
        state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
        state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
        mhat = state.m / (1.0 - state.beta1 ** state.step)
        vhat = state.v / (1.0 - state.beta2 ** state.step)
        flat -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    registry.unflatten(params, flat)
    return params, state


def plateau_update(state, val_loss):
    """Record one validation result; halve the step size on a plateau.

    Returns True when the step size was just reduced.
    """
    val_loss = float(val_loss)
    if not math.isfinite(val_loss):
        raise NonFiniteError("non-finite validation loss")
    if val_loss < state.best_val:
        state.best_val = val_loss
        state.stale = 0
        return False
    state.stale += 1
    if state.stale >= state.patience:
        state.lr *= state.decay_factor
        state.stale = 0
        return True
    return False
