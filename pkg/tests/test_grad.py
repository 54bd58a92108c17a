import numpy as np
import pytest

from infgcn import geometry, grad, model
from infgcn.errors import DomainError, NonFiniteError


def make_instance(cfg, seed=0, n_atoms=4, n_queries=12):
    rng = np.random.default_rng(seed)
    coords = rng.uniform(-1.0, 1.0, size=(n_atoms, 3))
    types = rng.integers(0, cfg.vocab, size=n_atoms)
    graph = geometry.MolecularGraph.from_coords(types, coords, cfg.cutoff)
    queries = rng.uniform(-1.5, 1.5, size=(n_queries, 3))
    target = rng.standard_normal(n_queries)
    return graph, queries, target


class ScalarParams:
    """Minimal named_arrays provider for optimizer unit tests."""

    def __init__(self, x0):
        self.x = np.array([float(x0)])

    def named_arrays(self):
        return [("x", self.x)]


def test_registry_round_trip():
    cfg = model.ModelConfig(l_max=1, channels=2, n_layers=2, cutoff=3.0,
                            vocab=3, r_max=3.0)
    params = model.init_params(cfg, seed=1, zero_heads=False)
    reg = grad.ParamRegistry(params)
    assert reg.n_params == model.count_parameters(params)
    flat = reg.flatten(params)
    flat2 = flat + np.arange(flat.size) * 1e-3
    reg.unflatten(params, flat2)
    assert np.array_equal(reg.flatten(params), flat2)
    name, off = reg.slot_of(0)
    assert name == "embed" and off == 0
    name, _ = reg.slot_of(reg.n_params - 1)
    assert name == "residual.radial.head_b"
    with pytest.raises(DomainError):
        reg.slot_of(reg.n_params)
    with pytest.raises(DomainError):
        reg.unflatten(params, flat2[:-1])


def test_unused_embedding_row_gets_zero_grad():
    cfg = model.ModelConfig(l_max=1, channels=2, n_layers=1, cutoff=3.0,
                            vocab=5, r_max=3.0)
    params = model.init_params(cfg, seed=2, zero_heads=False)
    rng = np.random.default_rng(3)
    coords = rng.uniform(-1.0, 1.0, size=(4, 3))
    types = np.array([0, 1, 1, 2])  # rows 3 and 4 never referenced
    graph = geometry.MolecularGraph.from_coords(types, coords, cfg.cutoff)
    queries = rng.uniform(-1.0, 1.0, size=(10, 3))
    target = rng.standard_normal(10)
    _, grads = grad.loss_and_grad(params, graph, queries, target)
    assert np.all(grads["embed"][3] == 0.0)
    assert np.all(grads["embed"][4] == 0.0)
    assert np.any(grads["embed"][:3] != 0.0)


def test_linear_head_matches_closed_form():
    # one layer, identity activations, no residual: the prediction is an
    # affine function of the conv head parameters, so the least-squares
    # gradient 2 J^T (pred - target) is exact
    cfg = model.ModelConfig(l_max=1, channels=2, n_layers=1, cutoff=3.0,
                            vocab=3, residual=False, act0="identity",
                            act_l="identity", r_max=3.0)
    params = model.init_params(cfg, seed=4, zero_heads=False)
    graph, queries, target = make_instance(cfg, seed=5, n_queries=8)
    loss, grads = grad.loss_and_grad(params, graph, queries, target)
    reg = grad.ParamRegistry(params)
    flat = reg.flatten(params)
    flat_g = reg.flatten_grads(grads)
    base = model.predict_density(params, graph, queries)
    resid = base - target

    head = [i for i, name in enumerate(reg.names)
            if name in ("conv0.radial.head_w", "conv0.radial.head_b")]
    rng = np.random.default_rng(6)
    offs = []
    for i in head:
        lo = reg.offsets[i]
        n = int(np.prod(reg.shapes[i]))
        offs.extend(lo + rng.choice(n, size=min(20, n), replace=False))
    for i in offs:
        bumped = flat.copy()
        bumped[i] += 1.0
        reg.unflatten(params, bumped)
        col = model.predict_density(params, graph, queries) - base
        reg.unflatten(params, flat)
        want = 2.0 * float(resid @ col)
        got = flat_g[i]
        assert abs(got - want) < 1e-9 * max(1.0, abs(want))


@pytest.mark.parametrize("l_max,residual,mode", [
    (0, True, "channel"),
    (1, False, "channel"),
    (2, True, "fc"),
])
def test_fd_gradients_across_axes(l_max, residual, mode):
    cfg = model.ModelConfig(l_max=l_max, channels=2, n_layers=2, cutoff=3.0,
                            vocab=3, residual=residual, mode=mode, r_max=3.0)
    params = model.init_params(cfg, seed=7 + l_max, zero_heads=False)
    graph, queries, target = make_instance(cfg, seed=8 + l_max)
    report = grad.check_gradient(params, graph, queries, target,
                                 n_sampled=80, seed=9)
    assert report["pass"], report["worst"]
    assert report["max_rel_error"] < 1e-4


@pytest.mark.parametrize("pbc", [True, False])
def test_fd_gradients_on_grid_targets(pbc):
    # queries and targets drawn through the voxel pipeline, wrapped and
    # clamped variants
    cfg = model.ModelConfig(l_max=1, channels=2, n_layers=1, cutoff=3.0,
                            vocab=3, r_max=3.0)
    params = model.init_params(cfg, seed=10, zero_heads=False)
    rng = np.random.default_rng(11)
    n = 8
    vals = rng.standard_normal(n ** 3)
    g0 = geometry.VoxelGrid((n, n, n), 3.0 * np.eye(3),
                            np.full(3, -1.5), vals, pbc=pbc)
    coords = rng.uniform(-1.0, 1.0, size=(4, 3))
    types = rng.integers(0, cfg.vocab, size=4)
    graph = geometry.MolecularGraph.from_coords(types, coords, cfg.cutoff)
    queries = rng.uniform(-1.4, 1.4, size=(12, 3))
    target = geometry.trilinear_sample(g0, queries)
    report = grad.check_gradient(params, graph, queries, target,
                                 n_sampled=60, seed=12,
                                 volume_weight=g0.voxel_volume)
    assert report["pass"], report["worst"]


def test_check_gradient_quadratic_exact():
    # restricted to the head parameters of an identity-activation model the
    # loss is exactly quadratic, so central differences are exact at any h
    cfg = model.ModelConfig(l_max=1, channels=2, n_layers=1, cutoff=3.0,
                            vocab=3, residual=False, act0="identity",
                            act_l="identity", r_max=3.0)
    params = model.init_params(cfg, seed=13, zero_heads=False)
    graph, queries, target = make_instance(cfg, seed=14, n_queries=16)
    report = grad.check_gradient(
        params, graph, queries, target, n_sampled=50, h=1e-3, seed=15,
        names=("conv0.radial.head_w", "conv0.radial.head_b"))
    assert report["max_rel_error"] < 1e-9
    with pytest.raises(DomainError):
        grad.check_gradient(params, graph, queries, target,
                            names=("no.such.array",))


def test_zero_feature_block_has_finite_gradient():
    # zero heads leave every degree >= 1 block exactly zero going into the
    # gate; the epsilon keeps the norm-gate adjoint finite there
    cfg = model.ModelConfig(l_max=2, channels=2, n_layers=2, cutoff=3.0,
                            vocab=3, r_max=3.0)
    params = model.init_params(cfg, seed=16, zero_heads=True)
    graph, queries, target = make_instance(cfg, seed=17)
    loss, grads = grad.loss_and_grad(params, graph, queries, target)
    assert np.isfinite(loss)
    for g in grads.values():
        assert np.all(np.isfinite(g))


def test_gradient_descent_zero_grad_is_identity():
    p = ScalarParams(2.5)
    reg = grad.ParamRegistry(p)
    state = grad.init_optimizer(reg, method="gradient-descent", lr=0.1)
    grad.optimize_step(state, p, {"x": np.zeros(1)}, reg)
    assert p.x[0] == 2.5
    assert state.step == 1


def test_quadratic_descent_is_monotone():
    p = ScalarParams(3.0)
    reg = grad.ParamRegistry(p)
    state = grad.init_optimizer(reg, method="gradient-descent", lr=0.1)
    losses = [p.x[0] ** 2]
    for _ in range(40):
        grad.optimize_step(state, p, {"x": 2.0 * p.x}, reg)
        losses.append(p.x[0] ** 2)
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 1e-3


def test_adaptive_moments_converges():
    p = ScalarParams(3.0)
    reg = grad.ParamRegistry(p)
    state = grad.init_optimizer(reg, method="adaptive-moments", lr=0.05)
    for _ in range(400):
        grad.optimize_step(state, p, {"x": 2.0 * p.x}, reg)
    assert abs(p.x[0]) < 1e-2
    with pytest.raises(DomainError):
        grad.init_optimizer(reg, method="momentum")


def test_plateau_halves_after_patience():
    reg = grad.ParamRegistry(ScalarParams(0.0))
    state = grad.init_optimizer(reg, lr=1e-3, patience=10)
    decayed = [grad.plateau_update(state, 1.0) for _ in range(11)]
    assert decayed == [False] * 10 + [True]
    assert state.lr == 5e-4
    # improvements reset the counter
    assert not grad.plateau_update(state, 0.5)
    for v in (0.4, 0.3, 0.2):
        assert not grad.plateau_update(state, v)
    assert state.lr == 5e-4
    with pytest.raises(NonFiniteError):
        grad.plateau_update(state, float("nan"))


def test_non_finite_gradient_aborts():
    p = ScalarParams(1.0)
    reg = grad.ParamRegistry(p)
    state = grad.init_optimizer(reg)
    with pytest.raises(NonFiniteError):
        grad.optimize_step(state, p, {"x": np.array([np.nan])}, reg)


def test_training_loop_is_deterministic():
    cfg = model.ModelConfig(l_max=1, channels=2, n_layers=1, cutoff=3.0,
                            vocab=3, r_max=3.0)

    def run():
        params = model.init_params(cfg, seed=20, zero_heads=True)
        graph, queries, target = make_instance(cfg, seed=21)
        reg = grad.ParamRegistry(params)
        state = grad.init_optimizer(reg, lr=1e-2)
        for _ in range(5):
            _, grads = grad.loss_and_grad(params, graph, queries, target)
            grad.optimize_step(state, params, grads, reg)
        return reg.flatten(params)

    assert np.array_equal(run(), run())