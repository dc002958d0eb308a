import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from gradcheck import check_path_gradients
from pathnet.network import (
    CheckpointFormatError,
    GridStateError,
    NetConfig,
    ParameterGrid,
    active_set,
    backward_and_step,
    forward,
    freeze_path,
    load_grid,
    random_genotype,
    reinit_unfrozen,
    save_grid,
)
from pathnet.numerics import DimensionError, relu, rng_stream, softmax_xent


def grid_bytes(grid):
    parts = [w.tobytes() for w in grid.W] + [b.tobytes() for b in grid.b]
    parts += [h.W.tobytes() + h.b.tobytes() for _, h in sorted(grid.heads.items())]
    return parts


def module_diff(before, after):
    """(layer, module) pairs whose parameters differ between two grids."""
    return {
        (l, m)
        for l in range(before.cfg.layers)
        for m in range(before.cfg.modules_per_layer)
        if not (np.array_equal(before.W[l][m], after.W[l][m]) and np.array_equal(before.b[l][m], after.b[l][m]))
    }


def train_step(grid, g, task, x, y, lr):
    logits, act = forward(grid, g, task, x)
    _, d = softmax_xent(logits, y)
    backward_and_step(grid, g, task, act, d, lr)


def batch(cfg, seed, n=5, classes=3):
    rng = rng_stream(seed, 99)
    return rng.uniform(0, 1, (n, cfg.input_dim)), rng.integers(0, classes, n)


genotypes = st.lists(st.integers(0, 9), min_size=9, max_size=9).map(lambda v: np.array(v).reshape(3, 3))


def test_config_presets():
    assert NetConfig.mnist().genotype_shape == (3, 3)
    big = NetConfig.large()
    assert (big.layers, big.modules_per_layer, big.max_modules_per_layer) == (3, 20, 5)
    with pytest.raises(ValueError):
        NetConfig(max_modules_per_layer=11, modules_per_layer=10)


def test_random_genotype_single_module():
    g = random_genotype(NetConfig(modules_per_layer=1, max_modules_per_layer=1), rng_stream(0))
    assert not g.any()


def test_random_genotype_mnist_shape():
    g = random_genotype(NetConfig.mnist(), rng_stream(0))
    assert g.shape == (3, 3) and g.min() >= 0 and g.max() < 10


def test_random_genotype_uniform_chi2():
    cfg = NetConfig.mnist()
    rng = rng_stream(11)
    counts = np.zeros(10)
    for _ in range(100000 // 9 + 1):
        counts += np.bincount(random_genotype(cfg, rng).ravel(), minlength=10)
    _, p = stats.chisquare(counts)
    assert p > 0.01


def test_active_set_dedup():
    g = np.array([[2, 1], [2, 5], [2, 9]])
    assert active_set(g, 0) == (2,)
    assert active_set(g, 1) == (1, 5, 9)


def test_forward_permutation_invariant(small_grid):
    x, _ = batch(small_grid.cfg, 0)
    base = np.array([[2, 4, 1], [2, 6, 1], [2, 8, 3]])
    ref, _ = forward(small_grid, base, "t", x)
    for perm in itertools.permutations(range(3)):
        out, _ = forward(small_grid, base[list(perm)], "t", x)
        assert np.array_equal(out, ref)


def test_single_module_path_is_plain_mlp(small_grid):
    g = np.array([[3, 1, 7]] * 3)
    x, _ = batch(small_grid.cfg, 1)
    h = x
    for l, m in enumerate((3, 1, 7)):
        h = relu(h @ small_grid.W[l][m].T + small_grid.b[l][m])
    head = small_grid.head("t")
    out, _ = forward(small_grid, g, "t", x)
    assert np.allclose(out, h @ head.W.T + head.b, rtol=0, atol=1e-14)


def test_two_identical_modules_double_the_sum(small_grid):
    grid = small_grid
    grid.b[2][4] += 0.1
    grid.W[2][5] = grid.W[2][4]
    grid.b[2][5] = grid.b[2][4]
    x, _ = batch(grid.cfg, 2)
    _, one = forward(grid, np.array([[0, 1, 4]] * 3), "t", x)
    _, two = forward(grid, np.array([[0, 1, 4], [0, 1, 5], [0, 1, 5]]), "t", x)
    assert np.array_equal(two.hidden, 2 * one.hidden)


def test_zero_module_leaves_logits(small_grid):
    grid = small_grid
    grid.W[1][6][:] = 0.0
    grid.b[1][6][:] = 0.0
    x, _ = batch(grid.cfg, 3)
    a, _ = forward(grid, np.array([[0, 1, 2], [0, 1, 2], [0, 1, 2]]), "t", x)
    b, _ = forward(grid, np.array([[0, 1, 2], [0, 6, 2], [0, 1, 2]]), "t", x)
    assert np.array_equal(a, b)


def test_forward_errors(small_grid):
    g = np.zeros((3, 3), dtype=int)
    with pytest.raises(GridStateError):
        forward(small_grid, g, "nope", np.zeros((1, 7)))
    with pytest.raises(DimensionError):
        forward(small_grid, g, "t", np.zeros((1, 8)))


@pytest.mark.parametrize("seed", range(5))
def test_path_gradient_matches_finite_difference(small_grid, seed):
    g = random_genotype(small_grid.cfg, rng_stream(seed, 5))
    x, y = batch(small_grid.cfg, seed)
    worst, n = check_path_gradients(small_grid, g, "t", x, y)
    assert n >= 3
    assert worst < 1e-4


def test_gradient_flows_through_frozen_module(small_grid):
    g = np.array([[0, 1, 2]] * 3)
    freeze_path(small_grid, np.array([[9, 1, 9]] * 3))
    x, y = batch(small_grid.cfg, 4)
    before = small_grid.copy()
    train_step(small_grid, g, "t", x, y, 0.5)
    assert module_diff(before, small_grid) == {(0, 0), (2, 2)}


def test_all_frozen_only_head_changes(small_grid):
    g = np.array([[0, 1, 2], [3, 3, 3], [0, 1, 2]])
    freeze_path(small_grid, g)
    before = small_grid.copy()
    x, y = batch(small_grid.cfg, 5)
    train_step(small_grid, g, "t", x, y, 0.5)
    assert module_diff(before, small_grid) == set()
    assert not np.array_equal(before.head("t").W, small_grid.head("t").W)


def test_zero_lr_changes_nothing(small_grid):
    before = grid_bytes(small_grid)
    x, y = batch(small_grid.cfg, 6)
    train_step(small_grid, np.array([[1, 2, 3]] * 3), "t", x, y, 0.0)
    assert grid_bytes(small_grid) == before


@settings(max_examples=25, deadline=None)
@given(genotypes, st.integers(0, 2**31))
def test_locality(g, seed):
    cfg = NetConfig(layers=3, modules_per_layer=10, neurons_per_module=6, max_modules_per_layer=3, input_dim=7)
    grid = ParameterGrid(cfg, rng_stream(seed))
    grid.add_head("t", 3, rng_stream(seed, 1))
    grid.add_head("other", 2, rng_stream(seed, 2))
    freeze_path(grid, random_genotype(cfg, rng_stream(seed, 3)))
    before = grid.copy()
    x, y = batch(cfg, seed)
    train_step(grid, g, "t", x, y, 0.1)
    expected = {(l, m) for l in range(3) for m in active_set(g, l) if not grid.frozen[l, m]}
    changed = module_diff(before, grid)
    assert changed <= expected
    # a module whose gradient is exactly zero (dead ReLUs) may stay put; everything else must move
    assert np.array_equal(before.head("other").W, grid.head("other").W)
    assert not np.array_equal(before.head("t").b, grid.head("t").b)


@settings(max_examples=25, deadline=None)
@given(genotypes, st.integers(0, 2**31))
def test_gating_soundness(g, seed):
    cfg = NetConfig(layers=3, modules_per_layer=10, neurons_per_module=6, max_modules_per_layer=3, input_dim=7)
    grid = ParameterGrid(cfg, rng_stream(seed))
    grid.add_head("t", 3, rng_stream(seed, 1))
    x, _ = batch(cfg, seed)
    ref, _ = forward(grid, g, "t", x)
    rng = rng_stream(seed, 4)
    for l in range(3):
        for m in set(range(10)) - set(active_set(g, l)):
            grid.W[l][m] = rng.standard_normal(grid.W[l][m].shape)
            grid.b[l][m] = rng.standard_normal(grid.b[l][m].shape)
    out, _ = forward(grid, g, "t", x)
    assert out.tobytes() == ref.tobytes()


def test_dedup_equivalence(small_grid):
    a = np.array([[1, 2, 3], [1, 4, 3], [5, 4, 3]])
    b = np.array([[5, 4, 3], [1, 2, 3], [5, 2, 3]])
    x, y = batch(small_grid.cfg, 8)
    g1, g2 = small_grid.copy(), small_grid.copy()
    train_step(g1, a, "t", x, y, 0.1)
    train_step(g2, b, "t", x, y, 0.1)
    assert grid_bytes(g1) == grid_bytes(g2)


def test_freeze_idempotent_and_bounded(small_grid):
    g = random_genotype(small_grid.cfg, rng_stream(1))
    freeze_path(small_grid, g)
    once = small_grid.frozen.copy()
    freeze_path(small_grid, g)
    assert np.array_equal(once, small_grid.frozen)
    assert small_grid.frozen_count() <= 9


def test_freeze_is_cumulative(small_grid):
    freeze_path(small_grid, np.array([[0, 0, 0]] * 3))
    freeze_path(small_grid, np.array([[1, 1, 1]] * 3))
    assert small_grid.frozen[:, :2].all() and small_grid.frozen_count() == 6


def test_frozen_params_survive_training(small_grid):
    freeze_path(small_grid, np.array([[0, 1, 2], [3, 4, 5], [0, 1, 2]]))
    snap = small_grid.frozen_snapshot()
    rng = rng_stream(3)
    for i in range(1000):
        g = random_genotype(small_grid.cfg, rng)
        x, y = batch(small_grid.cfg, i)
        train_step(small_grid, g, "t", x, y, 0.05)
    assert small_grid.frozen_snapshot() == snap


def test_reinit_no_frozen_redraws_everything(small_grid):
    before = small_grid.copy()
    reinit_unfrozen(small_grid, rng_stream(77))
    assert len(module_diff(before, small_grid)) == 30


def test_reinit_all_frozen_is_noop(small_grid):
    small_grid.frozen[:] = True
    before = grid_bytes(small_grid)
    reinit_unfrozen(small_grid, rng_stream(77))
    assert grid_bytes(small_grid) == before


def test_reinit_keeps_frozen_path_output(small_grid):
    g = np.array([[0, 1, 2], [3, 1, 2], [0, 1, 4]])
    freeze_path(small_grid, g)
    x, _ = batch(small_grid.cfg, 9)
    before, _ = forward(small_grid, g, "t", x)
    reinit_unfrozen(small_grid, rng_stream(5))
    after, _ = forward(small_grid, g, "t", x)
    assert before.tobytes() == after.tobytes()


def test_always_active_frozen_path(small_cfg):
    cfg = NetConfig(**{**small_cfg.__dict__, "always_active_frozen": True})
    grid = ParameterGrid(cfg, rng_stream(0))
    grid.add_head("t", 3, rng_stream(1))
    frozen = np.array([[7, 8, 9]] * 3)
    freeze_path(grid, frozen)
    g = np.array([[0, 1, 2]] * 3)
    x, y = batch(cfg, 0)
    _, act = forward(grid, g, "t", x)
    assert act.sets == [(0, 7), (1, 8), (2, 9)]
    before = grid.copy()
    train_step(grid, g, "t", x, y, 0.5)
    assert module_diff(before, grid) <= {(0, 0), (1, 1), (2, 2)}
    # the frozen modules are on the forward path, so perturbing one moves the logits
    grid.W[2][9] += 1.0
    out2, _ = forward(grid, g, "t", x)
    out1, _ = forward(before, g, "t", x)
    assert not np.array_equal(out1, out2)


def test_checkpoint_roundtrip(small_grid, tmp_path):
    freeze_path(small_grid, np.array([[0, 1, 2]] * 3))
    small_grid.add_head("second", 2, rng_stream(4))
    p = tmp_path / "grid.npz"
    save_grid(small_grid, p)
    back = load_grid(p)
    assert back.cfg == small_grid.cfg
    assert grid_bytes(back) == grid_bytes(small_grid)
    assert np.array_equal(back.frozen, small_grid.frozen)
    assert np.array_equal(back.frozen_path, small_grid.frozen_path)


def test_checkpoint_corrupt(tmp_path):
    p = tmp_path / "bad.npz"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointFormatError):
        load_grid(p)
