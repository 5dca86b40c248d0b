import copy

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prune_forge.errors import ContractError, DimensionError, ParameterError
from prune_forge.pruning import (
    MaskedParameter,
    Pruner,
    PruneState,
    PruningSchedule,
    Scheme,
    apply_masks_to_gradients,
    prune_step_global,
    prune_step_layerwise_constant,
    prune_step_simultaneous,
    sparsity_at,
    target_zero_count,
    update_mask,
)


def brute_force_mask(values, s):
    """Mask from an explicit sort on (|v|, index)."""
    n = len(values)
    k = min(max(int(np.floor(s * n + 0.5)), 0), n)
    order = sorted(range(n), key=lambda i: (abs(float(values[i])), i))
    mask = [1] * n
    for i in order[:k]:
        mask[i] = 0
    return mask


# --- schedule -------------------------------------------------------------


def test_schedule_endpoints_and_midpoint():
    sched = PruningSchedule(0.0, 0.875, t0=0, n=100, delta_t=10)
    assert sparsity_at(sched, 1000) == 0.875
    assert sparsity_at(sched, 0) == 0.0
    mid = PruningSchedule(0.0, 0.8, t0=0, n=10, delta_t=100)
    assert sparsity_at(mid, 500) == pytest.approx(0.7, abs=1e-12)


def test_schedule_clamps_outside_grid():
    sched = PruningSchedule(0.1, 0.6, t0=50, n=4, delta_t=10)
    assert sparsity_at(sched, 0) == 0.1
    assert sparsity_at(sched, 49) == 0.1
    assert sparsity_at(sched, 91) == 0.6
    assert sparsity_at(sched, 10**9) == 0.6


def test_schedule_holds_between_grid_points():
    sched = PruningSchedule(0.0, 0.5, t0=0, n=4, delta_t=10)
    assert sparsity_at(sched, 15) == sparsity_at(sched, 10)
    assert sparsity_at(sched, 19) == sparsity_at(sched, 10)


@given(
    s_i=st.floats(0, 0.9),
    span=st.floats(0.01, 1.0),
    t0=st.integers(0, 1000),
    n=st.integers(2, 60),
    dt=st.integers(1, 500),
)
def test_schedule_monotone_and_decelerating(s_i, span, t0, n, dt):
    s_f = min(1.0, s_i + span)
    sched = PruningSchedule(s_i, s_f, t0=t0, n=n, delta_t=dt)
    vals = np.array([sparsity_at(sched, t) for t in sched.grid()])
    assert vals[0] == s_i and vals[-1] == s_f
    assert np.all(np.diff(vals) >= 0)
    # pruning rate slows down: increments shrink along the grid
    second = np.diff(vals, 2)
    assert np.all(second <= 1e-15)
    assert np.all(second[:-1] < 0) or s_f - s_i < 1e-9


@pytest.mark.parametrize("dt", [10, 100, 1000])
def test_endpoint_invariance_across_frequency(dt):
    sched = PruningSchedule(0.0, 0.9, t0=7, n=10_000 // dt, delta_t=dt)
    assert sparsity_at(sched, 7) == 0.0
    assert sparsity_at(sched, 7 + 10_000) == 0.9


def test_schedule_validation():
    with pytest.raises(ParameterError):
        PruningSchedule(0.5, 0.4)
    with pytest.raises(ParameterError):
        PruningSchedule(0.0, 0.5, n=0)
    with pytest.raises(ParameterError):
        PruningSchedule(0.0, 0.5, delta_t=0)


# --- counts and masks ----------------------------------------------------


def test_target_zero_count():
    assert target_zero_count(0.5, 4) == 2
    assert target_zero_count(0.875, 8) == 7
    assert target_zero_count(1.0, 37) == 37
    assert target_zero_count(0.0, 37) == 0
    assert target_zero_count(0.25, 10) == 3  # 2.5 rounds half up


def test_update_mask_examples():
    p = MaskedParameter(np.array([0.5, -0.1, 0.3, -0.4]))
    assert update_mask(p, 0.5).mask.astype(int).tolist() == [1, 0, 0, 1]
    assert update_mask(p, 0.0).mask.all()
    ties = MaskedParameter(np.array([0.2, -0.2, 0.2, 0.2]))
    assert update_mask(ties, 0.25).mask.astype(int).tolist() == [0, 1, 1, 1]


@settings(max_examples=200)
@given(
    values=st.lists(st.sampled_from([0.0, 0.1, -0.1, 0.25, -0.5, 1.0, 2.0]) | st.floats(-3, 3), min_size=1, max_size=40),
    s=st.floats(0, 1),
)
def test_update_mask_matches_brute_force(values, s):
    p = update_mask(MaskedParameter(np.array(values)), s)
    assert p.mask.astype(int).tolist() == brute_force_mask(values, s)
    assert p.zero_count == target_zero_count(s, len(values))


def test_update_mask_recomputes_from_scratch():
    # masks may revive: a masked weight that grows is unmasked next time
    p = MaskedParameter(np.array([0.1, 0.9, 0.5]))
    update_mask(p, 1 / 3)
    assert p.mask.tolist() == [False, True, True]
    p.values[0] = 5.0
    update_mask(p, 1 / 3)
    assert p.mask.tolist() == [True, True, False]


def test_masked_parameter_shape_check():
    with pytest.raises(DimensionError):
        MaskedParameter(np.zeros((2, 2)), np.ones(4, dtype=bool))


# --- schemes -------------------------------------------------------------


def _layers(rng, sizes):
    return [MaskedParameter(rng.normal((n,))) for n in sizes]


def test_simultaneous_per_layer_rounding(rng):
    sched = PruningSchedule(0.5, 0.5, t0=0, n=1, delta_t=10)
    params = prune_step_simultaneous(_layers(rng, [10, 20, 30]), sched, 0)
    assert [p.zero_count for p in params] == [5, 10, 15]


def test_simultaneous_endpoint_and_freeze(rng):
    sched = PruningSchedule(0.0, 0.8, t0=0, n=5, delta_t=10)
    state = PruneState()
    params = _layers(rng, [25, 40])
    prune_step_simultaneous(params, sched, 50, state)
    assert [p.zero_count for p in params] == [20, 32]
    assert state.frozen
    with pytest.raises(ContractError):
        prune_step_simultaneous(params, sched, 60, state)


def test_simultaneous_single_layer_is_update_mask(rng):
    sched = PruningSchedule(0.0, 0.9, t0=0, n=4, delta_t=10)
    a = _layers(rng, [50])
    b = copy.deepcopy(a)
    prune_step_simultaneous(a, sched, 20)
    update_mask(b[0], sparsity_at(sched, 20))
    assert np.array_equal(a[0].mask, b[0].mask)


def _run_layerwise(params, sched, steps, state=None):
    state = state or PruneState()
    log = []
    for t in steps:
        if state.frozen:
            break
        for idx in prune_step_layerwise_constant(params, sched, t, state):
            log.append((t, idx))
    return log, state


def test_layerwise_two_layers_spacing(rng):
    sched = PruningSchedule(0.0, 0.5, t0=0, n=2, delta_t=100)
    params = _layers(rng, [30, 30])
    log, _ = _run_layerwise(params, sched, range(0, 100))
    assert log == [(0, 0), (50, 1)]


def test_layerwise_single_layer_equals_simultaneous(rng):
    sched = PruningSchedule(0.0, 0.75, t0=10, n=6, delta_t=7)
    a = _layers(rng, [64])
    b = copy.deepcopy(a)
    state_a, state_b = PruneState(), PruneState()
    for t in range(0, 80):
        if not state_a.frozen:
            prune_step_layerwise_constant(a, sched, t, state_a)
        if not state_b.frozen and sched.on_grid(t):
            prune_step_simultaneous(b, sched, t, state_b)
        assert np.array_equal(a[0].mask, b[0].mask)
    assert state_a.frozen and state_b.frozen


def test_layerwise_cycle_matches_simultaneous_counts(rng):
    sched = PruningSchedule(0.0, 0.9, t0=0, n=3, delta_t=30)
    a = _layers(rng, [17, 33, 50])
    b = copy.deepcopy(a)
    _run_layerwise(a, sched, range(30, 60))
    prune_step_simultaneous(b, sched, 30)
    assert [p.zero_count for p in a] == [p.zero_count for p in b]
    assert all(np.array_equal(x.mask, y.mask) for x, y in zip(a, b))


def test_layerwise_freezes_after_final_cycle(rng):
    sched = PruningSchedule(0.0, 0.5, t0=0, n=2, delta_t=10)
    params = _layers(rng, [8, 8, 8])
    log, state = _run_layerwise(params, sched, range(0, 100))
    assert state.frozen
    assert log[-1] == (20 + 2 * 3, 2)
    assert [p.zero_count for p in params] == [4, 4, 4]


def test_global_example():
    a = MaskedParameter(np.array([0.9, 0.8, 0.01]))
    b = MaskedParameter(np.array([0.7, 0.02, 0.03]))
    sched = PruningSchedule(0.5, 0.5, t0=0, n=1, delta_t=1)
    prune_step_global([a, b], sched, 0)
    assert (a.zero_count, b.zero_count) == (1, 2)
    assert a.mask.tolist() == [True, True, False]
    assert b.mask.tolist() == [True, False, False]


def test_global_full_sparsity(rng):
    sched = PruningSchedule(1.0 - 1e-12, 1.0, t0=0, n=1, delta_t=1)
    params = _layers(rng, [5, 9])
    prune_step_global(params, sched, 1)
    assert not any(p.mask.any() for p in params)


@settings(max_examples=100)
@given(st.lists(st.integers(1, 30), min_size=1, max_size=5), st.floats(0, 1), st.integers(0, 10**6))
def test_global_totals_and_brute_force(sizes, s, seed):
    from prune_forge.tensor import SeededRng

    r = SeededRng(seed)
    params = [MaskedParameter(np.round(r.normal((n,)), 1)) for n in sizes]
    sched = PruningSchedule(0.0, s, t0=0, n=1, delta_t=1)
    prune_step_global(params, sched, 1)
    # brute force over the concatenation with (layer, index) tie order
    flat = [(abs(float(v)), li, i) for li, p in enumerate(params) for i, v in enumerate(p.values)]
    k = target_zero_count(s, len(flat))
    masked = {(li, i) for _, li, i in sorted(flat)[:k]}
    for li, p in enumerate(params):
        assert [(li, i) not in masked for i in range(p.size)] == p.mask.tolist()
    simultaneous_total = sum(target_zero_count(s, n) for n in sizes)
    assert abs(sum(p.zero_count for p in params) - simultaneous_total) <= len(sizes) / 2


def test_global_identical_layers_differ_only_by_ties():
    vals = np.array([0.3, 0.1, 0.2, 0.4, 0.5])
    params = [MaskedParameter(vals.copy()) for _ in range(3)]
    sched = PruningSchedule(0.5, 0.5, t0=0, n=1, delta_t=1)
    prune_step_global(params, sched, 0)
    counts = [p.zero_count for p in params]
    assert max(counts) - min(counts) <= len(params)
    assert sum(counts) == target_zero_count(0.5, 15)


def test_apply_masks_to_gradients():
    g = [np.array([0.3, 0.7])]
    assert apply_masks_to_gradients(g, [np.ones(2, bool)])[0].tolist() == [0.3, 0.7]
    assert apply_masks_to_gradients(g, [np.zeros(2, bool)])[0].tolist() == [0.0, 0.0]
    assert apply_masks_to_gradients(g, [np.array([1, 0])])[0].tolist() == [0.3, 0.0]
    with pytest.raises(DimensionError):
        apply_masks_to_gradients(g, [np.ones(3, bool)])


@pytest.mark.parametrize("scheme", list(Scheme))
def test_pruner_freezes_and_stops(rng, scheme):
    sched = PruningSchedule(0.0, 0.8, t0=5, n=4, delta_t=12, scheme=scheme)
    params = _layers(rng, [20, 30, 40])
    pruner = Pruner(params, sched)
    for t in range(pruner.last_step + 1):
        pruner.step(t)
    assert pruner.state.frozen
    snapshot = [p.mask.copy() for p in params]
    for p in params:
        p.values[:] = rng.normal(p.size)
    for t in range(pruner.last_step + 1, pruner.last_step + 200):
        assert not pruner.step(t)
    assert all(np.array_equal(a, p.mask) for a, p in zip(snapshot, params))
    total = sum(p.zero_count for p in params)
    assert abs(total - sum(target_zero_count(0.8, p.size) for p in params)) <= 3 / 2


@given(
    s_i=st.floats(0, 0.99),
    span=st.floats(0, 1),
    t0=st.integers(0, 100),
    n=st.integers(1, 20),
    dt=st.integers(1, 30),
)
def test_schedule_monotone_at_every_step(s_i, span, t0, n, dt):
    sched = PruningSchedule(s_i, min(1.0, s_i + span), t0=t0, n=n, delta_t=dt)
    vals = [sparsity_at(sched, t) for t in range(max(0, t0 - 3), sched.end + 3)]
    assert all(a <= b for a, b in zip(vals, vals[1:]))
    assert all(sched.s_i <= v <= sched.s_f for v in vals)
