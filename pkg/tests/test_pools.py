import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sgfnoma.config import NetworkConfig
from sgfnoma.env import sample_topology
from sgfnoma.pools import (
    BroadcastMessage,
    PowerPool,
    baseline_fixed_sgf,
    baseline_fpa,
    baseline_pure_gf,
    compare_open_loop,
    extract_pools,
    max_valid_level,
    open_loop_simulate,
    rollout,
    uniform_level_policy,
)

NET = NetworkConfig()


def actions_for(channel, level_index, count):
    return np.full(count, channel * NET.num_power_levels + level_index)


def test_threshold_filter_example():
    # 48 picks of 0.5 W, 49 of 0.1 W, 3 of 0.9 W on channel 0
    acts = np.concatenate([actions_for(0, 4, 48), actions_for(0, 0, 49), actions_for(0, 8, 3)])
    pool = extract_pools(acts.reshape(-1, 1), NET)
    assert pool.levels[0] == (0.1, 0.5)
    assert sum(pool.frequencies[0]) == pytest.approx(1.0)


def test_single_dominant_kept_when_all_below_threshold():
    # every share is below one half, so only the most frequent level survives
    acts = np.concatenate([actions_for(1, k, 10 + k) for k in range(9)])
    pool = extract_pools(acts.reshape(-1, 1), NET, min_frequency=0.5)
    assert pool.levels[1] == (0.9,)


def test_unselected_channel_defaults_to_lowest_level():
    pool = extract_pools(actions_for(0, 3, 200).reshape(-1, 2), NET)
    assert pool.defaulted == [False, True, True]
    assert pool.levels[1] == pool.levels[2] == (0.1,)
    assert "never selected" in pool.table()


def test_too_short_stream_rejected():
    with pytest.raises(ValueError):
        extract_pools(np.zeros((10, 3), dtype=int), NET)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 26), min_size=100, max_size=300), st.floats(0.0, 0.5))
def test_pool_invariants(actions, min_frequency):
    pool = extract_pools(np.array(actions).reshape(-1, 1), NET, min_frequency=min_frequency)
    assert pool.num_channels == NET.num_subchannels
    for levels, freqs in zip(pool.levels, pool.frequencies):
        assert 1 <= len(levels) <= NET.num_power_levels
        assert set(levels) <= set(NET.power_levels)
        assert sum(freqs) == pytest.approx(1.0)


def test_round_trip_and_broadcast():
    topo = sample_topology(NET, 0)
    acts = np.random.default_rng(0).integers(0, 27, (150, 4))
    pool = extract_pools(acts, NET, topology=topo)
    again = PowerPool.from_dict(pool.to_dict())
    assert again.levels == pool.levels
    assert np.array_equal(again.phi, pool.phi)
    msg = BroadcastMessage.from_pool(pool, NET)
    assert len(msg.phi) == NET.num_subchannels
    assert (msg.gb_target, msg.gf_target) == (15.0, 4.0)
    with pytest.raises(ValueError):
        BroadcastMessage.from_pool(pool, NET.replace(num_subchannels=2))


def test_single_level_pool_equals_fpa():
    topo = sample_topology(NET, 1)
    pool = PowerPool([(0.7,)] * 3, [(1.0,)] * 3, np.full(3, np.inf))
    a = open_loop_simulate(pool, NET, topo, num_fresh_users=12, slots=300, seed=4)
    b = baseline_fpa(NET, 0.7, topo, slots=300, seed=4, num_fresh_users=12)
    assert np.array_equal(a.per_slot_capacity, b.per_slot_capacity)
    assert a.gb_violation_rate == b.gb_violation_rate


def test_lower_power_pool_never_hurts_gb_users():
    # same users, fading and channel picks: lower GF power can only raise GB SINR
    topo = sample_topology(NET, 2)
    pool = PowerPool([(0.1, 0.3, 0.5)] * 3, [(1 / 3,) * 3] * 3, np.full(3, np.inf))
    pooled = open_loop_simulate(pool, NET, topo, 12, 400, seed=7)
    fpa = baseline_fpa(NET, 0.9, topo, 400, seed=7, num_fresh_users=12)
    assert pooled.gb_violation_rate <= fpa.gb_violation_rate


def test_pure_gf_has_no_gb_users():
    topo = sample_topology(NET, 3)
    stats = baseline_pure_gf(NET, topo, 200, seed=0)
    assert stats.gb_violation_rate == 0.0
    assert stats.protocol == "pure_gf"


def test_fixed_sgf_defaults_to_largest_allowed_level():
    assert max_valid_level(NET) == 0.9
    assert max_valid_level(NET.replace(max_user_power=0.45)) == pytest.approx(0.4)
    topo = sample_topology(NET, 0)
    a = baseline_fixed_sgf(NET, topo, 150, seed=1)
    b = baseline_fpa(NET, 0.9, topo, 150, seed=1, fresh_users=False)
    assert np.array_equal(a.per_slot_capacity, b.per_slot_capacity)


def test_rollout_is_paired_across_policies():
    topo = sample_topology(NET, 5)
    seen = []

    def recorder(obs, channel, u):
        seen.append((channel.copy(), u.copy()))
        return uniform_level_policy(NET)(obs, channel, u)

    rollout(recorder, NET, topo, 50, seed=9)
    first = list(seen)
    seen.clear()
    rollout(recorder, NET, topo, 50, seed=9)
    for (c1, u1), (c2, u2) in zip(first, seen):
        assert np.array_equal(c1, c2) and np.array_equal(u1, u2)


def test_compare_open_loop_covers_every_valid_level():
    topo = sample_topology(NET, 0)
    pool = PowerPool([(0.1,)] * 3, [(1.0,)] * 3, np.full(3, np.inf))
    rows = compare_open_loop(pool, NET, topo, 12, 100, seed=0)
    assert [r.protocol for r in rows][0] == "pooled_open_loop"
    assert len(rows) == 1 + 9
    for r in rows:
        assert 0.0 <= r.gb_violation_rate <= 1.0
        assert r.slots == 100


def test_members_above_threshold_are_flagged():
    topo = sample_topology(NET, 0)
    acts = np.random.default_rng(1).integers(0, 27, (200, 12))
    pool = extract_pools(acts, NET, topology=topo)
    median_gain = (NET.cell_radius / np.sqrt(2.0)) ** -NET.path_loss_exp
    for m in range(NET.num_subchannels):
        over = {p for p in pool.levels[m] if p * median_gain > pool.phi[m]}
        assert over == set(pool.exceeds_phi[m])
