import math

import pytest

from sgfnoma.config import ConfigError, ExperimentConfig, NetworkConfig, dbm_to_watts, parse_config


def test_defaults_match_reference_setup():
    cfg = parse_config(None)
    net = cfg.network
    assert net.cell_radius == 1000.0
    assert net.path_loss_exp == 3.0
    assert net.noise_power == pytest.approx(1e-12)
    assert net.subchannel_bandwidth == 10e3
    assert net.num_subchannels == 3
    assert net.total_bandwidth == pytest.approx(30e3)
    assert net.power_levels == pytest.approx((0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9))
    assert net.gb_target_se == 15.0
    assert net.gf_target_se == 4.0
    assert net.max_gf_per_channel == 4
    assert cfg.learning_rate == 1e-3
    assert cfg.discount == 0.9
    assert cfg.replay_capacity == 10_000
    assert cfg.batch_size == 32
    assert cfg.target_update == 1000
    assert (cfg.epsilon_start, cfg.epsilon_end) == (1.0, 0.01)
    assert (cfg.episodes, cfg.steps_per_episode) == (500, 100)


def test_empty_file_gives_defaults(tmp_path):
    path = tmp_path / "empty.yaml"
    path.write_text("")
    assert parse_config(path) == ExperimentConfig()


def test_flag_overrides_file(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("episodes: 20\nnetwork:\n  num_subchannels: 2\n")
    cfg = parse_config(path, {"episodes": 50})
    assert cfg.episodes == 50
    assert cfg.network.num_subchannels == 2


def test_network_keys_accepted_at_top_level(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("gb_fixed_power: 2.5\nmax_channel_gf_power: inf\n")
    cfg = parse_config(path)
    assert cfg.network.gb_fixed_power == 2.5
    assert math.isinf(cfg.network.max_channel_gf_power)


def test_unknown_key_named(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("epsiodes: 3\n")
    with pytest.raises(ConfigError, match="epsiodes"):
        parse_config(path)


@pytest.mark.parametrize("key,value", [
    ("episodes", 0),
    ("discount", 1.5),
    ("path_loss_exp", 2.0),
    ("noise_power", 0.0),
    ("max_gf_per_channel", 0),
    ("algorithm", "sarsa"),
    ("power_levels", "0.5,0.2"),
])
def test_out_of_range_named(key, value):
    with pytest.raises(ConfigError, match=key):
        parse_config(None, {key: value})


def test_gf_target_above_gb_target_rejected():
    with pytest.raises(ConfigError, match="gb_target_se"):
        NetworkConfig(gb_target_se=4.0, gf_target_se=5.0)


def test_bandwidth_identity():
    net = NetworkConfig(num_subchannels=5)
    assert net.subchannel_bandwidth * net.num_subchannels == net.total_bandwidth


def test_dbm_conversion():
    assert dbm_to_watts(-90) == pytest.approx(1e-12)
    assert dbm_to_watts(30) == pytest.approx(1.0)


def test_round_trip_through_dict():
    cfg = ExperimentConfig(episodes=7).replace(num_subchannels=2, power_levels=(0.2, 0.4))
    from sgfnoma.config import config_from_mapping

    assert config_from_mapping(cfg.to_dict()) == cfg


def test_malformed_file(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("- a\n- b\n")
    with pytest.raises(ConfigError):
        parse_config(path)
