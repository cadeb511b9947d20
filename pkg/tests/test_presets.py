import pytest

from fldp import harness, presets
from fldp.privacy import group_privacy_convert

# Independent copy of the published hyperparameter tables (sigma = local
# noise magnitude, S = clipping bound, z = central noise scale, eps =
# privacy budget; delta = 1e-5 throughout).
ROBUSTNESS_TABLE = [
    ("emnist_ldp", "EMNIST", "LDP", 0.8, 5.0, None, 3.0),
    ("emnist_ldp_eps7.5", "EMNIST", "LDP", 0.1, 5.0, None, 7.5),
    ("emnist_cdp", "EMNIST", "CDP", None, 3.0, 2.5, 3.0),
    ("emnist_cdp_eps8", "EMNIST", "CDP", None, 5.0, 1.0, 8.0),
    ("cifar10_ldp", "CIFAR10", "LDP", 0.5, 10.0, None, 2.5),
    ("cifar10_ldp_eps7", "CIFAR10", "LDP", 0.01, 10.0, None, 7.0),
    ("cifar10_cdp", "CIFAR10", "CDP", None, 10.0, 1.4, 2.8),
    ("cifar10_cdp_eps6", "CIFAR10", "CDP", None, 15.0, 1.0, 6.0),
    ("reddit_ldp", "Reddit", "LDP", 0.025, 5.0, None, 1.7),
    ("reddit_cdp", "Reddit", "CDP", None, 10.0, 1.0, 1.2),
]

PRIVACY_TABLE = [
    ("cifar100_ldp", "CIFAR100", "LDP", 0.001, 10.0, None, 8.6),
    ("cifar100_cdp", "CIFAR100", "CDP", None, 15.0, 0.8, 5.8),
    ("purchase100_ldp", "Purchase100", "LDP", 0.001, 5.0, None, 8.6),
    ("purchase100_cdp", "Purchase100", "CDP", None, 15.0, 1.1, 5.8),
    ("lfw_ldp", "LFW", "LDP", 0.001, 12.0, None, 10.7),
    ("lfw_cdp", "LFW", "CDP", None, 10.0, 1.4, 4.7),
    ("lfw_cdp_eps8.1", "LFW", "CDP", None, 10.0, 0.7, 8.1),
]

GROUP_TABLE = [
    ("EMNIST", 2400, 3.0, 7200),
    ("EMNIST-setting2", 100, 3.0, 300),
    ("CIFAR10", 100, 2.5, 250),
    ("Reddit", 51548, 1.7, 87632),
    ("CIFAR100", 4, 8.6, 34),
    ("Purchase100", 4, 8.6, 34),
    ("LFW", 5, 10.7, 54),
]


@pytest.mark.parametrize("name,dataset,mech,sigma,S,z,eps", ROBUSTNESS_TABLE + PRIVACY_TABLE)
def test_hyperparam_presets_match_tables(name, dataset, mech, sigma, S, z, eps):
    row = presets.get_hyperparam_preset(name)
    assert row["dataset"] == dataset
    assert row["mechanism"] == mech
    assert row["sigma"] == sigma
    assert row["S"] == S
    assert row["z"] == z
    assert row["eps"] == eps
    assert row["delta"] == 1e-5


@pytest.mark.parametrize("dataset,n,eps_ldp,bound", GROUP_TABLE)
def test_group_privacy_rows_within_rounding(dataset, n, eps_ldp, bound):
    assert abs(group_privacy_convert(eps_ldp, n) - bound) <= 0.5
    row = next(r for r in presets.GROUP_PRIVACY_TABLE if r["dataset"] == dataset)
    assert row["participants"] == n
    assert row["eps_ldp"] == eps_ldp
    assert row["eps_cdp_bound"] == bound


@pytest.mark.parametrize("name", sorted(presets.EXPERIMENT_PRESETS))
def test_every_experiment_preset_parses(name):
    cfg = harness.parse_config(presets.get_experiment_preset(name))
    assert cfg.name == name


def test_preset_names_cover_both_families():
    names = presets.preset_names()
    assert "emnist_like_setting1" in names
    assert "emnist_ldp" in names
