"""Bundled presets.

Two families:

* hyperparameter presets: the published LDP/CDP settings per dataset
  (sigma = local noise magnitude, S = clipping bound, z = central noise
  scale, eps = privacy budget, delta = 1e-5 throughout);
* experiment presets: runnable config trees, including desk-scale variants
  whose shrink factors are recorded under the "scale" key.
"""

from __future__ import annotations

import copy

DELTA = 1e-5

# Published hyperparameters, robustness experiments (per dataset/mechanism).
HYPERPARAM_PRESETS: dict[str, dict] = {
    "emnist_ldp":          {"dataset": "EMNIST", "mechanism": "LDP", "sigma": 0.8,   "S": 5.0,  "z": None, "eps": 3.0,  "delta": DELTA},
    "emnist_ldp_eps7.5":   {"dataset": "EMNIST", "mechanism": "LDP", "sigma": 0.1,   "S": 5.0,  "z": None, "eps": 7.5,  "delta": DELTA},
    "emnist_cdp":          {"dataset": "EMNIST", "mechanism": "CDP", "sigma": None,  "S": 3.0,  "z": 2.5,  "eps": 3.0,  "delta": DELTA},
    "emnist_cdp_eps8":     {"dataset": "EMNIST", "mechanism": "CDP", "sigma": None,  "S": 5.0,  "z": 1.0,  "eps": 8.0,  "delta": DELTA},
    "cifar10_ldp":         {"dataset": "CIFAR10", "mechanism": "LDP", "sigma": 0.5,  "S": 10.0, "z": None, "eps": 2.5,  "delta": DELTA},
    "cifar10_ldp_eps7":    {"dataset": "CIFAR10", "mechanism": "LDP", "sigma": 0.01, "S": 10.0, "z": None, "eps": 7.0,  "delta": DELTA},
    "cifar10_cdp":         {"dataset": "CIFAR10", "mechanism": "CDP", "sigma": None, "S": 10.0, "z": 1.4,  "eps": 2.8,  "delta": DELTA},
    "cifar10_cdp_eps6":    {"dataset": "CIFAR10", "mechanism": "CDP", "sigma": None, "S": 15.0, "z": 1.0,  "eps": 6.0,  "delta": DELTA},
    "reddit_ldp":          {"dataset": "Reddit", "mechanism": "LDP", "sigma": 0.025, "S": 5.0,  "z": None, "eps": 1.7,  "delta": DELTA},
    "reddit_cdp":          {"dataset": "Reddit", "mechanism": "CDP", "sigma": None,  "S": 10.0, "z": 1.0,  "eps": 1.2,  "delta": DELTA},
    # privacy (inference) experiments
    "cifar100_ldp":        {"dataset": "CIFAR100", "mechanism": "LDP", "sigma": 0.001, "S": 10.0, "z": None, "eps": 8.6, "delta": DELTA},
    "cifar100_cdp":        {"dataset": "CIFAR100", "mechanism": "CDP", "sigma": None,  "S": 15.0, "z": 0.8,  "eps": 5.8, "delta": DELTA},
    "purchase100_ldp":     {"dataset": "Purchase100", "mechanism": "LDP", "sigma": 0.001, "S": 5.0,  "z": None, "eps": 8.6, "delta": DELTA},
    "purchase100_cdp":     {"dataset": "Purchase100", "mechanism": "CDP", "sigma": None,  "S": 15.0, "z": 1.1,  "eps": 5.8, "delta": DELTA},
    "lfw_ldp":             {"dataset": "LFW", "mechanism": "LDP", "sigma": 0.001, "S": 12.0, "z": None, "eps": 10.7, "delta": DELTA},
    "lfw_cdp":             {"dataset": "LFW", "mechanism": "CDP", "sigma": None,  "S": 10.0, "z": 1.4,  "eps": 4.7,  "delta": DELTA},
    "lfw_cdp_eps8.1":      {"dataset": "LFW", "mechanism": "CDP", "sigma": None,  "S": 10.0, "z": 0.7,  "eps": 8.1,  "delta": DELTA},
}

# Group-privacy conversion rows (record-level eps, participants, converted).
GROUP_PRIVACY_TABLE = [
    {"dataset": "EMNIST", "participants": 2400, "eps_ldp": 3.0, "eps_cdp_bound": 7200},
    {"dataset": "EMNIST-setting2", "participants": 100, "eps_ldp": 3.0, "eps_cdp_bound": 300},
    {"dataset": "CIFAR10", "participants": 100, "eps_ldp": 2.5, "eps_cdp_bound": 250},
    {"dataset": "Reddit", "participants": 51548, "eps_ldp": 1.7, "eps_cdp_bound": 87632},
    {"dataset": "CIFAR100", "participants": 4, "eps_ldp": 8.6, "eps_cdp_bound": 34},
    {"dataset": "Purchase100", "participants": 4, "eps_ldp": 8.6, "eps_cdp_bound": 34},
    {"dataset": "LFW", "participants": 5, "eps_ldp": 10.7, "eps_cdp_bound": 54},
]


# ---------------------------------------------------------------------------
# Experiment presets
# ---------------------------------------------------------------------------

def _backdoor_base(n_clients: int, k: int, rounds: int, reps: int) -> dict:
    return {
        "name": "",
        "master_seed": 20240,
        "repetitions": reps,
        "rounds": rounds,
        "n_clients": n_clients,
        "selection": {"kind": "fixed", "k": k},
        "dataset": {"kind": "blobs", "num_classes": 5, "dim": 16, "per_class": 560,
                    "property_fraction": 0.0, "separation": 4.0},
        "partition": {"kind": "iid"},
        "model": {"hidden": [32]},
        "client": {"epochs": 2, "batch_size": 20, "lr": 0.1},
        "server": {"aggregator": "plain", "server_lr": 1.0, "delta": DELTA},
        "ldp": None,
        "attack": {"family": "backdoor", "attacker_count": 1, "in_every_round": True,
                   "kind": "single_pixel", "target_label": 0, "pixel_index": 15,
                   "trigger_value": 2.9, "poison_fraction": 0.95, "boost_mode": "replacement",
                   "attacker_epochs": 20},
        "eval": {"holdout_fraction": 0.2},
        "scale": {"reference": "setting1", "n_factor": 50, "round_factor": 5},
    }


def _desk_backdoor_presets() -> dict[str, dict]:
    presets = {}
    base = _backdoor_base(48, 6, 60, 5)

    clean = copy.deepcopy(base)
    clean["name"] = "desk_blobs_clean"
    clean["attack"] = {"family": "none"}
    presets["desk_blobs_clean"] = clean

    none = copy.deepcopy(base)
    none["name"] = "desk_backdoor_no_defense"
    presets["desk_backdoor_no_defense"] = none

    nb = copy.deepcopy(base)
    nb["name"] = "desk_backdoor_norm_bound"
    nb["server"] = {"aggregator": "norm_bound", "server_lr": 1.0, "norm_threshold": 0.4,
                    "delta": DELTA}
    presets["desk_backdoor_norm_bound"] = nb

    wd = copy.deepcopy(base)
    wd["name"] = "desk_backdoor_weak_dp"
    wd["server"] = {"aggregator": "weak_dp", "server_lr": 1.0, "norm_threshold": 0.4,
                    "weak_dp_sigma": 0.03, "delta": DELTA}
    presets["desk_backdoor_weak_dp"] = wd

    ldp = copy.deepcopy(base)
    ldp["name"] = "desk_backdoor_ldp"
    ldp["ldp"] = {"clip_bound": 0.5, "noise_multiplier": 2.5, "sampling_prob": 0.25,
                  "noise_scales_with_S": True, "scope": "all"}
    presets["desk_backdoor_ldp"] = ldp

    cdp = copy.deepcopy(base)
    cdp["name"] = "desk_backdoor_cdp"
    cdp["server"] = {"aggregator": "cdp", "server_lr": 1.0, "delta": DELTA,
                     "cdp": {"clip_bound": 0.5, "noise_scale": 0.8, "budget_threshold": 1000.0,
                             "sigma_mode": "per_client_zS_over_C"}}
    presets["desk_backdoor_cdp"] = cdp
    return presets


def _optout_presets() -> dict[str, dict]:
    base = _backdoor_base(20, 20, 40, 3)
    base["master_seed"] = 20241
    base["attack"]["attacker_count"] = 4
    base["attack"]["in_every_round"] = False
    base["scale"] = {"reference": "setting2", "attacker_fraction": 0.2}
    base["ldp"] = {"clip_bound": 0.5, "noise_multiplier": 2.5, "sampling_prob": 0.25,
                   "noise_scales_with_S": True, "scope": "all"}

    all_ = copy.deepcopy(base)
    all_["name"] = "desk_ldp_optout_all"
    exempt = copy.deepcopy(base)
    exempt["name"] = "desk_ldp_optout_exempt"
    exempt["ldp"]["scope"] = "non_attackers"
    return {"desk_ldp_optout_all": all_, "desk_ldp_optout_exempt": exempt}


def _mia_presets() -> dict[str, dict]:
    base = {
        "name": "desk_mia_passive",
        "master_seed": 20242,
        "repetitions": 5,
        "rounds": 30,
        "n_clients": 4,
        "selection": {"kind": "fixed", "k": 4},
        "dataset": {"kind": "blobs", "num_classes": 4, "dim": 32, "per_class": 160,
                    "property_fraction": 0.0, "separation": 1.8},
        "partition": {"kind": "iid"},
        "model": {"hidden": [64]},
        "client": {"epochs": 5, "batch_size": 20, "lr": 0.2},
        "server": {"aggregator": "plain", "server_lr": 1.0, "delta": DELTA},
        "ldp": None,
        "attack": {"family": "mia", "role": "local", "mode": "passive", "target_client": 1,
                   "attacker_client": 0, "n_candidates": 30, "ascent_gamma": 0.0075,
                   "ascent_start_frac": 0.6},
        "eval": {"holdout_fraction": 0.3},
        "scale": {"reference": "inference-4-clients"},
    }
    passive = copy.deepcopy(base)
    active = copy.deepcopy(base)
    active["name"] = "desk_mia_active"
    active["attack"]["role"] = "global"
    active["attack"]["mode"] = "active_gradient_ascent"
    ldp = copy.deepcopy(base)
    ldp["name"] = "desk_mia_passive_ldp"
    ldp["ldp"] = {"clip_bound": 0.5, "noise_multiplier": 2.5, "sampling_prob": 0.25,
                  "noise_scales_with_S": True, "scope": "all"}
    iso = copy.deepcopy(base)
    iso["name"] = "desk_mia_isolating"
    iso["attack"]["role"] = "global"
    iso["attack"]["mode"] = "isolating_gradient_ascent"
    return {"desk_mia_passive": passive, "desk_mia_active": active,
            "desk_mia_passive_ldp": ldp, "desk_mia_isolating": iso}


def _propinf_presets() -> dict[str, dict]:
    base = {
        "name": "desk_propinf",
        "master_seed": 20243,
        "repetitions": 5,
        "rounds": 30,
        "n_clients": 6,
        "selection": {"kind": "fixed", "k": 6},
        "dataset": {"kind": "blobs", "num_classes": 4, "dim": 16, "per_class": 450,
                    "property_fraction": 0.15, "separation": 4.0, "property_strength": 10.0},
        "partition": {"kind": "by_property", "target_client": 0},
        "model": {"hidden": [32]},
        "client": {"epochs": 2, "batch_size": 20, "lr": 0.1},
        "server": {"aggregator": "plain", "server_lr": 1.0, "delta": DELTA},
        "ldp": None,
        "attack": {"family": "propinf", "target_client": 0, "control_count": 5,
                   "batch_size": 32, "pca_components": 8},
        "eval": {"holdout_fraction": 0.2, "aux_size": 150},
        "scale": {"reference": "property-inference"},
    }
    plain = copy.deepcopy(base)
    ldp = copy.deepcopy(base)
    ldp["name"] = "desk_propinf_ldp"
    ldp["ldp"] = {"clip_bound": 1.0, "noise_multiplier": 1.0, "sampling_prob": 0.5,
                  "noise_scales_with_S": True, "scope": "all"}
    null = copy.deepcopy(base)
    null["name"] = "desk_propinf_null"
    null["dataset"]["property_fraction"] = 0.0
    null["partition"] = {"kind": "iid"}
    # With no signal anywhere, the per-repetition AUC is close to a rank
    # statistic of one client among the controls; many independent worlds
    # are needed for the mean to concentrate at 1/2.
    null["repetitions"] = 160
    return {"desk_propinf": plain, "desk_propinf_ldp": ldp, "desk_propinf_null": null}


def _setting1_presets() -> dict[str, dict]:
    # Published setting: 2,400 participants (about 100 examples each), 30
    # selected per round with one attacker, 5 local epochs, batch 20,
    # client lr 0.1, server lr 1, 300 rounds, averaged over 5 runs.
    full = {
        "name": "emnist_like_setting1",
        "master_seed": 20239,
        "repetitions": 5,
        "rounds": 300,
        "n_clients": 2400,
        "selection": {"kind": "fixed", "k": 30},
        "dataset": {"kind": "blobs", "num_classes": 10, "dim": 64, "per_class": 30000,
                    "property_fraction": 0.0, "separation": 4.0},
        "partition": {"kind": "two_class_noniid"},
        "model": {"hidden": [32]},
        "client": {"epochs": 5, "batch_size": 20, "lr": 0.1},
        "server": {"aggregator": "plain", "server_lr": 1.0, "delta": DELTA},
        "ldp": None,
        "attack": {"family": "backdoor", "attacker_count": 1, "in_every_round": True,
                   "kind": "single_pixel", "target_label": 0, "pixel_index": 63,
                   "trigger_value": 2.9, "poison_fraction": 0.95, "boost_mode": "replacement",
                   "attacker_epochs": 20},
        "eval": {"holdout_fraction": 0.2},
        "scale": {},
    }
    desk = copy.deepcopy(full)
    desk["name"] = "emnist_like_setting1_desk"
    desk["n_clients"] = 48
    desk["selection"] = {"kind": "fixed", "k": 6}
    desk["rounds"] = 60
    desk["dataset"].update({"num_classes": 5, "dim": 16, "per_class": 560})
    desk["attack"]["pixel_index"] = 15
    desk["scale"] = {"reference": "emnist_like_setting1", "n_factor": 50, "round_factor": 5}
    return {"emnist_like_setting1": full, "emnist_like_setting1_desk": desk}


def _experiment_presets() -> dict[str, dict]:
    presets: dict[str, dict] = {}
    presets.update(_setting1_presets())
    presets.update(_desk_backdoor_presets())
    presets.update(_optout_presets())
    presets.update(_mia_presets())
    presets.update(_propinf_presets())
    return presets


EXPERIMENT_PRESETS: dict[str, dict] = _experiment_presets()


def preset_names() -> list[str]:
    return sorted(EXPERIMENT_PRESETS) + sorted(HYPERPARAM_PRESETS)


def get_experiment_preset(name: str) -> dict:
    if name not in EXPERIMENT_PRESETS:
        raise KeyError(name)
    return copy.deepcopy(EXPERIMENT_PRESETS[name])


def get_hyperparam_preset(name: str) -> dict:
    if name not in HYPERPARAM_PRESETS:
        raise KeyError(name)
    return dict(HYPERPARAM_PRESETS[name])
