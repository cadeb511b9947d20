"""Acceptance suite: one test per criterion, each printing a PASS line with
its elapsed time (run with -s to see them). Criteria 5 and 9 share the
backdoor/defense experiment family; criterion 9 re-executes it from scratch
and byte-compares the persisted metrics.
"""

import math
import time

import numpy as np
import pytest

from fldp import harness, presets
from fldp.attacks import backdoor_replacement_update
from fldp.fl import ClientUpdate, aggregate_plain, aggregate_weak_dp
from fldp.nn import Batch, ModelArch, ParamVector, init_model, loss_and_grad
from fldp.privacy import (
    RDP_ORDERS,
    PrivacyLedger,
    gaussian_mechanism_eps,
    group_privacy_convert,
    rdp_subsampled_gaussian,
    rdp_to_dp,
)
from fldp.rng import RngStream

from rdp_oracle_table import ORACLE_Q, ORACLE_Z, PER_STEP_EPS

DELTA = 1e-5
CHAIN = ["desk_blobs_clean", "desk_backdoor_no_defense", "desk_backdoor_norm_bound",
         "desk_backdoor_weak_dp", "desk_backdoor_ldp", "desk_backdoor_cdp"]


def crit(num: int, detail: str, elapsed: float, limit: float):
    print(f"\nACCEPTANCE {num}: PASS ({elapsed:.1f}s < {limit:.0f}s) {detail}")
    assert elapsed < limit, f"criterion {num} exceeded its time budget"


def run_preset(name: str) -> harness.RunArtifacts:
    return harness.run_experiment(harness.parse_config(presets.get_experiment_preset(name)))


def execute_chain(out_root) -> dict[str, dict]:
    results = {}
    for name in CHAIN:
        artifacts = run_preset(name)
        paths = harness.write_outputs(artifacts, str(out_root / name))
        results[name] = {"artifacts": artifacts, "paths": paths}
    return results


@pytest.fixture(scope="module")
def chain_run(tmp_path_factory):
    t0 = time.time()
    out = execute_chain(tmp_path_factory.mktemp("chain_a"))
    return out, time.time() - t0


def test_criterion_1_group_privacy_table():
    t0 = time.time()
    assert group_privacy_convert(3.0, 2400) == 7200.0
    assert group_privacy_convert(2.5, 100) == 250.0
    assert abs(group_privacy_convert(8.6, 4) - 34) <= 0.5
    assert abs(group_privacy_convert(1.7, 51548) - 87632) <= 0.5
    crit(1, "group-privacy conversion reproduces the published table", time.time() - t0, 1.0)


def test_criterion_2_replacement_exactness():
    t0 = time.time()
    streams = RngStream(140)
    worst = 0.0
    trials = 0
    for eta in (0.5, 1.0, 2.0):
        for k in range(34 if eta != 1.0 else 32):
            rng = streams.derive("trial", int(eta * 2), k)
            dim = int(rng.integers(3, 40))
            shapes = ((dim,),)
            theta_r = ParamVector(rng.normal(scale=3.0, size=dim), shapes)
            theta_star = ParamVector(rng.normal(scale=3.0, size=dim), shapes)
            n_benign = [int(n) for n in rng.integers(1, 30, size=int(rng.integers(1, 8)))]
            n_att = int(rng.integers(1, 30))
            n_total = sum(n_benign) + n_att
            updates = [ClientUpdate(ParamVector(np.zeros(dim), shapes), n, cid + 1)
                       for cid, n in enumerate(n_benign)]
            updates.append(backdoor_replacement_update(theta_star, theta_r, n_total, n_att, eta, 0))
            theta_next = theta_r + eta * aggregate_plain(updates)
            worst = max(worst, float(np.max(np.abs(theta_next.values - theta_star.values))))
            trials += 1
    assert trials == 100
    assert worst <= 1e-9
    crit(2, f"model replacement exact over 100 trials (max err {worst:.1e})", time.time() - t0, 5.0)


def _draw_smooth_case(arch: ModelArch, rng, margin: float = 1e-3):
    """Random (model, batch) kept off the ReLU kink set: central differences
    only estimate a derivative where the loss is smooth within the FD step,
    and zero-bias init can land a pre-activation exactly at 0."""
    while True:
        model = init_model(arch, rng)
        x = rng.normal(size=(5, arch.input_dim))
        y = rng.integers(0, arch.num_classes, size=5)
        tensors = model.tensors()
        h, min_pre = x, np.inf
        for layer in range(len(arch.layer_widths) - 2):
            z = h @ tensors[2 * layer] + tensors[2 * layer + 1]
            min_pre = min(min_pre, float(np.abs(z).min()))
            h = np.maximum(z, 0.0)
        if min_pre > margin:
            return model, Batch(x, y)


def test_criterion_3_gradient_correctness():
    t0 = time.time()
    streams = RngStream(141)
    families = {"logistic": (5, 3), "one_hidden": (4, 6, 3), "two_hidden": (4, 5, 4, 3)}
    worst = 0.0
    for fam, widths in families.items():
        arch = ModelArch(widths)
        for trial in range(50):
            rng = streams.derive(fam, trial)
            model, batch = _draw_smooth_case(arch, rng)
            _, grad = loss_and_grad(model, arch, batch)
            fd = np.empty_like(grad.values)
            base = model.values
            for i in range(base.size):
                up, down = base.copy(), base.copy()
                up[i] += 1e-5
                down[i] -= 1e-5
                lu, _ = loss_and_grad(ParamVector(up, model.shapes), arch, batch)
                ld, _ = loss_and_grad(ParamVector(down, model.shapes), arch, batch)
                fd[i] = (lu - ld) / 2e-5
            rel = np.linalg.norm(fd - grad.values) / max(np.linalg.norm(fd), np.linalg.norm(grad.values), 1e-12)
            worst = max(worst, float(rel))
    assert worst <= 1e-4
    crit(3, f"finite-difference agreement over 150 checks (worst rel err {worst:.1e})",
         time.time() - t0, 30.0)


def test_criterion_4_accountant():
    t0 = time.time()
    # exact additivity on step splits whose scalings are float-exact
    for q, z in ((1.0, 1.0), (0.01, 1.1)):
        for a, b in ((1, 1), (2, 4), (8, 32), (256, 256)):
            lhs = rdp_subsampled_gaussian(q, z, a) + rdp_subsampled_gaussian(q, z, b)
            assert np.array_equal(lhs, rdp_subsampled_gaussian(q, z, a + b))
    # monotonicity on a 5x5 grid
    zs = (0.6, 0.9, 1.2, 1.6, 2.2)
    steps_grid = (1, 10, 50, 200, 1000)
    eps = {(z, s): rdp_to_dp(rdp_subsampled_gaussian(0.05, z, s), DELTA)
           for z in zs for s in steps_grid}
    for z in zs:
        col = [eps[(z, s)] for s in steps_grid]
        assert col == sorted(col), "eps must grow with steps"
    for s in steps_grid:
        row = [eps[(z, s)] for z in zs]
        assert row == sorted(row, reverse=True), "eps must shrink with noise"
    # single Gaussian release vs the independently scripted optimum
    eps_single = rdp_to_dp(rdp_subsampled_gaussian(1.0, 1.0, 1), DELTA)
    oracle_single = 5.75 / 2 + math.log(1e5) / 4.75  # grid optimum 5.2988
    assert abs(eps_single - 5.30) <= 1e-2
    assert abs(eps_single - oracle_single) <= 1e-12
    # subsampled curve vs the mpmath quadrature oracle, all 254 orders
    curve = rdp_subsampled_gaussian(ORACLE_Q, ORACLE_Z, 1000)
    oracle = 1000.0 * np.array([v for _, v in PER_STEP_EPS])
    max_diff = float(np.max(np.abs(curve - oracle)))
    assert max_diff <= 1e-6
    assert len(PER_STEP_EPS) == len(RDP_ORDERS)
    crit(4, f"accountant additive, monotone, matches oracles (curve diff {max_diff:.1e})",
         time.time() - t0, 60.0)


def test_criterion_5_backdoor_defense_ordering(chain_run):
    results, elapsed = chain_run
    summaries = {name: results[name]["artifacts"].summary for name in CHAIN}
    clean_main = summaries["desk_blobs_clean"]["final_main_accuracy_mean"]
    bd = {name: summaries[name]["final_backdoor_accuracy_mean"] for name in CHAIN[1:]}
    none, nb = bd["desk_backdoor_no_defense"], bd["desk_backdoor_norm_bound"]
    wd, ldp, cdp = bd["desk_backdoor_weak_dp"], bd["desk_backdoor_ldp"], bd["desk_backdoor_cdp"]
    assert none >= 0.80, f"undefended backdoor accuracy {none:.3f}"
    assert nb <= none - 0.25, f"norm bounding reduced only to {nb:.3f} from {none:.3f}"
    assert wd <= nb, f"weak DP {wd:.3f} above norm bounding {nb:.3f}"
    assert ldp <= wd, f"LDP {ldp:.3f} above weak DP {wd:.3f}"
    assert cdp <= wd, f"CDP {cdp:.3f} above weak DP {wd:.3f}"
    for name in CHAIN[1:]:
        main_acc = summaries[name]["final_main_accuracy_mean"]
        assert main_acc >= 0.60 * clean_main, f"{name} main accuracy {main_acc:.3f} too low"
    detail = (f"backdoor {none:.2f} -> nb {nb:.2f} / wd {wd:.2f} / ldp {ldp:.2f} / cdp {cdp:.2f}"
              f" (clean main {clean_main:.2f})")
    crit(5, detail, elapsed, 600.0)


def test_criterion_6_ldp_optout_amplification():
    t0 = time.time()
    all_on = run_preset("desk_ldp_optout_all").summary["final_backdoor_accuracy_mean"]
    exempt = run_preset("desk_ldp_optout_exempt").summary["final_backdoor_accuracy_mean"]
    assert exempt - all_on >= 0.10, f"opt-out gap {exempt - all_on:.3f}"
    crit(6, f"attacker opt-out boosts backdoor {all_on:.2f} -> {exempt:.2f}", time.time() - t0, 300.0)


def test_criterion_7_mia_mitigation():
    t0 = time.time()
    passive = run_preset("desk_mia_passive").summary["attack_metric_mean"]
    with_ldp = run_preset("desk_mia_passive_ldp").summary["attack_metric_mean"]
    active = run_preset("desk_mia_active").summary["attack_metric_mean"]
    assert passive >= 0.60, f"passive AUC {passive:.3f}"
    assert with_ldp <= 0.55, f"LDP-defended AUC {with_ldp:.3f}"
    assert active >= passive, f"active {active:.3f} below passive {passive:.3f}"
    crit(7, f"MIA AUC passive {passive:.2f}, active {active:.2f}, under LDP {with_ldp:.2f}",
         time.time() - t0, 300.0)


def test_criterion_8_property_inference():
    t0 = time.time()
    strong = run_preset("desk_propinf").summary["attack_metric_mean"]
    with_ldp = run_preset("desk_propinf_ldp").summary["attack_metric_mean"]
    null = run_preset("desk_propinf_null").summary["attack_metric_mean"]
    assert strong >= 0.80, f"strong-signal AUC {strong:.3f}"
    assert strong - with_ldp <= 0.10, f"LDP dropped AUC by {strong - with_ldp:.3f}"
    assert abs(null - 0.5) <= 0.05, f"null AUC {null:.3f}"
    crit(8, f"propinf AUC {strong:.2f}, under LDP {with_ldp:.2f}, null {null:.2f}",
         time.time() - t0, 300.0)


def test_criterion_9_determinism(chain_run, tmp_path_factory):
    first, _ = chain_run
    t0 = time.time()
    second = execute_chain(tmp_path_factory.mktemp("chain_b"))
    for name in CHAIN:
        a = open(first[name]["paths"]["metrics"], "rb").read()
        b = open(second[name]["paths"]["metrics"], "rb").read()
        assert a == b, f"{name}: metrics.csv differs between executions"
        ra = open(first[name]["paths"]["report"], "rb").read()
        rb = open(second[name]["paths"]["report"], "rb").read()
        assert ra == rb, f"{name}: report.json differs between executions"
    crit(9, "re-executed defense suite byte-identical across runs", time.time() - t0, 600.0)


def test_criterion_10_weak_dp_ledger():
    t0 = time.time()
    eps0 = gaussian_mechanism_eps(0.4 / 6, 0.03, DELTA)
    shapes = ((2,),)
    ups = [ClientUpdate(ParamVector(np.array([0.1, 0.2]), shapes), 1, 0),
           ClientUpdate(ParamVector(np.array([0.2, 0.0]), shapes), 1, 1),
           ClientUpdate(ParamVector(np.array([0.0, 0.1]), shapes), 1, 2),
           ClientUpdate(ParamVector(np.array([0.1, 0.1]), shapes), 1, 3),
           ClientUpdate(ParamVector(np.array([0.3, 0.1]), shapes), 1, 4),
           ClientUpdate(ParamVector(np.array([0.2, 0.2]), shapes), 1, 5)]
    streams = RngStream(150)
    for r in (1, 10, 300):
        ledger = PrivacyLedger(DELTA)
        for k in range(r):
            aggregate_weak_dp(ups, 0.4, 0.03, ledger, streams.derive("noise", r, k))
        assert ledger.naive_eps_sum == r * eps0, f"r={r}: {ledger.naive_eps_sum} != {r * eps0}"
    crit(10, "weak-DP ledger reports exactly r * eps0 for r in {1, 10, 300}", time.time() - t0, 1.0)
