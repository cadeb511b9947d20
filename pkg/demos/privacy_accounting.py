#!/usr/bin/env python3
"""A tour of the privacy accounting toolbox.

Shows the Renyi accountant for the subsampled Gaussian mechanism (the engine
behind both DP-SGD and central-DP aggregation), the grid conversion to
(eps, delta), naive sequential composition as used by weak DP, and the
group-privacy upper bound for comparing record-level and participant-level
budgets.
"""

import numpy as np

from fldp.privacy import (
    RDP_ORDERS,
    PrivacyLedger,
    gaussian_mechanism_eps,
    group_privacy_convert,
    rdp_subsampled_gaussian,
    rdp_to_dp,
    sequential_composition,
)

DELTA = 1e-5


def main() -> None:
    print("== subsampled Gaussian accountant ==")
    print("one full-batch Gaussian release (q=1, z=1):"
          f" eps = {rdp_to_dp(rdp_subsampled_gaussian(1.0, 1.0, 1), DELTA):.3f}")
    for steps in (100, 1000, 10000):
        eps = rdp_to_dp(rdp_subsampled_gaussian(0.01, 1.1, steps), DELTA)
        print(f"DP-SGD-style composition (q=0.01, z=1.1, {steps:5d} steps): eps = {eps:.3f}")

    curve = rdp_subsampled_gaussian(0.01, 1.1, 1000)
    best = RDP_ORDERS[np.argmin(curve + np.log(1 / DELTA) / (RDP_ORDERS - 1))]
    print(f"optimal Renyi order for the conversion: alpha = {best}")

    print("\n== weak DP spends linearly ==")
    eps_round = gaussian_mechanism_eps(sensitivity=0.4 / 6, noise_std=0.03, delta=DELTA)
    for rounds in (10, 60, 300):
        print(f"{rounds:3d} rounds of per-round eps {eps_round:.2f}:"
              f" total {sequential_composition([eps_round] * rounds):.1f}")

    print("\n== one ledger, both trackers ==")
    ledger = PrivacyLedger(DELTA)
    for _ in range(60):
        ledger.accumulate_rdp(q=0.125, z=0.8, steps=1)  # CDP round
        ledger.accumulate_naive(eps_round)              # weak-DP round
    print(f"after 60 rounds: accountant eps = {ledger.epsilon():.2f},"
          f" naive sum = {ledger.naive_eps_sum:.1f}")

    print("\n== group privacy: record-level eps, participant-level bound ==")
    for eps, n in ((3.0, 2400), (2.5, 100), (8.6, 4)):
        print(f"LDP eps={eps} over {n} records -> participant-level bound"
              f" {group_privacy_convert(eps, n):.0f}")
    print("\nThe bounds are orders of magnitude above the budgets central DP")
    print("achieves directly, which is why the two are compared empirically.")


if __name__ == "__main__":
    main()
