"""Independent oracle for the subsampled-Gaussian Renyi accountant.

Evaluates the defining integral directly with mpmath arbitrary-precision
quadrature, sharing no code with the production accountant (which uses a
log-space series). Running this module as a script regenerates the frozen
expected-value table in rdp_oracle_table.py.

    A(alpha) = E_{x ~ N(0, sigma^2)} [((1-q) + q * exp((2x-1)/(2 sigma^2)))^alpha]
    eps(alpha) = log(A(alpha)) / (alpha - 1)
"""

from __future__ import annotations

import mpmath as mp

ORACLE_Q = 0.01
ORACLE_Z = 1.1


def oracle_per_step_eps(q: float, sigma: float, alpha: float, dps: int = 40) -> float:
    """One-step RDP at a single order via direct numerical integration."""
    with mp.workdps(dps):
        q_, s_, a_ = mp.mpf(q), mp.mpf(sigma), mp.mpf(alpha)

        def integrand(x):
            dens = mp.exp(-x * x / (2 * s_ * s_)) / (s_ * mp.sqrt(2 * mp.pi))
            ratio = (1 - q_) + q_ * mp.exp((2 * x - 1) / (2 * s_ * s_))
            return dens * ratio ** a_

        # The integrand peaks near x = alpha for large alpha; split accordingly.
        pts = [-mp.inf, -10 * s_, 0, a_ / 2, a_, 2 * a_ + 10 * s_, mp.inf]
        val = mp.quad(integrand, pts)
        return float(mp.log(val) / (a_ - 1))


def main() -> None:
    import pathlib

    from fldp.privacy import RDP_ORDERS

    lines = [
        '"""Frozen per-step RDP values from the mpmath integral oracle',
        "(regenerate with `python tests/rdp_oracle.py`). Order grid matches",
        'fldp.privacy.RDP_ORDERS; parameters q=%r, z=%r."""' % (ORACLE_Q, ORACLE_Z),
        "",
        "ORACLE_Q = %r" % ORACLE_Q,
        "ORACLE_Z = %r" % ORACLE_Z,
        "",
        "PER_STEP_EPS = [",
    ]
    for alpha in RDP_ORDERS:
        val = oracle_per_step_eps(ORACLE_Q, ORACLE_Z, float(alpha))
        lines.append("    (%r, %r)," % (float(alpha), val))
    lines.append("]")
    out = pathlib.Path(__file__).with_name("rdp_oracle_table.py")
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {out} ({len(RDP_ORDERS)} orders)")


if __name__ == "__main__":
    main()
