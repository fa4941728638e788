"""Observed convergence rates of the leading and first-order approximations.

The full PDE is solved on a 1D liquidity grid for a few moderate epsilons and
compared with the expansions in the bulk of the invariant law.

    python3 demos/accuracy_rates.py
"""

from fastexec.hjb import accuracy_sweep, sweep_params


def main() -> None:
    p = sweep_params()
    res = accuracy_sweep(p, [0.1, 0.05, 0.025], order=1, delta=0.1 * p.T)
    print("eps       order-0 error  order-1 error")
    for eps, e0, e1, _ in res.rows():
        print(f"{eps:<9g} {e0:.3e}      {e1:.3e}")
    print(f"slopes: order 0 {res.slope_order0:.3f}, order 1 {res.slope_order1:.3f}")


if __name__ == "__main__":
    main()
