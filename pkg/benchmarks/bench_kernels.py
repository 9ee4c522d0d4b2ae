"""Time the compiled kernels against the pure-Python fallback.

Usage::

    python benchmarks/bench_kernels.py [--scenario feeder123] [--repeat 5]

Each kernel is fed the batches of a real slot (every aggregator of the
scenario at slot 1) and timed with ``timeit``; the best of ``--repeat`` runs
is reported together with the speed-up. A whole market slot is timed with
each backend as well.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from gridtrade import kernels
from gridtrade.dno import NetworkOperator
from gridtrade.grid import builtin_scenario
from gridtrade.market import Market


def _cases(scenario_name: str):
    scen = builtin_scenario(scenario_name)
    mk = Market(scen)
    mk.begin_slot(1)
    batches = [a.batch for a in mk.aggs if a.batch is not None]
    mk.close()
    rng = np.random.default_rng(0)
    cohort_args, proj_args = [], []
    for b in batches:
        P = np.tile(rng.normal(0.5, 1.0, b.T), (b.lo.shape[0], 1))
        cohort_args.append((P, b.lo, b.hi, b.inmask, b.kappa, b.shift, b.band_lo, b.band_hi, b.ctype,
                            b.offset, b.kid))
        proj_args.append((rng.normal(0.5, 1.5, b.lo.shape), b.lo, b.hi, b.inmask, b.band_lo, b.band_hi))
    op = NetworkOperator(builtin_scenario("ref5"))
    P = op.polytope
    dirs, w = op._metric_dirs
    X = np.ascontiguousarray((op.flat_state(4).x + rng.normal(0, 0.1, (op.m, 4))).T)
    hild_args = (X, P.cidx, P.cval, P.rhs, dirs, w, 1e-12)
    return scen, cohort_args, proj_args, hild_args


def _best(fn, repeat: int) -> float:
    number = 1
    while timeit.timeit(fn, number=number) < 0.05:
        number *= 2
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenario", default="feeder123")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = kernels.available()
    scen, cohort_args, proj_args, hild_args = _cases(args.scenario)
    start = kernels.backend()
    rows = []
    try:
        for label, call in [
            ("solve_cohorts", lambda m: [m.solve_cohorts(*a) for a in cohort_args]),
            ("project_box_band", lambda m: [m.project_box_band(*a) for a in proj_args]),
            ("hildreth (ref5)", lambda m: m.hildreth(*hild_args)),
        ]:
            rows.append((label, {n: _best(lambda n=n: call(kernels.module(n)), args.repeat) for n in backends}))
        slot = {}
        for n in backends:
            kernels.use_backend(n)

            def run(n=n):
                mk = Market(scen)
                mk.run_slot(1)
                mk.close()
            slot[n] = min(timeit.repeat(run, number=1, repeat=max(1, args.repeat // 2)))
        rows.append((f"market slot 1 ({args.scenario})", slot))
    finally:
        kernels.use_backend(start)
    print(f"{'kernel':32s}" + "".join(f"{n:>14s}" for n in backends) + ("    speed-up" if len(backends) > 1 else ""))
    for label, t in rows:
        line = f"{label:32s}" + "".join(f"{t[n] * 1e3:12.3f}ms" for n in backends)
        if len(backends) > 1:
            line += f"{t['python'] / t['compiled']:11.1f}x"
        print(line)


if __name__ == "__main__":
    main()
