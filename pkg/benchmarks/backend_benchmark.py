#!/usr/bin/env python3
"""Compare the compiled kernels against the pure-python backend.

Runs matched workloads in a subprocess per backend (the backend is fixed at
import time) and reports wall-clock times plus the speedup.

Usage:
    python benchmarks/backend_benchmark.py [--repeats N]
"""

import argparse
import json
import os
import subprocess
import sys

WORKLOADS = {
    "scaffnew_T2000": (
        "cfg = dp.ScaffNewConfig(eta=1.0/fed.ell, p=0.1, iterations=2000, mechanism=mech);"
        "dp.run('scaffnew', fed, cfg, seed=1)"
    ),
    "fedavg_tau50_T40": (
        "cfg = dp.FedAvgConfig(eta=1.0/fed.ell, tau=50, rounds=40, mechanism=mech);"
        "dp.run('fedavg', fed, cfg, seed=1)"
    ),
    "fedavg_sweep_cell_x20": (
        "cfg = dp.FedAvgConfig(eta=1.0/fed.ell, tau=25, rounds=20, mechanism=mech);"
        "[dp.run('fedavg', fed, cfg, seed=s) for s in range(20)]"
    ),
}

PROBE = r"""
import json, time
import dpfedsim as dp

fed = dp.generate_federation(
    dp.HeterogeneitySpec(zeta=1.0, condition_number=100.0, clients=3, dimension=20),
    seed=7,
)
mech = dp.MechanismParams(clip_threshold=0.8, sigma2=0.05)
results = {{}}
for name, stmt in {workloads!r}.items():
    best = float("inf")
    for _ in range({repeats}):
        t0 = time.perf_counter()
        exec(stmt)
        best = min(best, time.perf_counter() - t0)
    results[name] = best
print(json.dumps({{"backend": dp.backend_name, "times": results}}))
"""


def run_backend(backend, repeats):
    env = dict(os.environ, DPFEDSIM_BACKEND=backend)
    code = PROBE.format(workloads=WORKLOADS, repeats=repeats)
    out = subprocess.run(
        [sys.executable, "-c", code], env=env, capture_output=True, text=True
    )
    if out.returncode != 0:
        raise RuntimeError(f"{backend} probe failed:\n{out.stderr}")
    return json.loads(out.stdout)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args()

    pure = run_backend("pure", args.repeats)
    try:
        compiled = run_backend("compiled", args.repeats)
    except RuntimeError as exc:
        print(exc)
        print("compiled backend unavailable; nothing to compare")
        return 1

    width = max(len(k) for k in WORKLOADS)
    print(f"{'workload'.ljust(width)}  {'pure':>10}  {'compiled':>10}  {'speedup':>8}")
    for name in WORKLOADS:
        tp = pure["times"][name]
        tc = compiled["times"][name]
        print(f"{name.ljust(width)}  {tp:>9.4f}s  {tc:>9.4f}s  {tp / tc:>7.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
