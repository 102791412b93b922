"""Times the compiled kernels against the pure Python fallback.

The same workload runs twice in subprocesses: once on whichever lane a
normal import selects and once forced onto the fallback through
STLGM_PURE_PYTHON=1. Reported numbers are wall seconds per Gibbs
iteration on a synthetic fit and per 10^5 Polya-Gamma draws.

Usage: python bench/bench_lanes.py [--plots N] [--iterations N]
"""

import argparse
import json
import os
import subprocess
import sys
import time


def worker(n_plots: int, iterations: int) -> dict:
    import numpy as np

    import stlgm._kernels as kernels
    from stlgm.covariance import (ComponentPriors, CovarianceParams,
                                  GammaPrior, NormalPrior, PriorSpec)
    from stlgm.data_model import RootTransform
    from stlgm.evaluate import SyntheticTruth, simulate_dataset
    from stlgm.samplers import run_gibbs_normal

    truth = SyntheticTruth(
        alpha_y=5.0,
        theta_y=CovarianceParams(sigma=(0.6, 1.0), phi=(25.0, 8.0),
                                 lam=(40.0, 4.0)),
        tau=0.3, transform=RootTransform(2),
    )
    priors = PriorSpec(
        alpha=NormalPrior(5.0, 10.0),
        components=(
            ComponentPriors(GammaPrior(0.6, 0.5), GammaPrior(25.0, 8.0),
                            GammaPrior(40.0, 36.0)),
            ComponentPriors(GammaPrior(1.0, 0.9), GammaPrior(8.0, 4.0),
                            GammaPrior(4.0, 3.6)),
        ),
        tau=GammaPrior(0.3, 0.27),
    )
    rng = np.random.default_rng(7001)
    data = simulate_dataset(n_plots, 100.0, tuple(range(2001, 2011)), 2,
                            truth, rng, dense_limit=0, m=10)

    t0 = time.perf_counter()
    run_gibbs_normal(data.y_latent, data.coords, priors,
                     iterations=iterations, burn_in=iterations // 2,
                     thin=5, m=10, rng=np.random.default_rng(7002))
    gibbs = (time.perf_counter() - t0) / iterations

    draws = 100_000
    c = np.linspace(-3.0, 3.0, draws)
    pg_rng = np.random.default_rng(7003)
    t0 = time.perf_counter()
    kernels.pg_draws(c, pg_rng)
    pg = time.perf_counter() - t0

    return {"backend": kernels.BACKEND, "rows": int(data.coords.shape[0]),
            "gibbs_s_per_iter": gibbs, "pg_s_per_1e5": pg}


def run_lane(forced: bool, n_plots: int, iterations: int) -> dict:
    env = dict(os.environ)
    if forced:
        env["STLGM_PURE_PYTHON"] = "1"
    else:
        env.pop("STLGM_PURE_PYTHON", None)
    out = subprocess.run(
        [sys.executable, os.path.abspath(__file__), "--worker",
         "--plots", str(n_plots), "--iterations", str(iterations)],
        env=env, capture_output=True, text=True, check=True,
    )
    return json.loads(out.stdout)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--worker", action="store_true",
                        help=argparse.SUPPRESS)
    parser.add_argument("--plots", type=int, default=400)
    parser.add_argument("--iterations", type=int, default=200)
    args = parser.parse_args()

    if args.worker:
        print(json.dumps(worker(args.plots, args.iterations)))
        return

    default = run_lane(False, args.plots, args.iterations)
    fallback = run_lane(True, args.plots, args.iterations)
    rows = default["rows"]
    print(f"workload: {rows} rows, m=10, L=2, {args.iterations} iterations")
    print(f"{'lane':<10}{'gibbs s/iter':>14}{'pg s/1e5':>12}")
    for res in (default, fallback):
        print(f"{res['backend']:<10}{res['gibbs_s_per_iter']:>14.4f}"
              f"{res['pg_s_per_1e5']:>12.4f}")
    if default["backend"] != fallback["backend"]:
        ratio = fallback["gibbs_s_per_iter"] / default["gibbs_s_per_iter"]
        pg_ratio = fallback["pg_s_per_1e5"] / default["pg_s_per_1e5"]
        print(f"fallback/default: gibbs {ratio:.1f}x, pg {pg_ratio:.1f}x")
    else:
        print("compiled lane unavailable; both runs used the fallback")


if __name__ == "__main__":
    main()
