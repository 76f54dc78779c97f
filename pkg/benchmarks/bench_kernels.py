"""Time the numba and pure-numpy sampler kernels on the study problem sizes.

Usage::

    python benchmarks/bench_kernels.py [--iters 2000] [--repeat 3]

Each case runs one chain end to end through ``sampler.run`` with the backend
forced in ``SamplerConfig``; the first numba call (compilation) is excluded.
Set ``DIRIREG_DISABLE_NUMBA=1`` to check the fallback alone.
"""

import argparse
import time
import warnings

from dirireg import sampler as smp
from dirireg._accel import HAVE_NUMBA
from dirireg.model import ModelConfig
from dirireg.simstudy import NetballConfig, ScenarioConfig, generate, generate_netball, netball_dataset


def cases():
    yield "scenario A (n=60, P=3)", generate(ScenarioConfig(), 0)[0], ModelConfig()
    yield "scenario B (n=80, P=3)", generate(ScenarioConfig(scenario="B"), 0)[0], ModelConfig()
    yield "netball (random effects)", netball_dataset(generate_netball(NetballConfig(), 0)), ModelConfig(random_effects=True)


def time_run(ds, mconf, backend, iters, repeat):
    conf = smp.SamplerConfig(n_chains=1, n_iter=iters, n_burnin=iters // 2, thin=1, backend=backend)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            smp.run(ds, mconf, conf)
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iters", type=int, default=2000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    backends = ["numpy"] + (["numba"] if HAVE_NUMBA else [])
    if HAVE_NUMBA:
        ds, mconf = next(cases())[1:]
        time_run(ds, mconf, "numba", 200, 1)  # compile outside the timed runs
    print(f"{'case':<28}" + "".join(f"{b:>12}" for b in backends) + ("     speed-up" if HAVE_NUMBA else ""))
    for name, ds, mconf in cases():
        t = {b: time_run(ds, mconf, b, args.iters, args.repeat) for b in backends}
        line = f"{name:<28}" + "".join(f"{t[b]:>11.2f}s" for b in backends)
        if HAVE_NUMBA:
            line += f"{t['numpy'] / t['numba']:>12.1f}x"
        print(line)


if __name__ == "__main__":
    main()
