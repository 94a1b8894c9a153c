"""Time the compiled and numpy kernel backends on the same problems.

    python3 benchmarks/bench_kernels.py --n 1000 --repeat 3

Prints one row per (kernel, backend) with the best wall time over the
repeats and the speedup of the compiled kernels over numpy.
"""

import argparse
import time

import numpy as np

from pif import _backend
from pif.experiment import CompareSettings, compare
from pif.factor import csr_parts
from pif.outcome import build_exposure
from pif.simulate import NetworkSource, SimConfig, simulate
from pif.vi import FitOptions, GammaPrior, init_variational


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(ds, kern, K=5):
    rng = np.random.default_rng(0)
    n, m = ds.x.shape
    prior = GammaPrior(0.1, 0.1)
    c = init_variational(prior, (n, K), rng)
    w = init_variational(prior, (m, K), rng)
    a_ptr, a_ind, a_dat = csr_parts(ds.adjacency.csr)
    x_ptr, x_ind, x_dat = csr_parts(ds.x.csr.astype(np.float64))
    y_ptr, y_ind, y_dat = csr_parts(ds.y.csr.astype(np.float64))
    empty_ptr, empty_ind = np.zeros(n + 1, dtype=np.int64), np.zeros(0, dtype=np.int32)
    zeros = np.zeros((n, K))
    y_rows = np.repeat(np.arange(n), np.diff(ds.y.csr.indptr))
    expo = build_exposure(ds.adjacency, ds.x, False, (y_rows, ds.y.csr.indices), backend=kern)
    logu = np.log(c.mean)
    logw = np.log(w.mean)
    elog_beta = np.log(np.full(n, 0.05))

    def network():
        kern.network_sweep(a_ptr, a_ind, a_dat, c.shape.copy(), c.rate.copy(), c.mean.copy(),
                           c.elog.copy(), prior.shape, prior.rate, zeros, zeros,
                           empty_ptr, empty_ind)

    def bipartite():
        kern.bipartite_allocate(x_ptr, x_ind, x_dat, c.elog, w.elog, np.zeros((n, K)),
                                np.zeros((m, K)))

    def outcome():
        kern.outcome_allocate(y_ptr, y_ind, y_dat, logu, w.elog, c.elog, logw,
                              expo.ptr, expo.peers, expo.values, elog_beta,
                              np.zeros((m, K)), np.zeros((n, K)), np.zeros((n, K)),
                              np.zeros(n), np.zeros(y_ind.size))

    def exposure():
        build_exposure(ds.adjacency, ds.x, False, (y_rows, ds.y.csr.indices), backend=kern)

    return {"network_sweep": network, "bipartite_allocate": bipartite,
            "outcome_allocate": outcome, "exposure_index": exposure}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=1000, help="persons and items")
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--end-to-end", action="store_true", help="also time a full compare run")
    args = ap.parse_args()

    scale = 300.0 / args.n
    net = NetworkSource(p_in=min(0.1 * scale, 1.0), p_out=0.004 * scale)
    cfg = SimConfig(n_persons=args.n, n_items=args.n, network=net, seed=0)
    ds = simulate(cfg)
    print(f"n={ds.n_persons} m={ds.n_items} edges={ds.adjacency.n_edges} "
          f"x nnz={ds.x.nnz} y nnz={ds.y.nnz}")
    backends = _backend.available()
    timings = {}
    for name in backends:
        kern = _backend.get(name)
        for kname, fn in kernel_cases(ds, kern).items():
            timings[kname, name] = best_of(fn, args.repeat)
    print(f"{'kernel':<20}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}")
    for kname in ("network_sweep", "bipartite_allocate", "outcome_allocate", "exposure_index"):
        row = [timings[kname, b] for b in backends]
        speed = ""
        if "python" in backends and "cython" in backends:
            speed = f"{timings[kname, 'python'] / timings[kname, 'cython']:>9.1f}x"
        print(f"{kname:<20}" + "".join(f"{t:>11.4f}s" for t in row) + f"{speed:>10}")

    if args.end_to_end:
        for name in backends:
            cs = CompareSettings(opts=FitOptions(), backend=name)
            t0 = time.perf_counter()
            compare(ds, ["oracle", "unadjusted", "net-only", "mspf", "pif-net", "pif-joint"], cs)
            print(f"compare ({name}): {time.perf_counter() - t0:.2f}s")


if __name__ == "__main__":
    main()
