"""Compare the compiled and numpy kernel backends.

Two workloads:

* ``kernel``: the conjunctive filter alone, scanning every catalog row with
  one equality, one negation, one price range and one tag requirement.
  Catalog size is varied so the per-call overhead and per-row cost both show.
* ``engine``: uncached end-to-end searches for every enumerated rewrite of
  the reference benchmark queries (the workload the middleware generates).

Usage: python benchmarks/bench_kernels.py [--repeat 5] [--sizes 1000 10000 50000]
"""

import argparse
import statistics
import time

import numpy as np

from broadrefine import kernels
from broadrefine.catalog import CatalogSpec, generate_catalog, reference_benchmark, reference_catalog
from broadrefine.engine import SearchEngine, SearchRequest, build_index
from broadrefine.expander import enumerate_candidates


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times), statistics.median(times)


def kernel_args(idx):
    rows = np.arange(len(idx.ids), dtype=np.int64)
    key = next(iter(idx.attr_keys))
    col = idx.attr_keys[key]
    codes = sorted(idx.attr_values[key].values())
    req = np.zeros(idx.tag_bits.shape[1], dtype=np.uint64)
    req[0] = np.uint64(1)
    return (rows, idx.attr_codes,
            np.array([col], dtype=np.int64), np.array([codes[0]], dtype=np.int32),
            np.array([col], dtype=np.int64), np.array([codes[-1]], dtype=np.int32),
            idx.numeric, np.array([idx.numeric_keys["price"]], dtype=np.int64),
            np.array([50.0]), np.array([800.0]), idx.tag_bits, req)


def bench_kernel(sizes, repeat, backends):
    print(f"{'kernel rows':>12} " + " ".join(f"{b + ' ms':>12}" for b in backends) + f" {'speedup':>8}")
    for n in sizes:
        idx = build_index(generate_catalog(CatalogSpec(num_items=n, seed=7)))
        args = kernel_args(idx)
        outs = {b: kernels.get_backend(b).conjunctive_filter(*args) for b in backends}
        first = outs[backends[0]]
        assert all(np.array_equal(first, o) for o in outs.values()), "backends disagree"
        ms = {b: 1e3 * best_of(lambda f=kernels.get_backend(b).conjunctive_filter: f(*args), repeat)[0]
              for b in backends}
        speed = ms.get("python", np.nan) / ms.get("cython", np.nan)
        print(f"{n:>12} " + " ".join(f"{ms[b]:>12.3f}" for b in backends) + f" {speed:>8.2f}")


def bench_engine(repeat, backends):
    catalog = reference_catalog()
    rewrites = [r for rec in reference_benchmark() for r in enumerate_candidates(rec.query)]
    print(f"\nengine: {len(rewrites)} uncached searches over {len(catalog)} items")
    results = {}
    for b in backends:
        eng = SearchEngine(catalog, backend=b, cache_size=0)
        run = lambda: [eng.search(SearchRequest(r)) for r in rewrites]  # noqa: E731
        results[b] = run()
        best, med = best_of(run, repeat)
        print(f"  {b:>8}: best {best * 1e3:9.1f} ms  median {med * 1e3:9.1f} ms  "
              f"({best / len(rewrites) * 1e6:.1f} us/search)")
    first = results[backends[0]]
    assert all(first == r for r in results.values()), "backends disagree"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--sizes", type=int, nargs="+", default=[1_000, 10_000, 50_000])
    args = ap.parse_args()
    backends = sorted(kernels.BACKENDS)
    print(f"available backends: {backends} (default: {kernels.BACKEND})")
    bench_kernel(args.sizes, args.repeat, backends)
    bench_engine(args.repeat, backends)


if __name__ == "__main__":
    main()
