"""Compare the compiled and pure-Python fuzzy kernels.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Times the three hot operations on a reproducible corpus: pairwise
Levenshtein, ratio, and the windowed max_ratio scan used when building
reference sets from note text.
"""

from __future__ import annotations

import argparse
import random
import string
import timeit

from ontoext import _kernels_py

try:
    from ontoext import _ckernels
except ImportError:
    _ckernels = None


def corpus(seed: int = 0, n: int = 400):
    rng = random.Random(seed)
    words = ["".join(rng.choices(string.ascii_lowercase, k=rng.randint(3, 12))) for _ in range(2000)]
    pairs = [(" ".join(rng.choices(words, k=3)), " ".join(rng.choices(words, k=3))) for _ in range(n)]
    windows = [" ".join(rng.choices(words, k=rng.randint(1, 4))) for _ in range(1500)]
    terms = [" ".join(rng.choices(words, k=rng.randint(1, 3))) for _ in range(40)]
    return pairs, windows, terms


def workloads(impl, pairs, windows, terms):
    return {
        "levenshtein": lambda: [impl.levenshtein(a, b) for a, b in pairs],
        "ratio": lambda: [impl.ratio(a, b) for a, b in pairs],
        "max_ratio floor=0": lambda: [impl.max_ratio(t, windows, 0) for t in terms],
        "max_ratio floor=90": lambda: [impl.max_ratio(t, windows, 90) for t in terms],
    }


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    data = corpus()
    impls = {"python": _kernels_py}
    if _ckernels is not None:
        impls["cython"] = _ckernels
    else:
        print("compiled kernels not built; timing the Python fallback only")

    results: dict[str, dict[str, float]] = {}
    for name, impl in impls.items():
        for label, fn in workloads(impl, *data).items():
            results.setdefault(label, {})[name] = min(timeit.repeat(fn, number=1, repeat=args.repeat))

    print(f"{'workload':<22}{'python (ms)':>14}{'cython (ms)':>14}{'speedup':>10}")
    for label, times in results.items():
        py = times["python"] * 1e3
        if "cython" in times:
            cy = times["cython"] * 1e3
            print(f"{label:<22}{py:>14.1f}{cy:>14.2f}{py / cy:>9.1f}x")
        else:
            print(f"{label:<22}{py:>14.1f}{'-':>14}{'-':>10}")


if __name__ == "__main__":
    main()
