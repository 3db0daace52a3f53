"""Time the compiled and numpy pixel kernels on the same inputs.

    python3 benchmarks/bench_kernels.py --size 1024 --repeat 5
"""

import argparse
import timeit

import numpy as np

from siamcd.kernels import available_backends


def make_inputs(size, n_polygons, n_windows, seed):
    rng = np.random.default_rng(seed)
    polys = []
    for _ in range(n_polygons):
        cx, cy = rng.uniform(0, size, 2)
        r = rng.uniform(3, 20)
        ang = np.sort(rng.uniform(0, 2 * np.pi, 8))
        ring = np.stack([cx + r * np.cos(ang), cy + r * np.sin(ang)], 1)
        polys.append([np.vstack([ring, ring[:1]])])
    pred = rng.random((size, size))
    label = (rng.random((size, size)) < 0.1).astype(np.uint8)
    origins = rng.integers(0, size - 256 + 1, (n_windows, 2))
    return polys, pred, label, origins


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--size", type=int, default=1024)
    ap.add_argument("--polygons", type=int, default=300)
    ap.add_argument("--windows", type=int, default=2000)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    polys, pred, label, origins = make_inputs(args.size, args.polygons, args.windows, args.seed)
    backends = available_backends()
    jobs = {
        "rasterize_polygons": lambda m: m.rasterize_polygons(polys, args.size, args.size),
        "confusion_counts": lambda m: m.confusion_counts(pred, label, 0.5),
        "window_sums": lambda m: m.window_sums(label, origins, 256),
    }
    print(f"{'kernel':<20} " + " ".join(f"{name:>12}" for name in backends) + "     speedup")
    for kernel, job in jobs.items():
        ref = None
        times = {}
        for name, mod in backends.items():
            out = job(mod)
            if ref is None:
                ref = out
            else:
                assert np.array_equal(np.asarray(out), np.asarray(ref)), f"{kernel}: backends disagree"
            times[name] = min(timeit.repeat(lambda: job(mod), number=1, repeat=args.repeat))
        cells = " ".join(f"{times[n] * 1e3:>10.2f}ms" for n in backends)
        speed = f"{times['python'] / times['cython']:>10.1f}x" if "cython" in times else ""
        print(f"{kernel:<20} {cells} {speed}")


if __name__ == "__main__":
    main()
