"""Compare the compiled kernels with the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--sizes 64,128,256] [--repeats 5]
"""
import argparse

from refillkv import bench

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--sizes", default="64,128,256")
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    print(bench.format_table(bench.run([int(s) for s in args.sizes.split(",")], args.repeats)))
