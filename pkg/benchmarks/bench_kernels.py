"""Compare the compiled simulation kernels against the pure-Python loops.

Runs each scenario/mode pair on both backends, reports wall time, speedup
and the worst per-column discrepancy.

    python3 benchmarks/bench_kernels.py [--t-final-acc 20] [--t-final-mr 15]
"""

import argparse
import time

import numpy as np

from uecbf import IntegratorConfig, engine
from uecbf.scenarios import acc_defaults, multirotor_defaults, run_acc, run_multirotor


def _time(fn, repeat=3):
    best, trace = float("inf"), None
    for _ in range(repeat):
        t0 = time.perf_counter()
        trace = fn()
        best = min(best, time.perf_counter() - t0)
    return best, trace


def _worst_diff(tr_a, tr_b):
    return max(float(np.max(np.abs(tr_a[name] - tr_b[name])))
               for name in tr_a.column_names)


def bench(label, runner, sc, mode, cfg):
    t_py, tr_py = _time(lambda: runner(sc, mode, cfg, backend="python"), repeat=1)
    t_c, tr_c = _time(lambda: runner(sc, mode, cfg, backend="compiled"))
    diff = _worst_diff(tr_py, tr_c)
    print(f"{label:28s} python {t_py:8.3f}s  compiled {t_c:8.3f}s  "
          f"speedup {t_py / t_c:7.1f}x  worst column diff {diff:.2e}")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--t-final-acc", type=float, default=20.0)
    parser.add_argument("--t-final-mr", type=float, default=15.0)
    args = parser.parse_args()

    if not engine.HAVE_FAST_KERNELS:
        raise SystemExit("compiled kernels are not available in this build")

    acc_cfg = IntegratorConfig(dt=1e-3, t_final=args.t_final_acc)
    mr_cfg = IntegratorConfig(dt=1e-3, t_final=args.t_final_mr)
    for mode in ("nominal", "method1", "method1_alt", "method2", "unprotected"):
        bench(f"acc/{mode}", run_acc, acc_defaults(), mode, acc_cfg)
    for mode in ("nominal", "method2_hocbf", "unprotected"):
        bench(f"multirotor/{mode}", run_multirotor, multirotor_defaults(), mode, mr_cfg)


if __name__ == "__main__":
    main()
