"""Backend selection: compiled fast kernels with a pure-Python fallback.

The hot loops (full closed-loop scenario runs) dominate runtime, so they
have Cython twins in _fastloop.  The pure-Python paths in scenarios/ are
the reference implementation; equivalence is pinned by tests.
"""

try:
    from . import _fastloop
    HAVE_FAST_KERNELS = True
except ImportError:
    _fastloop = None
    HAVE_FAST_KERNELS = False


def run_acc_compiled(sc, mode, cfg):
    from .scenarios.acc import acc_trace_from_arrays
    raw = _fastloop.acc_loop(sc, mode, cfg.dt, cfg.n_steps)
    return acc_trace_from_arrays(sc, mode, cfg, raw)


def run_multirotor_compiled(sc, mode, cfg):
    from .scenarios.multirotor import multirotor_trace_from_arrays
    raw = _fastloop.multirotor_loop(sc, mode, cfg.dt, cfg.n_steps)
    return multirotor_trace_from_arrays(sc, mode, cfg, raw)
