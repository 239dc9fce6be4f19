"""Equivalence of the compiled simulation kernels with the pure-Python loops."""

import numpy as np
import pytest

from uecbf import IntegratorConfig, engine
from uecbf.scenarios import (acc_defaults, acc_scenario_for_seed, multirotor_defaults,
                             run_acc, run_multirotor)

needs_kernels = pytest.mark.skipif(not engine.HAVE_FAST_KERNELS,
                                   reason="compiled kernels unavailable")

ACC_MODES = ("nominal", "method1", "method1_alt", "method2", "unprotected")
MR_MODES = ("nominal", "method2_hocbf", "unprotected")


@needs_kernels
class TestAccEquivalence:
    @pytest.mark.parametrize("mode", ACC_MODES)
    def test_mode_matches_python(self, mode):
        sc = acc_defaults()
        cfg = IntegratorConfig(dt=1e-3, t_final=1.0)
        tr_py = run_acc(sc, mode, cfg, backend="python")
        tr_c = run_acc(sc, mode, cfg, backend="compiled")
        assert tr_py.column_names == tr_c.column_names
        for name in tr_py.column_names:
            np.testing.assert_allclose(tr_c[name], tr_py[name], atol=1e-9,
                                       err_msg=f"mode={mode} column={name}")

    def test_seeded_draw_matches_python(self):
        sc = acc_scenario_for_seed(5)
        cfg = IntegratorConfig(dt=1e-3, t_final=1.0)
        tr_py = run_acc(sc, "method2", cfg, backend="python")
        tr_c = run_acc(sc, "method2", cfg, backend="compiled")
        for name in tr_py.column_names:
            np.testing.assert_allclose(tr_c[name], tr_py[name], atol=1e-9)


@needs_kernels
class TestMultirotorEquivalence:
    @pytest.mark.parametrize("mode", MR_MODES)
    def test_mode_matches_python(self, mode):
        sc = multirotor_defaults()
        cfg = IntegratorConfig(dt=1e-3, t_final=1.0)
        tr_py = run_multirotor(sc, mode, cfg, backend="python")
        tr_c = run_multirotor(sc, mode, cfg, backend="compiled")
        assert tr_py.column_names == tr_c.column_names
        for name in tr_py.column_names:
            np.testing.assert_allclose(tr_c[name], tr_py[name], atol=1e-9,
                                       err_msg=f"mode={mode} column={name}")


@needs_kernels
class TestBackendSelection:
    def test_auto_uses_compiled_when_available(self):
        cfg = IntegratorConfig(dt=1e-3, t_final=0.1)
        tr_auto = run_acc(acc_defaults(), "method2", cfg, backend="auto")
        tr_c = run_acc(acc_defaults(), "method2", cfg, backend="compiled")
        assert tr_auto.meta.get("backend") == "compiled"
        for name in tr_auto.column_names:
            np.testing.assert_array_equal(tr_auto[name], tr_c[name])


class TestFallback:
    def test_python_backend_always_available(self):
        cfg = IntegratorConfig(dt=1e-3, t_final=0.05)
        tr = run_acc(acc_defaults(), "nominal", cfg, backend="python")
        assert len(tr) == 51

    def test_flag_reports_import_state(self):
        assert isinstance(engine.HAVE_FAST_KERNELS, bool)
