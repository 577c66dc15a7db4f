import numpy as np
import pytest

from stmx import kernels


def _pair(rng, shape=(6, 15, 15, 24), k=3):
    xpad = rng.standard_normal((shape[0], shape[1] + k - 1, shape[2] + k - 1, shape[3])).astype(np.float32)
    kernel = rng.standard_normal((shape[3], k, k)).astype(np.float32)
    bias = rng.standard_normal(shape[3]).astype(np.float32)
    return xpad, kernel, bias


def test_python_backend_always_loads():
    assert kernels.load_backend("python").NAME == "python"
    assert "python" in kernels.available_backends()


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        kernels.load_backend("fortran")


@pytest.mark.skipif("cython" not in kernels.available_backends(), reason="compiled kernels not built")
@pytest.mark.parametrize("k", [1, 3, 7])
def test_backends_bit_identical(rng, k):
    py, cy = kernels.load_backend("python"), kernels.load_backend("cython")
    xpad, kernel, bias = _pair(rng, k=k)
    np.testing.assert_array_equal(py.dwconv2d_valid(xpad, kernel, bias), cy.dwconv2d_valid(xpad, kernel, bias))
    lines = rng.standard_normal((40, 8 + k - 1, 24)).astype(np.float32)
    k1 = rng.standard_normal((24, k)).astype(np.float32)
    np.testing.assert_array_equal(py.dwconv1d_valid(lines, k1, bias), cy.dwconv1d_valid(lines, k1, bias))


def test_auto_prefers_compiled():
    expected = "cython" if "cython" in kernels.available_backends() else "python"
    assert kernels.load_backend("auto").NAME == expected


def test_env_var_forces_fallback():
    import os
    import subprocess
    import sys
    env = dict(os.environ, STMX_KERNELS="python")
    out = subprocess.run([sys.executable, "-c", "import stmx; print(stmx.BACKEND)"],
                         capture_output=True, text=True, env=env, check=True)
    assert out.stdout.strip() == "python"
