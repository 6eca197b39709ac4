import os
import subprocess
import sys

import numpy as np
import pytest

from regimehedge import kernels


def test_compiled_backend_is_default_when_built():
    assert "python" in kernels.available()
    if "compiled" in kernels.available():
        assert kernels.DEFAULT == "compiled" or os.environ.get("REGIMEHEDGE_BACKEND")


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        kernels.get("simulate_chunk", "fortran")


def _default_in_subprocess(env_value):
    env = dict(os.environ, REGIMEHEDGE_BACKEND=env_value)
    return subprocess.run([sys.executable, "-c", "from regimehedge import kernels; print(kernels.DEFAULT)"],
                          capture_output=True, text=True, env=env)


def test_environment_forces_fallback():
    out = _default_in_subprocess("python")
    assert out.returncode == 0 and out.stdout.strip() == "python"
    assert _default_in_subprocess("fortran").returncode != 0


def test_uniforms_are_open_interval():
    words = np.array([0, 2**64 - 1, 2**63], dtype=np.uint64)
    u = kernels.get("uniform_open", "python")(words)
    assert np.all((u > 0) & (u < 1))
