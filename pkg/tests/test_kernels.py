import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fieldgrasp import _kernels_py as py
from fieldgrasp import kernels

cy = pytest.importorskip("fieldgrasp._kernels")


def test_backend_selected():
    assert kernels.BACKEND == "cython"
    assert kernels.scatter_add_rows is cy.scatter_add_rows


@given(seed=st.integers(0, 10_000), rows=st.integers(0, 60), cols=st.integers(1, 5), n_out=st.integers(1, 12))
def test_scatter_add_bit_identical(seed, rows, cols, n_out):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(rows, cols)) * 10.0 ** rng.integers(-5, 5, size=(rows, 1))
    idx = rng.integers(0, n_out, size=rows)
    a, b = py.scatter_add_rows(v, idx, n_out), cy.scatter_add_rows(v, idx, n_out)
    assert a.shape == b.shape == (n_out, cols)
    assert np.array_equal(a, b)
    assert np.allclose(a, np.array([v[idx == k].sum(axis=0) for k in range(n_out)]).reshape(n_out, cols))


def test_scatter_add_vector_values():
    v = np.array([1.0, 2.0, 3.0])
    assert np.array_equal(cy.scatter_add_rows(v, [1, 1, 0], 3), [3.0, 3.0, 0.0])
    assert np.array_equal(py.scatter_add_rows(v, [1, 1, 0], 3), [3.0, 3.0, 0.0])


@given(seed=st.integers(0, 10_000), na=st.integers(0, 30), nb=st.integers(0, 30), eps=st.floats(0.0, 1.5))
def test_radius_pairs_identical(seed, na, nb, eps):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(na, 3)), rng.uniform(size=(nb, 3))
    p, c = py.radius_pairs(a, b, eps), cy.radius_pairs(a, b, eps)
    assert p.shape == c.shape and np.array_equal(p, c)
    brute = [(i, j) for i in range(na) for j in range(nb) if np.sum((a[i] - b[j]) ** 2) <= eps * eps]
    assert [tuple(x) for x in c.tolist()] == brute


@given(x=st.lists(st.integers(0, 5), min_size=2, max_size=40), seed=st.integers(0, 1000))
def test_kendall_counts_identical(x, seed):
    y = np.random.default_rng(seed).integers(0, 5, size=len(x))
    assert tuple(py.kendall_counts(x, y)) == tuple(cy.kendall_counts(np.asarray(x, float), y.astype(float)))


def test_pure_python_env_switch():
    import subprocess
    import sys
    out = subprocess.run([sys.executable, "-c", "import fieldgrasp.kernels as k; print(k.BACKEND)"],
                         env={"FIELDGRASP_PURE_PYTHON": "1", "PATH": ""}, capture_output=True, text=True)
    assert out.stdout.strip() == "python"
