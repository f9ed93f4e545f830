import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gasmil import kernels
from gasmil.numerics import make_rng

BACKENDS = [kernels.python_backend]
if kernels.compiled_backend is not None:
    BACKENDS.append(kernels.compiled_backend)


def sort_oracle(b, s):
    """Per column: stable full sorts by (-value, row) and (value, row)."""
    n, o = b.shape
    vals = np.empty((2 * s, o))
    idx = np.empty((2 * s, o), dtype=np.int64)
    for j in range(o):
        desc = sorted(range(n), key=lambda i: (-b[i, j], i))[:s]
        asc = sorted(range(n), key=lambda i: (b[i, j], i))[:s]
        rows = desc + asc
        idx[:, j] = rows
        vals[:, j] = b[rows, j]
    return vals, idx


@pytest.mark.parametrize("backend", BACKENDS, ids=lambda b: b.__name__.rsplit(".", 1)[-1])
class TestSelect:
    def test_example_column(self, backend):
        b = np.array([5.0, 1, 3, 2, 4]).reshape(1, 5, 1)
        vals, idx = backend.maxmin_select(b, 2)
        np.testing.assert_array_equal(vals[0, :, 0], [5, 4, 1, 2])
        np.testing.assert_array_equal(idx[0, :, 0], [0, 4, 1, 3])

    def test_constant_column_lowest_index(self, backend):
        vals, idx = backend.maxmin_select(np.full((1, 4, 2), 7.0), 1)
        np.testing.assert_array_equal(vals[0], 7.0)
        np.testing.assert_array_equal(idx[0], 0)

    def test_n_equals_2s_is_full_sort(self, backend, rng):
        b = rng.standard_normal((3, 6, 4))
        vals, _ = backend.maxmin_select(b, 3)
        np.testing.assert_array_equal(vals[:, :3], -np.sort(-b, axis=1)[:, :3])
        np.testing.assert_array_equal(vals[:, 3:], np.sort(b, axis=1)[:, :3])

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.booleans())
    def test_matches_oracle(self, backend, seed, s, ties):
        rng = make_rng(seed)
        n = int(rng.integers(2 * s, 2 * s + 10))
        b = rng.integers(0, 4, size=(n, 3)).astype(float) if ties else rng.standard_normal((n, 3))
        vals, idx = backend.maxmin_select(b[None], s)
        ov, oi = sort_oracle(b, s)
        np.testing.assert_array_equal(vals[0], ov)
        np.testing.assert_array_equal(idx[0], oi)

    def test_scatter_routes_only_to_selected(self, backend, rng):
        b = rng.standard_normal((2, 9, 3))
        _, idx = backend.maxmin_select(b, 2)
        g = rng.standard_normal((2, 4, 3))
        out = backend.maxmin_scatter(g, idx, 9)
        expected = np.zeros((2, 9, 3))
        for bi in range(2):
            for p in range(4):
                for j in range(3):
                    expected[bi, idx[bi, p, j], j] += g[bi, p, j]
        np.testing.assert_array_equal(out, expected)


def test_scatter_accumulates_duplicates():
    # n == 2s with s = 1 on a constant column: both slots point at row 0
    idx = np.zeros((1, 2, 1), dtype=np.int64)
    for backend in BACKENDS:
        out = backend.maxmin_scatter(np.array([[[1.5], [2.0]]]), idx, 2)
        np.testing.assert_array_equal(out[0, :, 0], [3.5, 0.0])


@pytest.mark.skipif(kernels.compiled_backend is None, reason="extension not built")
def test_backends_agree_on_tie_heavy_batches():
    rng = make_rng(77)
    for _ in range(200):
        s = int(rng.integers(1, 6))
        b = rng.integers(-3, 3, size=(4, int(rng.integers(2 * s, 40)), 5)).astype(float)
        pv, pi = kernels.python_backend.maxmin_select(b, s)
        cv, ci = kernels.compiled_backend.maxmin_select(b, s)
        np.testing.assert_array_equal(pv, cv)
        np.testing.assert_array_equal(pi, ci)
        g = rng.standard_normal(pv.shape)
        np.testing.assert_array_equal(
            kernels.python_backend.maxmin_scatter(g, pi, b.shape[1]),
            kernels.compiled_backend.maxmin_scatter(g, ci, b.shape[1]),
        )


def test_pure_python_switch():
    env = dict(os.environ, GASMIL_PURE_PYTHON="1")
    out = subprocess.run(
        [sys.executable, "-c", "import gasmil.kernels as k; print(k.BACKEND)"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == "python"
