import os
import subprocess
import sys

import numpy as np
import pytest

from grapy import kernels as K

needs_numba = pytest.mark.skipif(not K.HAVE_NUMBA, reason="numba not installed")


@needs_numba
class TestBackendEquivalence:
    def test_conv_forward_and_backward(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(9, 7, 3))
        k = rng.normal(size=(3, 3, 3, 5))
        for stride in (1, 2):
            pad = 1
            ho, wo = K.conv_output_size(9, 7, 3, 3, stride, pad)
            xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
            g = rng.normal(size=(ho, wo, 5))
            assert np.array_equal(K._conv2d_forward_np(xp, k, stride, ho, wo),
                                  K._conv2d_forward_nb(xp, k, stride, ho, wo))
            assert np.array_equal(K._conv2d_backward_input_np(g, k, stride, 11, 9),
                                  K._conv2d_backward_input_nb(g, k, stride, 11, 9))
            assert np.array_equal(K._conv2d_backward_kernel_np(xp, g, stride, 3, 3),
                                  K._conv2d_backward_kernel_nb(xp, g, stride, 3, 3))

    def test_masked_pool_paths_agree(self):
        rng = np.random.default_rng(1)
        f2 = np.ascontiguousarray(rng.normal(size=(40, 6)))
        labels = np.ascontiguousarray(rng.integers(0, 4, size=40))
        a = K._masked_pool_np(f2, labels, 4)
        b = K._masked_pool_nb(f2, labels, 4)
        for x, y in zip(a, b):
            assert np.array_equal(x, y)
        gave = rng.normal(size=(4, 6))
        gmax = rng.normal(size=(4, 6))
        sums, counts, maxv, argi = a
        assert np.array_equal(K._masked_pool_backward_np(gave, gmax, labels, counts, argi),
                              K._masked_pool_backward_nb(gave, gmax, labels, counts, argi))

    def test_empty_category_handled_identically(self):
        rng = np.random.default_rng(2)
        f2 = np.ascontiguousarray(rng.normal(size=(10, 3)))
        labels = np.zeros(10, np.int64)  # category 1 of 2 stays empty
        a = K._masked_pool_np(f2, labels, 2)
        b = K._masked_pool_nb(f2, labels, 2)
        for x, y in zip(a, b):
            assert np.array_equal(x, y)
        assert a[1][1] == 0  # zero count

    def test_gather_scatter_agree(self):
        rng = np.random.default_rng(3)
        w = np.ascontiguousarray(rng.normal(size=(5, 4)))
        labels = np.ascontiguousarray(rng.integers(0, 5, size=(6, 7)))
        assert np.array_equal(w[labels], K._gather_rows_nb(w, labels, 6, 7))
        g = rng.normal(size=(6, 7, 4))
        g2 = np.ascontiguousarray(g.reshape(-1, 4))
        lab1 = np.ascontiguousarray(labels.reshape(-1))
        expect = np.zeros((5, 4))
        np.add.at(expect, lab1, g2)
        assert np.array_equal(expect, K._scatter_rows_nb(g2, lab1, 5))

    def test_max_tie_breaks_to_first_pixel(self):
        f2 = np.ascontiguousarray(np.ones((6, 2)))
        labels = np.ascontiguousarray(np.zeros(6, np.int64))
        _, _, _, argi_np = K._masked_pool_np(f2, labels, 1)
        _, _, _, argi_nb = K._masked_pool_nb(f2, labels, 1)
        assert np.array_equal(argi_np, np.zeros((1, 2), np.int64))
        assert np.array_equal(argi_np, argi_nb)


def _forward_digest(backend):
    env = dict(os.environ, GRAPY_BACKEND=backend)
    env["PYTHONPATH"] = (os.path.join(os.path.dirname(__file__), "..", "src")
                         + os.pathsep + env.get("PYTHONPATH", ""))
    code = (
        "import hashlib, numpy as np\n"
        "from grapy.hierarchy import taxonomy_by_name\n"
        "from grapy.model import ModelParams, forward\n"
        "tax = taxonomy_by_name('A')\n"
        "rng = np.random.default_rng(0)\n"
        "params = ModelParams.init(rng, tax, width=8, channels=4)\n"
        "out = forward(rng.uniform(0, 1, (16, 16, 3)), params, tax)\n"
        "print(hashlib.sha256(out.y_hat.data.tobytes()).hexdigest())\n"
    )
    res = subprocess.run([sys.executable, "-c", code], capture_output=True,
                         text=True, env=env)
    assert res.returncode == 0, res.stderr
    return res.stdout.strip()


@needs_numba
def test_full_forward_bitwise_equal_across_backends():
    digests = {backend: _forward_digest(backend) for backend in ("auto", "numpy", "numba")}
    assert len(set(digests.values())) == 1, digests


def test_bogus_backend_env_rejected():
    env = dict(os.environ, GRAPY_BACKEND="turbo")
    env["PYTHONPATH"] = (os.path.join(os.path.dirname(__file__), "..", "src")
                         + os.pathsep + env.get("PYTHONPATH", ""))
    res = subprocess.run([sys.executable, "-c", "import grapy.kernels"],
                         capture_output=True, text=True, env=env)
    assert res.returncode != 0
    assert "GRAPY_BACKEND" in res.stderr
