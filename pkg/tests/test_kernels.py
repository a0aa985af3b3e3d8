import numpy as np
import pytest

from morphnas import kernels, _kernels_py

needs_ext = pytest.mark.skipif("cython" not in kernels.available_backends(),
                               reason="compiled extension not built")


def test_backend_reported():
    assert kernels.BACKEND in ("cython", "python")
    assert "python" in kernels.available_backends()


@needs_ext
@pytest.mark.parametrize("shape,k,stride", [((2, 3, 9, 9), 3, 1), ((1, 4, 12, 10), 5, 1),
                                            ((3, 2, 8, 8), 2, 2)])
def test_im2col_col2im_bit_identical(shape, k, stride):
    ext = kernels.get_backend("cython")
    rng = np.random.default_rng(0)
    x = rng.standard_normal(shape).astype(np.float32)
    a = ext.im2col(x, k, k, stride)
    b = _kernels_py.im2col(x, k, k, stride)
    assert np.array_equal(a, b)
    cols = rng.standard_normal(a.shape).astype(np.float32)
    assert np.array_equal(ext.col2im(cols, shape, k, k, stride),
                          _kernels_py.col2im(cols, shape, k, k, stride))


@needs_ext
def test_maxpool_bit_identical_including_ties():
    ext = kernels.get_backend("cython")
    x = np.random.default_rng(1).integers(0, 3, (2, 3, 8, 8)).astype(np.float32)
    oa, ia = ext.maxpool_forward(x, 2)
    ob, ib = _kernels_py.maxpool_forward(x, 2)
    assert np.array_equal(oa, ob) and np.array_equal(ia, ib)
    d = np.random.default_rng(2).standard_normal(oa.shape).astype(np.float32)
    assert np.array_equal(ext.maxpool_backward(d, ia, x.shape, 2),
                          _kernels_py.maxpool_backward(d, ib, x.shape, 2))


def test_float64_routes_to_python():
    x = np.random.default_rng(0).standard_normal((1, 2, 4, 4))
    out, _ = kernels.maxpool_forward(x, 2)
    assert out.dtype == np.float64
