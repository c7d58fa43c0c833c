import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import random_spd
from ttreg.tensor import (
    KroneckerScale,
    NotSPDError,
    ar_matrix,
    devectorize,
    fold,
    kron_all,
    kron_materialize,
    mahalanobis_sq,
    mahalanobis_sq_batch,
    matricize,
    mode_gram,
    mode_product,
    mode_vec_product,
    normalize,
    tucker,
    vectorize,
)

shapes = st.lists(st.integers(1, 4), min_size=1, max_size=4).map(tuple)
finite = st.floats(-1e3, 1e3, allow_nan=False)


def tensors(shape_strategy=shapes):
    return shape_strategy.flatmap(lambda s: arrays(np.float64, s, elements=finite))


def loop_unfold(a, n):
    # textbook definition: element (i_1..i_M) goes to row i_n, column sum_{k!=n} i_k J_k
    dims = a.shape
    rest = [k for k in range(a.ndim) if k != n]
    out = np.zeros((dims[n], int(np.prod([dims[k] for k in rest]))))
    for idx in itertools.product(*[range(d) for d in dims]):
        col, stride = 0, 1
        for k in rest:
            col += idx[k] * stride
            stride *= dims[k]
        out[idx[n], col] = a[idx]
    return out


def test_vectorize_is_first_index_fastest():
    a = np.arange(24.0).reshape((2, 3, 4), order="F")
    assert np.array_equal(vectorize(a), np.arange(24.0))
    assert vectorize(a)[1 + 2 * 1 + 6 * 2] == a[1, 1, 2]


@given(tensors())
def test_vectorize_roundtrip(a):
    assert np.array_equal(devectorize(vectorize(a), a.shape), a)


def test_devectorize_rejects_wrong_size():
    with pytest.raises(ValueError):
        devectorize(np.zeros(5), (2, 3))


@given(tensors())
def test_matricize_matches_loop_definition(a):
    for n in range(a.ndim):
        assert np.array_equal(matricize(a, n), loop_unfold(a, n))
        assert np.array_equal(fold(matricize(a, n), n, a.shape), a)


def test_matricize_bad_mode():
    with pytest.raises(ValueError):
        matricize(np.zeros((2, 2)), 2)


@given(tensors(), st.data())
def test_mode_product_is_unfolded_matmul(a, data):
    n = data.draw(st.integers(0, a.ndim - 1))
    s = data.draw(st.integers(1, 3))
    g = data.draw(arrays(np.float64, (s, a.shape[n]), elements=st.floats(-5, 5)))
    out = mode_product(a, g, n)
    dims = a.shape[:n] + (s,) + a.shape[n + 1:]
    assert np.allclose(out, fold(g @ matricize(a, n), n, dims), atol=1e-9)


def test_mode_product_shape_mismatch():
    with pytest.raises(ValueError):
        mode_product(np.zeros((2, 3)), np.eye(2), 1)


@given(tensors(), st.data())
def test_mode_gram(a, data):
    n = data.draw(st.integers(0, a.ndim - 1))
    b = data.draw(arrays(np.float64, a.shape, elements=st.floats(-5, 5)))
    assert np.allclose(mode_gram(a, b, n), matricize(a, n) @ matricize(b, n).T, atol=1e-8)


def test_mode_vec_product(rng):
    a = rng.standard_normal((3, 4, 2))
    c = rng.standard_normal(4)
    assert np.allclose(mode_vec_product(a, c, 1), np.einsum("ijk,j->ik", a, c))


@given(st.lists(st.integers(1, 3), min_size=1, max_size=3), st.integers(0, 2**31))
def test_tucker_vec_identity(dims, seed):
    # vec([[A; G_1..G_M]]) = (G_M (x) ... (x) G_1) vec(A)
    r = np.random.default_rng(seed)
    a = r.standard_normal(dims)
    mats = [r.standard_normal((d, d)) for d in dims]
    assert np.allclose(vectorize(tucker(a, mats)), kron_all(mats) @ vectorize(a), atol=1e-10)


def test_tucker_skips_none(rng):
    a = rng.standard_normal((2, 3))
    g = rng.standard_normal((3, 3))
    assert np.allclose(tucker(a, [None, g]), a @ g.T)


def test_ar_matrix():
    m = ar_matrix(4, 0.5)
    assert m[0, 3] == 0.125 and m[2, 1] == 0.5 and np.all(np.diag(m) == 1)
    with pytest.raises(ValueError):
        ar_matrix(3, 1.0)


def test_kron_all_order():
    a, b = np.diag([1.0, 2.0]), np.diag([1.0, 10.0, 100.0])
    assert np.array_equal(kron_all([a, b]), np.kron(b, a))


@given(st.lists(st.integers(1, 4), min_size=1, max_size=3), st.integers(0, 2**31))
def test_scale_identities(dims, seed):
    r = np.random.default_rng(seed)
    xi = KroneckerScale([random_spd(r, d) for d in dims])
    full = xi.kron()
    assert np.isclose(xi.log_det_full(), np.linalg.slogdet(full)[1], atol=1e-9)
    d = r.standard_normal(dims)
    ref = vectorize(d) @ np.linalg.solve(full, vectorize(d))
    assert np.isclose(mahalanobis_sq(d, xi), ref, rtol=1e-9)
    batch = r.standard_normal(tuple(dims) + (3,))
    refs = [vectorize(batch[..., i]) @ np.linalg.solve(full, vectorize(batch[..., i])) for i in range(3)]
    assert np.allclose(mahalanobis_sq_batch(batch, xi), refs, rtol=1e-9)
    for s, root in zip(xi.modes, xi.sqrtms()):
        assert np.allclose(root @ root, s, atol=1e-10)


@given(st.lists(st.integers(1, 4), min_size=1, max_size=3), st.integers(0, 2**31))
def test_normalize_keeps_product(dims, seed):
    r = np.random.default_rng(seed)
    xi = KroneckerScale([random_spd(r, d) for d in dims])
    nx = normalize(xi)
    assert nx.normalized
    assert all(np.isclose(m[0, 0], 1.0) for m in nx.modes[:-1])
    assert np.allclose(nx.kron(), xi.kron(), rtol=1e-10, atol=1e-12)


def test_not_spd_detected():
    with pytest.raises(NotSPDError):
        KroneckerScale([np.array([[1.0, 2.0], [2.0, 1.0]])]).cholesky()
    with pytest.raises(NotSPDError):
        KroneckerScale([np.array([[1.0, 0.5], [0.0, 1.0]])])
    with pytest.raises(ValueError):
        KroneckerScale([np.ones((2, 3))])


def test_materialize_cap():
    with pytest.raises(ValueError):
        kron_materialize(KroneckerScale.identity((100, 100)))


def test_dims_mismatch():
    with pytest.raises(ValueError):
        mahalanobis_sq(np.zeros((2, 2)), KroneckerScale.identity((2, 3)))


def test_spec_index_examples(rng):
    a = np.array([[1.0, 3.0], [2.0, 4.0]])
    assert np.array_equal(vectorize(a), [1, 2, 3, 4])
    t = rng.standard_normal((2, 3, 4))
    # 1-based (2,1,3) sits at 1-based offset 14
    assert vectorize(t)[13] == t[1, 0, 2]
    m = rng.standard_normal((3, 4))
    assert np.array_equal(matricize(m, 0), m) and np.array_equal(matricize(m, 1), m.T)
    assert np.array_equal(vectorize(t), matricize(t, 0).reshape(-1, order="F"))


def test_tucker_order_independent(rng):
    a = rng.standard_normal((2, 3, 4))
    g1, g3 = rng.standard_normal((5, 2)), rng.standard_normal((2, 4))
    assert np.allclose(tucker(a, [g1, g3], [0, 2]), tucker(a, [g3, g1], [2, 0]), atol=1e-12)
    assert np.array_equal(tucker(a, [np.eye(2), np.eye(3), np.eye(4)]), a)


@given(st.integers(0, 2**31))
def test_mahalanobis_rescaling_invariance(seed):
    r = np.random.default_rng(seed)
    xi = KroneckerScale([random_spd(r, 2), random_spd(r, 3), random_spd(r, 2)])
    a = r.uniform(0.2, 5, 2)
    res = KroneckerScale([a[0] * xi.modes[0], a[1] * xi.modes[1], xi.modes[2] / (a[0] * a[1])])
    d = r.standard_normal((2, 3, 2))
    assert mahalanobis_sq(d, xi) == pytest.approx(mahalanobis_sq(d, res), rel=1e-10)
    assert mahalanobis_sq(d, xi) > 0 and mahalanobis_sq(np.zeros((2, 3, 2)), xi) == 0
    assert mahalanobis_sq(np.ones((2, 2)), KroneckerScale.identity((2, 2))) == 4


def test_normalize_example():
    nx = normalize(KroneckerScale([2 * np.eye(2), 3 * np.eye(2)]))
    assert np.array_equal(nx.modes[0], np.eye(2)) and np.array_equal(nx.modes[1], 6 * np.eye(2))
    with pytest.raises(NotSPDError):
        normalize(KroneckerScale([-np.eye(2), np.eye(2)]))


def test_ar_examples():
    assert np.array_equal(ar_matrix(3, 0.0), np.eye(3))
    assert np.all(np.linalg.eigvalsh(ar_matrix(4, 0.5)) > 0)
    assert np.array_equal(kron_materialize(KroneckerScale.identity((2, 3))), np.eye(6))
