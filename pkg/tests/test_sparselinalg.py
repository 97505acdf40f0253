import numpy as np
import pytest

from usn import sparselinalg
from usn.sparselinalg import SparseMatrix, sddmm, spmm, spmm_transpose
from usn.topology import SparsityPattern, degree_spec, generate_random, generate_uniform


def random_matrix(rng, m, n, density, dtype=np.float64):
    mask = rng.random((m, n)) < density
    p = SparsityPattern.from_dense(mask)
    vals = rng.normal(size=p.n_edges).astype(dtype)
    return SparseMatrix(p, vals)


def masked_dense(w: SparseMatrix) -> np.ndarray:
    """Independent dense oracle: scatter each edge value into a zero matrix by hand."""
    out = np.zeros(w.shape)
    for i in range(w.shape[0]):
        for k in range(w.pattern.row_offsets[i], w.pattern.row_offsets[i + 1]):
            out[i, w.pattern.col_indices[k]] = w.values[k]
    return out


def test_identity():
    rng = np.random.default_rng(0)
    w = SparseMatrix(SparsityPattern.from_dense(np.eye(5, dtype=bool)), np.ones(5))
    x = rng.normal(size=(5, 4))
    assert np.array_equal(spmm(w, x), x)
    assert np.array_equal(spmm_transpose(w, x), x)


def test_full_pattern_equals_matmul():
    rng = np.random.default_rng(1)
    p = generate_uniform(degree_spec(6, 9, 1.0), 0)
    w = SparseMatrix(p, rng.normal(size=p.n_edges))
    dense = w.values.reshape(6, 9)
    x = rng.normal(size=(9, 5))
    g = rng.normal(size=(6, 5))
    np.testing.assert_allclose(spmm(w, x), dense @ x, rtol=0, atol=1e-12)
    np.testing.assert_allclose(spmm_transpose(w, g), dense.T @ g, rtol=0, atol=1e-12)
    np.testing.assert_allclose(sddmm(g, x, p), (g @ x.T).ravel(), rtol=0, atol=1e-12)


def test_eight_by_six():
    rng = np.random.default_rng(2)
    w = random_matrix(rng, 8, 6, 0.4)
    x = rng.normal(size=(6, 3))
    np.testing.assert_allclose(spmm(w, x), masked_dense(w) @ x, rtol=0, atol=1e-12)


def test_against_masked_dense_oracle_500_instances():
    rng = np.random.default_rng(3)
    for _ in range(500):
        m, n, b = rng.integers(1, 12, size=3)
        w = random_matrix(rng, m, n, rng.random())
        d = masked_dense(w)
        x = rng.normal(size=(n, b))
        g = rng.normal(size=(m, b))
        np.testing.assert_allclose(spmm(w, x), d @ x, rtol=0, atol=1e-12)
        np.testing.assert_allclose(spmm_transpose(w, g), d.T @ g, rtol=0, atol=1e-12)
        full = g @ x.T
        np.testing.assert_allclose(
            sddmm(g, x, w.pattern), full[w.pattern.row_ids(), w.pattern.col_indices], rtol=0, atol=1e-12
        )


@pytest.mark.parametrize("seed", range(10))
def test_adjointness(seed):
    rng = np.random.default_rng(seed)
    w = random_matrix(rng, 40, 30, 0.2)
    x = rng.normal(size=(30, 7))
    g = rng.normal(size=(40, 7))
    lhs = np.sum(spmm(w, x) * g)
    rhs = np.sum(x * spmm_transpose(w, g))
    assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), 1.0)


def test_empty_pattern():
    p = generate_uniform(degree_spec(4, 3, 0.0), 0)
    w = SparseMatrix(p, np.zeros(0))
    assert np.array_equal(spmm(w, np.ones((3, 2))), np.zeros((4, 2)))
    assert np.array_equal(spmm_transpose(w, np.ones((4, 2))), np.zeros((3, 2)))
    assert sddmm(np.ones((4, 2)), np.ones((3, 2)), p).shape == (0,)


def test_zero_operand_gives_zero_gradient():
    p = generate_random(5, 4, 9, 1)
    rng = np.random.default_rng(0)
    assert not sddmm(np.zeros((5, 3)), rng.normal(size=(4, 3)), p).any()
    assert not sddmm(rng.normal(size=(5, 3)), np.zeros((4, 3)), p).any()


def test_shape_errors():
    rng = np.random.default_rng(0)
    w = random_matrix(rng, 4, 3, 0.5)
    with pytest.raises(ValueError):
        spmm(w, np.ones((4, 2)))
    with pytest.raises(ValueError):
        spmm(w, np.ones(3))
    with pytest.raises(ValueError):
        spmm_transpose(w, np.ones((3, 2)))
    with pytest.raises(ValueError):
        sddmm(np.ones((4, 2)), np.ones((3, 5)), w.pattern)
    with pytest.raises(ValueError):
        SparseMatrix(w.pattern, np.ones(w.pattern.n_edges + 1))


def test_float32_storage_accumulates_in_float64():
    rng = np.random.default_rng(4)
    w = random_matrix(rng, 50, 400, 0.5, dtype=np.float32)
    x = rng.normal(size=(400, 8)).astype(np.float32)
    y = spmm(w, x)
    assert y.dtype == np.float32
    exact = masked_dense(w) @ x.astype(np.float64)
    # one final rounding to float32 only
    np.testing.assert_allclose(y, exact.astype(np.float32), rtol=1e-6, atol=1e-6)


def test_results_independent_of_thread_count():
    rng = np.random.default_rng(5)
    w = random_matrix(rng, 300, 200, 0.1)
    x = rng.normal(size=(200, 16))
    g = rng.normal(size=(300, 16))
    outs = []
    for n in (1, 2, 4):
        sparselinalg.set_num_threads(n)
        outs.append((spmm(w, x), spmm_transpose(w, g), sddmm(g, x, w.pattern)))
    sparselinalg.set_num_threads(64)
    for o in outs[1:]:
        for a, b in zip(outs[0], o):
            assert a.tobytes() == b.tobytes()
