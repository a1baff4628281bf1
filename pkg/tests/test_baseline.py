import numpy as np
import pytest

from bayesjd.baseline import jacobi_jd, off_diagonal, select_columns
from bayesjd.diagnostics import amari_index, api
from bayesjd.synth import gen_jd_dataset


@pytest.fixture(scope="module")
def noisy():
    return gen_jd_dataset(8, 8, 30, 0.05, np.random.default_rng(0))


def test_diagonal_inputs_need_no_rotation():
    c = np.stack([np.diag(np.random.default_rng(k).standard_normal(5)) for k in range(4)])
    np.testing.assert_array_equal(jacobi_jd(c), np.eye(5))


def test_single_matrix_is_eigendecomposition():
    a = np.random.default_rng(1).standard_normal((6, 6))
    c = a + a.T
    v = jacobi_jd(c[None])
    d = v.T @ c @ v
    assert np.max(np.abs(d - np.diag(np.diag(d)))) < 1e-8
    np.testing.assert_allclose(np.sort(np.diag(d)), np.linalg.eigvalsh(c), atol=1e-8)


def test_orthogonal(noisy):
    v = jacobi_jd(noisy.c)
    np.testing.assert_allclose(v.T @ v, np.eye(8), atol=1e-10)


def test_off_diagonal_non_increasing(noisy):
    _, info = jacobi_jd(noisy.c, return_info=True)
    hist = np.array(info["off_diagonal"])
    assert np.all(np.diff(hist) <= 1e-9 * hist[0])
    v = jacobi_jd(noisy.c)
    sym = 0.5 * (noisy.c.matrices + np.transpose(noisy.c.matrices, (0, 2, 1)))
    assert off_diagonal(v.T @ sym @ v) == pytest.approx(hist[-1], rel=1e-8)


def test_order_invariance(noisy):
    v1 = jacobi_jd(noisy.c)
    perm = np.random.default_rng(2).permutation(30)
    v2 = jacobi_jd(noisy.c.matrices[perm])
    assert amari_index(np.linalg.pinv(v1) @ v2) < 1e-6


def test_symmetrizes_input(noisy):
    c = noisy.c.matrices
    np.testing.assert_allclose(jacobi_jd(c), jacobi_jd(0.5 * (c + np.transpose(c, (0, 2, 1)))), atol=1e-12)


def test_noiseless_recovery():
    inst = gen_jd_dataset(6, 6, 10, 0.0, np.random.default_rng(3))
    assert api(jacobi_jd(inst.c), inst.b_true) < 1e-6


def test_sweep_cap():
    inst = gen_jd_dataset(6, 6, 10, 0.1, np.random.default_rng(4))
    _, info = jacobi_jd(inst.c, tol=0.0, max_sweeps=2, return_info=True)
    assert info["sweeps"] == 2 and len(info["off_diagonal"]) == 3


def test_select_columns_finds_signal():
    inst = gen_jd_dataset(10, 3, 50, 1e-4, np.random.default_rng(5))
    b = select_columns(jacobi_jd(inst.c), inst.c, 3)
    assert b.shape == (10, 3)
    assert api(b, inst.b_true) < 0.05
