import math

import numpy as np
import pytest

from qvdit.gradcheck import central_fd, relative_error
from qvdit.tensor import DegenerateNormError, ShapeError, cosine, make_rng
from qvdit.tmd import (
    cosine_grad,
    grad_loss_wrt_relation,
    grad_loss_wrt_relation_expanded,
    grad_relation_wrt_frame,
    kl_rows,
    relation_matrix,
    task_grad,
    task_loss,
    temporal_distribution,
    tmd_grad,
    tmd_grad_loop,
    tmd_loss,
    tmd_loss_from_relation,
    total_loss_and_grad,
)
from qvdit.tqe import FrameLayout


def pair(seed=0, t=3, s=2, d=4, noise=0.3):
    rng = make_rng(seed)
    lay = FrameLayout(s, t)
    s_fp = rng.standard_normal((lay.n, d))
    return lay, s_fp, s_fp + noise * rng.standard_normal((lay.n, d))


def test_task_loss_and_frame_decomposition():
    lay, a, b = pair()
    assert task_loss(a, a) == 0.0
    per_frame = sum(task_loss(a[lay.frame_rows(i)], b[lay.frame_rows(i)]) for i in range(lay.frames))
    assert per_frame == pytest.approx(task_loss(a, b), rel=1e-14)
    with pytest.raises(ShapeError):
        task_loss(a, b[:-1])


def test_task_grad_fd():
    _, a, b = pair(1)
    fd = central_fd(lambda: task_loss(a, b), b, h=1e-5)
    assert relative_error(task_grad(a, b), fd) <= 1e-6


def test_relation_matrix_cases():
    lay = FrameLayout(2, 3)
    same = np.tile(np.array([[1.0, 2.0], [3.0, -1.0]]), (3, 1))
    assert np.array_equal(relation_matrix(same, lay), np.ones((3, 3)))
    ortho = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert np.array_equal(relation_matrix(ortho, FrameLayout(1, 2)), np.eye(2))


def test_relation_matrix_pairwise_oracle():
    lay, a, _ = pair(2)
    t = relation_matrix(a, lay)
    v = lay.blocks(a)
    for i in range(3):
        for j in range(3):
            assert t[i, j] == pytest.approx(cosine(v[i], v[j]), abs=1e-15)
    assert np.array_equal(t, t.T) and np.all(np.diag(t) == 1.0)


def test_relation_matrix_zero_frame():
    lay, a, _ = pair()
    a[lay.frame_rows(1)] = 0.0
    with pytest.raises(DegenerateNormError):
        relation_matrix(a, lay)


def test_temporal_distribution_cases(rng):
    np.testing.assert_allclose(temporal_distribution(np.ones((4, 4))), np.full((4, 4), 0.25), atol=1e-16)
    assert temporal_distribution(np.ones((1, 1))).tolist() == [[1.0]]
    t = np.clip(rng.standard_normal((5, 5)), -1, 1)
    d = temporal_distribution(t)
    assert np.all(np.abs(d.sum(axis=1) - 1) <= 1e-12) and np.all(d > 0)


def test_tmd_loss_zero_and_scale_invariant():
    lay, a, b = pair()
    assert tmd_loss(a, a, lay) == 0.0
    assert tmd_loss(a, 3.7 * a, lay) == pytest.approx(0.0, abs=1e-15)
    for c in (0.5, 2.0, 10.0):
        assert tmd_loss(a, c * b, lay) == pytest.approx(tmd_loss(a, b, lay), abs=1e-10)


def test_tmd_loss_direct_kl_oracle():
    lay, a, b = pair(4)
    dp = temporal_distribution(relation_matrix(a, lay))
    dq = temporal_distribution(relation_matrix(b, lay))
    direct = sum(dp[i, j] * math.log(dp[i, j] / dq[i, j]) for i in range(3) for j in range(3))
    assert tmd_loss(a, b, lay) == pytest.approx(direct, rel=1e-12)
    assert tmd_loss(a, b, lay) > 0


def test_tmd_loss_frame_permutation_invariant():
    lay, a, b = pair(5, t=4)
    perm = [2, 0, 3, 1]
    re = lambda x: np.concatenate([x[lay.frame_rows(i)] for i in perm])
    assert tmd_loss(re(a), re(b), lay) == pytest.approx(tmd_loss(a, b, lay), rel=1e-12)


def test_relation_grad_identity_and_zero():
    lay, a, b = pair(6)
    dp = temporal_distribution(relation_matrix(a, lay))
    dq = temporal_distribution(relation_matrix(b, lay))
    assert np.max(np.abs(grad_loss_wrt_relation(dp, dq) - grad_loss_wrt_relation_expanded(dp, dq))) <= 1e-14
    assert np.all(grad_loss_wrt_relation(dp, dp) == 0)


def test_relation_grad_matches_fd_on_relation_entries():
    lay, a, b = pair(7)
    t_fp = relation_matrix(a, lay)
    t_q = relation_matrix(b, lay)
    g = grad_loss_wrt_relation(temporal_distribution(t_fp), temporal_distribution(t_q))
    fd = central_fd(lambda: tmd_loss_from_relation(t_fp, t_q), t_q)
    assert relative_error(g, fd) <= 1e-6


def test_cosine_grad_cases(rng):
    v = rng.standard_normal(6)
    assert np.max(np.abs(cosine_grad(v, v))) <= 1e-15
    e1, e2 = np.eye(3)[0], np.eye(3)[1]
    np.testing.assert_allclose(cosine_grad(e1, e2), e2, atol=1e-16)
    u, w = rng.standard_normal(6), rng.standard_normal(6)
    fd = central_fd(lambda: cosine(u, w), u)
    assert relative_error(cosine_grad(u, w), fd) <= 1e-6


def test_cosine_grad_unequal_norms():
    # distinguishes the correct |v_i|^3 |v_j| denominator from a |v_i|^2 |v_j|^2 variant
    u, w = np.array([3.0, 1.0]), np.array([0.5, 2.0])
    fd = central_fd(lambda: cosine(u, w), u)
    assert relative_error(cosine_grad(u, w), fd) <= 1e-8


def test_grad_relation_wrt_frame():
    lay, _, b = pair(8)
    assert np.all(grad_relation_wrt_frame(b, lay, 1, 1) == 0)
    v = lay.blocks(b)
    np.testing.assert_array_equal(grad_relation_wrt_frame(b, lay, 0, 2), cosine_grad(v[0], v[2]))


@pytest.mark.parametrize("dims", [(3, 2, 4), (4, 3, 5), (1, 2, 3), (2, 1, 1)])
def test_tmd_grad_exhaustive_fd(dims):
    t, s, d = dims
    lay, a, b = pair(9, t, s, d)
    fd = central_fd(lambda: tmd_loss(a, b, lay), b)
    assert relative_error(tmd_grad(a, b, lay), fd) <= 1e-5


def test_tmd_grad_vectorised_equals_loop():
    lay, a, b = pair(10, t=4, s=3, d=5)
    np.testing.assert_allclose(tmd_grad(a, b, lay), tmd_grad_loop(a, b, lay), rtol=0, atol=1e-15)


def test_tmd_grad_zero_at_match_and_radial_orthogonal():
    lay, a, b = pair(11)
    assert np.max(np.abs(tmd_grad(a, a, lay))) <= 1e-15
    g = lay.blocks(tmd_grad(a, b, lay))
    v = lay.blocks(b)
    for i in range(lay.frames):
        assert abs(g[i] @ v[i]) <= 1e-8 * np.linalg.norm(g[i]) * np.linalg.norm(v[i]) + 1e-18


@pytest.mark.parametrize("gamma", [0.0, 1.0, 100.0])
def test_total_objective(gamma):
    lay, a, b = pair(12, t=4, s=3, d=5)
    rep, g = total_loss_and_grad(a, b, lay, gamma)
    assert rep.total == pytest.approx(rep.task + gamma * rep.temporal, abs=1e-12)
    fd = central_fd(lambda: task_loss(a, b) + gamma * tmd_loss(a, b, lay), b)
    assert relative_error(g, fd) <= 1e-5


def test_total_gamma_zero_is_task_exactly():
    lay, a, b = pair(13)
    rep, g = total_loss_and_grad(a, b, lay, 0.0)
    assert rep.total == rep.task and rep.temporal > 0
    assert np.array_equal(g, task_grad(a, b))
    with pytest.raises(ValueError):
        total_loss_and_grad(a, b, lay, -1.0)


def test_kl_nonnegative(rng):
    p = temporal_distribution(rng.standard_normal((4, 4)))
    q = temporal_distribution(rng.standard_normal((4, 4)))
    assert kl_rows(p, q) >= 0 and kl_rows(p, p) == 0
