import itertools

import numpy as np
import pytest

from qvdit.quant import QuantSpec, fake_quant
from qvdit.tensor import ShapeError, make_rng
from qvdit.tqe import (
    FrameLayout,
    TqeParams,
    init_m,
    init_tqe,
    low_rank_error,
    quantized_weight,
    tqe_forward,
    tqe_param_count,
)

W3 = QuantSpec(3, "per_channel")
A6 = QuantSpec(6, "per_token")


def _instance(seed=0, t=3, s=2, d_in=4, d_out=5):
    rng = make_rng(seed)
    layout = FrameLayout(s, t)
    x = rng.standard_normal((layout.n, d_in))
    w = rng.standard_normal((d_out, d_in))
    p = TqeParams(rng.standard_normal(d_in), rng.standard_normal(d_out), rng.uniform(0.5, 2.0, t))
    return layout, x, w, p


def test_layout_frames_cover_rows_in_order():
    lay = FrameLayout(3, 4)
    assert lay.n == 12
    assert [lay.frame_rows(i) for i in (0, 3)] == [slice(0, 3), slice(9, 12)]
    with pytest.raises(ValueError):
        FrameLayout(0, 2)


def test_param_count():
    assert tqe_param_count(1152, 1152, 16) == 2320
    assert tqe_param_count(1152, 1152, 16) / (1152 * 1152) == pytest.approx(0.00175, abs=1e-5)
    assert tqe_param_count(1, 1, 1) == 3
    with pytest.raises(ValueError):
        tqe_param_count(0, 1, 1)


def test_init_defaults_and_determinism():
    lay = FrameLayout(2, 3)
    a = init_tqe(make_rng(4), 50, 7, lay)
    b = init_tqe(make_rng(4), 50, 7, lay)
    assert np.array_equal(a.alpha, b.alpha)
    assert np.all(a.beta == 0) and a.beta.shape == (7,)
    assert a.count == 50 + 7 + 3


def test_init_m_lossless_pair_gives_inverse_mass_share(rng):
    lay = FrameLayout(2, 3)
    x = rng.standard_normal((6, 4))
    p = init_tqe(make_rng(0), 4, 2, lay, x, x.copy())
    mass = np.abs(lay.blocks(x)).sum(axis=1)
    np.testing.assert_allclose(p.m, (1 / 3) / (mass / mass.sum()), rtol=1e-12)


def test_init_m_symmetric_case_is_all_ones():
    x = np.tile(np.array([[1.0, -2.0]]), (6, 1))
    np.testing.assert_allclose(init_m(x, x, FrameLayout(2, 3)), np.ones(3), atol=1e-15)


def test_init_m_hand_case():
    # two frames, second has twice the absolute mass, lossless quantization
    x = np.array([[1.0, 1.0], [2.0, 2.0]])
    np.testing.assert_allclose(init_m(x, x, FrameLayout(1, 2)), [1.5, 0.75], atol=1e-12)


def test_init_m_eta_sums_to_one(rng):
    lay = FrameLayout(4, 5)
    x = rng.standard_normal((20, 3))
    m = init_m(x, fake_quant(x, QuantSpec(2, "per_token")), lay)
    mass = np.abs(lay.blocks(x)).sum(axis=1)
    eta = m * mass / mass.sum()
    assert abs(eta.sum() - 1) <= 1e-12


def test_init_m_zero_frame_is_neutral():
    x = np.array([[0.0, 0.0], [1.0, 2.0]])
    m = init_m(x, x, FrameLayout(1, 2))
    assert np.all(np.isfinite(m)) and m[0] == 1.0


def test_init_shape_mismatch():
    with pytest.raises(ShapeError):
        init_tqe(make_rng(0), 4, 2, FrameLayout(2, 3), np.ones((5, 4)), np.ones((5, 4)))


def test_low_rank_error_hand_case():
    p = TqeParams(np.array([1.0, 1.0]), np.zeros(1), np.array([2.0, 1.0]))
    got = low_rank_error(np.array([[1.0, 2.0], [3.0, 4.0]]), p, FrameLayout(1, 2))
    assert got.tolist() == [[6.0], [7.0]]


def test_low_rank_error_neutral_m_and_zero_alpha():
    lay, x, _, p = _instance()
    ones = TqeParams(p.alpha, p.beta, np.ones(3))
    np.testing.assert_array_equal(low_rank_error(x, ones, lay)[:, 0], x @ p.alpha)
    zero = TqeParams(np.zeros(4), p.beta, p.m)
    assert np.all(low_rank_error(x, zero, lay) == 0)


def test_perturbing_m_changes_only_its_frame():
    lay, x, _, p = _instance()
    base = low_rank_error(x, p, lay)
    p2 = p.copy()
    p2.m[1] *= 1.7
    changed = np.any(low_rank_error(x, p2, lay) != base, axis=1)
    assert changed.tolist() == [False, False, True, True, False, False]


def test_zero_beta_is_bit_exact_neutral():
    lay, x, w, p = _instance()
    p = TqeParams(p.alpha, np.zeros(5), p.m)
    plain = fake_quant(x, A6) @ fake_quant(w, W3).T
    assert np.array_equal(tqe_forward(x, w, W3, A6, p, lay), plain)


def test_passthrough_limit():
    lay, x, w, p = _instance()
    p = TqeParams(p.alpha, np.zeros(5), p.m)
    fp = QuantSpec(None)
    np.testing.assert_allclose(tqe_forward(x, w, fp, fp, p, lay), x @ w.T, atol=1e-12)


def test_matches_naive_composition():
    lay, x, w, p = _instance(seed=3)
    xq = fake_quant(x, A6)
    wq = fake_quant(w, W3)
    naive = np.zeros((lay.n, w.shape[0]))
    for r in range(lay.n):
        delta = p.m[r // lay.spatial] * sum(xq[r, c] * p.alpha[c] for c in range(x.shape[1]))
        for o in range(w.shape[0]):
            naive[r, o] = sum(xq[r, c] * wq[o, c] for c in range(x.shape[1])) + delta * p.beta[o]
    np.testing.assert_allclose(tqe_forward(x, w, W3, A6, p, lay), naive, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_compensation_has_rank_at_most_one(seed):
    lay, x, w, p = _instance(seed=seed)
    term = tqe_forward(x, w, W3, A6, p, lay) - tqe_forward(x, w, W3, A6, None, lay)
    for (i, j), (k, l) in itertools.product(itertools.combinations(range(term.shape[0]), 2),
                                            itertools.combinations(range(term.shape[1]), 2)):
        assert abs(term[i, k] * term[j, l] - term[i, l] * term[j, k]) <= 1e-10


def test_pinned_weight_params_are_used():
    from qvdit.quant import row_params

    lay, x, w, _ = _instance()
    wp = row_params(w, 3)
    wp.s *= 1.1
    assert np.array_equal(quantized_weight(w, W3, wp), fake_quant(w, W3)) is False
    assert not np.array_equal(tqe_forward(x, w, W3, A6, None, lay, wp), tqe_forward(x, w, W3, A6, None, lay))


def test_shape_errors():
    lay, x, w, p = _instance()
    with pytest.raises(ShapeError):
        tqe_forward(x[:, :3], w, W3, A6, p, lay)
    with pytest.raises(ShapeError):
        low_rank_error(x[:5], p, lay)
    with pytest.raises(ShapeError):
        tqe_forward(x, w[:4], W3, A6, p, lay)
