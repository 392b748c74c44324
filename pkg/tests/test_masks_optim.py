import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from absentreg.errors import NumericalError
from absentreg.masks import absent_mask, adaptive_threshold, correspondence_masks, forward_backward_error
from absentreg.optim import adam_init, adam_step


def const_field(vec, dims=(6, 7, 8)):
    return np.broadcast_to(np.asarray(vec, float).reshape(3, 1, 1, 1), (3,) + dims).copy()


def test_fb_error_cases():
    z = const_field([0, 0, 0])
    c = const_field([0.1, -0.2, 0.05])
    assert np.all(forward_backward_error(z, z) == 0)
    np.testing.assert_allclose(forward_backward_error(c, -c), 0.0, atol=1e-15)
    np.testing.assert_allclose(forward_backward_error(c, z), np.linalg.norm([0.1, -0.2, 0.05]), rtol=1e-14)
    with pytest.raises(ValueError):
        forward_backward_error(z, np.zeros((3, 6, 7, 9)))


def test_fb_error_role_swap_is_same_formula():
    rng = np.random.default_rng(0)
    u, v = rng.normal(size=(2, 3, 6, 6, 6)) * 0.1
    d_fb = forward_backward_error(v, u)
    # direct evaluation of |v(x) + u(x + v(x))|
    from absentreg.volume import identity_grid, sample_field

    direct = np.linalg.norm(v + sample_field(u, identity_grid((6, 6, 6)) + v), axis=0)
    np.testing.assert_allclose(d_fb, direct, atol=1e-12)


def test_threshold_cases():
    fg = np.zeros((6, 6, 6))
    fg[1:5, 1:5, 1:5] = 1.0
    assert adaptive_threshold(np.zeros((6, 6, 6)), fg, 0.015) == pytest.approx(0.015)
    d = np.where(fg > 0, 0.3, 7.0)  # background values are ignored
    assert adaptive_threshold(d, fg, 0.015) == pytest.approx(0.315)
    d = np.zeros((6, 6, 6))
    d[1:3, 1:5, 1:5] = 0.1
    d[3:5, 1:5, 1:5] = 0.3
    assert adaptive_threshold(d, fg, 0.015) == pytest.approx(0.215)
    with pytest.raises(ValueError):
        adaptive_threshold(d, np.zeros((6, 6, 6)), 0.015)


def test_absent_mask_cases():
    tau = 0.0173
    assert np.all(absent_mask(np.full((5, 5, 5), tau), tau, 0))
    assert not np.any(absent_mask(np.full((5, 5, 5), tau * 0.99), tau, 1))
    d = np.zeros((7, 7, 7))
    v = 2.7
    d[3, 3, 3] = v
    # v / 27 = 0.1
    m = absent_mask(d, 0.099, 1)
    assert m[3, 3, 3] and m.sum() == 27
    assert not absent_mask(d, 0.101, 1).any()
    rng = np.random.default_rng(1)
    d = rng.random((6, 6, 6))
    np.testing.assert_array_equal(absent_mask(d, 0.5, 0), d >= 0.5)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), t1=st.floats(0, 1), dt=st.floats(0, 1), p=st.integers(0, 2))
def test_absent_mask_monotone_in_tau(seed, t1, dt, p):
    d = np.random.default_rng(seed).random((6, 6, 6))
    low, high = absent_mask(d, t1, p), absent_mask(d, t1 + dt, p)
    assert not np.any(high & ~low)


@settings(max_examples=20, deadline=None)
@given(vec=st.lists(st.floats(-0.5, 0.5), min_size=3, max_size=3), alpha=st.floats(1e-4, 0.1))
def test_exact_inverse_pairs_give_empty_masks(vec, alpha):
    from absentreg.masks import MaskParams

    c = const_field(vec)
    img = np.zeros((6, 7, 8))
    img[2:4, 2:5, 2:6] = 1.0
    m_bf, m_fb, _ = correspondence_masks(c, -c, img, img, MaskParams(alpha, 1))
    assert not m_bf.any() and not m_fb.any()


def test_adam_init_defaults():
    s = adam_init((2, 3))
    assert s.t == 0 and np.all(s.m == 0) and np.all(s.v == 0)
    assert (s.beta1, s.beta2, s.eps_hat) == (0.9, 0.999, 1e-8)
    p = np.array([[1.0, 2, 3], [4, 5, 6]])
    p2, s = adam_step(p, np.zeros((2, 3)), s, 0.1)
    np.testing.assert_array_equal(p2, p)
    assert s.t == 1


def test_adam_first_step_is_lr_sign():
    s = adam_init(())
    p, s = adam_step(np.array(0.0), np.array(1.0), s, 0.01)
    assert p == pytest.approx(-0.01, rel=1e-6)
    g = np.array([3.0, -0.2, 1e-3, -50.0])
    p, _ = adam_step(np.zeros(4), g, adam_init(4), 0.5)
    np.testing.assert_array_equal(np.sign(p), -np.sign(g))


def test_adam_matches_scripted_recurrence():
    lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
    g_seq = [np.array([0.3, -1.2]), np.array([0.3, -1.2])]
    # scripted recurrence, element by element
    x, m, v = [0.5, -0.25], [0.0, 0.0], [0.0, 0.0]
    for t, g in enumerate(g_seq, start=1):
        for i in range(2):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] ** 2
            x[i] -= lr * (m[i] / (1 - b1**t)) / ((v[i] / (1 - b2**t)) ** 0.5 + eps)
    p, s = np.array([0.5, -0.25]), adam_init(2)
    for g in g_seq:
        p, s = adam_step(p, g, s, lr)
    np.testing.assert_allclose(p, x, rtol=0, atol=1e-12)


def test_adam_deterministic_and_rejects_nan():
    rng = np.random.default_rng(2)
    g = rng.normal(size=(4, 4))
    a, _ = adam_step(np.ones((4, 4)), g, adam_init((4, 4)), 0.1)
    b, _ = adam_step(np.ones((4, 4)), g, adam_init((4, 4)), 0.1)
    assert np.array_equal(a, b)
    g[1, 1] = np.nan
    with pytest.raises(NumericalError):
        adam_step(np.ones((4, 4)), g, adam_init((4, 4)), 0.1)
