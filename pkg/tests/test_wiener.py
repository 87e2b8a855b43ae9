from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cmcloop import wiener as wn
from cmcloop.wiener import LoopScalar, WienerError


def loops(max_n: int = 8, rho: float = 1.2):
    def build(args):
        n, re, im = args
        return LoopScalar(np.array(re[: 2 * n + 1]) + 1j * np.array(im[: 2 * n + 1]), rho)

    coef = st.lists(st.floats(-10, 10), min_size=2 * max_n + 1, max_size=2 * max_n + 1)
    return st.tuples(st.integers(0, max_n), coef, coef).map(build)


def convolution_oracle(f: np.ndarray, g: np.ndarray) -> np.ndarray:
    nf, ng = (len(f) - 1) // 2, (len(g) - 1) // 2
    out = np.zeros(2 * (nf + ng) + 1, dtype=complex)
    for i in range(-nf, nf + 1):
        for j in range(-ng, ng + 1):
            out[i + j + nf + ng] += f[i + nf] * g[j + ng]
    return out


def test_lambda_times_inverse_is_one():
    p = LoopScalar.monomial(1, n=2) * LoopScalar.monomial(-1, n=2)
    assert np.allclose(p.coeffs, LoopScalar.const(1, n=2).coeffs)


def test_square_of_one_plus_lambda_saturates_norm_bound():
    f = LoopScalar.from_dict({0: 1, 1: 1}, n=2, rho=2.0)
    p = f * f
    assert np.allclose(p.coeffs, LoopScalar.from_dict({0: 1, 1: 2, 2: 1}, n=2, rho=2.0).coeffs)
    assert p.norm() == pytest.approx(9.0)
    assert p.norm() == pytest.approx(f.norm() ** 2)


def test_product_matches_direct_convolution():
    rng = np.random.default_rng(3)
    n = 8
    f = LoopScalar(rng.normal(size=2 * n + 1) + 1j * rng.normal(size=2 * n + 1))
    g = LoopScalar(rng.normal(size=2 * n + 1) + 1j * rng.normal(size=2 * n + 1))
    full = wn.mul(f, g, n_out=2 * n)
    assert np.allclose(full.coeffs, convolution_oracle(f.coeffs, g.coeffs), atol=1e-12)
    assert full.norm() <= f.norm() * g.norm()


def test_truncated_product_records_dropped_tail():
    f = LoopScalar.from_dict({2: 1.0}, n=2)
    p = f * f
    assert np.all(p.coeffs == 0)
    assert p.dropped == pytest.approx(1.2**4)


def test_mixed_weights_rejected():
    with pytest.raises(WienerError):
        LoopScalar.const(1, 2, 1.2) * LoopScalar.const(1, 2, 1.5)


def test_star_examples():
    lam = LoopScalar.monomial(1, n=2)
    assert np.allclose(lam.star().coeffs, LoopScalar.monomial(-1, n=2).coeffs)
    c = LoopScalar.const(2 + 3j, n=2)
    assert np.allclose(c.star().coeffs, LoopScalar.const(2 - 3j, n=2).coeffs)
    f = LoopScalar.from_dict({2: 3, -1: 1j}, n=2)
    assert np.allclose(f.star().coeffs, LoopScalar.from_dict({-2: 3, 1: -1j}, n=2).coeffs)


def test_re_im_recompose():
    f = LoopScalar.from_dict({-1: 1 + 2j, 0: 3j, 2: -1 + 0.5j}, n=2)
    assert np.allclose((f.re() + f.im() * 1j).coeffs, f.coeffs)
    assert np.allclose(f.re().coeffs, ((f + f.bar()) * 0.5).coeffs)


def test_project_examples():
    f = LoopScalar.from_dict({-1: 2, 0: 3, 1: 4}, n=1)
    minus, zero, plus = f.project()
    assert np.allclose(minus.coeffs, [2, 0, 0])
    assert zero == 3
    assert np.allclose(plus.coeffs, [0, 0, 4])
    m, z0, p = LoopScalar.const(5, n=3).project()
    assert z0 == 5 and m.norm() == 0 and p.norm() == 0


def test_eval_and_deriv_examples():
    f = LoopScalar.from_dict({0: 1, 1: -2, 2: 1}, n=2)
    assert f.eval_and_deriv(1.0) == (0, 0)
    lam = LoopScalar.monomial(1, n=2)
    v, d = lam.eval_and_deriv(1j)
    assert v == pytest.approx(1j) and d == pytest.approx(1)


def test_eval_and_deriv_matches_central_differences():
    rng = np.random.default_rng(5)
    f = LoopScalar((rng.normal(size=17) + 1j * rng.normal(size=17)) * 1.2 ** -np.abs(np.arange(-8, 9)))
    h = 1e-5
    for th in np.linspace(0, 2 * np.pi, 12, endpoint=False):
        lam0 = np.exp(1j * th)
        _, d = f.eval_and_deriv(lam0)
        fd = (f(lam0 + h) - f(lam0 - h)) / (2 * h)
        assert abs(d - fd) <= 1e-6 * max(1.0, abs(d))


def test_eval_outside_annulus_rejected():
    with pytest.raises(WienerError):
        LoopScalar.const(1.0, 2).eval_and_deriv(2.0)


def test_sample_round_trip_one_plus_lambda():
    f = LoopScalar.from_dict({0: 1, 1: 1}, n=1)
    s = wn.sample_transform(f, m=8)
    assert np.allclose(s, 1 + np.exp(2j * np.pi * np.arange(8) / 8), atol=1e-15)
    back = wn.sample_transform(s, n=1)
    assert np.allclose(back.coeffs, f.coeffs, atol=1e-15)


def test_sample_grid_must_oversample():
    with pytest.raises(WienerError):
        wn.sample_transform(LoopScalar.const(1, 4), m=8)


def test_pointwise_reciprocal_is_geometric_series():
    n = 32
    two_plus_lam = LoopScalar.from_dict({0: 2, 1: 1}, n=n)
    inv = LoopScalar.const(1, n=n) / two_plus_lam
    k = np.arange(n + 1)
    oracle = 0.5 * (-0.5) ** k
    assert np.max(np.abs(inv.coeffs[n:] - oracle)) <= 1e-12
    assert np.max(np.abs(inv.coeffs[:n])) <= 1e-12


def test_pointwise_product_matches_convolution():
    rng = np.random.default_rng(11)
    n = 6
    f = LoopScalar(rng.normal(size=2 * n + 1) + 0j)
    g = LoopScalar(rng.normal(size=2 * n + 1) + 0j)
    m = 64
    p = wn.from_samples(wn.to_samples(f, m) * wn.to_samples(g, m), 2 * n)
    assert np.max(np.abs(p.coeffs - convolution_oracle(f.coeffs, g.coeffs))) <= 1e-12


@given(loops(), loops())
def test_submultiplicative(f, g):
    p = wn.mul(f, g, n_out=max(f.N, g.N) * 2)
    assert p.norm() <= f.norm() * g.norm() * (1 + 1e-12) + 1e-12


@given(loops())
def test_involution_algebra(f):
    assert np.array_equal(f.bar().bar().coeffs, f.coeffs)
    assert np.array_equal(f.star().star().coeffs, f.coeffs)
    assert np.array_equal(f.bar().star().coeffs, f.star().bar().coeffs)


@given(loops())
def test_star_swaps_projections(f):
    minus, zero, plus = f.project()
    s_minus, s_zero, s_plus = f.star().project()
    assert np.array_equal(s_plus.coeffs, minus.star().coeffs)
    assert s_zero == np.conj(zero)
    assert np.allclose((minus + zero + plus).coeffs, f.coeffs)


@given(loops())
def test_reality_criterion(f):
    h = f + f.star()
    assert np.max(np.abs(h.samples().imag)) <= 1e-12 * max(1.0, h.norm())
    if np.max(np.abs(f.coeffs - f.star().coeffs)) > 1e-6:
        assert np.max(np.abs(f.samples(4 * f.N + 8).imag)) > 1e-9


@given(loops(), st.floats(0, 1), st.floats(0, 2 * np.pi))
def test_plus_part_bounded_by_norm(f, r, th):
    _, zero, plus = f.project()
    g = plus + zero
    lam = r * g.rho * np.exp(1j * th)
    value = np.polyval(g.plus_part()[::-1], lam)
    assert abs(value) <= g.norm() * (1 + 1e-12) + 1e-12
