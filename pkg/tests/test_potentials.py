from __future__ import annotations

import numpy as np
import pytest
from conftest import graph_from
from hypothesis import given
from hypothesis import strategies as st

from cmcloop import graph as gr
from cmcloop import loopgroup as lg
from cmcloop import potentials as pot
from cmcloop.wiener import circle_grid

LAM = circle_grid(64)
D = np.diag([1j, -1j])
PTS = np.array([0.4 + 0.3j, -0.5 + 0.2j, 0.3 - 0.6j, -0.2 - 0.7j])


def two_vertex_chain():
    return graph_from([(1, 0.0, 0.0), (2, 2.0, 0.0)], [(1, 2, 1.0)], [(1, 180.0, 1.0), (2, 0.0, 1.0)]).normalized()


def perturbed(g, n, seed, size=0.01):
    rng = np.random.default_rng(seed)
    x = pot.central(g, n)
    for k, v in x.values.items():
        if v.ndim:
            x.values[k] = v + size * rng.normal(size=v.shape)
    return pot.sync_fixed(x, g)


def test_spherical_frame_at_one_and_two():
    assert np.max(np.abs(pot.phi_S(1.0, LAM) - np.eye(2))) <= 1e-15
    want = np.empty((len(LAM), 2, 2), dtype=complex)
    want[:, 0, 0] = want[:, 1, 1] = 3
    want[:, 0, 1] = 1 / LAM
    want[:, 1, 0] = LAM
    assert np.max(np.abs(pot.phi_S(2.0, LAM) - want / (2 * np.sqrt(2)))) <= 1e-15


def test_closed_factors_multiply_back():
    z = np.array([0.3 + 0.7j, -1.5 + 0.2j, 2.0])
    prod = pot.F_S(z, LAM) @ pot.B_S(z, LAM)
    assert np.max(np.abs(prod - pot.phi_S(z, LAM))) <= 1e-14
    f = pot.F_S(z, LAM)
    assert np.max(np.abs(f @ np.conj(np.swapaxes(f, -1, -2)) - np.eye(2))) <= 1e-14


def test_catenoid_normal_is_unit():
    xs = np.linspace(-3, 3, 41)
    z = (xs[:, None] + 1j * xs[None, :]).ravel()
    assert np.max(np.abs(np.linalg.norm(pot.N_C(z), axis=-1) - 1)) <= 1e-15
    assert np.max(np.abs(np.linalg.norm(pot.inverse_stereographic(z), axis=-1) - 1)) <= 1e-15


def test_spherical_immersion_is_unit_sphere_through_origin():
    z = np.array([0.5j, 1.0, -2 + 1j])
    f = pot.f_S(z)
    # centre of the sphere is the unit vector along the third axis
    assert np.max(np.abs(np.linalg.norm(f - [0, 0, 1], axis=-1) - 1)) <= 1e-15
    assert np.max(np.abs(pot.f_S(1.0))) <= 1e-15


def test_t0_central_is_spherical_and_catenoidal(chain):
    x = pot.central(chain, 6)
    forms = pot.assemble(chain, 0.0, x, LAM)
    sph = pot.model_potential("spherical", LAM)
    cat = pot.model_potential("catenoidal", LAM)
    for j in chain.ids:
        assert np.max(np.abs(forms[pot.vchart(j)](PTS) - sph(PTS))) <= 1e-14
    for (j, k) in chain.edges:
        assert np.max(np.abs(forms[pot.echart(j, k)](PTS) - cat(PTS))) <= 1e-14


def test_open_surface_requires_tree():
    g = graph_from([(1, 0.0, 0.0), (2, 2.0, 0.0), (3, 1.0, 1.5)], [(1, 2, 1.0), (2, 3, 1.0), (1, 3, 1.0)])
    x = pot.central(g, 4)
    with pytest.raises(ValueError):
        pot.assemble(g, 0.01, x, LAM)
    pot.assemble(g, 0.0, x, LAM)


@pytest.mark.parametrize("t", [0.0, 0.02])
def test_reflection_symmetry_at_central_value(chain, t):
    forms = pot.assemble(chain, t, pot.central(chain, 6), LAM)
    for form in forms.values():
        assert np.max(np.abs(form.pullback_sigma_bar(PTS) - D @ form(PTS) @ np.conj(D))) <= 1e-12


@given(st.integers(0, 2**32 - 1), st.sampled_from([0.0, 0.005, 0.02]))
def test_reflection_symmetry_for_real_parameters(seed, t):
    g = two_vertex_chain()
    forms = pot.assemble(g, t, perturbed(g, 4, seed, 0.05), LAM)
    for form in forms.values():
        assert np.max(np.abs(form.pullback_sigma_bar(PTS) - D @ form(PTS) @ np.conj(D))) <= 1e-11


def test_vertex_derivative_lower_left_at_central(tripod):
    x = pot.central(tripod, 6)
    form = pot.t_derivative_at_0(tripod, x, LAM)[pot.vchart(1)]
    # lambda^0 coefficient of the lower-left entry, by averaging over the circle
    got = np.mean(form(PTS)[..., 1, 0], axis=-1)
    want = sum(tau * u / (2 * (PTS - u) ** 2) for _, u, tau in tripod.rays)
    assert np.max(np.abs(got - want)) <= 1e-13


def test_derivative_matches_extrapolated_difference():
    g = two_vertex_chain()
    x = perturbed(g, 6, 1)
    d0 = pot.t_derivative_at_0(g, x, LAM)
    base = pot.assemble(g, 0.0, x, LAM)
    h = 1e-5
    full, half = pot.assemble(g, h, x, LAM), pot.assemble(g, h / 2, x, LAM)
    for c in d0:
        one = (full[c](PTS) - base[c](PTS)) / h
        two = (half[c](PTS) - base[c](PTS)) / (h / 2)
        scale = max(1.0, np.max(np.abs(d0[c](PTS))))
        assert np.max(np.abs(one - d0[c](PTS))) <= 1e-3 * scale
        assert np.max(np.abs(2 * two - one - d0[c](PTS))) <= 1e-8 * scale


def test_edge_derivative_at_zero_node_point():
    g = two_vertex_chain()
    x = perturbed(g, 6, 2)
    x[("nu", 1, 2)] = np.zeros(7)
    s = pot.Sampled(g, x, LAM)
    deta = pot.assemble_t0(g, x, LAM, "deta")[pot.echart(1, 2)]
    z = PTS[:, None, None, None]
    want = (
        float(x[("r", 1, 2)]) * pot.M_vertex(s, 1, 0.0) / (z - 1) ** 2
        - float(x[("r", 2, 1)]) * pot.M_vertex(s, 2, 0.0) / (z + 1) ** 2
    )
    assert np.max(np.abs(deta(PTS) - want)) <= 1e-13


def test_residue_bookkeeping():
    g = two_vertex_chain()
    x = perturbed(g, 6, 3)
    s = pot.Sampled(g, x, LAM)
    chi = pot.assemble_t0(g, x, LAM, "chi")
    for j in g.ids:
        want = np.zeros((len(LAM), 2, 2), dtype=complex)
        for e in g.ends(j):
            if e.is_ray:
                want[:, 1, 0] -= 0.5j * s.ray(j, e.key)[1]
            else:
                want -= 0.5 * s.m_edge(j, e.key)
        form = chi[pot.vchart(j)]
        assert np.max(np.abs(form.residue_at(0.0) - want)) <= 1e-14
        # the residue at infinity equals the one at 0, so the finite ones sum to minus it
        assert np.max(np.abs(np.sum(form.res, axis=0) + want)) <= 1e-14
    edge = chi[pot.echart(1, 2)]
    assert np.max(np.abs(np.sum(edge.res, axis=0))) <= 1e-14


def test_node_periods_are_opposite():
    g = two_vertex_chain()
    x = perturbed(g, 6, 4)
    s = pot.Sampled(g, x, LAM)
    chi = pot.assemble_t0(g, x, LAM, "chi")
    edge = chi[pot.echart(1, 2)]
    for j, k, p_prime in ((1, 2, 1.0), (2, 1, -1.0)):
        at_vertex = chi[pot.vchart(j)].residue_at(s.p_edge(j, k))
        assert np.max(np.abs(at_vertex - s.m_edge(j, k))) <= 1e-14
        assert np.max(np.abs(edge.residue_at(p_prime) + at_vertex)) <= 1e-14


def test_regularity_at_zero_is_spherical(chain):
    x = perturbed(chain, 6, 5)
    data = pot.regularity_data(chain, 0.0, x, LAM)
    for j in chain.ids:
        xj, yj = data.xy_vertex[j]
        assert np.max(np.abs(xj - 1)) <= 1e-15 and np.max(np.abs(yj)) <= 1e-15
        assert np.max(np.abs(data.C_vertex[j] - 0.5)) <= 1e-15


def test_vertex_regularity_residue_is_half_conjugate_force():
    for g in (
        graph_from([(1, 0.0, 0.0)], rays=[(1, 10.0, 1.0), (1, 100.0, 0.5), (1, 250.0, 1.5)]),
        graph_from([(1, 0.0, 0.0)], rays=[(1, 20.0, 1.0)]),
    ):
        g = g.normalized()
        r = pot.R_vertex(g, 0.0, pot.central(g, 6), LAM)[1]
        assert abs(r - np.conj(gr.forces(g)[1]) / 2) <= 1e-13


def test_vertex_regularity_on_chain_is_zero(chain):
    r = pot.R_vertex(chain, 0.0, pot.central(chain, 6), LAM)
    assert max(abs(v) for v in r.values()) <= 1e-13


def test_edge_regularity_residue(chain):
    assert max(abs(v) for v in pot.R_edge(chain, 0.0, pot.central(chain, 6), LAM).values()) <= 1e-13
    x = perturbed(chain, 6, 6)
    got = pot.R_edge(chain, 0.0, x, LAM)
    want = pot.R_edge_formula(chain, x)
    assert all(abs(got[e] - want[e]) <= 1e-12 for e in got)


def test_gauge_removes_residue_of_alpha():
    g = two_vertex_chain()
    x = perturbed(g, 6, 7)
    t = 0.02
    forms = pot.assemble(g, t, x, LAM)
    data = pot.regularity_data(g, t, x, LAM)
    for j in g.ids:
        gauged = lg.gauge_action(forms[pot.vchart(j)], data.gauges_vertex[j])
        res = gauged.residue_at(0.0)
        assert np.max(np.abs(res[:, 0, 0])) <= 1e-12


def test_regularity_residues_continuous_at_zero():
    g = two_vertex_chain()
    x = perturbed(g, 6, 8)
    r0v, r0e = pot.R_vertex(g, 0.0, x, LAM), pot.R_edge(g, 0.0, x, LAM)
    for t in (1e-3, 1e-4):
        rv, re = pot.R_vertex(g, t, x, LAM), pot.R_edge(g, t, x, LAM)
        assert max(abs(rv[j] - r0v[j]) for j in g.ids) <= 50 * t
        assert max(abs(re[e] - r0e[e]) for e in re) <= 50 * t
