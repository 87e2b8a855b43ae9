from __future__ import annotations

import json

import numpy as np
import pytest
from conftest import graph_from
from hypothesis import assume, given
from hypothesis import strategies as st
from scipy.integrate import solve_ivp
from scipy.linalg import expm
from scipy.special import ellipe

from cmcloop import graph as gr
from cmcloop import monodromy as mono
from cmcloop import potentials as pot
from cmcloop import surface as surf
from cmcloop.forms import RationalLoopForm
from cmcloop.wiener import circle_grid

LAM = circle_grid(16)
A = np.array([[0.3, 1.0], [0.2, -0.3]], dtype=complex)
B = np.array([[0.0, 0.5], [-1.0, 0.0]], dtype=complex)


def path(*segments):
    return mono.PathSpec("p", tuple(segments))


def two_pole_form():
    """``A dz / z + B dz / (z + 3)`` with non-commuting residues."""
    return RationalLoopForm.empty(LAM).add_pole(0.0, A).add_pole(-3.0, B)


def test_constant_residue_along_a_line():
    f = RationalLoopForm.empty(LAM).add_pole(0.0, A)
    y, _ = mono.transport(f, path(mono.line("", 1.0, 2.0)))
    assert np.max(np.abs(y - expm(np.log(2.0) * A))) <= 1e-10


def test_loop_around_simple_pole():
    f = RationalLoopForm.empty(LAM).add_pole(0.0, A)
    y, _ = mono.transport(f, path(mono.arc("", 1.0, 0.0, 2 * np.pi)))
    assert np.max(np.abs(y - expm(2j * np.pi * A))) <= 1e-11


def test_spherical_potential_gives_closed_frame():
    xi = pot.model_potential("spherical", LAM)
    for z in (2.0, 0.5 + 0.5j, -1.0 + 1.0j):
        y, _ = mono.transport(xi, path(mono.line("", 1.0, z)))
        assert np.max(np.abs(y - pot.phi_S(z, LAM))) <= 1e-11


def test_transport_matches_generic_ode_solver():
    y, _ = mono.transport(two_pole_form(), path(mono.line("", 1.0, 2.0 + 1.0j)))

    def rhs(s, v):
        z = 1 + s * (1 + 1j)
        return (v.reshape(2, 2) @ (A / z + B / (z + 3)) * (1 + 1j)).ravel()

    ref = solve_ivp(rhs, (0, 1), np.eye(2, dtype=complex).ravel(), method="DOP853", rtol=1e-13, atol=1e-14).y[:, -1]
    assert np.max(np.abs(y[0] - ref.reshape(2, 2))) <= 1e-10


def test_empty_path_is_identity():
    y, steps = mono.transport(two_pole_form(), path())
    assert steps == [] and np.max(np.abs(y - np.eye(2))) == 0


def test_principal_solution_is_loop():
    P = mono.principal_solution(pot.model_potential("spherical", LAM), path(mono.line("", 1.0, 2.0)))
    assert P.max_abs_diff(pot.phi_S_loop(2.0, P.N)) <= 1e-11


def clear_of_poles(a: complex, b: complex, gap: float = 0.3) -> bool:
    for p in (0.0, -3.0):
        s = np.clip(((p - a) * np.conj(b - a)).real / max(abs(b - a) ** 2, 1e-300), 0, 1)
        if abs(a + s * (b - a) - p) <= gap:
            return False
    return True


points = st.complex_numbers(max_magnitude=2.5)


@given(points, points)
def test_morphism(a, b):
    assume(clear_of_poles(1.0, a) and clear_of_poles(a, b))
    f = two_pole_form()
    whole, _ = mono.transport(f, path(mono.line("", 1.0, a), mono.line("", a, b)))
    first, _ = mono.transport(f, path(mono.line("", 1.0, a)))
    second, _ = mono.transport(f, path(mono.line("", a, b)))
    assert np.max(np.abs(whole - first @ second)) <= 1e-9 * max(1.0, np.max(np.abs(whole)))


@given(st.floats(0.5, 2.0), st.floats(-1.2, 1.2), st.floats(-1.2, 1.2))
def test_homotopy_invariance(r, th0, th1):
    # paths from 1 to r e^{i th1} inside the sector |arg z| < 1.3, which avoids every pole
    f = two_pole_form()
    end = r * np.exp(1j * th1)
    direct, _ = mono.transport(f, path(mono.line("", 1.0, end)))
    mid = 0.7 * np.exp(1j * th0)
    detour, _ = mono.transport(f, path(mono.line("", 1.0, mid), mono.line("", mid, end)))
    around, _ = mono.transport(f, path(mono.line("", 1.0, r), mono.arc("", r, 0.0, th1)))
    scale = max(1.0, np.max(np.abs(direct)))
    assert np.max(np.abs(direct - detour)) <= 1e-9 * scale
    assert np.max(np.abs(direct - around)) <= 1e-9 * scale


def test_full_turn_around_pole_pair_closes():
    # loops enclosing both poles are homotopic whatever their radius
    f = two_pole_form()
    big, _ = mono.transport(f, path(mono.line("", 1.0, 4.0), mono.arc("", 4.0, 0.0, 2 * np.pi), mono.line("", 4.0, 1.0)))
    other, _ = mono.transport(
        f, path(mono.line("", 1.0, 5.0), mono.arc("", 5.0, 0.0, 2 * np.pi), mono.line("", 5.0, 1.0))
    )
    assert np.max(np.abs(big - other)) <= 1e-9 * max(1.0, np.max(np.abs(big)))


CHAIN = graph_from([(1, 0.0, 0.0), (2, 2.0, 0.0)], [(1, 2, 1.0)], [(1, 180.0, 1.0), (2, 0.0, 1.0)]).normalized()
CHAIN_FORMS = pot.assemble(CHAIN, 0.02, pot.central(CHAIN, 6), circle_grid(32))


@given(st.floats(0.3, 0.95), st.floats(-1.0, 1.0), st.floats(0.3, 0.95), st.floats(-1.0, 1.0))
def test_reflection_symmetry_of_transport(r0, a0, r1, a1):
    ch = pot.vchart(CHAIN.ids[0])
    z0, z1 = r0 * np.exp(1j * a0), r1 * np.exp(1j * a1)
    p = path(mono.line(ch, 1.0, z0), mono.line(ch, z0, z1))
    assert mono.sigma_transport_defect(CHAIN_FORMS, p) <= 1e-9


def test_sigma_of_sigma_is_identity():
    seg = mono.line("c", 0.5, 0.5 + 0.5j)
    assert seg.sigma().sigma() == seg
    z, dz = seg.sigma().point(np.array([0.0, 1.0]))
    assert np.allclose(z, [2.0, 1 / np.conj(0.5 + 0.5j)])


def test_central_residuals_on_chain(chain):
    g = chain.normalized()
    n = 8
    res = mono.residuals(g, 0.0, pot.central(g, n))
    norms = res.norms()
    assert max(norms["E1"], norms["E2"], norms["E3"]) <= 1e-9
    lam = circle_grid(pot.grid_size(n))
    diag = np.diag([1, -1])
    for (j, k), mc in res.mcheck.items():
        if isinstance(k, str):
            tau = next(w for i, (v, _, w) in enumerate(g.rays) if pot.ray_key(i) == k)
            want = 2j * np.pi * tau / 4 * diag
        else:
            tau = g.weight(j, k)
            want = 2j * np.pi * tau * ((lam - 1) ** 2 / (4 * lam))[:, None, None] * diag
        assert np.max(np.abs(mc - want)) <= 1e-9
    for pm in res.p_matrix.values():
        want = np.zeros_like(pm)
        want[:, 0, 0], want[:, 1, 1] = lam, 1 / lam
        assert min(np.max(np.abs(pm - want)), np.max(np.abs(pm + want))) <= 1e-9


def test_unbalanced_graph_rejected():
    g = graph_from([(1, 0.0, 0.0)], rays=[(1, 0.0, 1.0), (1, 90.0, 1.0)])
    with pytest.raises(gr.NotBalanced):
        mono.newton_solve(g, 0.05, mono.SolveOptions(n=4))


def test_neck_without_terms_is_identity():
    fam = mono.constant_family(np.zeros((2, 2)), np.zeros((2, 2)))
    for t in (1e-4, 1e-2):
        assert np.max(np.abs(mono.neck_solution(fam(t), t) - np.eye(2))) <= 1e-13


def test_neck_limit_for_commuting_terms():
    b = np.diag([0.3, -0.3]).astype(complex)
    c = np.diag([0.2, -0.2]).astype(complex)
    limit = expm(-pot.EPS_PRIME * b) @ expm(-pot.EPS_PRIME * c)
    ts = [1e-5, 1e-4, 1e-3]
    out = mono.neck_limit(mono.constant_family(b, c), ts, limit)
    assert all(e <= t**0.5 for e, t in zip(out["error"], ts))
    assert out["exponent"] >= 0.5


def test_two_ray_generator_monodromies(two_ray_solution):
    result, _ = two_ray_solution
    assert result.report["residual"] <= 1e-9
    for m in mono.generator_monodromies(result).values():
        cond = mono.monodromy_conditions(m)
        assert cond["unitary"] <= 1e-8 and cond["pm_identity"] <= 1e-8


def test_state_round_trip(tmp_path, two_ray_solution):
    result, _ = two_ray_solution
    p = tmp_path / "state.json"
    mono.save_state(result, p)
    st_ = mono.load_state(p)
    assert st_.t == result.t and st_.x.n == result.x.n
    assert all(np.array_equal(st_.x[k], v) for k, v in result.x.values.items())
    assert st_.graph.vertices == result.graph.vertices
    again = tmp_path / "again.json"
    mono.save_state(result, again)
    assert p.read_bytes() == again.read_bytes()
    data = json.loads(p.read_text())
    assert "seconds" not in data["report"]


def test_state_format_checked(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"format": 99}))
    with pytest.raises(ValueError):
        mono.load_state(p)


def test_chain_is_an_unduloid(chain_solutions):
    # the collinear chain is a Delaunay unduloid, whose sphere centres are half a period apart;
    # with neck size b the half period is the perimeter of the ellipse with semi-axes 1/2 and b
    result, _ = chain_solutions[0.04]
    g = result.graph
    j, k = g.ids
    key = next(e.key for e in g.ends(j) if e.is_ray)
    w = surf.weight_from_parameters(g, result.t, result.x, j, key)["weight"]
    b2 = w / (2 * np.pi)
    assert g.length(j, k) == pytest.approx(2 * ellipe(1 - 4 * b2), abs=1e-8)
