"""Principal solutions along paths, the monodromy residual systems and the Newton solve."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import potentials as pot
from .forms import RationalLoopForm
from .graph import (
    Degenerate,
    NotBalanced,
    WeightedGraph,
    graph_parameters,
    is_balanced,
    nondegeneracy,
    with_parameters,
)
from .loopgroup import LoopMatrix, exp2x2, inv2, log2x2
from .wiener import DEFAULT_RHO, bar_samples, circle_grid, samples_to_coeffs

log = logging.getLogger(__name__)

ODE_TOL = 1e-11
NEWTON_TOL = 1e-9
MAX_ITER = 30
R_OUT = 2.0
TRUNC_TOL = 1e-6
D_MAT = np.diag([1j, -1j])

__all__ = [
    "Degenerate",
    "MaxIterations",
    "NotBalanced",
    "PathSpec",
    "Segment",
    "TruncationInsufficient",
    "jacobian_check",
    "neck_limit",
    "newton_solve",
    "principal_solution",
    "residuals",
]


class MonodromyError(RuntimeError):
    pass


class IntegrationError(MonodromyError):
    pass


class MaxIterations(MonodromyError):
    pass


class TruncationInsufficient(MonodromyError):
    pass


# paths ---------------------------------------------------------------------------------------


@dataclass(frozen=True)
class Segment:
    """A parametrised arc ``s in [0, 1] -> z(s)`` in one chart.

    ``kind`` is ``"line"`` (``a, b``), ``"arc"`` (``center, radius, th0, th1``),
    ``"neck"`` (``T, zeta0, zeta1``: log-spiral ``zeta0 (zeta1/zeta0)**s`` in the node
    coordinate ``zeta = T(z)``) or ``"sigma"`` (image of another segment under
    ``z -> 1/conj(z)``).
    """

    chart: str
    kind: str
    params: tuple

    def point(self, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        s = np.asarray(s, dtype=float)
        if self.kind == "line":
            a, b = self.params
            return a + s * (b - a) + 0j, np.full(s.shape, b - a, dtype=complex)
        if self.kind == "arc":
            c, r, th0, th1 = self.params
            e = r * np.exp(1j * (th0 + s * (th1 - th0)))
            return c + e, 1j * (th1 - th0) * e
        if self.kind == "neck":
            T, z0, z1 = self.params
            ratio = np.log(complex(z1 / z0))
            zeta = z0 * np.exp(s * ratio)
            inv = np.array([[T[1, 1], -T[0, 1]], [-T[1, 0], T[0, 0]]])
            den = inv[1, 0] * zeta + inv[1, 1]
            z = (inv[0, 0] * zeta + inv[0, 1]) / den
            dz = (inv[0, 0] * inv[1, 1] - inv[0, 1] * inv[1, 0]) / den**2 * zeta * ratio
            return z, dz
        if self.kind == "sigma":
            (inner,) = self.params
            z, dz = inner.point(s)
            return 1 / np.conj(z), -np.conj(dz) / np.conj(z) ** 2
        raise ValueError(f"unknown segment kind {self.kind!r}")

    @property
    def start(self) -> complex:
        return complex(self.point(np.array([0.0]))[0][0])

    @property
    def end(self) -> complex:
        return complex(self.point(np.array([1.0]))[0][0])

    def sigma(self) -> Segment:
        if self.kind == "sigma":
            return self.params[0]
        return Segment(self.chart, "sigma", (self,))


@dataclass(frozen=True)
class PathSpec:
    name: str
    segments: tuple

    def __add__(self, other: PathSpec) -> PathSpec:
        return PathSpec(f"{self.name}*{other.name}", self.segments + other.segments)

    def sigma(self) -> PathSpec:
        return PathSpec(f"sigma({self.name})", tuple(s.sigma() for s in self.segments))


def line(chart, a, b) -> Segment:
    return Segment(chart, "line", (complex(a), complex(b)))


def arc(chart, r, th0, th1, center=0.0) -> Segment:
    return Segment(chart, "arc", (complex(center), float(r), float(th0), float(th1)))


# integrator ----------------------------------------------------------------------------------

_Q = math.sqrt(15) / 10
_NODES = (0.5 - _Q, 0.5, 0.5 + _Q)


def _form_for(xi, chart: str) -> RationalLoopForm:
    if isinstance(xi, dict):
        return xi[chart]
    return xi


def _tree_product(mats: np.ndarray) -> np.ndarray:
    """Ordered product ``mats[0] @ mats[1] @ ...`` by pairwise reduction."""
    while len(mats) > 1:
        if len(mats) % 2:
            tail = mats[-1:]
            mats = np.concatenate([mats[:-2:2] @ mats[1:-1:2], tail])
        else:
            mats = mats[0::2] @ mats[1::2]
    return mats[0]


def _bracket(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # commutator with the order reversed, as the equation is Y' = Y A
    return y @ x - x @ y


def _segment_solution(form: RationalLoopForm, seg: Segment, n: int) -> np.ndarray:
    """Sixth-order Magnus solution of ``Y' = Y A`` over ``n`` equal steps (three Gauss nodes)."""
    h = 1.0 / n
    k = np.arange(n)
    s = np.concatenate([(k + c) * h for c in _NODES])
    z, dz = seg.point(s)
    a = form(z) * dz[:, None, None, None]
    a1, a2, a3 = a[:n], a[n : 2 * n], a[2 * n :]
    b1 = h * a2
    b2 = (math.sqrt(15) * h / 3) * (a3 - a1)
    b3 = (10 * h / 3) * (a3 - 2 * a2 + a1)
    c1 = _bracket(b1, b2)
    c2 = -_bracket(b1, 2 * b3 + c1) / 60
    omega = b1 + b3 / 12 + _bracket(-20 * b1 - b3 + c1, b2 + c2) / 240
    return _tree_product(exp2x2(omega))


def _adaptive(form, seg, tol, n0=8, n_max=1 << 15) -> tuple[np.ndarray, int]:
    n = n0
    y = _segment_solution(form, seg, n)
    while n < n_max:
        y2 = _segment_solution(form, seg, 2 * n)
        err = float(np.max(np.abs(y2 - y)))
        n *= 2
        y = y2
        if err / 63 <= tol:  # Richardson estimate for a sixth-order scheme
            return y, n
    raise IntegrationError(f"step-size underflow on segment {seg.kind} in chart {seg.chart}")


def transport(xi, path: PathSpec, steps: list[int] | None = None, tol: float = ODE_TOL) -> tuple[np.ndarray, list[int]]:
    """Principal solution samples ``(M, 2, 2)`` of ``dY = Y xi`` along ``path``.

    ``xi`` is one form or a dict of chart forms. With ``steps`` given the step
    counts are used as is, which makes the result a smooth function of the
    parameters; otherwise they are chosen by step doubling.
    """
    y = None
    used = []
    for i, seg in enumerate(path.segments):
        form = _form_for(xi, seg.chart)
        if steps is None:
            ys, n = _adaptive(form, seg, tol)
        else:
            n = steps[i]
            ys = _segment_solution(form, seg, n)
        used.append(n)
        y = ys if y is None else y @ ys
    if y is None:
        m = _form_for(xi, "").M if not isinstance(xi, dict) else next(iter(xi.values())).M
        y = np.broadcast_to(np.eye(2, dtype=complex), (m, 2, 2)).copy()
    return y, used


def sigma_transport_defect(xi, path: PathSpec, tol: float = ODE_TOL) -> float:
    """Largest entry of ``bar P(xi, sigma(path)) - D P(xi, path) D^-1`` over the loop samples.

    Vanishes when ``xi`` has the reflection symmetry ``bar(sigma^* xi) = D xi D^-1``.
    """
    direct, _ = transport(xi, path, tol=tol)
    mirrored, _ = transport(xi, path.sigma(), tol=tol)
    lhs = bar_samples(mirrored, axis=0)
    rhs = D_MAT @ direct @ np.conj(D_MAT)
    return float(np.max(np.abs(lhs - rhs)))


def principal_solution(xi, path: PathSpec, n: int | None = None, rho: float = DEFAULT_RHO, tol: float = ODE_TOL) -> LoopMatrix:
    """Principal solution as a loop matrix of degree ``n`` (default: as large as the grid allows)."""
    y, _ = transport(xi, path, tol=tol)
    m = y.shape[0]
    n = (m - 1) // 2 if n is None else n
    return LoopMatrix.from_samples(y, n, rho)


# loop helpers ---------------------------------------------------------------------------------


def _coeffs(samples: np.ndarray) -> tuple[np.ndarray, int]:
    """Centered Laurent coefficients of a sample vector (all modes the grid holds)."""
    m = samples.shape[-1]
    k = (m - 1) // 2
    c, _ = samples_to_coeffs(samples, k)
    return c, k


def _deriv_at_1(samples: np.ndarray) -> complex:
    c, k = _coeffs(samples)
    return complex(np.sum(np.arange(-k, k + 1) * c))


def _plus(c: np.ndarray, k: int, n: int) -> np.ndarray:
    return c[k + 1 : k + n + 1]


def _mat_power(a: np.ndarray, p) -> np.ndarray:
    return exp2x2(p * log2x2(a))


def _divide_lam_minus_1_sq(samples: np.ndarray) -> np.ndarray:
    """Samples of ``lam f / (lam - 1)^2`` for ``f`` with a double zero at 1 (coefficient recurrence)."""
    c, k = _coeffs(samples)
    h = np.zeros_like(c)
    for i in range(len(c)):
        h[i] = c[i] + (2 * h[i - 1] if i >= 1 else 0) - (h[i - 2] if i >= 2 else 0)
    out = np.zeros(len(c) + 1, dtype=complex)
    out[1:] = h  # multiplication by lam
    m = samples.shape[-1]
    lam = circle_grid(m)
    powers = np.arange(-k, k + 2)
    return (lam[:, None] ** powers[None, :]) @ out


def phi_S_paired(p: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """``Phi^S(p_k, lam_k)`` with the square-root branch ``arg in (0, 2 pi)``."""
    p = np.broadcast_to(np.asarray(p, dtype=complex), lam.shape)
    arg = np.angle(p) % (2 * np.pi)
    sq = np.sqrt(np.abs(p)) * np.exp(0.5j * arg)
    c = 1 / (2 * sq)
    out = np.empty(lam.shape + (2, 2), dtype=complex)
    out[:, 0, 0] = c * (p + 1)
    out[:, 1, 1] = c * (p + 1)
    out[:, 0, 1] = c * (p - 1) / lam
    out[:, 1, 0] = c * (p - 1) * lam
    return out


def _star(s: np.ndarray) -> np.ndarray:
    return np.conj(s)


# path system ---------------------------------------------------------------------------------


def _angle(u: complex) -> float:
    return float(np.angle(u) % (2 * np.pi))


class PathSystem:
    """Generator paths ``delta_jk`` (all ends) and ``Gamma_jk`` (``j < k``) with frozen step counts."""

    def __init__(self, g: WeightedGraph, t: float, eps: float = pot.EPS, eps_prime: float = pot.EPS_PRIME, r_out: float = R_OUT):
        self.g0 = g
        self.t = t
        self.eps = eps
        self.eps_prime = eps_prime
        self.r_out = r_out
        self.steps: dict[str, list[int]] = {}

    def _ends(self, j):
        return self.g0.ends(j)

    def predecessor(self, j, key):
        ends = self._ends(j)
        keys = [e.key for e in ends]
        i = keys.index(key)
        return ends[i - 1].key if i > 0 else None

    def delta(self, j, key) -> PathSpec:
        e = next(e for e in self._ends(j) if e.key == key)
        c = pot.vchart(j)
        phi = _angle(e.u) + self.eps
        R = self.r_out
        return PathSpec(
            f"delta[{j},{key}]",
            (
                line(c, 1, R),
                arc(c, R, 0, phi),
                line(c, R * np.exp(1j * phi), np.exp(1j * phi) / R),
                arc(c, 1 / R, phi, 0),
                line(c, 1 / R, 1),
            ),
        )

    def gamma_path(self, j, k, x: pot.UnknownVector) -> PathSpec:
        """Path from ``1_j`` to ``1_k`` through the neck of the edge ``(j, k)``, ``j < k``."""
        g, t = self.g0, self.t
        epsp, R = self.eps_prime, self.r_out
        cj, ck, ce = pot.vchart(j), pot.vchart(k), pot.echart(j, k)
        tau = g.weight(j, k)
        sgn = 1.0 if tau > 0 else -1.0
        tjk = abs(float(x[("r", j, k)]) * t)
        tkj = abs(float(x[("r", k, j)]) * t)
        pjk = np.exp(1j * float(x[("theta", j, k)]))
        pkj = np.exp(1j * float(x[("theta", k, j)]))
        phi = _angle(g.direction(j, k)) + self.eps
        half = 2 * math.atan(epsp / 2)
        segs = [
            line(cj, 1, R),
            arc(cj, R, 0, phi),
            line(cj, R * np.exp(1j * phi), np.exp(1j * phi)),
            arc(cj, 1, phi, _angle(pjk) + half),
            Segment(cj, "neck", (pot.node_matrix(pjk), epsp, tjk / epsp)),
        ]
        # on the edge sphere: from z'_jk = sgn eps' to z'_kj = -sgn eps'
        w0 = pot.mobius_apply(np.linalg.inv(pot.node_matrix(1.0)), sgn * epsp)
        w1 = pot.mobius_apply(np.linalg.inv(pot.node_matrix(-1.0)), -sgn * epsp)
        a0 = float(np.angle(w0))
        a1 = float(np.angle(w1)) % (2 * np.pi)
        if sgn < 0:
            a1 -= 2 * np.pi
        segs.append(arc(ce, 1, a0, a1))
        segs.append(Segment(ck, "neck", (pot.node_matrix(pkj), -tkj / epsp, -epsp)))
        pred = self.predecessor(k, j)
        start = _angle(pkj) - half
        if pred is None:
            segs.append(arc(ck, 1, start, 0))
        else:
            e = next(e for e in self._ends(k) if e.key == pred)
            psi = _angle(e.u) + self.eps
            segs += [
                arc(ck, 1, start, psi),
                line(ck, np.exp(1j * psi), R * np.exp(1j * psi)),
                arc(ck, R, psi, 0),
                line(ck, R, 1),
            ]
        return PathSpec(f"Gamma[{j},{k}]", tuple(segs))

    def all_paths(self, x: pot.UnknownVector) -> dict[str, PathSpec]:
        out = {}
        for j in self.g0.ids:
            for e in self._ends(j):
                p = self.delta(j, e.key)
                out[p.name] = p
        for (j, k) in sorted(self.g0.edges):
            p = self.gamma_path(j, k, x)
            out[p.name] = p
        return out

    def coarse(self, factor: int = 2) -> PathSystem:
        """Copy with step counts divided by ``factor`` (used for Jacobian columns)."""
        out = PathSystem(self.g0, self.t, self.eps, self.eps_prime, self.r_out)
        out.steps = {k: [max(4, n // factor) for n in v] for k, v in self.steps.items()}
        return out

    def solutions(self, forms: dict, x: pot.UnknownVector, tol: float = ODE_TOL) -> dict[str, np.ndarray]:
        out = {}
        for name, path in self.all_paths(x).items():
            steps = self.steps.get(name)
            y, used = transport(forms, path, steps, tol)
            if steps is None:
                self.steps[name] = used
            out[name] = y
        return out


# residuals -----------------------------------------------------------------------------------


@dataclass
class ResidualVector:
    """Residual components keyed by end or edge; each component a real array."""

    n: int
    e1: dict = field(default_factory=dict)
    e2: dict = field(default_factory=dict)
    e3: dict = field(default_factory=dict)
    r_edge: dict = field(default_factory=dict)
    r_vertex: dict = field(default_factory=dict)
    lengths: dict = field(default_factory=dict)
    mcheck: dict = field(default_factory=dict)
    p_matrix: dict = field(default_factory=dict)
    symmetry_defect: float = 0.0
    tail: float = 0.0

    def inner(self) -> np.ndarray:
        """Components solved for the parameter vector (same count as the free coordinates)."""
        parts = []
        for key in sorted(self.e1, key=str):
            parts += self.e1[key]
        for key in sorted(self.e2, key=str):
            parts += self.e2[key]
        for key in sorted(self.e3, key=str):
            parts += self.e3[key]
            r = self.r_edge[key]
            parts.append(np.array([r.real, r.imag]))
        return np.concatenate([np.atleast_1d(np.real(p)).astype(float) for p in parts]) if parts else np.zeros(0)

    def outer(self) -> np.ndarray:
        """Components solved by deforming the graph: ``R_j`` and the length equations."""
        out = []
        for j in sorted(self.r_vertex):
            out += [self.r_vertex[j].real, self.r_vertex[j].imag]
        for key in sorted(self.lengths, key=str):
            out.append(self.lengths[key])
        return np.array(out, dtype=float)

    def norms(self) -> dict:
        def mx(d):
            vals = [np.max(np.abs(np.real(c))) for v in d.values() for c in v]
            return float(max(vals, default=0.0))

        return {
            "E1": mx(self.e1),
            "E2": mx(self.e2),
            "E3": mx(self.e3),
            "R_edge": float(max((abs(v) for v in self.r_edge.values()), default=0.0)),
            "R_vertex": float(max((abs(v) for v in self.r_vertex.values()), default=0.0)),
            "L": float(max((abs(v) for v in self.lengths.values()), default=0.0)),
        }


def _e1(mc: np.ndarray, n: int) -> list[np.ndarray]:
    m11, m12, m21 = mc[:, 0, 0], mc[:, 0, 1], mc[:, 1, 0]
    lam = circle_grid(len(m11))
    cf, k = _coeffs(1j * (m11 + _star(m11)))
    cg, _ = _coeffs(lam * (m12 + _star(m21)))
    e3 = np.conj(cg[k + 1 - np.arange(1, n + 1)])
    return [
        _plus(cf, k, n),
        _plus(cg, k, n),
        e3,
        np.array([1j * m11[0], m21[0], _deriv_at_1(m21)]),
    ]


def _e2(mc: np.ndarray, n: int) -> list[np.ndarray]:
    m11, m12, m21 = mc[:, 0, 0], mc[:, 0, 1], mc[:, 1, 0]
    lam = circle_grid(len(m11))
    cf, k = _coeffs(1j * (m11 + _star(m11)))
    cg, _ = _coeffs(lam * (m12 + _star(m21)))
    return [_plus(cf, k, n), _plus(cg, k, n), np.conj(cg[k - np.arange(1, n + 1)]), np.array([cg[k]])]


def _e3(pt: np.ndarray, n: int) -> tuple[list[np.ndarray], float]:
    p11, p12, p21 = pt[:, 0, 0], pt[:, 0, 1], pt[:, 1, 0]
    cf, k = _coeffs(p11 + _star(p11))
    cg, _ = _coeffs(1j * (p12 + _star(p21)))
    comps = [
        _plus(cf, k, n),
        _plus(cg, k, n),
        np.conj(cg[k - np.arange(1, n + 1)]),
        np.array([cf[k], cg[k], 1j * p12[0], 1j * _deriv_at_1(p12)]),
    ]
    return comps, _deriv_at_1(p11)


def _imag_defect(parts) -> float:
    return float(max((np.max(np.abs(np.imag(p))) for p in parts), default=0.0))


def _tail(parts_samples: list[np.ndarray], n: int) -> float:
    """Largest coefficient beyond degree ``n`` among the given sample vectors."""
    out = 0.0
    for s in parts_samples:
        c, k = _coeffs(s)
        out = max(out, float(np.max(np.abs(c[k + n + 1 :]), initial=0.0)), float(np.max(np.abs(c[: k - n]), initial=0.0)))
    return out


def _p0_sign(p: np.ndarray, lam: np.ndarray) -> float:
    return 1.0 if np.real(p[0, 0, 0] + p[0, 1, 1]) >= 0 else -1.0


def _p_central(lam: np.ndarray, sign: float) -> np.ndarray:
    out = np.zeros(lam.shape + (2, 2), dtype=complex)
    out[:, 0, 0] = sign * lam
    out[:, 1, 1] = sign / lam
    return out


def omega_integral(q: np.ndarray, upper: bool = True) -> np.ndarray:
    """``int omega_q`` along the unit half circle from 1 to -1 (upper or lower)."""
    q = np.asarray(q, dtype=complex)

    def arc_log(a):
        val = np.log((-1 - a) / (1 - a))
        inside = np.abs(a) < 1
        im = val.imag
        if upper:
            im = np.where(inside & (im <= 0), im + 2 * np.pi, im)
        else:
            im = np.where(inside & (im >= 0), im - 2 * np.pi, im)
        return val.real + 1j * im

    nz = q != 0
    s = np.where(nz, -1 / np.where(nz, q, 1), 0)
    second = np.where(nz, arc_log(s), 0)
    return arc_log(q) - second


def _ray_hat_terms(s: pot.Sampled, j, key):
    ahat = s.loop(("ahat", j, key))
    bhat = s.loop(("bhat", j, key))
    p = np.exp(1j * s.loop(("theta", j, key)))
    return ahat, bhat, p


def _m_sphere(lam):
    return pot._m_vertex(lam, 0.5 * np.ones(len(lam)))


def _check_t0(g, x, lam):
    """Renormalised end monodromies and ``P_jk`` from the explicit noded-surface formulas."""
    s = pot.Sampled(g, x, lam)
    dxi = pot.t_derivative_at_0(g, x, lam)
    msph = _m_sphere(lam)
    mcheck, pmat = {}, {}
    for (j, k) in g.directed_edges():
        p = s.p_edge(j, k)
        form = dxi[pot.vchart(j)]
        sel = np.abs(form.locs - p) <= 1e-12
        r = np.sum(np.where(sel[..., None, None], form.res, 0), axis=0)
        d = np.sum(np.where(sel[..., None, None], form.dbl, 0), axis=0)
        mcheck[(j, k)] = 2j * np.pi * (r + (msph @ d - d @ msph) / p)
    for i, (j, u, tau) in enumerate(g.rays):
        key = pot.ray_key(i)
        ahat, bhat, p = _ray_hat_terms(s, j, key)
        rh = np.zeros((len(lam), 2, 2), dtype=complex)
        dh = np.zeros_like(rh)
        rh[:, 1, 0] = 1j * bhat
        dh[:, 1, 0] = ahat * p
        inner = rh + (msph @ dh - dh @ msph) / p[:, None, None]
        fp = phi_S_paired(p, lam)
        U = phi_S_paired(u, lam)
        mcheck[(j, key)] = 2j * np.pi * lam[:, None, None] * (inv2(U) @ fp @ inner @ inv2(fp) @ U)
    for (j, k) in sorted(g.edges):
        pmat[(j, k)] = p_matrix_t0(g, x, lam, j, k)
    return mcheck, pmat


def p_matrix_t0(g, x, lam, j, k) -> np.ndarray:
    """``P_jk`` at ``t = 0`` from the noded-surface formula."""
    s = pot.Sampled(g, x, lam)
    u = g.direction(j, k)
    q = s.q(j, k)
    mjk = pot.M_edge(s, j, k, 0.0)
    integral = omega_integral(q, upper=g.weight(j, k) > 0)
    e = exp2x2(mjk * integral[:, None, None])
    U = phi_S_paired(u, lam)
    return inv2(U) @ phi_S_paired(s.p_edge(j, k), lam) @ e @ inv2(phi_S_paired(s.p_edge(k, j), lam)) @ U


def _assemble_residual(g, x, lam, n, mcheck, pmat, rjk, rj, t) -> ResidualVector:
    out = ResidualVector(n)
    defect_parts = []
    tails = []
    for key, mc in mcheck.items():
        if isinstance(key[1], str):
            out.e2[key] = _e2(mc, n)
            defect_parts += out.e2[key]
        else:
            out.e1[key] = _e1(mc, n)
            defect_parts += out.e1[key]
        tails += [mc[:, 0, 0], mc[:, 0, 1], mc[:, 1, 0]]
    xbar = pot.central(g, n)
    for (j, k), pm in pmat.items():
        p0 = p_matrix_t0(g, xbar, lam, j, k)
        sign = _p0_sign(pm @ inv2(p0), lam)
        pt = log2x2(pm @ inv2(sign * p0))
        comps, d11 = _e3(pt, n)
        out.e3[(j, k)] = comps
        defect_parts += comps
        out.lengths[(j, k)] = float(np.real(d11)) - (g.length(j, k) - 2) / 2
        out.p_matrix[(j, k)] = pm
        out.r_edge[(j, k)] = rjk[(j, k)]
        tails += [pt[:, 0, 0], pt[:, 0, 1], pt[:, 1, 0]]
    out.r_vertex = dict(rj)
    out.mcheck = mcheck
    out.symmetry_defect = _imag_defect(defect_parts)
    out.tail = _tail(tails, n) if tails else 0.0
    return out


def residuals(g: WeightedGraph, t: float, x: pot.UnknownVector, system: PathSystem | None = None, lam: np.ndarray | None = None) -> ResidualVector:
    """Residual systems at ``(t, x)``; ``t = 0`` uses the explicit noded-surface formulas."""
    n = x.n
    lam = circle_grid(pot.grid_size(n)) if lam is None else lam
    if t == 0:
        mcheck, pmat = _check_t0(g, x, lam)
        rjk = pot.R_edge_formula(g, x)
        rj = pot.R_vertex(g, 0.0, x, lam)
        return _assemble_residual(g, x, lam, n, mcheck, pmat, rjk, rj, t)
    if not g.is_tree():
        raise ValueError("residuals at t > 0 require a tree graph")
    system = PathSystem(g, t) if system is None else system
    forms = pot.assemble(g, t, x, lam)
    sols = system.solutions(forms, x)
    s = pot.Sampled(g, x, lam)
    mcheck = {}
    for j in g.ids:
        for e in g.ends(j):
            pd = sols[f"delta[{j},{e.key}]"]
            pred = system.predecessor(j, e.key)
            if pred is None:
                mt = pd
            else:
                half = _mat_power(sols[f"delta[{j},{pred}]"], -0.5)
                mt = half @ pd @ half
            mhat = log2x2(mt) / t
            if e.is_ray:
                U = phi_S_paired(e.u, lam)
                inner = inv2(U) @ mhat @ U
                mc = np.empty_like(inner)
                for a in range(2):
                    for b in range(2):
                        mc[:, a, b] = _divide_lam_minus_1_sq(inner[:, a, b])
                mcheck[(j, e.key)] = mc
            else:
                U = phi_S_paired(s.p_edge(j, e.key), lam)
                mcheck[(j, e.key)] = inv2(U) @ mhat @ U
    pmat = {}
    for (j, k) in sorted(g.edges):
        u = g.direction(j, k)
        U = phi_S_paired(u, lam)
        left = _mat_power(sols[f"delta[{j},{k}]"], -0.5)
        pred = system.predecessor(k, j)
        right = np.eye(2) if pred is None else _mat_power(sols[f"delta[{k},{pred}]"], 0.5)
        pmat[(j, k)] = inv2(U) @ left @ sols[f"Gamma[{j},{k}]"] @ right @ U
    rjk = pot.R_edge(g, t, x, lam, forms)
    rj = pot.R_vertex(g, t, x, lam, forms)
    return _assemble_residual(g, x, lam, n, mcheck, pmat, rjk, rj, t)


# Newton --------------------------------------------------------------------------------------


@dataclass
class SolveOptions:
    n: int = 12
    rho: float = DEFAULT_RHO
    tol: float = NEWTON_TOL
    max_iter: int = MAX_ITER
    fd_step: float = 1e-7
    ode_tol: float = ODE_TOL
    trunc_tol: float = TRUNC_TOL
    deform_graph: bool = True
    check_graph: bool = True


@dataclass
class SolveResult:
    x: pot.UnknownVector
    graph: WeightedGraph
    t: float
    residual: ResidualVector
    report: dict
    system: PathSystem


def _eval(g0, labels, gp, t, x0, layout, z, system, lam, deform):
    g = with_parameters(g0, gp, labels) if deform else g0
    x = pot.sync_fixed(pot.unpack(x0, z, layout), g)
    res = residuals(g, t, x, system, lam)
    return res, g, x


def newton_solve(g: WeightedGraph, t: float, options: SolveOptions | None = None) -> SolveResult:
    """Solve the monodromy, regularity and length equations at ``t > 0`` starting from the central value.

    The parameter vector is updated by Newton steps with a finite-difference
    Jacobian (reused while the contraction is good); the equations ``R_j = 0``
    and the length equations are solved simultaneously by a least-norm
    deformation of the graph (the base vertex stays at the origin).
    """
    opt = options or SolveOptions()
    started = time.perf_counter()
    if opt.check_graph:
        if not is_balanced(g, 1e-9):
            raise NotBalanced("graph is not balanced")
        if not nondegeneracy(g)["surjective"]:
            raise Degenerate("graph is degenerate")
    if t <= 0:
        raise ValueError("t must be positive")
    g = g.normalized()
    offset = g.vertices[g.ids[0]]
    g = g.translated_to_base()
    if not g.is_tree():
        raise ValueError("solving at t > 0 requires a tree graph")
    n = opt.n
    lam = circle_grid(pot.grid_size(n))
    x0 = pot.central(g, n)
    layout = pot.free_layout(g, n)
    z = pot.pack(x0, layout)
    gp, labels = graph_parameters(g, fix_base=True)
    system = PathSystem(g, t)
    deform = opt.deform_graph

    def evaluate(zv, gv, paths=system):
        return _eval(g, labels, gv, t, x0, layout, zv, paths, lam, deform)

    # fix step counts at the central value
    res, cur_g, cur_x = evaluate(z, gp)
    log_rows = []
    jac = None
    prev_norm = None
    iters = 0

    def total(r: ResidualVector) -> np.ndarray:
        return np.concatenate([r.inner(), r.outer()]) if deform else r.inner()

    f = total(res)
    norm = float(np.max(np.abs(f)))
    ni = len(z)
    while norm > opt.tol:
        if iters >= opt.max_iter:
            raise MaxIterations(f"no convergence after {iters} iterations (residual {norm:.3e})")
        if jac is None:
            cols = []
            h = opt.fd_step
            coarse = system.coarse()
            fc = total(evaluate(z, gp, coarse)[0])
            for i in range(ni):
                dz = z.copy()
                dz[i] += h
                cols.append((total(evaluate(dz, gp, coarse)[0]) - fc) / h)
            if deform:
                for i in range(len(gp)):
                    dg = gp.copy()
                    dg[i] += h
                    cols.append((total(evaluate(z, dg, coarse)[0]) - fc) / h)
            jac = np.array(cols).T
        step = _newton_step(jac, f, ni, deform)
        alpha = 1.0
        while True:
            zn = z + alpha * step[:ni]
            gn = gp + alpha * step[ni:] if deform else gp
            rn, gg, xx = evaluate(zn, gn)
            fn = total(rn)
            nn = float(np.max(np.abs(fn)))
            if nn < norm or alpha < 1e-3:
                break
            alpha *= 0.5
        iters += 1
        ratio = nn / norm if norm else 0.0
        log_rows.append({"iteration": iters, "residual": nn, "step": float(np.max(np.abs(step))), "damping": alpha})
        log.info("newton %d residual %.3e damping %.3g", iters, nn, alpha)
        z, gp, f, norm, res, cur_g, cur_x = zn, gn, fn, nn, rn, gg, xx
        if ratio > 0.25 or alpha < 1:
            jac = None
        prev_norm = norm
    if res.tail > opt.trunc_tol:
        raise TruncationInsufficient(f"dropped coefficients {res.tail:.2e} exceed {opt.trunc_tol:.1e}")
    xbar = pot.central(cur_g, n)
    dist = max(float(np.max(np.abs(cur_x[k] - xbar[k]))) for k in cur_x.values)
    report = {
        "iterations": iters,
        "residual": norm,
        "norms": res.norms(),
        "symmetry_defect": res.symmetry_defect,
        "tail": res.tail,
        "distance_from_central": dist,
        "seconds": time.perf_counter() - started,
        "log": log_rows,
        "frame": {"rotation": g.rotation, "offset": [offset.real, offset.imag]},
    }
    return SolveResult(cur_x, cur_g, t, res, report, system)


def _newton_step(jac: np.ndarray, f: np.ndarray, ni: int, deform: bool) -> np.ndarray:
    """Newton step; graph parameters get the least-norm update through a Schur complement."""
    if not deform:
        return np.linalg.solve(jac, -f)
    ex, eg = jac[:ni, :ni], jac[:ni, ni:]
    fx, fg = jac[ni:, :ni], jac[ni:, ni:]
    e, ff = f[:ni], f[ni:]
    sol_e = np.linalg.solve(ex, np.column_stack([e, eg]))
    schur = fg - fx @ sol_e[:, 1:]
    rhs = -ff + fx @ sol_e[:, 0]
    dg = np.linalg.lstsq(schur, rhs, rcond=None)[0]
    dx = -sol_e[:, 0] - sol_e[:, 1:] @ dg
    return np.concatenate([dx, dg])


# generator monodromies of a solved state ------------------------------------------------------


def generator_monodromies(result: SolveResult) -> dict[str, np.ndarray]:
    """Principal solutions of ``gamma_jk`` (loops at ``1_j``) and ``Gamma_jk`` for a solved state."""
    g, t, x = result.graph, result.t, result.x
    lam = circle_grid(pot.grid_size(x.n))
    forms = pot.assemble(g, t, x, lam)
    sols = result.system.solutions(forms, x)
    out = {}
    for j in g.ids:
        for e in g.ends(j):
            pd = sols[f"delta[{j},{e.key}]"]
            pred = result.system.predecessor(j, e.key)
            out[f"gamma[{j},{e.key}]"] = pd if pred is None else inv2(sols[f"delta[{j},{pred}]"]) @ pd
    for (j, k) in sorted(g.edges):
        out[f"Gamma[{j},{k}]"] = sols[f"Gamma[{j},{k}]"]
    return out


def monodromy_conditions(mono: np.ndarray) -> dict:
    """Unitarity defect on the circle, distance to +-I at 1 and the log-derivative at 1."""
    m = mono.shape[0]
    uni = float(np.max(np.abs(np.conj(np.swapaxes(mono, -1, -2)) @ mono - np.eye(2))))
    at1 = mono[0]
    s = 1.0 if np.real(np.trace(at1)) >= 0 else -1.0
    c, k = _coeffs(np.moveaxis(mono, 0, -1))
    d = np.tensordot(c, np.arange(-k, k + 1), axes=([-1], [0]))
    return {"unitary": uni, "pm_identity": float(np.max(np.abs(at1 - s * np.eye(2)))), "log_derivative": inv2(at1) @ d, "samples": m}


# differential formulas ----------------------------------------------------------------------


def _e_blocks(res: ResidualVector):
    return res.e1, res.e2, res.e3, res.r_edge


def jacobian_check(g: WeightedGraph, which: str = "all", n: int = 6, h: float = 1e-6) -> dict:
    """Compare finite differences of the residuals at ``(0, central)`` with the closed-form differentials.

    Returns the largest relative error per block (``"E1"``, ``"E2"``, ``"E3"``).
    """
    g = g.normalized()
    x0 = pot.central(g, n)
    lam = circle_grid(pot.grid_size(n))

    def diff(key, idx):
        xp = x0.copy()
        xm = x0.copy()
        if idx is None:
            xp.values[key] = xp.values[key] + h
            xm.values[key] = xm.values[key] - h
        else:
            xp.values[key][idx] += h
            xm.values[key][idx] -= h
        rp = residuals(g, 0.0, xp, lam=lam)
        rm = residuals(g, 0.0, xm, lam=lam)
        return rp, rm

    def d(rp, rm, block, key):
        a = getattr(rp, block)[key]
        b = getattr(rm, block)[key]
        return [np.real(u - v) / (2 * h) for u, v in zip(a, b)]

    report = {}
    worst = {"E1": 0.0, "E2": 0.0, "E3": 0.0}

    def compare(block, got, want):
        err = 0.0
        for gv, wv in zip(got, want):
            scale = max(1.0, float(np.max(np.abs(wv)))) if np.size(wv) else 1.0
            err = max(err, float(np.max(np.abs(np.asarray(gv) - np.asarray(wv)), initial=0.0)) / scale)
        worst[block] = max(worst[block], err)

    tp = 2 * np.pi
    if which in ("all", "E1"):
        for (j, k) in g.directed_edges():
            for name in ("a", "b", "c"):
                for m in range(n + 1):
                    rp, rm = diff((name, j, k), m)
                    got = d(rp, rm, "e1", (j, k))
                    unit = np.zeros(n + 1)
                    unit[m] = 1
                    da = unit if name == "a" else 0 * unit
                    db = unit if name == "b" else 0 * unit
                    dc = unit if name == "c" else 0 * unit
                    idx = np.arange(n + 1)
                    want = [
                        -tp * da[1:],
                        -tp * (db[1:] + np.eye(n + 1)[1][1:] * dc[0]),
                        -tp * (dc[1:] + np.eye(n + 1)[1][1:] * db[0]),
                        np.array([-tp * da.sum(), -tp * dc.sum(), -tp * (idx * dc).sum()]),
                    ]
                    compare("E1", got, want)
    if which in ("all", "E2"):
        for i, (j, u, tau) in enumerate(g.rays):
            key = pot.ray_key(i)
            for name, rng in (("ahat", range(1, n + 1)), ("bhat", range(0, n + 1)), ("theta", range(1, n + 1))):
                for m in rng:
                    rp, rm = diff((name, j, key), m)
                    got = d(rp, rm, "e2", (j, key))
                    unit = np.zeros(n + 1)
                    unit[m] = 1
                    da = unit if name == "ahat" else 0 * unit
                    db = unit if name == "bhat" else 0 * unit
                    dth = unit if name == "theta" else 0 * unit
                    want = [
                        -np.pi * da[1:],
                        0.5 * np.pi * tau * dth[1:],
                        -tp * db[1:] - 0.5 * np.pi * tau * dth[1:],
                        np.array([-tp * db[0]]),
                    ]
                    compare("E2", got, want)
    if which in ("all", "E3"):
        for (j, k) in sorted(g.edges):
            for name in ("A", "C", "nu"):
                for m in range(n + 1):
                    if name == "nu" and m == 0:
                        continue
                    rp, rm = diff((name, j, k), m)
                    got = d(rp, rm, "e3", (j, k))
                    unit = np.zeros(n + 1)
                    unit[m] = 1
                    dA = unit if name == "A" else 0 * unit
                    dC = unit if name == "C" else 0 * unit
                    dnu = unit if name == "nu" else 0 * unit
                    want = [
                        -2 * dC[1:],
                        -2 * dA[1:] - 2 * dnu[1:],
                        -2 * dA[1:] + 2 * dnu[1:],
                        np.array([-4 * dC[0], -4 * dA[0]]),
                    ]
                    got5 = [got[0], got[1], got[2], got[3][:2]]
                    compare("E3", got5, want)
            for which_theta, sgn in (((("theta", j, k)), -1.0), ((("theta", k, j)), 1.0)):
                rp, rm = diff(which_theta, None)
                got = d(rp, rm, "e3", (j, k))
                want = [np.zeros(n), np.zeros(n), np.zeros(n), np.array([0.0, 0.0, 0.5 * sgn, 0.5])]
                compare("E3", got, want)
    report.update(worst)
    return report


# neck limit ----------------------------------------------------------------------------------


def neck_solution(xi_t: RationalLoopForm, t: float, eps_prime: float = pot.EPS_PRIME, tol: float = ODE_TOL) -> np.ndarray:
    """``P(xi_t, gamma)^(-log t / 2 pi i) P(xi_t, beta_t)`` with ``beta_t`` the log-spiral from ``eps'`` to ``t/eps'``."""
    ident = np.eye(2, dtype=complex)
    beta = PathSpec("beta", (Segment("", "neck", (ident, eps_prime, t / eps_prime)),))
    circle = PathSpec("gamma", (arc("", eps_prime, 0.0, 2 * np.pi),))
    pb, _ = transport(xi_t, beta, tol=tol)
    pg, _ = transport(xi_t, circle, tol=tol)
    power = -np.log(t) / (2j * np.pi)
    return _mat_power(pg, power) @ pb


def constant_family(b: np.ndarray, c: np.ndarray, lam: np.ndarray | None = None) -> Callable[[float], RationalLoopForm]:
    """The family ``(b z + c t / z) dz / z`` with constant matrices ``b, c``."""
    lam = np.ones(1, dtype=complex) if lam is None else lam

    def family(t: float) -> RationalLoopForm:
        f = RationalLoopForm.empty(lam).add_pole(0.0, None, c * t)
        f.poly = np.broadcast_to(np.asarray(b, dtype=complex), (1, len(lam), 2, 2)).copy()
        return f

    return family


def neck_limit(family: Callable[[float], RationalLoopForm], t_grid, limit: np.ndarray | None = None, eps_prime: float = pot.EPS_PRIME) -> dict:
    """Evaluate the neck function on ``t_grid`` and fit ``log |F(t) - F(0)|`` against ``log t``."""
    ts = np.asarray(sorted(t_grid), dtype=float)
    vals = np.array([neck_solution(family(t), t, eps_prime) for t in ts])
    out = {"t": ts.tolist()}
    if limit is not None:
        err = np.array([float(np.max(np.abs(v - limit))) for v in vals])
        out["error"] = err.tolist()
        good = err > 0
        if np.sum(good) >= 2:
            slope, icpt = np.polyfit(np.log(ts[good]), np.log(err[good]), 1)
            out["exponent"] = float(slope)
            out["constant"] = float(np.exp(icpt))
    out["values"] = vals
    return out


# solve-state files ---------------------------------------------------------------------------

STATE_FORMAT = 1


def state_dict(result: SolveResult, options: SolveOptions | None = None) -> dict:
    """JSON-ready snapshot of a solve; wall-clock timings are left out so files are reproducible."""
    opt = options or SolveOptions(n=result.x.n)
    report = {k: v for k, v in result.report.items() if k != "seconds"}
    return {
        "format": STATE_FORMAT,
        "t": result.t,
        "rho": opt.rho,
        "modes": result.x.n,
        "graph": result.graph.to_dict(),
        "frame": report.pop("frame", {"rotation": result.graph.rotation, "offset": [0.0, 0.0]}),
        "unknowns": result.x.to_json(),
        "residual_norms": result.residual.norms(),
        "report": report,
    }


def save_state(result: SolveResult, path, options: SolveOptions | None = None) -> None:
    text = json.dumps(state_dict(result, options), indent=1, sort_keys=True, default=_json_default)
    Path(path).write_text(text + "\n", encoding="utf-8")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    raise TypeError(f"cannot serialise {type(obj).__name__}")


@dataclass
class SolvedState:
    graph: WeightedGraph
    t: float
    x: pot.UnknownVector
    rotation: float
    offset: complex
    data: dict


def load_state(path) -> SolvedState:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if data.get("format") != STATE_FORMAT:
        raise ValueError("unrecognised solve-state file")
    frame = data["frame"]
    rot = float(frame["rotation"])
    g = WeightedGraph.from_dict(data["graph"])
    g = WeightedGraph(g.vertices, g.edges, g.rays, rot)
    x = pot.UnknownVector.from_json(int(data["modes"]), data["unknowns"])
    off = complex(*frame["offset"])
    return SolvedState(g, float(data["t"]), x, rot, off, data)
