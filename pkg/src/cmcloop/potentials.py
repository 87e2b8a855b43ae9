"""Model potentials, closed forms, parameter vectors and assembly on the plumbing atlas.

Everything that depends on the loop parameter is evaluated on the standard
circle grid ``lam_k = exp(2 pi i k / M)``; coefficient views are obtained by
FFT when needed.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .forms import FAR, RationalLoopForm
from .graph import WeightedGraph
from .loopgroup import Gauge, LoopMatrix
from .wiener import DEFAULT_RHO, bar_samples, circle_grid

EPS = 0.5
EPS_PRIME = 0.25

HUGE = 1e25  # anything beyond is treated as the point at infinity

N_LOWER = np.array([[0, 0], [1, 0]], dtype=complex)


def grid_size(n: int) -> int:
    """Default number of loop samples for truncation degree ``n``."""
    m = max(32, 4 * n)
    return m + (m % 2)


def re_loop(s: np.ndarray, axis: int = -1) -> np.ndarray:
    """Samples of the loop whose coefficients are the real parts of those of ``s``."""
    return 0.5 * (s + bar_samples(s, axis))


def im_loop(s: np.ndarray, axis: int = -1) -> np.ndarray:
    return (s - bar_samples(s, axis)) / 2j


# closed forms ------------------------------------------------------------------------------


def _z_sqrt(z, sqrt_z):
    z = np.asarray(z, dtype=complex)
    if sqrt_z is None:
        return z, np.sqrt(z)
    return z, np.asarray(sqrt_z, dtype=complex)


def phi_S(z, lam, sqrt_z=None) -> np.ndarray:
    """Holomorphic frame of the spherical potential, shape ``z.shape + lam.shape + (2, 2)``."""
    z, sz = _z_sqrt(z, sqrt_z)
    lam = np.asarray(lam, dtype=complex)
    zz = z[..., None]
    c = 1 / (2 * sz[..., None])
    out = np.empty(z.shape + lam.shape + (2, 2), dtype=complex)
    out[..., 0, 0] = c * (zz + 1)
    out[..., 1, 1] = c * (zz + 1)
    out[..., 0, 1] = c * (zz - 1) / lam
    out[..., 1, 0] = c * (zz - 1) * lam
    return out


def F_S(z, lam) -> np.ndarray:
    """Unitary factor of ``phi_S`` (principal square root of ``z``)."""
    z = np.asarray(z, dtype=complex)
    lam = np.asarray(lam, dtype=complex)
    a = np.abs(z)[..., None]
    th = np.angle(z)[..., None]
    zz, zb = z[..., None], np.conj(z)[..., None]
    c = 1 / (np.sqrt(2) * np.sqrt(1 + a**2))
    e = np.exp(0.5j * th)
    out = np.empty(z.shape + lam.shape + (2, 2), dtype=complex)
    out[..., 0, 0] = c * (zb + 1) * e
    out[..., 0, 1] = c * (zz - 1) / lam / e
    out[..., 1, 0] = c * lam * (1 - zb) * e
    out[..., 1, 1] = c * (zz + 1) / e
    return out


def B_S(z, lam) -> np.ndarray:
    z = np.asarray(z, dtype=complex)
    lam = np.asarray(lam, dtype=complex)
    a = np.abs(z)[..., None]
    c = 1 / (np.sqrt(2 * a) * np.sqrt(1 + a**2))
    out = np.zeros(z.shape + lam.shape + (2, 2), dtype=complex)
    out[..., 0, 0] = c * 2 * a
    out[..., 1, 0] = c * lam * (a**2 - 1)
    out[..., 1, 1] = c * (1 + a**2)
    return out


def f_S(z) -> np.ndarray:
    """Immersion of the spherical frame as a point of R^3."""
    z = np.asarray(z, dtype=complex)
    a2 = np.abs(z) ** 2
    return np.stack([(1 - a2), -2 * z.imag, np.abs(z - 1) ** 2], axis=-1) / (1 + a2)[..., None]


def N_S(z) -> np.ndarray:
    z = np.asarray(z, dtype=complex)
    a2 = np.abs(z) ** 2
    return np.stack([a2 - 1, 2 * z.imag, 2 * z.real], axis=-1) / (1 + a2)[..., None]


def phi_C(z, sqrt_z=None) -> np.ndarray:
    z, sz = _z_sqrt(z, sqrt_z)
    c = 1 / (2 * sz)
    return np.stack([np.stack([c * (z + 1), c * (z - 1)], -1), np.stack([c * (z - 1), c * (z + 1)], -1)], -2)


def N_C(z) -> np.ndarray:
    z = np.asarray(z, dtype=complex)
    a2 = np.abs(z) ** 2
    return np.stack([1 - a2, 2 * z.imag, 2 * z.real], axis=-1) / (1 + a2)[..., None]


def inverse_stereographic(z) -> np.ndarray:
    """Inverse of the stereographic projection from the north pole."""
    z = np.asarray(z, dtype=complex)
    a2 = np.abs(z) ** 2
    return np.stack([2 * z.real, 2 * z.imag, a2 - 1], axis=-1) / (1 + a2)[..., None]


def phi_S_loop(z: complex, n: int = 16, rho: float = DEFAULT_RHO, sqrt_z=None) -> LoopMatrix:
    sz = np.sqrt(complex(z)) if sqrt_z is None else complex(sqrt_z)
    c = 1 / (2 * sz)
    return LoopMatrix.from_terms(
        {
            0: c * np.diag([z + 1, z + 1]),
            -1: c * np.array([[0, z - 1], [0, 0]]),
            1: c * np.array([[0, 0], [z - 1, 0]]),
        },
        n,
        rho,
    )


def F_S_loop(z: complex, n: int = 16, rho: float = DEFAULT_RHO) -> LoopMatrix:
    a, th = abs(z), np.angle(z)
    d = np.diag([np.exp(0.5j * th), np.exp(-0.5j * th)])
    c = 1 / (np.sqrt(2) * np.sqrt(1 + a * a))
    zb = np.conj(z)
    return LoopMatrix.from_terms(
        {
            0: c * np.array([[zb + 1, 0], [0, z + 1]]) @ d,
            -1: c * np.array([[0, z - 1], [0, 0]]) @ d,
            1: c * np.array([[0, 0], [1 - zb, 0]]) @ d,
        },
        n,
        rho,
    )


def B_S_loop(z: complex, n: int = 16, rho: float = DEFAULT_RHO) -> LoopMatrix:
    a = abs(z)
    c = 1 / (np.sqrt(2 * a) * np.sqrt(1 + a * a))
    return LoopMatrix.from_terms(
        {0: c * np.diag([2 * a, 1 + a * a]), 1: c * np.array([[0, 0], [a * a - 1, 0]])}, n, rho
    )


def closed_forms() -> dict:
    """Closed-form objects of the spherical and catenoidal potentials."""
    return {
        "Phi_S": phi_S,
        "F_S": F_S,
        "B_S": B_S,
        "f_S": f_S,
        "N_S": N_S,
        "G_S": gauge_S,
        "Phi_C": phi_C,
        "N_C": N_C,
    }


def _sqrt_gauge(x, y, lam, dual_form: bool = False) -> Gauge:
    """Gauge ``[[f, 0], [lam g, 1/f]]`` (or its dual ``[[1/f, g], [0, f]]``).

    ``f = (1+z)/sqrt(z)`` and ``g = x (1-z)/sqrt(z) + i y (1+z)/sqrt(z)`` with ``x, y``
    given as loop samples.
    """
    x = np.asarray(x, dtype=complex)
    y = np.asarray(y, dtype=complex)
    lam = np.asarray(lam, dtype=complex)

    def fn(z):
        z = np.asarray(z, dtype=complex)
        s = np.sqrt(z)
        s3 = z * s
        f = (1 + z) / s
        df = (z - 1) / (2 * s3)
        g = x * (1 - z) / s + 1j * y * f
        dg = -x * (1 + z) / (2 * s3) + 1j * y * df
        gm = np.zeros(z.shape + (2, 2), dtype=complex)
        dm = np.zeros_like(gm)
        if dual_form:
            gm[..., 0, 0] = 1 / f
            gm[..., 0, 1] = g
            gm[..., 1, 1] = f
            dm[..., 0, 0] = -df / f**2
            dm[..., 0, 1] = dg
            dm[..., 1, 1] = df
        else:
            gm[..., 0, 0] = f
            gm[..., 1, 0] = lam * g
            gm[..., 1, 1] = 1 / f
            dm[..., 0, 0] = df
            dm[..., 1, 0] = lam * dg
            dm[..., 1, 1] = -df / f**2
        return gm, dm

    return Gauge(fn, [0.0, -1.0], "G")


def gauge_S(lam) -> Gauge:
    """The gauge removing the apparent singularities of the spherical potential."""
    lam = np.asarray(lam, dtype=complex)
    return _sqrt_gauge(np.ones(lam.shape), np.zeros(lam.shape), lam)


def gauge_vertex(x, y, lam) -> Gauge:
    return _sqrt_gauge(x, y, lam)


def gauge_edge(x, y, lam) -> Gauge:
    return _sqrt_gauge(x, y, lam, dual_form=True)


def model_potential(kind: str, lam, r: float | None = None, s: float | None = None) -> RationalLoopForm:
    """Standard potential ``residue * dz / z`` on the punctured plane.

    ``kind`` is ``"spherical"``, ``"catenoidal"`` or ``"delaunay"`` (with ``r + s = 1/2``).
    """
    lam = np.asarray(lam, dtype=complex)
    if kind == "spherical":
        r, s = 0.5, 0.0
    elif kind == "catenoidal":
        r, s = 0.0, 0.5
    elif kind == "delaunay":
        if r is None or s is None or abs(r + s - 0.5) > 1e-14 or r * s == 0:
            raise ValueError("Delaunay parameters need r + s = 1/2 and r s != 0")
    else:
        raise ValueError(f"unknown potential kind {kind!r}")
    res = np.zeros(lam.shape + (2, 2), dtype=complex)
    res[:, 0, 1] = r / lam + s
    res[:, 1, 0] = r * lam + s
    return RationalLoopForm.empty(lam, kind).add_pole(0.0, res)


# parameter vector --------------------------------------------------------------------------


def ray_key(i: int) -> str:
    return f"r{i}"


@dataclass
class UnknownVector:
    """All parameters of the construction, as real coefficient arrays.

    Loop parameters in the real positive subspace are stored as arrays of the
    ``n + 1`` coefficients of ``lam**0 .. lam**n``; scalars as 0-d arrays.
    Keys (``j`` a vertex, ``k`` a neighbour or a ray key ``"r<i>"``):

    * ``("a"|"b"|"c", j, k)`` for directed edges; ``("r", j, k)``, ``("theta", j, k)`` scalars.
    * ``("A"|"C"|"nu", j, k)`` for ``j < k``.
    * ``("ahat"|"bhat"|"theta", j, r)`` for rays.
    """

    n: int
    values: dict = field(default_factory=dict)

    def copy(self) -> UnknownVector:
        return UnknownVector(self.n, {k: np.array(v, dtype=float) for k, v in self.values.items()})

    def __getitem__(self, key):
        return self.values[key]

    def __setitem__(self, key, val):
        self.values[key] = np.asarray(val, dtype=float)

    def to_json(self) -> dict:
        return {"|".join(map(str, k)): np.asarray(v).tolist() for k, v in sorted(self.values.items(), key=str)}

    @classmethod
    def from_json(cls, n: int, data: dict) -> UnknownVector:
        out = cls(n)
        for k, v in data.items():
            parts = k.split("|")
            key = (parts[0], int(parts[1]), parts[2] if parts[2].startswith("r") else int(parts[2]))
            out.values[key] = np.asarray(v, dtype=float)
        return out


def central(g: WeightedGraph, n: int) -> UnknownVector:
    """Central value of the parameter vector."""
    x = UnknownVector(n)
    z = np.zeros(n + 1)
    for (j, k) in g.directed_edges():
        tau = g.weight(j, k)
        a = z.copy()
        a[0], a[1] = -tau / 2, tau / 2
        x[("a", j, k)] = a
        x[("b", j, k)] = z.copy()
        x[("c", j, k)] = z.copy()
        x[("r", j, k)] = tau
        x[("theta", j, k)] = np.angle(g.direction(j, k)) % (2 * np.pi)
    for (j, k) in sorted(g.edges):
        x[("A", j, k)] = z.copy()
        c = z.copy()
        c[0] = 0.5
        x[("C", j, k)] = c
        x[("nu", j, k)] = z.copy()
    for i, (j, u, tau) in enumerate(g.rays):
        key = ray_key(i)
        ah = z.copy()
        ah[0] = tau / 2
        x[("ahat", j, key)] = ah
        x[("bhat", j, key)] = z.copy()
        th = z.copy()
        th[0] = np.angle(u) % (2 * np.pi)
        x[("theta", j, key)] = th
    return x


def free_layout(g: WeightedGraph, n: int) -> list[tuple]:
    """Ordered list of free real coordinates ``(key, index)`` (``index`` None for scalars).

    Fixed: the constant terms of ray ``ahat`` and ``theta`` and ``r_jk`` for ``j < k``.
    """
    out = []
    for (j, k) in g.directed_edges():
        for name in ("a", "b", "c"):
            out += [((name, j, k), i) for i in range(n + 1)]
    for i, (j, _, _) in enumerate(g.rays):
        key = ray_key(i)
        out += [(("ahat", j, key), m) for m in range(1, n + 1)]
        out += [(("bhat", j, key), m) for m in range(0, n + 1)]
        out += [(("theta", j, key), m) for m in range(1, n + 1)]
    for (j, k) in sorted(g.edges):
        for name in ("A", "C", "nu"):
            out += [((name, j, k), i) for i in range(n + 1)]
        out += [(("theta", j, k), None), (("theta", k, j), None), (("r", k, j), None)]
    return out


def pack(x: UnknownVector, layout: list[tuple]) -> np.ndarray:
    return np.array([float(x[k]) if i is None else float(x[k][i]) for k, i in layout])


def unpack(x0: UnknownVector, vec: np.ndarray, layout: list[tuple]) -> UnknownVector:
    x = x0.copy()
    for v, (k, i) in zip(vec, layout):
        if i is None:
            x.values[k] = np.asarray(v, dtype=float)
        else:
            x.values[k][i] = v
    return x


def sync_fixed(x: UnknownVector, g: WeightedGraph) -> UnknownVector:
    """Reset the parameters fixed by the graph (ray weights, ray angles, ``r_jk`` for ``j < k``)."""
    x = x.copy()
    for i, (j, u, tau) in enumerate(g.rays):
        key = ray_key(i)
        x.values[("ahat", j, key)][0] = tau / 2
        x.values[("theta", j, key)][0] = np.angle(u) % (2 * np.pi)
    for (j, k) in sorted(g.edges):
        x.values[("r", j, k)] = np.asarray(g.weight(j, k), dtype=float)
    return x


# sampled parameters ------------------------------------------------------------------------


class Sampled:
    """Loop parameters of ``x`` evaluated on the circle grid."""

    def __init__(self, g: WeightedGraph, x: UnknownVector, lam: np.ndarray):
        self.g = g
        self.x = x
        self.lam = lam
        self.V = lam[:, None] ** np.arange(x.n + 1)[None, :]
        self.one = np.ones(len(lam), dtype=complex)

    def loop(self, key) -> np.ndarray:
        return self.V @ self.x[key].astype(complex)

    def m_edge(self, j, k) -> np.ndarray:
        """``m_jk = [[a, i b / lam], [i c, -a]]``."""
        a, b, c = self.loop(("a", j, k)), self.loop(("b", j, k)), self.loop(("c", j, k))
        out = np.zeros((len(self.lam), 2, 2), dtype=complex)
        out[:, 0, 0] = a
        out[:, 1, 1] = -a
        out[:, 0, 1] = 1j * b / self.lam
        out[:, 1, 0] = 1j * c
        return out

    def p_edge(self, j, k) -> complex:
        return complex(np.exp(1j * float(self.x[("theta", j, k)])))

    def r_edge(self, j, k) -> float:
        return float(self.x[("r", j, k)])

    def ray(self, j, key):
        """``(a, b, p)`` for a ray: ``a = (lam-1)^2 ahat``, ``b = (lam-1)^2 bhat``, ``p = exp(i theta)``."""
        w = (self.lam - 1) ** 2
        return (
            w * self.loop(("ahat", j, key)),
            w * self.loop(("bhat", j, key)),
            np.exp(1j * self.loop(("theta", j, key))),
        )

    def q(self, j, k) -> np.ndarray:
        j, k = min(j, k), max(j, k)
        return 1j * self.loop(("nu", j, k))

    def edge_sphere(self, j, k):
        j, k = min(j, k), max(j, k)
        return self.loop(("A", j, k)), self.loop(("C", j, k))


def _m_vertex(lam, C) -> np.ndarray:
    out = np.zeros((len(lam), 2, 2), dtype=complex)
    out[:, 0, 1] = 0.5 / lam
    out[:, 1, 0] = lam * C
    return out


def _m_edge_sphere(A, B, C) -> np.ndarray:
    out = np.zeros((len(A), 2, 2), dtype=complex)
    out[:, 0, 0] = 1j * A
    out[:, 1, 1] = -1j * A
    out[:, 0, 1] = B
    out[:, 1, 0] = C
    return out


def residue_chi_vertex(s: Sampled, j: int) -> np.ndarray:
    """Residue of the node-period form at ``0_j`` (and ``infinity_j``)."""
    out = np.zeros((len(s.lam), 2, 2), dtype=complex)
    for e in s.g.ends(j):
        if e.is_ray:
            _, b, _ = s.ray(j, e.key)
            out[:, 1, 0] -= 0.5j * b
        else:
            out -= 0.5 * s.m_edge(j, e.key)
    return out


def vertex_C(s: Sampled, j: int, t: float) -> np.ndarray:
    """Dependent parameter ``C_j`` making the gauged ``alpha`` regular with real residue condition."""
    r0 = residue_chi_vertex(s, j)
    ra = t * r0[:, 0, 0]
    rb = 0.5 + t * s.lam * r0[:, 0, 1]
    return re_loop((0.25 - ra**2) / rb)


def edge_B(s: Sampled, j: int, k: int, t: float) -> np.ndarray:
    """Dependent parameter ``B_jk`` (dual of :func:`vertex_C`)."""
    A, C = s.edge_sphere(j, k)
    mm = s.m_edge(j, k) + s.m_edge(k, j)
    ra = 1j * A + 0.5 * t * mm[:, 0, 0]
    rc = C + 0.5 * t * mm[:, 1, 0]
    return re_loop((0.25 - ra**2) / rc)


def M_vertex(s: Sampled, j: int, t: float) -> np.ndarray:
    return _m_vertex(s.lam, vertex_C(s, j, t))


def M_edge(s: Sampled, j: int, k: int, t: float) -> np.ndarray:
    A, C = s.edge_sphere(j, k)
    return _m_edge_sphere(A, edge_B(s, j, k, t), C)


# plumbing atlas ----------------------------------------------------------------------------


def vchart(j: int) -> str:
    return f"V{j}"


def echart(j: int, k: int) -> str:
    return f"E{min(j, k)}-{max(j, k)}"


def node_matrix(p: complex) -> np.ndarray:
    """Mobius matrix of the node coordinate ``-2i (z - p) / (z + p)``."""
    return np.array([[-2j, 2j * p], [1, p]], dtype=complex)


def mobius_apply(T: np.ndarray, z):
    z = np.asarray(z, dtype=complex)
    return (T[0, 0] * z + T[0, 1]) / (T[1, 0] * z + T[1, 1])


class PlumbingAtlas:
    """Charts of the opened noded surface of a tree graph and their Mobius transitions.

    The chart of vertex ``j`` is glued to the chart of the edge ``(j, k)`` by
    ``z_jk * z'_jk = t_jk`` with ``z_jk = -2i (z - p_jk)/(z + p_jk)`` and
    ``z'_jk = -2i (w - p')/(w + p')``, ``p' = +1`` for ``j < k`` and ``-1`` otherwise.
    """

    def __init__(self, g: WeightedGraph, x: UnknownVector, t: float):
        if t != 0 and not g.is_tree():
            raise ValueError("opened surfaces are only available for tree graphs")
        self.g, self.x, self.t = g, x, t
        self.links: dict[str, dict[str, np.ndarray]] = {vchart(j): {} for j in g.ids}
        for (a, b) in sorted(g.edges):
            self.links[echart(a, b)] = {}
        for (j, k) in g.directed_edges():
            T = self.transition_vertex_to_edge(j, k)
            self.links[vchart(j)][echart(j, k)] = T
            self.links[echart(j, k)][vchart(j)] = np.linalg.inv(T)
        self._cache: dict[tuple[str, str], np.ndarray] = {}

    def p(self, j, k) -> complex:
        return complex(np.exp(1j * float(self.x[("theta", j, k)])))

    def t_edge(self, j, k) -> float:
        return float(self.x[("r", j, k)]) * self.t

    @staticmethod
    def p_prime(j, k) -> float:
        return 1.0 if j < k else -1.0

    def node_coord(self, j, k) -> np.ndarray:
        return node_matrix(self.p(j, k))

    def node_coord_edge(self, j, k) -> np.ndarray:
        return node_matrix(self.p_prime(j, k))

    def transition_vertex_to_edge(self, j, k) -> np.ndarray:
        inv = np.array([[0, self.t_edge(j, k)], [1, 0]], dtype=complex)
        return np.linalg.inv(self.node_coord_edge(j, k)) @ inv @ self.node_coord(j, k)

    def transition(self, src: str, dst: str) -> np.ndarray:
        """Mobius matrix mapping ``src`` coordinates to ``dst`` coordinates."""
        if src == dst:
            return np.eye(2, dtype=complex)
        key = (src, dst)
        if key in self._cache:
            return self._cache[key]
        prev = {src: None}
        queue = deque([src])
        while queue:
            c = queue.popleft()
            for nb in self.links[c]:
                if nb not in prev:
                    prev[nb] = c
                    queue.append(nb)
        if dst not in prev:
            raise ValueError(f"charts {src} and {dst} are not connected")
        T = np.eye(2, dtype=complex)
        c = dst
        while prev[c] is not None:
            T = T @ self.links[prev[c]][c]
            c = prev[c]
        self._cache[key] = T
        return T

    @property
    def charts(self) -> list[str]:
        return list(self.links)


# assembly -----------------------------------------------------------------------------------


@dataclass
class PoleTerm:
    """Pole of a chart's own part: location per sample (``None`` for infinity)."""

    loc: np.ndarray | None
    res: np.ndarray
    dbl: np.ndarray


def own_poles(s: Sampled, t: float) -> dict[str, list[PoleTerm]]:
    """Poles attached to each chart, in that chart's coordinate (valid for ``t > 0``)."""
    g, lam = s.g, s.lam
    m = len(lam)
    zero = np.zeros((m, 2, 2), dtype=complex)
    out: dict[str, list[PoleTerm]] = {}
    for j in g.ids:
        mj = M_vertex(s, j, t)
        r0 = residue_chi_vertex(s, j)
        terms = [PoleTerm(np.zeros(m, dtype=complex), mj + t * r0, zero), PoleTerm(None, -mj + t * r0, zero)]
        for e in g.ends(j):
            if not e.is_ray:
                continue
            a, b, p = s.ray(j, e.key)
            res = np.zeros((m, 2, 2), dtype=complex)
            dbl = np.zeros((m, 2, 2), dtype=complex)
            res[:, 1, 0] = t * 1j * b
            dbl[:, 1, 0] = t * a * p
            terms.append(PoleTerm(p, res, dbl))
        out[vchart(j)] = terms
    for (j, k) in sorted(g.edges):
        mjk = M_edge(s, j, k, t)
        half = 0.5 * t * (s.m_edge(j, k) + s.m_edge(k, j))
        q = s.q(j, k)
        # sigma(q) = -1/q; on samples where q = 0 it sits at infinity (encoded as FAR)
        sq = np.where(q == 0, FAR, -1 / np.where(q == 0, 1, q))
        out[echart(j, k)] = [PoleTerm(q, mjk + half, zero), PoleTerm(sq, -mjk + half, zero)]
    return out


def _transport(term: PoleTerm, T: np.ndarray, m: int) -> PoleTerm | None:
    a, b, c, d = T[0, 0], T[0, 1], T[1, 0], T[1, 1]
    affine = abs(c) <= 1e-15 * (abs(a) + abs(d))
    if term.loc is None:
        if affine:
            return None
        return PoleTerm(np.full(m, a / c, dtype=complex), term.res, term.dbl)
    at_inf = np.abs(term.loc) > HUGE
    loc = np.where(at_inf, 0, term.loc)
    den = c * loc + d
    lands_inf = ~at_inf & (np.abs(den) <= 1e-300)
    if np.any((at_inf | lands_inf)[:, None, None] & (term.dbl != 0)):
        raise ValueError("double pole at infinity")
    den = np.where(lands_inf, 1, den)
    newloc = (a * loc + b) / den
    deriv = (a * d - b * c) / den**2
    # a pole at infinity lands at a / c (or stays at infinity for affine maps)
    inf_image = FAR if affine else a / c
    newloc = np.where(at_inf, inf_image, np.where(lands_inf, FAR, newloc))
    off = lands_inf | (at_inf & affine)
    res = np.where(off[:, None, None], 0, term.res)
    return PoleTerm(newloc, res, term.dbl * np.where(at_inf, 0, deriv)[:, None, None])


def assemble(g: WeightedGraph, t: float, x: UnknownVector, lam: np.ndarray | None = None) -> dict[str, RationalLoopForm]:
    """Potential ``eta + t chi`` in every chart of the plumbing atlas.

    For ``t = 0`` the explicit formulas of the noded surface are used; for
    ``t > 0`` (tree graphs) each chart receives the poles of all charts
    transported by the Mobius transitions.
    """
    lam = circle_grid(grid_size(x.n)) if lam is None else lam
    if t == 0:
        return assemble_t0(g, x, lam)
    s = Sampled(g, x, lam)
    atlas = PlumbingAtlas(g, x, t)
    own = own_poles(s, t)
    m = len(lam)
    out = {}
    for c in atlas.charts:
        locs, res, dbl = [], [], []
        for src, terms in own.items():
            T = atlas.transition(src, c)
            for term in terms:
                tr = _transport(term, T, m)
                if tr is None:
                    continue
                locs.append(tr.loc)
                res.append(tr.res)
                dbl.append(tr.dbl)
        out[c] = RationalLoopForm(lam, np.array(locs), np.array(res), np.array(dbl), None, c)
    return out


def _omega(form: RationalLoopForm, q: np.ndarray, coef: np.ndarray) -> RationalLoopForm:
    """Add ``coef * omega_q``: poles at ``q`` (residue 1) and ``-1/q`` (residue -1)."""
    form = form.add_pole(q, coef)
    nz = q != 0
    if np.any(nz):
        loc = np.where(nz, -1 / np.where(nz, q, 1), FAR)
        form = form.add_pole(loc, -coef * nz[:, None, None])
    return form


def _half_pair(form: RationalLoopForm, q: np.ndarray, coef: np.ndarray) -> RationalLoopForm:
    """Add ``coef / 2`` at both ``q`` and ``-1/q`` (the latter vanishes for ``q = 0``)."""
    form = form.add_pole(q, 0.5 * coef)
    nz = q != 0
    if np.any(nz):
        loc = np.where(nz, -1 / np.where(nz, q, 1), FAR)
        form = form.add_pole(loc, 0.5 * coef * nz[:, None, None])
    return form


def assemble_t0(g: WeightedGraph, x: UnknownVector, lam: np.ndarray, parts: str = "xi") -> dict[str, RationalLoopForm]:
    """Explicit potentials of the noded surface.

    ``parts`` selects ``"eta"``, ``"chi"``, ``"deta"`` (t-derivative of eta at 0),
    ``"dxi"`` (``deta + chi``) or ``"xi"`` (``eta`` alone, i.e. the potential at ``t = 0``).
    """
    s = Sampled(g, x, lam)
    m = len(lam)
    out = {}
    for j in g.ids:
        form = RationalLoopForm.empty(lam, vchart(j))
        if parts in ("eta", "xi"):
            form = form.add_pole(0.0, M_vertex(s, j, 0.0))
        if parts in ("chi", "dxi"):
            for e in g.ends(j):
                if e.is_ray:
                    a, b, p = s.ray(j, e.key)
                    res = np.zeros((m, 2, 2), dtype=complex)
                    dbl = np.zeros((m, 2, 2), dtype=complex)
                    res[:, 1, 0] = 1j * b
                    dbl[:, 1, 0] = a * p
                    form = form.add_pole(p, res, dbl)
                    form = form.add_pole(0.0, -0.5 * res)
                else:
                    mjk = s.m_edge(j, e.key)
                    form = form.add_pole(s.p_edge(j, e.key), mjk)
                    form = form.add_pole(0.0, -0.5 * mjk)
        if parts in ("deta", "dxi"):
            for e in g.ends(j):
                if e.is_ray:
                    continue
                k = e.key
                q = s.q(j, k)
                p = s.p_edge(j, k)
                coef = s.r_edge(j, k) * M_edge(s, j, k, 0.0) * ((1 + q**2) / (1 - q**2))[:, None, None]
                form = form.add_pole(p, None, coef * p)
        out[vchart(j)] = form
    for (j, k) in sorted(g.edges):
        form = RationalLoopForm.empty(lam, echart(j, k))
        q = s.q(j, k)
        if parts in ("eta", "xi"):
            form = _omega(form, q, M_edge(s, j, k, 0.0))
        if parts in ("chi", "dxi"):
            for kk, jj, pp in ((j, k, 1.0), (k, j, -1.0)):
                mm = s.m_edge(kk, jj)
                form = form.add_pole(pp, -mm)
                form = _half_pair(form, q, mm)
        if parts in ("deta", "dxi"):
            form = form.add_pole(1.0, None, s.r_edge(j, k) * M_vertex(s, j, 0.0))
            form = form.add_pole(-1.0, None, -s.r_edge(k, j) * M_vertex(s, k, 0.0))
        out[echart(j, k)] = form
    return out


def t_derivative_at_0(g: WeightedGraph, x: UnknownVector, lam: np.ndarray | None = None) -> dict[str, RationalLoopForm]:
    """``d(eta)/dt + chi`` at ``t = 0`` in every chart."""
    lam = circle_grid(grid_size(x.n)) if lam is None else lam
    return assemble_t0(g, x, lam, "dxi")


# regularity ---------------------------------------------------------------------------------


def _res0_weight(form: RationalLoopForm, entry: tuple[int, int], lam_factor: bool = False) -> np.ndarray:
    """Per-sample ``Res_0 ((z+1)^2 / z * h)`` where ``h`` is one entry of the form.

    A pole at ``a != 0`` contributes ``d/a^2 - r/a``; a pole at 0 contributes
    ``d + 2 r`` (``r`` residue, ``d`` double-pole coefficient).
    """
    i, k = entry
    r = form.res[:, :, i, k]
    d = form.dbl[:, :, i, k]
    if lam_factor:
        r = r * form.lam
        d = d * form.lam
    loc = form.locs
    at0 = np.abs(loc) <= 1e-300
    safe = np.where(at0, 1.0, loc)
    val = np.where(at0, d + 2 * r, d / safe**2 - r / safe)
    return np.sum(val, axis=0)


def R_vertex(g: WeightedGraph, t: float, x: UnknownVector, lam: np.ndarray | None = None, forms=None) -> dict[int, complex]:
    """Regularity residue at ``0_j``: ``t^-1 Res_0 ((z+1)^2/z gamma^0)``, extended to ``t = 0``."""
    lam = circle_grid(grid_size(x.n)) if lam is None else lam
    if t == 0:
        forms = t_derivative_at_0(g, x, lam)
        scale = 1.0
    else:
        forms = assemble(g, t, x, lam) if forms is None else forms
        scale = 1.0 / t
    out = {}
    for j in g.ids:
        v = _res0_weight(forms[vchart(j)], (1, 0))
        out[j] = complex(np.mean(v)) * scale
    return out


def w_coordinate(q: np.ndarray) -> np.ndarray:
    """Per-sample Mobius matrices of ``w = (z - q) / (1 + q z)``."""
    T = np.zeros((len(q), 2, 2), dtype=complex)
    T[:, 0, 0] = 1
    T[:, 0, 1] = -q
    T[:, 1, 0] = q
    T[:, 1, 1] = 1
    return T


def R_edge(g: WeightedGraph, t: float, x: UnknownVector, lam: np.ndarray | None = None, forms=None) -> dict[tuple, complex]:
    """Regularity residue at ``q_jk`` in the ``w`` coordinate, extended to ``t = 0``."""
    lam = circle_grid(grid_size(x.n)) if lam is None else lam
    s = Sampled(g, x, lam)
    if t == 0:
        forms = t_derivative_at_0(g, x, lam)
        scale = 1.0
    else:
        forms = assemble(g, t, x, lam) if forms is None else forms
        scale = 1.0 / t
    out = {}
    for (j, k) in sorted(g.edges):
        f = forms[echart(j, k)]
        fw = f.mobius(w_coordinate(s.q(j, k)))
        v = _res0_weight(fw, (0, 1), lam_factor=True)
        out[(j, k)] = complex(np.mean(v)) * scale
    return out


def R_edge_formula(g: WeightedGraph, x: UnknownVector) -> dict[tuple, complex]:
    """Closed form of the edge regularity residue at ``t = 0``."""
    out = {}
    for (j, k) in sorted(g.edges):
        q0 = 1j * float(x[("nu", j, k)][0])
        rjk, rkj = float(x[("r", j, k)]), float(x[("r", k, j)])
        bjk, bkj = float(x[("b", j, k)][0]), float(x[("b", k, j)][0])
        out[(j, k)] = (
            rjk * (1 + q0**2) / (2 * (1 - q0) ** 2)
            - rkj * (1 + q0**2) / (2 * (1 + q0) ** 2)
            + 2j * bjk / (1 - q0)
            + 2j * q0 * bkj / (1 + q0)
        )
    return out


@dataclass
class RegularityData:
    xy_vertex: dict
    C_vertex: dict
    xy_edge: dict
    B_edge: dict
    R_vertex: dict
    R_edge: dict
    gauges_vertex: dict
    gauges_edge: dict


def regularity_data(g: WeightedGraph, t: float, x: UnknownVector, lam: np.ndarray | None = None) -> RegularityData:
    """Gauge parameters, dependent coefficients and regularity residues."""
    lam = circle_grid(grid_size(x.n)) if lam is None else lam
    s = Sampled(g, x, lam)
    xyv, cv, gv = {}, {}, {}
    for j in g.ids:
        r0 = residue_chi_vertex(s, j)
        ra = t * r0[:, 0, 0]
        rb = 0.5 + t * lam * r0[:, 0, 1]
        w = (0.5 - ra) / rb
        xyv[j] = (re_loop(w), im_loop(w))
        cv[j] = vertex_C(s, j, t)
        gv[j] = gauge_vertex(xyv[j][0], xyv[j][1], lam)
    xye, be, ge = {}, {}, {}
    for (j, k) in sorted(g.edges):
        A, C = s.edge_sphere(j, k)
        mm = s.m_edge(j, k) + s.m_edge(k, j)
        ra = 1j * A + 0.5 * t * mm[:, 0, 0]
        rc = C + 0.5 * t * mm[:, 1, 0]
        w = (0.5 + ra) / rc
        xye[(j, k)] = (re_loop(w), im_loop(w))
        be[(j, k)] = edge_B(s, j, k, t)
        ge[(j, k)] = gauge_edge(xye[(j, k)][0], xye[(j, k)][1], lam)
    return RegularityData(xyv, cv, xye, be, R_vertex(g, t, x, lam), R_edge(g, t, x, lam), gv, ge)
