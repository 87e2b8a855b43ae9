"""Weighted planar graphs: forces, balancing, non-degeneracy, pre-embeddedness.

Vertex positions and directions are handled as complex numbers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

ANGLE_TOL = 1e-6
RANK_CUTOFF = 1e-8
MIN_CLEARANCE = math.radians(10.0)


class GraphError(ValueError):
    pass


class NotBalanced(GraphError):
    pass


class Degenerate(GraphError):
    pass


@dataclass(frozen=True)
class End:
    """An edge or ray leaving a vertex."""

    vertex: int
    key: object  # neighbour id for edges, "r<i>" for rays
    u: complex
    tau: float

    @property
    def is_ray(self) -> bool:
        return isinstance(self.key, str)


@dataclass
class WeightedGraph:
    """Horizontal weighted graph.

    Attributes
    ----------
    vertices : dict[int, complex]
        Positions ``v_j``.
    edges : dict[tuple[int, int], float]
        Weights keyed by ``(a, b)`` with ``a < b``.
    rays : list[tuple[int, complex, float]]
        ``(vertex, unit direction, weight)``.
    rotation : float
        Angle by which the input was rotated at load time.
    """

    vertices: dict[int, complex]
    edges: dict[tuple[int, int], float] = field(default_factory=dict)
    rays: list[tuple[int, complex, float]] = field(default_factory=list)
    rotation: float = 0.0

    def __post_init__(self):
        self.vertices = {int(k): complex(v) for k, v in self.vertices.items()}
        edges = {}
        for (a, b), w in self.edges.items():
            if a == b:
                raise GraphError("self-loop")
            if w == 0:
                raise GraphError("zero edge weight")
            if a not in self.vertices or b not in self.vertices:
                raise GraphError("edge references unknown vertex")
            edges[(min(a, b), max(a, b))] = float(w)
        self.edges = edges
        rays = []
        for j, u, w in self.rays:
            u = complex(u)
            if abs(abs(u) - 1) > 1e-12:
                raise GraphError("ray direction must be a unit vector")
            if w == 0:
                raise GraphError("zero ray weight")
            if j not in self.vertices:
                raise GraphError("ray references unknown vertex")
            rays.append((int(j), u, float(w)))
        self.rays = rays
        for (a, b) in self.edges:
            if abs(self.vertices[a] - self.vertices[b]) == 0:
                raise GraphError("edge of zero length")

    # derived quantities

    @property
    def ids(self) -> list[int]:
        return sorted(self.vertices)

    def length(self, a: int, b: int) -> float:
        return abs(self.vertices[b] - self.vertices[a])

    def direction(self, a: int, b: int) -> complex:
        d = self.vertices[b] - self.vertices[a]
        return d / abs(d)

    def weight(self, a: int, b) -> float:
        if isinstance(b, str):
            return self.rays[int(b[1:])][2]
        return self.edges[(min(a, b), max(a, b))]

    def ends(self, j: int) -> list[End]:
        """Edges and rays at ``j`` sorted by the argument of their direction in ``(0, 2 pi)``."""
        out = []
        for (a, b), w in self.edges.items():
            if a == j:
                out.append(End(j, b, self.direction(a, b), w))
            elif b == j:
                out.append(End(j, a, self.direction(b, a), w))
        for i, (v, u, w) in enumerate(self.rays):
            if v == j:
                out.append(End(j, f"r{i}", u, w))
        out.sort(key=lambda e: np.angle(e.u) % (2 * np.pi))
        return out

    def directed_edges(self) -> list[tuple[int, int]]:
        out = []
        for (a, b) in sorted(self.edges):
            out += [(a, b), (b, a)]
        return out

    def is_tree(self) -> bool:
        n = len(self.vertices)
        if len(self.edges) != n - 1:
            return False
        adj = {j: set() for j in self.vertices}
        for a, b in self.edges:
            adj[a].add(b)
            adj[b].add(a)
        seen, stack = set(), [self.ids[0]]
        while stack:
            j = stack.pop()
            if j in seen:
                continue
            seen.add(j)
            stack += list(adj[j] - seen)
        return len(seen) == n

    def all_directions(self) -> list[complex]:
        out = []
        for a, b in self.edges:
            out += [self.direction(a, b), self.direction(b, a)]
        out += [u for _, u, _ in self.rays]
        return out

    def rotated(self, angle: float) -> WeightedGraph:
        r = complex(math.cos(angle), math.sin(angle))
        return WeightedGraph(
            {j: v * r for j, v in self.vertices.items()},
            dict(self.edges),
            [(j, u * r, w) for j, u, w in self.rays],
            self.rotation + angle,
        )

    def clearance(self) -> float:
        """Smallest angle between a direction and the real axis."""
        dirs = self.all_directions()
        if not dirs:
            return math.pi / 2
        return min(min(abs(np.angle(u)), math.pi - abs(np.angle(u))) for u in dirs)

    def normalized(self) -> WeightedGraph:
        """Rotate so that no direction is close to +-1.

        When the clearance is below ``MIN_CLEARANCE`` the graph is rotated so that
        the real axis sits in the middle of the widest angular gap of the
        directions taken modulo pi.
        """
        if self.clearance() >= MIN_CLEARANCE:
            return self
        ang = sorted({round(float(np.angle(u)) % math.pi, 12) for u in self.all_directions()})
        gaps = [(ang[(i + 1) % len(ang)] - ang[i]) % math.pi or math.pi for i in range(len(ang))]
        i = int(np.argmax(gaps))
        mid = ang[i] + gaps[i] / 2
        return self.rotated(-mid)

    def translated_to_base(self) -> WeightedGraph:
        v0 = self.vertices[self.ids[0]]
        return replace(self, vertices={j: v - v0 for j, v in self.vertices.items()})

    # file format

    @classmethod
    def from_dict(cls, data: dict) -> WeightedGraph:
        verts = {int(v["id"]): complex(v["x"], v["y"]) for v in data["vertices"]}
        edges = {}
        for e in data.get("edges", []):
            a, b = int(e["a"]), int(e["b"])
            if a == b:
                raise GraphError("self-loop")
            edges[(min(a, b), max(a, b))] = float(e["weight"])
        rays = []
        for r in data.get("rays", []):
            ang = math.radians(float(r["angle_deg"]))
            rays.append((int(r["vertex"]), complex(math.cos(ang), math.sin(ang)), float(r["weight"])))
        for j in verts:
            if j <= 0:
                raise GraphError("vertex ids must be positive integers")
        return cls(verts, edges, rays)

    def to_dict(self) -> dict:
        return {
            "vertices": [{"id": j, "x": v.real, "y": v.imag} for j, v in sorted(self.vertices.items())],
            "edges": [{"a": a, "b": b, "weight": w} for (a, b), w in sorted(self.edges.items())],
            "rays": [
                {"vertex": j, "angle_deg": math.degrees(math.atan2(u.imag, u.real)), "weight": w}
                for j, u, w in self.rays
            ],
        }

    @classmethod
    def load(cls, path: str | Path) -> WeightedGraph:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def forces(g: WeightedGraph) -> dict[int, complex]:
    """Force ``F_j``: weighted sum of unit directions of edges and rays at ``j``."""
    out = {j: 0j for j in g.vertices}
    for (a, b), w in g.edges.items():
        u = g.direction(a, b)
        out[a] += w * u
        out[b] -= w * u
    for j, u, w in g.rays:
        out[j] += w * u
    return out


def is_balanced(g: WeightedGraph, tol: float = 1e-10) -> bool:
    return all(abs(f) <= tol for f in forces(g).values())


# parametrisation used for the balancing Jacobian ------------------------------------


def graph_parameters(g: WeightedGraph, fix_base: bool = False) -> tuple[np.ndarray, list]:
    """Real parameter vector: vertex coordinates, ray angles, weights of edges and rays."""
    vals, labels = [], []
    for j in g.ids:
        if fix_base and j == g.ids[0]:
            continue
        vals += [g.vertices[j].real, g.vertices[j].imag]
        labels += [("x", j), ("y", j)]
    for i, (_, u, _) in enumerate(g.rays):
        vals.append(float(np.angle(u)))
        labels.append(("angle", i))
    for e in sorted(g.edges):
        vals.append(g.edges[e])
        labels.append(("tau", e))
    for i, (_, _, w) in enumerate(g.rays):
        vals.append(w)
        labels.append(("tau_ray", i))
    return np.array(vals, dtype=float), labels


def with_parameters(g: WeightedGraph, vals: np.ndarray, labels: list) -> WeightedGraph:
    verts = dict(g.vertices)
    edges = dict(g.edges)
    rays = [list(r) for r in g.rays]
    for v, lab in zip(vals, labels):
        kind = lab[0]
        if kind == "x":
            verts[lab[1]] = complex(v, verts[lab[1]].imag)
        elif kind == "y":
            verts[lab[1]] = complex(verts[lab[1]].real, v)
        elif kind == "angle":
            rays[lab[1]][1] = complex(math.cos(v), math.sin(v))
        elif kind == "tau":
            edges[lab[1]] = float(v)
        elif kind == "tau_ray":
            rays[lab[1]][2] = float(v)
    return WeightedGraph(verts, edges, [tuple(r) for r in rays], g.rotation)


def balance_map(g: WeightedGraph) -> np.ndarray:
    """Real vector ``((Re F_j, Im F_j)_j, (l_jk)_{E+})``."""
    f = forces(g)
    out = []
    for j in g.ids:
        out += [f[j].real, f[j].imag]
    for a, b in sorted(g.edges):
        out.append(g.length(a, b))
    return np.array(out)


def nondegeneracy(g: WeightedGraph, h: float = 1e-7) -> dict:
    """Jacobian of forces and edge lengths; surjectivity by numerical rank."""
    p, labels = graph_parameters(g)
    f0 = balance_map(g)
    jac = np.zeros((f0.size, p.size))
    for i in range(p.size):
        dp = np.zeros_like(p)
        dp[i] = h
        fp = balance_map(with_parameters(g, p + dp, labels))
        fm = balance_map(with_parameters(g, p - dp, labels))
        jac[:, i] = (fp - fm) / (2 * h)
    s = np.linalg.svd(jac, compute_uv=False) if jac.size else np.zeros(0)
    rank = int(np.sum(s > RANK_CUTOFF * s[0])) if s.size and s[0] > 0 else 0
    return {
        "jacobian": jac,
        "labels": labels,
        "rank": rank,
        "required": f0.size,
        "surjective": rank == f0.size,
    }


# pre-embeddedness ----------------------------------------------------------------------


def _seg_dist(p0: complex, d0: complex, inf0: bool, p1: complex, d1: complex, inf1: bool) -> float:
    """Distance between two segments/rays ``p + s d`` with ``s`` in [0,1] or [0,inf)."""

    def clamp(s, inf):
        return max(0.0, s) if inf else min(1.0, max(0.0, s))

    def point_dist(q, p, d, inf):
        dd = (d * d.conjugate()).real
        s = clamp(((q - p) * d.conjugate()).real / dd, inf)
        return abs(q - (p + s * d))

    # intersection test
    den = (d0.conjugate() * d1).imag
    if abs(den) > 1e-15:
        s = ((p1 - p0).conjugate() * d1).imag / den
        r = ((p1 - p0).conjugate() * d0).imag / den
        if s >= 0 and r >= 0 and (inf0 or s <= 1) and (inf1 or r <= 1):
            return 0.0
    cands = [point_dist(p0, p1, d1, inf1), point_dist(p1, p0, d0, inf0)]
    if not inf0:
        cands.append(point_dist(p0 + d0, p1, d1, inf1))
    if not inf1:
        cands.append(point_dist(p1 + d1, p0, d0, inf0))
    if inf0 and inf1 and abs(den) <= 1e-15:
        # parallel rays: distance between the lines if they overlap at infinity
        if (d0 * d1.conjugate()).real > 0:
            cands.append(abs(((p1 - p0) * d0.conjugate()).imag) / abs(d0))
    return min(cands)


def pre_embedded(g: WeightedGraph) -> bool:
    """Distances > 2 between disjoint edges/rays and angles > 60 degrees at shared vertices."""
    items = []
    for a, b in g.edges:
        items.append(({a, b}, g.vertices[a], g.vertices[b] - g.vertices[a], False))
    for j, u, _ in g.rays:
        items.append(({j}, g.vertices[j], u, True))
    for i in range(len(items)):
        for k in range(i + 1, len(items)):
            s0, p0, d0, f0 = items[i]
            s1, p1, d1, f1 = items[k]
            common = s0 & s1
            if common:
                j = next(iter(common))
                u0 = d0 if p0 == g.vertices[j] else -d0
                u1 = d1 if p1 == g.vertices[j] else -d1
                ang = abs(np.angle(u1 / u0))
                if ang <= math.pi / 3 + 1e-12:
                    return False
            elif _seg_dist(p0, d0, f0, p1, d1, f1) <= 2:
                return False
    return True


# deformation ---------------------------------------------------------------------------


def deform(
    g: WeightedGraph,
    forces_target: dict[int, complex] | None = None,
    lengths_target: dict[tuple[int, int], float] | None = None,
    tol: float = 1e-12,
    max_iter: int = 20,
) -> WeightedGraph:
    """Least-norm Gauss-Newton deformation hitting target forces and edge lengths.

    The base vertex (smallest id) stays fixed.
    """
    f = forces(g)
    ft = {j: f[j] for j in g.ids} if forces_target is None else {j: forces_target.get(j, f[j]) for j in g.ids}
    lt = {e: g.length(*e) for e in g.edges}
    if lengths_target:
        lt.update({(min(a, b), max(a, b)): v for (a, b), v in lengths_target.items()})
    target = []
    for j in g.ids:
        target += [ft[j].real, ft[j].imag]
    for e in sorted(g.edges):
        target.append(lt[e])
    target = np.array(target)
    p, labels = graph_parameters(g, fix_base=True)
    cur = g
    for _ in range(max_iter):
        r = balance_map(cur) - target
        if np.max(np.abs(r), initial=0.0) <= tol:
            return cur
        jac = _jac(cur, p, labels)
        s = np.linalg.svd(jac, compute_uv=False)
        if s.size == 0 or s[-1] < RANK_CUTOFF * s[0] and np.sum(s > RANK_CUTOFF * s[0]) < jac.shape[0]:
            raise Degenerate("balancing Jacobian is rank deficient")
        dp = np.linalg.lstsq(jac, -r, rcond=None)[0]
        p = p + dp
        cur = with_parameters(g, p, labels)
    if np.max(np.abs(balance_map(cur) - target)) > tol * 1e3:
        raise GraphError("graph deformation did not converge")
    return cur


def _jac(g: WeightedGraph, p: np.ndarray, labels: list, h: float = 1e-7) -> np.ndarray:
    f0 = balance_map(g)
    jac = np.zeros((f0.size, p.size))
    for i in range(p.size):
        dp = np.zeros_like(p)
        dp[i] = h
        jac[:, i] = (balance_map(with_parameters(g, p + dp, labels)) - balance_map(with_parameters(g, p - dp, labels))) / (2 * h)
    return jac
