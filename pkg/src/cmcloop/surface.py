"""Immersions from frames: Sym-Bobenko formula, rigid motions, meshing and geometric diagnostics."""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import least_squares

from . import monodromy as mono
from . import potentials as pot
from .graph import WeightedGraph, pre_embedded
from .loopgroup import IwasawaError, LoopMatrix, exp2x2, inv2, iwasawa_samples
from .wiener import circle_grid

MESH_GRID = 128  # loop samples used while meshing
N_OUT = 24  # positive-factor modes kept by the Iwasawa step
EPS1 = pot.EPS / 2
EPS2 = 0.2
THETA_MIN = 0.02
SUBSTEPS = 4

E3 = np.diag([-1.0, 1.0]).astype(complex)


class SurfaceError(RuntimeError):
    pass


# su(2) and R^3 ---------------------------------------------------------------------------------


def r3_to_su2(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = np.empty(x.shape[:-1] + (2, 2), dtype=complex)
    out[..., 0, 0] = 1j * x[..., 2]
    out[..., 1, 1] = -1j * x[..., 2]
    out[..., 0, 1] = -1j * (x[..., 0] + 1j * x[..., 1])
    out[..., 1, 0] = -1j * (x[..., 0] - 1j * x[..., 1])
    return out


def su2_to_r3(a: np.ndarray) -> np.ndarray:
    b = 1j * np.asarray(a)
    return np.stack([b[..., 0, 1].real, b[..., 0, 1].imag, b[..., 1, 1].real], axis=-1)


def rigid_motion(x) -> np.ndarray:
    """The fixed motion ``(x1, x2, x3) -> (1 - x3, -x2, -x1)`` sending the model sphere to the unit sphere."""
    x = np.asarray(x, dtype=float)
    return np.stack([1 - x[..., 2], -x[..., 1], -x[..., 0]], axis=-1)


def _check_unitary(f1: np.ndarray, tol: float) -> None:
    d = np.conj(np.swapaxes(f1, -1, -2)) @ f1 - np.eye(2)
    if np.max(np.abs(d), initial=0.0) > tol:
        raise SurfaceError(f"frame is not unitary at lam = 1 (defect {np.max(np.abs(d)):.2e})")


def sym_values(f1: np.ndarray, df1: np.ndarray, tol: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Point and normal from the value and lam-derivative of a unitary frame at ``lam = 1``."""
    _check_unitary(f1, tol)
    finv = inv2(f1)
    point = su2_to_r3(-2j * df1 @ finv)
    normal = su2_to_r3(-1j * f1 @ E3 @ finv)
    return point, normal


def sym(F: LoopMatrix, tol: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Sym-Bobenko point and Gauss map of a unitary frame."""
    v, d = F.eval_and_deriv(1.0)
    return sym_values(v, d, tol)


def _value_and_derivative_at_1(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Value and lam-derivative at ``lam = 1`` from samples on the circle grid (axis -3)."""
    m = samples.shape[-3]
    c = np.fft.fft(samples, axis=-3) / m
    k = np.fft.fftfreq(m, 1.0 / m)
    if m % 2 == 0:
        c[..., m // 2, :, :] = 0  # unresolved Nyquist mode
    val = np.sum(c, axis=-3)
    der = np.tensordot(k, np.moveaxis(c, -3, 0), axes=(0, 0))
    return val, der


def sym_samples(fs: np.ndarray, tol: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Sym-Bobenko point and normal from frame samples ``(..., M, 2, 2)``."""
    v, d = _value_and_derivative_at_1(fs)
    return sym_values(v, d, tol)


def dress(H: LoopMatrix, x) -> np.ndarray:
    """Rigid motion of ``R^3`` induced by a unitary loop ``H``."""
    h, dh = H.eval_and_deriv(1.0)
    _check_unitary(h, 1e-6)
    hinv = inv2(h)
    return su2_to_r3(h @ r3_to_su2(x) @ hinv - 2j * dh @ hinv)


def translation_loop(v: complex, lam: np.ndarray) -> np.ndarray:
    """Unitary loop equal to ``I`` at 1 whose Sym image is ``2 V`` for the vertex matrix ``V`` of ``v``."""
    iv = 0.5 * np.array([[v.real, -1j * v.imag], [1j * v.imag, -v.real]])
    s = 0.5 * (lam - 1 / lam)
    return exp2x2(s[:, None, None] * iv)


# frames along grids -------------------------------------------------------------------------


def _polyline_frames(form, pts: np.ndarray, start: np.ndarray, substeps: int = SUBSTEPS, centre: complex = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Frames at the nodes of polylines.

    ``pts`` has shape ``(L, P)``: ``P`` polylines with ``L`` nodes each; ``start``
    holds the frames ``(P, M, 2, 2)`` at ``pts[0]``. Consecutive nodes are joined
    by log-linear arcs about ``centre`` (straight in ``log(z - centre)``), which
    follow circles and rays through the centre exactly. Nodes after a non-finite
    value are flagged invalid.
    """
    L, P = pts.shape
    out = np.empty((L, P) + start.shape[-3:], dtype=complex)
    ok = np.ones((L, P), dtype=bool)
    out[0] = start
    y = start.copy()
    nodes = mono._NODES
    h = 1.0 / substeps
    with np.errstate(all="ignore"):
        for l in range(1, L):
            a, b = pts[l - 1] - centre, pts[l] - centre
            ratio = np.log(b / a)
            s = np.array([(i + c) * h for i in range(substeps) for c in nodes])
            w = a[None, :] * np.exp(s[:, None] * ratio[None, :])
            av = form(w + centre) * (w * ratio[None, :])[..., None, None, None]
            av = av.reshape(substeps, 3, P, *av.shape[-3:])
            for i in range(substeps):
                a1, a2, a3 = av[i, 0], av[i, 1], av[i, 2]
                b1 = h * a2
                b2 = (math.sqrt(15) * h / 3) * (a3 - a1)
                b3 = (10 * h / 3) * (a3 - 2 * a2 + a1)
                c1 = mono._bracket(b1, b2)
                c2 = -mono._bracket(b1, 2 * b3 + c1) / 60
                om = b1 + b3 / 12 + mono._bracket(-20 * b1 - b3 + c1, b2 + c2) / 240
                y = y @ exp2x2(om)
            good = np.all(np.isfinite(y), axis=(-3, -2, -1)) & ok[l - 1]
            y = np.where(good[:, None, None, None], y, np.eye(2))
            ok[l] = good
            out[l] = y
    return out, ok


def _path_frame(forms, path: mono.PathSpec, start: np.ndarray, steps: int = 64) -> np.ndarray:
    y, _ = mono.transport(forms, path, [steps] * len(path.segments))
    return start @ y


def _disk_grids(form, anchor: np.ndarray, phi0: float, n_theta: int, n_phi: int, theta_min: float):
    """Frames on the two halves of a chart split by the unit circle.

    The anchor frame sits at ``exp(i phi0)``. The inner half is reached through
    the circle of radius ``tan(theta_min / 2)``, the outer half through its image
    under ``z -> 1 / conj(z)``; the unit circle appears in both.
    """
    theta_in = np.linspace(theta_min, np.pi / 2, n_theta)
    theta_out = np.linspace(np.pi / 2, np.pi - theta_min, n_theta)
    phis = phi0 + 2 * np.pi * np.arange(n_phi) / n_phi
    res = {}
    for half, thetas in (("inner", theta_in), ("outer", theta_out)):
        radii = np.tan(thetas / 2)
        r_turn = radii[0] if half == "inner" else radii[-1]
        # unit circle -> turning circle along the ray through phi0
        ray = np.exp(1j * phi0) * np.geomspace(1.0, r_turn, 4 * n_theta)
        f_ray, ok_ray = _polyline_frames(form, ray[:, None], anchor[None])
        # around the turning circle
        circ = r_turn * np.exp(1j * np.concatenate([phis, [phi0 + 2 * np.pi]]))
        f_circ, ok_circ = _polyline_frames(form, np.repeat(circ[:, None], 1, 1), f_ray[-1])
        # then back along every ray
        rows = radii if half == "inner" else radii[::-1]
        pts = rows[:, None] * np.exp(1j * phis)[None, :]
        f_grid, ok = _polyline_frames(form, pts, f_circ[:-1, 0])
        ok &= ok_ray[-1, 0] & ok_circ[:-1, 0][None, :]
        if half == "outer":
            f_grid, ok, pts = f_grid[::-1], ok[::-1], pts[::-1]
        res[half] = (pts, f_grid, ok)
    return res


# mesh ----------------------------------------------------------------------------------------


@dataclass
class MeshBuffer:
    """Triangle mesh with named face groups."""

    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    normals: np.ndarray | None = None
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=int))
    groups: list = field(default_factory=list)  # (name, face start, face stop)
    params: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=complex))
    charts: list = field(default_factory=list)  # chart name per vertex block

    def add_grid(self, name: str, pts: np.ndarray, normals: np.ndarray, params: np.ndarray, valid: np.ndarray, periodic: bool) -> None:
        rows, cols = valid.shape
        base = len(self.vertices)
        idx = -np.ones((rows, cols), dtype=int)
        idx[valid] = base + np.arange(int(valid.sum()))
        self.vertices = np.concatenate([self.vertices, pts[valid]])
        nrm = normals[valid]
        self.normals = nrm if self.normals is None else np.concatenate([self.normals, nrm])
        self.params = np.concatenate([self.params, params[valid]])
        faces = []
        ccols = cols if periodic else cols - 1
        for i in range(rows - 1):
            for j in range(ccols):
                jn = (j + 1) % cols
                a, b, c, d = idx[i, j], idx[i, jn], idx[i + 1, jn], idx[i + 1, j]
                if min(a, b, c, d) >= 0:
                    faces += [(a, b, c), (a, c, d)]
        start = len(self.faces)
        if faces:
            self.faces = np.concatenate([self.faces, np.array(faces, dtype=int)])
        self.groups.append((name, start, len(self.faces)))
        self.charts.append((name, base, len(self.vertices)))

    def group_vertices(self, name: str) -> np.ndarray:
        for n, a, b in self.charts:
            if n == name:
                return self.vertices[a:b]
        raise KeyError(name)

    def transformed(self, angle: float, offset: complex) -> MeshBuffer:
        """Rotate about the vertical axis by ``angle`` and translate horizontally by ``offset``."""
        c, s = math.cos(angle), math.sin(angle)
        rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
        out = MeshBuffer(
            self.vertices @ rot.T + np.array([offset.real, offset.imag, 0.0]),
            None if self.normals is None else self.normals @ rot.T,
            self.faces.copy(),
            list(self.groups),
            self.params.copy(),
            list(self.charts),
        )
        return out

    def check(self) -> None:
        if np.any(~np.isfinite(self.vertices)):
            raise SurfaceError("mesh has non-finite coordinates")
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise SurfaceError("face index out of range")

    def to_obj(self) -> str:
        lines = []
        for v in self.vertices:
            lines.append("v " + " ".join(f"{c:.9g}" for c in v))
        if self.normals is not None:
            for v in self.normals:
                lines.append("vn " + " ".join(f"{c:.9g}" for c in v))
        for name, a, b in self.groups:
            lines.append(f"g {name}")
            for f in self.faces[a:b]:
                i, j, k = (int(q) + 1 for q in f)
                if self.normals is not None:
                    lines.append(f"f {i}//{i} {j}//{j} {k}//{k}")
                else:
                    lines.append(f"f {i} {j} {k}")
        return "\n".join(lines) + "\n"

    def write_obj(self, path) -> None:
        Path(path).write_text(self.to_obj(), encoding="utf-8")


def grid_counts(n_theta: int, n_phi: int) -> tuple[int, int]:
    """Vertex and face counts of one full spherical group without excluded disks."""
    rows = 2 * n_theta - 1
    return rows * n_phi, 2 * (rows - 1) * n_phi


# immersion -----------------------------------------------------------------------------------


@dataclass
class Immersion:
    """Mesh in the internal frame plus the data needed by the diagnostics."""

    mesh: MeshBuffer
    graph: WeightedGraph
    t: float
    x: pot.UnknownVector
    forms: dict
    lam: np.ndarray
    anchors: dict
    overlap_defect: float
    collars: dict
    info: dict = field(default_factory=dict)


def _frames_to_surface(frames: np.ndarray, n_out: int, ok: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Points and normals (after the rigid motion) of frames ``(..., M, 2, 2)``; invalid entries are NaN."""
    shape = frames.shape[:-3]
    ok = np.ones(shape, dtype=bool) if ok is None else ok
    pts = np.full(shape + (3,), np.nan)
    nrm = np.full(shape + (3,), np.nan)
    if np.any(ok):
        fs, _, _ = iwasawa_samples(frames[ok], n_out)
        p, n = sym_samples(fs)
        pts[ok] = rigid_motion(p)
        nrm[ok] = rigid_motion_linear(n)
    return pts, nrm


def _merge_halves(halves: dict, outside, n_out: int) -> tuple[tuple, float]:
    """Mask, immerse and stack the two halves of a chart; also return the seam mismatch."""
    pts_i, fr_i, ok_i = halves["inner"]
    pts_o, fr_o, ok_o = halves["outer"]
    ok_i = ok_i & _monotone_valid(outside(pts_i), from_start=True)
    ok_o = ok_o & _monotone_valid(outside(pts_o), from_start=False)
    p_i, n_i = _frames_to_surface(fr_i, n_out, ok_i)
    p_o, n_o = _frames_to_surface(fr_o, n_out, ok_o)
    both = ok_i[-1] & ok_o[0]
    seam = float(np.max(np.linalg.norm(p_i[-1][both] - p_o[0][both], axis=-1))) if np.any(both) else 0.0
    grid = (
        np.concatenate([p_i, p_o[1:]]),
        np.concatenate([n_i, n_o[1:]]),
        np.concatenate([pts_i, pts_o[1:]]),
        np.concatenate([ok_i, ok_o[1:]]),
    )
    return grid, seam


def rigid_motion_linear(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return np.stack([-v[..., 2], -v[..., 1], -v[..., 0]], axis=-1)


def vertex_anchors(g: WeightedGraph, t: float, x: pot.UnknownVector, forms: dict, lam: np.ndarray, system=None) -> dict:
    """Frames at ``1_j`` obtained along the spanning tree of the graph."""
    j0 = g.ids[0]
    ident = np.broadcast_to(np.eye(2, dtype=complex), (len(lam), 2, 2)).copy()
    if t == 0:
        return {j: translation_loop(g.vertices[j] - g.vertices[j0], lam) for j in g.ids}
    system = mono.PathSystem(g, t) if system is None else system
    anchors = {j0: ident}
    adj = {}
    for (a, b) in g.edges:
        adj.setdefault(a, []).append(b)
        adj.setdefault(b, []).append(a)
    stack = [j0]
    while stack:
        j = stack.pop()
        for k in adj.get(j, []):
            if k in anchors:
                continue
            a, b = min(j, k), max(j, k)
            y, _ = mono.transport(forms, system.gamma_path(a, b, x))
            anchors[k] = anchors[j] @ (y if j == a else inv2(y))
            stack.append(k)
    return anchors


def _ray_centre_and_safe_radius(x: pot.UnknownVector, lam: np.ndarray, j: int, key: str, u: complex) -> tuple[complex, float]:
    th = np.real(np.asarray(x[("theta", j, key)]))
    vals = np.exp(1j * np.polynomial.polynomial.polyval(lam, th))
    return u, float(np.max(np.abs(vals - u)))


def immerse(g: WeightedGraph, t: float, x: pot.UnknownVector, resolution: int = 32, system=None, m: int = MESH_GRID, n_out: int = N_OUT, theta_min: float = THETA_MIN) -> Immersion:
    """Mesh of the surface: spherical parts, catenoidal parts and end collars, in the internal frame."""
    lam = circle_grid(m)
    forms = pot.assemble(g, t, x, lam)
    anchors = vertex_anchors(g, t, x, forms, lam, system)
    mesh = MeshBuffer()
    overlap = 0.0
    collars = {}
    n_theta = max(4, resolution // 2 + 1)
    n_phi = resolution
    for j in g.ids:
        form = forms[pot.vchart(j)]
        halves = _disk_grids(form, anchors[j], 0.0, n_theta, n_phi, theta_min)
        ends = g.ends(j)

        def outside(z):
            good = np.ones(z.shape, dtype=bool)
            for e in ends:
                good &= np.abs(z - e.u) > EPS1
            return good

        grid, seam = _merge_halves(halves, outside, n_out)
        overlap = max(overlap, seam)
        mesh.add_grid(f"sphere_{j}", *grid, periodic=True)
        # end collars
        for e in ends:
            if not e.is_ray:
                continue
            centre, safe = _ray_centre_and_safe_radius(x, lam, j, e.key, e.u)
            r_in = min(max(3.0 * safe, 1e-3), 0.75 * EPS2)
            collars[(j, e.key)] = _collar(form, anchors[j], centre, r_in, EPS2, resolution, n_out)
            c = collars[(j, e.key)]
            mesh.add_grid(f"end_{j}_{e.key}", c["points"], c["normals"], c["z"], c["ok"], periodic=True)
    if t > 0:
        system = mono.PathSystem(g, t) if system is None else system
        for (j, k) in sorted(g.edges):
            path = system.gamma_path(j, k, x)
            prefix = mono.PathSpec("prefix", path.segments[:5])
            anchor = _path_frame(forms, prefix, anchors[j], steps=128)
            w0 = path.segments[5].start
            form = forms[pot.echart(j, k)]
            q = np.abs(pot.Sampled(g, x, lam).q(j, k))
            tmin = max(theta_min, 2 * math.atan(4 * float(np.max(q))))
            halves = _disk_grids(form, anchor, float(np.angle(w0)), n_theta, n_phi, tmin)

            def outside_e(z):
                return (np.abs(z - 1) > EPS1) & (np.abs(z + 1) > EPS1)

            grid, seam = _merge_halves(halves, outside_e, n_out)
            overlap = max(overlap, seam)
            mesh.add_grid(f"neck_{j}_{k}", *grid, periodic=True)
    mesh.check()
    return Immersion(mesh, g, t, x, forms, lam, anchors, overlap, collars)


def _monotone_valid(good: np.ndarray, from_start: bool) -> np.ndarray:
    """Validity along each column when integration runs from the first (or last) row."""
    if from_start:
        return np.logical_and.accumulate(good, axis=0)
    return np.logical_and.accumulate(good[::-1], axis=0)[::-1]


def _collar(form, anchor, centre: complex, r_in: float, r_out: float, resolution: int, n_out: int) -> dict:
    """Log-polar grid around an end, reached from ``1_j`` through the circle of radius ``|centre| - r_out``."""
    arg_c = float(np.angle(centre)) % (2 * np.pi)
    rho = abs(centre) - r_out
    lead = mono.PathSpec(
        "lead",
        (mono.line("", 1.0, rho), mono.arc("", rho, 0.0, arg_c)),
    )
    start = _path_frame(form, lead, anchor, steps=64)
    alpha0 = arg_c + np.pi
    n_alpha = resolution
    alphas = alpha0 + 2 * np.pi * np.arange(n_alpha + 1) / n_alpha
    circ = centre + r_out * np.exp(1j * alphas)
    f_circ, ok_c = _polyline_frames(form, circ[:, None], start[None], centre=centre)
    radii = np.geomspace(r_out, r_in, max(4, resolution // 2 + 1))
    pts = centre + radii[:, None] * np.exp(1j * alphas[None, :-1])
    fr, ok = _polyline_frames(form, pts, f_circ[:-1, 0], centre=centre)
    ok &= ok_c[:-1, 0][None, :]
    p, nrm = _frames_to_surface(fr, n_out, ok)
    return {"points": p, "normals": nrm, "z": pts, "ok": ok, "radii": radii, "centre": centre, "closing": f_circ[-1, 0], "start": start}


# diagnostics ---------------------------------------------------------------------------------


def _closed_curve_flux(points: np.ndarray, normals: np.ndarray, sign: float, h: float = 1.0) -> np.ndarray:
    """Flux ``int conormal ds - sign * h * int x cross dx`` over a closed sampled curve (spectral derivative)."""
    k = len(points)
    freq = np.fft.fftfreq(k, 1.0 / k)
    dx = np.real(np.fft.ifft(1j * freq[:, None] * np.fft.fft(points, axis=0), axis=0))
    conormal = np.cross(dx, normals)
    area = np.cross(points, dx)
    return (2 * np.pi / k) * np.sum(conormal - sign * h * area, axis=0)


@functools.lru_cache(maxsize=1)
def flux_sign() -> float:
    """Relative sign of the two flux terms, calibrated so that a circle on the model sphere has zero flux."""
    alpha = 2 * np.pi * np.arange(128) / 128
    z = 0.6 * np.exp(1j * alpha)
    lam = circle_grid(32)
    fs = pot.F_S(z, lam)
    p, nrm = sym_samples(fs)
    p, nrm = rigid_motion(p), rigid_motion_linear(nrm)
    best = min((np.linalg.norm(_closed_curve_flux(p, nrm, s)), s) for s in (1.0, -1.0))
    return best[1]


def end_flux(imm: Immersion, j: int, key: str, radius: float | None = None, samples: int = 256, n_out: int = N_OUT) -> np.ndarray:
    """Flux vector of the closed curve ``|z - p0| = radius`` around a ray end."""
    c = imm.collars[(j, key)]
    centre = c["centre"]
    r = c["radii"][len(c["radii"]) // 2] if radius is None else radius
    form = imm.forms[pot.vchart(j)]
    start = c["start"]
    r_out = c["radii"][0]
    alpha0 = float(np.angle(centre)) + np.pi
    # radially in from the collar start point, then around
    radial = centre + np.geomspace(r_out, r, 16) * np.exp(1j * alpha0)
    f_rad, _ = _polyline_frames(form, radial[:, None], start[None], centre=centre)
    alphas = alpha0 + 2 * np.pi * np.arange(samples) / samples
    circ = centre + r * np.exp(1j * alphas)
    fr, ok = _polyline_frames(form, circ[:, None], f_rad[-1], centre=centre)
    if not np.all(ok):
        raise SurfaceError("flux curve integration failed")
    p, nrm = _frames_to_surface(fr[:, 0], n_out)
    return _closed_curve_flux(p, nrm, flux_sign())


def weight_from_parameters(g: WeightedGraph, t: float, x: pot.UnknownVector, j: int, key: str, lam: np.ndarray | None = None) -> dict:
    """End weight ``8 pi t kappa ahat`` with ``kappa = p beta(p)`` taken from the potential in the vertex chart."""
    lam = circle_grid(pot.grid_size(x.n)) if lam is None else lam
    forms = pot.assemble(g, t, x, lam)
    form = forms[pot.vchart(j)]
    s = pot.Sampled(g, x, lam)
    ahat = s.loop(("ahat", j, key))
    p = np.exp(1j * s.loop(("theta", j, key)))
    # beta is holomorphic at p: mean value over a small circle
    r = 1e-3
    ang = np.exp(2j * np.pi * np.arange(16) / 16)
    vals = form.paired(p[None, :] + r * ang[:, None])[..., 0, 1] * lam[None, :]
    beta = np.mean(vals, axis=0)
    prod = p * beta * ahat
    return {
        "kappa_ahat": complex(np.mean(prod)),
        "variation": float(np.max(np.abs(prod - np.mean(prod)))),
        "weight": float(8 * np.pi * t * np.mean(prod).real),
    }


def edge_length(g: WeightedGraph, j: int, k: int) -> float:
    return g.length(j, k)


def measured_centres(imm: Immersion) -> dict:
    """Sphere centres ``f(1_j) - e1`` from the anchor frames."""
    out = {}
    for j, a in imm.anchors.items():
        p, _ = sym_samples(a)
        out[j] = rigid_motion(p) - np.array([1.0, 0.0, 0.0])
    return out


def sphere_deviation(imm: Immersion, j: int) -> float:
    """Largest ``| |f - c| - 1 |`` over the spherical group of ``j`` with ``c`` the measured centre."""
    c = measured_centres(imm)[j]
    pts = imm.mesh.group_vertices(f"sphere_{j}")
    return float(np.max(np.abs(np.linalg.norm(pts - c, axis=-1) - 1)))


def reflection_defect(imm: Immersion, name: str) -> float:
    """Symmetry of a group under reflection through the horizontal plane, matched by ``z -> 1/conj(z)``."""
    for n, a, b in imm.mesh.charts:
        if n == name:
            break
    else:
        raise KeyError(name)
    pts = imm.mesh.vertices[a:b]
    zs = imm.mesh.params[a:b]
    ref = pts * np.array([1.0, 1.0, -1.0])
    target = 1 / np.conj(zs)
    worst = 0.0
    for i, w in enumerate(target):
        d = np.abs(zs - w)
        m = int(np.argmin(d))
        if d[m] < 1e-9 * (1 + abs(w)):
            worst = max(worst, float(np.linalg.norm(ref[i] - pts[m])))
    return worst


def catenoid_blowup(imm: Immersion, j: int, k: int) -> dict:
    """RMS distance of ``(f - f0) / t`` on the neck group from a catenoid of waist ``|tau|`` along the edge."""
    pts = imm.mesh.group_vertices(f"neck_{j}_{k}") / imm.t
    u = imm.graph.direction(j, k)
    e = np.array([u.real, u.imag, 0.0])
    a = abs(imm.graph.weight(j, k))

    def resid(c):
        d = pts - c
        s = d @ e
        r = np.linalg.norm(d - s[:, None] * e, axis=-1)
        return r - a * np.cosh(s / a)

    c0 = np.mean(pts, axis=0)
    fit = least_squares(resid, c0)
    return {"rms": float(np.sqrt(np.mean(fit.fun**2))), "waist": a}


def annulus_graph_property(imm: Immersion, j: int, e) -> bool:
    """Projection of the sphere ring next to an end onto the plane orthogonal to its direction is injective in angle."""
    for n, a, b in imm.mesh.charts:
        if n == f"sphere_{j}":
            break
    zs = imm.mesh.params[a:b]
    pts = imm.mesh.vertices[a:b]
    d = np.abs(zs - e.u)
    ring = (d > EPS1) & (d < EPS1 * 1.6)
    if ring.sum() < 6:
        return True
    u = np.array([e.u.real, e.u.imag, 0.0])
    q = pts[ring] - pts[ring].mean(axis=0)
    q = q - (q @ u)[:, None] * u
    b1 = np.cross(u, [0, 0, 1.0])
    b1 /= np.linalg.norm(b1)
    b2 = np.cross(u, b1)
    ang_surface = np.angle(q @ b1 + 1j * (q @ b2))
    ang_param = np.angle(zs[ring] - e.u)
    order = np.argsort(ang_param)
    diffs = np.angle(np.exp(1j * np.diff(ang_surface[order])))
    return bool(np.all(diffs > -1e-9) or np.all(diffs < 1e-9))


def diagnose(imm: Immersion) -> dict:
    """Geometric diagnostics of a meshed solution (best effort, in the internal frame)."""
    g, t, x = imm.graph, imm.t, imm.x
    rep: dict = {"t": t, "overlap_defect": imm.overlap_defect, "pre_embedded": bool(pre_embedded(g)), "ends": {}, "edges": {}}
    for j in g.ids:
        rep.setdefault("sphere_deviation", {})[str(j)] = sphere_deviation(imm, j)
        for e in g.ends(j):
            if e.is_ray and t > 0:
                par = weight_from_parameters(g, t, x, j, e.key)
                flux = end_flux(imm, j, e.key)
                rep["ends"][f"{j}:{e.key}"] = {
                    "expected": 2 * np.pi * t * e.tau,
                    "parameter_weight": par["weight"],
                    "kappa_ahat_variation": par["variation"],
                    "flux": flux.tolist(),
                    "flux_weight": float(np.linalg.norm(flux)),
                    "annulus_graph": annulus_graph_property(imm, j, e),
                }
    for (j, k) in sorted(g.edges):
        item = {"length": g.length(j, k), "law": 2 - 2 * g.weight(j, k) * t * math.log(t) if t > 0 else 2.0}
        cen = measured_centres(imm)
        item["measured_length"] = float(np.linalg.norm(cen[k] - cen[j]))
        if t > 0:
            try:
                item["catenoid"] = catenoid_blowup(imm, j, k)
            except (ValueError, KeyError):
                item["catenoid"] = None
        rep["edges"][f"{j}-{k}"] = item
    return rep


def surface_samples(imm: Immersion, chart: str, z: np.ndarray, path_prefix: mono.PathSpec | None = None, anchor=None, n_out: int = N_OUT) -> tuple[np.ndarray, np.ndarray]:
    """Points and normals at chart points ``z`` reached by straight lines from ``1_j`` (vertex charts)."""
    j = int(chart[1:])
    form = imm.forms[chart]
    start = imm.anchors[j] if anchor is None else anchor
    z = np.atleast_1d(np.asarray(z, dtype=complex))
    pts = np.stack([np.ones_like(z), z])
    fr, ok = _polyline_frames(form, _refine(pts, 32), np.broadcast_to(start, (len(z),) + start.shape).copy())
    if not np.all(ok[-1]):
        raise SurfaceError("integration failed")
    return _frames_to_surface(fr[-1], n_out)


def _refine(pts: np.ndarray, k: int) -> np.ndarray:
    s = np.linspace(0, 1, k + 1)[:, None]
    return pts[0][None] + s * (pts[1] - pts[0])[None]


__all__ = [
    "Immersion",
    "IwasawaError",
    "MeshBuffer",
    "diagnose",
    "dress",
    "end_flux",
    "flux_sign",
    "immerse",
    "rigid_motion",
    "sym",
    "sym_samples",
    "weight_from_parameters",
]
