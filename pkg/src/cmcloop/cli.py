"""Command-line front end.

Exit codes:

* 0  success
* 2  usage error (bad flags)
* 3  input could not be parsed
* 4  precondition failed (unbalanced or degenerate graph, bad configuration)
* 5  numerical failure (no convergence, truncation too coarse, integration or factorisation failure)
* 6  verification suite reported failures
"""

from __future__ import annotations

import json
import logging
import math
import sys
from pathlib import Path

import click
import numpy as np

from . import graph as gr
from . import loopgroup as lg
from . import monodromy as mono
from . import potentials as pot
from . import surface as surf
from . import wiener as wn

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_PARSE = 3
EXIT_PRECONDITION = 4
EXIT_NUMERICAL = 5
EXIT_VERIFY = 6

SUITES = ("wiener", "loop", "potential", "monodromy", "surface")


class _Fail(click.ClickException):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.exit_code = code


def _dump(data, path: str | None) -> None:
    text = json.dumps(data, indent=1, sort_keys=True, default=mono._json_default) + "\n"
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        click.echo(text, nl=False)


def _load_graph(path: str) -> gr.WeightedGraph:
    try:
        return gr.WeightedGraph.load(path)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        if isinstance(exc, gr.GraphError):
            raise _Fail(f"invalid graph: {exc}", EXIT_PRECONDITION) from exc
        raise _Fail(f"cannot read graph file {path}: {exc}", EXIT_PARSE) from exc


def _numerical(exc: Exception) -> _Fail:
    return _Fail(f"{type(exc).__name__}: {exc}", EXIT_NUMERICAL)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log solver progress to stderr.")
def main(verbose: bool) -> None:
    """Constant mean curvature surfaces from balanced weighted graphs."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, stream=sys.stderr)


# graph -----------------------------------------------------------------------------------


@main.group("graph")
def graph_cmd() -> None:
    """Graph utilities."""


def graph_report(g: gr.WeightedGraph) -> dict:
    f = gr.forces(g)
    nd = gr.nondegeneracy(g)
    lengths = {f"{a}-{b}": g.length(a, b) for a, b in sorted(g.edges)}
    n = g.normalized()
    return {
        "forces": {str(j): [f[j].real, f[j].imag] for j in g.ids},
        "balanced": gr.is_balanced(g, 1e-9),
        "rank": nd["rank"],
        "required_rank": nd["required"],
        "nondegenerate": nd["surjective"],
        "pre_embedded": gr.pre_embedded(g),
        "edge_lengths": lengths,
        "lengths_are_two": all(abs(v - 2) <= 1e-9 for v in lengths.values()),
        "tree": g.is_tree(),
        "normalization_rotation_deg": math.degrees(n.rotation),
    }


@graph_cmd.command("check")
@click.argument("file", type=click.Path(dir_okay=False))
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Write the JSON report here.")
def graph_check(file: str, out: str | None) -> None:
    """Forces, balance, non-degeneracy rank and pre-embeddedness of FILE."""
    _dump(graph_report(_load_graph(file)), out)


# solve -----------------------------------------------------------------------------------


@main.command()
@click.argument("file", type=click.Path(dir_okay=False))
@click.option("--t", "t", type=float, required=True, help="Neck parameter (> 0).")
@click.option("--modes", type=int, default=12, show_default=True, help="Truncation degree N of the loop unknowns.")
@click.option("--rho", type=float, default=wn.DEFAULT_RHO, show_default=True)
@click.option("--tol", type=float, default=mono.NEWTON_TOL, show_default=True, help="Newton residual tolerance.")
@click.option("--max-iter", type=int, default=mono.MAX_ITER, show_default=True)
@click.option("--ode-tol", type=float, default=mono.ODE_TOL, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Solve-state JSON file.")
def solve(file: str, t: float, modes: int, rho: float, tol: float, max_iter: int, ode_tol: float, out: str) -> None:
    """Solve the monodromy problem for the graph in FILE at neck size T."""
    g = _load_graph(file)
    if modes < 4:
        raise _Fail("--modes must be at least 4", EXIT_PRECONDITION)
    if rho <= 1:
        raise _Fail("--rho must exceed 1", EXIT_PRECONDITION)
    if not t > 0:
        raise _Fail("--t must be positive", EXIT_PRECONDITION)
    if t >= pot.EPS**2:
        raise _Fail(f"--t must be below {pot.EPS**2}", EXIT_PRECONDITION)
    opts = mono.SolveOptions(n=modes, rho=rho, tol=tol, max_iter=max_iter, ode_tol=ode_tol)
    try:
        result = mono.newton_solve(g, t, opts)
    except (gr.NotBalanced, gr.Degenerate) as exc:
        raise _Fail(f"{type(exc).__name__}: {exc}", EXIT_PRECONDITION) from exc
    except ValueError as exc:
        raise _Fail(str(exc), EXIT_PRECONDITION) from exc
    except (mono.MonodromyError, lg.IwasawaError, lg.LogBranchError, np.linalg.LinAlgError) as exc:
        raise _numerical(exc) from exc
    mono.save_state(result, out, opts)
    click.echo(f"converged in {result.report['iterations']} iterations, residual {result.report['residual']:.3e}")


# mesh ------------------------------------------------------------------------------------


@main.command()
@click.argument("state", type=click.Path(dir_okay=False))
@click.option("--res", "resolution", type=int, default=32, show_default=True, help="Grid points per chart direction.")
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Wavefront OBJ output.")
@click.option("--report", type=click.Path(dir_okay=False), default=None, help="Also write the diagnostic JSON report.")
def mesh(state: str, resolution: int, out: str, report: str | None) -> None:
    """Mesh a solved state (in the frame of the input graph)."""
    try:
        st = mono.load_state(state)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise _Fail(f"cannot read state file {state}: {exc}", EXIT_PARSE) from exc
    try:
        imm = surf.immerse(st.graph, st.t, st.x, resolution=resolution)
    except (surf.SurfaceError, mono.MonodromyError, lg.IwasawaError) as exc:
        raise _numerical(exc) from exc
    imm.mesh.check()
    # undo the load-time rotation and the translation of the base vertex
    back = complex(math.cos(-st.rotation), math.sin(-st.rotation))
    imm.mesh.transformed(-st.rotation, st.offset * back).write_obj(out)
    if report:
        _dump(surf.diagnose(imm), report)
    click.echo(f"{len(imm.mesh.vertices)} vertices, {len(imm.mesh.faces)} faces")


# verify ----------------------------------------------------------------------------------


def _case(name: str, value: float, tol: float) -> dict:
    value = float(value)
    return {"name": name, "value": value, "tol": tol, "ok": bool(np.isfinite(value) and value <= tol)}


def _random_loop(rng, n: int, rho: float = wn.DEFAULT_RHO) -> wn.LoopScalar:
    c = rng.normal(size=2 * n + 1) + 1j * rng.normal(size=2 * n + 1)
    return wn.LoopScalar(c * rho ** -np.abs(np.arange(-n, n + 1)), rho)


def suite_wiener(rng, cases: int = 200) -> list[dict]:
    sub, inv, real = 0.0, 0.0, 0.0
    for _ in range(cases):
        n = int(rng.integers(0, 9))
        f, g = _random_loop(rng, n), _random_loop(rng, n)
        p = wn.mul(f, g, n_out=2 * n)
        sub = max(sub, p.norm() - f.norm() * g.norm() * (1 + 1e-12))
        inv = max(
            inv,
            float(np.max(np.abs(f.bar().bar().coeffs - f.coeffs))),
            float(np.max(np.abs(f.star().star().coeffs - f.coeffs))),
            float(np.max(np.abs(f.star().bar().coeffs - f.bar().star().coeffs))),
        )
        h = f + f.star()
        real = max(real, float(np.max(np.abs(np.imag(h.samples())))))
    return [
        _case("submultiplicative norm", max(sub, 0.0), 0.0),
        _case("involution laws", inv, 0.0),
        _case("f + f* real on the circle", real, 1e-12),
    ]


def suite_loop(rng, cases: int = 20) -> list[dict]:
    err = 0.0
    for _ in range(cases):
        z = complex(*rng.uniform(-2, 2, size=2))
        if abs(z) < 0.1:
            z += 0.5
        F, B = lg.iwasawa(pot.phi_S_loop(z))
        err = max(err, F.max_abs_diff(pot.F_S_loop(z)), B.max_abs_diff(pot.B_S_loop(z)))
    lam = wn.circle_grid(16)
    gauged = lg.gauge_action(pot.model_potential("spherical", lam), pot.gauge_S(lam))
    zs = rng.uniform(0.2, 1.8, size=8) * np.exp(1j * rng.uniform(-3, 3, size=8))
    want = np.zeros((8, 16, 2, 2), dtype=complex)
    want[..., 0, 1] = (1 / lam)[None, :] / (2 * (zs[:, None] + 1) ** 2)
    gauge_err = float(np.max(np.abs(gauged(zs) - want)))
    log_err = 0.0
    for _ in range(cases):
        terms = {k: 0.02 * (rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))) for k in (-1, 0, 1)}
        a = lg.LoopMatrix.from_terms({k: v - np.trace(v) / 2 * np.eye(2) for k, v in terms.items()}, 16)
        log_err = max(log_err, lg.log_loop(lg.exp_loop(a)).max_abs_diff(a))
    return [
        _case("Iwasawa of the spherical frame", err, 1e-8),
        _case("gauged spherical potential", gauge_err, 1e-10),
        _case("loop log/exp round trip", log_err, 1e-8),
    ]


def suite_potential(rng, cases: int = 20) -> list[dict]:
    err = 0.0
    for _ in range(cases):
        k = int(rng.integers(1, 5))
        rays = [{"vertex": 1, "angle_deg": float(a), "weight": float(w)} for a, w in zip(rng.uniform(0, 360, k), rng.uniform(0.2, 2, k))]
        g = gr.WeightedGraph.from_dict({"vertices": [{"id": 1, "x": 0.0, "y": 0.0}], "rays": rays}).normalized()
        x = pot.central(g, 6)
        lam = wn.circle_grid(pot.grid_size(6))
        r = pot.R_vertex(g, 0.0, x, lam)[1]
        err = max(err, abs(r - np.conj(gr.forces(g)[1]) / 2))
    return [_case("vertex regularity residue versus force", err, 1e-9)]


def _chain() -> gr.WeightedGraph:
    return gr.WeightedGraph.from_dict(
        {
            "vertices": [{"id": 1, "x": 0.0, "y": 0.0}, {"id": 2, "x": 2.0, "y": 0.0}],
            "edges": [{"a": 1, "b": 2, "weight": 1.0}],
            "rays": [{"vertex": 1, "angle_deg": 180.0, "weight": 1.0}, {"vertex": 2, "angle_deg": 0.0, "weight": 1.0}],
        }
    ).normalized()


def suite_monodromy(rng, cases: int = 10) -> list[dict]:
    g = _chain()
    x = pot.central(g, 8)
    norms = mono.residuals(g, 0.0, x).norms()
    lam = wn.circle_grid(pot.grid_size(8))
    forms = pot.assemble(g, 0.02, x, lam)
    ch = pot.vchart(g.ids[0])
    morph, homot, sym = 0.0, 0.0, 0.0
    for _ in range(cases):
        a, b = rng.uniform(0.4, 0.9) * np.exp(1j * rng.uniform(-0.6, 0.6, size=2))
        p1 = mono.PathSpec("p1", (mono.line(ch, 1.0, a),))
        p2 = mono.PathSpec("p2", (mono.line(ch, a, b),))
        whole = mono.transport(forms, p1 + p2)[0]
        parts = mono.transport(forms, p1)[0] @ mono.transport(forms, p2)[0]
        morph = max(morph, float(np.max(np.abs(whole - parts))))
        direct = mono.transport(forms, mono.PathSpec("d", (mono.line(ch, 1.0, b),)))[0]
        homot = max(homot, float(np.max(np.abs(whole - direct))))
        sym = max(sym, mono.sigma_transport_defect(forms, p1 + p2))
    return [
        _case("central residuals E1", norms["E1"], 1e-9),
        _case("central residuals E2", norms["E2"], 1e-9),
        _case("central residuals E3", norms["E3"], 1e-9),
        _case("principal solution morphism", morph, 1e-9),
        _case("principal solution homotopy invariance", homot, 1e-9),
        _case("reflection symmetry of transport", sym, 1e-9),
    ]


def suite_surface(rng, cases: int = 64) -> list[dict]:
    xs = np.linspace(-2, 2, cases)
    z = (xs[:, None] + 1j * xs[None, :]).ravel()
    z = z[np.abs(z) > 1e-9]
    lam = wn.circle_grid(surf.MESH_GRID)
    pts, _ = surf.sym_samples(pot.F_S(z, lam))
    stereo = float(np.max(np.linalg.norm(surf.rigid_motion(pts) - pot.inverse_stereographic(z), axis=-1)))
    g0 = gr.WeightedGraph({1: 0j})
    imm = surf.immerse(g0, 0.0, pot.central(g0, 8), resolution=16)
    return [
        _case("Sym formula versus stereographic projection", stereo, 1e-10),
        _case("model sphere mesh reflection symmetry", surf.reflection_defect(imm, "sphere_1"), 1e-8),
    ]


_SUITE_FUNCS = {
    "wiener": suite_wiener,
    "loop": suite_loop,
    "potential": suite_potential,
    "monodromy": suite_monodromy,
    "surface": suite_surface,
}


def run_suites(names, seed: int) -> dict:
    out = {"seed": seed, "suites": {}}
    for name in names:
        rng = np.random.default_rng([seed, SUITES.index(name)])
        out["suites"][name] = _SUITE_FUNCS[name](rng)
    out["failures"] = sum(not c["ok"] for cs in out["suites"].values() for c in cs)
    return out


@main.command()
@click.option("--suite", type=click.Choice(SUITES + ("all",)), default="all", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Write the JSON report here.")
def verify(suite: str, seed: int, out: str | None) -> None:
    """Run the closed-form and property checks; nonzero exit on any failure."""
    names = SUITES if suite == "all" else (suite,)
    report = run_suites(names, seed)
    _dump(report, out)
    if report["failures"]:
        raise _Fail(f"{report['failures']} check(s) failed", EXIT_VERIFY)


# neck ------------------------------------------------------------------------------------


@main.command()
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--seed", type=int, default=0, show_default=True, help="Seed for the constant matrices.")
def neck(out: str, seed: int) -> None:
    """Principal solution through a shrinking neck for a constant-coefficient family."""
    rng = np.random.default_rng(seed)
    b = 0.5 * (rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2)))
    c = 0.5 * (rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2)))
    b -= np.trace(b) / 2 * np.eye(2)
    c -= np.trace(c) / 2 * np.eye(2)
    ep = pot.EPS_PRIME
    limit = lg.exp2x2(-ep * b) @ lg.exp2x2(-ep * c)
    rep = mono.neck_limit(mono.constant_family(b, c), np.logspace(-5, -2, 7), limit[None], ep)
    rep.pop("values")
    rep.update({"b": b, "c": c, "limit": limit, "eps_prime": ep})
    _dump({k: (np.stack([v.real, v.imag], -1) if np.iscomplexobj(v) else v) for k, v in rep.items()}, out)
    click.echo(f"fitted exponent {rep.get('exponent', float('nan')):.3f}")


if __name__ == "__main__":  # pragma: no cover
    main()
