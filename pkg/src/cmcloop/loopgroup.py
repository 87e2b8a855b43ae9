"""2x2 loop matrices, Iwasawa splitting, loop log/exp, gauges and duality."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.linalg

from .forms import RationalLoopForm, dual, laurent_coefficients
from .wiener import (
    DEFAULT_N,
    DEFAULT_RHO,
    TAIL_TOL,
    LoopScalar,
    WienerError,
    circle_grid,
    coeffs_to_samples,
    default_grid_size,
    samples_to_coeffs,
)

FACTOR_TOL = 1e-10

__all__ = [
    "LoopMatrix",
    "IwasawaError",
    "LogBranchError",
    "iwasawa",
    "iwasawa_samples",
    "log_loop",
    "exp_loop",
    "log2x2",
    "exp2x2",
    "Gauge",
    "gauge_action",
    "dual",
]


class IwasawaError(ArithmeticError):
    pass


class LogBranchError(ArithmeticError):
    pass


# pointwise 2x2 helpers ---------------------------------------------------------


def det2(a: np.ndarray) -> np.ndarray:
    return a[..., 0, 0] * a[..., 1, 1] - a[..., 0, 1] * a[..., 1, 0]


def inv2(a: np.ndarray) -> np.ndarray:
    d = det2(a)
    out = np.empty_like(a)
    out[..., 0, 0] = a[..., 1, 1]
    out[..., 1, 1] = a[..., 0, 0]
    out[..., 0, 1] = -a[..., 0, 1]
    out[..., 1, 0] = -a[..., 1, 0]
    return out / d[..., None, None]


def _sinhc(s2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``cosh(s)`` and ``sinh(s)/s`` as functions of ``s**2``."""
    s = np.sqrt(s2.astype(complex))
    small = np.abs(s) < 1e-3
    s_safe = np.where(small, 1.0, s)
    ch = np.cosh(s)
    sh = np.where(small, 1 + s2 / 6 + s2 * s2 / 120 + s2**3 / 5040, np.sinh(s_safe) / s_safe)
    return ch, sh


def exp2x2(a: np.ndarray) -> np.ndarray:
    """Matrix exponential of stacks of 2x2 matrices in closed form."""
    a = np.asarray(a, dtype=complex)
    m = 0.5 * (a[..., 0, 0] + a[..., 1, 1])
    b = a - m[..., None, None] * np.eye(2)
    s2 = b[..., 0, 0] ** 2 + b[..., 0, 1] * b[..., 1, 0]
    ch, sh = _sinhc(s2)
    out = ch[..., None, None] * np.eye(2) + sh[..., None, None] * b
    return np.exp(m)[..., None, None] * out


def log2x2(a: np.ndarray, branch_tol: float = 1e-8) -> np.ndarray:
    """Principal matrix logarithm of stacks of 2x2 matrices.

    Raises :class:`LogBranchError` when an eigenvalue is on or near the
    negative real axis.
    """
    a = np.asarray(a, dtype=complex)
    m = 0.5 * (a[..., 0, 0] + a[..., 1, 1])
    b = a - m[..., None, None] * np.eye(2)
    disc = np.sqrt(b[..., 0, 0] ** 2 + b[..., 0, 1] * b[..., 1, 0])
    mu1, mu2 = m + disc, m - disc
    for mu in (mu1, mu2):
        if np.any((np.abs(mu.imag) <= branch_tol * np.abs(mu)) & (mu.real <= 0)):
            raise LogBranchError("eigenvalue on the branch cut of the logarithm")
    l1, l2 = np.log(mu1), np.log(mu2)
    x = disc / m
    small = np.abs(x) < 1e-3
    # divided difference (log mu1 - log mu2) / (mu1 - mu2)
    c1_small = (1 + x**2 / 3 + x**4 / 5 + x**6 / 7) / m
    d = np.where(small, 1.0, 2 * disc)
    c1 = np.where(small, c1_small, (l1 - l2) / d)
    c0 = 0.5 * (l1 + l2) - c1 * m
    return c0[..., None, None] * np.eye(2) + c1[..., None, None] * a


# loop matrices -------------------------------------------------------------------


@dataclass(frozen=True)
class LoopMatrix:
    """2x2 matrix of loops stored as coefficients of shape ``(2N+1, 2, 2)``."""

    coeffs: np.ndarray
    rho: float = DEFAULT_RHO
    dropped: float = 0.0

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=complex)
        if c.ndim != 3 or c.shape[1:] != (2, 2) or c.shape[0] % 2 == 0:
            raise WienerError("LoopMatrix coefficients must have shape (2N+1, 2, 2)")
        object.__setattr__(self, "coeffs", c)

    @property
    def N(self) -> int:
        return (self.coeffs.shape[0] - 1) // 2

    @classmethod
    def identity(cls, n: int = DEFAULT_N, rho: float = DEFAULT_RHO) -> LoopMatrix:
        return cls.constant(np.eye(2), n, rho)

    @classmethod
    def constant(cls, a, n: int = DEFAULT_N, rho: float = DEFAULT_RHO) -> LoopMatrix:
        c = np.zeros((2 * n + 1, 2, 2), dtype=complex)
        c[n] = np.asarray(a, dtype=complex)
        return cls(c, rho)

    @classmethod
    def from_entries(cls, entries: Sequence[Sequence[LoopScalar]]) -> LoopMatrix:
        n = max(e.N for row in entries for e in row)
        rho = entries[0][0].rho
        c = np.zeros((2 * n + 1, 2, 2), dtype=complex)
        for i in range(2):
            for j in range(2):
                e = entries[i][j]
                if e.rho != rho:
                    raise WienerError("mixed weights in LoopMatrix entries")
                c[:, i, j] = e.resize(n).coeffs
        return cls(c, rho)

    @classmethod
    def from_terms(cls, terms: dict[int, np.ndarray], n: int = DEFAULT_N, rho: float = DEFAULT_RHO) -> LoopMatrix:
        c = np.zeros((2 * n + 1, 2, 2), dtype=complex)
        for k, a in terms.items():
            c[n + k] += np.asarray(a, dtype=complex)
        return cls(c, rho)

    @classmethod
    def from_samples(cls, samples: np.ndarray, n: int = DEFAULT_N, rho: float = DEFAULT_RHO) -> LoopMatrix:
        c, tail = samples_to_coeffs(samples, n, axis=0)
        return cls(c, rho, tail)

    def samples(self, m: int | None = None) -> np.ndarray:
        m = default_grid_size(self.N) if m is None else m
        return coeffs_to_samples(self.coeffs, m, axis=0)

    def entry(self, i: int, j: int) -> LoopScalar:
        return LoopScalar(self.coeffs[:, i, j], self.rho)

    def resize(self, n: int) -> LoopMatrix:
        c = np.zeros((2 * n + 1, 2, 2), dtype=complex)
        m = min(n, self.N)
        c[n - m : n + m + 1] = self.coeffs[self.N - m : self.N + m + 1]
        return LoopMatrix(c, self.rho)

    def norm(self) -> float:
        """Max over entries of the weighted entry norm."""
        w = self.rho ** np.abs(np.arange(-self.N, self.N + 1))
        return float(np.max(np.einsum("k,kij->ij", w, np.abs(self.coeffs))))

    def _binary(self, other: LoopMatrix, op) -> LoopMatrix:
        if self.rho != other.rho:
            raise WienerError("mixed weights")
        n = max(self.N, other.N)
        return LoopMatrix(op(self.resize(n).coeffs, other.resize(n).coeffs), self.rho)

    def __add__(self, other: LoopMatrix) -> LoopMatrix:
        return self._binary(other, np.add)

    def __sub__(self, other: LoopMatrix) -> LoopMatrix:
        return self._binary(other, np.subtract)

    def __neg__(self) -> LoopMatrix:
        return LoopMatrix(-self.coeffs, self.rho)

    def __mul__(self, c) -> LoopMatrix:
        return LoopMatrix(self.coeffs * c, self.rho)

    __rmul__ = __mul__

    def __matmul__(self, other: LoopMatrix) -> LoopMatrix:
        if self.rho != other.rho:
            raise WienerError("mixed weights")
        n = max(self.N, other.N)
        m = default_grid_size(self.N + other.N) + 2
        prod = self.samples(m) @ other.samples(m)
        return LoopMatrix.from_samples(prod, n, self.rho)

    def det(self) -> LoopScalar:
        m = default_grid_size(2 * self.N) + 2
        c, tail = samples_to_coeffs(det2(self.samples(m)), self.N)
        return LoopScalar(c, self.rho, tail)

    def inv(self, m: int | None = None) -> LoopMatrix:
        m = default_grid_size(self.N) if m is None else m
        s = self.samples(m)
        if np.min(np.abs(det2(s))) < 1e-14:
            raise IwasawaError("singular sample")
        return LoopMatrix.from_samples(inv2(s), self.N, self.rho)

    def star(self) -> LoopMatrix:
        """Entrywise loop star followed by transposition."""
        return LoopMatrix(np.conj(self.coeffs[::-1]).transpose(0, 2, 1), self.rho)

    def bar(self) -> LoopMatrix:
        return LoopMatrix(np.conj(self.coeffs), self.rho)

    def __call__(self, lam) -> np.ndarray:
        lam = np.asarray(lam, dtype=complex)
        k = np.arange(-self.N, self.N + 1)
        p = lam[..., None] ** k
        return np.einsum("...k,kij->...ij", p, self.coeffs)

    def eval_and_deriv(self, lam0: complex) -> tuple[np.ndarray, np.ndarray]:
        k = np.arange(-self.N, self.N + 1)
        p = lam0 ** k.astype(float)
        val = np.einsum("k,kij->ij", p, self.coeffs)
        der = np.einsum("k,kij->ij", k * p / lam0, self.coeffs)
        return val, der

    def max_abs_diff(self, other: LoopMatrix) -> float:
        n = max(self.N, other.N)
        return float(np.max(np.abs(self.resize(n).coeffs - other.resize(n).coeffs)))

    # membership tests

    def unitary_defect(self, m: int | None = None) -> float:
        s = self.samples(m)
        g = np.conj(np.swapaxes(s, -1, -2)) @ s - np.eye(2)
        return float(max(np.max(np.abs(g)), np.max(np.abs(det2(s) - 1))))

    def in_su2(self, tol: float = 1e-8) -> bool:
        return self.unitary_defect() <= tol

    def in_plus(self, tol: float = TAIL_TOL, real: bool = False) -> bool:
        n = self.N
        if np.max(np.abs(self.coeffs[:n])) > tol:
            return False
        b0 = self.coeffs[n]
        if abs(b0[1, 0]) > tol:
            return False
        if real:
            d = np.diag(b0)
            return bool(np.all(np.abs(d.imag) <= tol) and np.all(d.real > 0))
        return True


# Iwasawa splitting -------------------------------------------------------------------


def _laurent_from_samples(s: np.ndarray, kmax: int) -> np.ndarray:
    """Coefficients ``H_{-kmax..kmax}`` from samples along axis -3, shape (..., 2*kmax+1, 2, 2)."""
    m = s.shape[-3]
    f = np.fft.fft(s, axis=-3) / m
    idx = np.arange(-kmax, kmax + 1) % m
    return f[..., idx, :, :]


def iwasawa_samples(
    phi: np.ndarray,
    n_out: int,
    blocks: int | None = None,
) -> tuple[np.ndarray, np.ndarray, dict]:
    """Batched Iwasawa splitting on circle samples.

    Parameters
    ----------
    phi : ndarray, shape (..., M, 2, 2)
        Samples of the loop on the standard ``M``-point circle grid.
    n_out : int
        Number of positive modes kept in the positive factor.
    blocks : int, optional
        Size of the block-Toeplitz system (defaults to ``4 * n_out``, capped by
        the grid resolution).

    Returns
    -------
    F_samples, B_coeffs, info
        Unitary factor on the same grid, positive factor coefficients
        ``B_0..B_{n_out}`` with shape ``(..., n_out+1, 2, 2)``, diagnostics.
    """
    phi = np.asarray(phi, dtype=complex)
    m = phi.shape[-3]
    batch = phi.shape[:-3]
    d = det2(phi)
    if np.min(np.abs(d)) < 1e-14:
        raise IwasawaError("singular sample")
    kx = 4 * n_out if blocks is None else blocks
    kx = max(1, min(kx, m // 2 - n_out - 1))
    hs = np.conj(np.swapaxes(phi, -1, -2)) @ phi
    kmax = kx + n_out
    h = _laurent_from_samples(hs, kmax)  # index i + kmax holds H_i
    # block Toeplitz T[k, m'] = H_{k - m'} for k, m' = 1..kx
    kk = np.arange(1, kx + 1)
    diff = kk[:, None] - kk[None, :] + kmax
    t = h[..., diff, :, :]  # (..., kx, kx, 2, 2)
    t = np.swapaxes(t, -3, -2).reshape(batch + (2 * kx, 2 * kx))
    r = h[..., kmax - kk, :, :].transpose(tuple(range(len(batch))) + (len(batch) + 1, len(batch), len(batch) + 2))
    r = r.reshape(batch + (2, 2 * kx))
    t = 0.5 * (t + np.conj(np.swapaxes(t, -1, -2)))
    try:
        low = np.linalg.cholesky(t)
    except np.linalg.LinAlgError as exc:
        raise IwasawaError("block Toeplitz matrix is not positive definite") from exc
    # X T = -R  <=>  T X^H = -R^H
    rh = -np.conj(np.swapaxes(r, -1, -2))
    y = _tri_solve(low, rh, lower=True)
    xh = _tri_solve(np.conj(np.swapaxes(low, -1, -2)), y, lower=False)
    x = np.conj(np.swapaxes(xh, -1, -2)).reshape(batch + (2, kx, 2)).swapaxes(-3, -2)  # X_{-k}
    # M_plus_m = H_m + sum_k X_{-k} H_{m+k}, m = 0..n_out
    mm = np.arange(n_out + 1)
    hm = h[..., kmax + mm, :, :]
    idx = kmax + mm[:, None] + kk[None, :]
    hk = h[..., idx, :, :]  # (..., n_out+1, kx, 2, 2)
    mplus = hm + np.einsum("...kab,...mkbc->...mac", x, hk)
    m0 = 0.5 * (mplus[..., 0, :, :] + np.conj(np.swapaxes(mplus[..., 0, :, :], -1, -2)))
    hinv = inv2(m0)
    hinv = 0.5 * (hinv + np.conj(np.swapaxes(hinv, -1, -2)))
    try:
        lo = np.linalg.cholesky(hinv)
    except np.linalg.LinAlgError as exc:
        raise IwasawaError("normalisation matrix is not positive definite") from exc
    k = np.conj(np.swapaxes(lo, -1, -2))
    p = np.einsum("...ab,...mbc->...mac", k, mplus)
    q, rr = np.linalg.qr(p[..., 0, :, :])
    sgn = np.diagonal(rr, axis1=-2, axis2=-1)
    ph = sgn / np.abs(sgn)
    q = q * ph[..., None, :]
    b = np.einsum("...ba,...mbc->...mac", np.conj(q), p)
    lam = circle_grid(m)
    pw = lam[:, None] ** mm[None, :]
    bs = np.einsum("km,...mab->...kab", pw, b)
    fs = phi @ inv2(bs)
    info = {
        "blocks": kx,
        "tail": float(np.max(np.abs(b[..., -1, :, :]))) if n_out > 0 else 0.0,
    }
    return fs, b, info


def _tri_solve(a: np.ndarray, b: np.ndarray, lower: bool) -> np.ndarray:
    if a.ndim == 2:
        return scipy.linalg.solve_triangular(a, b, lower=lower)
    out = np.empty(np.broadcast_shapes(a.shape[:-2], b.shape[:-2]) + b.shape[-2:], dtype=complex)
    af = a.reshape((-1,) + a.shape[-2:])
    bf = np.broadcast_to(b, out.shape).reshape((-1,) + b.shape[-2:])
    of = out.reshape((-1,) + b.shape[-2:])
    for i in range(af.shape[0]):
        of[i] = scipy.linalg.solve_triangular(af[i], bf[i], lower=lower)
    return out


def iwasawa(phi: LoopMatrix, blocks: int | None = None, factor_tol: float = FACTOR_TOL) -> tuple[LoopMatrix, LoopMatrix]:
    """Split ``phi = F B`` with ``F`` unitary on the circle and ``B`` positive.

    ``B`` extends holomorphically to the unit disk, is upper triangular at
    ``lam = 0`` with positive diagonal. The computation goes through the
    Hermitian loop ``phi^H phi``, whose spectral factor is obtained from a
    block-Toeplitz Cholesky solve.
    """
    n = phi.N
    m = 2 * (8 * n + 8)
    s = phi.samples(m)
    fs, b, info = iwasawa_samples(s, n, blocks)
    bc = np.zeros((2 * n + 1, 2, 2), dtype=complex)
    bc[n:] = b
    F = LoopMatrix.from_samples(fs, n, phi.rho)
    B = LoopMatrix(bc, phi.rho, info["tail"])
    return F, B


# log / exp -------------------------------------------------------------------------


def log_loop(phi: LoopMatrix, m: int | None = None) -> LoopMatrix:
    """Loop logarithm computed pointwise on the circle grid (principal branch)."""
    m = default_grid_size(phi.N) if m is None else m
    return LoopMatrix.from_samples(log2x2(phi.samples(m)), phi.N, phi.rho)


def exp_loop(a: LoopMatrix, m: int | None = None) -> LoopMatrix:
    """Loop exponential computed pointwise on the circle grid."""
    m = default_grid_size(a.N) + 16 if m is None else m
    return LoopMatrix.from_samples(exp2x2(a.samples(m)), a.N, a.rho)


# gauges -------------------------------------------------------------------------------


@dataclass
class Gauge:
    """Holomorphic gauge ``G(z, lam)`` given sample-wise.

    ``fn(z)`` takes points of shape ``(P, M)`` paired with ``lam`` and returns
    ``(G, dG/dz)``, each of shape ``(P, M, 2, 2)``. ``singular`` lists the points
    (per sample, shape ``(M,)`` or scalar) where ``G`` or its inverse blows up.
    """

    fn: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]
    singular: list
    name: str = ""

    def __matmul__(self, other: Gauge) -> Gauge:
        def fn(z):
            g1, d1 = self.fn(z)
            g2, d2 = other.fn(z)
            return g1 @ g2, d1 @ g2 + g1 @ d2

        return Gauge(fn, list(self.singular) + list(other.singular), f"{self.name}*{other.name}")

    @classmethod
    def identity(cls) -> Gauge:
        def fn(z):
            z = np.asarray(z)
            g = np.broadcast_to(np.eye(2, dtype=complex), z.shape + (2, 2)).copy()
            return g, np.zeros_like(g)

        return cls(fn, [], "I")


def gauged_values(xi: RationalLoopForm, g: Gauge, z: np.ndarray) -> np.ndarray:
    """Pointwise ``G^-1 xi G + G^-1 dG`` at paired points ``z`` of shape ``(P, M)``."""
    a = xi.paired(z)
    gv, dg = g.fn(z)
    gi = inv2(gv)
    return gi @ a @ gv + gi @ dg


def gauge_action(
    xi: RationalLoopForm,
    g: Gauge,
    max_order: int = 2,
    tol: float = 1e-12,
    n_nodes: int = 128,
) -> RationalLoopForm:
    """Gauge a rational potential: ``xi . G = G^-1 xi G + G^-1 dG``.

    The result is evaluated pointwise and its rational structure is recovered
    by contour extraction of principal parts at the poles of ``xi`` and the
    singular points of ``G``; the remaining entire part is fitted as a
    polynomial in ``z``.
    """
    m = xi.M
    cands = [np.asarray(c, dtype=complex) * np.ones(m) for c in xi.locs]
    for c in g.singular:
        c = np.asarray(c, dtype=complex) * np.ones(m)
        if np.all(np.isfinite(c)) and not any(np.max(np.abs(c - d)) < 1e-13 for d in cands):
            cands.append(c)
    fn = lambda z: gauged_values(xi, g, z)  # noqa: E731
    locs, res, dbl = [], [], []
    for i, c in enumerate(cands):
        others = [d for j, d in enumerate(cands) if j != i]
        dist = np.min([np.abs(c - d) for d in others], axis=0) if others else np.ones(m)
        r = 0.4 * np.minimum(dist, 1.0)
        orders = list(range(-max_order - 1, 0))
        lc = laurent_coefficients(fn, c, r, orders, n_nodes)
        d2, d1 = lc[-2], lc[-1]
        if np.max(np.abs(d2)) > tol or np.max(np.abs(d1)) > tol:
            locs.append(c)
            res.append(np.where(np.abs(d1) > tol, d1, 0))
            dbl.append(np.where(np.abs(d2) > tol, d2, 0))
    k = len(locs)
    out = RationalLoopForm(
        xi.lam,
        np.array(locs).reshape(k, m),
        np.array(res).reshape(k, m, 2, 2),
        np.array(dbl).reshape(k, m, 2, 2),
        None,
        xi.chart,
    )
    # entire remainder: Taylor coefficients on a large circle
    rad = 2.0 * max([np.max(np.abs(c)) for c in cands] + [0.5]) + 1.0
    rem = lambda z: fn(z) - out.paired(z)  # noqa: E731
    deg = 6
    tc = laurent_coefficients(rem, np.zeros(m), np.full(m, rad), list(range(deg + 1)), n_nodes)
    keep = [d for d in range(deg + 1) if np.max(np.abs(tc[d])) * rad**d > tol * 10]
    if keep:
        top = max(keep) + 1
        out.poly = np.where(np.abs(tc[:top]) * rad ** np.arange(top)[:, None, None, None] > tol * 10, tc[:top], 0)
    return out


def is_dpw_shape(xi: RationalLoopForm, n: int, tol: float = TAIL_TOL) -> bool:
    """Check that ``alpha, beta, gamma`` have no negative loop modes (sampled residues and poles)."""
    lam = xi.lam
    for arr in (xi.res, xi.dbl, xi.poly):
        if not len(arr):
            continue
        a = arr[..., 0, 0]
        b = arr[..., 0, 1] * lam
        c = arr[..., 1, 0]
        for e in (a, b, c):
            co, _ = samples_to_coeffs(e, min(n, len(lam) // 2 - 1), axis=-1)
            nn = co.shape[-1] // 2
            if np.max(np.abs(co[..., :nn]), initial=0.0) > tol:
                return False
    return True
