"""Matrix-valued rational 1-forms in ``z`` whose coefficients depend on a loop parameter.

Each form is stored sample-wise in ``lam``: for every grid point ``lam_k`` it is
an ordinary rational form

    sum_i res_i / (z - loc_i) dz + sum_i dbl_i / (z - loc_i)**2 dz + sum_d poly_d z**d dz

with finite pole locations. Poles at infinity are implicit (their residue is
minus the sum of the finite ones).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .wiener import bar_samples, circle_grid, samples_to_coeffs

# location of placeholder poles that are switched off on part of the grid
FAR = 1e30j


def _as_stack(a, m: int) -> np.ndarray:
    a = np.asarray(a, dtype=complex)
    if a.ndim == 2:
        a = np.broadcast_to(a, (m, 2, 2))
    return a


@dataclass
class RationalLoopForm:
    """Rational 1-form ``A(z, lam) dz`` with 2x2 loop-sampled coefficients.

    Attributes
    ----------
    lam : ndarray, shape (M,)
        Loop-parameter sample points (usually the unit-circle grid).
    locs : ndarray, shape (K, M)
        Finite pole locations per sample.
    res, dbl : ndarray, shape (K, M, 2, 2)
        Residues and coefficients of ``(z - loc)**-2``.
    poly : ndarray, shape (D, M, 2, 2)
        Coefficients of ``z**d dz``.
    """

    lam: np.ndarray
    locs: np.ndarray
    res: np.ndarray
    dbl: np.ndarray
    poly: np.ndarray = field(default=None)
    chart: str = ""

    def __post_init__(self):
        m = len(self.lam)
        self.lam = np.asarray(self.lam, dtype=complex)
        self.locs = np.asarray(self.locs, dtype=complex).reshape(-1, m)
        k = self.locs.shape[0]
        self.res = np.asarray(self.res, dtype=complex).reshape(k, m, 2, 2)
        self.dbl = np.asarray(self.dbl, dtype=complex).reshape(k, m, 2, 2)
        if self.poly is None:
            self.poly = np.zeros((0, m, 2, 2), dtype=complex)
        self.poly = np.asarray(self.poly, dtype=complex).reshape(-1, m, 2, 2)

    @classmethod
    def empty(cls, lam: np.ndarray, chart: str = "") -> RationalLoopForm:
        m = len(lam)
        z = np.zeros((0, m, 2, 2), dtype=complex)
        return cls(lam, np.zeros((0, m)), z, z, None, chart)

    @property
    def M(self) -> int:
        return len(self.lam)

    def add_pole(self, loc, res=None, dbl=None) -> RationalLoopForm:
        """Return a new form with one more pole (``loc`` scalar or per-sample)."""
        m = self.M
        loc = np.broadcast_to(np.asarray(loc, dtype=complex), (m,))
        res = np.zeros((m, 2, 2)) if res is None else _as_stack(res, m)
        dbl = np.zeros((m, 2, 2)) if dbl is None else _as_stack(dbl, m)
        return RationalLoopForm(
            self.lam,
            np.concatenate([self.locs, loc[None]]),
            np.concatenate([self.res, res[None]]),
            np.concatenate([self.dbl, dbl[None]]),
            self.poly,
            self.chart,
        )

    def __add__(self, other: RationalLoopForm) -> RationalLoopForm:
        d = max(len(self.poly), len(other.poly))
        poly = np.zeros((d, self.M, 2, 2), dtype=complex)
        poly[: len(self.poly)] += self.poly
        poly[: len(other.poly)] += other.poly
        return RationalLoopForm(
            self.lam,
            np.concatenate([self.locs, other.locs]),
            np.concatenate([self.res, other.res]),
            np.concatenate([self.dbl, other.dbl]),
            poly,
            self.chart,
        )

    def scale(self, c) -> RationalLoopForm:
        return RationalLoopForm(self.lam, self.locs, self.res * c, self.dbl * c, self.poly * c, self.chart)

    def map_coeffs(self, fn) -> RationalLoopForm:
        """Apply a linear map ``fn`` to every coefficient matrix stack."""
        return RationalLoopForm(self.lam, self.locs, fn(self.res), fn(self.dbl), fn(self.poly), self.chart)

    def __call__(self, z) -> np.ndarray:
        """Coefficient of ``dz`` at points ``z``: shape ``z.shape + (M, 2, 2)``."""
        z = np.asarray(z, dtype=complex)
        zf = z.reshape(-1)
        m = self.M
        out = np.zeros((m, zf.size, 4), dtype=complex)
        if len(self.locs):
            inv = 1.0 / (zf[None, :, None] - self.locs.T[:, None, :])  # (M, P, K)
            k = self.locs.shape[0]
            coef = np.moveaxis(self.res, 1, 0).reshape(m, k, 4)
            if np.any(self.dbl):
                inv = np.concatenate([inv, inv * inv], axis=2)
                coef = np.concatenate([coef, np.moveaxis(self.dbl, 1, 0).reshape(m, k, 4)], axis=1)
            out += inv @ coef
        if len(self.poly):
            pw = zf[:, None] ** np.arange(len(self.poly))[None]
            out += pw[None] @ np.moveaxis(self.poly, 1, 0).reshape(m, -1, 4)
        return np.moveaxis(out, 0, 1).reshape(z.shape + (m, 2, 2))

    def paired(self, z) -> np.ndarray:
        """Evaluate sample ``k`` at ``z[..., k]``: shape ``z.shape + (2, 2)``."""
        z = np.asarray(z, dtype=complex)
        zf = z.reshape(-1, self.M)
        out = np.zeros(zf.shape + (2, 2), dtype=complex)
        if len(self.locs):
            inv = 1.0 / (zf[:, None, :] - self.locs[None])
            out += np.einsum("pkm,kmab->pmab", inv, self.res)
            if np.any(self.dbl):
                out += np.einsum("pkm,kmab->pmab", inv * inv, self.dbl)
        if len(self.poly):
            pw = zf[:, None, :] ** np.arange(len(self.poly))[None, :, None]
            out += np.einsum("pdm,dmab->pmab", pw, self.poly)
        return out.reshape(z.shape + (2, 2))

    def simplify(self, tol: float = 0.0) -> RationalLoopForm:
        """Merge coincident poles and drop poles with vanishing principal parts."""
        locs, res, dbl = [], [], []
        for i in range(len(self.locs)):
            for j, l in enumerate(locs):
                if np.max(np.abs(l - self.locs[i])) <= 1e-14 * (1 + np.max(np.abs(l))):
                    res[j] = res[j] + self.res[i]
                    dbl[j] = dbl[j] + self.dbl[i]
                    break
            else:
                locs.append(self.locs[i])
                res.append(self.res[i].copy())
                dbl.append(self.dbl[i].copy())
        keep = [i for i in range(len(locs)) if max(np.max(np.abs(res[i])), np.max(np.abs(dbl[i]))) > tol]
        m = self.M
        if not keep:
            out = RationalLoopForm.empty(self.lam, self.chart)
            out.poly = self.poly
            return out
        return RationalLoopForm(
            self.lam,
            np.array([locs[i] for i in keep]).reshape(-1, m),
            np.array([res[i] for i in keep]),
            np.array([dbl[i] for i in keep]),
            self.poly,
            self.chart,
        )

    def residue_at(self, loc, tol: float = 1e-12) -> np.ndarray:
        """Sum of residues of poles located at ``loc`` (per sample)."""
        loc = np.broadcast_to(np.asarray(loc, dtype=complex), (self.M,))
        out = np.zeros((self.M, 2, 2), dtype=complex)
        for i in range(len(self.locs)):
            if np.max(np.abs(self.locs[i] - loc)) <= tol * (1 + np.max(np.abs(loc))):
                out += self.res[i]
        return out

    def residue_at_infinity(self) -> np.ndarray:
        return -np.sum(self.res, axis=0)

    def mobius(self, T: np.ndarray) -> RationalLoopForm:
        """Express the form in the coordinate ``w = T(z)``.

        ``T`` is a 2x2 matrix, or a per-sample stack ``(M, 2, 2)``. The entire part
        must vanish. Simple poles mapped to ``w = infinity`` are dropped sample-wise,
        which is exact because they are recovered as the residue at infinity.
        """
        if len(self.poly) and np.any(self.poly):
            raise ValueError("Mobius transport of a form with an entire part is not supported")
        T = np.broadcast_to(np.asarray(T, dtype=complex), (self.M, 2, 2))
        a, b, c, d = T[:, 0, 0], T[:, 0, 1], T[:, 1, 0], T[:, 1, 1]
        den = c[None] * self.locs + d[None]
        at_inf = np.abs(den) <= 1e-15 * (np.abs(c[None] * self.locs) + np.abs(d[None]) + 1e-300)
        den_safe = np.where(at_inf, 1.0, den)
        newloc = (a[None] * self.locs + b[None]) / den_safe
        deriv = (a * d - b * c)[None] / den_safe**2
        if np.any(at_inf[..., None, None] & (self.dbl != 0)):
            raise ValueError("double pole mapped to infinity")
        res = np.where(at_inf[..., None, None], 0, self.res)
        out = RationalLoopForm(
            self.lam,
            np.where(at_inf, FAR, newloc),
            res,
            self.dbl * deriv[..., None, None],
            None,
            self.chart,
        )
        # the implicit pole at z = infinity lands at w = a / c
        affine = np.abs(c) <= 1e-15 * (np.abs(a) + np.abs(d))
        if not np.all(affine):
            r_inf = np.where(affine[:, None, None], 0, self.residue_at_infinity())
            out = out.add_pole(np.where(affine, FAR, a / np.where(affine, 1, c)), r_inf)
        return out

    def abg(self, z) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Entries ``alpha, beta, gamma`` with ``xi = [[alpha, beta/lam], [gamma, -alpha]]``."""
        a = self(z)
        return a[..., 0, 0], a[..., 0, 1] * self.lam, a[..., 1, 0]

    def pullback_sigma_bar(self, z) -> np.ndarray:
        """Coefficient of ``dz`` of ``bar(sigma^* xi)`` at ``z``, with ``sigma(z) = 1/conj(z)``.

        Requires ``lam`` to be the standard circle grid, so that the coefficient
        conjugation acts by index reversal.
        """
        z = np.asarray(z, dtype=complex)
        w = 1.0 / np.conj(z)
        v = self(w)
        v = bar_samples(v, axis=-3)
        return -v / (z[..., None, None, None] ** 2)


def is_circle_grid(lam: np.ndarray) -> bool:
    return bool(np.allclose(lam, circle_grid(len(lam))))


def dual(xi: RationalLoopForm) -> RationalLoopForm:
    """Dual potential: ``[[a, b/lam], [c, -a]] -> [[-a, c/lam], [b, a]]``."""
    lam = xi.lam

    def swap(m: np.ndarray) -> np.ndarray:
        out = np.empty_like(m)
        out[..., 0, 0] = -m[..., 0, 0]
        out[..., 1, 1] = -m[..., 1, 1]
        out[..., 0, 1] = m[..., 1, 0] / lam
        out[..., 1, 0] = m[..., 0, 1] * lam
        return out

    return xi.map_coeffs(swap)


def laurent_coefficients(fn, center, radius, orders, m_nodes: int = 128) -> np.ndarray:
    """Laurent coefficients of a sampled matrix function by the trapezoid rule.

    ``fn(z)`` takes points of shape ``(P, M)`` paired with the loop samples and
    returns ``(P, M, 2, 2)``; ``center`` and ``radius`` have shape ``(M,)``.
    Returns an array of shape ``(len(orders), M, 2, 2)``.
    """
    center = np.asarray(center, dtype=complex)
    radius = np.asarray(radius, dtype=float)
    theta = 2 * np.pi * np.arange(m_nodes) / m_nodes
    u = np.exp(1j * theta)
    zs = center[None, :] + radius[None, :] * u[:, None]
    vals = fn(zs)
    out = []
    for n in orders:
        w = (radius[None, :] * u[:, None]) ** (-n)
        out.append(np.mean(vals * w[..., None, None], axis=0))
    return np.array(out)


def coefficient_view(samples: np.ndarray, n: int, axis: int = 0):
    """Loop coefficients of a sample stack along ``axis`` (wraps the FFT transform)."""
    return samples_to_coeffs(samples, n, axis=axis)
