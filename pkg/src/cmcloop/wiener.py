"""Truncated weighted Fourier series on the unit circle.

A :class:`LoopScalar` stores the coefficients ``f_i`` for ``i`` in ``[-N, N]``
of a function ``f(lam) = sum f_i lam**i`` together with the weight ``rho``
used in the norm ``sum |f_i| rho**|i|``.

Nonlinear operations (division, square roots, logarithms) are done on an
equispaced circle grid ``lam_k = exp(2 pi i k / M)`` and transformed back with
the FFT, see :func:`to_samples` and :func:`from_samples`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_RHO = 1.2
DEFAULT_N = 16
TAIL_TOL = 1e-10


class WienerError(ValueError):
    """Raised on inconsistent loop arithmetic (mixed weights, bad grids)."""


def circle_grid(m: int) -> np.ndarray:
    """Return the ``m`` sample points ``exp(2 pi i k / m)``."""
    return np.exp(2j * np.pi * np.arange(m) / m)


def coeffs_to_samples(coeffs: np.ndarray, m: int, axis: int = -1) -> np.ndarray:
    """Evaluate Laurent coefficients (centered, length ``2N+1``) on the ``m``-point grid.

    ``coeffs`` may carry extra leading/trailing axes; the Laurent index runs
    along ``axis``.
    """
    c = np.moveaxis(np.asarray(coeffs, dtype=complex), axis, -1)
    n = (c.shape[-1] - 1) // 2
    if m <= 2 * n:
        raise WienerError(f"grid of {m} points cannot represent degree {n}")
    buf = np.zeros(c.shape[:-1] + (m,), dtype=complex)
    buf[..., : n + 1] = c[..., n:]
    if n:
        buf[..., m - n :] = c[..., :n]
    out = np.fft.ifft(buf, axis=-1) * m
    return np.moveaxis(out, -1, axis)


def samples_to_coeffs(samples: np.ndarray, n: int, axis: int = -1) -> tuple[np.ndarray, float]:
    """Inverse of :func:`coeffs_to_samples`.

    Returns the centered coefficients of degree ``n`` and the largest modulus
    among the discarded modes (an aliasing/truncation indicator).
    """
    s = np.moveaxis(np.asarray(samples, dtype=complex), axis, -1)
    m = s.shape[-1]
    if m <= 2 * n:
        raise WienerError(f"grid of {m} points cannot represent degree {n}")
    f = np.fft.fft(s, axis=-1) / m
    out = np.concatenate([f[..., m - n :], f[..., : n + 1]], axis=-1) if n else f[..., :1]
    dropped = f[..., n + 1 : m - n]
    tail = float(np.max(np.abs(dropped))) if dropped.size else 0.0
    return np.moveaxis(out, -1, axis), tail


def bar_samples(samples: np.ndarray, axis: int = -1) -> np.ndarray:
    """Apply the coefficient-conjugation involution to grid samples."""
    s = np.moveaxis(np.asarray(samples), axis, -1)
    out = np.conj(np.roll(s[..., ::-1], 1, axis=-1))
    return np.moveaxis(out, -1, axis)


def real_part_samples(samples: np.ndarray, axis: int = -1) -> np.ndarray:
    """Samples of ``(f + bar f) / 2``: the loop with real parts of the coefficients."""
    return 0.5 * (samples + bar_samples(samples, axis))


@dataclass(frozen=True)
class LoopScalar:
    """Element of the truncated weighted Wiener algebra.

    Parameters
    ----------
    coeffs : ndarray, shape (2N+1,)
        Coefficients ``f_{-N}, ..., f_N``.
    rho : float
        Norm weight, must exceed 1.
    """

    coeffs: np.ndarray
    rho: float = DEFAULT_RHO
    dropped: float = field(default=0.0, compare=False)

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=complex).reshape(-1)
        if c.size % 2 == 0:
            raise WienerError("coefficient vector must have odd length 2N+1")
        if not self.rho > 1:
            raise WienerError("rho must be greater than 1")
        object.__setattr__(self, "coeffs", c)

    # construction

    @classmethod
    def zeros(cls, n: int = DEFAULT_N, rho: float = DEFAULT_RHO) -> LoopScalar:
        return cls(np.zeros(2 * n + 1, dtype=complex), rho)

    @classmethod
    def const(cls, c: complex, n: int = DEFAULT_N, rho: float = DEFAULT_RHO) -> LoopScalar:
        out = np.zeros(2 * n + 1, dtype=complex)
        out[n] = c
        return cls(out, rho)

    @classmethod
    def monomial(cls, k: int, c: complex = 1.0, n: int = DEFAULT_N, rho: float = DEFAULT_RHO) -> LoopScalar:
        if abs(k) > n:
            raise WienerError(f"lambda^{k} does not fit in degree {n}")
        out = np.zeros(2 * n + 1, dtype=complex)
        out[n + k] = c
        return cls(out, rho)

    @classmethod
    def from_dict(cls, terms: dict[int, complex], n: int = DEFAULT_N, rho: float = DEFAULT_RHO) -> LoopScalar:
        out = np.zeros(2 * n + 1, dtype=complex)
        for k, c in terms.items():
            if abs(k) > n:
                raise WienerError(f"lambda^{k} does not fit in degree {n}")
            out[n + k] += c
        return cls(out, rho)

    @classmethod
    def from_plus(cls, plus: np.ndarray, n: int | None = None, rho: float = DEFAULT_RHO) -> LoopScalar:
        """Build from nonnegative-mode coefficients ``f_0, f_1, ...``."""
        plus = np.asarray(plus, dtype=complex)
        n = len(plus) - 1 if n is None else n
        out = np.zeros(2 * n + 1, dtype=complex)
        k = min(len(plus), n + 1)
        out[n : n + k] = plus[:k]
        return cls(out, rho)

    # basic accessors

    @property
    def N(self) -> int:
        return (self.coeffs.size - 1) // 2

    def __getitem__(self, i: int) -> complex:
        if abs(i) > self.N:
            return 0j
        return complex(self.coeffs[self.N + i])

    def norm(self) -> float:
        idx = np.abs(np.arange(-self.N, self.N + 1))
        return float(np.sum(np.abs(self.coeffs) * self.rho**idx))

    def resize(self, n: int) -> LoopScalar:
        """Pad with zeros or truncate to degree ``n``."""
        out = np.zeros(2 * n + 1, dtype=complex)
        m = min(n, self.N)
        out[n - m : n + m + 1] = self.coeffs[self.N - m : self.N + m + 1]
        return LoopScalar(out, self.rho)

    # arithmetic

    def _check(self, other: LoopScalar) -> None:
        if self.rho != other.rho:
            raise WienerError(f"mixed weights rho={self.rho} and rho={other.rho}")

    def _coerce(self, other) -> LoopScalar:
        if isinstance(other, LoopScalar):
            self._check(other)
            return other.resize(self.N) if other.N != self.N else other
        return LoopScalar.const(complex(other), self.N, self.rho)

    def __add__(self, other) -> LoopScalar:
        o = self._coerce(other)
        return LoopScalar(self.coeffs + o.coeffs, self.rho)

    __radd__ = __add__

    def __sub__(self, other) -> LoopScalar:
        o = self._coerce(other)
        return LoopScalar(self.coeffs - o.coeffs, self.rho)

    def __rsub__(self, other) -> LoopScalar:
        return (-self) + other

    def __neg__(self) -> LoopScalar:
        return LoopScalar(-self.coeffs, self.rho)

    def __mul__(self, other) -> LoopScalar:
        if not isinstance(other, LoopScalar):
            return LoopScalar(self.coeffs * complex(other), self.rho)
        return mul(self, other)

    def __rmul__(self, other) -> LoopScalar:
        return LoopScalar(self.coeffs * complex(other), self.rho)

    def __truediv__(self, other) -> LoopScalar:
        if isinstance(other, LoopScalar):
            return divide(self, other)
        return LoopScalar(self.coeffs / complex(other), self.rho)

    # involutions and projections

    def bar(self) -> LoopScalar:
        return LoopScalar(np.conj(self.coeffs), self.rho)

    def star(self) -> LoopScalar:
        return LoopScalar(np.conj(self.coeffs[::-1]), self.rho)

    def re(self) -> LoopScalar:
        return LoopScalar(self.coeffs.real.astype(complex), self.rho)

    def im(self) -> LoopScalar:
        return LoopScalar(self.coeffs.imag.astype(complex), self.rho)

    def project(self) -> tuple[LoopScalar, complex, LoopScalar]:
        """Split into strictly negative modes, constant term and strictly positive modes."""
        n = self.N
        minus = self.coeffs.copy()
        minus[n:] = 0
        plus = self.coeffs.copy()
        plus[: n + 1] = 0
        return LoopScalar(minus, self.rho), complex(self.coeffs[n]), LoopScalar(plus, self.rho)

    def plus_part(self) -> np.ndarray:
        """Coefficients ``f_0 .. f_N``."""
        return self.coeffs[self.N :].copy()

    # subspace tags

    def in_plus(self, tol: float = TAIL_TOL) -> bool:
        return bool(np.all(np.abs(self.coeffs[: self.N]) <= tol))

    def in_minus(self, tol: float = TAIL_TOL) -> bool:
        return bool(np.all(np.abs(self.coeffs[self.N + 1 :]) <= tol))

    def in_strict_plus(self, tol: float = TAIL_TOL) -> bool:
        return self.in_plus(tol) and abs(self.coeffs[self.N]) <= tol

    def in_strict_minus(self, tol: float = TAIL_TOL) -> bool:
        return self.in_minus(tol) and abs(self.coeffs[self.N]) <= tol

    def is_real(self, tol: float = TAIL_TOL) -> bool:
        return self.im().norm() <= tol

    # evaluation

    def eval_and_deriv(self, lam0: complex) -> tuple[complex, complex]:
        return eval_and_deriv(self, lam0)

    def __call__(self, lam) -> np.ndarray | complex:
        lam = np.asarray(lam, dtype=complex)
        k = np.arange(-self.N, self.N + 1)
        out = np.sum(self.coeffs * lam[..., None] ** k, axis=-1)
        return complex(out) if out.ndim == 0 else out

    def samples(self, m: int | None = None) -> np.ndarray:
        return to_samples(self, m)


def mul(f: LoopScalar, g: LoopScalar, n_out: int | None = None) -> LoopScalar:
    """Truncated product of two loops.

    The result keeps modes up to ``n_out`` (default ``max(f.N, g.N)``); the
    norm of the discarded tail is stored in ``LoopScalar.dropped``.
    """
    f._check(g)
    full = np.convolve(f.coeffs, g.coeffs)
    nf = f.N + g.N
    n_out = max(f.N, g.N) if n_out is None else n_out
    m = min(n_out, nf)
    out = np.zeros(2 * n_out + 1, dtype=complex)
    out[n_out - m : n_out + m + 1] = full[nf - m : nf + m + 1]
    idx = np.abs(np.arange(-nf, nf + 1))
    mask = idx > n_out
    dropped = float(np.sum(np.abs(full[mask]) * f.rho ** idx[mask]))
    return LoopScalar(out, f.rho, dropped)


def eval_and_deriv(f: LoopScalar, lam0: complex) -> tuple[complex, complex]:
    """Value and lambda-derivative of ``f`` at ``lam0``.

    Raises :class:`WienerError` when ``lam0`` lies outside the annulus
    ``1/rho < |lam| < rho`` on which the series is controlled by its norm.
    """
    r = abs(lam0)
    if not (1 / f.rho < r < f.rho):
        raise WienerError(f"|lambda|={r} outside annulus of convergence")
    k = np.arange(-f.N, f.N + 1)
    p = lam0 ** k.astype(float)
    value = np.sum(f.coeffs * p)
    dvalue = np.sum(k * f.coeffs * p / lam0)
    return complex(value), complex(dvalue)


def default_grid_size(n: int) -> int:
    """Grid size used for pointwise operations on degree ``n`` loops."""
    return max(8, 4 * n + 4)


def to_samples(f: LoopScalar, m: int | None = None) -> np.ndarray:
    m = default_grid_size(f.N) if m is None else m
    return coeffs_to_samples(f.coeffs, m)


def from_samples(samples: np.ndarray, n: int = DEFAULT_N, rho: float = DEFAULT_RHO) -> LoopScalar:
    """Coefficients of degree ``n`` from grid samples; the aliasing indicator goes to ``dropped``."""
    c, tail = samples_to_coeffs(np.asarray(samples), n)
    return LoopScalar(c, rho, tail)


def sample_transform(obj, n: int | None = None, m: int | None = None, rho: float = DEFAULT_RHO):
    """Switch between the coefficient and the sample representation.

    A :class:`LoopScalar` is mapped to its samples on an ``m``-point grid; an
    array of samples is mapped back to a :class:`LoopScalar` of degree ``n``.
    """
    if isinstance(obj, LoopScalar):
        m = default_grid_size(obj.N) if m is None else m
        if m <= 2 * obj.N:
            raise WienerError(f"grid of {m} points cannot represent degree {obj.N}")
        return to_samples(obj, m)
    samples = np.asarray(obj, dtype=complex)
    n = DEFAULT_N if n is None else n
    return from_samples(samples, n, rho)


def divide(f: LoopScalar, g: LoopScalar, m: int | None = None) -> LoopScalar:
    """Pointwise quotient ``f / g`` computed on the circle grid."""
    f._check(g)
    n = max(f.N, g.N)
    m = default_grid_size(n) if m is None else m
    gs = coeffs_to_samples(g.resize(n).coeffs, m)
    if np.min(np.abs(gs)) == 0:
        raise WienerError("division by a loop vanishing on the circle")
    return from_samples(coeffs_to_samples(f.resize(n).coeffs, m) / gs, n, f.rho)
