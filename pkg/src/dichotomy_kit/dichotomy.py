"""Finite sections of the admissibility operator and what they reveal.

The operator ``(T x)_n = c_n x_n - A_{n-1} x_{n-1}`` is assembled on a window
of equation rows ``[a, b]``.  With ``c_n = 1`` it is the plain difference
operator; with ``c_n = z`` left of a pivot and ``1/z`` right of it, it is the
rescaled family used to locate the dichotomy rates.

By default the window has a *free* left boundary: the unknowns are
``x_{a-1}, ..., x_b`` (one block more than equations) and solves return the
minimum-norm solution in weighted coordinates.  Stable directions then decay
into the window from the left and unstable ones leave it on the right, so the
solution inside the window tracks the bi-infinite one up to an error that
decays geometrically with the distance to either end.  The Dirichlet section
(``x_{a-1} = 0``) is available as ``boundary="zero"``.

All linear algebra goes through the Gram matrix ``T T^T`` in weighted
coordinates, which is block tridiagonal and symmetric positive definite,
so banded Cholesky and banded eigensolvers apply.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import linalg, sparse
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh

from .cocycle import (
    INV_COND_MAX,
    PROJ_TOL,
    VERIFY_TOL,
    Cocycle,
    DichotomyCertificate,
    _restricted_inverse,
    verify_certificate,
)
from .errors import (
    PreconditionError,
    RecoveryError,
    SingularityError,
    UsageError,
)
from .seqspace import SequenceSpaceSpec, lp, space_norm

__all__ = [
    "BlockVector",
    "WindowedOperator",
    "InvertibilityReport",
    "Classification",
    "RateEstimate",
    "EquivalenceReport",
    "assemble",
    "apply",
    "solve",
    "inverse_norm",
    "classify_invertibility",
    "green_solve",
    "recover_projections",
    "extract_rates",
    "margin_for",
    "check_equivalence",
    "INV_NORM_MAX",
    "RATE_TOL",
    "GROWTH_FACTOR",
    "RATE_GROWTH_FACTOR",
    "SERIES_TOL",
]

INV_NORM_MAX = 1e8
RATE_TOL = 1e-3
GROWTH_FACTOR = 1.5
RATE_GROWTH_FACTOR = 2.0
SERIES_TOL = 1e-8
POWER_ITERATIONS = 64
Z_CAP = 1e6
DENSE_BAND_MAX = 800     # Gram sizes up to this use the direct banded eigensolver


@dataclass(frozen=True, eq=False)
class BlockVector:
    """A sequence of vectors in R^d indexed from ``offset``; zero elsewhere."""

    offset: int
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2:
            raise UsageError(f"block vector needs shape (K, d), got {v.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "offset", int(self.offset))

    @property
    def last(self):
        return self.offset + self.values.shape[0] - 1

    def at(self, n):
        if self.offset <= n <= self.last:
            return self.values[n - self.offset]
        return np.zeros(self.values.shape[1])

    def on(self, lo, hi):
        """Blocks for ``lo..hi`` (zero-filled outside the support)."""
        out = np.zeros((hi - lo + 1, self.values.shape[1]))
        s, e = max(lo, self.offset), min(hi, self.last)
        if s <= e:
            out[s - lo : e - lo + 1] = self.values[s - self.offset : e - self.offset + 1]
        return out

    @classmethod
    def impulse(cls, n, v):
        return cls(n, np.asarray(v, dtype=float)[None, :])


def _inverse_iteration(ab, shift, steps=2):
    """Approximate eigenvector of a symmetric band matrix (upper storage) near ``shift``."""
    u, n = ab.shape[0] - 1, ab.shape[1]
    full = np.zeros((2 * u + 1, n))
    full[: u + 1] = ab
    for k in range(1, u + 1):
        full[u + k, : n - k] = ab[u - k, k:]
    full[u] -= shift
    v = np.random.default_rng(0).standard_normal(n)
    with np.errstate(all="ignore"):
        for _ in range(steps):
            try:
                v = linalg.solve_banded((u, u), full, v, check_finite=False)
            except linalg.LinAlgError:
                # shift hit an eigenvalue exactly; nudge it
                full[u] -= max(abs(shift), 1.0) * 1e-14
                continue
            nv = np.linalg.norm(v)
            if not np.isfinite(nv) or nv == 0:
                break
            v = v / nv
    if not np.all(np.isfinite(v)):
        v = np.random.default_rng(0).standard_normal(n)
    return v


def _band_to_sparse(ab):
    u, n = ab.shape[0] - 1, ab.shape[1]
    diags = [ab[u - k, k:] for k in range(u + 1)] + [ab[u - k, k:] for k in range(1, u + 1)]
    return sparse.diags(diags, list(range(u + 1)) + list(range(-1, -u - 1, -1)), format="csr")


def _gram_extremes(ab, chol):
    """Smallest and largest eigenvalue of a symmetric band matrix (upper storage).

    Small matrices go to the banded LAPACK solver.  Larger ones use Lanczos:
    the top eigenvalue directly and the bottom one as the top eigenvalue of
    the inverse, applied through the banded Cholesky factor ``chol`` (None
    when the factorization failed, i.e. numerically singular).
    """
    n = ab.shape[1]
    if n <= DENSE_BAND_MAX:
        lo = linalg.eigvals_banded(ab, lower=False, select="i", select_range=(0, 0))[0]
        hi = linalg.eigvals_banded(ab, lower=False, select="i", select_range=(n - 1, n - 1))[0]
        return lo, hi
    v0 = np.ones(n)
    try:
        # only the condition number uses hi, so a loose tolerance is enough
        hi = eigsh(_band_to_sparse(ab), k=1, which="LA", v0=v0, tol=1e-4, return_eigenvectors=False)[0]
        if chol is None:
            return 0.0, hi
        inv = LinearOperator((n, n), matvec=lambda x: linalg.cho_solve_banded((chol, False), x), dtype=float)
        top = eigsh(inv, k=1, which="LA", v0=v0, tol=1e-12, return_eigenvectors=False)[0]
    except ArpackNoConvergence:
        lo = linalg.eigvals_banded(ab, lower=False, select="i", select_range=(0, 0))[0]
        hi = linalg.eigvals_banded(ab, lower=False, select="i", select_range=(n - 1, n - 1))[0]
        return lo, hi
    return (1.0 / top if top > 0 else 0.0), hi


def block_space_norm(space, blocks):
    """``|| (|v_n|_2)_n ||_B`` for already-weighted blocks of shape (K, d)."""
    return space_norm(space, np.linalg.norm(np.asarray(blocks), axis=-1))


def _as_rows(op, y):
    if isinstance(y, BlockVector):
        return y.on(op.a, op.b)
    y = np.asarray(y, dtype=float)
    if y.ndim == 1 and op.dim == 1:
        y = y[:, None]
    if y.shape != (op.rows, op.dim):
        raise UsageError(f"right-hand side must have shape {(op.rows, op.dim)}, got {y.shape}")
    return y


@dataclass(frozen=True, eq=False)
class WindowedOperator:
    """Finite section of ``T`` (``z = 1``) or of its rescaling on rows ``[a, b]``."""

    cocycle: Cocycle
    space: SequenceSpaceSpec
    a: int
    b: int
    z: float = 1.0
    pivot: int | None = None
    boundary: str = "free"
    inv_cond_max: float = INV_COND_MAX

    @property
    def window(self):
        return (self.a, self.b)

    @property
    def dim(self):
        return self.cocycle.dim

    @property
    def rows(self):
        return self.b - self.a + 1

    @property
    def first_unknown(self):
        return self.a - 1 if self.boundary == "free" else self.a

    @property
    def unknowns(self):
        return self.b - self.first_unknown + 1

    @cached_property
    def coefficients(self):
        n = np.arange(self.a, self.b + 1)
        piv = self.b if self.pivot is None else self.pivot
        return np.where(n <= piv, self.z, 1.0 / self.z)

    @cached_property
    def couplings(self):
        """``S_n = L_n A_{n-1} L_{n-1}^{-1}`` for rows ``a..b`` (zero where unused)."""
        c = self.cocycle
        d = self.dim
        S = np.zeros((self.rows, d, d))
        lo = self.a if self.boundary == "free" else self.a + 1
        if lo <= self.b:
            L = c.norms.roots(lo, self.b)
            Linv = c.norms.inv_roots(lo - 1, self.b - 1)
            S[lo - self.a :] = L @ c.maps_between(lo - 1, self.b) @ Linv
        return S

    # weighted-coordinate maps
    def T_tilde(self, xt):
        """Apply the weighted operator to unknown blocks of shape (unknowns, d, ...)."""
        c = self.coefficients.reshape((-1,) + (1,) * (xt.ndim - 1))
        off = 1 if self.boundary == "free" else 0
        cur = xt[off:]
        prev = np.zeros_like(cur)
        prev[1 - off :] = xt[: self.rows - 1 + off]
        return c * cur - np.einsum("nij,nj...->ni...", self.couplings, prev)

    def T_tilde_adjoint(self, w):
        """Transpose of :meth:`T_tilde`, from row blocks to unknown blocks."""
        c = self.coefficients.reshape((-1,) + (1,) * (w.ndim - 1))
        off = 1 if self.boundary == "free" else 0
        out = np.zeros((self.unknowns,) + w.shape[1:])
        out[off:] += c * w
        back = -np.einsum("nji,nj...->ni...", self.couplings, w)
        # row n couples to unknown n-1
        out[: self.rows - 1 + off] += back[1 - off :]
        return out

    @cached_property
    def gram_band(self):
        """Upper banded storage of ``T~ T~^T`` (half-bandwidth ``2d - 1``)."""
        K, d = self.rows, self.dim
        S = self.couplings
        c = self.coefficients
        Dg = (c**2)[:, None, None] * np.eye(d) + S @ np.swapaxes(S, 1, 2)
        E = -c[:-1, None, None] * np.swapaxes(S[1:], 1, 2)
        u = 2 * d - 1
        ab = np.zeros((u + 1, K * d))
        k = np.arange(K)
        for p in range(d):
            for q in range(d):
                if p <= q:
                    ab[u + p - q, k * d + q] = Dg[:, p, q]
                if K > 1:
                    ab[u + p - q - d, (k[1:]) * d + q] = E[:, p, q]
        return ab

    @cached_property
    def extreme_singular_values(self):
        """``(sigma_min, sigma_max)`` of the weighted section.

        The smallest Gram eigenvalue cannot resolve ``sigma_min`` below about
        ``sqrt(eps) sigma_max``; the residual ``|T~^T w|`` of its eigenvector is
        an upper bound for ``sigma_min`` that stays accurate down to about
        ``eps sigma_max``, so the smaller of the two is used.
        """
        ab = self.gram_band
        n = ab.shape[1]
        if n == 1:
            v = math.sqrt(max(ab[-1, 0], 0.0))
            return v, v
        lo, hi = _gram_extremes(ab, self._cholesky)
        w = _inverse_iteration(ab, lo).reshape(self.rows, self.dim)
        resid = float(np.linalg.norm(self.T_tilde_adjoint(w)) / np.linalg.norm(w))
        return min(math.sqrt(max(lo, 0.0)), resid), math.sqrt(max(hi, 0.0))

    @cached_property
    def _cholesky(self):
        try:
            return linalg.cholesky_banded(self.gram_band, lower=False)
        except linalg.LinAlgError:
            return None

    @property
    def condition(self):
        smin, smax = self.extreme_singular_values
        return smax / smin if smin > 0 else math.inf

    @cached_property
    def _factor(self):
        cond = self.condition
        if not cond <= self.inv_cond_max:
            raise SingularityError(f"finite section is singular (condition {cond:.3g})", cond)
        if self._cholesky is None:
            raise SingularityError("finite section is singular (Cholesky failed)", math.inf)
        return self._cholesky

    def solve_tilde(self, yt):
        """Minimum-norm solution in weighted coordinates; ``yt`` has shape (rows, d, ...)."""
        K, d = self.rows, self.dim
        rhs = yt.reshape(K * d, -1)
        w = linalg.cho_solve_banded((self._factor, False), rhs)
        w = w.reshape(yt.shape)
        return self.T_tilde_adjoint(w)

    def weight_rows(self, y):
        L = self.cocycle.norms.roots(self.a, self.b)
        return np.einsum("nij,nj...->ni...", L, y)

    def unweight_unknowns(self, xt):
        Linv = self.cocycle.norms.inv_roots(self.first_unknown, self.b)
        return np.einsum("nij,nj...->ni...", Linv, xt)

    def weight_unknowns(self, x):
        L = self.cocycle.norms.roots(self.first_unknown, self.b)
        return np.einsum("nij,nj...->ni...", L, x)

    def dense_pinv_tilde(self):
        """Explicit weighted (pseudo-)inverse, shape (unknowns*d, rows*d)."""
        K, d = self.rows, self.dim
        eye = np.eye(K * d).reshape(K, d, K * d)
        X = self.solve_tilde(eye)
        return X.reshape(self.unknowns * d, K * d)


def assemble(c, space, window=None, z=1.0, pivot=None, boundary="free", inv_cond_max=INV_COND_MAX):
    """Assemble the finite section on equation rows ``window = (a, b)``.

    ``c_n = z`` for ``n <= pivot`` and ``1/z`` beyond; the default pivot is the
    window midpoint.  With the free boundary the cocycle must also cover
    ``a - 1``.
    """
    if boundary not in ("free", "zero"):
        raise UsageError(f"unknown boundary policy {boundary!r}")
    if window is None:
        window = (c.n_min + 1, c.n_max) if boundary == "free" else (c.n_min, c.n_max)
    a, b = int(window[0]), int(window[1])
    first = a - 1 if boundary == "free" else a
    if b < a or first < c.n_min or b > c.n_max:
        raise UsageError(f"window [{a}, {b}] does not fit cocycle window {c.window} ({boundary} boundary)")
    if not (z >= 1 and math.isfinite(z)):
        raise UsageError(f"rescaling parameter must be a finite z >= 1, got {z}")
    if pivot is None:
        pivot = (a + b) // 2
    if not (a <= pivot <= b):
        raise UsageError(f"pivot {pivot} outside window [{a}, {b}]")
    return WindowedOperator(c, space, a, b, float(z), int(pivot), boundary, inv_cond_max)


def apply(op, x):
    """``(T x)_n`` for ``n`` in the window.

    ``x`` may be a :class:`BlockVector` or an array over the unknowns; an array
    over the rows only (one block short for the free boundary) is read with
    ``x_{a-1} = 0``.
    """
    if isinstance(x, BlockVector):
        xs = x.on(op.first_unknown, op.b)
    else:
        xs = np.asarray(x, dtype=float)
        if xs.ndim == 1:
            xs = xs[:, None] if op.dim == 1 else xs
        if xs.shape[0] == op.rows and op.boundary == "free":
            xs = np.concatenate((np.zeros((1, op.dim)), xs))
        if xs.shape != (op.unknowns, op.dim):
            raise UsageError(f"x must have shape {(op.unknowns, op.dim)}, got {xs.shape}")
    c = op.cocycle
    coef = op.coefficients[:, None]
    off = 1 if op.boundary == "free" else 0
    cur = xs[off:]
    out = coef * cur
    if op.boundary == "free":
        maps = c.maps_between(op.a - 1, op.b)
        out = out - np.einsum("nij,nj->ni", maps, xs[:-1])
    elif op.rows > 1:
        maps = c.maps_between(op.a, op.b)
        out[1:] -= np.einsum("nij,nj->ni", maps, xs[:-1])
    return out


def solve(op, y, return_residual=False):
    """Solve ``T x = y`` on the window (minimum weighted norm for the free boundary).

    Returns a :class:`BlockVector` over the unknowns; with ``return_residual``
    also the Euclidean residual ``|T x - y|``.
    """
    y = _as_rows(op, y)
    xt = op.solve_tilde(op.weight_rows(y))
    x = BlockVector(op.first_unknown, op.unweight_unknowns(xt))
    if return_residual:
        return x, float(np.linalg.norm(apply(op, x) - y))
    return x


@dataclass
class InvertibilityReport:
    invertible: bool
    inverse_norm: float
    method: str
    threshold_used: float
    condition: float = math.nan

    def to_json(self):
        return {
            "invertible": self.invertible,
            "inverse_norm": self.inverse_norm if math.isfinite(self.inverse_norm) else None,
            "method": self.method,
            "threshold_used": self.threshold_used,
        }


def _block_induced_bound(Tinv, op, space):
    """Induced l1 / linf norm bound from operator norms of the d x d blocks."""
    m, d = op.unknowns, op.dim
    G = Tinv.reshape(m, d, op.rows, d)
    if d == 1:
        B = np.abs(G[:, 0, :, 0])
    else:
        B = np.linalg.norm(np.transpose(G, (0, 2, 1, 3)), ord=2, axis=(2, 3))
    if space.kind == "linf":
        return float(B.sum(axis=1).max())
    return float(B.sum(axis=0).max())


def _iterative_lower_bound(Tinv, op, space, iterations=POWER_ITERATIONS, seed=0):
    d = op.dim
    alpha = space.char_norm_alpha
    cols = Tinv.T.reshape(op.rows * d, op.unknowns, d)
    best = max(block_space_norm(space, col) for col in cols) / alpha
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(op.rows * d)
    for _ in range(iterations):
        v = Tinv.T @ (Tinv @ v)
        nv = np.linalg.norm(v)
        if nv == 0:
            break
        v = v / nv
        y = v.reshape(op.rows, d)
        x = (Tinv @ v).reshape(op.unknowns, d)
        best = max(best, block_space_norm(space, x) / block_space_norm(space, y))
    return float(best)


def inverse_norm(op, space=None, inv_norm_max=INV_NORM_MAX):
    """Norm of the (pseudo-)inverse of the section in the weighted space.

    l2: ``1/sigma_min`` (exact).  l1, linf: the explicit inverse is formed and
    the induced norm is bounded by block row/column sums of spectral norms
    (exact for d = 1).  Other spaces: a lower bound from impulse responses and
    power iteration, flagged ``iterative_estimate``.
    """
    space = op.space if space is None else space
    if space.is_l2:
        method = "exact_l2_svd"
    elif space.kind in ("linf",) or (space.kind == "lp" and space.p == 1):
        method = "exact_l1_linf_inverse"
    else:
        method = "iterative_estimate"
    smin, smax = op.extreme_singular_values
    cond = smax / smin if smin > 0 else math.inf
    if not cond <= op.inv_cond_max:
        return InvertibilityReport(False, math.inf, method, inv_norm_max, cond)
    try:
        op._factor
    except SingularityError:
        return InvertibilityReport(False, math.inf, method, inv_norm_max, cond)
    if method == "exact_l2_svd":
        value = 1.0 / smin
    else:
        Tinv = op.dense_pinv_tilde()
        if method == "exact_l1_linf_inverse":
            value = _block_induced_bound(Tinv, op, space)
        else:
            value = _iterative_lower_bound(Tinv, op, space)
    return InvertibilityReport(bool(value < inv_norm_max), float(value), method, inv_norm_max, cond)


def half_window(window):
    """Centered subwindow of half the length."""
    a, b = window
    length = b - a + 1
    half = max(length // 2, 1)
    mid = (a + b) // 2
    lo = mid - half // 2
    return (lo, lo + half - 1)


@dataclass
class Classification:
    """Outcome of the window-doubling test."""

    invertible: bool
    inverse_norm: float
    inverse_norm_half: float
    growth_ratio: float
    growth_factor: float
    method: str
    window: tuple
    report: InvertibilityReport

    def to_json(self):
        def fin(v):
            return v if math.isfinite(v) else None

        return {
            "invertible": self.invertible,
            "inverse_norm": fin(self.inverse_norm),
            "inverse_norm_half": fin(self.inverse_norm_half),
            "growth_ratio": fin(self.growth_ratio),
            "growth_factor": self.growth_factor,
            "method": self.method,
            "window": list(self.window),
            "threshold_used": self.report.threshold_used,
        }


def classify_invertibility(
    c,
    space,
    window=None,
    z=1.0,
    pivot=None,
    growth_factor=GROWTH_FACTOR,
    inv_norm_max=INV_NORM_MAX,
    boundary="free",
    inv_cond_max=INV_COND_MAX,
):
    """Decide invertibility from the window and its centered half.

    Not invertible when the section is singular, the inverse norm reaches
    ``inv_norm_max``, or it grows by ``growth_factor`` or more from the half
    window to the full one.
    """
    op = assemble(c, space, window, z, pivot, boundary, inv_cond_max)
    full = inverse_norm(op, space, inv_norm_max)
    hw = half_window(op.window)
    hpiv = min(max(op.pivot, hw[0]), hw[1])
    half = inverse_norm(assemble(c, space, hw, z, hpiv, boundary, inv_cond_max), space, inv_norm_max)
    if math.isfinite(full.inverse_norm) and math.isfinite(half.inverse_norm):
        ratio = full.inverse_norm / half.inverse_norm
    else:
        ratio = math.inf
    ok = full.invertible and half.invertible and ratio < growth_factor
    return Classification(
        bool(ok), full.inverse_norm, half.inverse_norm, ratio, growth_factor, full.method, op.window, full
    )


# --------------------------------------------------------------------------- Green series


def _as_core(cert, y):
    if isinstance(y, BlockVector):
        return y.on(cert.n_min, cert.n_max)
    y = np.asarray(y, dtype=float)
    K = cert.projections.shape[0]
    if y.ndim == 1 and cert.dim == 1:
        y = y[:, None]
    if y.shape != (K, cert.dim):
        raise UsageError(f"right-hand side must have shape {(K, cert.dim)}, got {y.shape}")
    return y


def green_solve(c, cert, y, verify=True, verify_tol=VERIFY_TOL, inv_cond_max=INV_COND_MAX):
    """Solve ``x_n - A_{n-1} x_{n-1} = y_n`` from the dichotomy series.

    ``y`` lives on the certificate core (zero outside).  The stable part sums
    forward along ``P``, the unstable part backward through the inverses of
    ``A_n`` on ``ker P_n``; both are evaluated by recursion with
    re-projection.  Returns a :class:`BlockVector` on the core.
    """
    if verify:
        rep = verify_certificate(c, cert, verify_tol, inv_cond_max)
        if not rep.passes:
            raise PreconditionError(f"certificate does not verify: {rep.residuals}")
    y = _as_core(cert, y)
    P = cert.projections
    K, d = y.shape
    eye = np.eye(d)
    maps = c.maps_between(cert.n_min, cert.n_max)
    xs = np.zeros((K, d))
    acc = np.zeros(d)
    for k in range(K):
        prev = maps[k - 1] @ acc if k > 0 else np.zeros(d)
        acc = P[k] @ (prev + y[k])
        xs[k] = acc
    xu = np.zeros((K, d))
    acc = np.zeros(d)
    for k in range(K - 2, -1, -1):
        B, _ = _restricted_inverse(maps[k], P[k], P[k + 1], inv_cond_max)
        acc = B @ (acc - (eye - P[k + 1]) @ y[k + 1])
        xu[k] = acc
    return BlockVector(cert.n_min, xs + xu)


def green_residual(c, cert, x, y):
    """``max |x_n - A_{n-1} x_{n-1} - y_n|_n`` over core rows after the first."""
    y = _as_core(cert, y)
    xv = x.on(cert.n_min, cert.n_max)
    maps = c.maps_between(cert.n_min, cert.n_max)
    r = xv[1:] - np.einsum("nij,nj->ni", maps, xv[:-1]) - y[1:]
    L = c.norms.roots(cert.n_min + 1, cert.n_max)
    return float(np.max(np.linalg.norm(np.einsum("nij,nj->ni", L, r), axis=1))) if r.size else 0.0


# --------------------------------------------------------------------------- recovery


def _weighted_residuals(c, lo, hi, P):
    roots = c.norms.roots(lo, hi)
    inv = c.norms.inv_roots(lo, hi)
    idem = np.linalg.norm(roots @ (P @ P - P) @ inv, ord=2, axis=(1, 2))
    if P.shape[0] > 1:
        maps = c.maps_between(lo, hi)
        inter = np.linalg.norm(roots[1:] @ (maps @ P[:-1] - P[1:] @ maps) @ inv[:-1], ord=2, axis=(1, 2))
    else:
        inter = np.zeros(1)
    ranks = [int(round(np.trace(p))) for p in P]
    return {
        "idempotence": float(idem.max()),
        "intertwining": float(inter.max()),
        "rank_variation": int(max(ranks) - min(ranks)),
        "rank": ranks[0],
    }


def recover_projections(op, core, proj_tol=PROJ_TOL, check=True):
    """Stable projections ``P_n`` on ``core`` from impulse responses.

    Column ``i`` of ``P_n`` is ``x_n`` where ``T x = delta_n e_i``.  Idempotence,
    intertwining and rank constancy are checked against ``proj_tol``; a
    :class:`RecoveryError` carries the residuals on failure.
    """
    if abs(op.z - 1.0) > 0:
        raise UsageError("projection recovery needs the unscaled operator (z = 1)")
    lo, hi = int(core[0]), int(core[1])
    if not (op.a <= lo <= hi <= op.b):
        raise UsageError(f"core [{lo}, {hi}] not inside operator window {op.window}")
    try:
        op._factor
    except SingularityError as exc:
        raise PreconditionError(f"operator is not invertible (condition {exc.condition:.3g})") from exc
    d = op.dim
    Kc = hi - lo + 1
    rhs = np.zeros((op.rows, d, Kc, d))
    idx = np.arange(Kc)
    for i in range(d):
        rhs[lo - op.a + idx, i, idx, i] = 1.0
    rhs = rhs.reshape(op.rows, d, Kc * d)
    xt = op.solve_tilde(op.weight_rows(rhs))
    x = op.unweight_unknowns(xt).reshape(op.unknowns, d, Kc, d)
    off = lo - op.first_unknown
    P = x[off + idx, :, idx, :]  # (Kc, d, d): row n, component, column i
    residuals = _weighted_residuals(op.cocycle, lo, hi, P)
    if check and (
        residuals["idempotence"] > proj_tol
        or residuals["intertwining"] > proj_tol
        or residuals["rank_variation"] != 0
    ):
        raise RecoveryError("recovered projections exceed proj_tol", residuals)
    return P, residuals


# --------------------------------------------------------------------------- rates


@dataclass
class RateEstimate:
    lambda_hat: float
    mu_hat: float
    D_hat: float
    z_star: float
    z_guaranteed: float
    inverse_norm: float
    evaluations: int
    capped: bool = False

    def to_json(self):
        return {
            "lambda_hat": self.lambda_hat,
            "mu_hat": self.mu_hat,
            "D_hat": self.D_hat,
            "z_star": self.z_star,
            "z_guaranteed": self.z_guaranteed,
            "inverse_norm": self.inverse_norm,
            "capped": self.capped,
        }


def default_pivots(window):
    a, b = window
    mid = (a + b) // 2
    step = (b - a + 1) // 8
    return sorted({mid - step, mid, mid + step})


def rescaled_invertible(c, window, z, pivots, inv_norm_max=INV_NORM_MAX, growth=RATE_GROWTH_FACTOR):
    """Whether the rescaled sections stay invertible at ``z`` for all pivots (l2).

    Each pivot is tested on the largest window centered at it, so that the
    doubling test compares segments of equal proportions on both sides.
    """
    l2 = lp(2)
    a, b = window
    for piv in pivots:
        r = min(piv - a, b - piv)
        if r < 1:
            raise UsageError(f"pivot {piv} too close to the window ends {window}")
        cl = classify_invertibility(c, l2, (piv - r, piv + r), z, piv, growth, inv_norm_max)
        if not cl.invertible:
            return False
    return True


def extract_rates(
    c,
    space=None,
    window=None,
    pivot_set=None,
    rate_tol=RATE_TOL,
    inv_norm_max=INV_NORM_MAX,
    growth=RATE_GROWTH_FACTOR,
):
    """Dichotomy rates from the largest ``z`` keeping the rescaled sections invertible.

    The search runs in l2 (invertibility does not depend on the admissible
    space).  Starting from ``z0 = 1 + 1/|T^-1|``, which is always invertible,
    ``z - 1`` is doubled until invertibility is lost and the bracket is then
    bisected to relative width ``rate_tol``.  Returns
    ``lambda_hat = 1/z*``, ``mu_hat = z*`` and ``D_hat = N^2 D'/t`` at
    ``z = 1 + 1/(4|T^-1|)``, ``t = 1/z``, ``D' = 1/(|T^-1|^-1 - (z - 1))``.
    """
    l2 = lp(2)
    space = l2 if space is None else space
    op = assemble(c, l2, window)
    window = op.window
    base = inverse_norm(op, l2, inv_norm_max)
    cl = classify_invertibility(c, l2, window, inv_norm_max=inv_norm_max)
    if not (base.invertible and cl.invertible):
        raise PreconditionError("the operator is not invertible on this window; no rates to extract")
    pivots = default_pivots(window) if pivot_set is None else list(pivot_set)
    inv = base.inverse_norm
    z0 = 1.0 + 1.0 / inv
    evals = 0

    def ok(z):
        nonlocal evals
        evals += 1
        return rescaled_invertible(c, window, z, pivots, inv_norm_max, growth)

    lo = z0
    step = z0 - 1.0
    hi = None
    capped = False
    while True:
        cand = 1.0 + 2.0 * step
        if cand >= Z_CAP:
            if ok(Z_CAP):
                lo, capped = Z_CAP, True
                break
            hi = Z_CAP
            break
        if ok(cand):
            lo, step = cand, cand - 1.0
        else:
            hi = cand
            break
    if not capped:
        while (hi - lo) > rate_tol * lo:
            mid = 0.5 * (lo + hi)
            if ok(mid):
                lo = mid
            else:
                hi = mid
    z_star = lo
    z_mid = 1.0 + 1.0 / (4.0 * inv)
    t = 1.0 / z_mid
    D_prime = 1.0 / (1.0 / inv - (z_mid - 1.0))
    N = space.shift_constant_N
    D_hat = N * N * D_prime / t
    return RateEstimate(1.0 / z_star, z_star, D_hat, z_star, z0, inv, evals, capped)


def margin_for(D_hat, lam, mu, proj_tol=PROJ_TOL):
    """Distance from the window ends that keeps the tail ``D rho^M`` below ``proj_tol``."""
    rho = max(lam, 1.0 / mu)
    if not (0 < rho < 1):
        raise UsageError(f"rates must satisfy 0 < lambda < 1 < mu (got {lam}, {mu})")
    return max(1, int(math.ceil(math.log(proj_tol / max(D_hat, 1.0)) / math.log(rho))))


def _fit_D(c, P, lo, lam, mu, verify_tol, inv_cond_max):
    """Smallest D (>= 1) for which the growth inequalities hold with the given rates."""
    probe = DichotomyCertificate(lo, P, 1.0, lam, mu)
    rep = verify_certificate(c, probe, verify_tol, inv_cond_max)
    r = rep.residuals
    return max(1.0, 1.0 + r["stable_excess"], 1.0 + r["unstable_excess"]) * (1.0 + verify_tol)


@dataclass
class EquivalenceReport:
    classification: Classification
    direction_a: dict = field(default_factory=dict)
    direction_b: dict = field(default_factory=dict)
    certificate: DichotomyCertificate | None = None
    rates: RateEstimate | None = None

    @property
    def exercised(self):
        return [k for k, v in (("a", self.direction_a), ("b", self.direction_b)) if v.get("exercised")]

    @property
    def passes(self):
        parts = [d["passes"] for d in (self.direction_a, self.direction_b) if d.get("exercised")]
        return bool(parts) and all(parts)

    def to_json(self):
        return {
            "classification": self.classification.to_json(),
            "direction_a": self.direction_a,
            "direction_b": self.direction_b,
            "rates": self.rates.to_json() if self.rates else None,
            "passes": self.passes,
        }


def recover_certificate(
    c,
    window=None,
    rates=None,
    rate_tol=RATE_TOL,
    proj_tol=PROJ_TOL,
    verify_tol=VERIFY_TOL,
    inv_norm_max=INV_NORM_MAX,
    inv_cond_max=INV_COND_MAX,
    core=None,
):
    """Rates, margin, impulse-response projections and constants in one pass.

    Returns ``(certificate, info)``; ``info`` holds the rate estimate, the core
    window, the recovery residuals and whether ``D_hat`` alone verified.
    """
    l2 = lp(2)
    op = assemble(c, l2, window, inv_cond_max=inv_cond_max)
    if rates is None:
        rates = extract_rates(c, l2, op.window, rate_tol=rate_tol, inv_norm_max=inv_norm_max)
    M = margin_for(rates.D_hat, rates.lambda_hat, rates.mu_hat, proj_tol)
    if core is None:
        core = (op.a + M, op.b - M)
    if core[1] < core[0]:
        raise PreconditionError(
            f"window {op.window} too short for margin {M}; need at least {2 * M + 1} rows"
        )
    P, rec = recover_projections(op, core, proj_tol)
    lam = min(rates.lambda_hat * (1.0 + rate_tol), 1.0 - 1e-12)
    mu = max(rates.mu_hat * (1.0 - rate_tol), 1.0 + 1e-12)
    D_fit = _fit_D(c, P, core[0], lam, mu, verify_tol, inv_cond_max)
    D = max(rates.D_hat, D_fit)
    cert = DichotomyCertificate(core[0], P, D, lam, mu)
    info = {
        "rates": rates,
        "margin": M,
        "core": tuple(core),
        "recovery": rec,
        "D_fit": D_fit,
        "D_hat_sufficient": bool(rates.D_hat >= D_fit),
    }
    return cert, info


def check_equivalence(
    c,
    space=None,
    window=None,
    certificate=None,
    n_rhs=10,
    seed=0,
    series_tol=SERIES_TOL,
    rate_tol=RATE_TOL,
    proj_tol=PROJ_TOL,
    verify_tol=VERIFY_TOL,
    inv_norm_max=INV_NORM_MAX,
    growth_factor=GROWTH_FACTOR,
    inv_cond_max=INV_COND_MAX,
):
    """Exercise both implications between dichotomy and invertibility.

    (b) invertible section -> recovered certificate that verifies.
    (a) certificate (supplied, else the recovered one) -> finite inverse norm and
    agreement of the Green series with the direct solve on ``n_rhs`` random
    right-hand sides supported in the core (relative error <= ``series_tol``).
    """
    space = lp(2) if space is None else space
    cl = classify_invertibility(
        c, space, window, growth_factor=growth_factor, inv_norm_max=inv_norm_max, inv_cond_max=inv_cond_max
    )
    report = EquivalenceReport(cl)
    window = cl.window
    if not cl.invertible:
        report.direction_b = {"exercised": True, "passes": False, "reason": "not invertible"}
    else:
        try:
            cert, info = recover_certificate(
                c, window, None, rate_tol, proj_tol, verify_tol, inv_norm_max, inv_cond_max
            )
        except (PreconditionError, RecoveryError, SingularityError) as exc:
            report.direction_b = {"exercised": True, "passes": False, "reason": str(exc)}
            if isinstance(exc, RecoveryError):
                report.direction_b["residuals"] = exc.residuals
        else:
            rep = verified = verify_certificate(c, cert, verify_tol, inv_cond_max)
            report.rates = info["rates"]
            report.certificate = cert
            report.direction_b = {
                "exercised": True,
                "passes": rep.passes,
                "core": list(info["core"]),
                "margin": info["margin"],
                "D": cert.D,
                "lambda": cert.lam,
                "mu": cert.mu,
                "D_hat_sufficient": info["D_hat_sufficient"],
                "recovery": info["recovery"],
                "residuals": rep.residuals,
            }
    cert = certificate if certificate is not None else report.certificate
    if cert is None:
        report.direction_a = {"exercised": False, "passes": False, "reason": "no certificate"}
        return report
    if certificate is None:
        rep = verified
    else:
        rep = verify_certificate(c, cert, verify_tol, inv_cond_max)
    if not rep.passes:
        report.direction_a = {
            "exercised": True,
            "passes": False,
            "reason": "certificate does not verify",
            "residuals": rep.residuals,
        }
        return report
    op = assemble(c, space, window, inv_cond_max=inv_cond_max)
    finite = math.isfinite(cl.inverse_norm)
    rng = np.random.default_rng(seed)
    L = c.norms.roots(cert.n_min, cert.n_max)
    worst = 0.0
    worst_res = 0.0
    solved = finite
    for _ in range(n_rhs if finite else 0):
        yv = rng.standard_normal((cert.projections.shape[0], c.dim))
        y = BlockVector(cert.n_min, yv)
        xg = green_solve(c, cert, y, verify=False, inv_cond_max=inv_cond_max)
        try:
            xd = solve(op, y)
        except SingularityError:
            solved = False
            break
        diff = np.einsum("nij,nj->ni", L, xg.values - xd.on(cert.n_min, cert.n_max))
        ref = np.einsum("nij,nj->ni", L, xd.on(cert.n_min, cert.n_max))
        worst = max(worst, float(np.linalg.norm(diff) / max(np.linalg.norm(ref), 1e-300)))
        yn = float(np.linalg.norm(np.einsum("nij,nj->ni", L, yv)))
        worst_res = max(worst_res, green_residual(c, cert, xg, y) / yn)
    report.direction_a = {
        "exercised": True,
        "passes": bool(finite and solved and worst <= series_tol and worst_res <= series_tol),
        "inverse_norm_finite": finite,
        "green_vs_direct": worst,
        "green_residual": worst_res,
        "supplied_certificate": certificate is not None,
    }
    return report
