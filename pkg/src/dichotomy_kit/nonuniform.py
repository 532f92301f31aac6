"""Nonuniform hyperbolicity along sampled trajectories.

A trajectory is given by derivative matrices ``df_k`` (from the tangent space
at ``x_k`` to the one at ``x_{k+1}``) and Riemannian inner products ``G_k``.
From a splitting ``E^s + E^u`` and rates ``lam < 1 < mu`` the adapted norm

    |v|^eps = max(|v^s|^eps, |v^u|^eps),
    |v^s|^eps = sup_{j>=0} lam^-j e^-eps j |df^j v^s| + sup_{j<0} e^eps j A^j |df^j v^s|,
    |v^u|^eps = sup_{j<=0} mu^-j e^eps j |df^j v^u| + sup_{j>0} A^-j e^-eps j |df^j v^u|,

is evaluated with the sups taken over all available data.  Iterates are
computed in coordinates of Riemannian-orthonormal bases of ``E^s`` and
``E^u`` (the restricted maps), never by pushing full vectors, so rounding
never leaks into the expanding direction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cocycle import INV_COND_MAX, Cocycle, NormSequence, generate_example, range_basis
from .dichotomy import (
    INV_NORM_MAX,
    PROJ_TOL,
    RATE_TOL,
    assemble,
    classify_invertibility,
    extract_rates,
    margin_for,
    recover_projections,
)
from .errors import (
    ConfigurationError,
    DomainError,
    PreconditionError,
    RecoveryError,
    ShortWindowError,
    UsageError,
)
from .seqspace import lp

__all__ = [
    "TrajectoryData",
    "HyperbolicityData",
    "AdaptedNorm",
    "TrajectoryCertificate",
    "CKReport",
    "epsilon0",
    "projection_bound_Z",
    "theory_bound_D",
    "build_adapted_norm",
    "assemble_Rx",
    "certify_trajectory",
    "recover_splitting",
    "estimate_CK",
    "check_adapted_norm",
    "generate_trajectory",
    "SPLIT_TOL",
    "NORM_TOL",
    "D_SLACK",
]

SPLIT_TOL = 1e-8
NORM_TOL = 1e-10
D_SLACK = 1.05
EPS0_FRACTION = 0.5


def _g_orthonormal(V, G):
    """Columns of ``V`` made orthonormal for the inner product ``G``."""
    if V.shape[1] == 0:
        return V
    R = np.linalg.cholesky(V.T @ G @ V)
    return V @ np.linalg.inv(R).T


@dataclass(frozen=True, eq=False)
class TrajectoryData:
    """Derivatives along ``x_{n_min}, ..., x_{n_max}`` with fiber inner products."""

    n_min: int
    derivs: np.ndarray
    inner: np.ndarray | None = None
    A_bound: float | None = None
    points: tuple | None = None
    inv_cond_max: float = INV_COND_MAX
    norms: NormSequence = field(init=False, repr=False)

    def __post_init__(self):
        D = np.array(self.derivs, dtype=float)
        if D.ndim != 3 or D.shape[1] != D.shape[2] or D.shape[0] < 1:
            raise ConfigurationError(f"derivatives must have shape (K-1, d, d), got {D.shape}")
        if not np.all(np.isfinite(D)):
            raise ConfigurationError("derivatives must be finite")
        D.setflags(write=False)
        object.__setattr__(self, "derivs", D)
        object.__setattr__(self, "n_min", int(self.n_min))
        K, d = D.shape[0] + 1, D.shape[1]
        if self.inner is None:
            ns = NormSequence.flat(self.n_min, self.n_min + K - 1, d)
        else:
            ns = NormSequence.spd(self.n_min, self.n_min + K - 1, np.asarray(self.inner, dtype=float))
        object.__setattr__(self, "norms", ns)
        L, Linv = ns.roots(), ns.inv_roots()
        M = L[1:] @ D @ Linv[:-1]
        s = np.linalg.svd(M, compute_uv=False)
        if np.any(s[:, -1] <= 0) or np.max(s[:, 0] / s[:, -1]) > self.inv_cond_max:
            raise ConfigurationError("derivatives must be invertible (condition above inv_cond_max)")
        bound = float(max(s[:, 0].max(), (1.0 / s[:, -1]).max()))
        A = bound if self.A_bound is None else float(self.A_bound)
        if not (A >= 1 and math.isfinite(A)):
            raise ConfigurationError(f"A_bound must be a finite number >= 1, got {A}")
        if A < bound * (1 - 1e-12):
            raise ConfigurationError(f"A_bound {A} is below the derivative norm bound {bound}")
        object.__setattr__(self, "A_bound", max(A, 1.0))

    @property
    def n_max(self):
        return self.n_min + self.derivs.shape[0]

    @property
    def dim(self):
        return self.derivs.shape[1]

    @property
    def window(self):
        return (self.n_min, self.n_max)

    def df(self, k):
        if not (self.n_min <= k < self.n_max):
            raise UsageError(f"no derivative at index {k} (window {self.window})")
        return self.derivs[k - self.n_min]

    def gram(self, k):
        return self.norms.gram(k)

    def grams(self, lo, hi):
        L = self.norms.roots(lo, hi)
        return L @ L

    def to_cocycle(self, norms=None):
        return Cocycle(self.n_min, self.derivs, self.norms if norms is None else norms)

    @classmethod
    def from_cocycle(cls, c, A_bound=None):
        inner = None
        if c.norms.kind != "flat":
            L = c.norms.roots()
            inner = L @ L
        return cls(c.n_min, c.maps, inner, A_bound)


def generate_trajectory(kind, window, A_bound=None, **params):
    """Trajectory version of :func:`generate_example` (Euclidean fibers)."""
    c = generate_example(kind, window, "flat", **params)
    return TrajectoryData.from_cocycle(c, A_bound)


@dataclass(eq=False)
class HyperbolicityData:
    """Splitting ``E^s + E^u`` on ``[n_min, n_max]`` with rates and nonuniformity data.

    ``bases[k]`` holds a basis of ``E^s`` in its first ``stable_dim`` columns and
    one of ``E^u`` in the rest, each orthonormal in the fiber inner product.
    """

    n_min: int
    bases: np.ndarray
    stable_dim: int
    lam: float
    mu: float
    epsilon: float = 0.0
    Cfun: np.ndarray | None = None
    Kfun: np.ndarray | None = None
    residuals: dict = field(default_factory=dict)

    def __post_init__(self):
        self.bases = np.asarray(self.bases, dtype=float)
        if self.bases.ndim != 3 or self.bases.shape[1] != self.bases.shape[2]:
            raise ConfigurationError("splitting bases must have shape (K, d, d)")
        if not (0 < self.lam < 1 < self.mu):
            raise ConfigurationError(f"need 0 < lambda < 1 < mu, got {self.lam}, {self.mu}")
        s = np.linalg.svd(self.bases, compute_uv=False)
        if np.any(s[:, -1] <= 1e-12 * s[:, 0]):
            raise ConfigurationError("E^s and E^u do not span the tangent space at some point")

    @property
    def n_max(self):
        return self.n_min + self.bases.shape[0] - 1

    @property
    def dim(self):
        return self.bases.shape[1]

    @property
    def projections(self):
        """Projections onto ``E^s`` along ``E^u``."""
        s = self.stable_dim
        E = np.linalg.inv(self.bases)
        return self.bases[:, :, :s] @ E[:, :s, :]

    @classmethod
    def from_projections(cls, t, n_min, P, lam, mu, epsilon=0.0):
        K = P.shape[0]
        G = t.grams(n_min, n_min + K - 1)
        s = int(round(np.trace(P[0])))
        bases = np.zeros_like(P)
        eye = np.eye(P.shape[1])
        for k in range(K):
            bases[k, :, :s] = _g_orthonormal(range_basis(P[k]), G[k])
            bases[k, :, s:] = _g_orthonormal(range_basis(eye - P[k]), G[k])
        return cls(n_min, bases, s, lam, mu, epsilon)

    @classmethod
    def from_subspaces(cls, t, n_min, Es, Eu, lam, mu, epsilon=0.0):
        """From per-point (or constant) spanning matrices of ``E^s`` and ``E^u``."""
        Es, Eu = np.asarray(Es, dtype=float), np.asarray(Eu, dtype=float)
        K = t.n_max - n_min + 1
        if Es.ndim == 2:
            Es = np.broadcast_to(Es, (K,) + Es.shape)
            Eu = np.broadcast_to(Eu, (K,) + Eu.shape)
        K = Es.shape[0]
        G = t.grams(n_min, n_min + K - 1)
        bases = np.array([np.hstack((_g_orthonormal(Es[k], G[k]), _g_orthonormal(Eu[k], G[k]))) for k in range(K)])
        return cls(n_min, bases, Es.shape[2], lam, mu, epsilon)

    def restrict(self, lo, hi):
        i, j = lo - self.n_min, hi - self.n_min + 1
        sub = lambda a: None if a is None else np.asarray(a)[i:j]
        return HyperbolicityData(
            lo, self.bases[i:j], self.stable_dim, self.lam, self.mu, self.epsilon, sub(self.Cfun), sub(self.Kfun)
        )


def epsilon0(lam, mu, fraction=EPS0_FRACTION):
    """``fraction`` of the largest ``eps`` with ``lam e^eps < 1 < mu e^-eps``."""
    if not (0 < lam < 1 < mu):
        raise DomainError(f"need 0 < lambda < 1 < mu, got {lam}, {mu}")
    return fraction * min(-math.log(lam), math.log(mu))


def effective_A(A, lam, mu):
    """The bound ``A`` enlarged so that ``1/A <= lam`` and ``mu <= A``."""
    return max(float(A), 1.0 / lam, mu)


def projection_bound_Z(lam, mu, eps0, A):
    """``Z = 2A(e^eps0 + 1) / (mu e^-eps0 - lam e^eps0)``."""
    if A < 1:
        raise DomainError(f"A must be >= 1, got {A}")
    den = mu * math.exp(-eps0) - lam * math.exp(eps0)
    if not (lam * math.exp(eps0) < 1 < mu * math.exp(-eps0)) or den <= 0:
        raise DomainError(f"need lam e^eps0 < 1 < mu e^-eps0 (lam={lam}, mu={mu}, eps0={eps0})")
    return 2.0 * A * (math.exp(eps0) + 1.0) / den


def theory_bound_D(lam, mu, eps0, A):
    """``Z (1/(1 - lam e^eps0) + 1/(mu e^-eps0 - 1))``, independent of eps and of the point."""
    Z = projection_bound_Z(lam, mu, eps0, A)
    return Z * (1.0 / (1.0 - lam * math.exp(eps0)) + 1.0 / (mu * math.exp(-eps0) - 1.0))


# --------------------------------------------------------------------------- restricted iterates


def _restricted_maps(t, h):
    """Maps of ``E^s`` and ``E^u`` in the orthonormal bases, plus invariance residuals."""
    lo, hi = h.n_min, h.n_max
    if lo < t.n_min or hi > t.n_max:
        raise UsageError(f"splitting window [{lo}, {hi}] outside trajectory window {t.window}")
    s = h.stable_dim
    U = h.bases
    G = t.grams(lo, hi)
    D = t.derivs[lo - t.n_min : hi - t.n_min]
    img = D @ U[:-1]
    coef = np.swapaxes(U[1:], 1, 2) @ G[1:] @ img
    Bs, Bu = coef[:, :s, :s], coef[:, s:, s:]
    # residual of df E^s_k inside E^s_{k+1}, in the fiber norm, per unit vector
    L = t.norms.roots(lo + 1, hi)
    rs = L @ (img[:, :, :s] - U[1:, :, :s] @ Bs)
    ru = L @ (img[:, :, s:] - U[1:, :, s:] @ Bu)
    res = 0.0
    if rs.size:
        res = max(res, float(np.linalg.norm(rs, ord=2, axis=(1, 2)).max()))
    if ru.size:
        res = max(res, float(np.linalg.norm(ru, ord=2, axis=(1, 2)).max()))
    return Bs, Bu, res


def _forward_products(B, scale):
    """``terms[k, j] = scale^j B_{k+j-1} ... B_k`` for all ``j <= K-1-k``."""
    K = B.shape[0] + 1
    m = B.shape[1] if B.ndim == 3 else 0
    terms = np.zeros((K, K, m, m))
    valid = np.zeros((K, K), dtype=bool)
    cur = np.broadcast_to(np.eye(m), (K, m, m)).copy()
    terms[:, 0] = cur
    valid[:, 0] = True
    Bsc = B * scale
    for j in range(1, K):
        n = K - j
        cur[:n] = Bsc[j - 1 : j - 1 + n] @ cur[:n]
        terms[:n, j] = cur[:n]
        valid[:n, j] = True
    return terms, valid


def _backward_products(Binv, scale):
    """``terms[k, j] = scale^j B_{k-j}^-1 ... B_{k-1}^-1`` for ``j <= k``."""
    K = Binv.shape[0] + 1
    m = Binv.shape[1]
    terms = np.zeros((K, K, m, m))
    valid = np.zeros((K, K), dtype=bool)
    cur = np.broadcast_to(np.eye(m), (K, m, m)).copy()
    terms[:, 0] = cur
    valid[:, 0] = True
    Bsc = Binv * scale
    for j in range(1, K):
        cur[j:] = Bsc[: K - j] @ cur[j:]
        terms[j:, j] = cur[j:]
        valid[j:, j] = True
    return terms, valid


def _sup_terms(terms, valid, k, c, start=0):
    """``max_{j >= start} |terms[k, j] c|`` for coordinate vectors ``c`` of shape (m, N)."""
    sel = np.nonzero(valid[k, start:])[0] + start
    if sel.size == 0 or c.shape[0] == 0:
        return np.zeros(c.shape[1])
    vals = np.linalg.norm(np.einsum("jab,bn->jan", terms[k, sel], c), axis=1)
    return vals.max(axis=0)


def _check_horizon(terms, valid, what):
    """Raise if some sup is attained at the far end of a horizon of length >= 2."""
    K = terms.shape[0]
    opn = np.linalg.norm(terms, ord=2, axis=(2, 3)) if terms.shape[2] else np.zeros(valid.shape)
    opn = np.where(valid, opn, -np.inf)
    horizon = valid.sum(axis=1) - 1
    arg = np.argmax(opn, axis=1)
    for k in range(K):
        h = horizon[k]
        if h >= 2 and arg[k] == h and opn[k, h] > opn[k, h - 1]:
            raise ShortWindowError(
                f"{what} sup still increasing at the end of the window (point offset {k}); "
                f"the window is too short for these rates",
                required_length=2 * K,
            )


# --------------------------------------------------------------------------- adapted norm


@dataclass(eq=False)
class AdaptedNorm:
    """Adapted norms ``|.|^eps`` on the points ``[n_min, n_max]`` of a splitting."""

    n_min: int
    epsilon: float
    lam: float
    mu: float
    A: float
    bases: np.ndarray
    stable_dim: int
    coords: np.ndarray
    s_fwd: tuple
    s_bwd: tuple
    u_bwd: tuple
    u_fwd: tuple
    Cfun: np.ndarray
    Kfun: np.ndarray
    Gfun: np.ndarray
    weights: np.ndarray
    equivalence: tuple

    @property
    def n_max(self):
        return self.n_min + self.bases.shape[0] - 1

    @property
    def dim(self):
        return self.bases.shape[1]

    def _k(self, n):
        if not (self.n_min <= n <= self.n_max):
            raise UsageError(f"no adapted norm at index {n} (window [{self.n_min}, {self.n_max}])")
        return n - self.n_min

    def split(self, n, v):
        """Stable and unstable coordinates of ``v`` (shape (d,) or (d, N))."""
        k = self._k(n)
        v = np.asarray(v, dtype=float)
        c = self.coords[k] @ (v if v.ndim == 2 else v[:, None])
        return c[: self.stable_dim], c[self.stable_dim :]

    def stable_part_norm(self, n, cs):
        k = self._k(n)
        return _sup_terms(*self.s_fwd, k, cs) + _sup_terms(*self.s_bwd, k, cs, start=1)

    def unstable_part_norm(self, n, cu):
        k = self._k(n)
        return _sup_terms(*self.u_bwd, k, cu) + _sup_terms(*self.u_fwd, k, cu, start=1)

    def norm(self, n, v):
        """``|v|^eps`` at index ``n``; ``v`` of shape (d,) gives a float, (d, N) an array."""
        v = np.asarray(v, dtype=float)
        cs, cu = self.split(n, v)
        out = np.maximum(self.stable_part_norm(n, cs), self.unstable_part_norm(n, cu))
        return float(out[0]) if v.ndim == 1 else out

    def parts(self, n, v):
        """``(v^s, v^u)`` as vectors."""
        k = self._k(n)
        cs, cu = self.split(n, v)
        s = self.stable_dim
        vs = self.bases[k][:, :s] @ cs
        vu = self.bases[k][:, s:] @ cu
        if np.asarray(v).ndim == 1:
            return vs[:, 0], vu[:, 0]
        return vs, vu

    def norm_sequence(self):
        """Quadratic surrogate ``sqrt(v^T W_n v)`` as a :class:`NormSequence`."""
        return NormSequence.spd(self.n_min, self.n_max, self.weights)


def _part_quadratic(norm_fn, m, samples=256, seed=0):
    """Quadratic form ``M`` with ``sqrt(c^T M c)`` close to a norm on R^m, plus the ratio range.

    Exact for ``m = 1``; otherwise a least-squares fit of ``norm^2`` on sampled
    unit directions (the ratio range is measured on the same samples).
    """
    if m == 0:
        return np.zeros((0, 0)), (1.0, 1.0)
    if m == 1:
        a = float(norm_fn(np.ones((1, 1)))[0])
        return np.array([[a * a]]), (1.0, 1.0)
    rng = np.random.default_rng(seed)
    C = rng.standard_normal((m, samples))
    C /= np.linalg.norm(C, axis=0)
    C = np.hstack((np.eye(m), C))
    n = norm_fn(C)
    iu = np.triu_indices(m)
    feats = np.stack([C[i] * C[j] * (1.0 if i == j else 2.0) for i, j in zip(*iu)], axis=1)
    coef, *_ = np.linalg.lstsq(feats, n**2, rcond=None)
    M = np.zeros((m, m))
    M[iu] = coef
    M = M + np.triu(M, 1).T
    w, V = np.linalg.eigh(M)
    w = np.maximum(w, 1e-6 * max(w.max(), 1e-300))
    M = (V * w) @ V.T
    q = np.sqrt(np.einsum("in,ij,jn->n", C, M, C))
    r = q / n
    return M, (float(r.min()), float(r.max()))


def build_adapted_norm(t, h, epsilon, check_horizon=True):
    """Adapted norms at ``epsilon`` on the splitting window of ``h``.

    The sups run over all available data.  ``C(x_k)`` is the smallest constant
    with ``|df^j v| <= C lam^j e^{eps j} |v|`` on ``E^s`` (and the backward
    analogue on ``E^u``) over the data, ``K(x_k)`` the sine of the minimal
    angle between the two subspaces, and ``G = (C + 1)/K``.

    Raises :class:`DomainError` for ``epsilon`` outside ``(0, eps0)`` and
    :class:`ShortWindowError` when a sup is still growing at the window end.
    """
    lam, mu = h.lam, h.mu
    e0 = epsilon0(lam, mu)
    if not (0 < epsilon < e0):
        raise DomainError(f"epsilon must lie in (0, eps0) with eps0 = {e0:.6g}; got {epsilon}")
    A = effective_A(t.A_bound, lam, mu)
    Bs, Bu, inv_res = _restricted_maps(t, h)
    ee = math.exp(epsilon)
    s_fwd = _forward_products(Bs, 1.0 / (lam * ee))
    s_bwd = _backward_products(np.linalg.inv(Bs) if Bs.shape[1] else Bs, 1.0 / (A * ee))
    u_bwd = _backward_products(np.linalg.inv(Bu) if Bu.shape[1] else Bu, mu / ee)
    u_fwd = _forward_products(Bu, 1.0 / (A * ee))
    if check_horizon:
        _check_horizon(*s_fwd, "stable forward")
        _check_horizon(*u_bwd, "unstable backward")
    ck = _ck_from_terms(t, h, s_fwd, u_bwd)
    K = h.bases.shape[0]
    s = h.stable_dim
    coords = np.linalg.inv(h.bases)
    weights = np.zeros_like(h.bases)
    lo_r, hi_r = 1.0, 1.0
    for k in range(K):
        Ms, rs = _part_quadratic(
            lambda c: _sup_terms(*s_fwd, k, c) + _sup_terms(*s_bwd, k, c, start=1), s
        )
        Mu, ru = _part_quadratic(
            lambda c: _sup_terms(*u_bwd, k, c) + _sup_terms(*u_fwd, k, c, start=1), h.dim - s
        )
        blk = np.zeros((h.dim, h.dim))
        blk[:s, :s] = Ms
        blk[s:, s:] = Mu
        W = coords[k].T @ blk @ coords[k]
        weights[k] = 0.5 * (W + W.T)
        lo_r = min(lo_r, rs[0], ru[0])
        hi_r = max(hi_r, rs[1], ru[1])
    # sqrt(q_s^2 + q_u^2) lies between lo_r max(.,.) and sqrt(2) hi_r max(.,.)
    equivalence = (lo_r, math.sqrt(2.0) * hi_r)
    G = (ck["C"] + 1.0) / ck["K"]
    return AdaptedNorm(
        h.n_min,
        float(epsilon),
        lam,
        mu,
        A,
        h.bases,
        s,
        coords,
        s_fwd,
        s_bwd,
        u_bwd,
        u_fwd,
        ck["C"],
        ck["K"],
        G,
        weights,
        equivalence,
    )


# --------------------------------------------------------------------------- C, K


def _ck_from_terms(t, h, s_fwd, u_bwd):
    """``C`` from the sup of the scaled restricted products, ``K`` from the splitting angle."""
    def sup_opnorm(terms, valid):
        if terms.shape[2] == 0:
            return np.ones(terms.shape[0]), np.zeros(terms.shape[0], dtype=bool)
        opn = np.linalg.norm(terms, ord=2, axis=(2, 3))
        opn = np.where(valid, opn, 0.0)
        horizon = valid.sum(axis=1) - 1
        arg = np.argmax(opn, axis=1)
        trunc = (horizon >= 2) & (arg == horizon)
        return opn.max(axis=1), trunc

    Cs, ts = sup_opnorm(*s_fwd)
    Cu, tu = sup_opnorm(*u_bwd)
    s = h.stable_dim
    G = t.grams(h.n_min, h.n_max)
    P = h.projections
    Q = np.eye(h.dim) - P
    L = t.norms.roots(h.n_min, h.n_max)
    Linv = t.norms.inv_roots(h.n_min, h.n_max)
    nP = np.linalg.norm(L @ P @ Linv, ord=2, axis=(1, 2))
    nQ = np.linalg.norm(L @ Q @ Linv, ord=2, axis=(1, 2))
    Kf = 1.0 / np.maximum(np.maximum(nP, nQ), 1.0)
    # minimal principal angle between the G-orthonormal bases
    Us, Uu = h.bases[:, :, :s], h.bases[:, :, s:]
    cross = np.swapaxes(Us, 1, 2) @ G @ Uu
    if cross.shape[1] and cross.shape[2]:
        cmax = np.clip(np.linalg.norm(cross, ord=2, axis=(1, 2)), 0.0, 1.0)
    else:
        cmax = np.zeros(h.bases.shape[0])
    angle = np.arccos(cmax)
    return {"C": np.maximum(Cs, Cu), "C_stable": Cs, "C_unstable": Cu, "K": Kf, "angle": angle,
            "truncated": ts | tu}


@dataclass
class CKReport:
    n_min: int
    Cfun: np.ndarray
    Kfun: np.ndarray
    angles: np.ndarray
    tempered_eps: float
    C_violations: int
    K_violations: int
    truncated: int

    @property
    def tempered_ok(self):
        return self.C_violations == 0 and self.K_violations == 0

    def to_json(self):
        return {
            "tempered_eps": self.tempered_eps,
            "C_violations": self.C_violations,
            "K_violations": self.K_violations,
            "truncated_points": self.truncated,
            "tempered_ok": self.tempered_ok,
        }


def _tempered_violations(f, eps, increasing=True, rtol=1e-10):
    """Pairs (k, k+n) with ``f(k+n) > f(k) e^{eps |n|}`` (or ``<`` its inverse)."""
    idx = np.arange(f.size)
    dist = np.abs(idx[:, None] - idx[None, :])
    lf = np.log(f)
    if increasing:
        bad = lf[None, :] - lf[:, None] > eps * dist + rtol
    else:
        bad = lf[:, None] - lf[None, :] > eps * dist + rtol
    return int(bad.sum())


def estimate_CK(t, h, epsilon, window=None, tempered_eps=None):
    """Per-point ``C(x_k)``, ``K(x_k)`` and the tempered checks.

    ``C(x_k)`` is the smallest constant with ``|df^j v| <= C lam^j e^{eps j} |v|``
    on ``E^s`` and ``|df^-j v| <= C mu^-j e^{eps j} |v|`` on ``E^u`` over the data;
    ``K(x_k) = 1/max(|P|, |Q|)``, the sine of the minimal angle between the
    subspaces.  Temperedness is checked with ``tempered_eps`` (default
    ``2 epsilon``): ``C(x_{k+n}) <= C(x_k) e^{tempered_eps |n|}`` and
    ``K(x_{k+n}) >= K(x_k) e^{-tempered_eps |n|}`` for all pairs.
    """
    if window is not None:
        h = h.restrict(int(window[0]), int(window[1]))
    Bs, Bu, _ = _restricted_maps(t, h)
    ee = math.exp(epsilon)
    s_fwd = _forward_products(Bs, 1.0 / (h.lam * ee))
    u_bwd = _backward_products(np.linalg.inv(Bu) if Bu.shape[1] else Bu, h.mu / ee)
    ck = _ck_from_terms(t, h, s_fwd, u_bwd)
    te = 2.0 * epsilon if tempered_eps is None else float(tempered_eps)
    return CKReport(
        h.n_min,
        ck["C"],
        ck["K"],
        ck["angle"],
        te,
        _tempered_violations(ck["C"], te, True),
        _tempered_violations(ck["K"], te, False),
        int(ck["truncated"].sum()),
    )


# --------------------------------------------------------------------------- R_x


def assemble_Rx(t, norm, space=None, window=None, boundary="free"):
    """``(R_x m)_n = m_n - df_{n-1} m_{n-1}`` on the adapted-norm window (quadratic surrogate)."""
    space = lp(2) if space is None else space
    lo, hi = norm.n_min, norm.n_max
    c = Cocycle(lo, t.derivs[lo - t.n_min : hi - t.n_min], norm.norm_sequence())
    return assemble(c, space, window, boundary=boundary)


@dataclass
class TrajectoryCertificate:
    ok: bool
    invertible: bool
    inverse_norm: float
    inverse_norm_bound: float
    D_theory: float
    Z: float
    eps0: float
    epsilon: float
    reason: str = ""
    classification: object = None

    def to_json(self):
        def fin(v):
            return v if isinstance(v, float) and math.isfinite(v) else None

        return {
            "ok": self.ok,
            "invertible": self.invertible,
            "inverse_norm": fin(self.inverse_norm),
            "inverse_norm_bound": fin(self.inverse_norm_bound),
            "D_theory": self.D_theory,
            "D_bound_ok": bool(self.ok),
            "Z": self.Z,
            "eps0": self.eps0,
            "epsilon": self.epsilon,
            "reason": self.reason,
        }


def certify_trajectory(t, h, epsilon, space=None, window=None, norm=None, slack=D_SLACK):
    """Invertibility of ``R_x`` in the adapted norms and the bound ``|R_x^-1| <= D``.

    The inverse norm is computed for the quadratic surrogate and converted to
    the adapted norm with the measured equivalence constants.  Passes when the
    section classifies as invertible and the converted bound is at most
    ``slack * D_theory``.  Failures (including a window too short to evaluate
    the norm) are reported with ``ok = False`` and a reason.
    """
    space = lp(2) if space is None else space
    e0 = epsilon0(h.lam, h.mu)
    A = effective_A(t.A_bound, h.lam, h.mu)
    Z = projection_bound_Z(h.lam, h.mu, e0, A)
    Dth = theory_bound_D(h.lam, h.mu, e0, A)
    nan = math.nan
    if norm is None:
        try:
            norm = build_adapted_norm(t, h, epsilon)
        except ShortWindowError as exc:
            return TrajectoryCertificate(False, False, nan, nan, Dth, Z, e0, epsilon, f"short window: {exc}")
    op = assemble_Rx(t, norm, space, window)
    cl = classify_invertibility(op.cocycle, space, op.window)
    if not cl.invertible:
        return TrajectoryCertificate(
            False, False, cl.inverse_norm, math.inf, Dth, Z, e0, epsilon, "R_x is not invertible", cl
        )
    lo_r, hi_r = norm.equivalence
    bound = cl.inverse_norm * hi_r / lo_r
    ok = bound <= slack * Dth
    reason = "" if ok else f"inverse norm bound {bound:.6g} exceeds {slack} * D_theory = {slack * Dth:.6g}"
    return TrajectoryCertificate(bool(ok), True, cl.inverse_norm, bound, Dth, Z, e0, epsilon, reason, cl)


def recover_splitting(
    t,
    space=None,
    window=None,
    epsilon=0.0,
    norm=None,
    rate_tol=RATE_TOL,
    proj_tol=PROJ_TOL,
    split_tol=SPLIT_TOL,
    inv_norm_max=INV_NORM_MAX,
):
    """``E^s + E^u`` from impulse responses of ``R_x``.

    With ``norm=None`` the fiber norms are used; an :class:`AdaptedNorm`
    switches to its quadratic surrogate (on its window).  For each core point
    and basis vector ``v`` the solve of ``R_x xi = delta_k v`` gives
    ``v^s = xi_k`` and ``v^u = v - xi_k = -df xi_{k-1}``.  Rates come from the
    rescaled search.  Raises :class:`PreconditionError` if ``R_x`` is not
    invertible and :class:`RecoveryError` if the splitting fails its checks.
    """
    space = lp(2) if space is None else space
    if norm is None:
        c = t.to_cocycle()
    else:
        lo, hi = norm.n_min, norm.n_max
        c = Cocycle(lo, t.derivs[lo - t.n_min : hi - t.n_min], norm.norm_sequence())
    op = assemble(c, lp(2), window)
    cl = classify_invertibility(c, lp(2), op.window, inv_norm_max=inv_norm_max)
    if not cl.invertible:
        raise PreconditionError(
            f"R_x is not invertible on {op.window} (inverse norm {cl.inverse_norm:.6g}, "
            f"growth ratio {cl.growth_ratio:.3g})"
        )
    rates = extract_rates(c, lp(2), op.window, rate_tol=rate_tol, inv_norm_max=inv_norm_max)
    M = margin_for(rates.D_hat, rates.lambda_hat, rates.mu_hat, proj_tol)
    core = (op.a + M, op.b - M)
    if core[1] < core[0]:
        raise PreconditionError(f"window {op.window} too short for margin {M}")
    try:
        P, rec = recover_projections(op, core, proj_tol)
    except RecoveryError as exc:
        raise RecoveryError(f"splitting recovery failed: {exc}", exc.residuals) from exc
    # v^u from the solve at k-1 must agree with v - v^s
    d = t.dim
    Kc = core[1] - core[0] + 1
    rhs = np.zeros((op.rows, d, Kc, d))
    idx = np.arange(Kc)
    for i in range(d):
        rhs[core[0] - op.a + idx, i, idx, i] = 1.0
    xt = op.solve_tilde(op.weight_rows(rhs.reshape(op.rows, d, Kc * d)))
    x = op.unweight_unknowns(xt).reshape(op.unknowns, d, Kc, d)
    off = core[0] - op.first_unknown
    prev = x[off + idx - 1, :, idx, :]
    maps = c.maps_between(core[0] - 1, core[1])
    vu = -(maps @ prev)
    decomp = float(np.abs(P + vu - np.eye(d)).max())
    lam = min(rates.lambda_hat * (1.0 + rate_tol), 1.0 - 1e-12)
    mu = max(rates.mu_hat * (1.0 - rate_tol), 1.0 + 1e-12)
    h = HyperbolicityData.from_projections(t, core[0], P, lam, mu, epsilon)
    Bs, Bu, inv_res = _restricted_maps(t, h)
    residuals = dict(rec)
    residuals.update({"decomposition": decomp, "invariance": inv_res, "inverse_norm": cl.inverse_norm})
    if norm is not None:
        # |v^s| <= D |v| and |v^u| <= (1 + D)|v| in the adapted norm
        D = cl.inverse_norm * norm.equivalence[1] / norm.equivalence[0]
        worst_s = worst_u = 0.0
        rng = np.random.default_rng(0)
        for k in range(core[0], core[1] + 1):
            v = rng.standard_normal((d, 16))
            Pk = P[k - core[0]]
            nv = norm.norm(k, v)
            worst_s = max(worst_s, float(np.max(norm.norm(k, Pk @ v) / nv)))
            worst_u = max(worst_u, float(np.max(norm.norm(k, v - Pk @ v) / nv)))
        residuals.update({"projection_ratio_s": worst_s, "projection_ratio_u": worst_u, "D": D})
        if worst_s > D * (1 + split_tol) or worst_u > (1 + D) * (1 + split_tol):
            raise RecoveryError("projection bounds violated", residuals)
    if decomp > split_tol or inv_res > split_tol:
        raise RecoveryError("recovered splitting fails the decomposition or invariance check", residuals)
    h.residuals = residuals
    h.residuals["rates"] = rates.to_json()
    return h


# --------------------------------------------------------------------------- checks


def check_adapted_norm(t, norm, n_vectors=1000, seed=0):
    """Residuals of the sandwich, temperedness, contraction and global bounds.

    For each point ``n_vectors`` random tangent vectors are drawn.  Reported
    maxima (all should be <= 0 up to rounding):

    ``G1_lower``  0.5|v| - |v|^eps   (relative to |v|)
    ``G1_upper``  |v|^eps - G |v|
    ``T1``  |df v^s|^eps / |v^s|^eps - lam e^eps
    ``T3``  |df^-1 v^u|^eps / |v^u|^eps - e^eps / mu
    ``T4``  |df v|^eps / |v|^eps - A (e^eps + 1)
    ``Z``   max(|P v|^eps, |Q v|^eps) / |v|^eps - Z
    T1 skips the first point and T3 the last one, whose one-sided histories
    are empty.  Also ``G2_violations``, the number of pairs breaking ``G(x_{k+n}) <= e^{2 eps |n|} G(x_k)``.
    """
    rng = np.random.default_rng(seed)
    eps = norm.epsilon
    lam, mu, A = norm.lam, norm.mu, norm.A
    e0 = epsilon0(lam, mu)
    Z = projection_bound_Z(lam, mu, e0, A)
    out = {"G1_lower": -math.inf, "G1_upper": -math.inf, "T1": -math.inf, "T3": -math.inf,
           "T4": -math.inf, "Z": -math.inf, "T1_shifted": -math.inf, "T3_shifted": -math.inf}
    s = norm.stable_dim
    d = norm.dim
    for n in range(norm.n_min, norm.n_max + 1):
        k = n - norm.n_min
        v = rng.standard_normal((d, n_vectors))
        riem = np.linalg.norm(t.norms.root(n) @ v, axis=0)
        nv = norm.norm(n, v)
        out["G1_lower"] = max(out["G1_lower"], float(np.max((0.5 * riem - nv) / riem)))
        out["G1_upper"] = max(out["G1_upper"], float(np.max((nv - norm.Gfun[k] * riem) / riem)))
        vs, vu = norm.parts(n, v)
        ratio_z = np.maximum(norm.norm(n, vs), norm.norm(n, vu)) / nv
        out["Z"] = max(out["Z"], float(ratio_z.max()) - Z)
        if n < norm.n_max:
            df = t.df(n)
            out["T4"] = max(out["T4"], float(np.max(norm.norm(n + 1, df @ v) / nv)) - A * (math.exp(eps) + 1))
            # the first point has no backward history, so its backward sup is truncated
            if s and n > norm.n_min:
                cs = rng.standard_normal((s, n_vectors))
                ws = norm.bases[k][:, :s] @ cs
                r = norm.norm(n + 1, df @ ws) / norm.norm(n, ws)
                out["T1"] = max(out["T1"], float(r.max()) - lam * math.exp(eps))
                out["T1_shifted"] = max(out["T1_shifted"], float(r.max()) - lam * math.exp(eps) - math.exp(-eps) / A)
        if norm.n_min < n < norm.n_max and s < d:
            cu = rng.standard_normal((d - s, n_vectors))
            wu = norm.bases[k][:, s:] @ cu
            back = np.linalg.solve(t.df(n - 1), wu)
            r = norm.norm(n - 1, back) / norm.norm(n, wu)
            out["T3"] = max(out["T3"], float(r.max()) - math.exp(eps) / mu)
            out["T3_shifted"] = max(out["T3_shifted"], float(r.max()) - math.exp(eps) / mu - math.exp(-eps) / A)
    out["G2_violations"] = _tempered_violations(norm.Gfun, 2 * eps, True)
    return out
