"""Finite windows of linear cocycles with per-index norms.

A cocycle on the window ``[n_min, n_max]`` stores the matrices ``A_n`` for
``n_min <= n < n_max``; ``propagate`` forms the products
``A(n, m) = A_{n-1} ... A_m``.  Each index carries its own norm
``|v|_n = |L_n v|_2`` with ``L_n`` the symmetric square root of an SPD weight
(or a positive multiple of the identity).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DomainError, SingularityError, UsageError

__all__ = [
    "NormSequence",
    "Cocycle",
    "DichotomyCertificate",
    "CertificateReport",
    "propagate",
    "verify_certificate",
    "generate_example",
    "exact_certificate",
    "kernel_basis",
    "weighted_opnorm",
    "VERIFY_TOL",
    "PROJ_TOL",
    "INV_COND_MAX",
    "EIG_TOL",
]

VERIFY_TOL = 1e-8
PROJ_TOL = 1e-8
INV_COND_MAX = 1e12
EIG_TOL = 1e-12

CATMAP = np.array([[2.0, 1.0], [1.0, 1.0]])


def _spd_sqrt(W, eig_tol=EIG_TOL):
    W = 0.5 * (W + np.swapaxes(W, -1, -2))
    w, V = np.linalg.eigh(W)
    if np.any(w <= eig_tol):
        raise ConfigurationError(f"weight matrix is not positive definite (min eigenvalue {w.min():.3g})")
    root = (V * np.sqrt(w)[..., None, :]) @ np.swapaxes(V, -1, -2)
    inv_root = (V / np.sqrt(w)[..., None, :]) @ np.swapaxes(V, -1, -2)
    return root, inv_root


@dataclass(frozen=True, eq=False)
class NormSequence:
    """Per-index norms on R^d over ``[n_min, n_max]``.

    kind ``flat``: Euclidean everywhere; ``scalar``: ``g_n |v|``;
    ``spd``: ``sqrt(v^T W_n v)``.
    """

    n_min: int
    n_max: int
    dim: int
    kind: str = "flat"
    data: np.ndarray | None = None
    _root: np.ndarray = field(init=False, repr=False)
    _inv_root: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        length = self.n_max - self.n_min + 1
        if length < 1:
            raise ConfigurationError("empty norm window")
        d = self.dim
        eye = np.broadcast_to(np.eye(d), (length, d, d))
        if self.kind == "flat":
            root = inv = np.array(eye)
        elif self.kind == "scalar":
            g = np.asarray(self.data, dtype=float).reshape(-1)
            if g.size != length:
                raise ConfigurationError(f"expected {length} scalar weights, got {g.size}")
            if not np.all(np.isfinite(g)) or np.any(g <= 0):
                raise ConfigurationError("scalar weights must be finite and positive")
            object.__setattr__(self, "data", g)
            root = g[:, None, None] * eye
            inv = (1.0 / g)[:, None, None] * eye
        elif self.kind == "spd":
            W = np.asarray(self.data, dtype=float)
            if W.shape != (length, d, d):
                raise ConfigurationError(f"expected SPD weights of shape {(length, d, d)}, got {W.shape}")
            if not np.all(np.isfinite(W)):
                raise ConfigurationError("SPD weights must be finite")
            if np.max(np.abs(W - np.swapaxes(W, 1, 2))) > 1e-10 * max(1.0, np.max(np.abs(W))):
                raise ConfigurationError("SPD weights must be symmetric")
            object.__setattr__(self, "data", W)
            root, inv = _spd_sqrt(W)
        else:
            raise ConfigurationError(f"unknown norm kind {self.kind!r}")
        root.setflags(write=False)
        inv.setflags(write=False)
        object.__setattr__(self, "_root", root)
        object.__setattr__(self, "_inv_root", inv)

    @classmethod
    def flat(cls, n_min, n_max, dim):
        return cls(n_min, n_max, dim, "flat")

    @classmethod
    def scalar(cls, n_min, n_max, dim, g):
        return cls(n_min, n_max, dim, "scalar", np.asarray(g, dtype=float))

    @classmethod
    def spd(cls, n_min, n_max, W):
        W = np.asarray(W, dtype=float)
        return cls(n_min, n_max, W.shape[-1], "spd", W)

    def _index(self, n):
        if not (self.n_min <= n <= self.n_max):
            raise UsageError(f"index {n} outside norm window [{self.n_min}, {self.n_max}]")
        return n - self.n_min

    def root(self, n):
        return self._root[self._index(n)]

    def inv_root(self, n):
        return self._inv_root[self._index(n)]

    def roots(self, lo=None, hi=None):
        lo = self.n_min if lo is None else lo
        hi = self.n_max if hi is None else hi
        return self._root[self._index(lo) : self._index(hi) + 1]

    def inv_roots(self, lo=None, hi=None):
        lo = self.n_min if lo is None else lo
        hi = self.n_max if hi is None else hi
        return self._inv_root[self._index(lo) : self._index(hi) + 1]

    def gram(self, n):
        L = self.root(n)
        return L @ L

    def norm(self, n, v):
        return float(np.linalg.norm(self.root(n) @ np.asarray(v, dtype=float)))

    def restrict(self, lo, hi):
        i, j = self._index(lo), self._index(hi)
        if self.kind == "flat":
            return NormSequence.flat(lo, hi, self.dim)
        return NormSequence(lo, hi, self.dim, self.kind, self.data[i : j + 1])


def weighted_opnorm(norms, n, M, m):
    """Operator norm of ``M`` from ``(R^d, |.|_m)`` to ``(R^d, |.|_n)``."""
    return float(np.linalg.norm(norms.root(n) @ M @ norms.inv_root(m), 2))


@dataclass(frozen=True, eq=False)
class Cocycle:
    """Matrices ``A_n`` for ``n_min <= n < n_max`` with norms on ``[n_min, n_max]``."""

    n_min: int
    maps: np.ndarray
    norms: NormSequence | None = None

    def __post_init__(self):
        maps = np.array(self.maps, dtype=float)
        if maps.ndim != 3 or maps.shape[1] != maps.shape[2]:
            raise ConfigurationError(f"maps must have shape (W-1, d, d), got {maps.shape}")
        if maps.shape[0] < 1:
            raise ConfigurationError("a cocycle window needs at least two indices")
        if not np.all(np.isfinite(maps)):
            raise ConfigurationError("cocycle matrices must be finite")
        maps.setflags(write=False)
        object.__setattr__(self, "maps", maps)
        object.__setattr__(self, "n_min", int(self.n_min))
        n_max = self.n_min + maps.shape[0]
        norms = self.norms
        if norms is None:
            norms = NormSequence.flat(self.n_min, n_max, maps.shape[1])
        if (norms.n_min, norms.n_max, norms.dim) != (self.n_min, n_max, maps.shape[1]):
            raise ConfigurationError("norm window/dimension does not match the cocycle")
        object.__setattr__(self, "norms", norms)

    @property
    def n_max(self):
        return self.n_min + self.maps.shape[0]

    @property
    def dim(self):
        return self.maps.shape[1]

    @property
    def window(self):
        return (self.n_min, self.n_max)

    def A(self, n):
        if not (self.n_min <= n < self.n_max):
            raise UsageError(f"A_{n} is not available on window [{self.n_min}, {self.n_max}]")
        return self.maps[n - self.n_min]

    def maps_between(self, lo, hi):
        """``A_lo, ..., A_{hi-1}`` as an array."""
        if not (self.n_min <= lo <= hi <= self.n_max):
            raise UsageError(f"[{lo}, {hi}] not inside cocycle window {self.window}")
        return self.maps[lo - self.n_min : hi - self.n_min]

    def restrict(self, lo, hi):
        return Cocycle(lo, self.maps_between(lo, hi), self.norms.restrict(lo, hi))

    def with_norms(self, norms):
        return Cocycle(self.n_min, self.maps, norms)


def kernel_basis(P, proj_tol=None):
    """Orthonormal basis (columns) of ``ker P = range(I - P)`` for a projection ``P``."""
    d = P.shape[0]
    Q = np.eye(d) - P
    k = int(round(np.trace(Q)))
    if k <= 0:
        return np.zeros((d, 0))
    U, _, _ = np.linalg.svd(Q)
    return U[:, :k]


def range_basis(P):
    d = P.shape[0]
    k = int(round(np.trace(P)))
    if k <= 0:
        return np.zeros((d, 0))
    U, _, _ = np.linalg.svd(P)
    return U[:, :k]


@dataclass(frozen=True, eq=False)
class DichotomyCertificate:
    """Projections ``P_n`` on a core window plus constants ``(D, lambda, mu)``."""

    n_min: int
    projections: np.ndarray
    D: float
    lam: float
    mu: float
    residuals: dict = field(default_factory=dict)

    def __post_init__(self):
        P = np.array(self.projections, dtype=float)
        if P.ndim != 3 or P.shape[1] != P.shape[2] or P.shape[0] < 1:
            raise ConfigurationError(f"projections must have shape (K, d, d), got {P.shape}")
        P.setflags(write=False)
        object.__setattr__(self, "projections", P)
        object.__setattr__(self, "n_min", int(self.n_min))
        if not (self.D > 0 and 0 < self.lam < 1 < self.mu):
            raise ConfigurationError(
                f"certificate constants need D > 0 and 0 < lambda < 1 < mu, got {self.D}, {self.lam}, {self.mu}"
            )

    @property
    def n_max(self):
        return self.n_min + self.projections.shape[0] - 1

    @property
    def dim(self):
        return self.projections.shape[1]

    def P(self, n):
        if not (self.n_min <= n <= self.n_max):
            raise UsageError(f"no projection at index {n} (core is [{self.n_min}, {self.n_max}])")
        return self.projections[n - self.n_min]

    def Q(self, n):
        return np.eye(self.dim) - self.P(n)

    def restrict(self, lo, hi):
        return DichotomyCertificate(
            lo, self.projections[lo - self.n_min : hi - self.n_min + 1], self.D, self.lam, self.mu
        )


def _restricted_inverse(A, P_n, P_next, inv_cond_max=INV_COND_MAX):
    """``(A | ker P_n)^{-1} Q_{n+1}`` as a d x d matrix; also returns the condition number."""
    d = A.shape[0]
    U = kernel_basis(P_n)
    if U.shape[1] == 0:
        return np.zeros((d, d)), 1.0
    AU = A @ U
    s = np.linalg.svd(AU, compute_uv=False)
    cond = float(s[0] / s[-1]) if s[-1] > 0 else math.inf
    if cond > inv_cond_max:
        raise SingularityError(f"A restricted to ker P is singular (condition {cond:.3g})", cond)
    Q_next = np.eye(d) - P_next
    return U @ np.linalg.pinv(AU) @ Q_next, cond


def propagate(c, n, m, cert=None, restrict_unstable=None, inv_cond_max=INV_COND_MAX):
    """Evolution operator ``A(n, m)``.

    For ``n >= m`` this is the ordered product ``A_{n-1} ... A_m`` (identity when
    ``n == m``).  For ``n < m`` it is the inverse of ``A(m, n)`` restricted to
    ``ker P_n``, composed with ``Q_m`` so that it vanishes on ``range P_m``;
    this needs a certificate supplying the projections.
    """
    if not (c.n_min <= min(n, m) and max(n, m) <= c.n_max):
        raise UsageError(f"indices ({n}, {m}) outside cocycle window {c.window}")
    d = c.dim
    if n >= m:
        out = np.eye(d)
        for k in range(m, n):
            out = c.A(k) @ out
        return out
    if cert is None:
        raise UsageError("backward propagation (n < m) needs a dichotomy certificate")
    M = propagate(c, m, n)
    U = kernel_basis(cert.P(n))
    if U.shape[1] == 0:
        return np.zeros((d, d))
    MU = M @ U
    s = np.linalg.svd(MU, compute_uv=False)
    cond = float(s[0] / s[-1]) if s[-1] > 0 else math.inf
    if cond > inv_cond_max:
        raise SingularityError(f"A({m},{n}) restricted to ker P_{n} is singular (condition {cond:.3g})", cond)
    return U @ np.linalg.pinv(MU) @ cert.Q(m)


@dataclass
class CertificateReport:
    """Maximal residuals of the dichotomy inequalities over a core window."""

    residuals: dict
    passes: bool
    verify_tol: float
    ranks: list

    def to_json(self):
        return {"residuals": dict(self.residuals), "passes": self.passes, "verify_tol": self.verify_tol}


def _batched_opnorm(M):
    if M.shape[0] == 0:
        return np.zeros(0)
    return np.linalg.norm(M, ord=2, axis=(1, 2))


def _excess_scan(forward_maps, start_ops, roots, inv_roots, log_rate, log_D):
    """Largest ``log(|prod|_{m->n}) - log D - (n-m) log_rate`` over all pairs.

    ``forward_maps[k]`` advances from position k to k+1 (already composed with
    the projection at k+1); ``start_ops[m]`` is the initial operator at m.
    Works with renormalised products so long windows do not underflow.
    """
    K = start_ops.shape[0]
    worst = -math.inf
    d = start_ops.shape[1]
    prods = np.zeros((0, d, d))
    logs = np.zeros(0)
    for n in range(K):
        if n > 0:
            prods = forward_maps[n - 1] @ prods
        prods = np.concatenate((prods, start_ops[n][None]), axis=0)
        logs = np.append(logs, 0.0)
        # weighted norm from each start index m to n
        start_idx = np.arange(n + 1)
        w = roots[n] @ prods @ inv_roots[start_idx]
        norms = _batched_opnorm(w)
        with np.errstate(divide="ignore"):
            lg = np.log(norms) + logs
        steps = n - start_idx
        val = lg - log_D - steps * log_rate
        if val.size:
            worst = max(worst, float(np.max(val)))
        scale = _batched_opnorm(prods)
        scale = np.where(scale > 0, scale, 1.0)
        prods = prods / scale[:, None, None]
        logs = logs + np.log(scale)
    return worst


def verify_certificate(c, cert, verify_tol=VERIFY_TOL, inv_cond_max=INV_COND_MAX):
    """Check a certificate against the dichotomy inequalities on its core window.

    Residuals (all maxima over the core window, operator norms between the
    per-index norms):

    ``intertwining``  |A_m P_m - P_{m+1} A_m|
    ``stable_excess``  max(0, |A(n,m) P_m| / (D lam^(n-m)) - 1), n >= m
    ``unstable_excess``  max(0, |A(n,m) Q_m| / (D mu^(n-m)) - 1), n <= m
    ``idempotence``  |P_n^2 - P_n|
    ``ker_condition``  condition number of A_m restricted to ker P_m

    The certificate passes when the first four are <= ``verify_tol``, the rank of
    ``P_n`` is constant and ``ker_condition <= inv_cond_max``.
    """
    lo, hi = cert.n_min, cert.n_max
    if lo < c.n_min or hi > c.n_max:
        raise UsageError(f"certificate core [{lo}, {hi}] not inside cocycle window {c.window}")
    if cert.dim != c.dim:
        raise UsageError("certificate dimension does not match the cocycle")
    P = cert.projections
    K = P.shape[0]
    d = c.dim
    eye = np.eye(d)
    roots = c.norms.roots(lo, hi)
    inv_roots = c.norms.inv_roots(lo, hi)
    maps = c.maps_between(lo, hi)  # K-1 maps

    idem = _batched_opnorm(roots @ (P @ P - P) @ inv_roots)
    ranks = [int(round(np.trace(p))) for p in P]
    if K > 1:
        inter = _batched_opnorm(roots[1:] @ (maps @ P[:-1] - P[1:] @ maps) @ inv_roots[:-1])
    else:
        inter = np.zeros(0)

    conds = []
    back_maps = []
    singular = False
    for k in range(K - 1):
        try:
            B, cond = _restricted_inverse(maps[k], P[k], P[k + 1], inv_cond_max)
        except SingularityError as exc:
            cond, B, singular = exc.condition, np.zeros((d, d)), True
        conds.append(cond)
        back_maps.append(B)
    ker_cond = max(conds) if conds else 1.0

    fwd = np.array([P[k + 1] @ maps[k] for k in range(K - 1)]).reshape(K - 1, d, d)
    log_D = math.log(cert.D)
    stable = _excess_scan(fwd, P, roots, inv_roots, math.log(cert.lam), log_D)
    if singular:
        unstable = math.inf
    else:
        # walk backwards: reverse the index order so the same scan applies
        bwd = np.array(back_maps[::-1]).reshape(K - 1, d, d)
        Qs = (eye - P)[::-1]
        unstable = _excess_scan(bwd, Qs, roots[::-1], inv_roots[::-1], -math.log(cert.mu), log_D)
    residuals = {
        "intertwining": float(inter.max()) if inter.size else 0.0,
        "stable_excess": max(0.0, math.expm1(stable)) if stable > -math.inf else 0.0,
        "unstable_excess": max(0.0, math.expm1(unstable)) if unstable > -math.inf else 0.0,
        "idempotence": float(idem.max()),
        "ker_condition": float(ker_cond),
        "rank_variation": int(max(ranks) - min(ranks)),
    }
    passes = (
        residuals["intertwining"] <= verify_tol
        and residuals["stable_excess"] <= verify_tol
        and residuals["unstable_excess"] <= verify_tol
        and residuals["idempotence"] <= verify_tol
        and residuals["rank_variation"] == 0
        and residuals["ker_condition"] <= inv_cond_max
    )
    return CertificateReport(residuals, bool(passes), verify_tol, ranks)


# --------------------------------------------------------------------------- generators


def _window_indices(window):
    n_min, n_max = int(window[0]), int(window[1])
    if n_max <= n_min:
        raise ConfigurationError(f"window must contain at least two indices, got {window}")
    return n_min, n_max


def generate_example(kind, window, norms="flat", **params):
    """Build one of the test cocycle families on ``window = (n_min, n_max)``.

    kinds
      ``diagonal``   ``entries=(a, b, ...)``; constant ``diag(entries)``
      ``identity``   ``dim``; constant identity
      ``catmap``     constant ``[[2, 1], [1, 1]]``
      ``nonuniform_scalar_pair``  ``lam, mu, eps``; see :func:`nonuniform_pair_maps`
      ``perturbed``  ``base`` (kind), ``base_params``, ``delta``, ``seed``;
                     adds i.i.d. uniform entries in ``[-delta, delta]``

    ``norms`` is ``"flat"``, ``"matched"`` (the scalar weights ``exp(eps |n|)``
    that make the nonuniform pair uniform), or a :class:`NormSequence`.
    """
    n_min, n_max = _window_indices(window)
    count = n_max - n_min
    eps_for_norm = params.get("eps", 0.0)
    if kind == "diagonal":
        entries = params.get("entries")
        if entries is None:
            entries = (params.get("a", 0.5), params.get("b", 2.0))
        entries = np.asarray(entries, dtype=float)
        if entries.ndim != 1 or entries.size < 1 or not np.all(np.isfinite(entries)):
            raise ConfigurationError("diagonal entries must be a finite list")
        maps = np.broadcast_to(np.diag(entries), (count, entries.size, entries.size))
    elif kind == "identity":
        d = int(params.get("dim", 2))
        if d < 1:
            raise ConfigurationError("identity dimension must be >= 1")
        maps = np.broadcast_to(np.eye(d), (count, d, d))
    elif kind == "catmap":
        maps = np.broadcast_to(CATMAP, (count, 2, 2))
    elif kind == "nonuniform_scalar_pair":
        maps = nonuniform_pair_maps(n_min, n_max, params["lam"], params["mu"], params["eps"])
    elif kind == "perturbed":
        base = params.get("base", "catmap")
        base_params = dict(params.get("base_params", {}))
        delta = float(params.get("delta", 0.0))
        if not (delta >= 0 and math.isfinite(delta)):
            raise ConfigurationError("perturbation size must be a finite nonnegative number")
        eps_for_norm = base_params.get("eps", 0.0)
        basec = generate_example(base, window, "flat", **base_params)
        rng = np.random.default_rng(params.get("seed", 0))
        noise = rng.uniform(-delta, delta, size=basec.maps.shape)
        maps = basec.maps + noise
    else:
        raise ConfigurationError(f"unknown example kind {kind!r}")
    d = maps.shape[1]
    if isinstance(norms, NormSequence):
        ns = norms
    elif norms == "flat":
        ns = NormSequence.flat(n_min, n_max, d)
    elif norms == "matched":
        idx = np.arange(n_min, n_max + 1)
        ns = NormSequence.scalar(n_min, n_max, d, np.exp(eps_for_norm * np.abs(idx)))
    else:
        raise ConfigurationError(f"unknown norm choice {norms!r}")
    return Cocycle(n_min, np.array(maps), ns)


def nonuniform_pair_maps(n_min, n_max, lam, mu, eps):
    """Diagonal maps whose constants grow like ``exp(eps |m|)``.

    ``A_n = exp(-eps s_n) diag(lam e^eps, mu e^-eps)`` with ``s_n = |n+1| - |n|``,
    i.e. ``diag(lam, mu e^{-2 eps})`` for ``n >= 0`` and
    ``diag(lam e^{2 eps}, mu)`` for ``n < 0``.  Then

        |A(n, m) e_1| = (lam e^eps)^(n-m) exp(-eps (|n| - |m|)),

    so the smallest ``C(m)`` with ``|A(m+j, m) e_1| <= C(m) (lam e^eps)^j`` is
    ``exp(eps |m|)`` for m <= 0 (and symmetrically for the unstable direction),
    while the scalar norms ``exp(eps |n|)`` turn the cocycle into the constant
    ``diag(lam e^eps, mu e^-eps)``.
    """
    if not (0 < lam < 1 < mu):
        raise ConfigurationError(f"need 0 < lam < 1 < mu, got lam={lam}, mu={mu}")
    if not (eps >= 0 and lam * math.exp(2 * eps) < 1 < mu * math.exp(-2 * eps)):
        raise ConfigurationError("need eps >= 0 with lam e^(2 eps) < 1 < mu e^(-2 eps)")
    n = np.arange(n_min, n_max)
    s = np.abs(n + 1) - np.abs(n)
    scale = np.exp(-eps * s)
    maps = np.zeros((n.size, 2, 2))
    maps[:, 0, 0] = scale * lam * math.exp(eps)
    maps[:, 1, 1] = scale * mu * math.exp(-eps)
    return maps


def catmap_projection():
    """Spectral projection of the cat map onto its contracting eigenvector."""
    w, V = np.linalg.eigh(CATMAP)
    v = V[:, np.argmin(w)]
    return np.outer(v, v)


def exact_certificate(kind, core, **params):
    """Closed-form certificate for the deterministic families, on ``core``.

    Returns ``None`` for families without one (``identity``, ``perturbed``).
    For ``nonuniform_scalar_pair`` the certificate is with respect to the
    matched norms.
    """
    lo, hi = int(core[0]), int(core[1])
    K = hi - lo + 1
    if kind == "diagonal":
        entries = params.get("entries")
        if entries is None:
            entries = (params.get("a", 0.5), params.get("b", 2.0))
        entries = np.abs(np.asarray(entries, dtype=float))
        stable = entries < 1
        if np.any(entries == 1) or not np.any(entries > 1) and not np.any(stable):
            return None
        P = np.diag(stable.astype(float))
        lam = float(entries[stable].max()) if np.any(stable) else 0.5
        mu = float(entries[~stable].min()) if np.any(~stable) else 2.0
        lam = max(lam, 1e-300)
        return DichotomyCertificate(lo, np.broadcast_to(P, (K,) + P.shape), 1.0, lam, mu)
    if kind == "catmap":
        w = np.linalg.eigvalsh(CATMAP)
        P = catmap_projection()
        return DichotomyCertificate(lo, np.broadcast_to(P, (K, 2, 2)), 1.0, float(w.min()), float(w.max()))
    if kind == "nonuniform_scalar_pair":
        lam, mu, eps = params["lam"], params["mu"], params["eps"]
        P = np.diag([1.0, 0.0])
        return DichotomyCertificate(
            lo, np.broadcast_to(P, (K, 2, 2)), 1.0, lam * math.exp(eps), mu * math.exp(-eps)
        )
    return None


def check_domain_rate(lam):
    if not (0 < lam < 1):
        raise DomainError(f"rate must lie in (0, 1), got {lam}")
