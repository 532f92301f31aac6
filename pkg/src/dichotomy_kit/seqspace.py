"""Admissible Banach sequence spaces on finitely supported sequences.

Three families are supported: l^p (1 <= p < inf), l^inf and Orlicz sequence
spaces with the Luxemburg gauge norm.  Sequences live on the integers and are
represented by a finite window; everything outside the window is zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

from .errors import ConfigurationError, DomainError

__all__ = [
    "OrliczFunction",
    "SequenceSpaceSpec",
    "WindowedSequence",
    "lp",
    "linf",
    "orlicz",
    "space_norm",
    "orlicz_modular",
    "geometric_convolve",
    "parse_space",
]

LUXEMBURG_RTOL = 1e-12
TAIL_TOL = 1e-12


@dataclass(frozen=True)
class OrliczFunction:
    """Nondecreasing left-continuous ``phi`` and its primitive ``psi``.

    ``kind="table"``: ``phi`` is piecewise linear through ``(knots, values)``
    with ``knots[0] == 0`` and linear extrapolation of the last segment.
    ``kind="power"``: ``phi(t) = scale * p * t**(p-1)``, so ``psi(t) = scale * t**p``.
    """

    kind: str
    knots: tuple = ()
    values: tuple = ()
    p: float = 2.0
    scale: float = 1.0

    def __post_init__(self):
        if self.kind == "power":
            if not (math.isfinite(self.p) and self.p >= 1.0):
                raise ConfigurationError(f"Orlicz power exponent must be >= 1, got {self.p}")
            if not (math.isfinite(self.scale) and self.scale > 0):
                raise ConfigurationError("Orlicz power scale must be positive")
            return
        if self.kind != "table":
            raise ConfigurationError(f"unknown Orlicz function kind {self.kind!r}")
        t = np.asarray(self.knots, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if t.ndim != 1 or t.shape != v.shape or t.size < 2:
            raise ConfigurationError("phi table needs matching knots/values with >= 2 entries")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(v))):
            raise ConfigurationError("phi table must be finite (phi = +inf is not supported)")
        if t[0] != 0.0 or np.any(np.diff(t) <= 0):
            raise ConfigurationError("phi knots must start at 0 and increase strictly")
        if np.any(v < 0) or np.any(np.diff(v) < 0):
            raise ConfigurationError("phi must be nonnegative and nondecreasing")
        if np.all(v == v[0]):
            raise ConfigurationError("phi must be nonconstant")

    @classmethod
    def table(cls, knots, values):
        return cls("table", tuple(float(x) for x in knots), tuple(float(x) for x in values))

    @classmethod
    def power(cls, p, scale=1.0):
        return cls("power", p=float(p), scale=float(scale))

    def phi(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "power":
            return self.scale * self.p * np.power(t, self.p - 1.0)
        knots = np.asarray(self.knots)
        vals = np.asarray(self.values)
        slope_last = (vals[-1] - vals[-2]) / (knots[-1] - knots[-2])
        out = np.interp(t, knots, vals)
        beyond = t > knots[-1]
        return np.where(beyond, vals[-1] + slope_last * (t - knots[-1]), out)

    def psi(self, t):
        """Exact primitive of ``phi`` evaluated elementwise at ``t >= 0``."""
        t = np.asarray(t, dtype=float)
        if self.kind == "power":
            return self.scale * np.power(t, self.p)
        knots = np.asarray(self.knots)
        vals = np.asarray(self.values)
        seg_int = 0.5 * (vals[1:] + vals[:-1]) * np.diff(knots)
        cum = np.concatenate(([0.0], np.cumsum(seg_int)))
        slopes = np.diff(vals) / np.diff(knots)
        slopes = np.append(slopes, slopes[-1])
        idx = np.clip(np.searchsorted(knots, t, side="right") - 1, 0, knots.size - 1)
        dt = t - knots[idx]
        return cum[idx] + vals[idx] * dt + 0.5 * slopes[idx] * dt * dt

    def to_json(self):
        if self.kind == "power":
            return {"type": "power", "p": self.p, "scale": self.scale}
        return {"type": "table", "t": list(self.knots), "phi": list(self.values)}

    @classmethod
    def from_json(cls, obj):
        kind = obj.get("type", "table")
        if kind == "power":
            return cls.power(obj["p"], obj.get("scale", 1.0))
        if kind == "table":
            return cls.table(obj["t"], obj["phi"])
        raise ConfigurationError(f"unknown phi type {kind!r}")


@dataclass(frozen=True)
class SequenceSpaceSpec:
    """Which admissible sequence space, plus its constants ``N`` and ``alpha_B``.

    ``shift_constant_N`` bounds the norm of every shift; ``char_norm_alpha`` is
    the norm of the unit impulse at 0.  Both are computed on construction.
    """

    kind: str
    p: float = 2.0
    phi: OrliczFunction | None = None
    shift_constant_N: float = field(default=1.0, init=False)
    char_norm_alpha: float = field(default=1.0, init=False)

    def __post_init__(self):
        if self.kind == "lp":
            if not (isinstance(self.p, (int, float)) and math.isfinite(self.p) and self.p >= 1):
                raise ConfigurationError(f"l^p needs p >= 1, got {self.p!r}")
        elif self.kind == "linf":
            pass
        elif self.kind == "orlicz":
            if not isinstance(self.phi, OrliczFunction):
                raise ConfigurationError("Orlicz space needs an OrliczFunction")
            alpha = _luxemburg(self.phi, np.array([1.0]))
            object.__setattr__(self, "char_norm_alpha", float(alpha))
        else:
            raise ConfigurationError(f"unknown sequence space kind {self.kind!r}")
        # shifts permute the terms of every norm considered here
        object.__setattr__(self, "shift_constant_N", 1.0)

    @property
    def name(self):
        if self.kind == "lp":
            return "l%g" % self.p
        return self.kind

    @property
    def is_l2(self):
        return self.kind == "lp" and self.p == 2

    def to_json(self):
        if self.kind == "lp":
            return {"kind": "lp", "p": self.p}
        if self.kind == "linf":
            return {"kind": "linf"}
        return {"kind": "orlicz", "phi": self.phi.to_json()}

    @classmethod
    def from_json(cls, obj):
        kind = obj.get("kind")
        if kind == "lp":
            return lp(obj.get("p", 2.0))
        if kind == "linf":
            return linf()
        if kind == "orlicz":
            return orlicz(OrliczFunction.from_json(obj["phi"]))
        raise ConfigurationError(f"unknown sequence space kind {kind!r}")


def lp(p=2.0):
    if p == math.inf:
        return linf()
    return SequenceSpaceSpec("lp", p=float(p))


def linf():
    return SequenceSpaceSpec("linf", p=math.inf)


def orlicz(phi):
    return SequenceSpaceSpec("orlicz", phi=phi)


def parse_space(text, loader=None):
    """Parse ``l1``, ``l2``, ``l<p>``, ``linf`` or ``orlicz:<file.json>``.

    ``loader`` maps the Orlicz file name to its JSON object (defaults to reading
    the file from disk).
    """
    raw = text.strip()
    text = raw.lower()
    if text in ("linf", "l_inf", "inf"):
        return linf()
    if text.startswith("orlicz:"):
        path = raw.split(":", 1)[1]
        if loader is None:
            import json

            with open(path) as fh:
                obj = json.load(fh)
        else:
            obj = loader(path)
        if "kind" in obj:
            return SequenceSpaceSpec.from_json(obj)
        return orlicz(OrliczFunction.from_json(obj))
    if text.startswith("l"):
        try:
            p = float(text[1:])
        except ValueError:
            raise ConfigurationError(f"cannot parse space {text!r}") from None
        return lp(p)
    raise ConfigurationError(f"cannot parse space {text!r}")


@dataclass(frozen=True, eq=False)
class WindowedSequence:
    """A real sequence on Z that vanishes outside ``[offset, offset + len - 1]``."""

    offset: int
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float).reshape(-1)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "offset", int(self.offset))

    def __len__(self):
        return self.values.size

    @property
    def last(self):
        return self.offset + self.values.size - 1

    def __getitem__(self, n):
        i = n - self.offset
        if 0 <= i < self.values.size:
            return float(self.values[i])
        return 0.0

    def shift(self, m):
        """The sequence ``n -> s_{n+m}``."""
        return WindowedSequence(self.offset - m, self.values)

    def on(self, lo, hi):
        """Dense values on ``[lo, hi]``."""
        out = np.zeros(hi - lo + 1)
        a = max(lo, self.offset)
        b = min(hi, self.last)
        if a <= b:
            out[a - lo : b - lo + 1] = self.values[a - self.offset : b - self.offset + 1]
        return out

    def __eq__(self, other):
        if not isinstance(other, WindowedSequence):
            return NotImplemented
        lo = min(self.offset, other.offset)
        hi = max(self.last, other.last)
        return bool(np.array_equal(self.on(lo, hi), other.on(lo, hi)))

    @classmethod
    def impulse(cls, n=0, value=1.0):
        return cls(n, [value])


def _values(s):
    if isinstance(s, WindowedSequence):
        return s.values
    arr = np.asarray(s, dtype=float).reshape(-1)
    return arr


def orlicz_modular(phi, values):
    """``M_phi(s) = sum psi(|s_n|)``."""
    return float(np.sum(phi.psi(np.abs(values))))


def _luxemburg(phi, values, rtol=LUXEMBURG_RTOL):
    a = np.abs(values[values != 0])
    if a.size == 0:
        return 0.0

    def excess(c):
        return orlicz_modular(phi, a / c) - 1.0

    hi = float(a.max())
    if hi == 0.0:
        return 0.0
    lo = hi
    for _ in range(2000):
        if excess(hi) <= 0:
            break
        lo, hi = hi, hi * 2.0
    else:
        raise ConfigurationError("Luxemburg norm bracketing failed (psi too small)")
    if lo == hi:
        for _ in range(2000):
            if lo / 2.0 == 0.0:
                # subnormal entries: no finer bracket exists in double precision
                return hi
            lo = lo / 2.0
            if excess(lo) > 0:
                break
            hi = lo
        else:
            # psi vanishes near 0 on every entry: the gauge is 0 only for s = 0
            raise ConfigurationError("Luxemburg norm bracketing failed (psi vanishes)")
    # invariant: M(s/lo) > 1 >= M(s/hi)
    while hi - lo > rtol * hi:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if excess(mid) > 0:
            lo = mid
        else:
            hi = mid
    return hi


def space_norm(space, s):
    """Norm of a finitely supported sequence in ``space``.

    ``s`` may be a :class:`WindowedSequence` or any 1-D array of values (the
    offset is irrelevant for every norm here).
    """
    v = _values(s)
    if not np.all(np.isfinite(v)):
        raise DomainError("sequence contains non-finite entries")
    if v.size == 0:
        return 0.0
    if space.kind == "linf":
        return float(np.max(np.abs(v)))
    if space.kind == "lp":
        p = space.p
        if p == 1:
            return float(np.sum(np.abs(v)))
        a = np.abs(v)
        m = a.max()
        if m == 0:
            return 0.0
        if p == 2:
            # scaled to avoid underflow of the squares
            return float(m * np.linalg.norm(a / m))
        return float(m * np.sum((a / m) ** p) ** (1.0 / p))
    return float(_luxemburg(space.phi, v))


def geometric_convolve(space, s, lam, direction="causal", tail_tol=TAIL_TOL):
    """Discounted sums of a sequence and the matching a-priori norm bound.

    causal:      ``s1_n = sum_{m>=0} lam**m s_{n-m}``, bound ``N/(1-lam) ||s||``
    anticausal:  ``s2_n = sum_{m>=1} lam**m s_{n+m}``, bound ``N lam/(1-lam) ||s||``

    The infinite geometric tail outside the support of ``s`` is truncated after
    ``ceil(log(tail_tol)/log(lam))`` extra entries.

    Returns
    -------
    (WindowedSequence, float)
    """
    if not (0.0 < lam < 1.0):
        raise DomainError(f"lambda must lie in (0, 1), got {lam}")
    if direction not in ("causal", "anticausal"):
        raise DomainError(f"unknown direction {direction!r}")
    if not isinstance(s, WindowedSequence):
        s = WindowedSequence(0, s)
    norm = space_norm(space, s)
    N = space.shift_constant_N
    if norm == 0.0:
        return WindowedSequence(s.offset, np.zeros(len(s))), 0.0
    extra = max(1, int(math.ceil(math.log(tail_tol) / math.log(lam))))
    if direction == "causal":
        padded = np.concatenate((s.values, np.zeros(extra)))
        out = lfilter([1.0], [1.0, -lam], padded)
        return WindowedSequence(s.offset, out), N / (1.0 - lam) * norm
    rev = np.concatenate((s.values[::-1], np.zeros(extra)))
    # s2_n = lam * (s_{n+1} + s2_{n+1}): a causal filter on the reversed sequence, delayed by one
    acc = lfilter([0.0, lam], [1.0, -lam], rev)
    out = acc[::-1]
    # out[k] corresponds to index s.offset - extra + k
    return WindowedSequence(s.offset - extra, out), N * lam / (1.0 - lam) * norm
