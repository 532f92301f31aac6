import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from dichotomy_kit.errors import ConfigurationError, DomainError
from dichotomy_kit.seqspace import (
    OrliczFunction,
    SequenceSpaceSpec,
    WindowedSequence,
    geometric_convolve,
    linf,
    lp,
    orlicz,
    parse_space,
    space_norm,
)

SPACES = [
    lp(1),
    lp(2),
    lp(3.5),
    linf(),
    orlicz(OrliczFunction.table([0, 1, 2], [0, 1, 5])),
    orlicz(OrliczFunction.power(3)),
]
finite = st.floats(-1e3, 1e3, allow_nan=False)
seqs = st.lists(finite, min_size=1, max_size=30).map(np.array)


def test_lp_pythagoras():
    assert space_norm(lp(2), WindowedSequence(0, [3, 4])) == pytest.approx(5.0, rel=1e-15)


def test_linf_max():
    assert space_norm(linf(), WindowedSequence(-1, [1, -7, 2])) == 7.0


def test_orlicz_quadratic_matches_l2():
    sp = orlicz(OrliczFunction.table([0, 1], [0, 2]))  # phi(t) = 2t, psi(t) = t^2
    assert_allclose(space_norm(sp, WindowedSequence(0, [3, 4])), 5.0, rtol=1e-11)


def test_constants():
    for sp in SPACES:
        assert sp.shift_constant_N == 1.0
    assert lp(2).char_norm_alpha == 1.0
    sp = orlicz(OrliczFunction.power(2, scale=4.0))  # psi = 4t^2: 4/c^2 = 1 at c = 2
    assert_allclose(sp.char_norm_alpha, 2.0, rtol=1e-11)


@pytest.mark.parametrize("p", [0.5, float("nan"), -1])
def test_bad_p(p):
    with pytest.raises(ConfigurationError):
        lp(p)


@pytest.mark.parametrize(
    "knots, values",
    [([0, 1], [1, 1]), ([1, 2], [0, 1]), ([0, 1, 2], [0, 2, 1]), ([0, 1], [0, math.inf])],
)
def test_bad_orlicz_table(knots, values):
    with pytest.raises(ConfigurationError):
        OrliczFunction.table(knots, values)


def test_psi_is_exact_primitive():
    f = OrliczFunction.table([0, 1, 3], [0, 2, 3])
    t = np.linspace(0, 5, 41)
    fine = np.linspace(0, 5, 200001)
    num = np.concatenate(([0], np.cumsum(0.5 * (f.phi(fine[1:]) + f.phi(fine[:-1])) * np.diff(fine))))
    assert_allclose(f.psi(t), np.interp(t, fine, num), atol=1e-8)


@pytest.mark.parametrize("sp", SPACES, ids=lambda s: s.name)
@given(s=seqs, t=seqs, a=st.floats(-50, 50, allow_nan=False))
def test_norm_axioms(sp, s, t, a):
    n = min(s.size, t.size)
    s, t = s[:n], t[:n]
    ns, nt = space_norm(sp, s), space_norm(sp, t)
    assert space_norm(sp, s + t) <= (ns + nt) * (1 + 1e-10) + 1e-300
    assert_allclose(space_norm(sp, a * s), abs(a) * ns, rtol=1e-10, atol=1e-300)
    assert (ns == 0) == (not np.any(s))


@pytest.mark.parametrize("sp", SPACES, ids=lambda s: s.name)
@given(s=seqs, shrink=st.lists(st.floats(0, 1), min_size=30, max_size=30))
def test_monotone(sp, s, shrink):
    smaller = s * np.array(shrink[: s.size])
    assert space_norm(sp, smaller) <= space_norm(sp, s) * (1 + 1e-10)


@pytest.mark.parametrize("sp", SPACES, ids=lambda s: s.name)
@given(s=seqs, m=st.integers(-100, 100))
def test_shift_invariance(sp, s, m):
    w = WindowedSequence(3, s)
    assert space_norm(sp, w.shift(m)) == space_norm(sp, w)


@given(s=seqs, p=st.floats(1, 6))
def test_orlicz_power_equals_lp(s, p):
    assert_allclose(space_norm(orlicz(OrliczFunction.power(p)), s), space_norm(lp(p), s), rtol=1e-10)


def test_convolve_impulse():
    out, bound = geometric_convolve(lp(2), WindowedSequence.impulse(0), 0.5, "causal")
    n = np.arange(out.offset, out.last + 1)
    assert_allclose(out.on(0, 40), 0.5 ** np.arange(41), atol=1e-12)
    assert out[-1] == 0.0
    assert bound == pytest.approx(2.0)
    assert n[0] == 0


def test_convolve_anticausal_impulse():
    out, bound = geometric_convolve(lp(1), WindowedSequence.impulse(0), 0.5, "anticausal")
    assert_allclose(out.on(-30, -1), 0.5 ** np.arange(30, 0, -1), atol=1e-12)
    assert_allclose(out.on(0, 5), 0.0)
    assert bound == pytest.approx(1.0)


def test_convolve_zero():
    out, bound = geometric_convolve(linf(), WindowedSequence(0, [0, 0]), 0.3)
    assert bound == 0.0 and not np.any(out.values)


def test_convolve_constant_linf_brute_force():
    s = WindowedSequence(-20, np.ones(41))
    out, bound = geometric_convolve(linf(), s, 0.5)
    lo, hi = -20, 80
    brute = np.array([sum(0.5**m * s[n - m] for m in range(0, 200)) for n in range(lo, hi)])
    assert_allclose(out.on(lo, hi - 1), brute, atol=1e-12)
    assert space_norm(linf(), out) <= 2.0 + 1e-12 and bound == 2.0


@pytest.mark.parametrize("lam", [0.0, 1.0, -0.5, 2.0])
def test_convolve_domain(lam):
    with pytest.raises(DomainError):
        geometric_convolve(lp(2), [1.0], lam)


@pytest.mark.parametrize("sp", SPACES, ids=lambda s: s.name)
def test_convolve_bounds_random(sp):
    rng = np.random.default_rng(7)
    for _ in range(1000):
        s = WindowedSequence(int(rng.integers(-10, 10)), rng.standard_normal(int(rng.integers(1, 25))))
        lam = float(rng.uniform(0.01, 0.95))
        for direction in ("causal", "anticausal"):
            out, bound = geometric_convolve(sp, s, lam, direction)
            assert space_norm(sp, out) <= bound + 1e-12


def test_parse_and_json_roundtrip(tmp_path):
    table = tmp_path / "phi.json"
    table.write_text('{"type": "table", "t": [0, 1, 2], "phi": [0, 1, 4]}')
    for text in ["l1", "l2", "l3.5", "linf", f"orlicz:{table}"]:
        sp = parse_space(text)
        assert SequenceSpaceSpec.from_json(sp.to_json()) == sp
    with pytest.raises(ConfigurationError):
        parse_space("banach")
