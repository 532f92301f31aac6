import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from dichotomy_kit.cocycle import (
    CATMAP,
    Cocycle,
    DichotomyCertificate,
    NormSequence,
    catmap_projection,
    exact_certificate,
    generate_example,
    propagate,
    verify_certificate,
    weighted_opnorm,
)
from dichotomy_kit.errors import ConfigurationError, SingularityError, UsageError


def diag_cert(lo, hi, P=(1.0, 0.0), D=1.0, lam=0.5, mu=2.0):
    return DichotomyCertificate(lo, np.broadcast_to(np.diag(P), (hi - lo + 1, len(P), len(P))), D, lam, mu)


def test_propagate_identity_at_equal_indices():
    c = generate_example("catmap", (-5, 5))
    assert_allclose(propagate(c, 2, 2), np.eye(2))


def test_propagate_diagonal_forward():
    c = generate_example("diagonal", (-5, 5), entries=(0.5, 2))
    assert_allclose(propagate(c, 3, 0), np.diag([1 / 8, 8]), rtol=1e-15)


def test_propagate_backward_on_unstable():
    c = generate_example("diagonal", (-5, 5), entries=(0.5, 2))
    assert_allclose(propagate(c, 0, 2, diag_cert(-5, 5)), np.diag([0, 0.25]), atol=1e-15)


def test_propagate_backward_needs_certificate():
    c = generate_example("diagonal", (-5, 5), entries=(0.5, 2))
    with pytest.raises(UsageError):
        propagate(c, 0, 2)
    with pytest.raises(UsageError):
        propagate(c, 0, 9)


def test_propagate_backward_singular():
    c = Cocycle(0, np.broadcast_to(np.diag([0.5, 0.0]), (4, 2, 2)))
    with pytest.raises(SingularityError) as info:
        propagate(c, 0, 2, diag_cert(0, 4))
    assert info.value.condition == math.inf


@given(
    seed=st.integers(0, 2**31),
    idx=st.lists(st.integers(-6, 6), min_size=3, max_size=3, unique=True),
)
def test_cocycle_law(seed, idx):
    c = generate_example("perturbed", (-6, 6), base="catmap", delta=0.3, seed=seed)
    m, k, n = sorted(idx)
    assert_allclose(propagate(c, n, k) @ propagate(c, k, m), propagate(c, n, m), rtol=1e-12, atol=1e-12)


def test_verify_diagonal_exact():
    c = generate_example("diagonal", (-20, 20), entries=(0.5, 2))
    rep = verify_certificate(c, diag_cert(-20, 20))
    assert rep.passes
    for key in ("intertwining", "stable_excess", "unstable_excess", "idempotence"):
        assert rep.residuals[key] <= 1e-12
    assert rep.residuals["rank_variation"] == 0


def test_verify_identity_fails():
    c = generate_example("identity", (-10, 10), dim=2)
    cert = diag_cert(-10, 10, P=(1.0, 1.0), lam=0.5)
    rep = verify_certificate(c, cert)
    assert not rep.passes
    assert rep.residuals["stable_excess"] >= 1 / 0.5 - 1 - 1e-12


def test_catmap_spectrum():
    w = np.sort(np.linalg.eigvals(generate_example("catmap", (0, 3)).A(1)).real)
    assert_allclose(w, [(3 - 5**0.5) / 2, (3 + 5**0.5) / 2], rtol=1e-14)
    P = catmap_projection()
    assert_allclose(P @ P, P, atol=1e-15)
    assert_allclose(CATMAP @ P, P @ CATMAP, atol=1e-15)


def test_catmap_exact_certificate_passes():
    c = generate_example("catmap", (-30, 30))
    assert verify_certificate(c, exact_certificate("catmap", (-30, 30))).passes


def test_nonuniform_maps_around_zero():
    lam, mu, eps = 0.5, 2.0, 0.1
    c = generate_example("nonuniform_scalar_pair", (-3, 3), lam=lam, mu=mu, eps=eps)
    assert_allclose(c.A(0), np.diag([lam, mu * math.exp(-2 * eps)]), rtol=1e-15)
    assert_allclose(c.A(-1), np.diag([lam * math.exp(2 * eps), mu]), rtol=1e-15)


def test_nonuniform_growth_law():
    lam, mu, eps = 0.4, 3.0, 0.15
    c = generate_example("nonuniform_scalar_pair", (-12, 12), lam=lam, mu=mu, eps=eps)
    for m in range(-12, 13):
        for n in range(m, 13):
            exact = (lam * math.exp(eps)) ** (n - m) * math.exp(-eps * (abs(n) - abs(m)))
            assert_allclose(propagate(c, n, m)[0, 0], exact, rtol=1e-10)


def test_nonuniform_flat_fails_weighted_passes():
    lam, mu, eps = 0.5, 2.0, 0.1
    core = (-30, 30)
    cert = exact_certificate("nonuniform_scalar_pair", core, lam=lam, mu=mu, eps=eps)
    flat = generate_example("nonuniform_scalar_pair", core, lam=lam, mu=mu, eps=eps)
    matched = generate_example("nonuniform_scalar_pair", core, "matched", lam=lam, mu=mu, eps=eps)
    assert not verify_certificate(flat, cert).passes
    assert verify_certificate(matched, cert).passes


def test_weighted_opnorm_matches_definition(rng):
    W = rng.standard_normal((3, 2, 2))
    W = W @ np.swapaxes(W, 1, 2) + np.eye(2)
    ns = NormSequence.spd(0, 2, W)
    M = rng.standard_normal((2, 2))
    v = rng.standard_normal((2, 2000))
    ratio = np.sqrt(np.einsum("in,ij,jn->n", M @ v, W[2], M @ v) / np.einsum("in,ij,jn->n", v, W[0], v))
    op = weighted_opnorm(ns, 2, M, 0)
    assert ratio.max() <= op * (1 + 1e-12)
    assert ratio.max() >= 0.95 * op


@pytest.mark.parametrize(
    "make",
    [
        lambda: NormSequence.spd(0, 1, np.array([np.eye(2), -np.eye(2)])),
        lambda: NormSequence.scalar(0, 1, 2, np.array([1.0, 0.0])),
        lambda: generate_example("nonuniform_scalar_pair", (0, 4), lam=1.2, mu=2.0, eps=0.1),
        lambda: generate_example("diagonal", (0, 4), entries=(np.nan, 2)),
        lambda: generate_example("spiral", (0, 4)),
        lambda: generate_example("catmap", (3, 3)),
        lambda: DichotomyCertificate(0, np.zeros((2, 2, 2)), 1.0, 1.5, 2.0),
    ],
)
def test_configuration_errors(make):
    with pytest.raises(ConfigurationError):
        make()


def test_perturbed_is_deterministic():
    a = generate_example("perturbed", (-8, 8), base="catmap", delta=0.05, seed=3)
    b = generate_example("perturbed", (-8, 8), base="catmap", delta=0.05, seed=3)
    assert np.array_equal(a.maps, b.maps)
    assert np.abs(a.maps - CATMAP).max() <= 0.05
