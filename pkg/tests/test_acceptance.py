"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v -s`` or directly as a script.
Tolerances are fixed here and must not be relaxed to turn a line green.
"""

import dataclasses
import math
import time

import numpy as np
import pytest

from dichotomy_kit import cli
from dichotomy_kit.cocycle import catmap_projection, generate_example
from dichotomy_kit.dichotomy import (
    assemble,
    check_equivalence,
    classify_invertibility,
    extract_rates,
    inverse_norm,
    margin_for,
    recover_certificate,
)
from dichotomy_kit.formats import (
    cocycle_from_json,
    cocycle_to_json,
    dumps,
    loads,
    trajectory_from_json,
    trajectory_to_json,
)
from dichotomy_kit.nonuniform import (
    build_adapted_norm,
    certify_trajectory,
    check_adapted_norm,
    effective_A,
    epsilon0,
    estimate_CK,
    generate_trajectory,
    projection_bound_Z,
    recover_splitting,
)
from dichotomy_kit.seqspace import (
    OrliczFunction,
    WindowedSequence,
    geometric_convolve,
    linf,
    lp,
    orlicz,
    space_norm,
)

PHI = (1 + 5**0.5) / 2
EPSILONS = (0.01, 0.05, 0.1)

GREEN_TOL = 1e-8            # Green series vs direct solve, relative
C1_SECONDS = 60.0
PROJ_ORACLE_DIAG = 1e-8
PROJ_ORACLE_CAT = 1e-6
RATE_REL = 0.02
GROWTH_MIN = 2.0            # identity: inverse norm must at least double per doubling
SEQ_DRAWS = 1000
ORLICZ_TOL = 1e-10
RESIDUAL_TOL = 1e-10        # adapted-norm inequalities
Z_SLACK = 1.05
D_SLACK = 1.05
ANGLE_TOL = 1e-6
EPS_INDEP_TOL = 1e-8
C_GROWTH_FACTOR = 2.0


REPORTED = []


def report(k, ok, detail):
    line = f"CRITERION {k}: {'PASS' if ok else 'FAIL'}  {detail}"
    REPORTED.append(line)
    print("\n" + line)
    return line


def angle(u, v):
    c = abs(float(np.dot(u, v))) / (np.linalg.norm(u) * np.linalg.norm(v))
    return math.acos(min(c, 1.0))


def nonuniform_trajectory(eps, W=64):
    t = generate_trajectory("nonuniform_scalar_pair", (-W, W), lam=0.5, mu=2.0, eps=eps)
    # the recovered rates are sharpened to the generator's nominal ones
    return t, dataclasses.replace(recover_splitting(t), lam=0.5, mu=2.0)


# --------------------------------------------------------------------------- 1


FAM_SPAN = (-400, 400)
CORE_W = 64


def padded_window(c):
    """Section ``[-W-M, W+M]`` whose recovery core covers ``[-W, W]``."""
    r = extract_rates(c, lp(2), (-CORE_W, CORE_W))
    # the estimate from the short section is slightly optimistic; pad generously
    M = int(math.ceil(1.1 * margin_for(r.D_hat, r.lambda_hat, r.mu_hat))) + 2
    return (-CORE_W - M, CORE_W + M)


def equivalence_family():
    rng = np.random.default_rng(2024)
    fam = []
    for i in range(24):
        d = 2 + i % 3
        ns = int(rng.integers(1, d))
        a = rng.uniform(0.1, 0.9, ns)
        b = rng.uniform(1.1, 8.0, d - ns)
        fam.append((f"diag{i}", generate_example("diagonal", FAM_SPAN, entries=np.r_[a, b])))
    fam.append(("catmap", generate_example("catmap", FAM_SPAN)))
    for i, eps in enumerate((0.02, 0.05, 0.1, 0.15, 0.2)):
        c = generate_example("nonuniform_scalar_pair", FAM_SPAN, "matched", lam=0.5, mu=2.0, eps=eps)
        fam.append((f"nonuniform{i}", c))
    for i in range(20):
        if i % 2:
            base, params, gap = "catmap", {}, min(1 - 1 / PHI**2, PHI**2 - 1)
        else:
            a, b = rng.uniform(0.1, 0.9), rng.uniform(1.1, 8.0)
            base, params, gap = "diagonal", {"entries": [a, b]}, min(1 - a, b - 1)
        c = generate_example("perturbed", FAM_SPAN, base=base, base_params=params,
                             delta=0.05 * gap, seed=100 + i)
        fam.append((f"perturbed{i}", c))
    return fam


def test_criterion_1_equivalence():
    t0 = time.perf_counter()
    fam = equivalence_family()
    bad, worst = [], 0.0
    for name, c in fam:
        rep = check_equivalence(c, lp(2), padded_window(c), n_rhs=10, series_tol=GREEN_TOL)
        core = rep.direction_b.get("core", (0, -1))
        if not core[0] <= -CORE_W < CORE_W <= core[1]:
            bad.append(name + "(core)")
        worst = max(worst, rep.direction_a.get("green_vs_direct", math.inf))
        if not (rep.passes and set(rep.exercised) == {"a", "b"}):
            bad.append(name)
    dt = time.perf_counter() - t0
    ok = len(fam) >= 50 and not bad and worst <= GREEN_TOL and dt <= C1_SECONDS
    report(1, ok, f"{len(fam)} cocycles, failures={bad}, worst green/direct={worst:.2e}, {dt:.1f}s")
    assert ok


# --------------------------------------------------------------------------- 2


def test_criterion_2_projection_recovery():
    c = generate_example("diagonal", (-65, 64), entries=(0.5, 2.0))
    cert, _ = recover_certificate(c, (-64, 64))
    e_diag = float(np.abs(cert.projections - np.diag([1.0, 0.0])).max())
    c = generate_example("catmap", (-65, 64))
    cert, _ = recover_certificate(c, (-64, 64))
    e_cat = float(np.abs(cert.projections - catmap_projection()).max())
    ok = e_diag <= PROJ_ORACLE_DIAG and e_cat <= PROJ_ORACLE_CAT
    report(2, ok, f"diag max err={e_diag:.2e}, catmap max err={e_cat:.2e}")
    assert ok


# --------------------------------------------------------------------------- 3


def test_criterion_3_rates():
    rng = np.random.default_rng(3)
    W = 400
    worst_rel, violations, tested = 0.0, 0, 0
    for _ in range(10):
        a, b = rng.uniform(0.1, 0.9), rng.uniform(1.1, 8.0)
        c = generate_example("diagonal", (-W - 1, W), entries=(a, b))
        r = extract_rates(c, lp(2), (-W, W))
        exact = min(1 / a, b)
        worst_rel = max(worst_rel, abs(r.z_star - exact) / exact)
        for z in np.linspace(1.0, r.z_guaranteed, 5, endpoint=False):
            tested += 1
            if not classify_invertibility(c, lp(2), (-W, W), z=z, pivot=0).invertible:
                violations += 1
    ok = worst_rel <= RATE_REL and violations == 0
    report(3, ok, f"worst z* rel err={worst_rel:.4f}, guaranteed-region violations={violations}/{tested}")
    assert ok


# --------------------------------------------------------------------------- 4


def test_criterion_4_negative_control():
    c = generate_example("identity", (-129, 128), dim=2)
    norms = {W: inverse_norm(assemble(c, lp(2), (-W, W))).inverse_norm for W in (32, 64, 128)}
    r1, r2 = norms[64] / norms[32], norms[128] / norms[64]
    flagged = not classify_invertibility(c, lp(2), (-64, 64)).invertible
    ok = flagged and r1 >= GROWTH_MIN and r2 >= GROWTH_MIN
    report(4, ok, f"classified non-invertible={flagged}, growth 32->64={r1:.4f}, 64->128={r2:.4f} (need >= 2)")
    assert ok


# --------------------------------------------------------------------------- 5


SPACES = [lp(1), lp(2), lp(3), linf(), orlicz(OrliczFunction.table([0, 1, 2], [0, 1, 5]))]


def test_criterion_5_sequence_spaces():
    rng = np.random.default_rng(5)
    fails = {}
    for sp in SPACES:
        f = 0
        N = sp.shift_constant_N
        for _ in range(SEQ_DRAWS):
            n = int(rng.integers(1, 30))
            s, t = rng.standard_normal(n) * 10 ** rng.uniform(-3, 3), rng.standard_normal(n)
            a = rng.uniform(-10, 10)
            ns, nt = space_norm(sp, s), space_norm(sp, t)
            f += space_norm(sp, s + t) > (ns + nt) * (1 + 1e-10)
            f += abs(space_norm(sp, a * s) - abs(a) * ns) > 1e-10 * abs(a) * ns
            f += not ns > 0
            f += space_norm(sp, s * rng.uniform(0, 1, n)) > ns * (1 + 1e-10)
            w = WindowedSequence(int(rng.integers(-20, 20)), s)
            f += space_norm(sp, w.shift(int(rng.integers(-50, 50)))) > N * ns * (1 + 1e-12)
            lam = float(rng.uniform(0.01, 0.95))
            s1, b1 = geometric_convolve(sp, w, lam, "causal")
            s2, b2 = geometric_convolve(sp, w, lam, "anticausal")
            f += space_norm(sp, s1) > N / (1 - lam) * ns * (1 + 1e-10) or b1 > N / (1 - lam) * ns * (1 + 1e-12)
            f += space_norm(sp, s2) > N * lam / (1 - lam) * ns * (1 + 1e-10)
        fails[sp.name] = int(f)
    orl = 0.0
    for _ in range(SEQ_DRAWS):
        p = float(rng.uniform(1, 6))
        s = rng.standard_normal(int(rng.integers(1, 30)))
        ref = space_norm(lp(p), s)
        orl = max(orl, abs(space_norm(orlicz(OrliczFunction.power(p)), s) - ref) / ref)
    ok = not any(fails.values()) and orl <= ORLICZ_TOL
    report(5, ok, f"violations per space={fails}, Orlicz(t^p) vs l^p rel err={orl:.1e}")
    assert ok


# --------------------------------------------------------------------------- 6


def test_criterion_6_adapted_norm():
    rows = []
    ok = True
    cat = generate_trajectory("catmap", (-64, 64))
    hcat = recover_splitting(cat)
    for eps in EPSILONS:
        for name, (t, h) in (("catmap", (cat, hcat)), ("nonuniform", nonuniform_trajectory(eps))):
            chk = check_adapted_norm(t, build_adapted_norm(t, h, eps), n_vectors=1000, seed=0)
            Z = projection_bound_Z(h.lam, h.mu, epsilon0(h.lam, h.mu), effective_A(t.A_bound, h.lam, h.mu))
            res = {k: chk[k] for k in ("G1_lower", "G1_upper", "T1", "T3", "T4")}
            bad = [k for k, v in res.items() if v > RESIDUAL_TOL]
            if chk["G2_violations"]:
                bad.append("G2")
            if chk["Z"] > (Z_SLACK - 1) * Z:
                bad.append("Z")
            ok &= not bad
            rows.append(f"{name}@{eps}: " + ("ok" if not bad else
                        ",".join(f"{k}+{res[k]:.4f}" if k in res else k for k in bad)))
    report(6, ok, "; ".join(rows))
    assert ok


# --------------------------------------------------------------------------- 7


def test_criterion_7_certification():
    notes, ok = [], True
    cat = generate_trajectory("catmap", (-64, 64))
    hcat = recover_splitting(cat)
    ang = 0.0
    for B in hcat.bases:
        ang = max(ang, angle(B[:, 0], [1, -PHI]), angle(B[:, 1], [1, PHI - 1]))
    ok &= ang <= ANGLE_TOL
    notes.append(f"catmap angle err={ang:.1e}")

    worst = 0.0
    for eps in EPSILONS:
        for t, h in ((cat, hcat), nonuniform_trajectory(eps)):
            cert = certify_trajectory(t, h, eps, lp(2))
            ok &= cert.ok and cert.inverse_norm_bound <= D_SLACK * cert.D_theory
            worst = max(worst, cert.inverse_norm_bound / cert.D_theory)
    notes.append(f"max bound/D_theory={worst:.3f}")

    t = generate_trajectory("catmap", (-96, 96))
    h = recover_splitting(t)
    h1 = recover_splitting(t, norm=build_adapted_norm(t, h, 0.01))
    h2 = recover_splitting(t, norm=build_adapted_norm(t, h, 0.1))
    lo, hi = max(h1.n_min, h2.n_min), min(h1.n_max, h2.n_max)
    dP = float(np.abs(h1.restrict(lo, hi).projections - h2.restrict(lo, hi).projections).max())
    ok &= dP <= EPS_INDEP_TOL
    notes.append(f"eps-independence={dP:.1e}")

    tempered, growth = True, 1.0
    for eps in EPSILONS:
        t, h = nonuniform_trajectory(eps)
        ck = estimate_CK(t, h, eps, tempered_eps=2 * eps)
        tempered &= ck.tempered_ok
        k = np.arange(h.n_min, h.n_max + 1)
        r = ck.Cfun / np.exp(eps * np.abs(k))
        growth = max(growth, float(r.max()), float(1 / r.min()))
    tempered &= estimate_CK(cat, hcat, 0.05, tempered_eps=0.1).tempered_ok
    ok &= tempered and growth <= C_GROWTH_FACTOR
    notes.append(f"tempered(2eps)={tempered}, C/e^(eps|k|) within factor {growth:.3f}")
    report(7, ok, ", ".join(notes))
    assert ok


# --------------------------------------------------------------------------- 8


def test_criterion_8_determinism(tmp_path):
    def run(tag):
        d = tmp_path / tag
        d.mkdir()
        out = []
        for args in (
            ["generate", "--kind", "perturbed", "--base", "catmap", "--delta", "0.05", "--seed", "9",
             "--out", str(d / "c.json")],
            ["analyze", "--input", str(d / "c.json"), "--report", str(d / "a.json"), "--csv", str(d / "a.csv")],
            ["generate", "--kind", "nonuniform_scalar_pair", "--orbit", "--eps", "0.05", "--out", str(d / "o.json")],
            ["certify", "--orbit", str(d / "o.json"), "--epsilon", "0.05", "--report", str(d / "r.json"),
             "--csv", str(d / "r.csv"), "--n-vectors", "200", "--seed", "4"],
        ):
            assert cli.main(args) == 0
        for f in ("c.json", "a.json", "a.csv", "o.json", "r.json", "r.csv"):
            out.append((d / f).read_bytes().replace(str(d).encode(), b""))
        return out

    same = run("first") == run("second")
    rng = np.random.default_rng(8)
    lossless = True
    for _ in range(20):
        c = generate_example("perturbed", (-5, 5), base="catmap", delta=float(rng.uniform(0, 1)),
                             seed=int(rng.integers(1 << 30)))
        back = cocycle_from_json(loads(dumps(cocycle_to_json(c))))
        lossless &= np.array_equal(back.maps, c.maps) and back.n_min == c.n_min
        t = generate_trajectory("perturbed", (-5, 5), base="catmap", delta=float(rng.uniform(0, 1)),
                                seed=int(rng.integers(1 << 30)))
        tb, _ = trajectory_from_json(loads(dumps(trajectory_to_json(t))))
        lossless &= np.array_equal(tb.derivs, t.derivs) and tb.A_bound == t.A_bound
    ok = same and lossless
    report(8, ok, f"byte-identical reruns={same}, schema round-trip lossless={lossless}")
    assert ok


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-s"]))
