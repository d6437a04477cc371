"""Acceptance criteria 1-11.

Each test appends one PASS/FAIL line (plus optional INFO lines) to the
report printed at the end of the pytest run, then asserts.  Run just this
file with ``pytest tests/test_acceptance.py`` to see the report on its own.

Random instances are drawn from fixed seeds.  Where a criterion measures a
geometric tail rate, instances whose predicted rate exceeds 0.98 are
rejected before sampling: a 400-step horizon cannot resolve slower rates.
"""
import os
import time
from pathlib import Path

import numpy as np
import pytest

from sgdm_volterra.ingest import load_idx, parity_target, precondition_rows
from sgdm_volterra.rates import (ALGORITHMIC, DIVERGENT, PROBLEM, advise, heatmap,
                                 lower_bound_check, malthusian_exponent, measured_rate,
                                 rate_report)
from sgdm_volterra.simulate import (LeastSquaresProblem, SgdmConfig, compare_to_theory,
                                    gen_gaussian_problem, predict_for_problem, run_ensemble)
from sgdm_volterra.spectrum import condition_report, explicit_spectrum, mp_spectrum
from sgdm_volterra.volterra import (Hyperparams, forcing_h_series, forcing_oracle, forcing_series,
                                    kernel_norm, kernel_series, kernel_transform,
                                    learning_rate_bound, mode_coefficients, mode_transfer,
                                    solve_volterra)

from conftest import random_explicit, random_params

MAX_RATE = 0.98


def convergent_sample(rng, count, make_spectrum, max_rate=MAX_RATE):
    """``count`` (spectrum, params, report) triples with a rate at most ``max_rate``."""
    out = []
    while len(out) < count:
        sp = make_spectrum(rng)
        p = random_params(rng, sp, convergent=False)
        rep = rate_report(sp, p)
        if rep.regime == DIVERGENT or rep.rate > max_rate:
            continue
        out.append((sp, p, rep))
    return out


# ---------------------------------------------------------------------------
# 1. Closed-form forcing against explicit 3x3 matrix products

def matrix_product_forcing(sp, p, horizon):
    """F(1..horizon) by iterating every mode's transfer matrix."""
    total = np.zeros(horizon + 1)
    for s, w in zip(sp.values, sp.weights):
        mt = mode_transfer(float(s), p)
        v = mt.v_init
        for t in range(1, horizon + 1):
            total[t] += 0.5 * w * v[0]
            v = mt.matrix @ v
    return total


def test_01_oracle_equivalence(acceptance):
    rng = np.random.default_rng(1)
    horizon = 200
    worst = 0.0
    for _ in range(50):
        sp = random_explicit(rng, 32)
        p = random_params(rng, sp, convergent=False)
        f = forcing_series(sp, p, horizon)
        ref = matrix_product_forcing(sp, p, horizon)
        for t in (1, 17, horizon):
            assert ref[t] == pytest.approx(forcing_oracle(sp, p, t), rel=1e-13, abs=1e-300)
        err = np.abs(f[1:] - ref[1:]) / (1.0 + np.abs(f[1:]))
        worst = max(worst, float(err.max()))
    ok = acceptance("1", "oracle equivalence, 50 spectra, t<=200", worst <= 1e-10,
                    f"max |F - oracle|/(1+|F|) = {worst:.2e} (tol 1e-10)")
    assert ok


# ---------------------------------------------------------------------------
# 2. Momentum-free reduction

def test_02_no_momentum_reduction(acceptance):
    rng = np.random.default_rng(2)
    horizon = 200
    t = np.arange(horizon + 1)
    worst = 0.0
    for _ in range(200):
        sp = random_explicit(rng, 32)
        zeta = float(rng.uniform(0.05, 0.95))
        gamma = float(rng.uniform(0.01, 0.99) / (zeta * sp.sigma2_max))
        p = Hyperparams(gamma, 0.0, zeta)
        decay = (1.0 - gamma * zeta * sp.values)[None, :] ** (2 * t[:, None])
        for k, got in ((0, forcing_h_series(sp, p, horizon, 0)),
                       (1, forcing_h_series(sp, p, horizon, 1)),
                       (2, kernel_series(sp, p, horizon) / (gamma ** 2 * zeta * (1 - zeta)))):
            expected = decay @ (sp.weights * sp.values ** k)
            worst = max(worst, float(np.max(np.abs(got - expected))))
    ok = acceptance("2", "momentum-free reduction of h0, h1, H2", worst <= 1e-12,
                    f"max abs deviation = {worst:.2e} over 200 sweeps (tol 1e-12)")
    assert ok


# ---------------------------------------------------------------------------
# 3. Kernel norm, its bound, and kernel positivity

def geometric_tail_bound(sp, p, horizon):
    """Bound on sum_{t > horizon} |K(t)| from the per-mode root expansion.

    ``K_j(t) = s_j (2 / disc_j) (-delta^{t+1} + (lambda2^{t+1} + lambda3^{t+1}) / 2)``
    """
    c = mode_coefficients(sp.values, p)
    scale = p.gamma ** 2 * p.zeta * (1 - p.zeta) * sp.weights * sp.values ** 2
    keep = scale > 0
    amp = np.abs(2.0 * scale[keep] / c.discriminant[keep])
    bound = 0.0
    n = horizon + 2
    for lam, a in ((np.full(keep.sum(), p.delta), 1.0), (np.abs(c.lambda2[keep]), 0.5),
                   (np.abs(c.lambda3[keep]), 0.5)):
        bound += float(np.sum(a * amp * lam ** n / (1.0 - lam)))
    return bound


def test_03_kernel_norm(acceptance):
    rng = np.random.default_rng(3)
    horizon = 4000
    worst_excess = -np.inf
    max_norm = 0.0
    min_kernel = np.inf
    for _ in range(1000):
        sp = random_explicit(rng, 32)
        p = random_params(rng, sp, convergent=True)
        assert p.gamma < learning_rate_bound(sp, p)
        norm = kernel_norm(sp, p)
        k = kernel_series(sp, p, horizon)
        gap = abs(norm - k.sum())
        allowed = geometric_tail_bound(sp, p, horizon) + 1e-12 * max(norm, 1e-300)
        worst_excess = max(worst_excess, gap - allowed)
        max_norm = max(max_norm, norm)
        min_kernel = min(min_kernel, float(k.min()))
    ok_bound = worst_excess <= 0
    ok_norm = max_norm < 1
    ok_pos = min_kernel >= -1e-12
    ok = acceptance("3", "kernel norm on 1000 instances", ok_bound and ok_norm and ok_pos,
                    f"series gap within tail bound: {ok_bound}; max norm = {max_norm:.6f} < 1; "
                    f"min K(t) = {min_kernel:.2e} >= -1e-12")
    assert ok


# ---------------------------------------------------------------------------
# 4. Limit value

def test_04_limit_value(acceptance):
    rng = np.random.default_rng(4)
    worst = 0.0
    checked = 0
    while checked < 30:
        r = float(rng.choice([0.25, 0.5, 0.8]))
        sp = mp_spectrum(r, 256)
        p = random_params(rng, sp)
        rep = rate_report(sp, p)
        if rep.regime == DIVERGENT or rep.rate > MAX_RATE:
            continue
        sol = solve_volterra(sp, p.replace(d_over_n=r), 2000)
        assert sol.psi_infinity > 0
        worst = max(worst, abs(sol.psi[-1] - sol.psi_infinity))
        checked += 1
    zero_ok = True
    for r in (1.0, 2.0, 4.0):
        sp = mp_spectrum(r, 256)
        sol = solve_volterra(sp, random_params(rng, sp).replace(d_over_n=r), 10)
        zero_ok &= sol.psi_infinity == 0.0
    ok = acceptance("4", "limit value at T=2000", worst < 1e-8 and zero_ok,
                    f"max |psi(T) - psi_inf| = {worst:.2e} (tol 1e-8) on 30 instances with d/n<1; "
                    f"psi_inf = 0 for d/n >= 1: {zero_ok}")
    assert ok


# ---------------------------------------------------------------------------
# 5. Malthusian exponent

def test_05_malthusian(acceptance):
    sp1 = explicit_spectrum([1.0])
    p1 = Hyperparams(0.5, 0.0, 0.5)
    xi1 = malthusian_exponent(sp1, p1)
    single_ok = abs(xi1 - 5.0 / 3.0) <= 1e-10

    rng = np.random.default_rng(5)
    gt_ok = True
    for _ in range(300):
        sp = random_explicit(rng, 16)
        rep = rate_report(sp, random_params(rng, sp))
        if rep.malthusian is not None:
            gt_ok &= rep.xi_inverse > rep.lambda2_max

    sample = convergent_sample(rng, 20, lambda g: random_explicit(g, 16))
    resid, err_literal, err_tail = [], [], []
    for sp, p, rep in sample:
        if rep.malthusian is not None:
            resid.append(abs(kernel_transform(sp, p, rep.malthusian) - 1.0))
        mr = measured_rate(solve_volterra(sp, p, 400))
        err_literal.append(abs(mr - rep.rate))
        err_tail.append(abs(mr - rep.tail_rate))
    resid_ok = max(resid, default=0.0) <= 1e-10
    fails = int(np.sum(np.array(err_literal) > 2e-2))
    ok = single_ok and gt_ok and resid_ok and fails == 0
    acceptance("5", "Malthusian exponent", ok,
               f"single-mode xi = {xi1:.12f} (5/3 within 1e-10: {single_ok}); "
               f"1/xi > lambda2_max always: {gt_ok}; max |Ktilde(xi) - 1| = "
               f"{max(resid, default=0.0):.1e} over {len(resid)} roots; measured vs "
               f"max(lambda2_max, 1/xi): {fails}/20 outside 2e-2, max error {max(err_literal):.3e}")
    acceptance("5b", "measured tail vs max(lambda2_max, 1/z) with z Ktilde(z) = 1", None,
               f"{int(np.sum(np.array(err_tail) > 2e-2))}/20 outside 2e-2, "
               f"max error {max(err_tail):.3e}")
    assert ok


# ---------------------------------------------------------------------------
# 6. Full-batch equivalence

def test_06_full_batch(acceptance):
    prob = gen_gaussian_problem(200, 100, seed=6)
    cfg = SgdmConfig(0.4, 0.5, 1.0, 100, seed=6)
    ens = run_ensemble(prob, cfg, 1)
    sol = predict_for_problem(prob, cfg, "realized")
    assert np.all(sol.kernel == 0.0)
    rel = float(np.max(np.abs(ens.losses[0] - sol.psi) / sol.psi))
    ok = acceptance("6", "full-batch equivalence, 200x100, T=100", rel <= 1e-8,
                    f"max pointwise relative deviation = {rel:.2e} (tol 1e-8)")
    assert ok


# ---------------------------------------------------------------------------
# 7. Concentration

def test_07_concentration(acceptance):
    start = time.perf_counter()
    medians = {}
    for n in (500, 1000, 2000):
        prob = gen_gaussian_problem(n, 2 * n, seed=7)
        cfg = SgdmConfig(0.4, 0.5, 0.5, 60, seed=70 + n)
        ens = run_ensemble(prob, cfg, 30)
        rep = compare_to_theory(ens, predict_for_problem(prob, cfg, "realized"))
        medians[n] = rep.median_relative
    elapsed = time.perf_counter() - start
    m = [medians[n] for n in (500, 1000, 2000)]
    ok = m[0] < 8e-2 and m[2] < 5e-2 and m[0] > m[1] > m[2]
    acceptance("7", "concentration, r=2, 30 runs, T=60", ok,
               "median sup|f - psi|/psi(0) = " + ", ".join(f"{v:.4f} (n={n})" for n, v in medians.items())
               + f"; need <0.08 at 500, <0.05 at 2000, decreasing; {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 8. ICR saturation

def test_08_icr_saturation(acceptance):
    details = []
    ok = True
    for r in (1.25, 2.0, 4.0):
        sp = mp_spectrum(r, 1024)
        cond = condition_report(sp)
        icr_ok = abs(cond.icr - r / (r - 1)) <= 1e-4
        star = cond.saturating_zeta
        above = [advise(sp, z).delta_good for z in np.linspace(star, 0.999, 25)[1:]]
        below = [advise(sp, z).delta_good for z in np.linspace(0.01, star, 25)[:-1]]
        flat = float(np.ptp(above)) <= 1e-6
        improving = bool(np.all(np.diff(below) < 0))
        ok &= icr_ok and flat and improving
        details.append(f"r={r}: ICR={cond.icr:.6f}, zeta*={star:.4f}, flat above: {flat}, "
                       f"strictly improving below: {improving}")
    acceptance("8", "ICR saturation", ok, "; ".join(details))
    assert ok


# ---------------------------------------------------------------------------
# 9. Lower bound

def test_09_lower_bound(acceptance):
    rng = np.random.default_rng(9)
    spectra = [mp_spectrum(r, 256) for r in (1.25, 2.0, 4.0)]
    passed = checked = 0
    while checked < 1000:
        sp = spectra[checked % 3]
        cond = condition_report(sp)
        zeta = float(rng.uniform(0.01, min(0.5, cond.icr)))
        delta = float(rng.uniform(0.0, 0.99))
        gamma = float(rng.uniform(0.0, 1.0) * min((1 + delta) / (zeta * sp.sigma2_max),
                                                  (1 - delta) / ((1 - zeta) * sp.mean)))
        p = Hyperparams(gamma, delta, zeta)
        if gamma == 0 or rate_report(sp, p).regime == DIVERGENT:
            continue
        passed += lower_bound_check(sp, p, const=8.0)
        checked += 1
    ok = acceptance("9", "lower bound with C=8", passed == checked,
                    f"{passed}/{checked} random convergent instances satisfy the bound")
    assert ok


# ---------------------------------------------------------------------------
# 10. Heatmap regimes

def test_10_heatmap(acceptance):
    sp = mp_spectrum(2.0)
    deltas = np.linspace(0.0, 0.99, 64)
    gammas = np.geomspace(1e-2, 1e1, 64)
    start = time.perf_counter()
    full = heatmap(sp, 1.0, deltas, gammas)
    small = heatmap(sp, 0.25, deltas, gammas)
    elapsed = time.perf_counter() - start
    full_ok = ALGORITHMIC not in set(full.field("regime").ravel())
    regimes = small.field("regime")
    n_alg = int(np.sum(regimes == ALGORITHMIC))

    rng = np.random.default_rng(10)
    rates = small.field("rate")
    errs, errs_tail = [], []
    for regime in (PROBLEM, ALGORITHMIC):
        cells = np.argwhere((regimes == regime) & (rates <= MAX_RATE))
        for i, j in cells[rng.choice(len(cells), size=min(3, len(cells)), replace=False)]:
            rep = small.reports[i][j]
            sol = solve_volterra(sp, Hyperparams(gammas[j], deltas[i], 0.25), 400)
            mr = measured_rate(sol)
            errs.append(abs(mr - rep.rate))
            errs_tail.append(abs(mr - rep.tail_rate))
    fails = int(np.sum(np.array(errs) > 2e-2))
    ok = full_ok and n_alg > 0 and fails == 0 and elapsed < 60
    acceptance("10", "heatmap regimes, 64x64", ok,
               f"zeta=1 algorithmic cells: none = {full_ok}; zeta=0.25 algorithmic cells: {n_alg}; "
               f"sampled rates vs measured: {fails}/{len(errs)} outside 2e-2, max error "
               f"{max(errs):.3e}; grids took {elapsed:.1f}s")
    acceptance("10b", "sampled cells, measured vs max(lambda2_max, 1/z)", None,
               f"{int(np.sum(np.array(errs_tail) > 2e-2))}/{len(errs_tail)} outside 2e-2, "
               f"max error {max(errs_tail):.3e}")
    assert ok


# ---------------------------------------------------------------------------
# 11. MNIST pipeline

MNIST_NAMES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")


def find_mnist():
    """Training images and labels under ``$MNIST_DIR`` (default ``./data/mnist``)."""
    root = Path(os.environ.get("MNIST_DIR", "data/mnist"))
    found = []
    for name in MNIST_NAMES:
        for candidate in (root / name, root / (name + ".gz"),
                          root / name.replace("-idx", ".idx"),
                          root / (name.replace("-idx", ".idx") + ".gz")):
            if candidate.exists():
                found.append(candidate)
                break
    return tuple(found) if len(found) == 2 else None


def mnist_pipeline(images, labels, runs=10, epochs=3):
    """Preconditioning, parity balance and band-bracketing statistics."""
    data = precondition_rows(load_idx(images, labels))
    rows = data.samples
    rows_ok = bool(np.all(np.abs(rows.sum(axis=1)) < 1e-10)
                   and np.all(np.abs(np.linalg.norm(rows, axis=1) - 1) < 1e-10))
    b = parity_target(data)
    counts = (int(np.sum(b > 0)), int(np.sum(b < 0)))
    prob = LeastSquaresProblem(rows, b)
    zeta = 0.5
    cfg = SgdmConfig(0.001, 0.8, zeta, 0)
    iters = int(np.ceil(epochs * prob.n / cfg.batch_size(prob.n)))
    cfg = SgdmConfig(0.001, 0.8, zeta, iters, seed=11)
    ens = run_ensemble(prob, cfg, runs)
    spec = prob.spectrum()
    # psi(0) is the measured initial loss, shared by every run
    sol = solve_volterra(spec, cfg.hyperparams(prob.n, 11000.0, 5300.0), iters,
                         psi0=prob.loss(prob.x0))
    lo, hi = ens.percentile(10), ens.percentile(90)
    tol = 1e-12 * np.abs(sol.psi)
    inside = (lo - tol <= sol.psi) & (sol.psi <= hi + tol)
    return rows_ok, counts, float(inside.mean()), iters


def test_11_mnist(acceptance):
    files = find_mnist()
    if files is None:
        acceptance("11", "MNIST pipeline", None, "skipped: MNIST files not found (set MNIST_DIR)")
        pytest.skip("MNIST training files not present")
    rows_ok, counts, frac, iters = mnist_pipeline(*files)
    ok = rows_ok and counts == (30508, 29492) and frac >= 0.9
    acceptance("11", "MNIST pipeline", ok,
               f"rows centered and unit norm: {rows_ok}; odd/even = {counts[0]}/{counts[1]}; "
               f"band brackets Volterra on {100 * frac:.0f}% of {iters + 1} steps (need >= 90%)")
    assert ok


def test_11_pipeline_runs_on_synthetic_idx(tmp_path):
    from sgdm_volterra.ingest import write_idx
    rng = np.random.default_rng(11)
    write_idx(tmp_path / MNIST_NAMES[0], rng.integers(0, 256, (200, 8, 8), dtype=np.uint8))
    write_idx(tmp_path / MNIST_NAMES[1], rng.integers(0, 10, 200, dtype=np.uint8))
    os.environ["MNIST_DIR"] = str(tmp_path)
    try:
        files = find_mnist()
    finally:
        del os.environ["MNIST_DIR"]
    rows_ok, counts, frac, iters = mnist_pipeline(*files, runs=3)
    assert rows_ok and sum(counts) == 200 and iters == 6 and 0 <= frac <= 1
