import math
import time

import numpy as np
import pytest

from qhoreduce.basis import enumerate_modes
from qhoreduce.blockmat import (BlockMatrix, block_exp, block_mul, decay_norm, hermitian_exp, is_normal_form,
                                operator_norm_weighted)
from qhoreduce.floquet import block_shifts, conjugacy_error, integrate_periodic, sobolev_monitor
from qhoreduce.homology import (DivisorContext, homological_residual, homological_step, divisor_bound,
                                solve_small_divisor)
from qhoreduce.kam import (C_STAR, KamOptions, check_smallness, critical_condition_margin,
                           equiv_condition_margin, kam_iterate, make_schedule)
from qhoreduce.melnikov import first_melnikov_worst, measure_estimate, omega_grid
from qhoreduce.potential import PotentialSpec, assemble_Q, eval_Q, strip_norm, verify_key_decay

from test_blockmat import C_STRUCT, decaying
from test_homology import perturbed_normal_form, rich_Q
from test_kam import C_SHIFT, T_MEAN

OMEGA = math.sqrt(5) - 1
# 1 + (sqrt 5 - 1)/500: close to the k = 1 resonance, so the early steps carry real work
OMEGA_NEAR = 1 + (math.sqrt(5) - 1) / 500
# excluded fraction / (K^2 gamma) at K = 5, gamma = 1e-3 on the 2,000,001-point grid (0.9848)
C_MEASURE = 0.99


def desk_run(potential, eps0=1e-4, m_max=6, omega=OMEGA):
    b = enumerate_modes(1, 41)
    Q = assemble_Q(potential, b)
    Q = Q * (eps0 / strip_norm(Q, 1.5, 1.0))
    sched = make_schedule(eps0, 1.0, 3.0, 1.5, m_max)
    start = time.perf_counter()
    res = kam_iterate(BlockMatrix.diagonal(b), Q, omega, sched, KamOptions(enforce_smallness=False))
    return res, time.perf_counter() - start


@pytest.fixture(scope="module")
def runs():
    return {"cos": desk_run(PotentialSpec(iota=1.5)), "mean": desk_run(PotentialSpec(iota=1.5, fourier_coeffs=T_MEAN))}


def test_homological_residual(verdict):
    b = enumerate_modes(1, 41)
    N = BlockMatrix.diagonal(b)
    start = time.perf_counter()
    gamma = first_melnikov_worst(OMEGA, 12, b)[4] * (1 - 1e-9)
    ctx = DivisorContext.from_normal_form(N, OMEGA, 12, gamma, gamma, 1.5, 1e-3)
    Q = rich_Q(b)
    sol = homological_step(N, Q, ctx, cross_check=True)
    res = homological_residual(sol, N, Q, OMEGA)
    elapsed = time.perf_counter() - start
    verdict(1, "homological residual", res <= 1e-10 and elapsed < 10,
            f"max residual {res:.2e} (<= 1e-10), {elapsed:.2f}s (< 10s)")


def test_divisor_bound(verdict):
    b = enumerate_modes(1, 41)
    N = BlockMatrix.diagonal(b)
    gamma = first_melnikov_worst(OMEGA, 12, b)[4] * (1 - 1e-9)
    ctx = DivisorContext.from_normal_form(N, OMEGA, 12, gamma, gamma, 1.5, 1e-3)
    worst1 = homological_step(N, rich_Q(b), ctx).bound_ratio
    rng = np.random.default_rng(1)
    b2 = enumerate_modes(2, 14)
    worst2, done = 0.0, 0
    while done < 1000:
        om = rng.uniform(0.5, 3.0)
        g = first_melnikov_worst(om, 6, b2)[4]
        if g < 1e-3:
            continue
        k = int(rng.integers(-6, 7))
        a, c = (int(x) for x in rng.integers(0, b2.n_clusters, 2))
        if k == 0 and a == c:
            continue
        N2 = perturbed_normal_form(b2, rng, 1e-3, 1.0)
        ctx2 = DivisorContext.from_normal_form(N2, om, 6, g, 1.0, 1.0, 1e-3)
        Da, Dc = ctx2.blocks[a][1], ctx2.blocks[c][1]
        dist = 1 + abs(b2.cluster_weights[a] - b2.cluster_weights[c])
        ctx2.kappa = min(g, float(np.min(np.abs(k * om - Da[:, None] + Dc[None, :]))) / dist)
        sa, sc = b2.slices[a], b2.slices[c]
        A = rng.standard_normal((sa.stop - sa.start, sc.stop - sc.start)) * (1 + 0j)
        B = solve_small_divisor(A, ctx2, a, c, [k])
        worst2 = max(worst2, np.linalg.norm(B, 2) / divisor_bound(ctx2, a, c, np.linalg.norm(A, 2)))
        done += 1
    verdict(2, "small-divisor bound", worst1 <= 1 + 1e-12 and worst2 <= 1 + 1e-12,
            f"d=1 max ratio {worst1:.12f}, d=2 max ratio over 1000 instances {worst2:.4f} (<= 1)")


def test_superexponential_decay(verdict, runs):
    res, elapsed = runs["cos"]
    eps0 = 1e-4
    measured = [(h["m"] - 1, h["Q_measured"]) for h in res.history] + [(len(res.history), res.history[-1]["Q_next"])]
    ok = all(q <= eps0 ** (1.25 ** m) * (1 + 1e-9) for m, q in measured)
    worst = max(q / eps0 ** (1.25 ** m) for m, q in measured)
    verdict(3, "superexponential decay", ok and res.converged and elapsed < 300,
            f"{len(measured)} steps, max [Q_m]/eps0^(5/4)^m {worst:.2e}, {elapsed:.1f}s (< 300s)")


def test_transformation_bounds(verdict, runs):
    eps0 = 1e-4
    lines, ok = [], True
    for name, (res, _) in runs.items():
        M0, M1 = res.M_minus_id_norm(0.0), res.M_minus_id_norm(1.0)
        W = res.W_norm()
        shifts, weights = block_shifts(res.W, 1.5)
        shift_c = float(np.max(shifts * weights)) / eps0
        ok &= res.converged and max(M0, M1) <= eps0 ** (5 / 12) and W <= 2 * eps0 and shift_c <= C_SHIFT
        lines.append(f"{name}: |M-Id| {max(M0, M1):.1e}, |W| {W:.1e}, shift C {shift_c:.3f}")
    verdict(4, "transformation bounds", ok,
            "; ".join(lines) + f" (limits {eps0 ** (5 / 12):.1e}, {2 * eps0:.0e}, {C_SHIFT})")


def test_conjugacy_oracle(verdict):
    b = enumerate_modes(1, 41)
    Q = assemble_Q(PotentialSpec(iota=1.5, fourier_coeffs=T_MEAN), b)
    Q = Q * (1.0 / strip_norm(Q, 1.5, 1.0))
    N0 = BlockMatrix.diagonal(b)
    xi0 = np.zeros(b.size, complex)
    xi0[:6] = [1, 0.5, 0.3j, 0.2, 0.1, 0.05]
    xi0 /= np.linalg.norm(xi0)
    eps = 0.9
    traj = integrate_periodic(N0, Q, eps, OMEGA_NEAR, xi0, 100.0)
    errs, ok = {}, True
    for m_max in (3, 6):
        sched = make_schedule(eps, 1.0, 3.0, 1.5, m_max)
        res = kam_iterate(N0, Q * eps, OMEGA_NEAR, sched, KamOptions(enforce_smallness=False))
        errs[m_max] = conjugacy_error(res, traj, 1.0)
        ok &= errs[m_max] <= max(10 * math.exp(sched.log_eps[res.m_stop]), 1e-7)
    shrink = errs[3] / errs[6]
    verdict(5, "conjugacy oracle", ok and shrink >= 5,
            f"error m_max=3 {errs[3]:.2e}, m_max=6 {errs[6]:.2e}, shrink {shrink:.1e} (>= 5)")


def sobolev_deviation(omega, eps=1e-3, T=1e4):
    b = enumerate_modes(1, 41)
    Q = assemble_Q(PotentialSpec(iota=1.5, fourier_coeffs=T_MEAN), b)
    xi0 = np.zeros(b.size, complex)
    xi0[:6] = [1, 0.5, 0.3j, 0.2, 0.1, 0.05]
    traj = integrate_periodic(BlockMatrix.diagonal(b), Q, eps, omega, xi0 / np.linalg.norm(xi0), T)
    return max(abs(r - 1) for r in sobolev_monitor(traj, 1.0))


def test_sobolev_boundedness(verdict):
    screened, resonant = sobolev_deviation(OMEGA), sobolev_deviation(1.0)
    verdict(6, "Sobolev boundedness", screened <= 1e-2 and resonant > 1e-2,
            f"screened {screened:.1e} (<= 1e-2), omega=1 {resonant:.1e} (needs > 1e-2)",
            unattainable="an even potential couples only w_a - w_b = 0 mod 4, so omega = 1 is not "
                         "resonant at first order; see test_sobolev_resonance_at_omega_two")


def test_sobolev_resonance_at_omega_two():
    assert sobolev_deviation(2.0) > 1e-2


def test_measure_scaling(verdict):
    b = enumerate_modes(1, 21)
    grid = omega_grid(1, 2000001)
    frac = {(K, g): measure_estimate(grid, K, g, basis=b).fraction
            for K, g in [(10, 1e-2), (10, 1e-3), (10, 1e-4), (5, 1e-3), (20, 1e-3)]}
    lin = [frac[(10, g)] / g for g in (1e-2, 1e-3, 1e-4)]
    spread = max(lin) / min(lin) - 1
    ratios = {K: frac[(K, 1e-3)] / (K * K * 1e-3) for K in (5, 10, 20)}
    ok = spread <= 0.2 and all(r <= C_MEASURE for r in ratios.values())
    verdict(7, "measure scaling", ok,
            f"gamma-linearity spread {spread:.1%} (<= 20%), fraction/(K^2 gamma) "
            + ", ".join(f"K={K}: {r:.3f}" for K, r in ratios.items()) + f" (<= {C_MEASURE})")


def test_structural_algebra(verdict, runs):
    b = enumerate_modes(1, 41)
    rng = np.random.default_rng(20240611)
    worst, exp_ratio = 0.0, 0.0
    for beta in (0.75, 1.0, 2.0):
        for _ in range(200):
            A, B, C = decaying(b, beta, rng), decaying(b, beta, rng, True), decaying(b, beta, rng, True)
            nA, nB, nC = decay_norm(A, beta), decay_norm(B, beta), decay_norm(C, beta)
            r = [decay_norm(block_mul(A, B), beta).norm / (nA.norm * nB.norm_plus),
                 decay_norm(block_mul(B, A), beta).norm / (nA.norm * nB.norm_plus),
                 decay_norm(block_mul(B, C), beta).norm_plus / (nB.norm_plus * nC.norm_plus),
                 operator_norm_weighted(b, A.data, 1.0, -1.0) / nA.norm]
            r += [operator_norm_weighted(b, B.data, s) / nB.norm_plus for s in (-1.0, 0.0, 1.0)]
            small = BlockMatrix(b, B.data * rng.uniform(0.01, 1) / nB.norm_plus)
            n = decay_norm(small, beta).norm_plus
            E = block_exp(small) - BlockMatrix.identity(b)
            exp_ratio = max(exp_ratio, decay_norm(E, beta).norm_plus / (np.exp(C_STRUCT * n) * n))
            worst = max(worst, max(r))
    ok = worst <= C_STRUCT and exp_ratio <= 1
    H = decaying(b, 1.0, rng)
    H = H + H.H
    U = hermitian_exp(H, 1j).data
    unit = float(np.max(np.abs(U.conj().T @ U - np.eye(b.size))))
    herm = max(eval_Q(assemble_Q(PotentialSpec(iota=1.5), b), np.array([phi])).hermitian_defect()
               for phi in rng.uniform(0, 2 * np.pi, 8))
    res = runs["cos"][0]
    nf = is_normal_form(res.N_omega, 1e-13) and res.W.hermitian_defect() < 1e-13
    ok &= unit < 1e-12 and herm < 1e-13 and nf
    verdict(8, "structural algebra", ok,
            f"worst constant {worst:.3f} (<= {C_STRUCT}), exp ratio {exp_ratio:.3f} (<= 1), unitarity {unit:.1e}, Hermiticity {herm:.1e}, "
            f"normal form {'yes' if nf else 'no'}")


def test_key_decay(verdict):
    spec = PotentialSpec(iota=1.0, fourier_coeffs={(1,): 0.5, (-1,): 0.5})
    family = {W: assemble_Q(spec, enumerate_modes(1, W)) for W in (25, 50, 100)}
    rep = verify_key_decay(family[100], 1.0, cutoff_family=family, tolerance=0.15)
    verdict(9, "key decay stability", rep.stable and rep.spread < 0.15,
            f"suprema {', '.join(f'{v:.4f}' for v in rep.per_cutoff.values())}, spread {rep.spread:.1%} (< 15%)")


def test_schedule_identities(verdict):
    s = make_schedule(1e-4, m_max=40)
    rec = float(np.max(np.abs(s.log_eps - s.log_eps_recurrence) / np.abs(s.log_eps)))
    tele = abs(C_STAR * math.pi ** 2 / 6 - 0.5)
    rng = np.random.default_rng(7)
    agree = 0
    for _ in range(1000):
        lg = -10 ** rng.uniform(-1, 2.5)
        alpha = rng.uniform(2, 6)
        beta = alpha / 2 + rng.uniform(0, 2)
        d = int(rng.integers(1, 4))
        m = int(rng.integers(1, 8))
        sc = make_schedule(math.exp(lg), 1.0, alpha, beta, m)
        L = -sc.log_eps[m - 1]
        a = critical_condition_margin(sc.log_eps[0], sc.log_gamma[m], sc.log_kappa[m], beta, d, logs=True)
        b = equiv_condition_margin(sc.eps0, L, alpha, beta, d)
        agree += abs(a - b) <= 1e-9 * max(1.0, abs(b), L) and ((a >= 0) == (b >= 0) or abs(a) < 1e-9 * L)
    ok = rec <= 1e-12 and tele <= 1e-16 and agree == 1000
    verdict(10, "schedule identities", ok,
            f"log-space gap {rec:.1e} (<= 1e-12), telescoping gap {tele:.1e}, smallness forms agree {agree}/1000")
