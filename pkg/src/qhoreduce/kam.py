"""KAM reduction to a block-diagonal normal form.

Step ``m`` solves the homological equation for ``(N_m, Q_m)``, sets
``N_{m+1} = N_m + N_tilde_m`` and

    Q_{m+1} = R_m + i int_0^1 e^{-itS} [(1-t)(N_tilde + R) + t Q, S] e^{itS} dt,

and accumulates ``M_{m+1} = M_m exp(i S_{m+1})``.  Solutions of
``eta' = i (N_0 + Q_0(omega t)) eta`` are then
``eta(t) = M(omega t) exp(i t N) M(0)^{-1} eta(0)``; for ``xi = conj(eta)``
this is ``xi(t) = conj(M(omega t)) exp(-i t N^T) M(0)^T xi(0)``.

All powers of ``eps`` are kept as logarithms.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .blockmat import BlockMatrix, decay_norm, operator_norm_weighted
from .exceptions import DivisorTooSmall, QuadratureError, ScheduleError
from .homology import DivisorContext, homological_step
from .melnikov import exponents, first_melnikov_worst
from .potential import QuasiPeriodicMatrix, strip_norm, torus_grid

logger = logging.getLogger(__name__)

C_STAR = 3.0 / math.pi ** 2
FLOOR = 1e-14


@dataclass
class Schedule:
    """Per-step parameters; index ``m`` runs over ``0..m_max``.

    ``kappa``, ``gamma`` and ``K`` are defined for ``m >= 1`` (entry 0 is
    ``nan`` / 0).
    """

    eps0: float
    sigma0: float
    alpha: float
    beta: float
    m_max: int
    log_eps: np.ndarray
    log_eps_recurrence: np.ndarray
    sigma: np.ndarray
    log_kappa: np.ndarray
    log_gamma: np.ndarray
    K: np.ndarray

    @property
    def kappa(self):
        return np.exp(self.log_kappa)

    @property
    def gamma(self):
        return np.exp(self.log_gamma)

    @property
    def eps(self):
        return np.exp(self.log_eps)

    @property
    def sigma_losses(self):
        return -np.diff(self.sigma)

    def kappa_le_gamma(self):
        return self.log_kappa[1:] <= self.log_gamma[1:]

    def table(self):
        rows = []
        for m in range(1, self.m_max + 1):
            rows.append({"m": m, "log10_eps": self.log_eps[m] / math.log(10),
                         "kappa": float(self.kappa[m]), "gamma": float(self.gamma[m]),
                         "sigma": self.sigma[m], "K": int(self.K[m])})
        return rows

    def to_dict(self):
        return {"eps0": self.eps0, "sigma0": self.sigma0, "alpha": self.alpha,
                "beta": self.beta, "m_max": self.m_max}


def make_schedule(eps0, sigma0=1.0, alpha=3.0, beta=None, m_max=8):
    """Parameter schedule ``eps_m = eps_{m-1}^{5/4}``, ``kappa_m = eps_{m-1}^{1/4}``, ..."""
    if not 0 < eps0 < 1:
        raise ScheduleError("eps0 must lie in (0, 1)")
    if sigma0 <= 0:
        raise ScheduleError("sigma0 must be positive")
    beta = alpha / 2 if beta is None else beta
    if beta < alpha / 2 - 1e-15:
        raise ScheduleError(f"beta={beta} < alpha/2={alpha / 2}: smallness cannot be guaranteed")
    m_max = int(m_max)
    L0 = math.log(eps0)
    m = np.arange(m_max + 1)
    with np.errstate(over="ignore"):
        log_eps = L0 * 1.25 ** m
    if not np.all(np.isfinite(log_eps)):
        raise ScheduleError(f"m_max={m_max} overflows ln eps_m; the floor is reached long before")
    rec = np.empty(m_max + 1)
    rec[0] = L0
    for i in range(1, m_max + 1):
        rec[i] = 1.25 * rec[i - 1]
    sigma = np.empty(m_max + 1)
    sigma[0] = sigma0
    for i in range(1, m_max + 1):
        sigma[i] = sigma[i - 1] - C_STAR * sigma0 / i ** 2
    log_kappa = np.full(m_max + 1, np.nan)
    log_gamma = np.full(m_max + 1, np.nan)
    K = np.zeros(m_max + 1, dtype=np.int64)
    for i in range(1, m_max + 1):
        Lm = -log_eps[i - 1]
        log_kappa[i] = -Lm / 4
        log_gamma[i] = L0 / 6 - alpha * math.log(Lm)
        K[i] = math.ceil(2 * Lm / (sigma[i - 1] - sigma[i]) - 1e-9)
    return Schedule(eps0=float(eps0), sigma0=float(sigma0), alpha=float(alpha), beta=float(beta),
                    m_max=m_max, log_eps=log_eps, log_eps_recurrence=rec, sigma=sigma,
                    log_kappa=log_kappa, log_gamma=log_gamma, K=K)


def critical_condition_margin(eps0, gamma, kappa, beta, d, logs=False):
    """``ln gamma - ln kappa - 8d (eps0/gamma)^(1/(2beta))``; ``>= 0`` means it holds.

    With ``logs`` the arguments ``eps0, gamma, kappa`` are natural logarithms.
    """
    if not logs:
        eps0, gamma, kappa = math.log(eps0), math.log(gamma), math.log(kappa)
    return gamma - kappa - 8 * d * math.exp((eps0 - gamma) / (2 * beta))


def equiv_condition_margin(eps0, L, alpha, beta, d):
    """``L/4 - [8d eps0^(5/(12beta)) L^(alpha/(2beta)) + L0/6 + alpha ln L]``."""
    L0 = -math.log(eps0)
    lhs = 8 * d * math.exp(-5 * L0 / (12 * beta)) * L ** (alpha / (2 * beta)) + L0 / 6 + alpha * math.log(L)
    return L / 4 - lhs


@dataclass
class SmallnessReport:
    critical: list
    equivalent: list
    first_failure: int = None

    @property
    def ok(self):
        return self.first_failure is None

    @property
    def agree(self):
        return self.critical == self.equivalent


def check_smallness(schedule, d):
    crit, equiv = [], []
    for m in range(1, schedule.m_max + 1):
        L = -schedule.log_eps[m - 1]
        crit.append(critical_condition_margin(schedule.log_eps[0], schedule.log_gamma[m],
                                              schedule.log_kappa[m], schedule.beta, d, logs=True) >= 0)
        equiv.append(equiv_condition_margin(schedule.eps0, L, schedule.alpha, schedule.beta, d) >= 0)
    first = next((m + 1 for m, (a, b) in enumerate(zip(crit, equiv)) if not (a and b)), None)
    return SmallnessReport(crit, equiv, first)


def largest_admissible_eps0(alpha, beta, d, m_max=8, lo=-300.0, hi=-1e-3, step=1.0):
    """Upper edge of the admissible ``eps0`` region that starts at ``10**lo``.

    The condition is not monotone: for ``eps0`` close to 1 the schedule barely
    moves and it passes again.  Scanning upward from ``lo`` finds the first
    failure; bisection in ``log10`` then refines the edge.  Returns ``None``
    when ``10**lo`` already fails.
    """
    def ok(lg):
        return check_smallness(make_schedule(10 ** lg, 1.0, alpha, beta, m_max), d).ok
    if not ok(lo):
        return None
    good = lo
    bad = None
    for lg in np.arange(lo + step, hi, step):
        if not ok(lg):
            bad = float(lg)
            break
        good = float(lg)
    if bad is None:
        return 10 ** hi if ok(hi) else 10 ** good
    for _ in range(60):
        mid = 0.5 * (good + bad)
        good, bad = (mid, bad) if ok(mid) else (good, mid)
    return 10 ** good


@dataclass
class KamOptions:
    K_box: int = None
    grid_points: int = None
    kappa_cap: object = "auto"
    K_cap: int = None
    floor: float = FLOOR
    gl_order: int = 8
    gl_tol: float = 1e-15
    enforce_smallness: bool = True
    cross_check: bool = False


@dataclass
class KamState:
    m: int
    N: BlockMatrix
    Q: QuasiPeriodicMatrix
    S_list: list
    history: list = field(default_factory=list)

    def to_dict(self):
        return {"m": self.m, "N": self.N.to_dict(), "Q": self.Q.to_dict(),
                "S_list": [S.to_dict() for S in self.S_list], "history": self.history}

    @classmethod
    def from_dict(cls, payload):
        return cls(m=int(payload["m"]), N=BlockMatrix.from_dict(payload["N"]),
                   Q=QuasiPeriodicMatrix.from_dict(payload["Q"]),
                   S_list=[QuasiPeriodicMatrix.from_dict(s) for s in payload["S_list"]],
                   history=list(payload.get("history", [])))


def _hermitian_eig(S_vals):
    H = 0.5 * (S_vals + np.conj(np.swapaxes(S_vals, -1, -2)))
    return np.linalg.eigh(H)


def _gauss_legendre(order):
    x, w = np.polynomial.legendre.leggauss(order)
    return 0.5 * (x + 1), 0.5 * w


def conjugation_integral(A0, A1, S_vals, order=8, tol=1e-15):
    """``i int_0^1 e^{-itS} [(1-t) A0 + t A1, S] e^{itS} dt`` on a grid.

    Arrays have shape ``(npts, dim, dim)``.  The integrand is rotated into
    the eigenbasis of ``S`` once; Gauss-Legendre order is doubled until
    successive values agree to ``tol`` relative to the commutator size.
    """
    lam, V = _hermitian_eig(S_vals)
    Vh = np.conj(np.swapaxes(V, -1, -2))
    C0 = Vh @ (A0 @ S_vals - S_vals @ A0) @ V
    C1 = Vh @ (A1 @ S_vals - S_vals @ A1) @ V
    theta = lam[:, :, None] - lam[:, None, :]
    scale = max(float(np.max(np.abs(C0), initial=0.0)), float(np.max(np.abs(C1), initial=0.0)), 1e-300)

    def integrate(p):
        t, wt = _gauss_legendre(p)
        acc = np.zeros_like(C0)
        for ti, wi in zip(t, wt):
            acc += wi * ((1 - ti) * C0 + ti * C1) * np.exp(-1j * ti * theta)
        return acc

    cur = integrate(order)
    gap = np.inf
    while order <= 128:
        nxt = integrate(2 * order)
        gap = float(np.max(np.abs(nxt - cur), initial=0.0)) / scale
        cur, order = nxt, 2 * order
        if gap <= tol:
            break
    else:
        raise QuadratureError(f"conjugation integral not converged (relative change {gap:.2e})",
                              max_change=gap)
    return 1j * (V @ cur @ Vh), gap


def conjugation_integral_exact(A0, A1, S_vals):
    """Closed-form version of :func:`conjugation_integral` (test oracle)."""
    lam, V = _hermitian_eig(S_vals)
    Vh = np.conj(np.swapaxes(V, -1, -2))
    C0 = Vh @ (A0 @ S_vals - S_vals @ A0) @ V
    C1 = Vh @ (A1 @ S_vals - S_vals @ A1) @ V
    x = -1j * (lam[:, :, None] - lam[:, None, :])
    small = np.abs(x) < 1e-4
    xs = np.where(small, 1.0, x)
    # int_0^1 t e^{xt} dt and int_0^1 e^{xt} dt
    i0 = np.where(small, 1 + x / 2 + x ** 2 / 6 + x ** 3 / 24, np.expm1(xs) / xs)
    i1 = np.where(small, 0.5 + x / 3 + x ** 2 / 8 + x ** 3 / 30,
                  (np.exp(xs) * (xs - 1) + 1) / xs ** 2)
    out = (i0 - i1) * C0 + i1 * C1
    return 1j * (V @ out @ Vh)


def _unitary_grid(S_vals):
    lam, V = _hermitian_eig(S_vals)
    return (V * np.exp(1j * lam)[:, None, :]) @ np.conj(np.swapaxes(V, -1, -2))


@dataclass
class KamResult:
    converged: bool
    N_omega: BlockMatrix
    W: BlockMatrix
    M: QuasiPeriodicMatrix
    S_list: list
    history: list
    omega: np.ndarray
    schedule: Schedule
    Q_final: QuasiPeriodicMatrix = None
    failure: dict = None
    smallness: SmallnessReport = None

    @property
    def m_stop(self):
        return len(self.S_list)

    def transformation_at(self, phi):
        """``M(phi) = prod_l exp(i S_l(phi))`` at points ``phi`` of shape ``(npts, n)``."""
        phi = np.atleast_2d(np.asarray(phi, dtype=float))
        dim = self.N_omega.basis.size
        M = np.broadcast_to(np.eye(dim, dtype=complex), (len(phi), dim, dim)).copy()
        for S in self.S_list:
            M = M @ _unitary_grid(S.eval_grid(phi))
        return M

    def closed_form(self, xi0, times):
        """``xi(t) = conj(M(omega t)) exp(-i t N^T) M(0)^T xi(0)`` for each time."""
        xi0 = np.asarray(xi0, dtype=complex)
        times = np.asarray(times, dtype=float)
        lam, V = np.linalg.eigh(self.N_omega.data.T)
        M0 = self.transformation_at(np.zeros((1, len(self.omega))))[0]
        c = V.conj().T @ (M0.T @ xi0)
        out = np.empty((len(times), len(xi0)), dtype=complex)
        phis = times[:, None] * self.omega[None, :]
        chunk = 2048
        for s in range(0, len(times), chunk):
            Mt = self.transformation_at(phis[s:s + chunk])
            evo = (V[None] @ (np.exp(-1j * times[s:s + chunk, None] * lam[None, :]) * c)[..., None])[..., 0]
            out[s:s + chunk] = np.einsum("tij,tj->ti", np.conj(Mt), evo)
        return out

    def reduced_coordinates(self, xi, times):
        """Inverse of the change of variables: ``M^T(omega t) xi(t)``."""
        xi = np.atleast_2d(np.asarray(xi, dtype=complex))
        times = np.atleast_1d(np.asarray(times, dtype=float))
        Mt = self.transformation_at(times[:, None] * self.omega[None, :])
        return np.einsum("tji,tj->ti", Mt, xi)

    def M_minus_id_norm(self, p=0.0, grid_points=64):
        phis = torus_grid(len(self.omega), grid_points).real
        Mt = self.transformation_at(phis)
        eye = np.eye(Mt.shape[-1])
        basis = self.N_omega.basis
        return max(operator_norm_weighted(basis, Mi - eye, p) for Mi in Mt)

    def W_norm(self, beta=None):
        return decay_norm(self.W, self.schedule.beta if beta is None else beta).norm

    def summary(self):
        return {
            "converged": self.converged,
            "m_stop": self.m_stop,
            "W_norm": self.W_norm(),
            "M_minus_id_l2_0": self.M_minus_id_norm(0.0),
            "M_minus_id_l2_1": self.M_minus_id_norm(1.0),
            "failure": self.failure,
            "history": self.history,
        }


def resolve_kappa_cap(option, omega, K, basis):
    """Screening gap cap; ``"auto"`` is half the unperturbed worst ratio at ``K``."""
    if option is None:
        return math.inf
    if option == "auto":
        return 0.5 * first_melnikov_worst(omega, K, basis)[4]
    return float(option)


def kam_iterate(N0, Q0, omega, schedule, options=None, state=None, checkpoint=None):
    """Run the reduction for at most ``schedule.m_max`` steps.

    ``state`` resumes from a checkpoint; ``checkpoint(state)`` is called
    after every completed step.
    """
    options = options or KamOptions()
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    basis = N0.basis
    n = len(omega)
    d = basis.d
    if Q0.n != n:
        raise ValueError("torus dimension of Q and length of omega differ")
    K_box = options.K_box or max(Q0.K_store, 16 if n == 1 else 6)
    L = options.grid_points or (max(4 * K_box, 32) if n == 1 else 2 * K_box + 2)
    phis = torus_grid(n, L).real

    smallness = check_smallness(schedule, d)
    if options.enforce_smallness and not smallness.ok:
        raise ScheduleError(f"smallness condition fails at step {smallness.first_failure}")

    if state is None:
        state = KamState(m=0, N=N0, Q=Q0.resized(K_box), S_list=[])
    N, Q, S_list, history = state.N, state.Q.resized(K_box), list(state.S_list), list(state.history)
    failure = None
    m = state.m
    M_prev = None
    while True:
        q_norm = strip_norm(Q, schedule.beta, schedule.sigma[min(m, schedule.m_max)])
        if m > 0 and history and history[-1].get("Q_next") is None:
            history[-1]["Q_next"] = q_norm
        if q_norm < options.floor or m >= schedule.m_max:
            break
        t0 = time.perf_counter()
        step = m + 1
        K_m = int(schedule.K[step])
        K_cap = options.K_cap if options.K_cap is not None else K_box
        K_eff = min(K_m, K_cap, K_box)
        if K_eff < K_m:
            logger.info("step %d: K_m=%d capped at %d", step, K_m, K_eff)
        kappa_eff = min(float(schedule.kappa[step]), resolve_kappa_cap(options.kappa_cap, omega, K_eff, basis))
        gamma = schedule.gamma[step]
        ctx = DivisorContext.from_normal_form(N, omega, K_eff, gamma, kappa_eff,
                                              schedule.beta, schedule.eps0)
        try:
            sol = homological_step(N, Q, ctx, schedule.sigma[step], cross_check=options.cross_check)
        except DivisorTooSmall as exc:
            failure = {"m": step, "k": list(exc.k), "a": exc.a, "b": exc.b,
                       "value": exc.value, "threshold": exc.threshold}
            logger.warning("step %d: %s", step, exc)
            break
        S = sol.S
        S_vals = S.eval_grid(phis)
        Ntl = sol.N_tilde.data
        R_vals = sol.R.eval_grid(phis)
        Q_vals = Q.eval_grid(phis)
        integral, gl_gap = conjugation_integral(Ntl[None] + R_vals, Q_vals, S_vals,
                                                order=options.gl_order, tol=options.gl_tol)
        Q_next_vals = R_vals + integral
        Q_next_vals = 0.5 * (Q_next_vals + np.conj(np.swapaxes(Q_next_vals, -1, -2)))
        Q_next = QuasiPeriodicMatrix.from_grid(basis, Q_next_vals, L, K_box, sigma=schedule.sigma[step])
        N_next = N + sol.N_tilde

        factor = _unitary_grid(S_vals)
        step_diff = float(np.max(np.linalg.norm(factor - np.eye(basis.size), ord=2, axis=(1, 2))))
        worst = sol.worst_divisor
        entry = {
            "m": step,
            "log10_eps_sched": schedule.log_eps[step - 1] / math.log(10),
            "Q_measured": q_norm,
            "S_plus": strip_norm(S, schedule.beta, schedule.sigma[step], plus=True),
            "N_tilde": decay_norm(sol.N_tilde, schedule.beta).norm,
            "worst_divisor_ratio": None if worst is None else worst[4],
            "worst_divisor_at": None if worst is None else [list(worst[0]), worst[1], worst[2]],
            "K_m": K_m,
            "K_eff": K_eff,
            "gamma_m": gamma,
            "kappa_m": float(schedule.kappa[step]),
            "kappa_eff": kappa_eff,
            "M_step": step_diff,
            "gl_gap": gl_gap,
            "smallness_ok": bool(smallness.critical[step - 1]),
            "bound_ratio": sol.bound_ratio,
            "seconds": time.perf_counter() - t0,
            "Q_next": None,
        }
        history.append(entry)
        S_list.append(S)
        N, Q, m = N_next, Q_next, step
        if checkpoint is not None:
            checkpoint(KamState(m=m, N=N, Q=Q, S_list=list(S_list), history=list(history)))

    final = KamState(m=m, N=N, Q=Q, S_list=S_list, history=history)
    return result_from_state(final, omega, schedule, failure=failure, floor=options.floor,
                             grid_points=L, smallness=smallness)


def result_from_state(state, omega, schedule, failure=None, floor=FLOOR, grid_points=None,
                      smallness=None):
    """Assemble a :class:`KamResult` from the last iteration state."""
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    N, Q, m = state.N, state.Q, state.m
    basis = N.basis
    n = len(omega)
    K_box = Q.K_store
    L = grid_points or (max(4 * K_box, 32) if n == 1 else 2 * K_box + 2)
    phis = torus_grid(n, L).real
    M_q = _transformation_fourier(basis, state.S_list, phis, L, K_box, n)
    W = N - BlockMatrix.diagonal(basis)
    mm = min(m, schedule.m_max)
    final_q = strip_norm(Q, schedule.beta, schedule.sigma[mm])
    converged = failure is None and final_q <= max(floor, math.exp(schedule.log_eps[mm]))
    return KamResult(converged=converged, N_omega=N, W=W, M=M_q, S_list=list(state.S_list),
                     history=list(state.history), omega=omega, schedule=schedule, Q_final=Q,
                     failure=failure, smallness=smallness)


def _transformation_fourier(basis, S_list, phis, L, K_box, n):
    dim = basis.size
    M = np.broadcast_to(np.eye(dim, dtype=complex), (len(phis), dim, dim)).copy()
    for S in S_list:
        M = M @ _unitary_grid(S.eval_grid(phis))
    return QuasiPeriodicMatrix.from_grid(basis, M, L, K_box)


def accumulate_transform(S_list, phis):
    """``M = prod exp(i S_l)`` on a grid, with per-factor unitarity defects and step sizes."""
    phis = np.atleast_2d(phis)
    basis = S_list[0].basis if S_list else None
    if basis is None:
        return None, []
    dim = basis.size
    M = np.broadcast_to(np.eye(dim, dtype=complex), (len(phis), dim, dim)).copy()
    report = []
    for S in S_list:
        U = _unitary_grid(S.eval_grid(phis))
        M_new = M @ U
        defect = float(np.max(np.abs(np.conj(np.swapaxes(U, -1, -2)) @ U - np.eye(dim))))
        diff = float(np.max(np.linalg.norm(M_new - M, ord=2, axis=(1, 2))))
        report.append({"unitarity_defect": defect, "step": diff})
        M = M_new
    return M, report


def hamiltonian_residual(N, Q, sol, omega, phis, beta=0.0):
    """Check that ``exp(-iS)(N+Q)exp(iS) - int e^{-isS} dS/dt e^{isS} ds`` equals
    ``N + N_tilde + Q_next`` on a grid; returns ``(residual, Q_next_vals)``.

    Computed the long way (without the homological identity), so it is an
    independent check of the update formula at moderate sizes.
    """
    omega = np.atleast_1d(omega)
    S_vals = sol.S.eval_grid(phis)
    kw = sol.S.ks.astype(float) @ omega
    dS = QuasiPeriodicMatrix(sol.S.basis, sol.S.ks, 1j * kw[:, None, None] * sol.S.coeffs).eval_grid(phis)
    H = N.data[None] + Q.eval_grid(phis)
    lam, V = _hermitian_eig(S_vals)
    Vh = np.conj(np.swapaxes(V, -1, -2))
    U = (V * np.exp(1j * lam)[:, None, :]) @ Vh
    Uh = np.conj(np.swapaxes(U, -1, -2))
    conj = Uh @ H @ U
    theta = lam[:, :, None] - lam[:, None, :]
    dSp = Vh @ dS @ V
    t, wt = _gauss_legendre(32)
    acc = np.zeros_like(dSp)
    for ti, wi in zip(t, wt):
        acc += wi * dSp * np.exp(-1j * ti * theta)
    drift = V @ acc @ Vh
    H_new = conj - drift
    integral = conjugation_integral_exact(sol.N_tilde.data[None] + sol.R.eval_grid(phis),
                                          Q.eval_grid(phis), S_vals)
    Q_next = sol.R.eval_grid(phis) + integral
    target = N.data[None] + sol.N_tilde.data[None] + Q_next
    return float(np.max(np.abs(H_new - target))), Q_next


def domega_derivatives(res_plus, res_minus, h, beta=None):
    """Centred finite differences of ``N_omega`` and ``W`` across two runs."""
    if not (res_plus.converged and res_minus.converged):
        raise ValueError("both runs must be converged")
    if len(res_plus.S_list) != len(res_minus.S_list):
        logger.info("runs stopped after different numbers of steps")
    beta = res_plus.schedule.beta if beta is None else beta
    dN = (res_plus.N_omega - res_minus.N_omega) * (1.0 / (2 * h))
    dW = (res_plus.W - res_minus.W) * (1.0 / (2 * h))
    return {
        "dN_spectral": float(np.linalg.norm(dN.data, 2)),
        "dN_beta": decay_norm(dN, beta).norm,
        "W_lipschitz": decay_norm(dW, beta).norm,
    }


def default_alpha(n, d):
    return exponents(n, d)["alpha"]
