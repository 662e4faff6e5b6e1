"""Command line entry point: ``qhoreduce <stage> --config run.toml``.

Stages share an output directory.  Each one reuses artefacts written by
earlier stages when present (``Q.json``, ``kam_state.json``) and builds
them otherwise, so every stage can run on its own.
"""
from __future__ import annotations

import argparse
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .basis import enumerate_modes
from .blockmat import BlockMatrix, decay_norm
from .exceptions import ConfigError, DivisorTooSmall, QuadratureError, ScheduleError
from .io import (RunConfig, load_config, read_json, write_csv, write_json, write_run_log,
                 write_screen_csv, write_trajectory_csv)
from .kam import KamOptions, KamState, kam_iterate, make_schedule, result_from_state
from .melnikov import exponents, measure_estimate, omega_grid, screen_omega, screening_sweep
from .potential import QuasiPeriodicMatrix, assemble_Q, strip_norm, verify_key_decay

logger = logging.getLogger("qhoreduce")

STAGES = ("assemble", "screen", "reduce", "verify", "certify", "report")


class Pipeline:
    """Stages of one run; results are cached on the instance and on disk."""

    def __init__(self, config: RunConfig, out=None, seed=None, resume=None):
        self.config = config
        self.out = Path(out or config.out)
        self.seed = config.seed if seed is None else seed
        self.resume = resume
        self.basis = enumerate_modes(config.potential.dimension, config.W_max)
        self.omega = np.array(config.omega, dtype=float)
        n, d = config.potential.torus_dim, config.potential.dimension
        sc = config.schedule
        self.alpha = sc.alpha if sc.alpha is not None else exponents(n, d)["alpha"]
        self.beta = sc.beta if sc.beta is not None else self.alpha / 2
        self._Q = None
        self._result = None
        self._scale = None

    def _write(self, name, payload):
        payload = dict(payload)
        payload["config"] = self.config.to_dict()
        payload["seed"] = self.seed
        return write_json(self.out / name, payload)

    # -- assemble ---------------------------------------------------------
    def Q(self):
        if self._Q is None:
            path = self.out / "Q.json"
            if path.exists():
                self._Q = QuasiPeriodicMatrix.from_dict(read_json(path)["Q"])
                if self._Q.basis != self.basis:
                    self._Q = None
            if self._Q is None:
                self.assemble()
        return self._Q

    def assemble(self):
        cfg = self.config
        Q = assemble_Q(cfg.potential, self.basis, quad_order=cfg.quad_order)
        self._Q = Q
        decay = verify_key_decay(Q, cfg.potential.iota)
        payload = {
            "stage": "assemble",
            "size": self.basis.size,
            "K_store": Q.K_store,
            "hermitian_defect": Q.hermitian_symmetry_defect(),
            "key_decay_sup": decay.sup,
            "key_decay_argmax": {"k": list(decay.argmax[0]), "a": decay.argmax[1], "b": decay.argmax[2]},
            "strip_norm": strip_norm(Q, self.beta, cfg.schedule.sigma0),
        }
        write_json(self.out / "Q.json", {"Q": Q.to_dict()})
        self._write("assemble.json", payload)
        return payload

    # -- screen -----------------------------------------------------------
    def screen(self, grid=None):
        cfg = self.config
        sc = cfg.screen
        report = screen_omega(self.omega, sc.K, sc.gamma, basis=self.basis)
        n = len(self.omega)
        points = grid or sc.grid
        per_axis = points if n == 1 else max(3, int(round(points ** (1.0 / n))))
        omegas = omega_grid(n, per_axis)
        rows = screening_sweep(omegas, sc.K, sc.gamma, self.basis)
        write_screen_csv(self.out / "screen.csv", rows, n)
        est = measure_estimate(omegas, sc.measure_K, sc.gamma, basis=self.basis)
        payload = {
            "stage": "screen",
            "omega": report.to_dict(),
            "grid_points": len(omegas),
            "pass_fraction": float(np.mean([r[n] for r in rows])),
            "measure": {"K": est.K, "gamma": est.gamma, "fraction": est.fraction,
                        "normalised": est.normalised(), "tau1": est.tau1, "tau2": est.tau2,
                        "alpha": est.alpha, "resolution": est.resolution},
        }
        self._write("screen.json", payload)
        return payload

    # -- reduce -----------------------------------------------------------
    def _schedule(self):
        sc = self.config.schedule
        return make_schedule(sc.eps0, sc.sigma0, self.alpha, self.beta, sc.m_max)

    def _options(self):
        k = self.config.kam
        return KamOptions(K_box=k.K_box, kappa_cap=k.kappa_cap, grid_points=k.grid_points,
                          enforce_smallness=self.config.schedule.enforce_smallness)

    def scale(self):
        if self._scale is None:
            eps0 = self.config.schedule.eps0
            q = strip_norm(self.Q(), self.beta, self.config.schedule.sigma0)
            self._scale = eps0 / q if q > 0 else 0.0
        return self._scale

    def reduce(self):
        from .estimator import trivial_result
        cfg = self.config
        Q = self.Q()
        N0 = BlockMatrix.diagonal(self.basis)
        scale = self.scale()
        ck_dir = self.out / "checkpoints"
        if scale == 0.0:
            result = trivial_result(N0, self.omega)
        else:
            schedule = self._schedule()
            state = None
            if self.resume:
                state = KamState.from_dict(read_json(self.resume))
                logger.info("resuming from step %d", state.m)

            def checkpoint(st):
                write_json(ck_dir / f"step_{st.m:02d}.json", _strip_timing(st.to_dict()))

            result = kam_iterate(N0, Q * scale, self.omega, schedule, self._options(),
                                 state=state, checkpoint=checkpoint)
            write_json(self.out / "kam_state.json",
                       _strip_timing(KamState(m=len(result.S_list), N=result.N_omega, Q=result.Q_final,
                                              S_list=result.S_list, history=result.history).to_dict()))
            write_json(self.out / "kam_meta.json", {"failure": result.failure})
        self._result = result
        history = [_drop_timing(h) for h in result.history]
        write_run_log(self.out / "run_log.csv", history)
        payload = {
            "stage": "reduce",
            "converged": result.converged,
            "failure": result.failure,
            "steps": len(result.S_list),
            "scale": scale,
            "W_beta": decay_norm(result.W, self.beta).norm,
            "M_minus_id_l2_0": result.M_minus_id_norm(0.0),
            "M_minus_id_l2_1": result.M_minus_id_norm(1.0),
            "smallness_ok": None if result.smallness is None else result.smallness.ok,
            "history": history,
        }
        self._write("reduce.json", payload)
        return payload

    def result(self):
        if self._result is not None:
            return self._result
        state_path = self.out / "kam_state.json"
        if self.config.schedule.eps0 > 0 and state_path.exists():
            from .kam import check_smallness
            state = KamState.from_dict(read_json(state_path))
            meta = read_json(self.out / "kam_meta.json") if (self.out / "kam_meta.json").exists() else {}
            schedule = self._schedule()
            self._result = result_from_state(state, self.omega, schedule, failure=meta.get("failure"),
                                             grid_points=self.config.kam.grid_points,
                                             smallness=check_smallness(schedule, self.basis.d))
        else:
            self.reduce()
        return self._result

    # -- verify -----------------------------------------------------------
    def initial_state(self):
        xi0 = self.config.verify.xi0
        size = self.basis.size
        if isinstance(xi0, list):
            v = np.zeros(size, dtype=complex)
            vals = np.asarray(xi0, dtype=complex)[:size]
            v[:len(vals)] = vals
        elif xi0 == "ground":
            v = np.zeros(size, dtype=complex)
            v[0] = 1.0
        else:
            rng = np.random.default_rng(self.seed)
            v = (rng.standard_normal(size) + 1j * rng.standard_normal(size)) * np.exp(-self.basis.weights / 4)
        return v / np.linalg.norm(v)

    def _integrate(self, eps, T, Q=None):
        from .floquet import integrate_direct, integrate_periodic
        Q = self.Q() if Q is None else Q
        N0 = BlockMatrix.diagonal(Q.basis)
        xi0 = self.initial_state()
        if Q.basis != self.basis:
            pad = np.zeros(Q.basis.size, dtype=complex)
            pad[:len(xi0)] = xi0
            xi0 = pad
        dt = self.config.verify.dt
        if len(self.omega) == 1:
            return integrate_periodic(N0, Q, eps, self.omega, xi0, T, dt=dt)
        stride = max(1, int(round(0.05 / (dt or 0.002))))
        return integrate_direct(N0, Q, eps, self.omega, xi0, T, dt=dt, sample_every=stride)

    def verify(self):
        from .floquet import conjugacy_error
        from .blockmat import sobolev_norm
        result = self.result()
        traj = self._integrate(self.scale(), self.config.verify.conjugacy_T)
        err, series = conjugacy_error(result, traj, s=1.0, return_series=True)
        write_trajectory_csv(self.out / "trajectory.csv", traj.times,
                             sobolev_norm(self.basis, traj.xi, 0.0),
                             sobolev_norm(self.basis, traj.xi, 1.0), series)
        m_stop = len(result.S_list)
        eps_stop = math.exp(result.schedule.log_eps[min(m_stop, result.schedule.m_max)]) if result.schedule else 0.0
        payload = {
            "stage": "verify",
            "conjugacy_error": err,
            "tolerance": max(10 * eps_stop, 1e-7),
            "norm_drift": traj.norm_drift,
            "samples": len(traj.times),
            "T": self.config.verify.conjugacy_T,
        }
        if self.config.verify.tail_check and self.scale() > 0:
            payload.update(self._tail_check(traj, err))
        self._write("verify.json", payload)
        return payload

    def _tail_check(self, traj, err):
        """Repeat reduction and integration on ``W_max + 10`` at the same amplitude."""
        from .floquet import conjugacy_error
        from .blockmat import sobolev_norm
        cfg = self.config
        big = enumerate_modes(self.basis.d, cfg.W_max + 10)
        Q = assemble_Q(cfg.potential, big) * self.scale()
        res = kam_iterate(BlockMatrix.diagonal(big), Q, self.omega, self._schedule(), self._options())
        traj_big = self._integrate(1.0, cfg.verify.conjugacy_T, Q=Q)
        err_big = conjugacy_error(res, traj_big, s=1.0)
        n = self.basis.size
        gap = np.max(sobolev_norm(self.basis, traj_big.xi[:, :n] - traj.xi, 1.0))
        return {"tail": {"W_max": cfg.W_max + 10, "conjugacy_error": err_big,
                         "conjugacy_error_change": abs(err_big - err), "trajectory_gap": float(gap)}}

    # -- certify ----------------------------------------------------------
    def certify(self):
        from .floquet import block_shifts, quasi_energies, sobolev_monitor
        cfg = self.config
        summary = {"assemble": self.assemble(), "screen": self.screen(), "reduce": self.reduce(),
                   "verify": self.verify()}
        result = self.result()
        v = cfg.verify
        traj = self._integrate(v.sobolev_eps, v.sobolev_T)
        s1 = sobolev_monitor(traj, 1.0)
        s0 = sobolev_monitor(traj, 0.0)
        qe = quasi_energies(result.N_omega, self.omega, v.quasi_energy_range)
        write_csv(self.out / "quasi_energies.csv", ["quasi_energy"], [[x] for x in qe])
        shifts, weights = block_shifts(result.W, cfg.potential.iota)
        eps0 = cfg.schedule.eps0
        W_beta = decay_norm(result.W, self.beta).norm
        M0 = result.M_minus_id_norm(0.0)
        M1 = result.M_minus_id_norm(1.0)
        bounds = {
            "W_beta_le_2eps0": W_beta <= 2 * eps0 * (1 + 1e-12) or eps0 == 0,
            "M_minus_id_le_eps0_5_12": max(M0, M1) <= (eps0 ** (5 / 12) if eps0 > 0 else 1e-14),
            "block_shift_constant": float(np.max(shifts * weights) / eps0) if eps0 > 0 else 0.0,
        }
        certify = {
            "stage": "certify",
            "converged": result.converged,
            "W_beta": W_beta,
            "M_minus_id_l2_0": M0,
            "M_minus_id_l2_1": M1,
            "measure_fraction": summary["screen"]["measure"]["fraction"],
            "conjugacy_error": summary["verify"]["conjugacy_error"],
            "sobolev_ratio_1": list(s1),
            "sobolev_ratio_0": list(s0),
            "sobolev_eps": v.sobolev_eps,
            "quasi_energies": len(qe),
            "bounds": bounds,
        }
        self._write("certify.json", certify)
        summary["certify"] = certify
        self._write("summary.json", {"summary": certify, "stages": sorted(summary)})
        return certify

    # -- report -----------------------------------------------------------
    def report(self, stream=None):
        stream = stream or sys.stdout
        rows = []
        for name in ("assemble", "screen", "reduce", "verify", "certify"):
            path = self.out / f"{name}.json"
            if path.exists():
                data = read_json(path)
                for key, val in sorted(data.items()):
                    if key in ("config", "history", "stage"):
                        continue
                    rows.append((name, key, val))
        if not rows:
            stream.write(f"no stage outputs in {self.out}\n")
            return 1
        width = max(len(f"{a}.{b}") for a, b, _ in rows)
        for stage, key, val in rows:
            stream.write(f"{stage + '.' + key:<{width}}  {_fmt(val)}\n")
        return 0


def _fmt(val):
    if isinstance(val, float):
        return f"{val:.6g}"
    return str(val)


def _drop_timing(entry):
    return {k: v for k, v in entry.items() if k != "seconds"}


def _strip_timing(payload):
    payload = dict(payload)
    payload["history"] = [_drop_timing(h) for h in payload.get("history", [])]
    return payload


def build_parser():
    parser = argparse.ArgumentParser(prog="qhoreduce",
                                     description="Reduce and certify a quasi-periodically forced oscillator.")
    sub = parser.add_subparsers(dest="stage", required=True)
    for name in STAGES:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="TOML or JSON run configuration")
        p.add_argument("--out", type=Path, help="output directory (overrides the config)")
        p.add_argument("--threads", type=int, default=None, help="BLAS threads")
        p.add_argument("--seed", type=int, default=None, help="random seed (u64)")
        p.add_argument("--resume", type=Path, default=None, help="checkpoint to resume reduce from")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "screen":
            p.add_argument("--grid", type=int, default=None, help="number of frequency grid points")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config) if args.config else RunConfig()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        print("config error: seed: must be an unsigned 64-bit integer", file=sys.stderr)
        return 2
    threads = args.threads
    if threads is not None:
        # more BLAS threads than cores makes LAPACK spin instead of compute
        cores = len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1
        if threads > cores:
            logger.warning("--threads %d exceeds %d available cores; using %d", threads, cores, cores)
            threads = cores
    pipe = Pipeline(config, out=args.out, seed=args.seed, resume=args.resume)
    start = time.perf_counter()
    try:
        with threadpool_limits(limits=threads):
            if args.stage == "report":
                return pipe.report()
            if args.stage == "screen":
                payload = pipe.screen(grid=args.grid)
            else:
                payload = getattr(pipe, args.stage)()
    except (DivisorTooSmall, ScheduleError, QuadratureError) as exc:
        print(f"{args.stage} failed: {exc}", file=sys.stderr)
        return 1
    logger.info("%s finished in %.1fs", args.stage, time.perf_counter() - start)
    ok = payload.get("converged", True) if isinstance(payload, dict) else True
    print(f"{args.stage}: wrote results to {pipe.out}")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
