"""Run configuration, JSON summaries and CSV tables."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import tomli

from .exceptions import ConfigError
from .potential import PotentialSpec

_SECTIONS = {"potential", "basis", "schedule", "kam", "frequency", "screen", "verify", "output", "seed"}


@dataclass
class ScheduleConfig:
    eps0: float = 1e-4
    sigma0: float = 1.0
    beta: float = None
    alpha: float = None
    m_max: int = 6
    enforce_smallness: bool = True


@dataclass
class KamConfig:
    K_box: int = None
    kappa_cap: object = "auto"
    grid_points: int = None


@dataclass
class ScreenConfig:
    K: int = 16
    gamma: float = 1e-3
    grid: int = 10000
    measure_K: int = 10


@dataclass
class VerifyConfig:
    conjugacy_T: float = 100.0
    sobolev_T: float = 1e4
    sobolev_eps: float = 1e-3
    quasi_energy_range: int = 2
    xi0: object = "random"
    dt: float = None
    tail_check: bool = True


@dataclass
class RunConfig:
    potential: PotentialSpec = field(default_factory=PotentialSpec)
    W_max: int = 41
    quad_order: int = None
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    kam: KamConfig = field(default_factory=KamConfig)
    omega: list = field(default_factory=lambda: [math.sqrt(5) - 1])
    screen: ScreenConfig = field(default_factory=ScreenConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    out: str = "out"
    seed: int = 0

    def to_dict(self):
        return {
            "seed": self.seed,
            "potential": self.potential.to_dict(),
            "basis": {"W_max": self.W_max, "quad_order": self.quad_order},
            "schedule": asdict(self.schedule),
            "kam": asdict(self.kam),
            "frequency": {"omega": list(self.omega)},
            "screen": asdict(self.screen),
            "verify": asdict(self.verify),
            "output": {"dir": self.out},
        }


def _section(raw, name, cls, path):
    data = dict(raw.get(name, {}))
    known = {f for f in cls.__dataclass_fields__}
    for key in data:
        if key not in known:
            raise ConfigError(f"{path}.{key}", "unknown field")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(path, str(exc)) from None


def _require(cond, path, message):
    if not cond:
        raise ConfigError(path, message)


def parse_config(raw):
    """Validate a configuration mapping; errors name the offending field."""
    for key in raw:
        _require(key in _SECTIONS, key, "unknown section")
    pot = dict(raw.get("potential", {}))
    try:
        potential = PotentialSpec.from_dict(pot)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError("potential", str(exc)) from None
    basis = dict(raw.get("basis", {}))
    for key in basis:
        _require(key in {"W_max", "quad_order"}, f"basis.{key}", "unknown field")
    W_max = basis.get("W_max", 41)
    _require(isinstance(W_max, int) and W_max >= potential.dimension, "basis.W_max",
             f"must be an integer >= dimension ({potential.dimension})")
    quad = basis.get("quad_order")
    _require(quad is None or (isinstance(quad, int) and quad > 0), "basis.quad_order", "must be a positive integer")

    schedule = _section(raw, "schedule", ScheduleConfig, "schedule")
    _require(0 <= schedule.eps0 < 1, "schedule.eps0", "must lie in [0, 1)")
    _require(schedule.sigma0 > 0, "schedule.sigma0", "must be positive")
    _require(isinstance(schedule.m_max, int) and schedule.m_max >= 0, "schedule.m_max", "must be a non-negative integer")
    alpha = schedule.alpha if schedule.alpha is not None else potential.torus_dim + potential.dimension + 1
    if schedule.beta is not None:
        _require(schedule.beta >= alpha / 2, "schedule.beta", f"must be >= alpha/2 = {alpha / 2}")

    kam = _section(raw, "kam", KamConfig, "kam")
    _require(kam.kappa_cap in ("auto", None) or isinstance(kam.kappa_cap, (int, float)),
             "kam.kappa_cap", "must be 'auto', a number or omitted")

    freq = dict(raw.get("frequency", {}))
    for key in freq:
        _require(key == "omega", f"frequency.{key}", "unknown field")
    omega = freq.get("omega", [math.sqrt(5) - 1])
    omega = [omega] if isinstance(omega, (int, float)) else list(omega)
    _require(len(omega) == potential.torus_dim, "frequency.omega",
             f"needs {potential.torus_dim} components")
    _require(all(isinstance(x, (int, float)) and math.isfinite(x) for x in omega), "frequency.omega",
             "components must be finite numbers")

    screen = _section(raw, "screen", ScreenConfig, "screen")
    _require(screen.gamma > 0, "screen.gamma", "must be positive")
    _require(screen.grid > 0, "screen.grid", "must be positive")
    verify = _section(raw, "verify", VerifyConfig, "verify")
    _require(verify.conjugacy_T > 0 and verify.sobolev_T > 0, "verify", "horizons must be positive")
    _require(isinstance(verify.xi0, (str, list)), "verify.xi0", "must be 'ground', 'random' or a list")
    if isinstance(verify.xi0, str):
        _require(verify.xi0 in ("ground", "random"), "verify.xi0", "must be 'ground', 'random' or a list")
    output = dict(raw.get("output", {}))
    seed = raw.get("seed", 0)
    _require(isinstance(seed, int) and 0 <= seed < 2 ** 64, "seed", "must be an unsigned 64-bit integer")
    return RunConfig(potential=potential, W_max=W_max, quad_order=quad, schedule=schedule, kam=kam,
                     omega=[float(x) for x in omega], screen=screen, verify=verify,
                     out=output.get("dir", "out"), seed=seed)


def load_config(path):
    """Read a TOML or JSON configuration file."""
    path = Path(path)
    text = path.read_bytes()
    try:
        if path.suffix == ".json":
            raw = json.loads(text)
        else:
            raw = tomli.loads(text.decode())
    except (ValueError, tomli.TOMLDecodeError) as exc:
        raise ConfigError(str(path), f"cannot parse: {exc}") from None
    return parse_config(raw)


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if isinstance(obj, complex):
        return {"re": obj.real, "im": obj.imag}
    return obj


def write_json(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(to_jsonable(payload), indent=2, sort_keys=True) + "\n")
    return path


def read_json(path):
    return json.loads(Path(path).read_text())


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(x) for x in row])
    return path


def _cell(x):
    if isinstance(x, (bool, np.bool_)):
        return int(bool(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return x


def write_screen_csv(path, rows, n):
    header = [f"omega_{i + 1}" for i in range(n)] + ["pass", "worst_first", "worst_second"]
    return write_csv(path, header, rows)


def write_trajectory_csv(path, times, norm0, norm1, conj_err):
    rows = zip(times, norm0, norm1, conj_err)
    return write_csv(path, ["t", "norm_0", "norm_1", "conjugacy_error"], rows)


RUN_LOG_FIELDS = ["m", "log10_eps_sched", "Q_measured", "S_plus", "worst_divisor_ratio",
                  "K_m", "K_eff", "gamma_m", "kappa_m", "kappa_eff"]


def write_run_log(path, history):
    rows = [[h.get(k) for k in RUN_LOG_FIELDS] for h in history]
    return write_csv(path, RUN_LOG_FIELDS, rows)
