"""Scenario files, run-metadata records and trajectory CSV output.

Scenario files are TOML with a fixed schema; unknown keys are rejected::

    preset = "paper-sec4"          # optional base scenario

    [params]                       # L, B, K_d, zeta, eta, rho0, S_eff[, V_eff]
    [setpoint]                     # f_pe, N_e  (or also l_e, dP_e, alpha_pe, F_ine)
    [gains]                        # k1, k2  or  synthesize = "paper-limit" | "margin-max"
    [initial]                      # l0 and one of: profile = "<preset>",
                                   # coefficients = [a, b, c], or x = [...] + values = [...]
    [solver]                       # M, rel_tol, abs_tol, dt_init, dt_max, cfl_safety,
                                   # t_end, fixed_step, extrapolation
    [lyapunov]                     # mode = "auto"  or  gamma1..3, A1..3
    [outputs]                      # directory, stride, probes = [x, ...]

Metadata files are flat ``dotted.key = value`` lines (also valid TOML); the
``scenario.*`` keys reproduce the scenario exactly.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import math
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .grid import Grid
from .linearization import synthesize_gains, linearize
from .lyapunov import LyapunovConfig
from .model import (
    Equilibrium,
    Gains,
    PhysicalParams,
    equilibrium_from_fill,
    inflow_ratio,
    validate_equilibrium,
)
from .solver import PROFILE_PRESETS, SolverConfig, TabulatedProfile, Trajectory, TrigProfile, interface_value


class ScenarioError(ValueError):
    """Parse or validation failure, naming the offending field."""


PARAM_KEYS = ("L", "B", "K_d", "zeta", "eta", "rho0", "S_eff", "V_eff")
SETPOINT_KEYS = ("f_pe", "N_e", "l_e", "dP_e", "alpha_pe", "F_ine")
SOLVER_KEYS = ("M", "rel_tol", "abs_tol", "dt_init", "dt_max", "cfl_safety", "t_end", "fixed_step", "extrapolation")
LYAP_KEYS = ("mode", "gamma1", "gamma2", "gamma3", "A1", "A2", "A3")
SCHEMA: dict[str, tuple[str, ...]] = {
    "params": PARAM_KEYS,
    "setpoint": SETPOINT_KEYS,
    "gains": ("k1", "k2", "synthesize"),
    "initial": ("l0", "profile", "coefficients", "x", "values"),
    "solver": SOLVER_KEYS,
    "lyapunov": LYAP_KEYS,
    "outputs": ("directory", "stride", "probes"),
}
TOP_KEYS = ("preset",) + tuple(SCHEMA)
PROFILE_KINDS = {"profile", "coefficients", "x", "values"}

_REFERENCE = PhysicalParams.reference()
PRESETS: dict[str, dict[str, Any]] = {
    "paper-sec4": {
        "params": {k: getattr(_REFERENCE, k) for k in PARAM_KEYS if k != "V_eff"},
        "setpoint": {"f_pe": 0.6},
        "gains": {"k1": 0.01, "k2": 0.0001},
        "initial": {"l0": 1.5, "profile": "paper-sec4"},
        "solver": {},
        "lyapunov": {"mode": "auto"},
        "outputs": {"directory": "out", "stride": 5.0, "probes": [0.0, 0.5, 1.0]},
    }
}

CSV_BASE = ("t", "l", "N", "F_in", "dP")
CSV_TAIL = ("V0", "V1", "V2", "V3", "Lcomposite", "h2_err", "dt_used")


@dataclass(frozen=True)
class Outputs:
    directory: str
    stride: float
    probes: tuple[float, ...]


@dataclass(frozen=True)
class Scenario:
    params: PhysicalParams
    setpoint: Mapping[str, float]
    gains: Gains | str
    l0: float
    profile: Any
    solver: SolverConfig
    lyapunov: LyapunovConfig | str
    outputs: Outputs
    raw: Mapping[str, Any]

    def equilibrium(self) -> Equilibrium:
        sp = self.setpoint
        eq = equilibrium_from_fill(self.params, sp["f_pe"], sp["N_e"])
        if "l_e" in sp:
            given = Equilibrium(**{k: sp[k] for k in SETPOINT_KEYS})
            validate_equilibrium(self.params, given)
            return given
        return eq

    def resolved_gains(self, eq: Equilibrium | None = None) -> Gains:
        if isinstance(self.gains, Gains):
            return self.gains
        eq = eq or self.equilibrium()
        return synthesize_gains(linearize(self.params, eq), eq, self.params, self.gains.split(":", 1)[1])

    def grid(self) -> Grid:
        return Grid(self.solver.M)

    def content_hash(self) -> str:
        return content_hash(self.raw)


def _deep_merge(base: dict, over: Mapping) -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _float(section: str, key: str, value: Any) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ScenarioError(f"{section}.{key}: expected a number, got {value!r}")
    return float(value)


def _check_keys(doc: Mapping[str, Any]) -> None:
    for key in doc:
        if key not in TOP_KEYS:
            raise ScenarioError(f"unknown top-level key {key!r} (allowed: {', '.join(TOP_KEYS)})")
    for section, allowed in SCHEMA.items():
        body = doc.get(section, {})
        if not isinstance(body, Mapping):
            raise ScenarioError(f"[{section}] must be a table")
        for key in body:
            if key not in allowed:
                raise ScenarioError(f"unknown key {section}.{key!r} (allowed: {', '.join(allowed)})")


def set_override(doc: dict, dotted: str, value: Any) -> None:
    """Apply ``section.key=value`` on a scenario document in place."""
    section, _, key = dotted.partition(".")
    if not key:
        doc[section] = value
        return
    doc.setdefault(section, {})[key] = value


def parse_override(text: str) -> tuple[str, Any]:
    key, sep, value = text.partition("=")
    if not sep:
        raise ScenarioError(f"override {text!r} must look like section.key=value")
    try:
        parsed = tomllib.loads(f"v = {value.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        parsed = value.strip()
    return key.strip(), parsed


def build_scenario(doc: Mapping[str, Any]) -> Scenario:
    """Validate a scenario document (after preset expansion) into a ``Scenario``."""
    _check_keys(doc)
    preset = doc.get("preset")
    if preset is not None:
        if preset not in PRESETS:
            raise ScenarioError(f"preset {preset!r} does not exist (known: {', '.join(PRESETS)})")
        base = copy.deepcopy(PRESETS[preset])
        # an initial profile given by the user replaces the preset's, whatever its kind
        if PROFILE_KINDS & set(doc.get("initial", {})):
            base["initial"] = {k: v for k, v in base["initial"].items() if k not in PROFILE_KINDS}
        doc = _deep_merge(base, {k: v for k, v in doc.items() if k != "preset"})
    doc = {k: copy.deepcopy(doc.get(k, {})) for k in SCHEMA}

    pd = {k: _float("params", k, v) for k, v in doc["params"].items()}
    missing = [k for k in PARAM_KEYS if k != "V_eff" and k not in pd]
    if missing:
        raise ScenarioError(f"params: missing {', '.join(missing)}")
    try:
        params = PhysicalParams(**pd)
    except ValueError as exc:
        raise ScenarioError(f"params: {exc}") from exc

    sp = {k: _float("setpoint", k, v) for k, v in doc["setpoint"].items()}
    if "N_e" not in sp:
        raise ScenarioError("setpoint.N_e required: the equilibrium screw speed has no default")
    if "f_pe" not in sp:
        raise ScenarioError("setpoint.f_pe required")
    if not 0 < sp["f_pe"] < 1:
        raise ScenarioError(f"setpoint.f_pe={sp['f_pe']!r} must lie in (0, 1)")
    if not sp["N_e"] > 0:
        raise ScenarioError(f"setpoint.N_e={sp['N_e']!r} must be > 0")
    extra = [k for k in ("l_e", "dP_e", "alpha_pe", "F_ine") if k in sp]
    if extra and len(extra) != 4:
        raise ScenarioError("setpoint: a full equilibrium needs all of l_e, dP_e, alpha_pe, F_ine")

    gd = doc["gains"]
    if "synthesize" in gd:
        if "k1" in gd or "k2" in gd:
            raise ScenarioError("gains: give either k1/k2 or synthesize, not both")
        strategy = gd["synthesize"]
        if strategy not in ("paper-limit", "margin-max"):
            raise ScenarioError(f"gains.synthesize={strategy!r} must be 'paper-limit' or 'margin-max'")
        gains: Gains | str = f"synthesize:{strategy}"
    else:
        if "k1" not in gd or "k2" not in gd:
            raise ScenarioError("gains: k1 and k2 required (or synthesize)")
        gains = Gains(_float("gains", "k1", gd["k1"]), _float("gains", "k2", gd["k2"]))

    ini = doc["initial"]
    if "l0" not in ini:
        raise ScenarioError("initial.l0 required")
    l0 = _float("initial", "l0", ini["l0"])
    if not 0 < l0 < params.L:
        raise ScenarioError(f"initial.l0={l0!r} must lie in (0, L={params.L})")
    kinds = [k for k in ("profile", "coefficients", "x") if k in ini]
    if len(kinds) != 1:
        raise ScenarioError("initial: give exactly one of profile, coefficients, or x/values")
    if "values" in ini and "x" not in ini:
        raise ScenarioError("initial.values needs initial.x")
    if kinds[0] == "profile":
        if ini["profile"] not in PROFILE_PRESETS:
            raise ScenarioError(f"initial.profile={ini['profile']!r} is not a known preset")
        profile = PROFILE_PRESETS[ini["profile"]]
    elif kinds[0] == "coefficients":
        coef = ini["coefficients"]
        if not isinstance(coef, list) or len(coef) != 3:
            raise ScenarioError("initial.coefficients must be [a, b, c]")
        profile = TrigProfile(*(_float("initial", "coefficients", c) for c in coef))
    else:
        try:
            profile = TabulatedProfile(
                tuple(_float("initial", "x", v) for v in ini["x"]),
                tuple(_float("initial", "values", v) for v in ini.get("values", [])),
            )
        except ValueError as exc:
            raise ScenarioError(f"initial: {exc}") from exc

    sd = dict(doc["solver"])
    out = doc["outputs"]
    stride = _float("outputs", "stride", out.get("stride", 5.0))
    kwargs: dict[str, Any] = {}
    for k, v in sd.items():
        if k == "M":
            if isinstance(v, bool) or not isinstance(v, int):
                raise ScenarioError(f"solver.M must be an integer, got {v!r}")
            kwargs[k] = v
        elif k == "fixed_step":
            if not isinstance(v, bool):
                raise ScenarioError(f"solver.fixed_step must be a boolean, got {v!r}")
            kwargs[k] = v
        elif k == "extrapolation":
            kwargs[k] = v
        else:
            kwargs[k] = _float("solver", k, v)
    try:
        solver = SolverConfig(output_stride=stride, **kwargs)
    except ValueError as exc:
        raise ScenarioError(f"solver: {exc}") from exc

    ld = doc["lyapunov"]
    mode = ld.get("mode", "auto" if not ld else None)
    if mode == "auto":
        if set(ld) - {"mode"}:
            raise ScenarioError("lyapunov: explicit constants cannot be combined with mode = 'auto'")
        lyap: LyapunovConfig | str = "auto"
    elif mode is None or mode == "explicit":
        try:
            lyap = LyapunovConfig(**{k: _float("lyapunov", k, ld[k]) for k in LYAP_KEYS[1:]})
        except KeyError as exc:
            raise ScenarioError(f"lyapunov: missing {exc.args[0]}") from exc
        except ValueError as exc:
            raise ScenarioError(f"lyapunov: {exc}") from exc
    else:
        raise ScenarioError(f"lyapunov.mode={mode!r} must be 'auto' or 'explicit'")

    probes = tuple(_float("outputs", "probes", v) for v in out.get("probes", [0.0, 0.5, 1.0]))
    if any(not 0 <= x <= 1 for x in probes):
        raise ScenarioError(f"outputs.probes must lie in [0, 1], got {probes!r}")
    outputs = Outputs(directory=str(out.get("directory", "out")), stride=stride, probes=probes)

    canonical = {k: v for k, v in doc.items() if v}
    return Scenario(
        params=params,
        setpoint=sp,
        gains=gains,
        l0=l0,
        profile=profile,
        solver=solver,
        lyapunov=lyap,
        outputs=outputs,
        raw=canonical,
    )


def load_document(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioError(f"{path}: {exc}") from exc
    if "scenario" in doc and "run" in doc:
        return doc["scenario"]
    return doc


def load_scenario(path: str | Path, overrides: Mapping[str, Any] | None = None) -> Scenario:
    """Load a scenario file, a run-metadata file, or ``builtin:<preset>``."""
    text = str(path)
    if text.startswith("builtin:"):
        name = text.split(":", 1)[1]
        if name not in PRESETS:
            raise ScenarioError(f"preset {name!r} does not exist (known: {', '.join(PRESETS)})")
        doc: dict[str, Any] = {"preset": name}
    else:
        doc = load_document(path)
    for key, value in (overrides or {}).items():
        set_override(doc, key, value)
    return build_scenario(doc)


def fmt_number(x: float) -> str:
    """17 significant digits; always parses back as a float."""
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, int):
        return str(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    s = format(x, ".17g")
    if not any(c in s for c in ".en"):
        s += ".0"
    return s


def _toml_value(value: Any) -> str:
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    return fmt_number(value)


def flatten(doc: Mapping[str, Any], prefix: str = "") -> list[tuple[str, Any]]:
    items = []
    for key in doc:
        value = doc[key]
        name = f"{prefix}{key}"
        if isinstance(value, Mapping):
            items.extend(flatten(value, name + "."))
        else:
            items.append((name, value))
    return items


def dump_flat(doc: Mapping[str, Any]) -> str:
    return "".join(f"{k} = {_toml_value(v)}\n" for k, v in flatten(doc))


def content_hash(doc: Mapping[str, Any]) -> str:
    """Git blob-style SHA-1 of the canonical flat serialization."""
    body = dump_flat(doc).encode()
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


def probe_values(state, p: PhysicalParams, grid: Grid, probes) -> list[float]:
    """Filling ratio at the probe points, using the boundary value at x = 0."""
    f = state.f
    left = inflow_ratio(p, state.act.F_in, state.act.N) if state.act is not None else float(f[0])
    xs = np.concatenate(([0.0], grid.x, [1.0]))
    vs = np.concatenate(([left], f, [interface_value(f)]))
    return [float(np.interp(x, xs, vs)) for x in probes]


def csv_header(probes) -> list[str]:
    return list(CSV_BASE) + [f"f_at_probe_{x:g}" for x in probes] + list(CSV_TAIL)


def write_trajectory_csv(path: str | Path, traj: Trajectory, p: PhysicalParams, grid: Grid, probes) -> None:
    nan = float("nan")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(csv_header(probes))
        for i, s in enumerate(traj.states):
            act = s.act
            row = [s.t, s.l, act.N if act else nan, act.F_in if act else nan, act.dP if act else nan]
            row += probe_values(s, p, grid, probes)
            if traj.readings:
                r = traj.readings[i]
                row += [r.V0, r.V1, r.V2, r.V3, r.Lcomposite, r.h2_err]
            else:
                row += [nan] * 6
            row.append(traj.dt_used[i])
            writer.writerow([fmt_number(float(v)) for v in row])


def read_trajectory_csv(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    data = np.array(rows, dtype=float).reshape(len(rows), len(header))
    return {name: data[:, i] for i, name in enumerate(header)}


def dataclass_dict(obj) -> dict[str, Any]:
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


def write_metadata(path: str | Path, sections: Mapping[str, Mapping[str, Any]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dump_flat(sections))
