"""Run descriptions, presets, the time loop, and every file the package writes.

A scenario is a JSON document with the sections ``domain``, ``time``,
``moduli``, ``material``, ``dissipation``, ``mobility``, ``loads``,
``initial``, ``solver`` and ``output`` (all optional; defaults fill the
rest).  :func:`parse_config` validates it and checks the model hypotheses,
collecting every violation before failing.

Field presets are named analytic families with numeric parameters:

``constant``        ``amplitude``
``gaussian-pulse``  ``amplitude * exp(-|x - center|^2 / (2 width^2))``;
                    with ``"radial": true`` a vector field points along
                    ``(x - center) / width``
``plane-wave``      ``amplitude * cos(wavevector . x + phase)``
``ramp``            ``amplitude * (x - origin) . direction``

Every preset also accepts ``noise`` (uniform, seeded) and ``offset``.
``amplitude`` is a scalar or one number per component.  Initial fields
are the ground state (``v = Ee = Ep = 0``, ``alpha = 1``,
``chi = chi_eq``) plus their preset.  Loads carry an optional temporal
``envelope`` using the same family names in time (``gaussian-pulse`` with
``t0``/``width``, ``plane-wave`` with ``frequency``/``phase``, ``ramp``
with ``t_ramp``); boundary loads ``g_t`` and ``h`` list the ``sides`` they
act on (``x0``, ``x1``, ``y0``, ``y1``).
"""
from __future__ import annotations

import copy
import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import energy as en
from . import field_ops as fo
from . import material as mm
from . import rothe as ro
from . import tensor_core as tc

FAMILIES = ("constant", "gaussian-pulse", "plane-wave", "ramp")
SIDE_NAMES = ("x0", "x1", "y0", "y1")
OUTPUT_ENV = "EULERPORO_OUTPUT_DIR"
EXIT_OK, EXIT_SOLVER, EXIT_CONFIG = 0, 1, 2
SNAPSHOT_FORMATS = ("csv", "vtk")


class ConfigError(ValueError):
    """Invalid configuration.  ``violations`` lists ``(hypothesis, path, message)``."""

    def __init__(self, violations):
        self.violations = list(violations)
        lines = [f"[{h}] {p}: {m}" for h, p, m in self.violations]
        super().__init__("invalid configuration:\n  " + "\n  ".join(lines))

    @property
    def hypotheses(self) -> set:
        return {h for h, _, _ in self.violations}


@dataclass
class ScenarioConfig:
    d: int = 2
    n: tuple = (32, 32)
    L: tuple = (1.0, 1.0)
    bc_mode: str = "box"
    t_end: float = 0.5
    tau: float = 5e-3
    tau_min: float = 1e-5
    moduli: mm.Moduli = field(default_factory=mm.Moduli)
    material: mm.BiotDamageParams = field(default_factory=mm.BiotDamageParams)
    dissipation: mm.DissipationParams = field(default_factory=mm.DissipationParams)
    mobility: mm.MobilityParams = field(default_factory=mm.MobilityParams)
    ell: int = 1
    loads: dict = field(default_factory=dict)
    initial: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)
    seed: int = 0
    guard_factor: float = 1.25
    monitor_ceiling: float = 1e6
    name: str = "scenario"

    @property
    def steps(self) -> int:
        return int(round(self.t_end / self.tau))

    def grid(self) -> fo.Grid:
        return fo.Grid(self.n, self.L, periodic=self.bc_mode == "periodic")

    def mat(self) -> mm.Material:
        return mm.Material(self.material, self.dissipation, self.mobility)

    def settings(self) -> ro.SolverSettings:
        s = dict(self.solver)
        return ro.SolverSettings(tau=self.tau, tau_min=self.tau_min, **s)


# ------------------------------------------------------------ parsing

_SOLVER_KEYS = {f.name for f in fields(ro.SolverSettings)} - {"tau", "tau_min"}
_OUTPUT_DEFAULTS = {"dir": "eulerporo-out", "energy_every": 1, "snapshot_every": 0,
                    "formats": ["csv"]}


def _num(x):
    if isinstance(x, str) and x.lower() in ("inf", "infinity"):
        return math.inf
    return x


def _section(doc, key, errors):
    sec = doc.get(key, {})
    if not isinstance(sec, dict):
        errors.append(("config", key, "must be an object"))
        return {}
    return sec


def _fill(cls, sec, path, errors):
    known = {f.name: f for f in fields(cls)}
    kw = {}
    for k, v in sec.items():
        if k not in known:
            errors.append(("config", f"{path}.{k}", "unknown key"))
            continue
        v = _num(v)
        if not isinstance(v, (int, float)) or isinstance(v, bool):
            errors.append(("config", f"{path}.{k}", f"expected a number, got {v!r}"))
            continue
        if math.isnan(v):
            errors.append(("config", f"{path}.{k}", "NaN is not allowed"))
            continue
        kw[k] = float(v)
    return cls(**kw)


def _check_preset(spec, path, ncomp, errors, hyp="ass:5", spatial=True):
    if spec is None:
        return
    if not isinstance(spec, dict):
        errors.append(("config", path, "preset must be an object"))
        return
    fam = spec.get("preset", "constant")
    if fam not in FAMILIES:
        errors.append((hyp, path, f"unknown preset {fam!r}; expected one of {FAMILIES}"))
    amp = np.atleast_1d(np.asarray(spec.get("amplitude", 0.0), dtype=float))
    if amp.size not in (1, ncomp):
        errors.append((hyp, f"{path}.amplitude", f"needs 1 or {ncomp} entries, got {amp.size}"))
    for key in ("amplitude", "width", "noise", "offset", "phase", "wavevector", "center",
                "direction", "origin"):
        if key in spec:
            val = np.asarray(spec[key], dtype=float)
            if not np.all(np.isfinite(val)):
                errors.append((hyp, f"{path}.{key}", "must be finite"))
    if fam == "gaussian-pulse" and not float(spec.get("width", 0.1)) > 0.0:
        errors.append((hyp, f"{path}.width", "must be positive"))
    env = spec.get("envelope")
    if env is not None:
        _check_preset(env, f"{path}.envelope", 1, errors, hyp, spatial=False)


def check_hypotheses(cfg: ScenarioConfig) -> list:
    """Every violated model hypothesis as ``(name, path, message)``."""
    out = []
    m, p, dp, mp = cfg.moduli, cfg.material, cfg.dissipation, cfg.mobility
    for k in ("rho", "k_v", "k_p", "k_a", "gamma"):
        val = getattr(m, k)
        if not val > 0.0:
            out.append(("ass:4", f"moduli.{k}", f"must be positive, got {val:g}"))
    if not m.k_e >= 0.0:
        out.append(("ass:4", "moduli.k_e", f"must be nonnegative, got {m.k_e:g}"))
    if not mp.m0 > 0.0:
        out.append(("ass:3", "mobility.m0", f"must be positive, got {mp.m0:g}"))
    if not mp.m_min > 0.0:
        out.append(("ass:3", "mobility.m_min", f"must be positive, got {mp.m_min:g}"))
    low = min(mp.m0, mp.m0 + mp.m1)
    if mp.m_min > 0.0 and low < mp.m_min:
        out.append(("ass:3", "mobility.m1",
                    f"m0 + m1 alpha drops to {low:g} < m_min = {mp.m_min:g} on [0, 1]"))
    for k in ("eta_p", "eta_alpha"):
        val = getattr(dp, k)
        if not val > 0.0:
            out.append(("ass:2", f"dissipation.{k}", f"must be positive, got {val:g}"))
    for k in ("sigma_y", "a_y"):
        val = getattr(dp, k)
        if not val >= 0.0:
            out.append(("ass:2", f"dissipation.{k}", f"must be nonnegative, got {val:g}"))
    for k in ("K", "M_b", "G0"):
        val = getattr(p, k)
        if not val > 0.0:
            out.append(("ass:1", f"material.{k}", f"must be positive, got {val:g}"))
    for k in ("G1", "eps_sat", "c_h"):
        val = getattr(p, k)
        if not val >= 0.0:
            out.append(("ass:1", f"material.{k}", f"must be nonnegative, got {val:g}"))
    if not 0.0 < p.beta <= 1.0:
        out.append(("ass:1", "material.beta", f"must lie in (0, 1], got {p.beta:g}"))
    if p.G1 >= 0.0 and p.eps_sat >= 0.0:
        bound = cfg.guard_factor * mm.convexity_bound(p)
        if p.G0 <= bound and bound > 0.0:
            out.append(("ass:1", "material.G0",
                        f"convexity guard needs G0 > {bound:.6g} (= {cfg.guard_factor:g} x "
                        f"{mm.convexity_guard_constant(p.eps_sat):.6g} G1 alpha_max^2), "
                        f"got {p.G0:g}"))
    return out


def parse_config(text: str) -> ScenarioConfig:
    """Parse and validate a JSON scenario; raise :class:`ConfigError` listing all problems."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([("syntax", f"line {exc.lineno}, column {exc.colno}", exc.msg)]) from None
    if not isinstance(doc, dict):
        raise ConfigError([("syntax", "<root>", "top level must be an object")])
    errors = []
    allowed = {"name", "seed", "domain", "time", "moduli", "material", "dissipation", "mobility",
               "loads", "initial", "solver", "output", "ell", "guard_factor", "monitor_ceiling"}
    for k in doc:
        if k not in allowed:
            errors.append(("config", k, "unknown section"))
    dom = _section(doc, "domain", errors)
    d = dom.get("d", 2)
    if d not in (1, 2):
        errors.append(("config", "domain.d", f"dimension must be 1 or 2, got {d!r}"))
        d = 2
    n = dom.get("n", 32)
    n = tuple(int(x) for x in np.broadcast_to(np.atleast_1d(n), (d,)))
    L = tuple(float(x) for x in np.broadcast_to(np.atleast_1d(dom.get("L", 1.0)), (d,)))
    if min(n) < 4:
        errors.append(("config", "domain.n", f"need at least 4 cells per axis, got {n}"))
    if not min(L) > 0.0:
        errors.append(("config", "domain.L", "box lengths must be positive"))
    bc_mode = dom.get("bc_mode", "box")
    if bc_mode not in ("box", "periodic"):
        errors.append(("config", "domain.bc_mode", f"expected 'box' or 'periodic', got {bc_mode!r}"))
    tm = _section(doc, "time", errors)
    t_end = float(tm.get("t_end", 0.5))
    tau = float(tm.get("tau", 5e-3))
    tau_min = float(tm.get("tau_min", min(1e-5, tau)))
    if not (tau > 0.0 and tau_min > 0.0 and tau >= tau_min):
        errors.append(("config", "time", "need tau >= tau_min > 0"))
    if not t_end > 0.0:
        errors.append(("config", "time.t_end", "must be positive"))

    moduli = _fill(mm.Moduli, _section(doc, "moduli", errors), "moduli", errors)
    material = _fill(mm.BiotDamageParams, _section(doc, "material", errors), "material", errors)
    dissipation = _fill(mm.DissipationParams, _section(doc, "dissipation", errors), "dissipation",
                        errors)
    mobility = _fill(mm.MobilityParams, _section(doc, "mobility", errors), "mobility", errors)
    ell = int(doc.get("ell", 1))
    if ell < 1:
        errors.append(("config", "ell", "need at least one internal variable"))
        ell = 1

    solver = dict(_section(doc, "solver", errors))
    for k in list(solver):
        if k not in _SOLVER_KEYS:
            errors.append(("config", f"solver.{k}", "unknown key"))
            solver.pop(k)
    output = dict(_OUTPUT_DEFAULTS)
    output.update(_section(doc, "output", errors))
    for fmt in output.get("formats", []):
        if fmt not in SNAPSHOT_FORMATS:
            errors.append(("config", "output.formats", f"unknown format {fmt!r}"))

    nsym = tc.nsym(d)
    initial = _section(doc, "initial", errors)
    comps = {"v": d, "Ee": nsym, "Ep": nsym, "alpha": ell, "chi": 1}
    for k, spec in initial.items():
        if k not in comps:
            errors.append(("config", f"initial.{k}", "unknown field"))
            continue
        _check_preset(spec, f"initial.{k}", comps[k], errors)
    loads = _section(doc, "loads", errors)
    lcomps = {"f": d, "g_t": 1, "h": 1}
    for k, spec in loads.items():
        if k not in lcomps:
            errors.append(("config", f"loads.{k}", "unknown load"))
            continue
        _check_preset(spec, f"loads.{k}", lcomps[k], errors, hyp="ass:6")
        for s in (spec or {}).get("sides", []):
            if s not in SIDE_NAMES[: 2 * d]:
                errors.append(("config", f"loads.{k}.sides", f"unknown side {s!r}"))

    cfg = ScenarioConfig(
        d=d, n=n, L=L, bc_mode=bc_mode, t_end=t_end, tau=tau, tau_min=tau_min, moduli=moduli,
        material=material, dissipation=dissipation, mobility=mobility, ell=ell,
        loads=dict(loads), initial=dict(initial), solver=solver, output=output,
        seed=int(doc.get("seed", 0)), guard_factor=float(doc.get("guard_factor", 1.25)),
        monitor_ceiling=float(doc.get("monitor_ceiling", 1e6)),
        name=str(doc.get("name", "scenario")))
    try:
        cfg.settings()
    except (TypeError, ValueError) as exc:
        errors.append(("config", "solver", str(exc)))
    errors.extend(check_hypotheses(cfg))
    if errors:
        raise ConfigError(errors)
    return cfg


def load_config(path) -> ScenarioConfig:
    return parse_config(Path(path).read_text())


def config_to_dict(cfg: ScenarioConfig) -> dict:
    """JSON-ready document that :func:`parse_config` maps back to ``cfg``."""
    return {
        "name": cfg.name, "seed": cfg.seed, "ell": cfg.ell, "guard_factor": cfg.guard_factor,
        "monitor_ceiling": cfg.monitor_ceiling,
        "domain": {"d": cfg.d, "n": list(cfg.n), "L": list(cfg.L), "bc_mode": cfg.bc_mode},
        "time": {"t_end": cfg.t_end, "tau": cfg.tau, "tau_min": cfg.tau_min},
        "moduli": asdict(cfg.moduli), "material": asdict(cfg.material),
        "dissipation": {k: (v if math.isfinite(v) else "inf")
                        for k, v in asdict(cfg.dissipation).items()},
        "mobility": asdict(cfg.mobility), "loads": cfg.loads, "initial": cfg.initial,
        "solver": cfg.solver, "output": cfg.output,
    }


# ------------------------------------------------------------ presets

def _amp(spec, ncomp):
    a = np.atleast_1d(np.asarray(spec.get("amplitude", 0.0), dtype=float))
    return np.broadcast_to(a, (ncomp,)).copy()


def evaluate_preset(spec, X: np.ndarray, ncomp: int, L, rng=None) -> np.ndarray:
    """Evaluate a spatial preset at points ``X`` of shape ``(d, ...)``; returns ``(ncomp, ...)``."""
    spec = spec or {}
    fam = spec.get("preset", "constant")
    d = X.shape[0]
    amp = _amp(spec, ncomp).reshape((ncomp,) + (1,) * (X.ndim - 1))
    L = np.asarray(L, dtype=float)
    if fam == "constant":
        out = amp * np.ones(X.shape[1:])
    elif fam == "gaussian-pulse":
        c = np.broadcast_to(np.asarray(spec.get("center", L / 2), dtype=float), (d,))
        w = float(spec.get("width", 0.1))
        dx = X - c.reshape((d,) + (1,) * (X.ndim - 1))
        g = np.exp(-np.sum(dx ** 2, axis=0) / (2 * w * w))
        if spec.get("radial", False):
            if ncomp != d:
                raise ValueError("radial pulses need a vector field")
            out = amp * dx / w * g
        else:
            out = amp * g
    elif fam == "plane-wave":
        k = np.broadcast_to(np.asarray(spec.get("wavevector", 2 * np.pi / L), dtype=float), (d,))
        ph = float(spec.get("phase", 0.0))
        out = amp * np.cos(np.tensordot(k, X, axes=1) + ph)
    elif fam == "ramp":
        dirn = np.zeros(d)
        dirn[0] = 1.0
        dirn = np.broadcast_to(np.asarray(spec.get("direction", dirn), dtype=float), (d,))
        o = np.broadcast_to(np.asarray(spec.get("origin", 0.0), dtype=float), (d,))
        out = amp * np.tensordot(dirn, X - o.reshape((d,) + (1,) * (X.ndim - 1)), axes=1)
    else:
        raise ValueError(f"unknown preset {fam!r}")
    out = out + float(spec.get("offset", 0.0))
    noise = float(spec.get("noise", 0.0))
    if noise:
        rng = rng if rng is not None else np.random.default_rng(0)
        out = out + noise * rng.uniform(-1.0, 1.0, out.shape)
    return out


def evaluate_envelope(spec, t: float) -> float:
    """Temporal factor of a load (1 without an envelope)."""
    if not spec:
        return 1.0
    fam = spec.get("preset", "constant")
    a = float(np.atleast_1d(spec.get("amplitude", 1.0))[0])
    if fam == "constant":
        val = a
    elif fam == "gaussian-pulse":
        t0, w = float(spec.get("t0", 0.0)), float(spec.get("width", 0.1))
        val = a * math.exp(-((t - t0) ** 2) / (2 * w * w))
    elif fam == "plane-wave":
        om = 2 * math.pi * float(spec.get("frequency", 1.0))
        val = a * math.cos(om * t + float(spec.get("phase", 0.0)))
    elif fam == "ramp":
        tr = float(spec.get("t_ramp", 1.0))
        val = a * min(max(t / tr, 0.0), 1.0)
    else:
        raise ValueError(f"unknown envelope {fam!r}")
    return val + float(spec.get("offset", 0.0))


def build_loads(cfg: ScenarioConfig) -> ro.Loads:
    loads = cfg.loads
    d = cfg.d

    f_spec = loads.get("f")
    if f_spec:
        cache = {}

        def f(t, grid):
            key = id(grid)
            if key not in cache:
                rng = np.random.default_rng(cfg.seed + 1)
                cache[key] = evaluate_preset(f_spec, grid.centers(), d, grid.L, rng)
            return cache[key] * evaluate_envelope(f_spec.get("envelope"), t)
    else:
        f = ro._zero_load_f

    def side_load(spec):
        if not spec:
            return ro._zero_side
        sides = spec.get("sides", list(SIDE_NAMES[: 2 * d]))
        cache = {}

        def load(t, grid):
            key = id(grid)
            if key not in cache:
                vals = []
                for k, (a, s) in enumerate(grid.sides):
                    if SIDE_NAMES[k] in sides:
                        pts = grid.face_points(a, s)
                        vals.append(evaluate_preset(spec, pts, 1, grid.L)[0])
                    else:
                        vals.append(np.zeros(grid.face_shape(a)))
                cache[key] = vals
            e = evaluate_envelope(spec.get("envelope"), t)
            return [v * e for v in cache[key]]
        return load

    return ro.Loads(f=f, g_t=side_load(loads.get("g_t")), h=side_load(loads.get("h")))


def build_initial_state(cfg: ScenarioConfig, grid: fo.Grid | None = None) -> ro.State:
    grid = grid or cfg.grid()
    X = grid.centers()
    rng = np.random.default_rng(cfg.seed)
    nsym = tc.nsym(cfg.d)
    comps = {"v": cfg.d, "Ee": nsym, "Ep": nsym, "alpha": cfg.ell, "chi": 1}
    base = {"v": 0.0, "Ee": 0.0, "Ep": 0.0, "alpha": 1.0, "chi": cfg.material.chi_eq}
    arrays = {}
    for k, nc in comps.items():
        spec = cfg.initial.get(k)
        if spec is None:
            arrays[k] = None
            continue
        val = base[k] + evaluate_preset(spec, X, nc, grid.L, rng)
        arrays[k] = val[0] if k == "chi" else val
    if arrays["alpha"] is None and cfg.ell != 1:
        arrays["alpha"] = np.ones((cfg.ell,) + grid.n)
    return ro.initial_state(grid, cfg.moduli, cfg.mat(), ell=cfg.ell, **arrays)


# ------------------------------------------------------------ snapshots

def _tensor_names(d):
    return ["xx"] if d == 1 else ["xx", "xy", "yy"]


def snapshot_columns(d: int, ell: int) -> list:
    axes = "xy"[:d]
    cols = list(axes)
    cols += [f"v{a}" for a in axes]
    for name in ("Ee", "Ep"):
        cols += [f"{name}_{c}" for c in _tensor_names(d)]
    cols += [f"alpha{i + 1}" for i in range(ell)]
    cols += ["chi", "mu", "trS", "phi"]
    return cols


def snapshot_table(state: ro.State, mat: mm.Material) -> np.ndarray:
    """Rows of :func:`snapshot_columns`, cells in C order (first axis slowest)."""
    g = state.grid
    I = g.interior
    phi = mm.free_energy(I(state.Ee), I(state.alpha), I(state.chi), mat.biot)
    parts = [g.centers(), I(state.v), I(state.Ee), I(state.Ep), I(state.alpha),
             I(state.chi)[None], I(state.mu)[None], tc.trace(I(state.S))[None], phi[None]]
    return np.concatenate([p.reshape(p.shape[0], -1) for p in parts]).T


def write_snapshot_csv(state: ro.State, mat: mm.Material, path) -> Path:
    path = Path(path)
    cols = snapshot_columns(state.grid.d, state.alpha.shape[0])
    table = snapshot_table(state, mat)
    with open(path, "w", newline="") as fh:
        fh.write(f"# t={state.t!r}\n")
        np.savetxt(fh, table, delimiter=",", header=",".join(cols), comments="", fmt="%.17g")
    return path


def read_snapshot_csv(path):
    """Return ``(t, columns, table)`` from a snapshot CSV."""
    with open(path) as fh:
        first = fh.readline()
        t = float(first.split("=", 1)[1])
        cols = fh.readline().strip().split(",")
        table = np.loadtxt(fh, delimiter=",", ndmin=2)
    return t, cols, table


def write_snapshot_vtk(state: ro.State, mat: mm.Material, path) -> Path:
    """Legacy ASCII VTK, STRUCTURED_POINTS with CELL_DATA.

    Fields: ``v`` (VECTORS), ``Ee``, ``Ep``, ``S`` (TENSORS), ``alpha1..``,
    ``chi``, ``mu``, ``trS``, ``phi`` (SCALARS).  Cells are listed with x
    varying fastest, as VTK expects.
    """
    g = state.grid
    I = g.interior
    d = g.d
    path = Path(path)
    nx = g.n + (1,) * (3 - d)
    hx = g.h + (1.0,) * (3 - d)

    def cells(a):
        # VTK order: x fastest -> transpose the cell axes
        return np.asarray(a).T.ravel()

    lines = ["# vtk DataFile Version 3.0", f"eulerporo t={state.t!r}", "ASCII",
             "DATASET STRUCTURED_POINTS",
             "DIMENSIONS " + " ".join(str(k + 1) for k in nx),
             "ORIGIN 0 0 0", "SPACING " + " ".join(repr(h) for h in hx),
             f"CELL_DATA {g.ncells}"]
    fmt = lambda x: "%.17g" % x
    v = I(state.v)
    lines.append("VECTORS v double")
    comps = [cells(v[a]) for a in range(d)] + [np.zeros(g.ncells)] * (3 - d)
    lines += [" ".join(fmt(x) for x in row) for row in zip(*comps)]
    for name, T in (("Ee", state.Ee), ("Ep", state.Ep), ("S", state.S)):
        M = tc.unpack(I(T))
        lines.append(f"TENSORS {name} double")
        full = np.zeros((3, 3) + g.n)
        full[:d, :d] = M
        flat = [cells(full[i, j]) for i in range(3) for j in range(3)]
        lines += [" ".join(fmt(x) for x in row) for row in zip(*flat)]
    phi = mm.free_energy(I(state.Ee), I(state.alpha), I(state.chi), mat.biot)
    scalars = [(f"alpha{i + 1}", I(state.alpha)[i]) for i in range(state.alpha.shape[0])]
    scalars += [("chi", I(state.chi)), ("mu", I(state.mu)), ("trS", tc.trace(I(state.S))),
                ("phi", phi)]
    for name, s in scalars:
        lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
        lines += [fmt(x) for x in cells(s)]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_snapshot_vtk(path) -> dict:
    """Read back a file written by :func:`write_snapshot_vtk` into cell arrays.

    Returns a dict with ``dims`` (cell counts) and every field as an array
    of shape ``(ncells, k)`` in VTK (x fastest) order.
    """
    tokens = Path(path).read_text().split("\n")
    out = {}
    i = 0
    ncells = None
    while i < len(tokens):
        line = tokens[i].strip()
        if line.startswith("DIMENSIONS"):
            out["dims"] = tuple(int(x) - 1 for x in line.split()[1:])
        elif line.startswith("CELL_DATA"):
            ncells = int(line.split()[1])
        elif line.startswith(("VECTORS", "TENSORS", "SCALARS")):
            kind, name = line.split()[:2]
            if kind == "SCALARS":
                i += 1
            width = {"VECTORS": 3, "TENSORS": 9, "SCALARS": 1}[kind]
            rows = [np.array(tokens[i + 1 + k].split(), dtype=float) for k in range(ncells)]
            out[name] = np.vstack(rows).reshape(ncells, width)
            i += ncells
        i += 1
    return out


def export_snapshot(state: ro.State, mat: mm.Material, path, fmt: str = "csv") -> Path:
    if fmt == "csv":
        return write_snapshot_csv(state, mat, path)
    if fmt == "vtk":
        return write_snapshot_vtk(state, mat, path)
    raise ValueError(f"unknown snapshot format {fmt!r}")


# ------------------------------------------------------------ running

def energy_csv_header() -> list:
    return en.EnergyReport.columns()


def read_energy_csv(path):
    """Return ``(version, columns, rows)`` of an energy CSV."""
    with open(path) as fh:
        version = fh.readline().strip().lstrip("# ")
        reader = csv.reader(fh)
        cols = next(reader)
        rows = np.array([[float(x) for x in r] for r in reader]).reshape(-1, len(cols))
    return version, cols, rows


@dataclass
class RunResult:
    status: int
    summary: dict
    out_dir: Path
    reports: list = field(default_factory=list)
    step_slacks: list = field(default_factory=list)
    tolerances: list = field(default_factory=list)
    tolerance_parts: list = field(default_factory=list)
    monitor: en.NormMonitor | None = None
    final_state: ro.State | None = None


def resolve_output_dir(cfg: ScenarioConfig, out_dir=None) -> Path:
    """Explicit ``out_dir`` first, then ``$EULERPORO_OUTPUT_DIR``, then the config."""
    if out_dir is not None:
        return Path(out_dir)
    if os.environ.get(OUTPUT_ENV):
        return Path(os.environ[OUTPUT_ENV])
    return Path(cfg.output.get("dir", _OUTPUT_DEFAULTS["dir"]))


def run_scenario(cfg: ScenarioConfig, out_dir=None, write=True, steps=None,
                 keep_states=False) -> RunResult:
    """Run the time loop with an energy audit after every accepted step.

    Writes ``energy.csv``, snapshots per the ``output`` schedule,
    ``manifest.json`` and ``summary.json`` into the output directory
    (see :func:`resolve_output_dir`).  ``status`` is 0 on
    completion and 1 on a solver abort; artifacts are flushed either way.
    """
    out = resolve_output_dir(cfg, out_dir)
    if write:
        out.mkdir(parents=True, exist_ok=True)
    grid = cfg.grid()
    mat = cfg.mat()
    m = cfg.moduli
    settings = cfg.settings()
    loads = build_loads(cfg)
    state = build_initial_state(cfg, grid)
    report = en.initial_report(state, m, mat)
    monitor = en.NormMonitor(ceiling=cfg.monitor_ceiling)
    nsteps = cfg.steps if steps is None else steps
    e_every = int(cfg.output.get("energy_every", 1))
    s_every = int(cfg.output.get("snapshot_every", 0))
    formats = list(cfg.output.get("formats", ["csv"]))
    manifest = []
    res = RunResult(EXIT_OK, {}, out, monitor=monitor)
    states = []

    def snapshot(st, k):
        for fmt in formats:
            ext = "csv" if fmt == "csv" else "vtk"
            p = out / f"snapshot_{k:06d}.{ext}"
            export_snapshot(st, mat, p, fmt)
            manifest.append({"time": st.t, "step": k, "path": p.name, "format": fmt,
                             "fields": snapshot_columns(grid.d, cfg.ell)})

    fh = None
    writer = None
    if write:
        fh = open(out / "energy.csv", "w", newline="")
        fh.write(f"# {en.CSV_VERSION}\n")
        writer = csv.writer(fh)
        writer.writerow(energy_csv_header())
        if s_every > 0:
            snapshot(state, 0)
    halvings = 0
    substeps = 0
    error = None
    k = 0
    try:
        for k in range(1, nsteps + 1):
            subs = ro.step_adaptive(state, loads, m, mat, settings)
            for nxt, rep in subs:
                new = en.energy_report(nxt, state, loads, m, mat, rep.tau, report, settings)
                res.step_slacks.append(en.step_slack(new, report))
                res.tolerances.append(en.tolerance(new, nxt, m, rep.tau, settings.picard_tol))
                res.tolerance_parts.append(en.tolerance_parts(new, nxt, m, rep.tau,
                                                              settings.picard_tol))
                en.norm_monitor_update(nxt, monitor, rep.tau, state)
                halvings = max(halvings, rep.halvings)
                substeps += 1
                res.reports.append(new)
                report, state = new, nxt
                if keep_states:
                    states.append(state)
            if writer is not None and k % e_every == 0:
                writer.writerow([repr(float(x)) for x in report.row()])
            if write and s_every > 0 and k % s_every == 0:
                snapshot(state, k)
    except ro.NonConvergence as exc:
        res.status = EXIT_SOLVER
        error = str(exc)
    finally:
        if fh is not None:
            fh.close()
    margins = [s + t for s, t in zip(res.step_slacks, res.tolerances)]
    res.summary = {
        "name": cfg.name,
        "status": "completed" if res.status == EXIT_OK else "solver-abort",
        "exit_code": res.status,
        "error": error,
        "steps": k if res.status == EXIT_OK else k - 1,
        "substeps": substeps,
        "max_halvings": halvings,
        "t_final": state.t,
        "final_slack": report.slack,
        "max_abs_slack": max([abs(r.slack) for r in res.reports] + [0.0]),
        "min_step_slack": min(res.step_slacks) if res.step_slacks else 0.0,
        "min_step_margin": min(margins) if margins else 0.0,
        "energy_ok": all(x >= 0.0 for x in margins),
        "norms": dict(monitor.values),
        "norm_ceiling_breached": monitor.breached,
    }
    res.final_state = state
    if keep_states:
        res.summary["_states"] = len(states)
        res.states = states
    if write:
        (out / "manifest.json").write_text(json.dumps({"snapshots": manifest}, indent=2))
        (out / "summary.json").write_text(json.dumps(res.summary, indent=2, default=float))
    return res


# ------------------------------------------------------------ named scenarios

def preset_config(name: str, n: int = 64, tau: float = 5e-3, steps: int = 500) -> dict:
    """Built-in scenario documents used by the demos and the acceptance suite."""
    base = {
        "name": name, "seed": 7,
        "domain": {"d": 2, "n": [n, n], "L": [1.0, 1.0]},
        "time": {"t_end": steps * tau, "tau": tau, "tau_min": tau / 64},
        "moduli": {"rho": 1.0, "k_v": 1e-2, "k_p": 1e-4, "k_a": 1e-4, "k_e": 0.0, "gamma": 0.1},
        "material": {"K": 1.0, "M_b": 1.0, "beta": 1.0, "chi_eq": 0.0, "G1": 1.0,
                     "eps_sat": 1.0, "G0": 0.5, "c_h": 0.0},
        "mobility": {"m0": 1e-2, "m1": 0.0, "m_min": 1e-6},
        "output": {"energy_every": 1, "snapshot_every": 0, "formats": ["csv"]},
    }
    if name == "equilibrium":
        base["dissipation"] = {"sigma_y": 0.01, "a_y": 0.001}
    elif name == "viscous-decay":
        # zero yield stress makes the solid a Maxwell fluid: kinetic energy only drains
        base["dissipation"] = {"sigma_y": 0.0, "eta_p": 0.1, "a_y": "inf"}
        base["mobility"] = {"m0": 1e-6, "m1": 0.0, "m_min": 1e-6}
        base["initial"] = {"v": {"preset": "gaussian-pulse", "amplitude": [0.1, 0.05],
                                 "width": 0.08, "center": [0.45, 0.55]}}
    elif name == "damage-pulse":
        base["dissipation"] = {"sigma_y": 0.02, "eta_p": 1.0, "a_y": 5e-4, "eta_alpha": 1.0}
        base["loads"] = {"f": {"preset": "gaussian-pulse", "radial": True, "amplitude": 5.0,
                               "width": 0.07,
                               "envelope": {"preset": "gaussian-pulse", "t0": 0.1,
                                            "width": 0.035}}}
    elif name == "diffusion-relaxation":
        base["dissipation"] = {"sigma_y": "inf", "a_y": "inf"}
        base["initial"] = {"chi": {"preset": "gaussian-pulse", "amplitude": 0.1, "width": 0.07,
                                   "center": [0.4, 0.6]}}
    else:
        raise ValueError(f"unknown preset scenario {name!r}")
    return base


PRESET_SCENARIOS = ("equilibrium", "viscous-decay", "damage-pulse", "diffusion-relaxation")


# ------------------------------------------------------------ verification

def _verify_gradients(samples=1000, seed=0, **_):
    rng = np.random.default_rng(seed)
    rows = []
    worst = 0.0
    for d in (1, 2):
        p = mm.BiotDamageParams(K=1.3, M_b=0.8, beta=0.7, chi_eq=0.1, G1=1.1, eps_sat=2.0, G0=0.9,
                                c_h=0.3)
        err = gradient_fd_errors(p, d, samples, rng)
        worst = max(worst, float(err.max()))
        rows.append({"d": d, "samples": samples, "max_rel_error": float(err.max())})
    return {"check": "gradients", "results": rows, "max_rel_error": worst,
            "passed": worst <= 1e-6}


def gradient_fd_errors(p: mm.BiotDamageParams, d: int, samples: int, rng, step: float = 1e-5,
                       ell: int = 1):
    """Per-sample relative error of the analytic gradient against central differences.

    The error is the norm of the difference of the full gradient
    ``(S, d_alpha phi, mu)`` divided by the norm of the analytic gradient.
    """
    E, alpha, chi = mm.sample_states(rng, d, ell, samples, 0.1, p.chi_eq, 0.5)
    E, alpha = E.T, alpha.T
    w = tc.frobenius_weights(d)
    ns = tc.nsym(d)
    S = mm.stress(E, alpha, chi, p)
    ga = mm.dphi_dalpha(E, alpha, chi, p)
    mu = mm.chemical_potential(E, alpha, chi, p)
    fd_S = np.empty_like(S)
    for k in range(ns):
        e = np.zeros((ns, 1))
        e[k] = step
        fd_S[k] = (mm.free_energy(E + e, alpha, chi, p) - mm.free_energy(E - e, alpha, chi, p)) \
            / (2 * step) / w[k]
    fd_a = np.empty_like(ga)
    for k in range(ell):
        e = np.zeros((ell, 1))
        e[k] = step
        fd_a[k] = (mm.free_energy(E, alpha + e, chi, p) - mm.free_energy(E, alpha - e, chi, p)) \
            / (2 * step)
    fd_mu = (mm.free_energy(E, alpha, chi + step, p) - mm.free_energy(E, alpha, chi - step, p)) \
        / (2 * step)
    exact = np.concatenate([S * np.sqrt(w)[:, None], ga, mu[None]])
    approx = np.concatenate([fd_S * np.sqrt(w)[:, None], fd_a, fd_mu[None]])
    num = np.linalg.norm(exact - approx, axis=0)
    den = np.maximum(np.linalg.norm(exact, axis=0), 1e-12)
    return num / den


def prox_certificates(samples: int, rng):
    """Largest inclusion residual of closed-form prox solutions on random data."""
    d = 2
    ns = tc.nsym(d)
    D = rng.standard_normal((ns, samples)) * rng.uniform(0.0, 5.0, samples)
    Da = rng.standard_normal((2, samples)) * rng.uniform(0.0, 5.0, samples)
    sy = rng.uniform(0.0, 3.0, samples)
    ay = rng.uniform(0.0, 3.0, samples)
    eta = rng.uniform(0.1, 10.0, samples)
    eta_a = rng.uniform(0.1, 10.0, samples)
    rP = mm.shrink(D, tc.norm(D), sy, eta)
    vn = lambda x: np.sqrt(np.sum(x ** 2, axis=0))
    ra = mm.shrink(Da, vn(Da), ay, eta_a)
    r1 = mm.inclusion_residual(D, rP, sy, eta, tc.norm)
    r2 = mm.inclusion_residual(Da, ra, ay, eta_a, vn)
    locked = float(np.mean(tc.norm(rP) == 0.0))
    return max(float(r1.max()), float(r2.max())), locked


def _verify_prox(samples=100000, seed=0, **_):
    rng = np.random.default_rng(seed)
    worst, locked = prox_certificates(samples, rng)
    return {"check": "prox", "samples": samples, "max_inclusion_residual": worst,
            "locked_fraction": locked, "passed": worst <= 1e-12}


def lemma_levels(levels: int):
    return [32 * 2 ** k for k in range(levels)]


def _verify_lemma(levels=4, **_):
    rows = []
    ok = True
    for d in (1, 2):
        for kind in ("kinetic", "gradient"):
            r = en.lemma_identity_check(kind, lemma_levels(levels), d=d, scheme="central")
            rows.append({"d": d, "identity": kind, "levels": list(r.levels),
                         "errors": list(r.errors), "orders": list(r.orders)})
            ok &= r.min_order >= 1.9
    return {"check": "lemma", "results": rows, "passed": bool(ok)}


def _verify_energy(config=None, seed=0, steps=None, **_):
    if config is None:
        cfg = parse_config(json.dumps(preset_config("viscous-decay", n=32, steps=100)))
    else:
        cfg = load_config(config) if not isinstance(config, ScenarioConfig) else config
    res = run_scenario(cfg, write=False, steps=steps)
    s = res.summary
    return {"check": "energy", "scenario": cfg.name, "steps": s["steps"],
            "min_step_slack": s["min_step_slack"], "min_step_margin": s["min_step_margin"],
            "final_slack": s["final_slack"], "status": s["status"],
            "passed": res.status == EXIT_OK and s["energy_ok"]}


def violating_configs() -> dict:
    """One minimal config document per hypothesis, each violating only that one."""
    base = {"domain": {"d": 1, "n": 16}, "time": {"t_end": 0.01, "tau": 0.005}}
    out = {}
    c = copy.deepcopy(base)
    c["material"] = {"G1": 1.0, "eps_sat": 1.0, "G0": 0.05}
    out["ass:1"] = c
    c = copy.deepcopy(base)
    c["dissipation"] = {"eta_p": 0.0}
    out["ass:2"] = c
    c = copy.deepcopy(base)
    c["mobility"] = {"m0": 0.1, "m1": -0.2, "m_min": 0.01}
    out["ass:3"] = c
    c = copy.deepcopy(base)
    c["moduli"] = {"k_v": 0.0}
    out["ass:4"] = c
    return out


def trace_identity_error(samples: int, rng) -> float:
    """Largest pointwise ``|tr S_str + 2 phi|`` over random 2-D states."""
    g = fo.Grid((8, 8), (1.0, 1.0))
    m = mm.Moduli(k_p=0.37, k_a=0.61)
    mat = mm.Material(mm.BiotDamageParams(G0=1.0, c_h=0.2, chi_eq=0.1))
    worst = 0.0
    for _ in range(samples):
        st = ro.initial_state(
            g, m, mat, Ee=0.1 * rng.standard_normal((3,) + g.n),
            Ep=0.1 * rng.standard_normal((3,) + g.n), alpha=rng.uniform(0, 1, (1,) + g.n),
            chi=0.1 + 0.5 * rng.uniform(-1, 1, g.n))
        phi = mm.free_energy(st.Ee, st.alpha, st.chi, mat.biot)
        tr = tc.matrix_trace(st.S_str)
        worst = max(worst, float(np.max(np.abs(g.interior(tr + 2 * phi)))))
    return worst


def _verify_hypotheses(seed=0, samples=20, **_):
    rows = []
    ok = True
    for hyp, doc in violating_configs().items():
        try:
            parse_config(json.dumps(doc))
            got = set()
        except ConfigError as exc:
            got = exc.hypotheses
        rows.append({"expected": hyp, "reported": sorted(got)})
        ok &= got == {hyp}
    err = trace_identity_error(samples, np.random.default_rng(seed))
    ok &= err <= 1e-12
    return {"check": "hypotheses", "results": rows, "trace_identity_max_error": err,
            "passed": bool(ok)}


VERIFY_KINDS = {"gradients": _verify_gradients, "prox": _verify_prox, "lemma": _verify_lemma,
                "energy": _verify_energy, "hypotheses": _verify_hypotheses}


def verify_suite(kind: str, **options):
    """Run one self-contained verification; returns ``(report, exit_status)``."""
    if kind not in VERIFY_KINDS:
        raise ValueError(f"unknown verification {kind!r}; expected one of {list(VERIFY_KINDS)}")
    opts = {k: v for k, v in options.items() if v is not None}
    report = VERIFY_KINDS[kind](**opts)
    return report, (EXIT_OK if report["passed"] else EXIT_SOLVER)
