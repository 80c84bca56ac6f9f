"""JSON problem configuration.

Schema (one JSON document)::

    {
      "horizon": 1.0,
      "sde":      {"kind": "constant", "b": 0.0, "sigma": 1.0, "x0": 0.0}
                | {"kind": "expr", "m": 1, "q": 1, "x0": [0.0],
                   "drift": [EXPR], "diffusion": [[EXPR]], "lipschitz": 1.0},
      "driver":   {"kind": "zero", "d": 2}
                | {"kind": "affine", "intercept": [..d], "y": [..d], "x": [[d x m]]}
                | {"kind": "expr", "components": [EXPR x d],
                   "lipschitz": 0.0, "depends_on_z": false},
      "terminal": {"kind": "constant", "values": [..d]}
                | {"kind": "affine", "intercept": [..d], "x": [[d x m]]}
                | {"kind": "expr", "components": [EXPR x d], "lipschitz": 1.0},
      "costs":    {"kind": "constant", "matrix": [[d x d]]}
                | {"kind": "expr", "entries": [[EXPR d x d]], "lipschitz": 1.0},
      "grid":     {"n": 64, "kappa": 8}                       # single solve
                | {"study": "mesh", "n_values": [16, ...],
                   "coupling": "equal" | "two-thirds" | {"kappa_values": [...]},
                   "reference_n": 4096}
                | {"study": "reflection", "n": 256,
                   "kappa_values": [2, 4, 8, 16]},
      "engine":   {"kind": "lattice"}
                | {"kind": "regression", "paths": 100000, "degree": 2},
      "seed": 0,
      "exploratory": false,          # allow z-dependent rate studies
      "probe_states": [[...], ...],  # optional validation probes
      "assert_slope": 0.4,           # converge pass threshold (false disables)
      "bootstrap": 40                # engine-compare resamples
    }

Expressions are JSON prefix terms over {+, -, *, min, max}, numeric
constants, ["x", j] for state coordinate j (0-based), and, in drivers,
["y"] for the own value component and ["z", j] for the own z entry.
Each driver component may read only its own y/z, so configured drivers
are componentwise by construction.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import CostModel, Driver, Problem, SdeModel, Terminal, build_uniform_grid

__all__ = ["ConfigError", "RunConfig", "load_config", "compile_expression",
           "divisor_near_two_thirds"]


class ConfigError(ValueError):
    """Carries every schema violation found, not just the first."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {e}" for e in self.errors))


_OPS = {"+", "-", "*", "min", "max"}


def compile_expression(node, allow_y: bool = False, allow_z: bool = False):
    """Compile a prefix-form expression to env -> array of shape (N,).

    The environment carries "x" (N, m) and, for drivers, "y" (N,) and
    "z" (N, q) restricted to the component being evaluated.
    """
    if isinstance(node, (int, float)):
        c = float(node)
        return lambda env: np.full(len(env["x"]), c)
    if not isinstance(node, list) or not node:
        raise ConfigError([f"malformed expression: {node!r}"])
    head = node[0]
    if head == "x":
        if len(node) != 2 or not isinstance(node[1], int):
            raise ConfigError([f"state coordinate must be ['x', j]: {node!r}"])
        j = node[1]
        return lambda env: env["x"][:, j]
    if head == "y":
        if not allow_y:
            raise ConfigError(["['y'] is only allowed inside driver components"])
        return lambda env: env["y"]
    if head == "z":
        if not allow_z:
            raise ConfigError(["['z', j] is only allowed inside driver components"])
        j = node[1]
        return lambda env: env["z"][:, j]
    if head not in _OPS:
        raise ConfigError([f"unknown operator {head!r} (allowed: +, -, *, min, max, x, y, z)"])
    args = [compile_expression(a, allow_y, allow_z) for a in node[1:]]
    if not args:
        raise ConfigError([f"operator {head!r} needs at least one argument"])
    if head == "+":
        return lambda env: sum(a(env) for a in args)
    if head == "-":
        if len(args) == 1:
            return lambda env: -args[0](env)
        return lambda env: args[0](env) - sum(a(env) for a in args[1:])
    if head == "*":
        def _mul(env):
            out = args[0](env)
            for a in args[1:]:
                out = out * a(env)
            return out
        return _mul
    fn = np.minimum if head == "min" else np.maximum
    def _fold(env):
        out = args[0](env)
        for a in args[1:]:
            out = fn(out, a(env))
        return out
    return _fold


def _matrix(value, rows, cols, label, errors):
    a = np.asarray(value, dtype=float)
    if a.shape != (rows, cols):
        errors.append(f"{label}: expected shape {(rows, cols)}, got {a.shape}")
        return np.zeros((rows, cols))
    return a


def _build_sde(spec, errors) -> SdeModel:
    kind = spec.get("kind")
    if kind == "constant":
        try:
            return SdeModel.constant(spec["b"], spec["sigma"], spec["x0"])
        except KeyError as exc:
            errors.append(f"sde: missing key {exc}")
            return SdeModel.constant(0.0, 1.0, 0.0)
    if kind == "expr":
        m, q = int(spec.get("m", 1)), int(spec.get("q", 1))
        drift_fns = [compile_expression(e) for e in spec.get("drift", [])]
        diff_rows = [[compile_expression(e) for e in row]
                     for row in spec.get("diffusion", [])]
        if len(drift_fns) != m:
            errors.append(f"sde: drift needs {m} expressions")
        if len(diff_rows) != m or any(len(r) != q for r in diff_rows):
            errors.append(f"sde: diffusion needs {m} x {q} expressions")
        x0 = np.asarray(spec.get("x0", [0.0] * m), dtype=float)

        def drift(x):
            return np.stack([f({"x": x}) for f in drift_fns], axis=1)

        def diffusion(x):
            return np.stack([np.stack([f({"x": x}) for f in row], axis=1)
                             for row in diff_rows], axis=1)

        return SdeModel(m=m, q=q, drift=drift, diffusion=diffusion, x0=x0,
                        lipschitz=float(spec.get("lipschitz", 0.0)))
    errors.append(f"sde: unknown kind {kind!r}")
    return SdeModel.constant(0.0, 1.0, 0.0)


def _build_driver(spec, d_hint, m, errors) -> Driver:
    kind = spec.get("kind")
    if kind == "zero":
        return Driver.zero(int(spec.get("d", d_hint or 1)))
    if kind == "affine":
        intercept = np.asarray(spec.get("intercept", []), dtype=float)
        d = intercept.size or (d_hint or 0)
        if d == 0:
            errors.append("driver: affine needs an intercept to fix the dimension")
            return Driver.zero(1)
        if intercept.size == 0:
            intercept = np.zeros(d)
        ycoef = np.asarray(spec.get("y", np.zeros(d)), dtype=float)
        xcoef = _matrix(spec.get("x", np.zeros((d, m))), d, m, "driver.x", errors)
        if ycoef.shape != (d,):
            errors.append(f"driver.y: expected {d} coefficients")
            ycoef = np.zeros(d)
        lip = float(np.max(np.abs(ycoef))) if ycoef.size else 0.0

        def f(x, y, z):
            return intercept + y * ycoef + x @ xcoef.T

        return Driver(d=d, evaluator=f, lipschitz=lip, depends_on_z=False,
                      componentwise=True)
    if kind == "expr":
        comps = spec.get("components", [])
        if not comps:
            errors.append("driver: expr needs at least one component")
            return Driver.zero(1)
        depends_on_z = bool(spec.get("depends_on_z", False))
        fns = [compile_expression(e, allow_y=True, allow_z=depends_on_z)
               for e in comps]
        d = len(fns)

        def f(x, y, z):
            cols = [fn({"x": x, "y": y[:, i], "z": z[:, i, :]})
                    for i, fn in enumerate(fns)]
            return np.stack(cols, axis=1)

        return Driver(d=d, evaluator=f, lipschitz=float(spec.get("lipschitz", 0.0)),
                      depends_on_z=depends_on_z, componentwise=True,
                      bounded_in_z=bool(spec.get("bounded_in_z", True)))
    errors.append(f"driver: unknown kind {kind!r}")
    return Driver.zero(d_hint or 1)


def _build_terminal(spec, m, errors) -> Terminal:
    kind = spec.get("kind")
    if kind == "constant":
        return Terminal.constant(np.asarray(spec.get("values", [0.0]), dtype=float))
    if kind == "affine":
        intercept = np.asarray(spec.get("intercept", []), dtype=float)
        d = intercept.size
        if d == 0:
            errors.append("terminal: affine needs an intercept")
            return Terminal.constant([0.0])
        xcoef = _matrix(spec.get("x", np.zeros((d, m))), d, m, "terminal.x", errors)
        lip = float(np.linalg.norm(xcoef, 2)) if xcoef.size else 0.0
        return Terminal(d=d, evaluator=lambda x: intercept + x @ xcoef.T, lipschitz=lip)
    if kind == "expr":
        fns = [compile_expression(e) for e in spec.get("components", [])]
        if not fns:
            errors.append("terminal: expr needs at least one component")
            return Terminal.constant([0.0])

        def g(x):
            return np.stack([fn({"x": x}) for fn in fns], axis=1)

        return Terminal(d=len(fns), evaluator=g,
                        lipschitz=float(spec.get("lipschitz", 0.0)))
    errors.append(f"terminal: unknown kind {kind!r}")
    return Terminal.constant([0.0])


def _build_costs(spec, errors) -> CostModel:
    kind = spec.get("kind")
    if kind == "constant":
        try:
            return CostModel.constant(spec["matrix"])
        except (KeyError, ValueError) as exc:
            errors.append(f"costs: {exc}")
            return CostModel.constant([[0.0]])
    if kind == "expr":
        entries = spec.get("entries", [])
        d = len(entries)
        if d == 0 or any(len(r) != d for r in entries):
            errors.append("costs: entries must be a square grid of expressions")
            return CostModel.constant([[0.0]])
        fns = [[compile_expression(e) for e in row] for row in entries]

        def c(x):
            rows = [np.stack([f({"x": x}) for f in row], axis=1) for row in fns]
            return np.stack(rows, axis=1)

        return CostModel.from_function(d, c, float(spec.get("lipschitz", 0.0)))
    errors.append(f"costs: unknown kind {kind!r}")
    return CostModel.constant([[0.0]])


def divisor_near_two_thirds(n: int) -> int:
    """Divisor of n closest to n**(2/3); ties resolve to the smaller one."""
    target = n ** (2.0 / 3.0)
    divisors = [k for k in range(1, n + 1) if n % k == 0]
    return min(divisors, key=lambda k: (abs(k - target), k))


@dataclass
class RunConfig:
    """Parsed configuration; problems are built per grid on demand."""

    horizon: float
    sde: SdeModel
    driver: Driver
    terminal: Terminal
    costs: CostModel
    engine_spec: dict
    grid_spec: dict
    seed: int
    exploratory: bool = False
    probe_states: np.ndarray | None = None
    assert_slope: object = 0.4
    bootstrap: int = 40
    max_decision_points: int = 12
    raw: dict = field(default_factory=dict)

    def make_problem(self, n: int, kappa: int) -> Problem:
        grid = build_uniform_grid(self.horizon, n, kappa)
        return Problem(sde=self.sde, driver=self.driver, terminal=self.terminal,
                       costs=self.costs, grid=grid)

    def sweep(self):
        """(n, kappa) pairs for a convergence study plus the reference pair."""
        spec = self.grid_spec
        study = spec.get("study")
        if study == "mesh":
            ns = [int(v) for v in spec.get("n_values", [])]
            coupling = spec.get("coupling", "equal")
            if isinstance(coupling, dict):
                ks = [int(v) for v in coupling.get("kappa_values", [])]
            elif coupling == "equal":
                ks = ns
            elif coupling == "two-thirds":
                ks = [divisor_near_two_thirds(n) for n in ns]
            else:
                raise ConfigError([f"grid.coupling: unknown rule {coupling!r}"])
            if len(ks) != len(ns):
                raise ConfigError(["grid.coupling: kappa_values must match n_values"])
            ref_n = int(spec.get("reference_n", 4 * max(ns)))
            if coupling == "equal":
                ref = (ref_n, ref_n)
            elif coupling == "two-thirds":
                ref = (ref_n, divisor_near_two_thirds(ref_n))
            else:
                ref = (ref_n, int(spec.get("reference_kappa", ks[-1])))
            return list(zip(ns, ks)), ref
        if study == "reflection":
            n = int(spec["n"])
            ks = [int(v) for v in spec.get("kappa_values", [])]
            return [(n, k) for k in ks], (n, n)
        raise ConfigError([f"grid.study: expected 'mesh' or 'reflection', got {study!r}"])


def load_config(doc: dict) -> RunConfig:
    """Validate and build a run configuration; rejects itemize every problem."""
    if not isinstance(doc, dict):
        raise ConfigError(["top-level document must be a JSON object"])
    errors = []
    for key in ("sde", "driver", "terminal", "costs"):
        if key not in doc:
            errors.append(f"missing section {key!r}")
    horizon = float(doc.get("horizon", 1.0))
    if horizon <= 0:
        errors.append("horizon must be positive")
    sde = _build_sde(doc.get("sde", {"kind": "constant", "b": 0, "sigma": 1, "x0": 0}), errors)
    terminal = _build_terminal(doc.get("terminal", {"kind": "constant", "values": [0.0]}),
                               sde.m, errors)
    driver = _build_driver(doc.get("driver", {"kind": "zero"}), terminal.d, sde.m, errors)
    costs = _build_costs(doc.get("costs", {"kind": "constant",
                                           "matrix": [[0.0]]}), errors)
    if not errors and not (driver.d == terminal.d == costs.d):
        errors.append(
            f"regime count mismatch: driver d={driver.d}, terminal d={terminal.d}, "
            f"costs d={costs.d}")

    grid_spec = doc.get("grid", {})
    if not grid_spec:
        errors.append("missing section 'grid'")
    if "study" not in grid_spec:
        n = grid_spec.get("n")
        kappa = grid_spec.get("kappa")
        if not isinstance(n, int) or n < 1:
            errors.append("grid.n must be a positive integer")
        if not isinstance(kappa, int) or kappa < 1:
            errors.append("grid.kappa must be a positive integer")
        elif isinstance(n, int) and n >= 1 and n % kappa != 0:
            errors.append(f"grid.kappa must divide grid.n ({kappa} does not divide {n})")
    else:
        if grid_spec["study"] not in ("mesh", "reflection"):
            errors.append(f"grid.study: expected 'mesh' or 'reflection', "
                          f"got {grid_spec['study']!r}")
        if grid_spec["study"] == "mesh":
            ns = grid_spec.get("n_values", [])
            if len(ns) < 1:
                errors.append("grid.n_values must be nonempty for a mesh study")
            coupling = grid_spec.get("coupling", "equal")
            if coupling == "equal":
                pass
            elif coupling == "two-thirds":
                pass
            elif isinstance(coupling, dict):
                ks = coupling.get("kappa_values", [])
                if len(ks) != len(ns):
                    errors.append("grid.coupling.kappa_values must match n_values")
                else:
                    for n, k in zip(ns, ks):
                        if n % k != 0:
                            errors.append(f"coupling: kappa {k} does not divide n {n}")
            else:
                errors.append(f"grid.coupling: unknown rule {coupling!r}")
        if grid_spec["study"] == "reflection":
            n = grid_spec.get("n")
            if not isinstance(n, int) or n < 1:
                errors.append("grid.n must be a positive integer for a reflection study")
            for k in grid_spec.get("kappa_values", []):
                if isinstance(n, int) and n >= 1 and n % int(k) != 0:
                    errors.append(f"grid.kappa_values: {k} does not divide n {n}")

    engine_spec = doc.get("engine", {"kind": "lattice"})
    if engine_spec.get("kind") not in ("lattice", "regression"):
        errors.append(f"engine.kind: expected 'lattice' or 'regression', "
                      f"got {engine_spec.get('kind')!r}")
    if engine_spec.get("kind") == "regression":
        if int(engine_spec.get("paths", 0)) < 1:
            errors.append("engine.paths must be a positive integer")
    if engine_spec.get("kind") == "lattice" and not sde.is_constant:
        errors.append("engine.kind 'lattice' requires constant SDE coefficients")

    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        errors.append("seed must be a nonnegative integer")

    probes = doc.get("probe_states")
    probe_arr = None
    if probes is not None:
        probe_arr = np.asarray(probes, dtype=float)
        if probe_arr.ndim == 1:
            probe_arr = probe_arr[:, None]
        if probe_arr.ndim != 2 or probe_arr.shape[1] != sde.m:
            errors.append(f"probe_states must be a list of states of dimension {sde.m}")

    if errors:
        raise ConfigError(errors)
    return RunConfig(horizon=horizon, sde=sde, driver=driver, terminal=terminal,
                     costs=costs, engine_spec=engine_spec, grid_spec=grid_spec,
                     seed=int(seed), exploratory=bool(doc.get("exploratory", False)),
                     probe_states=probe_arr,
                     assert_slope=doc.get("assert_slope", 0.4),
                     bootstrap=int(doc.get("bootstrap", 40)),
                     max_decision_points=int(doc.get("max_decision_points", 12)),
                     raw=doc)
