"""Ground-truth moving inclusions, shared sources, and scenario configs.

A scenario bundles the true inhomogeneity (disk-shaped inclusions moving
along closed-form trajectories), the operator types of its components, the
projection bounds used by the reconstruction, and the source triple
(interior source, boundary flux, initial value) common to all benchmark
cases.  Scenarios are immutable; evaluation is pure.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .fem import CONDUCTIVITY, POTENTIAL, POWER_POTENTIAL, InhomogeneityOp
from .mesh import Mesh

BUILTIN_NAMES = ("ex1", "ex2", "ex3", "ex4", "ex5")


class ScenarioError(ValueError):
    """Invalid scenario definition or evaluation request."""


@dataclass(frozen=True)
class Inclusion:
    """A disk of time-dependent radius, center and contrast.

    ``component`` selects which row of the vector-valued inhomogeneity the
    inclusion feeds.
    """

    center: Callable[[float], tuple[float, float]]
    radius: Callable[[float], float]
    contrast: Callable[[float], float]
    component: int = 0


@dataclass(frozen=True)
class SourceSet:
    """Closed-form source triple; ``g`` contracts a gradient with the
    outward unit normal at the evaluation points."""

    name: str
    f: Callable[[np.ndarray, float], np.ndarray]
    g: Callable[[np.ndarray, np.ndarray, float], np.ndarray]
    h: Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class Scenario:
    name: str
    inclusions: tuple[Inclusion, ...]
    ops: tuple[InhomogeneityOp, ...]
    bounds: np.ndarray          # (L, 2) box per component
    horizon: float
    sources: SourceSet

    @property
    def num_components(self) -> int:
        return len(self.ops)


def _standard_f(points: np.ndarray, t: float) -> np.ndarray:
    x, y = points[:, 0], points[:, 1]
    return 25.0 * math.sin(t * math.pi / 4.0) * np.sin(3 * x) * np.cos(4 * y)


def _standard_g(points: np.ndarray, normals: np.ndarray, t: float) -> np.ndarray:
    x, y = points[:, 0], points[:, 1]
    gx = 3.0 * np.cos(3 * x) * np.cos(4 * y)
    gy = -4.0 * np.sin(3 * x) * np.sin(4 * y)
    return math.cos(t * math.pi / 6.0) * (gx * normals[:, 0] + gy * normals[:, 1])


def _standard_h(points: np.ndarray) -> np.ndarray:
    return 3.0 + np.sin(3 * points[:, 0]) * np.cos(4 * points[:, 1])


def standard_sources() -> SourceSet:
    """The shared source triple of the benchmark scenarios."""
    return SourceSet("standard", _standard_f, _standard_g, _standard_h)


_SOURCE_SETS = {"standard": standard_sources}


def _check_clearance(scn: Scenario, samples: int = 1001) -> None:
    for j, inc in enumerate(scn.inclusions):
        for t in np.linspace(0.0, scn.horizon, samples):
            cx, cy = inc.center(t)
            if math.hypot(cx, cy) + inc.radius(t) >= 1.0:
                raise ScenarioError(
                    f"inclusion {j} touches the boundary at t={t:.4f}")
        if inc.component >= scn.num_components or inc.component < 0:
            raise ScenarioError(f"inclusion {j} has no matching component")
    for lo, hi in scn.bounds:
        if not lo < hi:
            raise ScenarioError("projection bounds need lo < hi")
    for op, (lo, hi) in zip(scn.ops, scn.bounds):
        if op.kind == CONDUCTIVITY and lo <= -1.0:
            raise ScenarioError("conductivity lower bound must exceed -1")


def _make(name, inclusions, ops, bounds, horizon=10.0) -> Scenario:
    scn = Scenario(name=name, inclusions=tuple(inclusions), ops=tuple(ops),
                   bounds=np.asarray(bounds, dtype=float), horizon=horizon,
                   sources=standard_sources())
    _check_clearance(scn)
    return scn


def _const(v: float) -> Callable[[float], float]:
    return lambda t: v


def _ex1() -> Scenario:
    def gamma1(t):
        s = math.pi * t / 6.0
        sign = 1.0 if t < 3.0 else -1.0
        return (sign * 0.6 * math.cos(s), -0.7 * math.sin(s))

    def gamma2(t):
        if t < 6.0:
            s = math.pi * t / 6.0
        else:
            s = math.pi * (12.0 - t) / 6.0
        return (-0.6 * math.cos(s), -0.7 * math.sin(s))

    incs = [Inclusion(gamma1, _const(0.2), _const(-0.9)),
            Inclusion(gamma2, _const(0.2), _const(-0.9))]
    return _make("ex1", incs, [InhomogeneityOp(CONDUCTIVITY, 0)],
                 [(-0.99, 0.0)])


def _ex2() -> Scenario:
    def gc1(t):
        s = math.pi * t / 8.0 - 7.0 * math.pi / 6.0
        return (0.65 * math.cos(s), 0.65 * math.sin(s))

    def gc2(t):
        s = math.pi * t / 8.0 - math.pi / 3.0
        return (0.6 * math.cos(s), 0.7 * math.sin(s))

    def gp(t):
        s = math.pi * t / 8.0 - math.pi / 3.0
        return (0.7 * math.cos(s), 0.5 * math.sin(s))

    incs = [Inclusion(gc1, _const(0.2), _const(-0.9), component=0),
            Inclusion(gc2, _const(0.2), _const(-0.9), component=0),
            Inclusion(gp, _const(0.2), _const(15.0), component=1)]
    return _make("ex2", incs,
                 [InhomogeneityOp(CONDUCTIVITY, 0), InhomogeneityOp(POTENTIAL, 1)],
                 [(-0.99, 0.0), (0.0, 30.0)])


def _ex3() -> Scenario:
    def gamma(t):
        s = math.pi * t / 6.0 + math.pi / 4.0
        return (0.5 * math.cos(s), 0.7 * math.sin(s))

    incs = [Inclusion(gamma, _const(0.2), _const(20.0))]
    return _make("ex3", incs, [InhomogeneityOp(POWER_POTENTIAL, 0, power=3.0)],
                 [(0.0, 40.0)])


def _ex4() -> Scenario:
    def g1(t):
        s = math.pi * t / 8.0
        return (0.7 * math.cos(s), 0.6 * math.sin(s))

    def g2(t):
        s = math.pi * t / 8.0 + 4.0 * math.pi / 5.0
        return (0.5 * math.cos(s), 0.6 * math.cos(s))

    incs = [Inclusion(g1, _const(0.2), lambda t: max(15.0 - 2.5 * t, 0.0)),
            Inclusion(g2, _const(0.2), lambda t: min(2.5 * t, 15.0))]
    return _make("ex4", incs, [InhomogeneityOp(POTENTIAL, 0)], [(0.0, 30.0)])


def _ex5() -> Scenario:
    def g1(t):
        s = math.pi * t / 6.0 + math.pi / 3.0
        return (0.7 * math.cos(s), 0.6 * math.sin(s))

    def g2(t):
        s = math.pi * t / 6.0 - 2.0 * math.pi / 3.0
        return (0.6 * math.cos(s), 0.5 * math.sin(s))

    incs = [Inclusion(g1, _const(0.2), _const(-0.9)),
            Inclusion(g2, lambda t: max(0.3 - 0.03 * t, 0.0), _const(-0.9))]
    return _make("ex5", incs, [InhomogeneityOp(CONDUCTIVITY, 0)],
                 [(-0.99, 0.0)])


_BUILTINS = {"ex1": _ex1, "ex2": _ex2, "ex3": _ex3, "ex4": _ex4, "ex5": _ex5}


def builtin(name: str) -> Scenario:
    """One of the five benchmark scenarios, with exact parameters."""
    try:
        return _BUILTINS[name]()
    except KeyError:
        raise ScenarioError(f"unknown scenario {name!r}; choose from "
                            f"{', '.join(BUILTIN_NAMES)}") from None


def null_scenario() -> Scenario:
    """No inclusions at all; used for background/noise-floor baselines."""
    return _make("null", [], [InhomogeneityOp(CONDUCTIVITY, 0)],
                 [(-0.99, 0.0)])


def eval_truth(scn: Scenario, t: float, mesh: Mesh) -> np.ndarray:
    """Exact inhomogeneity at time ``t`` as a vector cell field (L, T).

    Cell membership is a centroid-in-disk test.  Overlapping inclusions of
    one component are only accepted when their contrasts agree (the union is
    then well defined); otherwise the disjointness assumption is violated and
    the evaluation is rejected.
    """
    if not 0.0 <= t <= scn.horizon:
        raise ScenarioError(f"t={t} outside the horizon [0, {scn.horizon}]")
    out = np.zeros((scn.num_components, mesh.num_cells))
    claimed = np.zeros((scn.num_components, mesh.num_cells), dtype=bool)
    for inc in scn.inclusions:
        r = inc.radius(t)
        if r <= 0.0:
            continue
        center = np.asarray(inc.center(t))
        mask = np.linalg.norm(mesh.centroids - center, axis=1) <= r
        value = inc.contrast(t)
        clash = claimed[inc.component] & mask
        if np.any(clash) and np.any(
                np.abs(out[inc.component][clash] - value) > 1e-12):
            raise ScenarioError(
                f"overlapping component-{inc.component} inclusions with "
                f"different contrasts at t={t}")
        out[inc.component][mask] = value
        claimed[inc.component] |= mask
    return out


def samplers(scn: Scenario, mesh: Mesh):
    """Mesh-bound source samplers: ``f(t)`` over cells, ``g(t)`` over the
    boundary vertices, and the nodal initial field ``h``."""
    centroids = mesh.centroids
    bpts = mesh.vertices[mesh.boundary_vertices]
    normals = bpts / np.linalg.norm(bpts, axis=1, keepdims=True)
    src = scn.sources

    def f_fn(t: float) -> np.ndarray:
        return src.f(centroids, t)

    def g_fn(t: float) -> np.ndarray:
        return src.g(bpts, normals, t)

    return f_fn, g_fn, src.h(mesh.vertices)


# ---------------------------------------------------------------------------
# Scenario config files: a small expression grammar over literals, t, pi,
# + - * /, sin, cos, min, max.

_FUNCS = {"sin": (math.sin, 1), "cos": (math.cos, 1),
          "min": (min, 2), "max": (max, 2)}


def _tokenize(text: str) -> list[tuple[str, object]]:
    text = (text.replace("·", "*").replace("−", "-")
            .replace("π", "pi"))
    tokens = []
    i = 0
    while i < len(text):
        c = text[i]
        if c.isspace():
            i += 1
        elif c in "+-*/(),":
            tokens.append((c, c))
            i += 1
        elif c.isdigit() or c == ".":
            j = i
            while j < len(text) and (text[j].isdigit() or text[j] in ".eE"
                                     or (text[j] in "+-" and text[j - 1] in "eE")):
                j += 1
            tokens.append(("num", float(text[i:j])))
            i = j
        elif c.isalpha():
            j = i
            while j < len(text) and text[j].isalnum():
                j += 1
            tokens.append(("name", text[i:j]))
            i = j
        else:
            raise ScenarioError(f"unexpected character {c!r} in expression")
    tokens.append(("end", None))
    return tokens


class _Parser:
    """Recursive-descent parser producing a ``t -> float`` closure."""

    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.pos = 0

    def peek(self):
        return self.tokens[self.pos][0]

    def next(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, kind: str):
        tok = self.next()
        if tok[0] != kind:
            raise ScenarioError(f"expected {kind!r}, found {tok[1]!r}")
        return tok

    def parse(self) -> Callable[[float], float]:
        fn = self.expr()
        self.expect("end")
        return fn

    def expr(self):
        fn = self.term()
        while self.peek() in "+-":
            op = self.next()[0]
            rhs = self.term()
            fn = (lambda a, b: lambda t: a(t) + b(t))(fn, rhs) if op == "+" \
                else (lambda a, b: lambda t: a(t) - b(t))(fn, rhs)
        return fn

    def term(self):
        fn = self.factor()
        while self.peek() in "*/":
            op = self.next()[0]
            rhs = self.factor()
            fn = (lambda a, b: lambda t: a(t) * b(t))(fn, rhs) if op == "*" \
                else (lambda a, b: lambda t: a(t) / b(t))(fn, rhs)
        return fn

    def factor(self):
        if self.peek() == "-":
            self.next()
            inner = self.factor()
            return lambda t: -inner(t)
        return self.atom()

    def atom(self):
        kind, value = self.next()
        if kind == "num":
            return lambda t, v=value: v
        if kind == "(":
            fn = self.expr()
            self.expect(")")
            return fn
        if kind == "name":
            if value == "t":
                return lambda t: t
            if value == "pi":
                return lambda t: math.pi
            if value in _FUNCS:
                func, arity = _FUNCS[value]
                self.expect("(")
                args = [self.expr()]
                while self.peek() == ",":
                    self.next()
                    args.append(self.expr())
                self.expect(")")
                if len(args) != arity:
                    raise ScenarioError(f"{value} takes {arity} argument(s)")
                return (lambda fc, aa: lambda t: fc(*(a(t) for a in aa)))(func, args)
            raise ScenarioError(f"unknown name {value!r} in expression")
        raise ScenarioError(f"unexpected token {value!r} in expression")


def parse_expression(text: str) -> Callable[[float], float]:
    """Parse a scalar time expression (literals, t, pi, + - * /, sin, cos,
    min, max)."""
    return _Parser(text).parse()


def parse_point_expression(text: str) -> Callable[[float], tuple[float, float]]:
    """Parse a 2-vector expression ``(expr, expr)``."""
    text = text.strip()
    if not (text.startswith("(") and text.endswith(")")):
        raise ScenarioError("trajectory must look like (expr, expr)")
    depth = 0
    split = -1
    for i, c in enumerate(text):
        if c == "(":
            depth += 1
        elif c == ")":
            depth -= 1
        elif c == "," and depth == 1:
            split = i
            break
    if split < 0:
        raise ScenarioError("trajectory must contain two comma-separated parts")
    fx = parse_expression(text[1:split])
    fy = parse_expression(text[split + 1:-1])
    return lambda t: (fx(t), fy(t))


def _parse_ops(text: str) -> list[InhomogeneityOp]:
    ops = []
    for idx, item in enumerate(s.strip() for s in text.split(",")):
        if ":" in item:
            kind, arg = item.split(":", 1)
            ops.append(InhomogeneityOp(kind.strip(), idx, power=float(arg)))
        else:
            ops.append(InhomogeneityOp(item, idx))
    return ops


def load_scenario_config(path) -> Scenario:
    """Read a scenario definition file.

    Sections: ``[scenario]`` (``name`` of a builtin, or ``custom`` plus
    ``horizon`` and ``ops``), one ``[inclusion.N]`` per inclusion
    (``component``, ``radius``, ``trajectory``, ``contrast`` expressions),
    ``[bounds]`` with one ``lo, hi`` line per component, and ``[sources]``
    referencing a builtin source set.
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    read = cp.read(path)
    if not read:
        raise ScenarioError(f"cannot read scenario config {path}")
    if not cp.has_section("scenario"):
        raise ScenarioError("missing [scenario] section")
    name = cp.get("scenario", "name", fallback="custom").strip()
    if name in _BUILTINS:
        return builtin(name)
    if name == "null":
        return null_scenario()
    horizon = cp.getfloat("scenario", "horizon", fallback=10.0)
    ops = _parse_ops(cp.get("scenario", "ops", fallback="conductivity"))
    src_name = cp.get("sources", "set", fallback="standard").strip() \
        if cp.has_section("sources") else "standard"
    if src_name not in _SOURCE_SETS:
        raise ScenarioError(f"unknown source set {src_name!r}")
    inclusions = []
    for section in sorted(s for s in cp.sections() if s.startswith("inclusion.")):
        sec = cp[section]
        center = parse_point_expression(sec.get("trajectory"))
        radius = parse_expression(sec.get("radius", "0.2"))
        contrast = parse_expression(sec.get("contrast"))
        inclusions.append(Inclusion(center, radius, contrast,
                                    component=int(sec.get("component", "0"))))
    bounds = []
    for idx in range(len(ops)):
        raw = cp.get("bounds", str(idx), fallback=None)
        if raw is None:
            raise ScenarioError(f"missing bounds for component {idx}")
        lo, hi = (float(p) for p in raw.split(","))
        bounds.append((lo, hi))
    scn = Scenario(name=name, inclusions=tuple(inclusions), ops=tuple(ops),
                   bounds=np.asarray(bounds, dtype=float), horizon=horizon,
                   sources=_SOURCE_SETS[src_name]())
    _check_clearance(scn)
    return scn
