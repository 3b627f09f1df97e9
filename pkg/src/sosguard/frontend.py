"""Problem input: polynomial expression parsing, problem files, and
closed-loop assembly from plant/controller pieces.

The native input is the closed-loop form (f, g, s, T, A); composing a
plant with its primary controller is a convenience path on top of it.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .poly import (
    ATTACK,
    MEASUREMENT,
    STATE,
    Polynomial,
    Variable,
    make_vars,
)


# ---------------------------------------------------------------------------
# Expression parsing
# ---------------------------------------------------------------------------

class PolyParseError(ValueError):
    """Syntax error in a polynomial expression, with a byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class UnknownIdentifierError(PolyParseError):
    """An identifier not present in the declared variable universe."""

    def __init__(self, name: str, offset: int):
        super().__init__(f"unknown identifier {name!r}", offset)
        self.name = name


_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*^()]))"
)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            stripped = text[pos:].lstrip()
            if not stripped:
                break
            off = len(text) - len(stripped)
            raise PolyParseError(f"unexpected character {stripped[0]!r}", off)
        if m.group("num") is not None:
            tokens.append(("num", m.group("num"), m.start("num")))
        elif m.group("ident") is not None:
            tokens.append(("ident", m.group("ident"), m.start("ident")))
        else:
            tokens.append(("op", m.group("op"), m.start("op")))
        pos = m.end()
    return tokens


class _Parser:
    """Recursive descent over:  expr := term (('+'|'-') term)*,
    term := unary ('*' unary)*,  unary := ('+'|'-') unary | power,
    power := atom ('^' INT)?,  atom := NUM | IDENT | '(' expr ')'.

    Implicit multiplication is rejected: two adjacent atoms without an
    operator are a syntax error.
    """

    def __init__(self, text: str, universe: Sequence[Variable]):
        self.text = text
        self.tokens = _tokenize(text)
        self.pos = 0
        self.universe = tuple(universe)
        self.byname = {v.name: v for v in self.universe}

    def peek(self):
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def next(self):
        tok = self.peek()
        if tok is not None:
            self.pos += 1
        return tok

    def offset(self) -> int:
        tok = self.peek()
        return tok[2] if tok is not None else len(self.text)

    def parse(self) -> Polynomial:
        p = self.expr()
        tok = self.peek()
        if tok is not None:
            raise PolyParseError(f"unexpected token {tok[1]!r}", tok[2])
        return p.on_universe(self.universe)

    def expr(self) -> Polynomial:
        p = self.term()
        while True:
            tok = self.peek()
            if tok and tok[0] == "op" and tok[1] in "+-":
                self.next()
                q = self.term()
                p = p + q if tok[1] == "+" else p - q
            else:
                return p

    def term(self) -> Polynomial:
        p = self.unary()
        while True:
            tok = self.peek()
            if tok and tok[0] == "op" and tok[1] == "*":
                self.next()
                p = p * self.unary()
            elif tok and tok[0] in ("num", "ident") or (tok and tok[1] == "("):
                raise PolyParseError(
                    "implicit multiplication is not allowed; insert '*'", tok[2]
                )
            else:
                return p

    def unary(self) -> Polynomial:
        tok = self.peek()
        if tok and tok[0] == "op" and tok[1] in "+-":
            self.next()
            p = self.unary()
            return p if tok[1] == "+" else -p
        return self.power()

    def power(self) -> Polynomial:
        base = self.atom()
        tok = self.peek()
        if tok and tok[0] == "op" and tok[1] == "^":
            self.next()
            etok = self.next()
            if etok is None or etok[0] != "num":
                raise PolyParseError("expected integer exponent after '^'",
                                     etok[2] if etok else len(self.text))
            if not etok[1].isdigit():
                raise PolyParseError("exponent must be a nonnegative integer", etok[2])
            return base ** int(etok[1])
        return base

    def atom(self) -> Polynomial:
        tok = self.next()
        if tok is None:
            raise PolyParseError("unexpected end of expression", len(self.text))
        kind, text, off = tok
        if kind == "num":
            return Polynomial.constant(float(text), self.universe)
        if kind == "ident":
            var = self.byname.get(text)
            if var is None:
                raise UnknownIdentifierError(text, off)
            return Polynomial.variable(var).on_universe(self.universe)
        if kind == "op" and text == "(":
            p = self.expr()
            closing = self.next()
            if closing is None or closing[1] != ")":
                raise PolyParseError("expected ')'", closing[2] if closing else len(self.text))
            return p
        raise PolyParseError(f"unexpected token {text!r}", off)


def parse_poly(expr: str, universe: Sequence[Variable]) -> Polynomial:
    """Parse an expression over the given universe into a Polynomial."""
    return _Parser(expr, universe).parse()


# ---------------------------------------------------------------------------
# Problem documents
# ---------------------------------------------------------------------------

class ProblemFormatError(ValueError):
    """Schema violation in a problem document (missing field, bad shape)."""


class DimensionError(ProblemFormatError):
    """Mismatched dimensions between problem components."""


@dataclass(frozen=True)
class SafetyProblem:
    """Closed-loop safety data: dynamics, sets, attack constraint, sensors.

    The safe set is {x | s(x) >= 0}, the initial set {x | T(x) >= 0} and
    the admissible attacks {a | A(x,a) >= 0}.  ``xs_map`` gives the
    attack-free measured signals available to a secondary controller.
    """

    state_vars: tuple[Variable, ...]
    attack_vars: tuple[Variable, ...]
    f: tuple[Polynomial, ...]
    g: tuple[tuple[Polynomial, ...], ...]
    s: Polynomial
    T: Polynomial
    A: Polynomial
    xs_map: tuple[Polynomial, ...] = ()

    def __post_init__(self):
        self.validate()

    @property
    def all_vars(self) -> tuple[Variable, ...]:
        return self.state_vars + self.attack_vars

    @property
    def n_inputs(self) -> int:
        return len(self.g[0]) if self.g else 0

    def validate(self) -> None:
        n = len(self.state_vars)
        if len(self.f) != n:
            raise DimensionError(f"f has {len(self.f)} rows for {n} state variables")
        if self.g and len(self.g) != n:
            raise DimensionError(f"g has {len(self.g)} rows for {n} state variables")
        widths = {len(row) for row in self.g}
        if len(widths) > 1:
            raise DimensionError("rows of g have inconsistent widths")
        state_ok = set(self.state_vars)
        both_ok = state_ok | set(self.attack_vars)
        for i, p in enumerate(self.f):
            bad = [v for v in p.variables_used() if v not in both_ok]
            if bad:
                raise ProblemFormatError(f"f[{i}] uses non-state/attack variable {bad[0].name!r}")
        for name, p in (("safe_set", self.s), ("initial_set", self.T)):
            bad = [v for v in p.variables_used() if v not in state_ok]
            if bad:
                raise ProblemFormatError(f"{name} uses non-state variable {bad[0].name!r}")
        for row in self.g:
            for p in row:
                bad = [v for v in p.variables_used() if v not in state_ok]
                if bad:
                    raise ProblemFormatError(f"g uses non-state variable {bad[0].name!r}")
        for p in self.xs_map:
            bad = [v for v in p.variables_used() if v not in state_ok]
            if bad:
                raise ProblemFormatError(f"xs_map uses non-state variable {bad[0].name!r}")
        bad = [v for v in self.A.variables_used() if v not in both_ok]
        if bad:
            raise ProblemFormatError(f"attack_set uses unknown variable {bad[0].name!r}")

    def to_dict(self) -> dict:
        return {
            "state_vars": [v.name for v in self.state_vars],
            "attack_vars": [v.name for v in self.attack_vars],
            "f": [p.render(sig=None) for p in self.f],
            "g": [[p.render(sig=None) for p in row] for row in self.g],
            "safe_set": self.s.render(sig=None),
            "initial_set": self.T.render(sig=None),
            "attack_set": self.A.render(sig=None),
            "xs_map": [p.render(sig=None) for p in self.xs_map],
        }

    def canonical_digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def problem_from_dict(doc: Mapping) -> SafetyProblem:
    for key in ("state_vars", "f", "safe_set", "initial_set"):
        if key not in doc:
            raise ProblemFormatError(f"missing required field {key!r}")
    state_vars = make_vars(doc["state_vars"], STATE)
    attack_vars = make_vars(doc.get("attack_vars", []), ATTACK)
    universe = state_vars + attack_vars

    def parse_field(path: str, text, uni) -> Polynomial:
        if not isinstance(text, str):
            raise ProblemFormatError(f"field {path} must be a polynomial string")
        try:
            return parse_poly(text, uni)
        except PolyParseError as exc:
            raise type(exc)(f"in field {path}: {exc.args[0]}", exc.offset) from None

    f = tuple(parse_field(f"f[{i}]", t, universe) for i, t in enumerate(doc["f"]))
    g_doc = doc.get("g", [])
    g = tuple(
        tuple(parse_field(f"g[{i}][{j}]", t, state_vars) for j, t in enumerate(row))
        for i, row in enumerate(g_doc)
    )
    s = parse_field("safe_set", doc["safe_set"], state_vars)
    T = parse_field("initial_set", doc["initial_set"], state_vars)
    A = parse_field("attack_set", doc.get("attack_set", "1"), universe)
    xs = tuple(parse_field(f"xs_map[{i}]", t, state_vars)
               for i, t in enumerate(doc.get("xs_map", [])))
    return SafetyProblem(state_vars, attack_vars, f, g, s, T, A, xs)


def load_problem(path) -> SafetyProblem:
    """Load a problem JSON document from disk."""
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProblemFormatError(f"not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ProblemFormatError("problem document must be a JSON object")
    return problem_from_dict(doc)


# ---------------------------------------------------------------------------
# Plant / primary-controller composition
# ---------------------------------------------------------------------------

def _check_selection(name: str, M: np.ndarray) -> None:
    for i, row in enumerate(M):
        ones = 0
        for x in row:
            if x not in (0, 1):
                raise ProblemFormatError(f"{name} entries must be 0 or 1")
            ones += int(x)
        if ones > 1:
            raise ProblemFormatError(f"{name} row {i} selects more than one entry")


@dataclass
class PlantControllerSpec:
    """Plant + pre-designed primary controller, before composition.

    ``f_c``/``h_c`` are written over the controller states plus the
    output aliases; an empty controller state list selects the
    state-feedback variant where ``h_c`` reads the plant states directly.
    """

    plant_states: tuple[Variable, ...]
    controller_states: tuple[Variable, ...]
    output_aliases: tuple[Variable, ...]
    f_p: tuple[Polynomial, ...]
    g_p: tuple[tuple[Polynomial, ...], ...]
    h_p: tuple[Polynomial, ...]
    f_c: tuple[Polynomial, ...]
    h_c: tuple[Polynomial, ...]
    E_u: np.ndarray
    C_s: np.ndarray
    actuator_attacks: tuple[Variable, ...] = ()
    sensor_attacks: tuple[Variable, ...] = ()

    def __post_init__(self):
        n_p, n_u = len(self.plant_states), len(self.h_c)
        if len(self.f_p) != n_p:
            raise DimensionError("f_p length does not match plant states")
        if len(self.g_p) != n_p or any(len(r) != n_u for r in self.g_p):
            raise DimensionError(f"g_p must be {n_p}x{n_u} to match h_c")
        if self.controller_states and len(self.f_c) != len(self.controller_states):
            raise DimensionError("f_c length does not match controller states")
        if self.actuator_attacks and len(self.actuator_attacks) != n_u:
            raise DimensionError("actuator attack count does not match input count")
        if self.sensor_attacks and len(self.sensor_attacks) != len(self.h_p):
            raise DimensionError("sensor attack count does not match output count")
        self.E_u = np.atleast_2d(np.asarray(self.E_u, dtype=float))
        self.C_s = np.atleast_2d(np.asarray(self.C_s, dtype=float))
        if self.E_u.shape[0] != n_u:
            raise DimensionError(f"E_u must have one row per input ({n_u})")
        if self.C_s.size and self.C_s.shape[1] != len(self.h_p):
            raise DimensionError("C_s must have one column per output")
        _check_selection("E_u", self.E_u)
        _check_selection("C_s", self.C_s)


@dataclass(frozen=True)
class ClosedLoop:
    """Assembled closed-loop fragment: drift, input map and sensor map."""

    state_vars: tuple[Variable, ...]
    attack_vars: tuple[Variable, ...]
    f: tuple[Polynomial, ...]
    g: tuple[tuple[Polynomial, ...], ...]
    xs_map: tuple[Polynomial, ...]


def assemble_closed_loop(spec: PlantControllerSpec) -> ClosedLoop:
    """Compose plant and primary controller into the closed-loop form."""
    n_u = len(spec.h_c)
    zero_u = Polynomial.zero(())

    def au(i: int) -> Polynomial:
        if spec.actuator_attacks:
            return Polynomial.variable(spec.actuator_attacks[i])
        return zero_u

    def ay(j: int) -> Polynomial:
        if spec.sensor_attacks:
            return Polynomial.variable(spec.sensor_attacks[j])
        return zero_u

    if spec.controller_states:
        # Output feedback: u_p = h_c(x_c) + a_u, controller sees y + a_y.
        u_p = [spec.h_c[i] + au(i) for i in range(n_u)]
        y_bindings = {
            alias: spec.h_p[j] + ay(j) for j, alias in enumerate(spec.output_aliases)
        }
        f_bot = [p.substitute(y_bindings) for p in spec.f_c]
        states = spec.plant_states + spec.controller_states
    else:
        # State feedback: u_p = h_c(x_p + a_y) + a_u.
        shift = {
            v: Polynomial.variable(v) + ay(j) for j, v in enumerate(spec.plant_states)
        }
        u_p = [spec.h_c[i].substitute(shift) + au(i) for i in range(n_u)]
        f_bot = []
        states = spec.plant_states

    f_top = []
    for i in range(len(spec.plant_states)):
        row = spec.f_p[i]
        for j in range(n_u):
            row = row + spec.g_p[i][j] * u_p[j]
        f_top.append(row)

    n_s = spec.E_u.shape[1]
    g_rows = []
    for i in range(len(spec.plant_states)):
        g_rows.append(tuple(
            sum((spec.g_p[i][j] * float(spec.E_u[j, k]) for j in range(n_u)),
                Polynomial.zero(spec.plant_states))
            for k in range(n_s)
        ))
    for _ in spec.controller_states:
        g_rows.append(tuple(Polynomial.zero(states) for _ in range(n_s)))

    xs = tuple(
        sum((spec.h_p[j] * float(spec.C_s[r, j]) for j in range(len(spec.h_p))),
            Polynomial.zero(spec.plant_states))
        for r in range(spec.C_s.shape[0])
    )

    attacks = spec.actuator_attacks + spec.sensor_attacks
    f_all = tuple(p.on_universe(_union_many([p], states + attacks)) for p in f_top + f_bot)
    # No attack variable may leak into the input map.
    for row in g_rows:
        for p in row:
            bad = [v for v in p.variables_used() if v.kind == ATTACK]
            if bad:
                raise ProblemFormatError(f"input map depends on attack {bad[0].name!r}")
    return ClosedLoop(tuple(states), tuple(attacks), f_all, tuple(g_rows), xs)


def _union_many(polys, base_vars):
    uni = list(base_vars)
    names = {v.name for v in uni}
    for p in polys:
        for v in p.universe:
            if v.name not in names:
                uni.append(v)
                names.add(v.name)
    return tuple(uni)


def load_plant_spec(path) -> PlantControllerSpec:
    """Load the optional plant/primary-controller sibling document."""
    doc = json.loads(Path(path).read_text())
    for key in ("plant_states", "f_p", "g_p", "h_p", "h_c", "E_u", "C_s"):
        if key not in doc:
            raise ProblemFormatError(f"missing required field {key!r}")
    plant = make_vars(doc["plant_states"], STATE)
    ctrl = make_vars(doc.get("controller_states", []), STATE)
    outs = make_vars(doc.get("outputs", []), MEASUREMENT)
    a_u = make_vars(doc.get("actuator_attacks", []), ATTACK)
    a_y = make_vars(doc.get("sensor_attacks", []), ATTACK)

    def pp(path_, text, uni):
        try:
            return parse_poly(text, uni)
        except PolyParseError as exc:
            raise type(exc)(f"in field {path_}: {exc.args[0]}", exc.offset) from None

    f_p = tuple(pp(f"f_p[{i}]", t, plant) for i, t in enumerate(doc["f_p"]))
    g_p = tuple(tuple(pp(f"g_p[{i}][{j}]", t, plant) for j, t in enumerate(row))
                for i, row in enumerate(doc["g_p"]))
    h_p = tuple(pp(f"h_p[{i}]", t, plant) for i, t in enumerate(doc["h_p"]))
    hc_uni = ctrl if ctrl else plant
    h_c = tuple(pp(f"h_c[{i}]", t, hc_uni) for i, t in enumerate(doc["h_c"]))
    f_c = tuple(pp(f"f_c[{i}]", t, ctrl + outs) for i, t in enumerate(doc.get("f_c", [])))
    return PlantControllerSpec(
        plant_states=plant, controller_states=ctrl, output_aliases=outs,
        f_p=f_p, g_p=g_p, h_p=h_p, f_c=f_c, h_c=h_c,
        E_u=np.asarray(doc["E_u"], dtype=float),
        C_s=np.asarray(doc["C_s"], dtype=float),
        actuator_attacks=a_u, sensor_attacks=a_y,
    )
