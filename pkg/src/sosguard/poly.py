"""Sparse multivariate polynomial arithmetic over named variables.

Polynomials are immutable values: every operation returns a new object,
so they are safe to share across threads.  Terms live in a dict keyed by
exponent tuples aligned with the polynomial's variable universe, kept in
graded-lexicographic order for deterministic printing and basis
enumeration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from ._kernels import PACK_MAX_EXP, PACK_MAX_VARS, mul_packed, pack_exponents, unpack_key

# Variable kinds.
STATE = "state"
ATTACK = "attack"
MEASUREMENT = "measurement-alias"

_ZERO_TOL = 1e-12


def set_zero_tolerance(tol: float) -> None:
    """Set the global coefficient drop tolerance (default 1e-12)."""
    global _ZERO_TOL
    if tol < 0:
        raise ValueError("tolerance must be nonnegative")
    _ZERO_TOL = float(tol)


def zero_tolerance() -> float:
    return _ZERO_TOL


@dataclass(frozen=True, order=True)
class Variable:
    """A named scalar variable with an immutable kind tag."""

    name: str
    kind: str = STATE

    def __post_init__(self):
        if self.kind not in (STATE, ATTACK, MEASUREMENT):
            raise ValueError(f"unknown variable kind {self.kind!r}")
        if not self.name or not (self.name[0].isalpha() or self.name[0] == "_"):
            raise ValueError(f"invalid variable name {self.name!r}")

    def __repr__(self):
        return f"Variable({self.name!r}, {self.kind!r})"


def make_vars(names: Iterable[str], kind: str = STATE) -> tuple[Variable, ...]:
    out = tuple(Variable(n, kind) for n in names)
    seen = set()
    for v in out:
        if v.name in seen:
            raise ValueError(f"duplicate variable name {v.name!r}")
        seen.add(v.name)
    return out


class Monomial:
    """A product of variable powers; zero exponents are never stored."""

    __slots__ = ("_exps",)

    def __init__(self, exponents: Mapping[Variable, int]):
        items = tuple(
            sorted(((v, int(e)) for v, e in exponents.items() if e != 0), key=lambda it: it[0].name)
        )
        for _, e in items:
            if e < 0:
                raise ValueError("exponents must be nonnegative")
        self._exps = items

    @property
    def exponents(self) -> dict[Variable, int]:
        return dict(self._exps)

    @property
    def degree(self) -> int:
        return sum(e for _, e in self._exps)

    def __eq__(self, other):
        return isinstance(other, Monomial) and self._exps == other._exps

    def __hash__(self):
        return hash(self._exps)

    def __str__(self):
        if not self._exps:
            return "1"
        parts = []
        for v, e in self._exps:
            parts.append(v.name if e == 1 else f"{v.name}^{e}")
        return "*".join(parts)

    def __repr__(self):
        return f"Monomial({self})"


def _grlex_key(exps: tuple[int, ...]) -> tuple:
    # Ascending total degree; ties broken so earlier variables rank first.
    return (sum(exps), tuple(-e for e in exps))


def _format_coeff(c: float, sig: int | None) -> str:
    if sig is None:
        return repr(float(c))
    return f"{c:.{sig}g}"


class Polynomial:
    """Sparse polynomial with real coefficients over an ordered universe."""

    __slots__ = ("universe", "_terms", "_pack_cache")

    def __init__(self, universe: Sequence[Variable], terms: Mapping[tuple[int, ...], float]):
        uni = tuple(universe)
        names = [v.name for v in uni]
        if len(set(names)) != len(names):
            raise ValueError("universe has duplicate variable names")
        tol = _ZERO_TOL
        clean: dict[tuple[int, ...], float] = {}
        for exps, c in terms.items():
            c = float(c)
            if abs(c) < tol:
                continue
            t = tuple(int(e) for e in exps)
            if len(t) != len(uni):
                raise ValueError("exponent tuple does not match universe length")
            clean[t] = c
        ordered = dict(sorted(clean.items(), key=lambda kv: _grlex_key(kv[0])))
        object.__setattr__(self, "universe", uni)
        object.__setattr__(self, "_terms", ordered)
        object.__setattr__(self, "_pack_cache", None)

    # -- constructors ---------------------------------------------------

    @staticmethod
    def zero(universe: Sequence[Variable] = ()) -> "Polynomial":
        return Polynomial(universe, {})

    @staticmethod
    def constant(value: float, universe: Sequence[Variable] = ()) -> "Polynomial":
        uni = tuple(universe)
        return Polynomial(uni, {(0,) * len(uni): value})

    @staticmethod
    def variable(v: Variable) -> "Polynomial":
        return Polynomial((v,), {(1,): 1.0})

    @staticmethod
    def from_monomial(mono: Monomial, coeff: float = 1.0,
                      universe: Sequence[Variable] | None = None) -> "Polynomial":
        exps = mono.exponents
        uni = tuple(universe) if universe is not None else tuple(sorted(exps, key=lambda v: v.name))
        missing = [v for v in exps if v not in uni]
        if missing:
            raise ValueError(f"universe is missing {missing[0].name}")
        key = tuple(exps.get(v, 0) for v in uni)
        return Polynomial(uni, {key: coeff})

    # -- inspection -----------------------------------------------------

    def terms(self) -> list[tuple[Monomial, float]]:
        return [
            (Monomial({v: e for v, e in zip(self.universe, exps) if e}), c)
            for exps, c in self._terms.items()
        ]

    def items(self):
        return self._terms.items()

    @property
    def is_zero(self) -> bool:
        return not self._terms

    @property
    def degree(self) -> int:
        """Total degree; the zero polynomial has degree 0 by convention."""
        if not self._terms:
            return 0
        return max(sum(e) for e in self._terms)

    @property
    def num_terms(self) -> int:
        return len(self._terms)

    def constant_term(self) -> float:
        return self._terms.get((0,) * len(self.universe), 0.0)

    def coefficient(self, mono: Monomial) -> float:
        exps = mono.exponents
        if any(v not in self.universe for v in exps):
            return 0.0
        key = tuple(exps.get(v, 0) for v in self.universe)
        return self._terms.get(key, 0.0)

    def variables_used(self) -> tuple[Variable, ...]:
        used = [False] * len(self.universe)
        for exps in self._terms:
            for i, e in enumerate(exps):
                if e:
                    used[i] = True
        return tuple(v for v, u in zip(self.universe, used) if u)

    def max_abs_coeff(self) -> float:
        return max((abs(c) for c in self._terms.values()), default=0.0)

    # -- universe management ---------------------------------------------

    def on_universe(self, universe: Sequence[Variable]) -> "Polynomial":
        """Re-align onto another universe; it must contain every used variable."""
        uni = tuple(universe)
        if uni == self.universe:
            return self
        pos = {v: i for i, v in enumerate(uni)}
        for v in self.universe:
            if v in pos:
                continue
            if any(exps[self.universe.index(v)] for exps in self._terms):
                raise ValueError(f"universe is missing {v.name}")
        idx = [pos.get(v, -1) for v in self.universe]
        out: dict[tuple[int, ...], float] = {}
        for exps, c in self._terms.items():
            key = [0] * len(uni)
            for i, e in enumerate(exps):
                if e:
                    key[idx[i]] = e
            out[tuple(key)] = out.get(tuple(key), 0.0) + c
        return Polynomial(uni, out)

    @staticmethod
    def union_universe(p: "Polynomial", q: "Polynomial") -> tuple[Variable, ...]:
        byname = {v.name: v for v in p.universe}
        uni = list(p.universe)
        for v in q.universe:
            prev = byname.get(v.name)
            if prev is None:
                byname[v.name] = v
                uni.append(v)
            elif prev != v:
                raise ValueError(f"variable {v.name!r} declared with two different kinds")
        return tuple(uni)

    # -- arithmetic -------------------------------------------------------

    def _coerce(self, other) -> "Polynomial":
        if isinstance(other, Polynomial):
            return other
        if isinstance(other, (int, float, np.floating, np.integer)):
            return Polynomial.constant(float(other), self.universe)
        return NotImplemented  # type: ignore[return-value]

    def __add__(self, other):
        q = self._coerce(other)
        if q is NotImplemented:
            return NotImplemented
        uni = Polynomial.union_universe(self, q)
        a, b = self.on_universe(uni), q.on_universe(uni)
        out = dict(a._terms)
        for exps, c in b._terms.items():
            out[exps] = out.get(exps, 0.0) + c
        return Polynomial(uni, out)

    __radd__ = __add__

    def __neg__(self):
        return Polynomial(self.universe, {e: -c for e, c in self._terms.items()})

    def __sub__(self, other):
        q = self._coerce(other)
        if q is NotImplemented:
            return NotImplemented
        return self + (-q)

    def __rsub__(self, other):
        return (-self) + other

    def _packed(self):
        cache = self._pack_cache
        if cache is None:
            exps = np.array(list(self._terms.keys()), dtype=np.uint64).reshape(len(self._terms), -1)
            coefs = np.array(list(self._terms.values()), dtype=np.float64)
            keys = pack_exponents(exps) if len(self.universe) else np.zeros(len(coefs), dtype=np.uint64)
            cache = (keys, coefs)
            object.__setattr__(self, "_pack_cache", cache)
        return cache

    def __mul__(self, other):
        q = self._coerce(other)
        if q is NotImplemented:
            return NotImplemented
        if self.is_zero or q.is_zero:
            return Polynomial.zero(Polynomial.union_universe(self, q))
        uni = Polynomial.union_universe(self, q)
        a, b = self.on_universe(uni), q.on_universe(uni)
        n = len(uni)
        packable = (
            0 < n <= PACK_MAX_VARS
            and a.degree + b.degree <= PACK_MAX_EXP
            and len(a._terms) * len(b._terms) >= 32
        )
        if packable:
            ka, ca = a._packed()
            kb, cb = b._packed()
            keys, vals = mul_packed(ka, ca, kb, cb)
            out = {unpack_key(k, n): v for k, v in zip(keys.tolist(), vals.tolist())}
            return Polynomial(uni, out)
        out: dict[tuple[int, ...], float] = {}
        for ea, ca in a._terms.items():
            for eb, cb in b._terms.items():
                key = tuple(x + y for x, y in zip(ea, eb))
                out[key] = out.get(key, 0.0) + ca * cb
        return Polynomial(uni, out)

    __rmul__ = __mul__

    def __pow__(self, n: int):
        if not isinstance(n, int) or n < 0:
            raise ValueError("polynomial powers must be nonnegative integers")
        result = Polynomial.constant(1.0, self.universe)
        base = self
        while n:
            if n & 1:
                result = result * base
            base = base * base if n > 1 else base
            n >>= 1
        return result

    def __eq__(self, other):
        if not isinstance(other, Polynomial):
            return NotImplemented
        uni = Polynomial.union_universe(self, other)
        return self.on_universe(uni)._terms == other.on_universe(uni)._terms

    def __hash__(self):
        return hash((self.universe, tuple(self._terms.items())))

    def almost_equal(self, other: "Polynomial", tol: float = 1e-9) -> bool:
        return (self - other).max_abs_coeff() <= tol

    # -- calculus ---------------------------------------------------------

    def diff(self, var: Variable) -> "Polynomial":
        if var not in self.universe:
            return Polynomial.zero(self.universe)
        i = self.universe.index(var)
        out: dict[tuple[int, ...], float] = {}
        for exps, c in self._terms.items():
            e = exps[i]
            if e == 0:
                continue
            key = exps[:i] + (e - 1,) + exps[i + 1:]
            out[key] = out.get(key, 0.0) + c * e
        return Polynomial(self.universe, out)

    def gradient(self, variables: Sequence[Variable]) -> list["Polynomial"]:
        return [self.diff(v) for v in variables]

    # -- evaluation and substitution ---------------------------------------

    def eval(self, point: Mapping[Variable, float]) -> float:
        vals = []
        for v in self.universe:
            if v in point:
                vals.append(float(point[v]))
            else:
                if any(exps[self.universe.index(v)] for exps in self._terms):
                    raise MissingAssignmentError(v.name)
                vals.append(0.0)
        total = 0.0
        for exps, c in self._terms.items():
            term = c
            for x, e in zip(vals, exps):
                if e:
                    term *= x ** e
            total += term
        return total

    def eval_array(self, points: np.ndarray, order: Sequence[Variable]) -> np.ndarray:
        """Evaluate at many points; ``points`` has one column per variable in ``order``."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        order = tuple(order)
        cols = []
        for v in self.universe:
            if v in order:
                cols.append(order.index(v))
            else:
                if v in self.variables_used():
                    raise MissingAssignmentError(v.name)
                cols.append(-1)
        if not self._terms:
            return np.zeros(points.shape[0])
        exps = np.array(list(self._terms.keys()), dtype=float)
        coefs = np.array(list(self._terms.values()))
        data = np.ones((points.shape[0], len(self.universe)))
        for j, col in enumerate(cols):
            if col >= 0:
                data[:, j] = points[:, col]
        with np.errstate(invalid="ignore"):
            powed = data[:, None, :] ** exps[None, :, :]
        return np.nan_to_num(powed.prod(axis=2)) @ coefs

    def substitute(self, bindings: Mapping[Variable, "Polynomial"]) -> "Polynomial":
        """Exact polynomial composition; unbound variables pass through."""
        target_uni: list[Variable] = []

        def extend(vs):
            for v in vs:
                if all(v.name != u.name for u in target_uni):
                    target_uni.append(v)

        for v in self.universe:
            if v not in bindings:
                extend([v])
        for b in bindings.values():
            extend(b.universe)
        result = Polynomial.zero(tuple(target_uni))
        one = Polynomial.constant(1.0, tuple(target_uni))
        # Cache per-variable powers across terms.
        powers: dict[tuple[int, int], Polynomial] = {}

        def var_power(i: int, e: int) -> Polynomial:
            v = self.universe[i]
            if v not in bindings:
                return Polynomial.from_monomial(Monomial({v: e}), 1.0, (v,))
            key = (i, e)
            if key not in powers:
                powers[key] = bindings[v] ** e
            return powers[key]

        for exps, c in self._terms.items():
            term = one * c
            for i, e in enumerate(exps):
                if e:
                    term = term * var_power(i, e)
            result = result + term
        return result

    # -- rendering ----------------------------------------------------------

    def render(self, sig: int | None = 6) -> str:
        """Canonical text: graded-lex descending, explicit ``*`` and ``^``."""
        if not self._terms:
            return "0"
        ordered = sorted(self._terms.items(), key=lambda kv: _grlex_key(kv[0]), reverse=True)
        pieces = []
        for k, (exps, c) in enumerate(ordered):
            mono = "*".join(
                v.name if e == 1 else f"{v.name}^{e}"
                for v, e in zip(self.universe, exps)
                if e
            )
            mag = _format_coeff(abs(c), sig)
            if mono:
                body = mono if mag == "1" else f"{mag}*{mono}"
            else:
                body = mag
            if k == 0:
                pieces.append(body if c >= 0 else f"-{body}")
            else:
                pieces.append(f"+ {body}" if c >= 0 else f"- {body}")
        return " ".join(pieces)

    def __str__(self):
        return self.render()

    def __repr__(self):
        return f"Polynomial({self.render()})"


class MissingAssignmentError(KeyError):
    """A variable of the polynomial was not assigned a value."""

    def __init__(self, name: str):
        super().__init__(name)
        self.name = name

    def __str__(self):
        return f"no value assigned to variable {self.name!r}"


def lie_derivative(v: Polynomial, field: Sequence[Polynomial],
                   variables: Sequence[Variable]) -> Polynomial:
    """Directional derivative of ``v`` along ``field``: sum_i dv/dx_i * f_i."""
    if len(field) != len(variables):
        raise ValueError(
            f"field has {len(field)} components for {len(variables)} variables"
        )
    total = Polynomial.zero(v.universe)
    for f_i, x_i in zip(field, variables):
        total = total + v.diff(x_i) * f_i
    return total


def monomial_exponents(nvars: int, degree: int) -> list[tuple[int, ...]]:
    """All exponent tuples with total degree <= degree, graded-lex ascending."""
    if degree < 0:
        raise ValueError("degree must be nonnegative")
    if nvars == 0:
        return [()]
    out: list[tuple[int, ...]] = []

    def rec(prefix, remaining, slots):
        if slots == 1:
            out.append(prefix + (remaining,))
            return
        for e in range(remaining, -1, -1):
            rec(prefix + (e,), remaining - e, slots - 1)

    for d in range(degree + 1):
        rec((), d, nvars)
    return out


def monomial_basis(variables: Sequence[Variable], degree: int) -> list[Monomial]:
    """Monomials of total degree <= degree in graded-lex order."""
    vs = tuple(variables)
    return [
        Monomial({v: e for v, e in zip(vs, exps) if e})
        for exps in monomial_exponents(len(vs), degree)
    ]


def basis_size(nvars: int, degree: int) -> int:
    return math.comb(nvars + degree, degree)
