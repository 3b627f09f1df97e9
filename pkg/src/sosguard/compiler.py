"""Compile SOS programs into block-diagonal standard-form SDPs.

A program consists of decision polynomials (free coefficient vectors or
Gram-parameterized SOS polynomials), optional PSD matrix decisions,
affine SOS membership constraints and a linear objective.  Compilation
matches coefficients of each constraint against z'Qz over the half-degree
monomial basis, one scalar equality per monomial; solutions are lifted
back to concrete polynomials with auditable Gram decompositions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .poly import (
    Monomial,
    Polynomial,
    Variable,
    basis_size,
    monomial_basis,
    monomial_exponents,
)
from .sdp import SdpProblem, SdpSolution

# Decision handles.  ("free", name, k) is the k-th scalar coefficient of a
# free decision polynomial; ("gram", name, i, j) with i <= j is an entry of
# an SOS decision's Gram matrix; ("mat", name, i, j) an entry of a PSD
# matrix decision (before its definiteness shift).
Handle = tuple


class CompileError(ValueError):
    pass


class OddDegreeError(CompileError):
    """A constraint with no decision freedom has odd leading degree."""


class EmptyConstraintError(CompileError):
    """A constraint that is identically zero with no decision content."""


class SolverStatusError(RuntimeError):
    """Attempted to lift a solution that is not feasible."""


# ---------------------------------------------------------------------------
# Affine expressions in decision handles
# ---------------------------------------------------------------------------

class AffineExpr:
    """const + sum_h poly_h * handle_h, with Polynomial-valued weights."""

    __slots__ = ("const", "lin")

    def __init__(self, const: Polynomial, lin: Mapping[Handle, Polynomial] | None = None):
        self.const = const
        self.lin: dict[Handle, Polynomial] = dict(lin or {})

    @staticmethod
    def wrap(p) -> "AffineExpr":
        if isinstance(p, AffineExpr):
            return p
        if isinstance(p, Polynomial):
            return AffineExpr(p)
        return AffineExpr(Polynomial.constant(float(p)))

    def __add__(self, other):
        other = AffineExpr.wrap(other)
        lin = dict(self.lin)
        for h, p in other.lin.items():
            lin[h] = lin[h] + p if h in lin else p
        return AffineExpr(self.const + other.const, lin)

    __radd__ = __add__

    def __neg__(self):
        return AffineExpr(-self.const, {h: -p for h, p in self.lin.items()})

    def __sub__(self, other):
        return self + (-AffineExpr.wrap(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        """Multiply by a fixed polynomial or scalar (stays affine)."""
        if isinstance(other, AffineExpr):
            raise CompileError("product of two decision expressions is not affine")
        return AffineExpr(self.const * other, {h: p * other for h, p in self.lin.items()})

    __rmul__ = __mul__

    def diff(self, var: Variable) -> "AffineExpr":
        return AffineExpr(self.const.diff(var), {h: p.diff(var) for h, p in self.lin.items()})

    def at(self, values: Mapping[Handle, float]) -> Polynomial:
        """Instantiate with concrete handle values."""
        out = self.const
        for h, p in self.lin.items():
            out = out + p * float(values.get(h, 0.0))
        return out

    def max_degree(self) -> int:
        d = self.const.degree if not self.const.is_zero else 0
        for p in self.lin.values():
            if not p.is_zero:
                d = max(d, p.degree)
        return d

    def is_trivial(self) -> bool:
        return self.const.is_zero and all(p.is_zero for p in self.lin.values())


# ---------------------------------------------------------------------------
# Decisions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DecisionPoly:
    """A polynomial-valued decision variable.

    ``shape='free'`` spans all monomials of total degree <= degree with one
    scalar handle each (C(n+d, d) handles).  ``shape='sos'`` is a Gram
    matrix over the half-degree basis, so the polynomial is z'Qz.
    """

    name: str
    universe: tuple[Variable, ...]
    degree: int
    shape: str  # "free" | "sos"

    def __post_init__(self):
        if self.shape not in ("free", "sos"):
            raise CompileError(f"unknown decision shape {self.shape!r}")
        if self.degree < 0:
            raise CompileError("decision degree must be nonnegative")

    def basis(self) -> list[Monomial]:
        if self.shape == "free":
            return monomial_basis(self.universe, self.degree)
        return monomial_basis(self.universe, (self.degree + 1) // 2)

    def handles(self) -> list[Handle]:
        if self.shape == "free":
            return [("free", self.name, k) for k in range(len(self.basis()))]
        nb = len(self.basis())
        return [("gram", self.name, i, j) for i in range(nb) for j in range(i, nb)]

    def as_expr(self, on_universe: tuple[Variable, ...] | None = None) -> AffineExpr:
        uni = on_universe or self.universe
        if self.shape == "free":
            lin = {
                ("free", self.name, k): Polynomial.from_monomial(m, 1.0, uni)
                for k, m in enumerate(self.basis())
            }
        else:
            zs = [Polynomial.from_monomial(m, 1.0, uni) for m in self.basis()]
            lin = {}
            for i in range(len(zs)):
                for j in range(i, len(zs)):
                    scale = 1.0 if i == j else 2.0
                    lin[("gram", self.name, i, j)] = zs[i] * zs[j] * scale
        return AffineExpr(Polynomial.zero(uni), lin)

    def composed_expr(self, bindings: Mapping[Variable, Polynomial]) -> AffineExpr:
        """Expression for this decision with its variables substituted by
        fixed polynomials (used for output-feedback laws)."""
        if self.shape != "free":
            raise CompileError("only free decisions can be composed")
        lin = {}
        for k, m in enumerate(self.basis()):
            expanded = Polynomial.constant(1.0)
            for v, e in m.exponents.items():
                expanded = expanded * (bindings[v] ** e)
            lin[("free", self.name, k)] = expanded
        base_uni = None
        for p in lin.values():
            base_uni = p.universe if base_uni is None else Polynomial.union_universe(
                Polynomial.zero(base_uni), p)
        return AffineExpr(Polynomial.zero(base_uni or ()), lin)


@dataclass(frozen=True)
class MatrixDecision:
    """A symmetric PSD matrix decision P, enforced as P = X + shift*I, X >= 0."""

    name: str
    variables: tuple[Variable, ...]
    shift: float = 1e-6

    @property
    def dim(self) -> int:
        return len(self.variables)

    def handles(self) -> list[Handle]:
        n = self.dim
        return [("mat", self.name, i, j) for i in range(n) for j in range(i, n)]

    def quad_form(self) -> AffineExpr:
        """x'Px as an affine expression over the matrix entries."""
        xs = [Polynomial.variable(v) for v in self.variables]
        lin = {}
        const = Polynomial.zero(self.variables)
        for i in range(self.dim):
            const = const + xs[i] * xs[i] * self.shift
            for j in range(i, self.dim):
                scale = 1.0 if i == j else 2.0
                lin[("mat", self.name, i, j)] = xs[i] * xs[j] * scale
        return AffineExpr(const, lin)


@dataclass(frozen=True)
class SosConstraint:
    """Require expr(x; decisions) to be a sum of squares over ``universe``."""

    expr: AffineExpr
    universe: tuple[Variable, ...]
    label: str = ""


@dataclass
class SosProgram:
    decisions: list[DecisionPoly] = field(default_factory=list)
    matrix_decisions: list[MatrixDecision] = field(default_factory=list)
    constraints: list[SosConstraint] = field(default_factory=list)
    objective: dict[Handle, float] = field(default_factory=dict)
    # (handle, lo, hi): scalar box constraints on free handles; None = open.
    bounds: list[tuple[Handle, float | None, float | None]] = field(default_factory=list)

    def decision(self, name: str) -> DecisionPoly:
        for d in self.decisions:
            if d.name == name:
                return d
        raise KeyError(name)


# ---------------------------------------------------------------------------
# Gram decompositions
# ---------------------------------------------------------------------------

@dataclass
class GramDecomposition:
    """Certificate that p = z'Qz over the given monomial basis."""

    universe: tuple[Variable, ...]
    basis: list[Monomial]
    Q: np.ndarray

    def expand(self) -> Polynomial:
        zs = [Polynomial.from_monomial(m, 1.0, self.universe) for m in self.basis]
        out = Polynomial.zero(self.universe)
        n = len(zs)
        for i in range(n):
            out = out + zs[i] * zs[i] * float(self.Q[i, i])
            for j in range(i + 1, n):
                out = out + zs[i] * zs[j] * (2.0 * float(self.Q[i, j]))
        return out

    def min_eigenvalue(self) -> float:
        if self.Q.size == 0:
            return 0.0
        return float(np.linalg.eigvalsh(0.5 * (self.Q + self.Q.T))[0])

    def defect(self, target: Polynomial) -> float:
        """Max absolute coefficient mismatch between z'Qz and target."""
        return (self.expand() - target).max_abs_coeff()


# ---------------------------------------------------------------------------
# Compilation
# ---------------------------------------------------------------------------

@dataclass
class IndexMap:
    """Where each handle landed in the SDP (and what each block means)."""

    free_cols: dict[Handle, int]
    dropped_free: list[Handle]
    gram_blocks: dict[str, int]           # sos decision name -> block index
    mat_blocks: dict[str, int]            # matrix decision name -> block index
    constraint_blocks: list[int]          # constraint k -> block index
    constraint_bases: list[list[Monomial]]
    decision_bases: dict[str, list[Monomial]]
    mat_shifts: dict[str, float]

    def handle_value(self, h: Handle, sol: SdpSolution) -> float:
        kind = h[0]
        if kind == "free":
            if h in self.free_cols:
                return float(sol.u[self.free_cols[h]])
            return 0.0
        if kind == "gram":
            return float(sol.X[self.gram_blocks[h[1]]][h[2], h[3]])
        if kind == "mat":
            blk = self.mat_blocks[h[1]]
            val = float(sol.X[blk][h[2], h[3]])
            if h[2] == h[3]:
                val += self.mat_shifts[h[1]]
            return val
        raise KeyError(h)


def _sym_to_svec(M: np.ndarray) -> np.ndarray:
    n = M.shape[0]
    iu = np.triu_indices(n)
    out = M[iu].astype(float).copy()
    out[iu[0] != iu[1]] *= math.sqrt(2.0)
    return out


def compile_program(prog: SosProgram) -> tuple[SdpProblem, IndexMap]:
    """Compile to standard primal form: min <C,X> + cf'u s.t. A(X) + Fu = b."""
    block_dims: list[int] = []
    gram_blocks: dict[str, int] = {}
    mat_blocks: dict[str, int] = {}
    decision_bases: dict[str, list[Monomial]] = {}
    mat_shifts: dict[str, float] = {}

    for d in prog.decisions:
        if d.shape == "sos":
            decision_bases[d.name] = d.basis()
            gram_blocks[d.name] = len(block_dims)
            block_dims.append(len(decision_bases[d.name]))
    for md in prog.matrix_decisions:
        mat_blocks[md.name] = len(block_dims)
        mat_shifts[md.name] = md.shift
        block_dims.append(md.dim)

    # Free handles, in declaration order; unused columns are dropped later.
    free_handles: list[Handle] = []
    for d in prog.decisions:
        if d.shape == "free":
            free_handles.extend(d.handles())

    constraint_blocks: list[int] = []
    constraint_bases: list[list[Monomial]] = []
    rows_A: list[list[tuple[int, np.ndarray]]] = []   # per row: (block, sym matrix)
    rows_F: list[dict[Handle, float]] = []
    rows_b: list[float] = []

    for ci, con in enumerate(prog.constraints):
        expr, uni = con.expr, con.universe
        if expr.is_trivial():
            raise EmptyConstraintError(f"constraint {ci} ({con.label}) is identically zero")
        for p in [expr.const, *expr.lin.values()]:
            for v in p.variables_used():
                if v not in uni:
                    raise CompileError(
                        f"constraint {ci} ({con.label}) mentions {v.name!r} "
                        f"outside its universe")
        dmax = expr.max_degree()
        if dmax % 2 == 1 and not expr.lin:
            raise OddDegreeError(
                f"constraint {ci} ({con.label}) has odd leading degree {dmax}")
        half = (dmax + 1) // 2
        basis = monomial_basis(uni, half)
        basis_exps = monomial_exponents(len(uni), half)
        nb = len(basis)
        blk = len(block_dims)
        block_dims.append(nb)
        constraint_blocks.append(blk)
        constraint_bases.append(basis)

        # Map each product monomial to its Gram index pairs.
        eq_exps = monomial_exponents(len(uni), 2 * half)
        eq_index = {e: k for k, e in enumerate(eq_exps)}
        pair_map: list[list[tuple[int, int]]] = [[] for _ in eq_exps]
        for i in range(nb):
            for j in range(i, nb):
                prod = tuple(a + b for a, b in zip(basis_exps[i], basis_exps[j]))
                pair_map[eq_index[prod]].append((i, j))

        aligned_const = expr.const.on_universe(uni)
        aligned_lin = {h: p.on_universe(uni) for h, p in expr.lin.items()}

        for k, exps in enumerate(eq_exps):
            A_blk = np.zeros((nb, nb))
            for (i, j) in pair_map[k]:
                A_blk[i, j] = 1.0
                A_blk[j, i] = 1.0
            row_A = [(blk, A_blk)]
            row_F: dict[Handle, float] = {}
            for h, p in aligned_lin.items():
                c = p._terms.get(exps, 0.0)  # noqa: SLF001 - hot path
                if c == 0.0:
                    continue
                if h[0] == "free":
                    row_F[h] = row_F.get(h, 0.0) - c
                else:
                    hblk = _handle_block(h, gram_blocks, mat_blocks)
                    row_A.append((hblk, _entry_matrix(h, block_dims[hblk], -c)))
            rows_A.append(row_A)
            rows_F.append(row_F)
            rows_b.append(aligned_const._terms.get(exps, 0.0))  # noqa: SLF001

    # Scalar box constraints become 1x1 slack blocks.
    for h, lo, hi in prog.bounds:
        if h[0] != "free":
            raise CompileError("bounds are supported on free handles only")
        for bound, sign in ((lo, 1.0), (hi, -1.0)):
            if bound is None:
                continue
            blk = len(block_dims)
            block_dims.append(1)
            # sign*(h - bound) = slack >= 0
            rows_A.append([(blk, np.array([[1.0]]))])
            rows_F.append({h: -sign})
            rows_b.append(-sign * bound)

    # Consolidate rows into svec form.
    m = len(rows_A)
    used_handles = set()
    for rf in rows_F:
        used_handles.update(rf)
    for h in prog.objective:
        if h[0] == "free":
            used_handles.add(h)
    cols: dict[Handle, int] = {}
    dropped: list[Handle] = []
    for h in free_handles:
        if h in used_handles:
            cols[h] = len(cols)
        else:
            dropped.append(h)
    for h in sorted(used_handles):
        if h[0] == "free" and h not in cols and h not in dropped:
            cols[h] = len(cols)  # handles introduced outside declared decisions

    nfree = len(cols)
    svec_dims = [n * (n + 1) // 2 for n in block_dims]
    Asv = [np.zeros((m, sd)) for sd in svec_dims]
    F = np.zeros((m, nfree))
    b = np.array(rows_b)
    for r, row in enumerate(rows_A):
        for blk, mat in row:
            Asv[blk][r] += _sym_to_svec(mat)
        for h, c in rows_F[r].items():
            F[r, cols[h]] = c

    Csv = [np.zeros(sd) for sd in svec_dims]
    cf = np.zeros(nfree)
    for h, w in prog.objective.items():
        if h[0] == "free":
            cf[cols[h]] += w
        else:
            blk = _handle_block(h, gram_blocks, mat_blocks)
            Csv[blk] += _sym_to_svec(_entry_matrix(h, block_dims[blk], w))

    problem = SdpProblem(block_dims=block_dims, Asv=Asv, Csv=Csv, F=F, cf=cf, b=b)
    imap = IndexMap(
        free_cols=cols, dropped_free=dropped, gram_blocks=gram_blocks,
        mat_blocks=mat_blocks, constraint_blocks=constraint_blocks,
        constraint_bases=constraint_bases, decision_bases=decision_bases,
        mat_shifts=mat_shifts,
    )
    return problem, imap


def _handle_block(h: Handle, gram_blocks, mat_blocks) -> int:
    return gram_blocks[h[1]] if h[0] == "gram" else mat_blocks[h[1]]


def _entry_matrix(h: Handle, dim: int, weight: float) -> np.ndarray:
    # <A, X> picks up weight * X_ij for the symmetric entry pair.
    _, _, i, j = h
    M = np.zeros((dim, dim))
    if i == j:
        M[i, i] = weight
    else:
        M[i, j] = weight / 2.0
        M[j, i] = weight / 2.0
    return M


# ---------------------------------------------------------------------------
# Lifting solutions
# ---------------------------------------------------------------------------

@dataclass
class LiftedSolution:
    polynomials: dict[str, Polynomial]
    grams: dict[str, GramDecomposition]          # sos decisions
    constraint_grams: list[GramDecomposition]
    constraint_defects: list[float]
    matrices: dict[str, np.ndarray]
    handle_values: dict[Handle, float]


def lift_solution(prog: SosProgram, sol: SdpSolution, imap: IndexMap) -> LiftedSolution:
    """Materialize decisions and per-constraint Gram certificates."""
    if sol.status != "optimal":
        raise SolverStatusError(f"cannot lift solution with status {sol.status!r}")

    values: dict[Handle, float] = {}
    for d in prog.decisions:
        for h in d.handles():
            values[h] = imap.handle_value(h, sol)
    for md in prog.matrix_decisions:
        for h in md.handles():
            values[h] = imap.handle_value(h, sol)

    polys: dict[str, Polynomial] = {}
    grams: dict[str, GramDecomposition] = {}
    for d in prog.decisions:
        expr = d.as_expr()
        polys[d.name] = expr.at(values)
        if d.shape == "sos":
            blk = imap.gram_blocks[d.name]
            grams[d.name] = GramDecomposition(d.universe, imap.decision_bases[d.name],
                                              np.array(sol.X[blk]))

    matrices: dict[str, np.ndarray] = {}
    for md in prog.matrix_decisions:
        blk = imap.mat_blocks[md.name]
        matrices[md.name] = np.array(sol.X[blk]) + md.shift * np.eye(md.dim)

    cons_grams: list[GramDecomposition] = []
    defects: list[float] = []
    for k, con in enumerate(prog.constraints):
        blk = imap.constraint_blocks[k]
        gd = GramDecomposition(con.universe, imap.constraint_bases[k], np.array(sol.X[blk]))
        cons_grams.append(gd)
        target = con.expr.at(values)
        scale = max(1.0, target.max_abs_coeff())
        defects.append(gd.defect(target) / scale)
    return LiftedSolution(polys, grams, cons_grams, defects, matrices, values)


# ---------------------------------------------------------------------------
# Convenience: direct SOS membership test
# ---------------------------------------------------------------------------

def is_sos(p: Polynomial, settings: dict | None = None):
    """Test SOS membership of a fixed polynomial.

    Returns (feasible, GramDecomposition or None, SdpSolution).
    """
    from .sdp import solve_sdp

    uni = tuple(p.variables_used()) or p.universe
    prog = SosProgram(constraints=[SosConstraint(AffineExpr.wrap(p.on_universe(uni)), uni, "sos-test")])
    problem, imap = compile_program(prog)
    sol = solve_sdp(problem, **(settings or {}))
    if sol.status != "optimal":
        return False, None, sol
    gd = GramDecomposition(uni, imap.constraint_bases[0], np.array(sol.X[imap.constraint_blocks[0]]))
    return True, gd, sol
