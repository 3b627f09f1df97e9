"""SDPA sparse text format: export, import, and solution files.

Layout of a problem file (``.dat-s``): line 1 is the number of
constraints, line 2 the number of blocks, line 3 the block sizes with
negative sizes marking diagonal blocks, line 4 the right-hand-side
vector, then one ``k blk i j v`` entry per line with 1-based indices,
i <= j, and k = 0 denoting the objective.

Free scalar variables have no native SDPA representation; they are
exported as a trailing diagonal block of size 2f holding the split
u = u+ - u-.  The importer recognizes that pairing and folds it back
into free variables, so an export/import round trip is structurally
exact.
"""

from __future__ import annotations

import math

import numpy as np

from .sdp import (
    STATUS_NUMERICAL,
    STATUS_OPTIMAL,
    SdpProblem,
    SdpSolution,
    kkt_residuals,
    smat,
    svec,
)


class MalformedResultError(ValueError):
    """A solver result file that does not match the expected layout."""

    def __init__(self, message: str, line: int):
        super().__init__(f"{message} (line {line})")
        self.line = line


def _fmt(x: float) -> str:
    return repr(float(x))


def export_sdpa(prob: SdpProblem) -> str:
    """Serialize a problem to SDPA sparse format text."""
    m = prob.num_constraints
    nfree = prob.num_free
    dims = list(prob.block_dims)
    sizes = [str(n) for n in dims]
    nblocks = len(dims)
    if nfree:
        nblocks += 1
        sizes.append(str(-2 * nfree))

    lines = [str(m), str(nblocks), " ".join(sizes), " ".join(_fmt(v) for v in prob.b)]

    def emit(k: int, blk: int, M: np.ndarray):
        n = M.shape[0]
        for i in range(n):
            for j in range(i, n):
                v = M[i, j]
                if v != 0.0:
                    lines.append(f"{k} {blk} {i + 1} {j + 1} {_fmt(v)}")

    for bi, n in enumerate(dims):
        emit(0, bi + 1, smat(prob.Csv[bi], n))
    if nfree:
        for i in range(nfree):
            v = prob.cf[i]
            if v != 0.0:
                lines.append(f"0 {nblocks} {i + 1} {i + 1} {_fmt(v)}")
                lines.append(f"0 {nblocks} {nfree + i + 1} {nfree + i + 1} {_fmt(-v)}")
    for k in range(m):
        for bi, n in enumerate(dims):
            emit(k + 1, bi + 1, smat(prob.Asv[bi][k], n))
        if nfree:
            for i in range(nfree):
                v = prob.F[k, i]
                if v != 0.0:
                    lines.append(f"{k + 1} {nblocks} {i + 1} {i + 1} {_fmt(v)}")
                    lines.append(f"{k + 1} {nblocks} {nfree + i + 1} {nfree + i + 1} {_fmt(-v)}")
    return "\n".join(lines) + "\n"


def import_sdpa(text: str) -> SdpProblem:
    """Parse SDPA sparse format back into an SdpProblem.

    A trailing diagonal block whose entries all come in (+v at i, -v at
    f+i) pairs is folded back into free variables; other diagonal blocks
    are expanded into 1x1 PSD blocks.
    """
    raw = [ln.split("//")[0].strip() for ln in text.splitlines()]
    rows = [ln for ln in raw if ln and not ln.startswith(("*", '"'))]
    if len(rows) < 4:
        raise ValueError("SDPA file too short")
    m = int(rows[0].split()[0])
    nblocks = int(rows[1].split()[0])
    sizes = [int(tok) for tok in rows[2].replace(",", " ").replace("(", " ").replace(")", " ").split()]
    if len(sizes) != nblocks:
        raise ValueError("block size line does not match block count")
    b = np.array([float(t) for t in rows[3].replace(",", " ").split()], dtype=float)
    if b.shape != (m,):
        raise ValueError("rhs vector length does not match constraint count")

    entries = []  # (k, blk, i, j, v) 0-based blk
    for ln in rows[4:]:
        toks = ln.split()
        if len(toks) != 5:
            raise ValueError(f"bad entry line: {ln!r}")
        k, blk, i, j = int(toks[0]), int(toks[1]) - 1, int(toks[2]) - 1, int(toks[3]) - 1
        entries.append((k, blk, i, j, float(toks[4])))

    # Try to fold the final diagonal block into free variables.
    free_from_block = None
    if sizes and sizes[-1] < 0 and (-sizes[-1]) % 2 == 0:
        f = -sizes[-1] // 2
        last = nblocks - 1
        paired: dict[tuple[int, int], float] = {}
        ok = True
        for (k, blk, i, j, v) in entries:
            if blk != last:
                continue
            if i != j:
                ok = False
                break
            paired[(k, i)] = paired.get((k, i), 0.0) + v
        if ok:
            for (k, i), v in paired.items():
                mirror = paired.get((k, i + f if i < f else i - f), None)
                if mirror is None or abs(mirror + v) > 1e-12 * max(1.0, abs(v)):
                    ok = False
                    break
        if ok and paired:
            free_from_block = (last, f)

    psd_sizes: list[int] = []
    block_map: list[list[int]] = []  # original block -> list of new PSD block ids (diag expansion)
    for blk, n in enumerate(sizes):
        if free_from_block and blk == free_from_block[0]:
            block_map.append([])
            continue
        if n > 0:
            block_map.append([len(psd_sizes)])
            psd_sizes.append(n)
        else:
            ids = []
            for _ in range(-n):
                ids.append(len(psd_sizes))
                psd_sizes.append(1)
            block_map.append(ids)

    nfree = free_from_block[1] if free_from_block else 0
    Asv = [np.zeros((m, n * (n + 1) // 2)) for n in psd_sizes]
    Csv = [np.zeros(n * (n + 1) // 2) for n in psd_sizes]
    F = np.zeros((m, nfree))
    cf = np.zeros(nfree)

    def svec_index(n: int, i: int, j: int) -> int:
        # Row-major upper triangle position of (i, j), i <= j.
        return i * n - i * (i - 1) // 2 + (j - i)

    for (k, blk, i, j, v) in entries:
        if free_from_block and blk == free_from_block[0]:
            f = free_from_block[1]
            if i >= f:
                continue  # mirror entry
            if k == 0:
                cf[i] += v
            else:
                F[k - 1, i] += v
            continue
        ids = block_map[blk]
        if sizes[blk] > 0:
            nb = sizes[blk]
            tgt = ids[0]
            val = v if i == j else v * math.sqrt(2.0)
            pos = svec_index(nb, min(i, j), max(i, j))
            if k == 0:
                Csv[tgt][pos] += val
            else:
                Asv[tgt][k - 1, pos] += val
        else:
            if i != j:
                raise ValueError("off-diagonal entry in a diagonal block")
            tgt = ids[i]
            if k == 0:
                Csv[tgt][0] += v
            else:
                Asv[tgt][k - 1, 0] += v

    return SdpProblem(block_dims=psd_sizes, Asv=Asv, Csv=Csv, F=F, cf=cf, b=b)


# ---------------------------------------------------------------------------
# Solution files
# ---------------------------------------------------------------------------

def export_solution(sol: SdpSolution, prob: SdpProblem) -> str:
    """Serialize a solution: y line, [u line,] X blocks, Z blocks."""
    lines = [" ".join(_fmt(v) for v in sol.y)]
    if prob.num_free:
        lines.append(" ".join(_fmt(v) for v in sol.u))
    for M in sol.X:
        for row in M:
            lines.append(" ".join(_fmt(v) for v in row))
    for M in sol.Z:
        for row in M:
            lines.append(" ".join(_fmt(v) for v in row))
    return "\n".join(lines) + "\n"


def import_sdpa_solution(text: str, prob: SdpProblem, gap_tol: float = 1e-8,
                         feas_tol: float = 1e-8) -> SdpSolution:
    """Parse a solution file and re-verify it against the problem.

    The status is derived from residual checks; the file's own claims
    are never trusted.
    """
    lines = text.splitlines()

    def floats(line_no: int, expect: int) -> np.ndarray:
        if line_no >= len(lines):
            raise MalformedResultError("unexpected end of file", line_no + 1)
        try:
            vals = np.array([float(t) for t in lines[line_no].split()], dtype=float)
        except ValueError:
            raise MalformedResultError("unparseable number", line_no + 1) from None
        if vals.shape != (expect,):
            raise MalformedResultError(
                f"expected {expect} values, found {vals.size}", line_no + 1)
        return vals

    ln = 0
    y = floats(ln, prob.num_constraints)
    ln += 1
    if prob.num_free:
        u = floats(ln, prob.num_free)
        ln += 1
    else:
        u = np.zeros(0)

    def read_block(n: int) -> np.ndarray:
        nonlocal ln
        M = np.zeros((n, n))
        for i in range(n):
            M[i] = floats(ln, n)
            ln += 1
        return 0.5 * (M + M.T)

    X = [read_block(n) for n in prob.block_dims]
    Z = [read_block(n) for n in prob.block_dims]

    pobj = sum(float(prob.Csv[bi] @ svec(X[bi])) for bi in range(len(prob.block_dims)))
    pobj += float(prob.cf @ u)
    dobj = float(prob.b @ y)
    sol = SdpSolution(
        X=X, y=y, Z=Z, u=u, status=STATUS_OPTIMAL,
        duality_gap=abs(pobj - dobj), iterations=0,
        primal_objective=pobj, dual_objective=dobj,
        primal_residual=0.0, dual_residual=0.0,
    )
    res = kkt_residuals(prob, sol)
    sol.primal_residual = res["primal"]
    sol.dual_residual = res["dual"]
    scale = 1.0 + float(np.abs(prob.b).max(initial=0.0))
    ok = (
        res["primal"] <= feas_tol * scale
        and res["dual"] <= feas_tol * scale
        and res["gap"] <= gap_tol * (1.0 + abs(pobj) + abs(dobj))
        and res["min_eig_X"] >= -feas_tol
        and res["min_eig_Z"] >= -feas_tol
    )
    sol.status = STATUS_OPTIMAL if ok else STATUS_NUMERICAL
    return sol
