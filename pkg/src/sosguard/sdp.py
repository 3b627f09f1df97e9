"""Embedded semidefinite programming solver.

Solves small dense block-diagonal SDPs in standard primal form

    min  sum_b <C_b, X_b> + cf'u
    s.t. sum_b <A_kb, X_b> + (F u)_k = b_k,   X_b >= 0,  u free,

with a primal-dual interior-point method on the homogeneous self-dual
embedding (Nesterov-Todd scaling, Mehrotra predictor-corrector).  The
embedding lets the solver distinguish infeasibility certificates from
plain numerical failure, which the alternating search upstream relies on.

Sized for dense blocks up to ~100x100 and ~2000 equality constraints;
anything larger should be exported in SDPA form for an external solver.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg as sla

STATUS_OPTIMAL = "optimal"
STATUS_PINFEAS = "infeasible-primal"
STATUS_DINFEAS = "infeasible-dual"
STATUS_MAXITER = "max-iters"
STATUS_NUMERICAL = "numerical-failure"


def svec(M: np.ndarray) -> np.ndarray:
    """Symmetric vectorization with sqrt(2)-scaled off-diagonals."""
    n = M.shape[0]
    iu = np.triu_indices(n)
    out = M[iu].astype(float).copy()
    out[iu[0] != iu[1]] *= math.sqrt(2.0)
    return out


def smat(v: np.ndarray, n: int) -> np.ndarray:
    M = np.zeros((n, n))
    iu = np.triu_indices(n)
    vals = np.asarray(v, dtype=float).copy()
    off = iu[0] != iu[1]
    vals[off] /= math.sqrt(2.0)
    M[iu] = vals
    M.T[iu] = vals
    return M


@dataclass
class SdpProblem:
    """Block-diagonal standard-form SDP with optional free scalar variables."""

    block_dims: list[int]
    Asv: list[np.ndarray]     # per block: (m, n_b*(n_b+1)/2) constraint rows
    Csv: list[np.ndarray]     # per block objective, svec form
    F: np.ndarray             # (m, n_free)
    cf: np.ndarray            # (n_free,)
    b: np.ndarray             # (m,)

    @property
    def num_constraints(self) -> int:
        return len(self.b)

    @property
    def num_free(self) -> int:
        return int(self.F.shape[1])

    def constraint_matrix(self, k: int, blk: int) -> np.ndarray:
        return smat(self.Asv[blk][k], self.block_dims[blk])

    def objective_matrix(self, blk: int) -> np.ndarray:
        return smat(self.Csv[blk], self.block_dims[blk])

    def validate(self) -> None:
        if not self.block_dims:
            raise ValueError("problem has no PSD blocks")
        m = self.num_constraints
        for blk, n in enumerate(self.block_dims):
            sd = n * (n + 1) // 2
            if self.Asv[blk].shape != (m, sd):
                raise ValueError(f"block {blk} constraint data has wrong shape")
            if self.Csv[blk].shape != (sd,):
                raise ValueError(f"block {blk} objective data has wrong shape")
        if self.F.shape != (m, self.num_free):
            raise ValueError("free-variable data has wrong shape")
        if not np.all(np.isfinite(self.b)):
            raise ValueError("b is not finite")


@dataclass
class SdpSolution:
    X: list[np.ndarray]
    y: np.ndarray
    Z: list[np.ndarray]
    u: np.ndarray
    status: str
    duality_gap: float
    iterations: int
    primal_objective: float
    dual_objective: float
    primal_residual: float
    dual_residual: float
    iterate_log: list[dict] = field(default_factory=list)

    @property
    def feasible(self) -> bool:
        return self.status == STATUS_OPTIMAL


def _nt_scaling(X: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """The unique W > 0 with W Z W = X."""
    Lx = np.linalg.cholesky(X)
    M = Lx.T @ Z @ Lx
    lam, U = np.linalg.eigh(0.5 * (M + M.T))
    lam = np.maximum(lam, 1e-300)
    Minvhalf = (U * (lam ** -0.5)) @ U.T
    W = Lx @ Minvhalf @ Lx.T
    return 0.5 * (W + W.T)


def _max_step(X: np.ndarray, dX: np.ndarray) -> float:
    """Largest alpha with X + alpha*dX >= 0 (X > 0 assumed)."""
    L = np.linalg.cholesky(X)
    Y = sla.solve_triangular(L, dX, lower=True)
    Y = sla.solve_triangular(L, Y.T, lower=True).T
    lam_min = float(np.linalg.eigvalsh(0.5 * (Y + Y.T))[0])
    if lam_min >= -1e-14:
        return np.inf
    return -1.0 / lam_min


def solve_sdp(prob: SdpProblem, max_iters: int = 100, gap_tol: float = 1e-8,
              feas_tol: float = 1e-8, log_iterates: bool = False) -> SdpSolution:
    """Solve the SDP; never raises on numerical trouble, reports a status."""
    prob.validate()
    dims = prob.block_dims
    nblocks = len(dims)
    m = prob.num_constraints
    nfree = prob.num_free
    Ntot = sum(dims)

    Asv = [np.asarray(a, dtype=float) for a in prob.Asv]
    Csv = [np.asarray(c, dtype=float) for c in prob.Csv]
    Cmat = [smat(Csv[b], dims[b]) for b in range(nblocks)]
    F = np.asarray(prob.F, dtype=float).reshape(m, nfree)
    cf = np.asarray(prob.cf, dtype=float).reshape(nfree)
    bvec = np.asarray(prob.b, dtype=float).reshape(m)

    # Per-block stacked constraint matrices and the rows that touch them.
    mats: list[np.ndarray] = []
    touch: list[np.ndarray] = []
    iu_idx = [np.triu_indices(n) for n in dims]
    sqrt2 = math.sqrt(2.0)
    for bi in range(nblocks):
        nz = np.where(np.abs(Asv[bi]).sum(axis=1) > 0)[0]
        touch.append(nz)
        n = dims[bi]
        stack = np.zeros((len(nz), n, n))
        for r, k in enumerate(nz):
            stack[r] = smat(Asv[bi][k], n)
        mats.append(stack)

    def svec_b(bi: int, M: np.ndarray) -> np.ndarray:
        i, j = iu_idx[bi]
        out = M[i, j].copy()
        out[i != j] *= sqrt2
        return out

    # Iterates.
    X = [np.eye(n) for n in dims]
    Z = [np.eye(n) for n in dims]
    y = np.zeros(m)
    u = np.zeros(nfree)
    tau, kappa = 1.0, 1.0

    def apply_A(Xs) -> np.ndarray:
        out = np.zeros(m)
        for bi in range(nblocks):
            if len(touch[bi]):
                out[touch[bi]] += np.einsum("kij,ij->k", mats[bi], Xs[bi])
        return out

    def apply_AT(yv) -> list[np.ndarray]:
        out = []
        for bi in range(nblocks):
            if len(touch[bi]):
                out.append(np.einsum("k,kij->ij", yv[touch[bi]], mats[bi]))
            else:
                out.append(np.zeros((dims[bi], dims[bi])))
        return out

    def inner_C(Xs) -> float:
        return sum(float(np.tensordot(Cmat[bi], Xs[bi])) for bi in range(nblocks))

    log: list[dict] = []
    status = STATUS_MAXITER
    it = 0
    bnorm = 1.0 + float(np.abs(bvec).max(initial=0.0))
    cnorm = 1.0 + max((float(np.abs(M).max(initial=0.0)) for M in Cmat), default=0.0)
    cfnorm = 1.0 + float(np.abs(cf).max(initial=0.0))
    mu0 = (sum(float(np.trace(Xb @ Zb)) for Xb, Zb in zip(X, Z)) + tau * kappa) / (Ntot + 1)

    def scaled_metrics():
        xh = [Xb / tau for Xb in X]
        uh = u / tau
        yh = y / tau
        zh = [Zb / tau for Zb in Z]
        pobj = inner_C(xh) + float(cf @ uh)
        dobj = float(bvec @ yh)
        pres = float(np.abs(apply_A(xh) + F @ uh - bvec).max(initial=0.0)) / bnorm
        ATy = apply_AT(yh)
        dres = max(
            (float(np.abs(ATy[bi] + zh[bi] - Cmat[bi]).max(initial=0.0)) for bi in range(nblocks)),
            default=0.0,
        ) / cnorm
        if nfree:
            dres = max(dres, float(np.abs(F.T @ yh - cf).max(initial=0.0)) / cfnorm)
        gap = abs(pobj - dobj) / (1.0 + abs(pobj) + abs(dobj))
        return xh, uh, yh, zh, pobj, dobj, pres, dres, gap

    final = None
    for it in range(1, max_iters + 1):
        # Residuals of the embedding.
        rp = bvec * tau - apply_A(X) - F @ u
        ATy = apply_AT(y)
        Rd = [Cmat[bi] * tau - ATy[bi] - Z[bi] for bi in range(nblocks)]
        rf = cf * tau - F.T @ y
        rg = kappa + inner_C(X) + float(cf @ u) - float(bvec @ y)
        mu = (sum(float(np.trace(X[bi] @ Z[bi])) for bi in range(nblocks)) + tau * kappa) / (Ntot + 1)

        if not np.isfinite(mu) or tau <= 0 or kappa < 0:
            status = STATUS_NUMERICAL
            break

        xh, uh, yh, zh, pobj, dobj, pres, dres, gap = scaled_metrics()
        if log_iterates:
            log.append({"iter": it - 1, "mu": mu, "pobj": pobj, "dobj": dobj,
                        "pres": pres, "dres": dres, "gap": gap,
                        "tau": tau, "kappa": kappa})
        if pres <= feas_tol and dres <= feas_tol and gap <= gap_tol:
            status = STATUS_OPTIMAL
            final = (xh, uh, yh, zh, pobj, dobj, pres, dres, gap)
            break

        # Infeasibility detection: tau collapses while kappa stays alive.
        if tau <= 1e-10 * max(1.0, kappa) or (mu <= 1e-14 * mu0 and tau <= 1e-6 * kappa):
            by = float(bvec @ y)
            cx = inner_C(X) + float(cf @ u)
            if by > feas_tol * max(1.0, float(np.abs(y).max(initial=0.0))):
                status = STATUS_PINFEAS
            elif cx < -feas_tol * max(1.0, _max_block_abs(X)):
                status = STATUS_DINFEAS
            else:
                status = STATUS_NUMERICAL
            break

        # Nesterov-Todd scalings.
        try:
            W = [_nt_scaling(X[bi], Z[bi]) for bi in range(nblocks)]
            Zinv = []
            for bi in range(nblocks):
                Lz = np.linalg.cholesky(Z[bi])
                Li = sla.solve_triangular(Lz, np.eye(dims[bi]), lower=True)
                Zinv.append(Li.T @ Li)
        except np.linalg.LinAlgError:
            status = STATUS_NUMERICAL
            break

        # Schur complement system (shared by predictor and corrector).
        H = np.zeros((m, m))
        AWc = np.zeros(m)
        cWc = 0.0
        WAW = []
        for bi in range(nblocks):
            nz = touch[bi]
            if len(nz) == 0:
                WAW.append(None)
                wc = W[bi] @ Cmat[bi] @ W[bi]
                cWc += float(np.tensordot(Cmat[bi], wc))
                continue
            T = np.einsum("ij,kjl,lm->kim", W[bi], mats[bi], W[bi])
            i_idx, j_idx = iu_idx[bi]
            tsv = T[:, i_idx, j_idx]
            tsv[:, i_idx != j_idx] *= sqrt2
            asub = Asv[bi][nz]
            H[np.ix_(nz, nz)] += asub @ tsv.T
            WAW.append(T)
            wc = W[bi] @ Cmat[bi] @ W[bi]
            AWc[nz] += asub @ svec_b(bi, wc)
            cWc += float(np.tensordot(Cmat[bi], wc))
        H = 0.5 * (H + H.T)

        G = np.zeros((m + nfree + 1, m + nfree + 1))
        G[:m, :m] = H
        G[:m, m:m + nfree] = F
        G[:m, -1] = -(bvec + AWc)
        G[m:m + nfree, :m] = F.T
        G[m:m + nfree, -1] = -cf
        G[-1, :m] = bvec - AWc
        G[-1, m:m + nfree] = -cf
        G[-1, -1] = kappa / tau + cWc
        try:
            lu = sla.lu_factor(G)
        except (np.linalg.LinAlgError, ValueError):
            status = STATUS_NUMERICAL
            break

        def solve_direction(Rc, rtk, eta=1.0):
            rhs = np.zeros(m + nfree + 1)
            ArC = np.zeros(m)
            AWrd = np.zeros(m)
            cRc = 0.0
            cWrd = 0.0
            for bi in range(nblocks):
                nz = touch[bi]
                wrd = W[bi] @ Rd[bi] @ W[bi]
                if len(nz):
                    ArC[nz] += Asv[bi][nz] @ svec_b(bi, Rc[bi])
                    AWrd[nz] += Asv[bi][nz] @ svec_b(bi, wrd)
                cRc += float(np.tensordot(Cmat[bi], Rc[bi]))
                cWrd += float(np.tensordot(Cmat[bi], wrd))
            rhs[:m] = eta * rp - ArC + AWrd
            rhs[m:m + nfree] = eta * rf
            rhs[-1] = rtk / tau + eta * rg + cRc - cWrd
            sol = sla.lu_solve(lu, rhs)
            dy = sol[:m]
            du = sol[m:m + nfree]
            dtau = float(sol[-1])
            ATdy = apply_AT(dy)
            dZ = [Rd[bi] + Cmat[bi] * dtau - ATdy[bi] for bi in range(nblocks)]
            dX = [Rc[bi] - W[bi] @ dZ[bi] @ W[bi] for bi in range(nblocks)]
            dX = [0.5 * (D + D.T) for D in dX]
            dZ = [0.5 * (D + D.T) for D in dZ]
            dkappa = float(bvec @ dy) - inner_C(dX) - float(cf @ du) - eta * rg
            return dX, du, dy, dZ, dtau, dkappa

        def step_bound(dX, dZ, dtau, dkappa):
            alpha = np.inf
            for bi in range(nblocks):
                alpha = min(alpha, _max_step(X[bi], dX[bi]), _max_step(Z[bi], dZ[bi]))
            if dtau < 0:
                alpha = min(alpha, -tau / dtau)
            if dkappa < 0:
                alpha = min(alpha, -kappa / dkappa)
            return alpha

        # Predictor (affine scaling direction).
        Rc_aff = [-X[bi] for bi in range(nblocks)]
        try:
            aff = solve_direction(Rc_aff, -tau * kappa)
        except ValueError:
            status = STATUS_NUMERICAL
            break
        dXa, dua, dya, dZa, dtaua, dkappaa = aff
        alpha_aff = min(1.0, step_bound(dXa, dZa, dtaua, dkappaa))
        if not np.isfinite(alpha_aff):
            alpha_aff = 1.0

        gap_aff = (
            sum(float(np.trace((X[bi] + alpha_aff * dXa[bi]) @ (Z[bi] + alpha_aff * dZa[bi])))
                for bi in range(nblocks))
            + (tau + alpha_aff * dtaua) * (kappa + alpha_aff * dkappaa)
        ) / (Ntot + 1)
        sigma = min(1.0, max(0.0, gap_aff / mu) ** 3)

        # Corrector with Mehrotra second-order term.
        Rc = [
            sigma * mu * Zinv[bi] - X[bi]
            - 0.5 * (dXa[bi] @ dZa[bi] @ Zinv[bi] + Zinv[bi] @ dZa[bi] @ dXa[bi])
            for bi in range(nblocks)
        ]
        rtk = sigma * mu - tau * kappa - dtaua * dkappaa
        dX, du, dy, dZ, dtau, dkappa = solve_direction(Rc, rtk)
        alpha = min(1.0, 0.99 * step_bound(dX, dZ, dtau, dkappa))
        if not np.isfinite(alpha) or alpha <= 1e-10:
            status = STATUS_NUMERICAL
            break

        for bi in range(nblocks):
            X[bi] = 0.5 * ((X[bi] + alpha * dX[bi]) + (X[bi] + alpha * dX[bi]).T)
            Z[bi] = 0.5 * ((Z[bi] + alpha * dZ[bi]) + (Z[bi] + alpha * dZ[bi]).T)
        y = y + alpha * dy
        u = u + alpha * du
        tau += alpha * dtau
        kappa += alpha * dkappa

    if final is None:
        xh, uh, yh, zh, pobj, dobj, pres, dres, gap = scaled_metrics()
        final = (xh, uh, yh, zh, pobj, dobj, pres, dres, gap)
    xh, uh, yh, zh, pobj, dobj, pres, dres, gap = final
    return SdpSolution(
        X=xh, y=yh, Z=zh, u=uh, status=status,
        duality_gap=abs(pobj - dobj), iterations=it,
        primal_objective=pobj, dual_objective=dobj,
        primal_residual=pres, dual_residual=dres,
        iterate_log=log,
    )


def _max_block_abs(Ms: Sequence[np.ndarray]) -> float:
    return max((float(np.abs(M).max(initial=0.0)) for M in Ms), default=0.0)


def kkt_residuals(prob: SdpProblem, sol: SdpSolution) -> dict:
    """Independent KKT residuals of a solution, in the scaled metrics."""
    m = prob.num_constraints
    ax = np.zeros(m)
    for bi in range(len(prob.block_dims)):
        n = prob.block_dims[bi]
        iu = np.triu_indices(n)
        xs = sol.X[bi][iu].copy()
        xs[iu[0] != iu[1]] *= math.sqrt(2.0)
        ax += prob.Asv[bi] @ xs
    pres = float(np.abs(ax + prob.F @ sol.u - prob.b).max(initial=0.0))
    dres = 0.0
    for bi in range(len(prob.block_dims)):
        n = prob.block_dims[bi]
        ATy = np.zeros((n, n))
        for k in range(m):
            if sol.y[k] != 0.0:
                ATy += sol.y[k] * smat(prob.Asv[bi][k], n)
        dres = max(dres, float(np.abs(ATy + sol.Z[bi] - smat(prob.Csv[bi], n)).max(initial=0.0)))
    if prob.num_free:
        dres = max(dres, float(np.abs(prob.F.T @ sol.y - prob.cf).max(initial=0.0)))
    gap = abs(sol.primal_objective - sol.dual_objective)
    min_eig_X = min((float(np.linalg.eigvalsh(Xb)[0]) for Xb in sol.X), default=0.0)
    min_eig_Z = min((float(np.linalg.eigvalsh(Zb)[0]) for Zb in sol.Z), default=0.0)
    return {"primal": pres, "dual": dres, "gap": gap,
            "min_eig_X": min_eig_X, "min_eig_Z": min_eig_Z}
