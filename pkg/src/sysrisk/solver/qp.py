"""Dense convex QP engine.

Solves ``min 1/2 x'Px + q'x  s.t.  l <= Ax <= u`` by an operator-splitting
(ADMM) iteration with over-relaxation on a once-equilibrated problem, followed
by active-set polishing: the active constraints guessed from the splitting
iterate define an equality-constrained KKT system whose solution is accepted
only if it passes a full KKT check.  A :class:`QPWorkspace` keeps the
factorizations so that repeated solves with a new linear term (the situation
in the distributed method) are cheap, and it can start from the previous
active set, which usually makes a new solve a single linear solve.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.optimize import lsq_linear

INF = np.inf


class QPError(RuntimeError):
    pass


class QPInfeasibleError(QPError):
    """Primal infeasibility, with a certificate ``y`` (``A'y = 0``, ``u'y+ + l'y- < 0``)."""

    def __init__(self, message: str, certificate: np.ndarray):
        super().__init__(message)
        self.certificate = certificate


class QPUnboundedError(QPError):
    """Dual infeasibility: a recession direction with negative cost."""

    def __init__(self, message: str, direction: np.ndarray):
        super().__init__(message)
        self.direction = direction


class QPMaxIterError(QPError):
    def __init__(self, message: str, result: "QPResult"):
        super().__init__(message)
        self.result = result


@dataclass
class QPResult:
    x: np.ndarray
    y: np.ndarray
    status: str
    iterations: int
    kkt: float
    polished: bool
    lower: np.ndarray = field(repr=False)
    upper: np.ndarray = field(repr=False)

    @property
    def objective_terms(self):
        return self.x, self.y


def kkt_residual(P, q, A, l, u, x, y) -> float:
    """Largest violation among primal feasibility, stationarity, multiplier sign
    and complementarity (inactive rows must carry no multiplier)."""
    Ax = A @ x
    prim = np.max(np.maximum(Ax - u, 0.0) + np.maximum(l - Ax, 0.0), initial=0.0)
    dual = np.max(np.abs(P @ x + q + A.T @ y), initial=0.0)
    pos, neg = np.maximum(y, 0.0), np.maximum(-y, 0.0)
    # a multiplier on a side without a bound is a pure sign error
    fu, fl = np.isfinite(u), np.isfinite(l)
    with np.errstate(invalid="ignore"):
        gap_u = np.where(fu, u - Ax, 1.0)
        gap_l = np.where(fl, Ax - l, 1.0)
    comp_u = np.where(fu, pos * gap_u, pos)
    comp_l = np.where(fl, neg * gap_l, neg)
    comp = np.max(np.abs(np.concatenate([comp_u, comp_l])), initial=0.0)
    return float(max(prim, dual, comp))


def _ruiz(P: np.ndarray, A: np.ndarray, passes: int = 15):
    n, m = P.shape[0], A.shape[0]
    D = np.ones(n)
    E = np.ones(m)
    Ps, As = P.copy(), A.copy()
    for _ in range(passes):
        col = np.maximum(np.abs(Ps).max(axis=0, initial=0.0), np.abs(As).max(axis=0, initial=0.0))
        row = np.abs(As).max(axis=1, initial=0.0)
        dcol = 1.0 / np.sqrt(np.where(col < 1e-8, 1.0, col))
        drow = 1.0 / np.sqrt(np.where(row < 1e-8, 1.0, row))
        Ps = dcol[:, None] * Ps * dcol[None, :]
        As = drow[:, None] * As * dcol[None, :]
        D *= dcol
        E *= drow
    return D, E, Ps, As


class QPWorkspace:
    """Factorized QP over fixed ``(P, A, l, u)``; the linear term varies per solve."""

    def __init__(
        self,
        P,
        A,
        l,
        u,
        rho: float = 0.1,
        sigma: float = 1e-6,
        alpha: float = 1.6,
        delta: float = 1e-9,
        cache_size: int = 64,
    ):
        self.P = np.asarray(P, dtype=float)
        self.A = np.asarray(A, dtype=float).reshape(-1, self.P.shape[0])
        self.l = np.asarray(l, dtype=float).copy()
        self.u = np.asarray(u, dtype=float).copy()
        if np.any(self.l > self.u):
            bad = int(np.argmax(self.l > self.u))
            cert = np.zeros(self.l.size)
            cert[bad] = 1.0
            raise QPInfeasibleError(f"row {bad} has lower bound above upper bound", cert)
        self.n, self.m = self.P.shape[0], self.A.shape[0]
        self.eq = np.isfinite(self.l) & (self.l == self.u)
        self.alpha = alpha
        self.sigma = sigma
        self.delta = delta

        self.D, self.E, self.Ps, self.As = _ruiz(self.P, self.A)
        self.ls, self.us = self.E * self.l, self.E * self.u
        self._free = ~np.isfinite(self.ls) & ~np.isfinite(self.us)
        self._set_rho(rho)

        self._cache: OrderedDict = OrderedDict()
        self._cache_size = cache_size
        self._state = None
        self.last_active = None
        self.stats = {"solves": 0, "warm_hits": 0, "admm_iters": 0}

    def _set_rho(self, rho: float) -> None:
        self.rho = float(np.clip(rho, 1e-6, 1e6))
        self.R = np.where(self.eq, self.rho * 1e3, self.rho)
        self.R[self._free] = 1e-6
        M = self.Ps + self.sigma * np.eye(self.n) + self.As.T @ (self.R[:, None] * self.As)
        self._chol = sla.cho_factor(M, lower=True, check_finite=False)

    # -- polishing --------------------------------------------------------

    def _kkt_factor(self, rows: np.ndarray) -> dict:
        key = rows.tobytes()
        hit = self._cache.get(key)
        if hit is not None:
            self._cache.move_to_end(key)
            return hit
        Aa = self.A[rows]
        k = Aa.shape[0]
        K = np.block([
            [self.P + self.delta * np.eye(self.n), Aa.T],
            [Aa, -self.delta * np.eye(k)],
        ])
        try:
            lu = sla.lu_factor(K, check_finite=False)
        except (sla.LinAlgError, ValueError):
            lu = None
        entry = {"rows": rows, "Aa": Aa, "lu": lu, "pinv": None}
        self._cache[key] = entry
        if len(self._cache) > self._cache_size:
            self._cache.popitem(last=False)
        return entry

    def _kkt_pinv(self, entry: dict) -> np.ndarray:
        if entry["pinv"] is None:
            Aa = entry["Aa"]
            K0 = np.block([[self.P, Aa.T], [Aa, np.zeros((Aa.shape[0], Aa.shape[0]))]])
            entry["pinv"] = np.linalg.pinv(K0, rcond=1e-11)
        return entry["pinv"]

    def _finish(self, q, x, y, rows, Aa, lo_only, up_only, tol):
        """KKT check of a polished pair, refitting multipliers if only their signs fail."""
        sign_err = max(np.max(y[lo_only], initial=0.0), np.max(-y[up_only], initial=0.0))
        kkt = max(kkt_residual(self.P, q, self.A, self.l, self.u, x, y), sign_err)
        if kkt > tol and sign_err > tol and rows.size:
            # dependent active rows leave the multipliers non-unique; pick
            # ones with the right signs by bounded least squares
            lo = np.where(up_only[rows], 0.0, -np.inf)
            hi = np.where(lo_only[rows], 0.0, np.inf)
            fit = lsq_linear(Aa.T, -(self.P @ x + q), bounds=(lo, hi), tol=1e-14,
                             lsmr_tol="auto", method="bvls")
            y = np.zeros(self.m)
            y[rows] = fit.x
            kkt = kkt_residual(self.P, q, self.A, self.l, self.u, x, y)
        return (x, y, kkt) if kkt <= tol else None

    def _polish(self, q, lower, upper, tol, x_ref=None):
        """Solve the KKT system of a guessed active set.

        The regularized factorization handles the usual case.  When the
        minimizer is not unique (a face of the feasible set is optimal), the
        minimum-norm correction of the reference point ``x_ref`` within the
        active set is tried instead, which stays next to the splitting iterate.
        """
        rows = np.flatnonzero(lower | upper | self.eq)
        entry = self._kkt_factor(rows)
        Aa, lu = entry["Aa"], entry["lu"]
        target = np.where(upper[rows] & ~self.eq[rows], self.u[rows], self.l[rows])
        rhs = np.concatenate([-q, target])
        if not np.all(np.isfinite(rhs)):
            return None
        n = self.n
        lo_only = lower & ~self.eq
        up_only = upper & ~self.eq
        if lu is not None:
            sol = sla.lu_solve(lu, rhs, check_finite=False)
            for _ in range(12):
                xs, ys = sol[:n], sol[n:]
                res = rhs - np.concatenate([self.P @ xs + Aa.T @ ys, Aa @ xs])
                if np.max(np.abs(res), initial=0.0) < 1e-14 * (1.0 + np.max(np.abs(rhs))):
                    break
                sol = sol + sla.lu_solve(lu, res, check_finite=False)
            if np.all(np.isfinite(sol)):
                y = np.zeros(self.m)
                y[rows] = sol[n:]
                out = self._finish(q, sol[:n], y, rows, Aa, lo_only, up_only, tol)
                if out is not None:
                    return out
        if x_ref is None:
            return None
        x_ref = np.asarray(x_ref, dtype=float)
        res = np.concatenate([-q - self.P @ x_ref, target - Aa @ x_ref])
        sol = self._kkt_pinv(entry) @ res
        y = np.zeros(self.m)
        y[rows] = sol[n:]
        return self._finish(q, x_ref + sol[:n], y, rows, Aa, lo_only, up_only, tol)

    # -- splitting iteration ---------------------------------------------

    def _residuals(self, x, z, y, q):
        # measured in the original (unscaled) space
        xo = self.D * x
        yo = self.E * y
        Ax = self.A @ xo
        zo = z / self.E
        prim = np.max(np.abs(Ax - zo), initial=0.0)
        Px = self.P @ xo
        Aty = self.A.T @ yo
        dual = np.max(np.abs(Px + q + Aty), initial=0.0)
        sp = max(np.max(np.abs(Ax), initial=0.0), np.max(np.abs(zo), initial=0.0))
        sd = max(np.max(np.abs(Px), initial=0.0), np.max(np.abs(Aty), initial=0.0),
                 np.max(np.abs(q), initial=0.0))
        return prim, dual, sp, sd

    def solve(
        self,
        q,
        x0=None,
        y0=None,
        tol: float = 1e-8,
        max_iter: int = 20000,
        warm_active: bool = True,
        polish_every: int = 25,
    ) -> QPResult:
        q = np.asarray(q, dtype=float)
        self.stats["solves"] += 1
        if warm_active and self.last_active is not None:
            lower, upper = self.last_active
            x_ref = None if self._state is None else self._state[0]
            pol = self._polish(q, lower, upper, tol, x_ref)
            if pol is not None:
                self.stats["warm_hits"] += 1
                x, y, kkt = pol
                self._state = (x, y)
                return QPResult(x, y, "solved", 0, kkt, True, lower, upper)

        D, E = self.D, self.E
        qs = D * q
        if x0 is None and self._state is not None:
            x0, y0 = self._state
        x = np.zeros(self.n) if x0 is None else np.asarray(x0, dtype=float) / D
        y = np.zeros(self.m) if y0 is None else np.asarray(y0, dtype=float) / E
        z = np.clip(self.As @ x, self.ls, self.us)
        a = self.alpha
        As, AsT = self.As, self.As.T
        R, chol = self.R, self._chol
        next_adapt = 50
        for k in range(1, max_iter + 1):
            rhs = self.sigma * x - qs + AsT @ (R * z - y)
            xt = sla.cho_solve(chol, rhs, check_finite=False)
            zt = As @ xt
            x_new = a * xt + (1.0 - a) * x
            zr = a * zt + (1.0 - a) * z
            z_new = np.clip(zr + y / R, self.ls, self.us)
            y_new = y + R * (zr - z_new)
            dy = y_new - y
            dx = x_new - x
            x, z, y = x_new, z_new, y_new
            if k % 10:
                continue
            prim, dual, sp, sd = self._residuals(x, z, y, q)
            if prim < 1e-3 * (1 + sp) and dual < 1e-3 * (1 + sd) and (k % polish_every == 0):
                xo, yo = D * x, E * y
                zo = z / E
                lower = (zo - self.l < -yo) & np.isfinite(self.l)
                upper = (self.u - zo < yo) & np.isfinite(self.u)
                pol = self._polish(q, lower, upper, tol, xo)
                if pol is not None:
                    self.stats["admm_iters"] += k
                    xp, yp, kkt = pol
                    self.last_active = (lower, upper)
                    self._state = (xp, yp)
                    return QPResult(xp, yp, "solved", k, kkt, True, lower, upper)
            if prim <= tol and dual <= tol:
                xo, yo = D * x, E * y
                kkt = kkt_residual(self.P, q, self.A, self.l, self.u, xo, yo)
                if kkt <= tol:
                    break
            self._check_certificates(dx, dy, q)
            if k == next_adapt:
                # rebalance primal and dual progress on a doubling schedule,
                # so that the iteration can settle between changes
                next_adapt *= 2
                ratio = np.sqrt((prim / (1e-30 + sp)) / (1e-30 + dual / (1e-30 + sd)))
                if ratio > 5.0 or ratio < 0.2:
                    self._set_rho(self.rho * ratio)
                    R, chol = self.R, self._chol
        self.stats["admm_iters"] += k
        xo, yo = D * x, E * y
        kkt = kkt_residual(self.P, q, self.A, self.l, self.u, xo, yo)
        zo = np.clip(self.A @ xo, self.l, self.u)
        lower = (zo - self.l < -yo) & np.isfinite(self.l)
        upper = (self.u - zo < yo) & np.isfinite(self.u)
        self._state = (xo, yo)
        status = "solved" if kkt <= tol else "max_iter"
        if status == "solved":
            self.last_active = (lower, upper)
        return QPResult(xo, yo, status, k, kkt, False, lower, upper)

    def _check_certificates(self, dx, dy, q, eps: float = 1e-9):
        # dx, dy are in the scaled space
        ndy = np.max(np.abs(dy), initial=0.0)
        if ndy > 1e-6:
            ydir = self.E * dy
            if np.max(np.abs(self.D * (self.As.T @ dy)), initial=0.0) <= eps * ndy:
                pos, neg = np.maximum(ydir, 0.0), np.minimum(ydir, 0.0)
                if not (np.any((pos > 0) & ~np.isfinite(self.u)) or np.any((neg < 0) & ~np.isfinite(self.l))):
                    val = np.dot(np.where(pos > 0, self.u, 0.0), pos) + np.dot(
                        np.where(neg < 0, self.l, 0.0), neg
                    )
                    if val < -eps * np.max(np.abs(ydir)):
                        raise QPInfeasibleError("quadratic program is infeasible", ydir)
        ndx = np.max(np.abs(dx), initial=0.0)
        if ndx > 1e-6:
            xdir = self.D * dx
            scale = np.max(np.abs(xdir))
            if (
                np.max(np.abs(self.P @ xdir), initial=0.0) <= eps * scale
                and q @ xdir < -eps * scale
            ):
                Ad = self.A @ xdir
                ok_u = np.where(np.isfinite(self.u), Ad <= eps * scale, True)
                ok_l = np.where(np.isfinite(self.l), Ad >= -eps * scale, True)
                if np.all(ok_u & ok_l):
                    raise QPUnboundedError("quadratic program is unbounded", xdir)


def solve_convex_qp(
    P,
    q,
    A_eq=None,
    b_eq=None,
    A_ub=None,
    b_ub=None,
    lb=None,
    ub=None,
    x0=None,
    tol: float = 1e-8,
    max_iter: int = 50000,
) -> QPResult:
    """Minimise ``1/2 x'Px + q'x`` over equality, inequality and box constraints.

    Multipliers in the result follow the stacked order
    ``[A_eq; A_ub; bounded coordinates]`` and the sign convention
    ``Px + q + A'y = 0``.

    Raises
    ------
    QPInfeasibleError
        Constraints admit no point.
    QPUnboundedError
        The objective decreases without bound.
    QPMaxIterError
        The KKT tolerance was not met within ``max_iter`` iterations.
    """
    P = np.atleast_2d(np.asarray(P, dtype=float))
    n = P.shape[0]
    A, l, u = stack_constraints(n, A_eq, b_eq, A_ub, b_ub, lb, ub)
    ws = QPWorkspace(P, A, l, u)
    res = ws.solve(np.asarray(q, dtype=float), x0=x0, tol=tol, max_iter=max_iter, warm_active=False)
    if res.status != "solved":
        raise QPMaxIterError(f"KKT residual {res.kkt:.3e} after {res.iterations} iterations", res)
    return res


def stack_constraints(n, A_eq=None, b_eq=None, A_ub=None, b_ub=None, lb=None, ub=None):
    """Convert equality/inequality/box data to the ``l <= Ax <= u`` form."""
    blocks, lows, ups = [], [], []
    if A_eq is not None and np.size(A_eq):
        A_eq = np.asarray(A_eq, dtype=float).reshape(-1, n)
        b_eq = np.asarray(b_eq, dtype=float).reshape(-1)
        blocks.append(A_eq)
        lows.append(b_eq)
        ups.append(b_eq)
    if A_ub is not None and np.size(A_ub):
        A_ub = np.asarray(A_ub, dtype=float).reshape(-1, n)
        b_ub = np.asarray(b_ub, dtype=float).reshape(-1)
        blocks.append(A_ub)
        lows.append(np.full(b_ub.size, -INF))
        ups.append(b_ub)
    lb = np.full(n, -INF) if lb is None else np.broadcast_to(np.asarray(lb, dtype=float), (n,))
    ub = np.full(n, INF) if ub is None else np.broadcast_to(np.asarray(ub, dtype=float), (n,))
    boxed = np.flatnonzero(np.isfinite(lb) | np.isfinite(ub))
    if boxed.size:
        blocks.append(np.eye(n)[boxed])
        lows.append(lb[boxed])
        ups.append(ub[boxed])
    if not blocks:
        return np.zeros((0, n)), np.zeros(0), np.zeros(0)
    return np.vstack(blocks), np.concatenate(lows), np.concatenate(ups)
