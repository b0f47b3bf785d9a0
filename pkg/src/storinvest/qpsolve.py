"""Operator-splitting QP solver with active-set polishing.

Solves ``min 1/2 x'Px + q'x  s.t.  l <= Ax <= u`` with the ADMM splitting
(x-update through one regularized linear system, z-update by projection onto
the box ``[l, u]``), Ruiz equilibration, over-relaxation and an adaptive
step size.  Once the iterates are moderately accurate, the active set read
off the duals is handed to a KKT solve with iterative refinement; the guess
is corrected (violated rows added, wrong-sign duals dropped) until the
polished point meets the requested tolerances.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

INF = np.inf
EQ_RHO_SCALE = 1e3
SCALE_CLIP = (1e-4, 1e4)


class SolveStatus(str, enum.Enum):
    SOLVED = "solved"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    MAX_ITERATIONS = "max_iterations"


class SolverError(RuntimeError):
    def __init__(self, message, status=None, context=None):
        super().__init__(message)
        self.status = status
        self.context = context

    def __reduce__(self):
        # keep status and context when crossing process boundaries
        return (type(self), (str(self), self.status, self.context))


@dataclass
class SolverSettings:
    """Tolerances and step parameters.

    ``eps_abs``/``eps_rel`` are the final (post-polish) tolerances on the
    unscaled primal and dual residuals.  ``polish_start`` is the relative
    ADMM accuracy at which the first polish attempt is made; after a failed
    attempt it tightens tenfold.
    """

    eps_abs: float = 1e-8
    eps_rel: float = 1e-8
    max_iter: int = 20000
    rho: float = 0.1
    rho_min: float = 1e-6
    rho_max: float = 1e6
    adaptive_rho: bool = True
    alpha: float = 1.6
    sigma: float = 1e-6
    polish: bool = True
    polish_start: float = 1e-3
    polish_rounds: int = 40
    polish_delta: float = 1e-7
    polish_refine: int = 50
    scaling_iter: int = 10
    check_every: int = 25
    eps_infeasible: float = 1e-6

    def __post_init__(self):
        if not (self.eps_abs > 0 and self.eps_rel > 0):
            raise ValueError("tolerances must be positive")
        if not 0 < self.alpha < 2:
            raise ValueError("relaxation parameter must lie in (0, 2)")
        if self.max_iter <= 0:
            raise ValueError("max_iter must be positive")
        if not 0 < self.rho_min <= self.rho <= self.rho_max:
            raise ValueError("rho must lie within [rho_min, rho_max]")


@dataclass
class Residuals:
    primal: float
    dual: float
    eps_primal: float
    eps_dual: float

    @property
    def ok(self) -> bool:
        return self.primal <= self.eps_primal and self.dual <= self.eps_dual


@dataclass
class BoxSolution:
    x: np.ndarray
    y: np.ndarray
    status: SolveStatus
    iterations: int
    residuals: Residuals
    polished: bool = False
    rho: float = 0.0
    certificate: np.ndarray | None = None


def _inf_norm(v) -> float:
    return float(np.max(np.abs(v))) if len(v) else 0.0


def _col_inf_norms(mat: sp.csc_matrix) -> np.ndarray:
    mat = sp.csc_matrix(mat)
    out = np.zeros(mat.shape[1])
    absd = np.abs(mat.data)
    nnz_cols = np.diff(mat.indptr) > 0
    out[nnz_cols] = np.maximum.reduceat(absd, mat.indptr[:-1][nnz_cols]) if absd.size else 0.0
    return out


def _row_inf_norms(mat) -> np.ndarray:
    return _col_inf_norms(sp.csc_matrix(mat.T))


def _safe_inv_sqrt(v):
    v = np.where(v < SCALE_CLIP[0], 1.0, v)
    v = np.minimum(v, SCALE_CLIP[1])
    return 1.0 / np.sqrt(v)


def _symmetric_lu(K):
    """LU of a quasi-definite matrix with a symmetric fill-reducing order and no pivoting."""
    return spla.splu(sp.csc_matrix(K), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                     options={"SymmetricMode": True})


class _StepFactor:
    """Factorization of the ADMM step system in quasi-definite form.

    Solving ``[[P + sigma I, A'], [A, -1/rho]] [x; nu] = [a; b]`` is
    equivalent to the reduced system ``(P + sigma I + A' rho A) x = a + A' rho b``
    but avoids forming ``A' rho A``, whose fill is much denser.
    """

    def __init__(self, Ps, As, sigma, rho_vec):
        self.n = Ps.shape[0]
        K = sp.bmat([[Ps + sigma * sp.eye(self.n), As.T], [As, -sp.diags(1.0 / rho_vec)]], format="csc")
        self.lu = _symmetric_lu(K)

    def step(self, a, b):
        return self.lu.solve(np.concatenate([a, b]))[: self.n]


class QPSolver:
    """Reusable solver instance for one problem structure.

    Bounds can be swapped with :meth:`update_bounds` without repeating the
    scaling or the factorizations; factorizations are cached per step size.
    """

    def __init__(self, P, q, A, l, u, settings: SolverSettings | None = None):
        self.settings = settings or SolverSettings()
        self.P = sp.csc_matrix(sp.triu(P) + sp.triu(P, 1).T)
        self.q = np.asarray(q, dtype=float)
        self.A = sp.csc_matrix(A)
        self.n = self.P.shape[0]
        self.m = self.A.shape[0]
        self._scale(np.asarray(l, dtype=float), np.asarray(u, dtype=float))
        self._factors: dict[float, object] = {}
        self.is_eq = None
        self.update_bounds(l, u)

    # -- setup -------------------------------------------------------------
    def _scale(self, l, u):
        n, m = self.n, self.m
        D, E, c = np.ones(n), np.ones(m), 1.0
        Ps, As, qs = self.P.copy(), self.A.copy(), self.q.copy()
        for _ in range(self.settings.scaling_iter):
            d = _safe_inv_sqrt(np.maximum(_col_inf_norms(Ps), _col_inf_norms(As)))
            e = _safe_inv_sqrt(_row_inf_norms(As)) if m else np.ones(0)
            Dd, Ed = sp.diags(d), sp.diags(e)
            Ps = sp.csc_matrix(Dd @ Ps @ Dd)
            As = sp.csc_matrix(Ed @ As @ Dd)
            qs = d * qs
            D *= d
            E *= e
            colp = _col_inf_norms(Ps)
            scale = max(colp.mean() if n else 0.0, _inf_norm(qs))
            ct = 1.0 / np.clip(scale, *SCALE_CLIP) if scale > 0 else 1.0
            Ps = Ps * ct
            qs = qs * ct
            c *= ct
        # Ruiz leaves the bound magnitudes alone; shrink them towards one with a
        # uniform change of variable units, which the matrix equilibration cannot see
        b = np.abs(np.concatenate([E * l, E * u]))
        b = b[np.isfinite(b) & (b > 0)]
        f = float(np.clip(np.exp(np.mean(np.log(b))), 1.0, SCALE_CLIP[1])) if len(b) else 1.0
        if f > 1.0:
            D, E = D * f, E / f
            Ps, qs = Ps * f * f, qs * f
            ct = 1.0 / np.clip(max(_col_inf_norms(Ps).mean() if n else 0.0, _inf_norm(qs)), *SCALE_CLIP)
            Ps, qs, c = Ps * ct, qs * ct, c * ct
        self.D, self.E, self.cscale = D, E, c
        self.Ps, self.As, self.qs = sp.csc_matrix(Ps), sp.csc_matrix(As), qs
        self.AsT = sp.csc_matrix(As.T)

    def update_bounds(self, l, u):
        l = np.asarray(l, dtype=float)
        u = np.asarray(u, dtype=float)
        if l.shape != (self.m,) or u.shape != (self.m,):
            raise ValueError("bound vectors do not match the constraint count")
        if np.any(l > u):
            raise ValueError("lower bound above upper bound")
        self.l, self.u = l, u
        self.ls, self.us = self.E * l, self.E * u
        is_eq = np.isfinite(l) & (l == u)
        if getattr(self, "is_eq", None) is None or not np.array_equal(is_eq, self.is_eq):
            self._factors.clear()
        self.is_eq = is_eq

    def _rho_vec(self, rho):
        r = np.full(self.m, rho)
        r[self.is_eq] = rho * EQ_RHO_SCALE
        free = ~np.isfinite(self.l) & ~np.isfinite(self.u)
        r[free] = self.settings.rho_min
        return r

    def _factor(self, rho):
        key = float(rho)
        fac = self._factors.get(key)
        if fac is None:
            fac = _StepFactor(self.Ps, self.As, self.settings.sigma, self._rho_vec(rho))
            if len(self._factors) > 8:
                self._factors.clear()
            self._factors[key] = fac
        return fac

    # -- residuals -----------------------------------------------------------
    def _unscale(self, x, z, y):
        return self.D * x, z / self.E, self.E * y / self.cscale

    def residuals(self, x, z, y) -> Residuals:
        """Unscaled residuals for unscaled (x, z, y)."""
        s = self.settings
        Ax = self.A @ x
        Px = self.P @ x
        Aty = self.A.T @ y
        rp = _inf_norm(Ax - z)
        rd = _inf_norm(Px + self.q + Aty)
        ep = s.eps_abs + s.eps_rel * max(_inf_norm(Ax), _inf_norm(z))
        ed = s.eps_abs + s.eps_rel * max(_inf_norm(Px), _inf_norm(Aty), _inf_norm(self.q))
        return Residuals(rp, rd, ep, ed)

    def _relative(self, x, z, y):
        Ax = self.A @ x
        Px = self.P @ x
        Aty = self.A.T @ y
        rp = _inf_norm(Ax - z) / (1.0 + max(_inf_norm(Ax), _inf_norm(z)))
        rd = _inf_norm(Px + self.q + Aty) / (1.0 + max(_inf_norm(Px), _inf_norm(Aty), _inf_norm(self.q)))
        return rp, rd, Ax, Px, Aty

    # -- main loop -----------------------------------------------------------
    def solve(self, x0=None, y0=None) -> BoxSolution:
        s = self.settings
        n, m = self.n, self.m
        if x0 is not None:
            x = np.asarray(x0, dtype=float) / self.D
        else:
            x = np.zeros(n)
        y = self.cscale * np.asarray(y0, dtype=float) / self.E if y0 is not None else np.zeros(m)
        z = np.clip(self.As @ x, self.ls, self.us)
        rho = s.rho
        rv = self._rho_vec(rho)
        trigger = s.polish_start
        best = None
        last_inf = 0
        for k in range(1, s.max_iter + 1):
            fac = self._factor(rho)
            xt = fac.step(s.sigma * x - self.qs, z - y / rv)
            zt = self.As @ xt
            x_new = s.alpha * xt + (1 - s.alpha) * x
            zr = s.alpha * zt + (1 - s.alpha) * z
            z_new = np.clip(zr + y / rv, self.ls, self.us)
            y_new = y + rv * (zr - z_new)
            dx, dy = x_new - x, y_new - y
            x, z, y = x_new, z_new, y_new

            if k % s.check_every and k != 1 and k != s.max_iter:
                continue
            xu, zu, yu = self._unscale(x, z, y)
            res = self.residuals(xu, zu, yu)
            best = (xu, yu, res, k)
            if res.ok:
                return BoxSolution(xu, yu, SolveStatus.SOLVED, k, res, False, rho)
            cert = self._primal_infeasible(dy)
            if cert is not None:
                last_inf += 1
                if last_inf >= 2:
                    return BoxSolution(xu, yu, SolveStatus.INFEASIBLE, k, res, False, rho, cert)
            elif self._dual_infeasible(dx):
                last_inf += 1
                if last_inf >= 2:
                    return BoxSolution(xu, yu, SolveStatus.UNBOUNDED, k, res, False, rho, self.D * dx)
            else:
                last_inf = 0
            rp, rd, Ax, Px, Aty = self._relative(xu, zu, yu)
            log.debug("iter %d rho %.3g rel primal %.2e rel dual %.2e", k, rho, rp, rd)
            if s.polish and rp <= trigger and rd <= trigger:
                pol = self._polish(x, z, y)
                if pol is not None:
                    xp, yp, rres = pol
                    return BoxSolution(xp, yp, SolveStatus.SOLVED, k, rres, True, rho)
                trigger *= 0.1
            if s.adaptive_rho and k > 1:
                num = _inf_norm(Ax - zu) / max(_inf_norm(Ax), _inf_norm(zu), 1e-30)
                den = _inf_norm(Px + self.q + Aty) / max(_inf_norm(Px), _inf_norm(Aty), _inf_norm(self.q), 1e-30)
                if num > 0 and den > 0:
                    new = float(np.clip(rho * np.sqrt(num / den), s.rho_min, s.rho_max))
                    if new > 5 * rho or new < 0.2 * rho:
                        # snap to a coarse grid so the factorization cache gets hits
                        rho = float(10 ** (np.round(4 * np.log10(new)) / 4))
                        rho = float(np.clip(rho, s.rho_min, s.rho_max))
                        rv = self._rho_vec(rho)
        xu, yu, res, k = best
        return BoxSolution(xu, yu, SolveStatus.MAX_ITERATIONS, k, res, False, rho)

    def _primal_infeasible(self, dy):
        eps = self.settings.eps_infeasible
        dyu = self.E * dy / self.cscale
        nrm = _inf_norm(dyu)
        if nrm < 1e-14:
            return None
        if _inf_norm(self.A.T @ dyu) > eps * nrm:
            return None
        pos = np.maximum(dyu, 0)
        neg = np.minimum(dyu, 0)
        with np.errstate(invalid="ignore"):
            up = np.where(pos > 0, self.u * pos, 0.0)
            lo = np.where(neg < 0, self.l * neg, 0.0)
        val = up.sum() + lo.sum()
        if np.isfinite(val) and val < -eps * nrm:
            return dyu / nrm
        return None

    def _dual_infeasible(self, dx) -> bool:
        eps = self.settings.eps_infeasible
        dxu = self.D * dx
        nrm = _inf_norm(dxu)
        if nrm < 1e-14:
            return False
        if _inf_norm(self.P @ dxu) > eps * nrm or self.q @ dxu > -eps * nrm:
            return False
        Adx = self.A @ dxu
        tol = eps * nrm
        fin_u, fin_l = np.isfinite(self.u), np.isfinite(self.l)
        if np.any(Adx[fin_u] > tol) or np.any(Adx[fin_l] < -tol):
            return False
        return True

    # -- polishing -------------------------------------------------------------
    def _polish(self, x, z, y):
        """Active-set KKT solve in scaled space; returns unscaled (x, y, residuals)."""
        s = self.settings
        ls, us = self.ls, self.us
        up = (us - z < y) & np.isfinite(us)
        low = (z - ls < -y) & np.isfinite(ls)
        eq = self.is_eq
        up &= ~eq
        low &= ~eq & ~up
        seen = set()
        changes = None
        for _ in range(s.polish_rounds):
            key = (np.flatnonzero(up).tobytes(), np.flatnonzero(low).tobytes())
            if key in seen:
                return None
            seen.add(key)
            act = np.flatnonzero(eq | up | low)
            bnd = np.where(up[act], us[act], ls[act])
            sol = self._kkt_solve(act, bnd, x, y[act])
            if sol is None:
                log.debug("polish: KKT solve failed with %d active rows", len(act))
                return None
            xs, ya = sol
            ys = np.zeros(self.m)
            ys[act] = ya
            xu = self.D * xs
            yu = self.E * ys / self.cscale
            Ax = self.A @ xu
            zu = np.clip(Ax, self.l, self.u)
            res = self.residuals(xu, zu, yu)
            ytol = s.eps_abs + s.eps_rel * _inf_norm(yu)
            viol_up = ~(eq | up | low) & (Ax > self.u + res.eps_primal)
            viol_lo = ~(eq | up | low) & (Ax < self.l - res.eps_primal)
            wrong_up = up & (yu < -ytol)
            wrong_lo = low & (yu > ytol)
            log.debug("polish: %d active, %d+%d infeasible, %d+%d wrong sign", len(act), viol_up.sum(),
                      viol_lo.sum(), wrong_up.sum(), wrong_lo.sum())
            if not (viol_up.any() or viol_lo.any() or wrong_up.any() or wrong_lo.any()):
                if res.ok:
                    return xu, yu, res
                log.debug("polish: active set consistent but residuals %s", res)
                return None
            n_changes = int(viol_up.sum() + viol_lo.sum() + wrong_up.sum() + wrong_lo.sum())
            if changes is not None and n_changes >= changes:
                # the correction is not closing in on a consistent set; more ADMM first
                return None
            changes = n_changes
            up = (up & ~wrong_up) | viol_up
            low = (low & ~wrong_lo) | viol_lo
        return None

    def _kkt_solve(self, act, bnd, x0, y0):
        """Solve the active-set KKT system by iterative refinement started at (x0, y0).

        Refinement with the regularized factor is a proximal-point iteration,
        so on a rank-deficient active set it converges to the solution nearest
        the start rather than to the minimum-norm one.
        """
        s = self.settings
        n = self.n
        Aa = self.As[act]
        k = len(act)
        K0 = sp.bmat([[self.Ps, Aa.T], [Aa, None]], format="csc") if k else sp.csc_matrix(self.Ps)
        d = s.polish_delta
        reg = sp.diags(np.concatenate([np.full(n, d), np.full(k, -d)]))
        rhs = np.concatenate([-self.qs, bnd])
        scale = 1.0 + _inf_norm(rhs)
        best, best_r = None, np.inf
        # a degenerate active set leaves K0 singular; the regularized solution is
        # still usable, and the caller's residual check decides whether to keep it
        for factorize in (_symmetric_lu, lambda K: spla.splu(sp.csc_matrix(K), permc_spec="MMD_AT_PLUS_A")):
            try:
                fac = factorize(K0 + reg)
            except RuntimeError:
                continue
            sol = np.concatenate([x0, y0])
            for _ in range(s.polish_refine):
                r = rhs - K0 @ sol
                if not np.all(np.isfinite(r)) or _inf_norm(r) <= 1e-14 * scale:
                    break
                sol = sol + fac.solve(r)
            r = _inf_norm(rhs - K0 @ sol) if np.all(np.isfinite(sol)) else np.inf
            if r < best_r:
                best, best_r = sol, r
            if best_r <= 1e-9 * scale:
                break
        if best is None:
            return None
        return best[:n], best[n:]


def solve_box_qp(P, q, A, l, u, settings=None, x0=None, y0=None) -> BoxSolution:
    return QPSolver(P, q, A, l, u, settings).solve(x0, y0)


# -- StandardQP front end ------------------------------------------------------

@dataclass
class ResidualReport:
    stationarity: float
    eq_feasibility: float
    ineq_feasibility: float
    complementarity: float
    dual_sign: float
    gap: float
    objective: float
    scale: dict = field(default_factory=dict)


@dataclass
class PrimalDualSolution:
    x: np.ndarray
    y_eq: np.ndarray
    y_in: np.ndarray
    status: SolveStatus
    iterations: int
    residuals: ResidualReport
    polished: bool = False


def _box_form(qp):
    A = sp.vstack([qp.A_eq, qp.A_in], format="csc")
    l = np.concatenate([qp.b_eq, np.full(len(qp.h), -INF)])
    u = np.concatenate([qp.b_eq, qp.h])
    return A, l, u


class StandardQPSolver:
    """Keeps a :class:`QPSolver` alive across QPs that differ only in b_eq and h."""

    def __init__(self, settings: SolverSettings | None = None):
        self.settings = settings or SolverSettings()
        self._key = None
        self._solver: QPSolver | None = None

    def solve(self, qp, warm_start: PrimalDualSolution | None = None) -> PrimalDualSolution:
        A, l, u = _box_form(qp)
        key = qp.structure_key()
        if self._solver is None or key != self._key:
            self._solver = QPSolver(qp.P, qp.c, A, l, u, self.settings)
            self._key = key
        else:
            self._solver.update_bounds(l, u)
        x0 = y0 = None
        if warm_start is not None:
            x0 = warm_start.x
            y0 = np.concatenate([warm_start.y_eq, warm_start.y_in])
        res = self._solver.solve(x0, y0)
        meq = qp.A_eq.shape[0]
        sol = PrimalDualSolution(
            x=res.x, y_eq=res.y[:meq], y_in=res.y[meq:], status=res.status,
            iterations=res.iterations, residuals=None, polished=res.polished,
        )
        sol.residuals = kkt_residuals(qp, sol)
        return sol


def solve_qp(qp, settings: SolverSettings | None = None, warm_start=None) -> PrimalDualSolution:
    return StandardQPSolver(settings).solve(qp, warm_start)


def kkt_residuals(qp, sol) -> ResidualReport:
    x, y, lam = sol.x, sol.y_eq, sol.y_in
    Px = qp.P @ x
    stat = Px + qp.c + qp.A_eq.T @ y + qp.A_in.T @ lam
    Aeq_x = qp.A_eq @ x
    Ain_x = qp.A_in @ x
    slack = qp.h - Ain_x
    primal = 0.5 * x @ Px + qp.c @ x
    dual = -0.5 * x @ Px - qp.b_eq @ y - qp.h @ lam
    return ResidualReport(
        stationarity=_inf_norm(stat),
        eq_feasibility=_inf_norm(Aeq_x - qp.b_eq),
        ineq_feasibility=float(np.max(np.maximum(-slack, 0.0))) if len(slack) else 0.0,
        complementarity=float(np.max(np.abs(lam * slack))) if len(slack) else 0.0,
        dual_sign=float(np.max(np.maximum(-lam, 0.0))) if len(lam) else 0.0,
        gap=float(abs(primal - dual)),
        objective=float(primal),
        scale={
            "stationarity": max(_inf_norm(Px), _inf_norm(qp.c), 1.0),
            "primal": max(_inf_norm(Aeq_x), _inf_norm(Ain_x), _inf_norm(qp.b_eq), 1.0),
        },
    )
