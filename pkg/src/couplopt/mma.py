"""Method of Moving Asymptotes (Svanberg) for box-constrained NLPs.

Solves   min f0(x)  s.t.  f_i(x) <= 0,  lower <= x <= upper
through the usual elastic reformulation with artificial variables y, z:

    min f0 + a0 z + sum(c_i y_i + d_i y_i^2 / 2)
    s.t. f_i - a_i z - y_i <= 0.

The convex separable subproblem is solved by a primal-dual interior point
method with damped Newton steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import logging

import numpy as np

log = logging.getLogger(__name__)


class MMAError(RuntimeError):
    pass


@dataclass
class MmaSettings:
    asyinit: float = 0.5
    asydecr: float = 0.7
    asyincr: float = 1.2
    move: float = 0.1  # fraction of box span per iteration
    albefa: float = 0.1
    asymin: float = 0.01  # asymptote distance bounds, times box span
    asymax: float = 10.0
    raa0: float = 1e-5
    c: float = 1e3
    d: float = 1.0
    a0: float = 1.0
    kkt_tol: float = 1e-9
    max_newton: int = 200


@dataclass
class MmaState:
    """Asymptotes and the two previous iterates."""

    lower: np.ndarray
    upper: np.ndarray
    xmin: np.ndarray
    xmax: np.ndarray
    low: np.ndarray | None = None
    upp: np.ndarray | None = None
    xold1: np.ndarray | None = None
    xold2: np.ndarray | None = None
    iteration: int = 0
    settings: MmaSettings = field(default_factory=MmaSettings)
    rho: np.ndarray | None = None  # curvature terms, objective first
    predicted: np.ndarray | None = None  # approximation values at the last iterate
    dist: float = 0.0

    @classmethod
    def create(cls, xmin, xmax, settings: MmaSettings | None = None) -> "MmaState":
        xmin = np.asarray(xmin, float)
        xmax = np.asarray(xmax, float)
        if np.any(xmax <= xmin):
            raise MMAError("box must satisfy lower < upper")
        return cls(xmin.copy(), xmax.copy(), xmin, xmax, settings=settings or MmaSettings())

    def to_dict(self) -> dict:
        return {
            "low": self.low, "upp": self.upp, "xold1": self.xold1, "xold2": self.xold2,
            "iteration": self.iteration, "rho": self.rho, "predicted": self.predicted,
            "dist": self.dist,
        }

    def load_dict(self, d: dict) -> None:
        for k in ("low", "upp", "xold1", "xold2", "rho", "predicted"):
            v = d.get(k)
            setattr(self, k, None if v is None else np.asarray(v, float))
        self.iteration = int(d["iteration"])
        self.dist = float(d.get("dist", 0.0))


def _asymptotes(state: MmaState, x: np.ndarray):
    s = state.settings
    span = state.xmax - state.xmin
    if state.iteration < 2 or state.low is None:
        low = x - s.asyinit * span
        upp = x + s.asyinit * span
    else:
        zzz = (x - state.xold1) * (state.xold1 - state.xold2)
        factor = np.ones_like(x)
        factor[zzz > 0] = s.asyincr
        factor[zzz < 0] = s.asydecr
        low = x - factor * (state.xold1 - state.low)
        upp = x + factor * (state.upp - state.xold1)
        low = np.clip(low, x - s.asymax * span, x - s.asymin * span)
        upp = np.clip(upp, x + s.asymin * span, x + s.asymax * span)
    return low, upp


def _approximation(x, low, upp, span, df, rho):
    ux1, xl1 = upp - x, x - low
    xmami = np.maximum(span, 1e-5)
    pos, neg = np.maximum(df, 0.0), np.maximum(-df, 0.0)
    pq = 0.001 * (pos + neg) + np.asarray(rho)[..., None] / xmami
    return (pos + pq) * ux1**2, (neg + pq) * xl1**2


def _adapt_curvature(state: MmaState, values: np.ndarray) -> None:
    """Raise rho where the last approximation underestimated the functions.

    Between outer iterations the curvature terms relax by half; a
    non-conservative prediction raises them as in the globally convergent
    variant, so oscillation around an optimum is damped without extra
    function evaluations.
    """
    s = state.settings
    if state.rho is None:
        state.rho = np.full(len(values), s.raa0)
        return
    rho = state.rho
    if state.predicted is not None and state.dist > 0.0:
        err = values - state.predicted
        bad = err > 0.0
        delta = np.where(bad, err / state.dist, 0.0)
        rho = np.where(bad, np.minimum(1.1 * (rho + delta), 10.0 * rho), 0.5 * rho)
    state.rho = np.maximum(rho, s.raa0)


def mma_update(state: MmaState, x, f0, df0, fval, dfdx, move: float | None = None) -> np.ndarray:
    """One MMA step; updates ``state`` and returns the next iterate.

    ``fval`` (m,) and ``dfdx`` (m, n) are constraint values and gradients.
    """
    x = np.asarray(x, float)
    df0 = np.asarray(df0, float)
    fval = np.atleast_1d(np.asarray(fval, float))
    dfdx = np.asarray(dfdx, float).reshape(len(fval), len(x))
    if not (np.all(np.isfinite(df0)) and np.all(np.isfinite(dfdx)) and np.all(np.isfinite(fval))):
        raise MMAError("non-finite objective or constraint gradients")
    move = state.settings.move if move is None else move
    _adapt_curvature(state, np.concatenate([[float(f0)], fval]))
    try:
        xnew, low, upp, pred, dist = _step(state, x, f0, df0, fval, dfdx, move)
    except MMAError:
        xnew, low, upp, pred, dist = _step(state, x, f0, df0, fval, dfdx, 0.5 * move)
    state.predicted, state.dist = pred, dist
    state.xold2 = None if state.xold1 is None else state.xold1.copy()
    state.xold1 = x.copy()
    state.low, state.upp = low, upp
    state.iteration += 1
    return xnew


def _step(state: MmaState, x, f0, df0, fval, dfdx, move):
    s = state.settings
    span = state.xmax - state.xmin
    low, upp = _asymptotes(state, x)
    alfa = np.maximum.reduce([state.xmin, low + s.albefa * (x - low), x - move * span])
    beta = np.minimum.reduce([state.xmax, upp - s.albefa * (upp - x), x + move * span])
    p0, q0 = _approximation(x, low, upp, span, df0, state.rho[0])
    P, Q = _approximation(x, low, upp, span, dfdx, state.rho[1:])
    b = P @ (1.0 / (upp - x)) + Q @ (1.0 / (x - low)) - fval
    m = len(fval)
    xnew = subsolve(
        low, upp, alfa, beta, p0, q0, P, Q, s.a0, np.zeros(m), b, np.full(m, s.c), np.full(m, s.d),
        s.kkt_tol, s.max_newton,
    )[0]
    # approximation values at xnew, for the next curvature update
    ux0, xl0 = upp - x, x - low
    uxn, xln = upp - xnew, xnew - low
    f_all = np.concatenate([[float(f0)], fval])
    PP = np.vstack([p0, P])
    QQ = np.vstack([q0, Q])
    pred = f_all + PP @ (1 / uxn - 1 / ux0) + QQ @ (1 / xln - 1 / xl0)
    dist = float(np.sum((upp - low) * (xnew - x) ** 2 / (uxn * xln * span)))
    return xnew, low, upp, pred, dist


def subsolve(low, upp, alfa, beta, p0, q0, P, Q, a0, a, b, c, d, epsimin=1e-9, max_newton=200, accept_tol=1e-4):
    """Primal-dual Newton solution of the MMA subproblem.

    Returns (x, y, z, lam, xsi, eta, mu, zet, s).  Raises ``MMAError`` when
    the residual at the last barrier level exceeds ``accept_tol``.
    """
    n, m = len(low), len(b)
    x = 0.5 * (alfa + beta)
    y = np.ones(m)
    z = 1.0
    lam = np.ones(m)
    xsi = np.maximum(1.0 / (x - alfa), 1.0)
    eta = np.maximum(1.0 / (beta - x), 1.0)
    mu = np.maximum(np.ones(m), 0.5 * c)
    zet = 1.0
    s = np.ones(m)
    epsi = 1.0

    def residual(x, y, z, lam, xsi, eta, mu, zet, s, epsi):
        ux1, xl1 = upp - x, x - low
        plam = p0 + P.T @ lam
        qlam = q0 + Q.T @ lam
        gvec = P @ (1 / ux1) + Q @ (1 / xl1)
        dpsidx = plam / ux1**2 - qlam / xl1**2
        return np.concatenate([
            dpsidx - xsi + eta,
            c + d * y - mu - lam,
            [a0 - zet - a @ lam],
            gvec - a * z - y + s - b,
            xsi * (x - alfa) - epsi,
            eta * (beta - x) - epsi,
            mu * y - epsi,
            [zet * z - epsi],
            lam * s - epsi,
        ])

    while epsi > epsimin:
        res = residual(x, y, z, lam, xsi, eta, mu, zet, s, epsi)
        resnorm, resmax = np.linalg.norm(res), np.max(np.abs(res))
        it = 0
        while resmax > 0.9 * epsi and it < max_newton:
            it += 1
            ux1, xl1 = upp - x, x - low
            ux2, xl2 = ux1**2, xl1**2
            plam = p0 + P.T @ lam
            qlam = q0 + Q.T @ lam
            gvec = P @ (1 / ux1) + Q @ (1 / xl1)
            GG = P / ux2 - Q / xl2
            dpsidx = plam / ux2 - qlam / xl2
            delx = dpsidx - epsi / (x - alfa) + epsi / (beta - x)
            dely = c + d * y - lam - epsi / y
            delz = a0 - a @ lam - epsi / z
            dellam = gvec - a * z - y - b + epsi / lam
            diagx = 2 * (plam / (ux1 * ux2) + qlam / (xl1 * xl2)) + xsi / (x - alfa) + eta / (beta - x)
            diagy = d + mu / y
            diaglamyi = s / lam + 1.0 / diagy
            if m < n:
                blam = dellam + dely / diagy - GG @ (delx / diagx)
                Alam = np.diag(diaglamyi) + (GG / diagx) @ GG.T
                AA = np.block([[Alam, a[:, None]], [a[None, :], np.array([[-zet / z]])]])
                sol = np.linalg.solve(AA, np.concatenate([blam, [delz]]))
                dlam, dz = sol[:m], sol[m]
                dx = -delx / diagx - (GG.T @ dlam) / diagx
            else:
                dellamyi = dellam + dely / diagy
                Axx = np.diag(diagx) + GG.T @ (GG / diaglamyi[:, None])
                azz = zet / z + a @ (a / diaglamyi)
                axz = -GG.T @ (a / diaglamyi)
                bx = delx + GG.T @ (dellamyi / diaglamyi)
                bz = delz - a @ (dellamyi / diaglamyi)
                AA = np.block([[Axx, axz[:, None]], [axz[None, :], np.array([[azz]])]])
                sol = np.linalg.solve(AA, -np.concatenate([bx, [bz]]))
                dx, dz = sol[:n], sol[n]
                dlam = (GG @ dx) / diaglamyi - dz * (a / diaglamyi) + dellamyi / diaglamyi
            dy = -dely / diagy + dlam / diagy
            dxsi = -xsi + epsi / (x - alfa) - (xsi * dx) / (x - alfa)
            deta = -eta + epsi / (beta - x) + (eta * dx) / (beta - x)
            dmu = -mu + epsi / y - (mu * dy) / y
            dzet = -zet + epsi / z - zet * dz / z
            ds = -s + epsi / lam - (s * dlam) / lam
            xx = np.concatenate([y, [z], lam, xsi, eta, mu, [zet], s])
            dxx = np.concatenate([dy, [dz], dlam, dxsi, deta, dmu, [dzet], ds])
            stmxx = np.max(-1.01 * dxx / xx)
            stmalfa = np.max(-1.01 * dx / (x - alfa))
            stmbeta = np.max(1.01 * dx / (beta - x))
            steg = 1.0 / max(stmalfa, stmbeta, stmxx, 1.0)
            old = (x, y, z, lam, xsi, eta, mu, zet, s)
            newnorm, tries = 2 * resnorm, 0
            while newnorm > resnorm and tries < 50:
                tries += 1
                x = old[0] + steg * dx
                y = old[1] + steg * dy
                z = old[2] + steg * dz
                lam = old[3] + steg * dlam
                xsi = old[4] + steg * dxsi
                eta = old[5] + steg * deta
                mu = old[6] + steg * dmu
                zet = old[7] + steg * dzet
                s = old[8] + steg * ds
                res = residual(x, y, z, lam, xsi, eta, mu, zet, s, epsi)
                newnorm = np.linalg.norm(res)
                steg /= 2
            resnorm, resmax = newnorm, np.max(np.abs(res))
        if not np.isfinite(resnorm):
            raise MMAError(f"subproblem diverged at barrier {epsi:.1e}")
        epsi *= 0.1
    # Nearly linear subproblems (far asymptotes) can stall the damped Newton
    # iteration at the last barrier levels; such a point is still a usable
    # step far below the outer feasibility tolerance.
    if resmax > accept_tol:
        raise MMAError(f"subproblem did not converge (residual {resmax:.3e} at barrier {10 * epsi:.1e})")
    if resmax > 0.9 * 10 * epsi:
        log.debug("MMA subproblem stopped at residual %.2e", resmax)
    return x, y, z, lam, xsi, eta, mu, zet, s


def kkt_residual(x, xmin, xmax, df0, fval, dfdx, lam) -> float:
    """Max-norm KKT residual of the original problem for multipliers ``lam``.

    Bound multipliers are eliminated: at a lower bound only positive
    gradient components are allowed, at an upper bound only negative ones.
    """
    fval = np.atleast_1d(fval)
    dfdx = np.asarray(dfdx).reshape(len(fval), len(x))
    lam = np.atleast_1d(lam)
    gl = df0 + dfdx.T @ lam
    span = xmax - xmin
    at_lo = x <= xmin + 1e-9 * span
    at_hi = x >= xmax - 1e-9 * span
    r = gl.copy()
    r[at_lo] = np.minimum(gl[at_lo], 0.0)
    r[at_hi] = np.maximum(gl[at_hi], 0.0)
    parts = [np.abs(r), np.maximum(fval, 0.0), np.abs(lam * fval), np.maximum(-lam, 0.0)]
    return float(max(np.max(p) if len(p) else 0.0 for p in parts))


def estimate_multipliers(x, xmin, xmax, df0, fval, dfdx, active_tol: float = 1e-6) -> np.ndarray:
    """Least-squares nonnegative multipliers of near-active constraints."""
    fval = np.atleast_1d(fval)
    dfdx = np.asarray(dfdx).reshape(len(fval), len(x))
    lam = np.zeros(len(fval))
    act = np.nonzero(fval >= -active_tol)[0]
    if len(act) == 0:
        return lam
    span = xmax - xmin
    free = (x > xmin + 1e-9 * span) & (x < xmax - 1e-9 * span)
    A = dfdx[act][:, free].T
    sol = np.linalg.lstsq(A, -np.asarray(df0)[free], rcond=None)[0]
    lam[act] = np.maximum(sol, 0.0)
    return lam
