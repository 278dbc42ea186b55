"""Penalized first-stage regression for large instrument sets, and the
two-step factor solver that uses the penalized fitted values as instruments.

The solver is cyclic coordinate descent on the covariance (Gram) form of the
weighted-l1 problem

    min_pi  (1/N) sum_i (y_i - x_i'pi)^2 + (lam/N) * sum_k loading_k |pi_k|,

the empirical-mean loss convention the plug-in penalty level is calibrated
for (the stationarity bound for the mean-loss gradient is lam*loading_k/N).
Instrument columns are centered internally so the unexplainable level of the
response never enters the penalty decisions; coefficients refer to the
original column scale. The same kernel runs one problem or a batch of
problems that share a Gram matrix, which is what the Monte Carlo driver uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from ._linalg import qr_solve
from .errors import ConvergenceError, RankError, ValidationError
from .panel import PartitionScheme, ResidualPanel

__all__ = ["PenaltySpec", "LassoFit", "lasso_first_stage", "estimate_theta_lasso_iv"]


@dataclass(frozen=True)
class PenaltySpec:
    """Penalty configuration for the first-stage Lasso.

    With ``lam=None`` the plug-in level 2*c*sqrt(N)*PhiInv(1 - gamma/(2*m)) is
    used, where m is the instrument count and ``gamma`` defaults to
    0.1/log(max(N, m)). Penalty loadings are each centered column's root mean
    square times the residual scale, started at the centered response's RMS
    and refreshed from the fitted residuals until stable (the feasible
    iteration); ``loadings`` overrides them entirely.
    """

    c: float = 1.1
    gamma: float | None = None
    lam: float | None = None
    loadings: np.ndarray | None = None
    tol: float = 1e-8
    max_sweeps: int = 100_000
    max_refresh: int = 15

    def penalty_level(self, n: int, m: int) -> float:
        if self.lam is not None:
            return float(self.lam)
        gamma = self.gamma if self.gamma is not None else 0.1 / math.log(max(n, m, 3))
        return float(2.0 * self.c * math.sqrt(n) * norm.ppf(1.0 - gamma / (2.0 * m)))


@dataclass(frozen=True)
class LassoFit:
    """Solution of one first-stage problem.

    ``fitted`` are the zero-mean fitted values (centered columns times
    coefficients); the response level is unexplainable by centered columns, so
    a fully shrunk fit has ``fitted == 0``. ``residual_rms`` is the root mean
    square of the deviation residuals, a proxy for the approximation error of
    the selected sub-model.
    """

    pi: np.ndarray
    lam: float
    loadings: np.ndarray
    active_set: tuple[int, ...]
    fitted: np.ndarray
    residual_rms: float
    n_sweeps: int
    gap: float
    objective_path: tuple[float, ...] | None = None

    def kkt_violation(self, endogenous: np.ndarray, instruments: np.ndarray) -> float:
        """Worst-case violation of the stationarity conditions, in gradient units.

        The gradient is of the mean squared loss at the solution, per centered
        column: g_k = -(2/N) * xc_k'(yc - Xc pi). Inactive coordinates must
        satisfy |g_k| <= lam*loading_k/N; active ones meet it with equality.
        """
        y = np.asarray(endogenous, dtype=float).reshape(-1)
        x = np.asarray(instruments, dtype=float)
        n = y.shape[0]
        xc = x - x.mean(axis=0)
        yc = y - y.mean()
        grad = -2.0 / n * xc.T @ (yc - xc @ self.pi)
        bound = self.lam * self.loadings / n
        active = np.zeros(x.shape[1], dtype=bool)
        if self.active_set:
            active[list(self.active_set)] = True
        worst = 0.0
        if np.any(~active):
            worst = float(np.max(np.abs(grad[~active]) - bound[~active]))
        if np.any(active):
            worst = max(worst, float(np.max(np.abs(np.abs(grad[active]) - bound[active]))))
        return worst


class _CdState:
    """Coordinate-descent state for P problems sharing one Gram matrix.

    Thresholds can be swapped between runs (the feasible loading iteration),
    warm starting from the current coefficients. ``run`` compacts each call
    down to the problems whose gap criterion still fails, so a batch pays
    only for its stragglers.
    """

    def __init__(self, gram, b, mask, sq_norm, n_obs, tol, warm=None):
        self.gram = gram
        self.b = b
        self.mask = mask
        self.sq = sq_norm
        self.n = n_obs
        self.tol = tol
        self.n_prob, self.m = b.shape
        self.diag = np.ascontiguousarray(np.diag(gram))
        if warm is None:
            self.pi = np.zeros((self.n_prob, self.m))
            self.reg = np.zeros((self.n_prob, self.m))  # reg[p,k] = sum_l gram[k,l] pi[p,l]
        else:
            self.pi = np.array(warm[0], copy=True)
            self.reg = np.array(warm[1], copy=True)
        self.grad_tol = tol * 1e-2 * np.maximum(
            1.0, np.sqrt(sq_norm * max(self.diag.max(initial=0.0), 1.0))
        )
        self.cols = [k for k in range(self.m) if self.diag[k] > 0.0 and mask[:, k].any()]
        self.sweeps = 0
        self.path: list[float] = []

    def set_thresholds(self, thresholds: np.ndarray) -> None:
        self.t = thresholds
        self.penalized = self.mask & (thresholds > 0)
        self.free = self.mask & (thresholds == 0.0) & (self.diag[None, :] > 0.0)

    def sweep(self, cols, track_delta: bool = False) -> float:
        pi, reg, b, t, diag, gram, mask = (
            self.pi, self.reg, self.b, self.t, self.diag, self.gram, self.mask,
        )
        max_delta = 0.0
        for k in cols:
            rho = b[:, k] - reg[:, k] + diag[k] * pi[:, k]
            new = np.sign(rho) * np.maximum(np.abs(rho) - t[:, k], 0.0) / diag[k]
            new = np.where(mask[:, k], new, 0.0)
            delta = new - pi[:, k]
            nz = np.nonzero(delta)[0]
            if nz.size == self.n_prob:
                reg += delta[:, None] * gram[k, :]
                pi[:, k] = new
            elif nz.size:
                reg[nz, :] += delta[nz, None] * gram[k, :]
                pi[nz, k] = new[nz]
            if track_delta and nz.size:
                max_delta = max(max_delta, float(np.max(np.abs(delta) * math.sqrt(diag[k]))))
        return max_delta

    def sse(self) -> np.ndarray:
        return (
            self.sq
            - 2.0 * np.einsum("pm,pm->p", self.pi, self.b)
            + np.einsum("pm,pm->p", self.pi, self.reg)
        )

    def objective(self) -> np.ndarray:
        return self.sse() + 2.0 * np.einsum("pm,pm->p", self.t, np.abs(self.pi))

    def gap_state(self):
        corr = np.where(self.mask, self.b - self.reg, 0.0)
        sse = self.sse()
        primal = sse + 2.0 * np.einsum("pm,pm->p", self.t, np.abs(self.pi))
        with np.errstate(divide="ignore", invalid="ignore"):
            ratios = np.where(
                self.penalized & (np.abs(corr) > 0), self.t / np.abs(corr), np.inf
            )
        scale = np.minimum(ratios.min(axis=1), 1.0)
        ycr = np.einsum("pm,pm->p", self.pi, corr) + sse  # yc'residual
        dual = 2.0 * scale * ycr - scale**2 * sse
        gaps = (primal - dual) / self.n
        grad_ok = np.where(
            self.free.any(axis=1),
            np.abs(np.where(self.free, corr, 0.0)).max(axis=1, initial=0.0) <= self.grad_tol,
            True,
        )
        has_pen = self.penalized.any(axis=1)
        ok = np.where(
            has_pen, gaps <= self.tol * np.maximum(1.0, np.abs(primal) / self.n), grad_ok
        )
        return gaps, ok & grad_ok

    def polish(self, todo: np.ndarray, max_active: int = 16) -> None:
        """Jump problems to their active-face optimum.

        With the support and signs fixed, the restricted minimizer solves
        G_AA pi_A = b_A - t_A*sign_A; the current point lies on that face, so
        accepting a sign-consistent solution is a monotone step and the
        full-problem gap check still owns convergence. Problems are grouped by
        active count and solved with stacked factorizations; sign-flipped
        solutions are simply rejected (those problems keep sweeping).
        """
        idx = np.nonzero(todo)[0]
        if idx.size == 0:
            return
        nact = np.count_nonzero(self.pi[idx], axis=1)
        for k in np.unique(nact):
            if k == 0 or k > max_active:
                continue
            rows = idx[nact == k]
            acts = np.nonzero(self.pi[rows] != 0.0)[1].reshape(rows.size, k)
            signs = np.sign(self.pi[rows[:, None], acts])
            rhs = self.b[rows[:, None], acts] - self.t[rows[:, None], acts] * signs
            if k == 1:
                dd = self.diag[acts[:, 0]]
                good = dd > 0.0
                sols = np.where(good, rhs[:, 0] / np.where(good, dd, 1.0), 0.0)[:, None]
                keep = good & (np.sign(sols[:, 0]) == signs[:, 0])
            else:
                subs = self.gram[acts[:, :, None], acts[:, None, :]]
                try:
                    sols = np.linalg.solve(subs, rhs[:, :, None])[:, :, 0]
                except np.linalg.LinAlgError:
                    sols, ok_rows = np.zeros_like(rhs), np.zeros(rows.size, dtype=bool)
                    for i in range(rows.size):
                        try:
                            sols[i] = np.linalg.solve(subs[i], rhs[i])
                            ok_rows[i] = True
                        except np.linalg.LinAlgError:
                            pass
                    keep = ok_rows & np.all(np.sign(sols) == signs, axis=1)
                else:
                    keep = np.all(np.sign(sols) == signs, axis=1)
            if not np.any(keep):
                continue
            rows_k, acts_k, sols_k = rows[keep], acts[keep], sols[keep]
            self.pi[rows_k, :] = 0.0
            self.pi[rows_k[:, None], acts_k] = sols_k
            self.reg[rows_k, :] = np.einsum("pk,pkm->pm", sols_k, self.gram[acts_k, :])

    def _run_live(self, max_sweeps: int, debug: bool) -> None:
        inner_eps = 1e-9 * max(math.sqrt(max(self.sq.max(initial=0.0), 1.0)), 1.0)
        start = self.sweeps
        while self.sweeps - start < max_sweeps:
            self.sweep(self.cols)
            self.sweeps += 1
            if debug:
                self.path.append(float(self.objective().max()))
            gaps, converged = self.gap_state()
            if bool(np.all(converged)):
                self.polish(np.ones(self.n_prob, dtype=bool))
                return
            self.polish(~converged)
            active_cols = [k for k in self.cols if np.any(self.pi[:, k])]
            inner = 0
            while active_cols and inner < 8 and self.sweeps - start < max_sweeps:
                delta = self.sweep(active_cols, track_delta=True)
                self.sweeps += 1
                inner += 1
                if debug:
                    self.path.append(float(self.objective().max()))
                if delta <= inner_eps:
                    break
        gaps, converged = self.gap_state()
        if bool(np.all(converged)):
            self.polish(np.ones(self.n_prob, dtype=bool))
            return
        raise ConvergenceError(
            f"coordinate descent did not converge in {max_sweeps} sweeps "
            f"(worst gap {float(np.max(gaps)):.3e})"
        )

    def run(self, max_sweeps: int, debug: bool = False) -> np.ndarray:
        """Advance every problem to convergence at the current thresholds."""
        gaps, converged = self.gap_state()
        if bool(np.all(converged)):
            return gaps
        rows = np.nonzero(~converged)[0]
        if rows.size == self.n_prob:
            self._run_live(max_sweeps, debug)
            return self.gap_state()[0]
        sub = _CdState(
            self.gram, self.b[rows], self.mask[rows], self.sq[rows], self.n, self.tol,
            warm=(self.pi[rows], self.reg[rows]),
        )
        sub.set_thresholds(self.t[rows])
        sub._run_live(max_sweeps, debug)
        self.pi[rows] = sub.pi
        self.reg[rows] = sub.reg
        self.sweeps += sub.sweeps
        self.path.extend(sub.path)
        return self.gap_state()[0]


def _loading_shape(xc: np.ndarray) -> np.ndarray:
    return np.sqrt(np.mean(xc**2, axis=0))


def lasso_first_stage(
    endogenous: np.ndarray,
    instruments: np.ndarray,
    penalty: PenaltySpec | None = None,
    debug: bool = False,
) -> LassoFit:
    """Weighted-l1 regression of one endogenous variable on the instrument set.

    Runs cyclic coordinate descent (ascending column order, which also breaks
    ties between duplicate columns deterministically) to a relative duality
    gap of ``penalty.tol``. Loadings are the centered columns' RMS times a
    residual scale, iterated from the centered response's RMS until stable.
    With ``debug=True`` the objective is recorded each sweep and verified to
    be nonincreasing.
    """
    penalty = penalty or PenaltySpec()
    y = np.asarray(endogenous, dtype=float).reshape(-1)
    x = np.asarray(instruments, dtype=float)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValidationError(f"instruments must be (N, m) with N={y.shape[0]}, got {x.shape}")
    n, m = x.shape
    if n < 2:
        raise ValidationError("need at least 2 observations")
    if not np.all(np.isfinite(x)) or not np.all(np.isfinite(y)):
        raise ValidationError("non-finite values in first-stage inputs")

    xc = x - x.mean(axis=0)
    yc = y - y.mean()
    gram = xc.T @ xc
    b = (xc.T @ yc)[None, :]
    mask = np.ones((1, m), dtype=bool)
    sq = np.array([float(yc @ yc)])
    lam = penalty.penalty_level(n, m)

    state = _CdState(gram, b, mask, sq, n, penalty.tol)
    if penalty.loadings is not None:
        loadings = np.asarray(penalty.loadings, dtype=float).reshape(-1)
        if loadings.shape != (m,):
            raise ValidationError(f"loadings must have length {m}")
        state.set_thresholds((lam * loadings / 2.0)[None, :])
        gap = float(state.run(penalty.max_sweeps, debug=debug)[0])
    elif lam == 0.0:
        loadings = np.zeros(m)
        state.set_thresholds(np.zeros((1, m)))
        gap = float(state.run(penalty.max_sweeps, debug=debug)[0])
    else:
        shape = _loading_shape(xc)
        sigma = float(np.sqrt(np.mean(yc**2)))
        gap = np.inf
        for _ in range(max(penalty.max_refresh, 1)):
            loadings = shape * sigma
            state.set_thresholds((lam * loadings / 2.0)[None, :])
            gap = float(state.run(penalty.max_sweeps, debug=debug)[0])
            new_sigma = float(np.sqrt(np.mean((yc - xc @ state.pi[0]) ** 2)))
            stable = abs(new_sigma - sigma) <= 1e-3 * max(sigma, 1e-12)
            sigma = new_sigma
            if stable:
                break
        # final pass at the stabilized residual scale
        loadings = shape * sigma
        state.set_thresholds((lam * loadings / 2.0)[None, :])
        gap = float(state.run(penalty.max_sweeps, debug=debug)[0])

    pi = state.pi[0].copy()
    if debug and state.path:
        arr = np.asarray(state.path)
        if np.any(np.diff(arr) > 1e-10 * max(1.0, abs(arr[0]))):
            raise AssertionError("coordinate-descent objective increased within a sweep")

    fitted = xc @ pi
    resid = yc - fitted
    return LassoFit(
        pi=pi,
        lam=lam,
        loadings=np.asarray(loadings, dtype=float),
        active_set=tuple(int(k) for k in np.nonzero(pi)[0]),
        fitted=fitted,
        residual_rms=float(np.sqrt(np.mean(resid**2))),
        n_sweeps=state.sweeps,
        gap=gap,
        objective_path=tuple(state.path) if debug else None,
    )


def batched_lasso_fitted(
    data: np.ndarray,
    targets: np.ndarray,
    excluded: np.ndarray,
    penalty: PenaltySpec | None = None,
) -> np.ndarray:
    """Fitted first-stage instruments for many problems sharing one panel.

    Problem p regresses column ``targets[p]`` of ``data`` on every column not
    in ``{targets[p]} U excluded[p]``, with the same centering, plug-in
    penalty, and feasible loading iteration as :func:`lasso_first_stage`, all
    problems advanced in lock step on the shared Gram matrix. Returns the
    zero-mean fitted values, shape (N, P). This is the Monte Carlo hot path;
    agreement with the one-problem entry point is pinned by tests.
    """
    penalty = penalty or PenaltySpec()
    data = np.asarray(data, dtype=float)
    n, j = data.shape
    targets = np.asarray(targets, dtype=int)
    excluded = np.asarray(excluded, dtype=int)
    n_prob = targets.shape[0]
    xc = data - data.mean(axis=0)
    gram = xc.T @ xc
    mask = np.ones((n_prob, j), dtype=bool)
    mask[np.arange(n_prob), targets] = False
    for col in range(excluded.shape[1]):
        mask[np.arange(n_prob), excluded[:, col]] = False
    b = np.where(mask, gram[targets, :], 0.0)
    sq = np.ascontiguousarray(np.diag(gram))[targets].astype(float)
    m_per = int(mask[0].sum())
    lam = penalty.penalty_level(n, m_per)

    shape = np.where(mask, np.sqrt(np.diag(gram) / n)[None, :], 0.0)
    sigma = np.sqrt(sq / n)
    state = _CdState(gram, b, mask, sq, n, penalty.tol)
    # per-problem feasible iteration: a problem's residual scale freezes the
    # first time it stabilizes, reproducing the one-problem trajectory exactly
    frozen = np.zeros(n_prob, dtype=bool)
    for _ in range(max(penalty.max_refresh, 1)):
        state.set_thresholds(lam * shape * sigma[:, None] / 2.0)
        state.run(penalty.max_sweeps)
        new_sigma = np.sqrt(np.maximum(state.sse(), 0.0) / n)
        stable = np.abs(new_sigma - sigma) <= 1e-3 * np.maximum(sigma, 1e-12)
        sigma = np.where(frozen, sigma, new_sigma)
        frozen |= stable
        if bool(np.all(frozen)):
            break
    state.set_thresholds(lam * shape * sigma[:, None] / 2.0)
    state.run(penalty.max_sweeps)
    return xc @ state.pi.T


def estimate_theta_lasso_iv(
    residuals: ResidualPanel,
    scheme: PartitionScheme,
    penalty: PenaltySpec | None = None,
) -> np.ndarray:
    """Factor estimate for one partition using penalized fitted instruments.

    Requires m_AJ = r and bj = everything outside a0 and aj. Each aj column is
    regressed on the bj columns by :func:`lasso_first_stage`; the fitted
    values (one instrument per factor) then solve the r x r moment system
    Lhat'(R_j - R_aj theta_j) = 0 for every target group j in a0. Returns
    theta stacked target-major, matching the stacked-system ordering.

    Raises RankError when the instrumented cross product is singular, which is
    what a fully shrunk (all-zero) first stage produces.
    """
    penalty = penalty or PenaltySpec()
    r = scheme.r
    if scheme.m_aj != r:
        raise ValidationError(f"lasso-IV path needs m_AJ = r, got m_AJ={scheme.m_aj}, r={r}")
    expected_bj = scheme.j_total - scheme.m_a0 - r
    if scheme.m_bj != expected_bj:
        raise ValidationError(
            f"bj must be the full complement: expected m_BJ={expected_bj}, got {scheme.m_bj}"
        )
    rmat = residuals.r_values
    aj_idx = np.array(scheme.aj, dtype=int) - 1
    bj_idx = np.array(scheme.bj, dtype=int) - 1
    a0_idx = np.array(scheme.a0, dtype=int) - 1
    instruments = rmat[:, bj_idx]
    fitted = np.column_stack(
        [lasso_first_stage(rmat[:, aj_idx[l]], instruments, penalty).fitted for l in range(r)]
    )  # (N, r), zero mean by construction
    cross = fitted.T @ rmat[:, aj_idx]  # (r, r)
    rhs = fitted.T @ rmat[:, a0_idx]    # (r, m_A0)
    try:
        theta = qr_solve(cross, rhs, label="Lhat'R_aj")
    except RankError as exc:
        raise RankError(
            f"instrumented cross product singular (no relevant instruments selected): {exc}",
            cond=exc.cond,
        ) from exc
    return theta.T.reshape(-1)  # target-major stacking (theta_j blocks of length r)
