"""The grouped-variable 2SLS estimator, its clustered covariance, the
three-group ratio closed form, loading recovery, and a principal-components
baseline normalized onto the same parameterization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._linalg import qr_solve
from .errors import ConvergenceError, RankError, ValidationError, ZeroDenominatorError
from .panel import PanelData, PartitionScheme, ResidualPanel, StackedSystem

__all__ = [
    "GveFit",
    "FactorEstimate",
    "LoadingEstimate",
    "estimate_gve",
    "ratio_iv",
    "reparametrize_share",
    "estimate_loadings",
    "pca_factors",
]

WEAK_INSTRUMENT_F = 1e-6


@dataclass(frozen=True)
class GveFit:
    """Stacked 2SLS solution delta = (theta_A0, beta, gamma_A0).

    ``vcov`` is the cluster-robust sandwich for delta-hat itself (each subject
    is one cluster; no small-sample degrees-of-freedom correction).
    ``relevance_f`` is the smallest first-stage F statistic across the
    endogenous design columns; a value below 1e-6 sets ``weak_instruments``
    instead of raising, since near-zero normalization averages are a data
    problem, not a usage error. ``bj_error_cross_moment`` reports the raw
    cross moment between instrument-group outcomes and the stacked residuals
    (the error-uncorrelatedness the instruments rely on is not formally
    testable; this is a look-at-it diagnostic).
    """

    delta: np.ndarray
    vcov: np.ndarray
    scheme: PartitionScheme
    instrument_kind: str
    n_subjects: int
    relevance_f: float
    weak_instruments: bool
    max_abs_moment: float
    bj_error_cross_moment: np.ndarray
    influence: np.ndarray  # (N, k) per-subject contributions to delta-hat

    @property
    def k(self) -> int:
        return self.delta.shape[0]

    @property
    def theta_a0(self) -> np.ndarray:
        """Normalized factor block as an r x m_A0 matrix (column per target group)."""
        r, m_a0 = self.scheme.r, self.scheme.m_a0
        return self.delta[: r * m_a0].reshape(m_a0, r).T

    @property
    def theta_se(self) -> np.ndarray:
        r, m_a0 = self.scheme.r, self.scheme.m_a0
        se = np.sqrt(np.diag(self.vcov)[: r * m_a0])
        return se.reshape(m_a0, r).T

    @property
    def beta(self) -> np.ndarray:
        r, m_a0 = self.scheme.r, self.scheme.m_a0
        p = (self.k - m_a0 * r) // (1 + m_a0 * r) if self.k > m_a0 * r else 0
        return self.delta[m_a0 * r: m_a0 * r + p]

    def factor_estimate(self) -> "FactorEstimate":
        return FactorEstimate(
            theta=self.theta_a0,
            groups=self.scheme.a0,
            normalization=f"aj_average over groups {list(self.scheme.aj)}",
        )


@dataclass(frozen=True)
class FactorEstimate:
    """Normalized factor values theta_j (r rows) for the listed groups."""

    theta: np.ndarray
    groups: tuple[int, ...]
    normalization: str

    def __post_init__(self):
        theta = np.atleast_2d(np.asarray(self.theta, dtype=float))
        if theta.shape[1] != len(self.groups):
            raise ValidationError(
                f"theta has {theta.shape[1]} columns for {len(self.groups)} groups"
            )
        if not np.all(np.isfinite(theta)):
            raise ValidationError("factor estimate contains non-finite entries")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "groups", tuple(int(g) for g in self.groups))


@dataclass(frozen=True)
class LoadingEstimate:
    """Per-subject loading estimates, N x r."""

    lam: np.ndarray

    def __post_init__(self):
        lam = np.asarray(self.lam, dtype=float)
        if not np.all(np.isfinite(lam)):
            raise ValidationError("loading estimate contains non-finite entries")
        object.__setattr__(self, "lam", lam)


def _iv_solve(lhs: np.ndarray, design: np.ndarray, instruments: np.ndarray):
    """Cluster-stacked 2SLS core.

    lhs (N, m), design (N, m, k), instruments (N, m, L). Returns the point
    estimate, sandwich vcov, per-subject influence rows, per-subject moment
    contributions, and the first-stage coefficient matrix.
    """
    s_zz = np.tensordot(instruments, instruments, axes=([0, 1], [0, 1]))
    s_zm = np.tensordot(instruments, design, axes=([0, 1], [0, 1]))
    s_zy = np.tensordot(instruments, lhs, axes=([0, 1], [0, 1]))
    first_stage = qr_solve(s_zz, np.column_stack([s_zm, s_zy]), label="Z'Z")
    b_m, b_y = first_stage[:, :-1], first_stage[:, -1]
    g = s_zm.T @ b_m
    delta = qr_solve(g, s_zm.T @ b_y, label="Q'W^-1 Q")
    resid = lhs - np.einsum("imk,k->im", design, delta)
    moments = np.einsum("iml,im->il", instruments, resid)  # (N, L)
    h = qr_solve(g, b_m.T, label="Q'W^-1 Q")               # (k, L)
    influence = moments @ h.T                               # (N, k)
    vcov = influence.T @ influence
    return delta, vcov, influence, moments, resid, b_m, s_zz


def _relevance_f(design: np.ndarray, b_m: np.ndarray, s_zz: np.ndarray, n_endog: int) -> float:
    """Smallest classical first-stage F across the endogenous design columns."""
    n, m, _ = design.shape
    n_obs = n * m
    n_instr = s_zz.shape[0]
    dof = max(n_obs - n_instr, 1)
    f_min = np.inf
    totals = np.einsum("imk,imk->k", design, design)
    for c in range(n_endog):
        explained = float(b_m[:, c] @ s_zz @ b_m[:, c])
        resid = max(totals[c] - explained, 0.0)
        if resid <= 0.0:
            continue  # perfect fit: maximally relevant
        f_min = min(f_min, (explained / n_instr) / (resid / dof))
    return float(f_min)


def estimate_gve(system: StackedSystem) -> GveFit:
    """Two-stage least squares on the stacked system, with a clustered sandwich.

    Solves the instrumented normal equations by pivoted QR (a condition
    estimate above 1e10 raises :class:`RankError` naming the offending cross
    product). The covariance is the plug-in cluster sandwich using the fitted
    residuals, one cluster per subject, with no degrees-of-freedom correction.
    """
    scheme = system.scheme
    n = system.lhs.shape[0]
    if system.instrument_kind == "z1" and n < system.k:
        raise RankError(
            f"N={n} subjects cannot identify k={system.k} parameters", cond=float("inf")
        )
    delta, vcov, influence, moments, resid, b_m, s_zz = _iv_solve(
        system.lhs, system.design, system.instruments
    )
    rel_f = _relevance_f(system.design, b_m, s_zz, scheme.r * scheme.m_a0)
    # (m_BJ, m_A0) average of y_{i,bj} * vhat_{i,a0}: individual instrument-group
    # columns against stacked residuals (only their averages enter the z1 moment)
    cross = system.y_bj.T @ resid / n
    return GveFit(
        delta=delta,
        vcov=vcov,
        scheme=scheme,
        instrument_kind=system.instrument_kind,
        n_subjects=n,
        relevance_f=rel_f,
        weak_instruments=bool(rel_f < WEAK_INSTRUMENT_F),
        max_abs_moment=float(np.max(np.abs(moments.sum(axis=0)))),
        bj_error_cross_moment=cross,
        influence=influence,
    )


def ratio_iv(panel: PanelData, a0: int, aj: int, bj: int, tol: float | None = None) -> float:
    """Closed-form single-factor ratio: sum_i y_bj y_a0 / sum_i y_bj y_aj.

    The three 1-based group indices must be distinct. Serves as the oracle
    for :func:`estimate_gve` in the p=0, r=1, single-group configuration.
    """
    idx = {a0, aj, bj}
    if len(idx) != 3:
        raise ValidationError(f"a0, aj, bj must be distinct, got {(a0, aj, bj)}")
    for i in (a0, aj, bj):
        if not 1 <= int(i) <= panel.n_groups:
            raise ValidationError(f"group index {i} outside 1..{panel.n_groups}")
    y = panel.y
    num = float(y[:, bj - 1] @ y[:, a0 - 1])
    den = float(y[:, bj - 1] @ y[:, aj - 1])
    if tol is None:
        scale = np.linalg.norm(y[:, bj - 1]) * np.linalg.norm(y[:, aj - 1])
        tol = 1e-12 * max(1.0, scale)
    if abs(den) < tol:
        raise ZeroDenominatorError(f"instrument cross moment {den:.3e} below tolerance")
    return num / den


def reparametrize_share(theta: float, m_r: int, tol: float = 1e-12) -> float:
    """Map theta to theta/(theta + m_r), the leading factor's share of the
    total across the target group and its normalization block."""
    den = theta + m_r
    if abs(den) < tol:
        raise ZeroDenominatorError(f"theta + m_r = {den:.3e} below tolerance")
    return theta / den


def estimate_loadings(
    residuals: ResidualPanel,
    theta: FactorEstimate,
    scheme: PartitionScheme | None = None,
) -> LoadingEstimate:
    """Per-subject least squares of residuals on the normalized factor values.

    Each subject's residual row, restricted to the groups covered by
    ``theta`` (falling back to ``scheme.a0`` when the estimate carries no
    group list), is regressed on the r factor columns. Under a noiseless
    one-factor panel this recovers the loadings up to the normalization
    average.
    """
    groups = theta.groups if theta.groups else (scheme.a0 if scheme else ())
    if not groups:
        raise ValidationError("no groups available to regress on")
    cols = np.array(groups, dtype=int) - 1
    design = theta.theta.T  # (m, r)
    m, r = design.shape
    if m < r:
        raise RankError(f"only {m} usable groups for r={r} loadings", cond=float("inf"))
    gram = design.T @ design
    lam = qr_solve(gram, design.T @ residuals.r_values[:, cols].T, label="theta'theta").T
    return LoadingEstimate(lam=lam)


def pca_factors(
    residuals: ResidualPanel,
    r: int,
    normalize_to: str = "first_group",
    aj: tuple[int, ...] | None = None,
) -> FactorEstimate:
    """Principal-components baseline on the N x J residual matrix.

    The leading r right-singular directions span the factor space; they are
    mapped onto the comparison normalization (theta_j = f_j relative to the
    first r groups, or to the aj block averages), which is invariant to the
    rotation ambiguity of the decomposition. Each direction's sign is flipped
    so its own normalization denominator is positive, making the reported
    basis deterministic.
    """
    if normalize_to not in ("first_group", "aj_average"):
        raise ValidationError(f"normalize_to must be 'first_group' or 'aj_average', got {normalize_to!r}")
    rmat = residuals.r_values
    n, j = rmat.shape
    if n <= r or j <= r:
        raise ValidationError(f"PCA needs N > r and J > r, got N={n}, J={j}, r={r}")
    try:
        _, _, vt = np.linalg.svd(rmat, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceError(f"singular value decomposition failed: {exc}") from exc
    v = vt[:r, :]  # (r, J) rows are the leading right-singular directions

    if normalize_to == "first_group":
        aj_cols = np.arange(r)
        label = f"first_group (groups {list(range(1, r + 1))})"
        denom = v[:, aj_cols]  # r x r, block size 1
    else:
        if aj is None:
            raise ValidationError("normalize_to='aj_average' requires the aj group set")
        aj_t = tuple(sorted(int(g) for g in aj))
        if len(aj_t) % r != 0 or len(aj_t) < r:
            raise ValidationError(f"aj size {len(aj_t)} incompatible with r={r}")
        aj_cols = np.array(aj_t, dtype=int) - 1
        m_r = len(aj_t) // r
        label = f"aj_average over groups {list(aj_t)}"
        denom = v[:, aj_cols].reshape(r, r, m_r).mean(axis=2)

    # sign convention: each direction's own denominator diagonal positive
    signs = np.sign(np.diag(denom))
    signs[signs == 0] = 1.0
    v = v * signs[:, None]
    denom = denom * signs[:, None]
    theta = qr_solve(denom, v, label="normalization block")
    return FactorEstimate(theta=theta, groups=tuple(range(1, j + 1)), normalization=label)
