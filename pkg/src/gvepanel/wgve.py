"""Multi-normalization machinery: enumerating normalization partitions (with
truncation for large group counts), per-partition factor estimation on
residual panels, weighted combination, and precision-optimal weights.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass

import numpy as np

from ._linalg import qr_solve
from .errors import CapacityError, RankError, ValidationError, WeightSumError
from .gve import WEAK_INSTRUMENT_F
from .panel import PartitionScheme, ResidualPanel, make_partition

__all__ = [
    "NormalizationSet",
    "PartitionFit",
    "WgveFit",
    "enumerate_partitions",
    "truncation_q_star",
    "estimate_theta_residual",
    "combine_weighted",
    "optimal_weights",
]

logger = logging.getLogger(__name__)

_INT64_MAX = 2**63 - 1


@dataclass(frozen=True)
class NormalizationSet:
    """Ordered collection of partitions sharing the target set and r.

    ``q_total`` is the binomial count of admissible normalization subsets;
    ``q_used`` is how many are listed after the cap/truncation and the
    structural feasibility filter (the leftover instrument set must keep at
    least r groups).
    """

    partitions: tuple[PartitionScheme, ...]
    q_total: int
    q_used: int
    truncation_c: int | None = None

    def __len__(self) -> int:
        return self.q_used


@dataclass(frozen=True)
class PartitionFit:
    """One partition's factor estimate on the residual system.

    ``theta`` is stacked target-major (length m_A0*r). ``influence`` holds the
    per-subject contributions whose outer products estimate the covariance,
    including the cross-partition blocks needed for combination; ``sigma`` is
    this partition's own covariance block.
    """

    scheme: PartitionScheme
    theta: np.ndarray
    influence: np.ndarray  # (N, m_A0*r)

    @property
    def sigma(self) -> np.ndarray:
        return self.influence.T @ self.influence


@dataclass(frozen=True)
class WgveFit:
    """Weighted combination of per-partition factor estimates.

    ``vartheta`` is the combined estimate (r x m_A0); ``weights`` always sum
    to the identity. ``vcov`` is the combined covariance built from the
    per-subject influence cross products, or None when the per-partition fits
    carried no influence information.
    """

    vartheta: np.ndarray
    per_partition: tuple[PartitionFit, ...]
    weights: tuple[np.ndarray, ...]
    vcov: np.ndarray | None
    a0: tuple[int, ...]
    dropped_partitions: int = 0

    @property
    def theta_se(self) -> np.ndarray | None:
        if self.vcov is None:
            return None
        r = self.vartheta.shape[0]
        m_a0 = self.vartheta.shape[1]
        return np.sqrt(np.diag(self.vcov)).reshape(m_a0, r).T


def enumerate_partitions(
    j_total: int,
    a0,
    m_aj: int,
    r: int = 1,
    cap: int | None = None,
    mode: str = "lex",
    seed: int | None = None,
) -> NormalizationSet:
    """List normalization subsets aj of size ``m_aj`` from the non-target groups.

    Subsets are ordered lexicographically (``mode="lex"``) or drawn as a
    seeded uniform subsample without replacement (``mode="random"``), with
    bj always the complement. Subsets leaving fewer than r instrument groups
    are skipped. ``cap`` bounds how many partitions are listed; enumerating an
    uncapped collection whose total exceeds a 64-bit count raises
    :class:`CapacityError`.
    """
    if mode not in ("lex", "random"):
        raise ValidationError(f"mode must be 'lex' or 'random', got {mode!r}")
    a0_t = tuple(sorted(int(i) for i in a0))
    for i in a0_t:
        if not 1 <= i <= j_total:
            raise ValidationError(f"a0 index {i} outside 1..{j_total}")
    if m_aj < r or m_aj % r != 0:
        raise ValidationError(f"m_aj={m_aj} must be a positive multiple of r={r}")
    pool = [g for g in range(1, j_total + 1) if g not in a0_t]
    q_total = math.comb(len(pool), m_aj)
    if cap is None and q_total > _INT64_MAX:
        raise CapacityError(
            f"Q_J = C({len(pool)}, {m_aj}) = {q_total} exceeds a 64-bit count; pass a cap"
        )

    limit = q_total if cap is None else min(cap, q_total)
    partitions: list[PartitionScheme] = []
    if mode == "lex":
        for aj in itertools.combinations(pool, m_aj):
            if len(partitions) >= limit:
                break
            bj = tuple(g for g in pool if g not in aj)
            if len(bj) < r:
                continue
            partitions.append(make_partition(j_total, r, a0_t, aj, bj))
    else:
        rng = np.random.default_rng(seed)
        seen: set[tuple[int, ...]] = set()
        attempts = 0
        while len(partitions) < limit and attempts < 100 * max(limit, 1):
            attempts += 1
            aj = tuple(sorted(rng.choice(pool, size=m_aj, replace=False).tolist()))
            if aj in seen:
                continue
            seen.add(aj)
            bj = tuple(g for g in pool if g not in aj)
            if len(bj) < r:
                continue
            partitions.append(make_partition(j_total, r, a0_t, aj, bj))

    return NormalizationSet(
        partitions=tuple(partitions),
        q_total=q_total,
        q_used=len(partitions),
        truncation_c=None,
    )


def truncation_q_star(j_total: int, m_a0: int, r: int, c: int = 1) -> int:
    """How many normalization subsets to keep when J is large.

    Scales the full count Q_J = C(J - m_A0, r) by C*r!/(J - m_A0)^r, rounded
    up and clamped to [1, Q_J]; the scaled count approaches C as J grows.
    """
    if c < 1:
        raise ValidationError(f"truncation constant must be >= 1, got {c}")
    pool = j_total - m_a0
    if pool < r:
        raise ValidationError(f"no admissible subsets: J - m_A0 = {pool} < r = {r}")
    q_total = math.comb(pool, r)
    q_star = math.ceil(c * math.factorial(r) / pool**r * q_total)
    return max(1, min(q_star, q_total))


def estimate_theta_residual(residuals: ResidualPanel, scheme: PartitionScheme) -> PartitionFit:
    """Factor estimate for one partition from the slope-free residual panel.

    The aj residual columns act as the endogenous regressors and the block
    averages of the bj residual columns as instruments (just identified, so
    every target equation shares the same r x r instrumented cross product).
    Requires m_AJ = r. The returned influence rows are the per-subject
    contributions to the estimate, whose outer products give the clustered
    covariance and, across partitions, the covariance blocks used by
    :func:`combine_weighted`.
    """
    if scheme.m_aj != scheme.r:
        raise ValidationError(
            f"multi-normalization path needs m_AJ = r, got m_AJ={scheme.m_aj}, r={scheme.r}"
        )
    rmat = residuals.r_values
    n = rmat.shape[0]
    r, m_a0 = scheme.r, scheme.m_a0
    aj_idx = np.array(scheme.aj, dtype=int) - 1
    a0_idx = np.array(scheme.a0, dtype=int) - 1
    bj = rmat[:, np.array(scheme.bj, dtype=int) - 1]
    width = scheme.m_bj // r
    z = bj[:, : r * width].reshape(n, r, width).mean(axis=2)  # (N, r) block averages
    r_aj = rmat[:, aj_idx]                                    # (N, r)
    cross = z.T @ r_aj                                        # (r, r)
    rhs = z.T @ rmat[:, a0_idx]                               # (r, m_A0)
    theta = qr_solve(cross, rhs, label="Zbar'R_aj")           # (r, m_A0)
    # per-subject influence: h_ij = cross^{-1} z_i (R_i,a0_j - R_i,aj' theta_j)
    resid = rmat[:, a0_idx] - r_aj @ theta                    # (N, m_A0)
    moments = z[:, :, None] * resid[:, None, :]               # (N, r, m_A0)
    sol = qr_solve(cross, moments.transpose(1, 0, 2).reshape(r, n * m_a0), label="Zbar'R_aj")
    infl = sol.reshape(r, n, m_a0).transpose(1, 2, 0).reshape(n, m_a0 * r)
    return PartitionFit(scheme=scheme, theta=theta.T.reshape(-1), influence=infl)


def _as_weight_matrices(weights, q: int, dim: int) -> list[np.ndarray]:
    mats = []
    for w in weights:
        w = np.asarray(w, dtype=float)
        if w.ndim == 0:
            w = float(w) * np.eye(dim)
        if w.shape != (dim, dim):
            raise ValidationError(f"weight must be scalar or {dim}x{dim}, got {w.shape}")
        mats.append(w)
    if len(mats) != q:
        raise ValidationError(f"{len(mats)} weights for {q} partitions")
    return mats


def combine_weighted(per_partition, weights) -> WgveFit:
    """Combine per-partition estimates: vartheta = sum_q W_q theta_(q).

    ``weights`` may be scalars or full matrices and must sum to the identity
    (checked to 1e-8). The combined covariance sums W_q Sigma_(lq) W_l' over
    all partition pairs, with the cross blocks Sigma_(lq) estimated from the
    per-subject influence outer products; it is None when any fit lacks
    influence rows.
    """
    fits = list(per_partition)
    if not fits:
        raise ValidationError("no partition fits to combine")
    a0 = fits[0].scheme.a0
    r = fits[0].scheme.r
    for f in fits:
        if f.scheme.a0 != a0 or f.scheme.r != r:
            raise ValidationError("all partitions must share the target set and r")
    dim = len(a0) * r
    mats = _as_weight_matrices(weights, len(fits), dim)
    total = sum(mats)
    dev = float(np.max(np.abs(total - np.eye(dim))))
    if dev > 1e-8:
        raise WeightSumError(f"weights sum deviates from identity by {dev:.3e}")
    vartheta = sum(w @ f.theta for w, f in zip(mats, fits))
    vcov = None
    if all(f.influence is not None for f in fits):
        combined = sum(f.influence @ w.T for w, f in zip(mats, fits))
        vcov = combined.T @ combined
    return WgveFit(
        vartheta=vartheta.reshape(len(a0), r).T,
        per_partition=tuple(fits),
        weights=tuple(mats),
        vcov=vcov,
        a0=a0,
    )


def optimal_weights(sigma_blocks: np.ndarray) -> list[np.ndarray]:
    """Precision-optimal combination weights from the Q x Q covariance grid.

    ``sigma_blocks[q, l]`` is the d x d covariance block between partitions q
    and l. Returns W_q = [(i (x) I)' S^{-1} (i (x) I)]^{-1} [(i (x) I)' S^{-1}]_q,
    which minimizes the combined covariance among weights summing to the
    identity (they do so by construction).
    """
    sigma_blocks = np.asarray(sigma_blocks, dtype=float)
    if sigma_blocks.ndim != 4 or sigma_blocks.shape[0] != sigma_blocks.shape[1] or \
            sigma_blocks.shape[2] != sigma_blocks.shape[3]:
        raise ValidationError(f"sigma_blocks must be (Q, Q, d, d), got {sigma_blocks.shape}")
    q, _, d, _ = sigma_blocks.shape
    big = sigma_blocks.transpose(0, 2, 1, 3).reshape(q * d, q * d)
    stack = np.tile(np.eye(d), (q, 1))  # (i (x) I), shape (q*d, d)
    try:
        sinv_stack = qr_solve(big, stack, label="stacked covariance")
    except RankError as exc:
        raise RankError(
            f"stacked covariance grid is singular; cannot form optimal weights: {exc}",
            cond=exc.cond,
        ) from exc
    denom = stack.T @ sinv_stack  # (d, d)
    weights = []
    for i in range(q):
        block = sinv_stack[i * d:(i + 1) * d, :].T  # [(i (x) I)' S^{-1}]_q
        weights.append(qr_solve(denom, block, label="weight denominator"))
    return weights


def fit_wgve(
    residuals: ResidualPanel,
    norm_set: NormalizationSet,
    weights: str = "equal",
    theta_solver=None,
    relevance_floor: float = WEAK_INSTRUMENT_F,
) -> WgveFit:
    """Estimate every listed partition and combine.

    ``theta_solver`` defaults to :func:`estimate_theta_residual`; passing a
    different callable (e.g. a penalized first stage) swaps the per-partition
    estimator while keeping enumeration, filtering, and combination. Partitions
    whose instrumented first stage is degenerate (relevance below
    ``relevance_floor`` or a rank failure) are dropped with a logged count.
    With ``weights="optimal"`` the covariance grid from the influence rows
    feeds :func:`optimal_weights`; otherwise weights are equal.
    """
    if weights not in ("equal", "optimal"):
        raise ValidationError(f"weights must be 'equal' or 'optimal', got {weights!r}")
    solver = theta_solver or estimate_theta_residual
    fits: list[PartitionFit] = []
    dropped = 0
    for scheme in norm_set.partitions:
        try:
            fit = solver(residuals, scheme)
        except RankError:
            dropped += 1
            continue
        if not isinstance(fit, PartitionFit):
            fit = PartitionFit(scheme=scheme, theta=np.asarray(fit, dtype=float), influence=None)
        if _first_stage_relevance(residuals, scheme) < relevance_floor:
            dropped += 1
            continue
        fits.append(fit)
    if dropped:
        logger.info("dropped %d of %d partitions with degenerate first stages",
                    dropped, len(norm_set.partitions))
    if not fits:
        raise RankError("every partition was dropped as degenerate", cond=float("inf"))
    dim = len(fits[0].scheme.a0) * fits[0].scheme.r
    if weights == "equal":
        w = [np.eye(dim) / len(fits)] * len(fits)
    else:
        if any(f.influence is None for f in fits):
            raise ValidationError("optimal weights need influence rows from every partition fit")
        n_fit = len(fits)
        grid = np.empty((n_fit, n_fit, dim, dim))
        for a in range(n_fit):
            for b in range(n_fit):
                grid[a, b] = fits[a].influence.T @ fits[b].influence
        w = optimal_weights(grid)
    out = combine_weighted(fits, w)
    return WgveFit(
        vartheta=out.vartheta,
        per_partition=out.per_partition,
        weights=out.weights,
        vcov=out.vcov,
        a0=out.a0,
        dropped_partitions=dropped,
    )


def _first_stage_relevance(residuals: ResidualPanel, scheme: PartitionScheme) -> float:
    """Classical F of the aj residual columns on the bj block averages."""
    rmat = residuals.r_values
    n = rmat.shape[0]
    r = scheme.r
    bj = rmat[:, np.array(scheme.bj, dtype=int) - 1]
    width = scheme.m_bj // r
    z = bj[:, : r * width].reshape(n, r, width).mean(axis=2)
    r_aj = rmat[:, np.array(scheme.aj, dtype=int) - 1]
    gram = z.T @ z
    try:
        coef = qr_solve(gram, z.T @ r_aj, label="first-stage gram")
    except RankError:
        return 0.0
    f_min = np.inf
    dof = max(n - r, 1)
    for c in range(r_aj.shape[1]):
        explained = float(coef[:, c] @ gram @ coef[:, c])
        total = float(r_aj[:, c] @ r_aj[:, c])
        resid = max(total - explained, 0.0)
        if resid <= 0.0:
            continue
        f_min = min(f_min, (explained / r) / (resid / dof))
    return float(f_min)
