"""Core data model: balanced panels, group partitions, averaging maps, and
the stacked reduced-form system shared by every estimator in the package.

Group indices are 1-based everywhere in the public API (groups are numbered
1..J, matching how partitions are usually written down); they are converted
to 0-based positions internally.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import OverlapError, SizeError, ValidationError

__all__ = [
    "PanelData",
    "PartitionScheme",
    "AveragingMap",
    "StackedSystem",
    "ResidualPanel",
    "make_partition",
    "averaging_map",
    "group_averages",
    "build_stacked_system",
    "residualize",
]


def _frozen(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=float, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class PanelData:
    """Balanced N x J outcome panel with an optional N x J x p regressor array.

    Parameters
    ----------
    y : ndarray, shape (N, J)
        Outcome for subject i in group j. Must be finite everywhere.
    x : ndarray, shape (N, J, p), optional
        Regressors; ``p`` may be 0 (default: empty regressor array).
    group_labels : sequence of str, optional
        Display names for the J groups.
    """

    y: np.ndarray
    x: np.ndarray | None = None
    group_labels: tuple[str, ...] | None = None

    def __post_init__(self):
        y = _frozen(np.asarray(self.y, dtype=float))
        if y.ndim != 2:
            raise ValidationError(f"y must be 2-dimensional, got ndim={y.ndim}")
        n, j = y.shape
        if n < 2 or j < 3:
            raise ValidationError(f"panel needs N >= 2 and J >= 3, got N={n}, J={j}")
        if not np.all(np.isfinite(y)):
            raise ValidationError("y contains missing or non-finite entries; only balanced panels are supported")
        x = self.x
        if x is None:
            x = np.empty((n, j, 0))
        x = _frozen(np.asarray(x, dtype=float))
        if x.ndim != 3 or x.shape[0] != n or x.shape[1] != j:
            raise ValidationError(f"x must have shape (N, J, p) = ({n}, {j}, p), got {x.shape}")
        if x.size and not np.all(np.isfinite(x)):
            raise ValidationError("x contains missing or non-finite entries")
        labels = self.group_labels
        if labels is not None:
            labels = tuple(str(s) for s in labels)
            if len(labels) != j:
                raise ValidationError(f"group_labels must have length J={j}, got {len(labels)}")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "group_labels", labels)

    @property
    def n_subjects(self) -> int:
        return self.y.shape[0]

    @property
    def n_groups(self) -> int:
        return self.y.shape[1]

    @property
    def n_regressors(self) -> int:
        return self.x.shape[2]


@dataclass(frozen=True)
class PartitionScheme:
    """One normalization: target groups ``a0``, normalization groups ``aj``
    (averaged in ``r`` blocks of ``m_r``), and instrument groups ``bj``.

    Index sets are 1-based, stored sorted ascending. Built via
    :func:`make_partition`, which validates the disjointness and size rules.
    """

    j_total: int
    r: int
    a0: tuple[int, ...]
    aj: tuple[int, ...]
    bj: tuple[int, ...]
    m_r: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "m_r", len(self.aj) // self.r if self.r else 0)

    @property
    def m_a0(self) -> int:
        return len(self.a0)

    @property
    def m_aj(self) -> int:
        return len(self.aj)

    @property
    def m_bj(self) -> int:
        return len(self.bj)


@dataclass(frozen=True)
class AveragingMap:
    """Block-averaging matrices: ``d`` stacks r blocks of m_r ones and
    ``m = (d'd)^{-1} d'`` turns an m_AJ-vector into its r block means."""

    d: np.ndarray
    m: np.ndarray


@dataclass(frozen=True)
class StackedSystem:
    """The stacked per-subject regression system for one partition.

    Per subject i the design row for the s-th target group j holds, in order:
    the theta block (r block-averaged outcomes, laid out as I (x) ybar'), the
    beta block (x_ij, p columns), and the gamma block (block-averaged
    regressors, factor-average-major then regressor). ``k`` is the parameter
    count m_A0*r*(1+p) + p.

    ``instruments`` holds either the just-identified set (kind ``"z1"``:
    block-averaged outcomes from bj plus the exogenous design columns) or the
    expanded set (kind ``"z2"``: every bj outcome column and every regressor
    column, each interacted with the equation index).
    """

    lhs: np.ndarray          # (N, m_A0)
    design: np.ndarray       # (N, m_A0, k)
    instruments: np.ndarray  # (N, m_A0, L)
    k: int
    instrument_kind: str
    scheme: PartitionScheme
    y_bj: np.ndarray = None  # (N, m_BJ) raw instrument-group outcomes, kept for diagnostics


@dataclass(frozen=True)
class ResidualPanel:
    """Outcome panel net of the regressor contribution: R = y - x'beta."""

    r_values: np.ndarray
    beta_used: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "r_values", _frozen(self.r_values))
        object.__setattr__(self, "beta_used", _frozen(np.atleast_1d(self.beta_used)))

    @property
    def n_subjects(self) -> int:
        return self.r_values.shape[0]

    @property
    def n_groups(self) -> int:
        return self.r_values.shape[1]


def _check_indices(name: str, idx, j_total: int) -> tuple[int, ...]:
    out = tuple(sorted(int(i) for i in idx))
    if len(set(out)) != len(out):
        raise ValidationError(f"{name} contains repeated indices: {idx}")
    for i in out:
        if not 1 <= i <= j_total:
            raise ValidationError(f"{name} index {i} outside 1..{j_total}")
    return out


def make_partition(j_total: int, r: int, a0, aj, bj) -> PartitionScheme:
    """Validate and build a :class:`PartitionScheme`.

    Raises
    ------
    OverlapError
        If any two of the sets intersect.
    SizeError
        If ``m_AJ < r``, ``m_BJ < r``, or r does not divide m_AJ.
    """
    if r < 1:
        raise ValidationError(f"r must be >= 1, got {r}")
    a0_t = _check_indices("a0", a0, j_total)
    aj_t = _check_indices("aj", aj, j_total)
    bj_t = _check_indices("bj", bj, j_total)
    if not a0_t:
        raise ValidationError("a0 must be nonempty")
    for name_a, set_a, name_b, set_b in (
        ("a0", a0_t, "aj", aj_t),
        ("a0", a0_t, "bj", bj_t),
        ("aj", aj_t, "bj", bj_t),
    ):
        common = set(set_a) & set(set_b)
        if common:
            raise OverlapError(f"{name_a} and {name_b} share groups {sorted(common)}")
    if len(aj_t) < r:
        raise SizeError(f"m_AJ = {len(aj_t)} < r = {r}")
    if len(bj_t) < r:
        raise SizeError(f"m_BJ = {len(bj_t)} < r = {r}")
    if len(aj_t) % r != 0:
        raise SizeError(f"r = {r} does not divide m_AJ = {len(aj_t)}")
    return PartitionScheme(j_total=j_total, r=r, a0=a0_t, aj=aj_t, bj=bj_t)


def averaging_map(scheme: PartitionScheme) -> AveragingMap:
    """Build the 0/1 stacking matrix d and its block-mean left inverse m.

    Row k of ``m`` has exactly m_r entries equal to 1/m_r, covering the k-th
    consecutive block of the aj ordering, so that ``m @ d`` is the r x r
    identity exactly.
    """
    r, m_r = scheme.r, scheme.m_r
    d = np.kron(np.eye(r), np.ones((m_r, 1)))
    m = np.kron(np.eye(r), np.full((1, m_r), 1.0 / m_r))
    return AveragingMap(d=_frozen(d), m=_frozen(m))


def _block_means(values: np.ndarray, r: int) -> np.ndarray:
    # values: (N, m) with columns already ordered; averages r consecutive
    # blocks of floor(m/r), discarding any remainder columns.
    n, m = values.shape
    width = m // r
    trimmed = values[:, : r * width]
    return trimmed.reshape(n, r, width).mean(axis=2)


def group_averages(panel: PanelData, scheme: PartitionScheme, which: str) -> np.ndarray:
    """Per-subject block averages of the outcome over ``aj`` or ``bj``.

    Groups are taken in ascending index order. For ``bj`` with r not dividing
    m_BJ, the first r*floor(m_BJ/r) groups are averaged in blocks of
    floor(m_BJ/r) and the remainder discarded.
    """
    if which not in ("aj", "bj"):
        raise ValidationError(f"which must be 'aj' or 'bj', got {which!r}")
    cols = scheme.aj if which == "aj" else scheme.bj
    idx = np.array(cols, dtype=int) - 1
    return _block_means(panel.y[:, idx], scheme.r)


def _regressor_block_means(panel: PanelData, scheme: PartitionScheme) -> np.ndarray:
    # (N, p, r): regressors averaged over the aj blocks, per factor average.
    n, p = panel.n_subjects, panel.n_regressors
    if p == 0:
        return np.empty((n, 0, scheme.r))
    idx = np.array(scheme.aj, dtype=int) - 1
    x_aj = panel.x[:, idx, :]                       # (N, m_AJ, p)
    m_r = scheme.m_r
    blocks = x_aj.reshape(n, scheme.r, m_r, p).mean(axis=2)  # (N, r, p)
    return blocks.transpose(0, 2, 1)


def build_stacked_system(panel: PanelData, scheme: PartitionScheme, kind: str = "z1") -> StackedSystem:
    """Assemble the per-subject stacked system for 2SLS estimation.

    Parameters
    ----------
    kind : {"z1", "z2"}
        ``"z1"`` uses the r block averages of the bj outcomes as instruments
        for the endogenous averages (just identified). ``"z2"`` uses every bj
        outcome column and every regressor column (m_A0*(m_BJ + p*J) columns).
    """
    if kind not in ("z1", "z2"):
        raise ValidationError(f"instrument kind must be 'z1' or 'z2', got {kind!r}")
    n = panel.n_subjects
    p = panel.n_regressors
    r, m_a0 = scheme.r, scheme.m_a0
    a0_idx = np.array(scheme.a0, dtype=int) - 1

    lhs = panel.y[:, a0_idx]                                   # (N, m_A0)
    y_aj_bar = group_averages(panel, scheme, "aj")             # (N, r)
    x_a0 = panel.x[:, a0_idx, :]                               # (N, m_A0, p)
    x_aj_bar = _regressor_block_means(panel, scheme)           # (N, p, r)
    x_aj_vec = x_aj_bar.transpose(0, 2, 1).reshape(n, r * p)   # factor-major

    k = m_a0 * r * (1 + p) + p
    design = np.zeros((n, m_a0, k))
    for s in range(m_a0):
        design[:, s, s * r:(s + 1) * r] = y_aj_bar
        design[:, s, m_a0 * r:m_a0 * r + p] = x_a0[:, s, :]
        g0 = m_a0 * r + p + s * r * p
        design[:, s, g0:g0 + r * p] = x_aj_vec

    bj_idx = np.array(scheme.bj, dtype=int) - 1
    y_bj = panel.y[:, bj_idx]                                  # (N, m_BJ)
    if kind == "z1":
        y_bj_bar = group_averages(panel, scheme, "bj")         # (N, r)
        instruments = np.zeros((n, m_a0, k))
        for s in range(m_a0):
            instruments[:, s, s * r:(s + 1) * r] = y_bj_bar
            instruments[:, s, m_a0 * r:m_a0 * r + p] = x_a0[:, s, :]
            g0 = m_a0 * r + p + s * r * p
            instruments[:, s, g0:g0 + r * p] = x_aj_vec
    else:
        x_all = panel.x.reshape(n, panel.n_groups * p)         # group-major
        per_eq = scheme.m_bj + p * panel.n_groups
        instruments = np.zeros((n, m_a0, m_a0 * per_eq))
        for s in range(m_a0):
            instruments[:, s, s * per_eq:s * per_eq + scheme.m_bj] = y_bj
            instruments[:, s, s * per_eq + scheme.m_bj:(s + 1) * per_eq] = x_all

    return StackedSystem(
        lhs=_frozen(lhs),
        design=_frozen(design),
        instruments=_frozen(instruments),
        k=k,
        instrument_kind=kind,
        scheme=scheme,
        y_bj=_frozen(y_bj),
    )


def residualize(panel: PanelData, beta) -> ResidualPanel:
    """Remove the regressor contribution: R_ij = y_ij - x_ij'beta."""
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    if beta.shape != (panel.n_regressors,):
        raise ValidationError(
            f"beta must have length p={panel.n_regressors}, got shape {beta.shape}"
        )
    if panel.n_regressors == 0:
        r_values = panel.y
    else:
        r_values = panel.y - panel.x @ beta
    return ResidualPanel(r_values=r_values, beta_used=beta)
