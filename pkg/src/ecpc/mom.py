"""Moment-based linear systems for group-level prior parameters.

From an initial ridge fit (coefficients ``beta_tilde``, weights ``W`` and
diagonal precision ``Omega``) the shrinkage matrix
``C = (X'WX + Omega)^{-1} X'WX`` and the variance vector
``v = diag((X'WX + Omega)^{-1} X'WX (X'WX + Omega)^{-1})`` summarise the
estimator's first two moments.  Group-averaging those moments yields small
linear systems whose solutions are group-level prior variances, means and
co-data weights.

For p > n both quantities are built through an n x n kernel; C is kept in
low-rank factor form and never materialised beyond a configurable size, with
the group sums streaming over row blocks.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .codata import CoDataMatrix, GroupSplit, Grouping, build_codata_matrix
from .errors import DataError, SingularSystemError

__all__ = [
    "MomentCore",
    "MomentSystem",
    "compute_moment_core",
    "build_variance_system",
    "build_mean_system",
    "build_split_systems",
    "build_grouping_weight_system",
]


@dataclass
class MomentCore:
    """Shrinkage matrix, variance vector and initial estimate of a ridge fit.

    ``C`` is materialised only for small problems; otherwise it is held as a
    low-rank product ``Lc @ Rc`` restricted to the penalised block (columns
    of unpenalised covariates are unit vectors and decouple from the group
    systems).
    """

    beta_tilde: np.ndarray
    v: np.ndarray
    pen_mask: np.ndarray
    C: np.ndarray | None = None
    _Lc: np.ndarray | None = None
    _Rc: np.ndarray | None = None
    block_size: int = 1024

    @property
    def p(self) -> int:
        return len(self.beta_tilde)

    @property
    def pen_idx(self) -> np.ndarray:
        return np.flatnonzero(self.pen_mask)

    @property
    def n_pen(self) -> int:
        return int(self.pen_mask.sum())

    def iter_row_blocks(self):
        """Yield (penalised row indices, C rows over penalised columns)."""
        pen = self.pen_idx
        if self.C is not None:
            yield np.arange(len(pen)), self.C[np.ix_(pen, pen)]
            return
        for start in range(0, len(pen), self.block_size):
            rows = np.arange(start, min(start + self.block_size, len(pen)))
            yield rows, self._Lc[rows] @ self._Rc

    def matvec_pen(self, x: np.ndarray) -> np.ndarray:
        """C restricted to the penalised block applied to a vector."""
        pen = self.pen_idx
        if self.C is not None:
            return self.C[np.ix_(pen, pen)] @ x
        return self._Lc @ (self._Rc @ x)


def _dense_core(X, w, omega, beta_tilde):
    n, p = X.shape
    M = (X.T * w) @ X + np.diag(omega)
    try:
        c, low = cho_factor(M)
    except np.linalg.LinAlgError:
        raise SingularSystemError(
            f"moment-core system singular (cond={np.linalg.cond(M):.3e})"
        )
    Minv = cho_solve((c, low), np.eye(p))
    C = np.eye(p) - Minv * omega[None, :]
    v = np.diag(Minv) - (Minv**2 * omega[None, :]).sum(axis=1)
    return C, v


def _factor_core(X, w, omega, pen, block_size):
    """Low-rank factors of the penalised block of C, plus the v vector."""
    n, p = X.shape
    unp = ~pen
    Xp = X[:, pen]
    om = omega[pen]
    sw = np.sqrt(w)
    Sb = (sw[:, None] * Xp) / np.sqrt(om)[None, :]  # W^{1/2} X_P Omega^{-1/2}
    K = np.eye(n) + Sb @ Sb.T
    try:
        cK = cho_factor(K)
    except np.linalg.LinAlgError:
        raise SingularSystemError(
            f"moment-core kernel singular (cond={np.linalg.cond(K):.3e})"
        )
    Sbb = Sb / np.sqrt(om)[None, :]  # W^{1/2} X_P Omega^{-1}
    KinvSbb = cho_solve(cK, Sbb)  # n x p_pen; M_PP^{-1} = Omega^{-1} - Sbb' K^{-1} Sbb

    if unp.any():
        Xu = X[:, unp]
        M_pu = (Xp.T * w) @ Xu
        M_uu = (Xu.T * w) @ Xu
        E = M_pu / om[:, None] - Sbb.T @ (KinvSbb @ M_pu)  # M_PP^{-1} M_PU
        schur = M_uu - M_pu.T @ E
        try:
            cS = cho_factor(schur)
        except np.linalg.LinAlgError:
            raise SingularSystemError("unpenalised block not identifiable")
        ScEt = cho_solve(cS, E.T)  # u x p_pen
        Lc = np.hstack([Sbb.T, -E])
        Rc = np.vstack([KinvSbb * om[None, :], ScEt * om[None, :]])
    else:
        E = ScEt = None
        Lc = Sbb.T
        Rc = KinvSbb * om[None, :]

    # v over penalised rows, streamed: v_k = Minv_kk - sum_l om_l Minv_kl^2
    p_pen = int(pen.sum())
    v_pen = np.zeros(p_pen)
    for start in range(0, p_pen, block_size):
        rows = np.arange(start, min(start + block_size, p_pen))
        Minv_rows = -Sbb.T[rows] @ KinvSbb
        if E is not None:
            Minv_rows += E[rows] @ ScEt
        Minv_rows[np.arange(len(rows)), rows] += 1.0 / om[rows]
        v_pen[rows] = Minv_rows[np.arange(len(rows)), rows] - (
            Minv_rows**2 * om[None, :]
        ).sum(axis=1)

    v = np.zeros(p)
    v[pen] = v_pen
    C_up = None
    if unp.any():
        Minv_up = -ScEt  # rows of M^{-1} over unpenalised, penalised columns
        Minv_uu = cho_solve(cS, np.eye(int(unp.sum())))
        v[unp] = np.diag(Minv_uu) - (Minv_up**2 * om[None, :]).sum(axis=1)
        C_up = ScEt * om[None, :]  # C rows over unpenalised, penalised columns
    return Lc, Rc, v, C_up


def compute_moment_core(
    X,
    W,
    precision_diag,
    beta_tilde,
    materialize_threshold: int = 5000,
    block_size: int = 1024,
) -> MomentCore:
    """Build the moment core from the initial ridge fit's ingredients.

    ``W`` holds the per-sample information-scale weights and
    ``precision_diag`` the diagonal prior precision used for that fit (zero
    entries mark unpenalised covariates).
    """
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    w = np.broadcast_to(np.asarray(W, dtype=float), (n,))
    omega = np.asarray(precision_diag, dtype=float)
    beta_tilde = np.asarray(beta_tilde, dtype=float)
    if len(omega) != p or len(beta_tilde) != p:
        raise DataError("precision and beta_tilde must have one entry per column of X")
    pen = omega > 0

    if p <= n and p <= materialize_threshold:
        C, v = _dense_core(X, w, omega, beta_tilde)
        return MomentCore(beta_tilde=beta_tilde, v=v, pen_mask=pen, C=C, block_size=block_size)

    Lc, Rc, v, C_up = _factor_core(X, w, omega, pen, block_size)
    core = MomentCore(
        beta_tilde=beta_tilde, v=v, pen_mask=pen, _Lc=Lc, _Rc=Rc, block_size=block_size
    )
    if p <= materialize_threshold:
        # materialise the full C for direct inspection; unpenalised columns
        # are exact unit vectors
        C = np.zeros((p, p))
        pen_idx = np.flatnonzero(pen)
        C[np.ix_(pen_idx, pen_idx)] = Lc @ Rc
        if (~pen).any():
            unp_idx = np.flatnonzero(~pen)
            C[np.ix_(unp_idx, pen_idx)] = C_up
            C[unp_idx, unp_idx] = 1.0
        core.C = C
    return core


@dataclass
class MomentSystem:
    """Left-hand matrix and right-hand vector of a group-level linear system."""

    A: np.ndarray
    b: np.ndarray
    group_labels: tuple[str, ...]


def _group_average(values: np.ndarray, groups) -> np.ndarray:
    return np.array([values[list(g)].mean() for g in groups])


def build_variance_system(
    core: MomentCore,
    Z: CoDataMatrix,
    grouping: Grouping,
    prior_mean=None,
    mu_tilde=None,
    tau_global: float = 1.0,
) -> MomentSystem:
    """Second-moment system whose unknowns are the group prior weights.

    ``A[g,h] = tau_global / |G_g| * sum_{k in G_g} sum_l C_kl^2 Z[l,h]`` and
    ``b[g]`` averages ``beta_tilde^2 - v`` (minus the squared-mean term when
    a non-zero prior mean is supplied) over group ``g``.  With the default
    ``tau_global=1`` this is the raw group-averaged system; passing the
    estimated global variance puts the unknowns on the local-variance scale
    with non-informative target 1.
    """
    groups = grouping.groups
    if any(len(g) == 0 for g in groups):
        raise DataError("empty group in variance system")
    Zm = Z.entries
    p_pen = core.n_pen
    if Zm.shape[0] != p_pen:
        raise DataError("co-data matrix rows must match the penalised covariate count")
    beta = core.beta_tilde[core.pen_idx]
    v = core.v[core.pen_idx]

    mean_term = np.zeros(p_pen)
    if prior_mean is not None:
        mu = np.asarray(prior_mean, dtype=float)
        mt = np.zeros(p_pen) if mu_tilde is None else np.asarray(mu_tilde, dtype=float)
        # ((I - C) mu_tilde + C Z mu)^2
        czmu = core.matvec_pen(Zm @ mu)
        cmt = core.matvec_pen(mt)
        mean_term = (mt - cmt + czmu) ** 2

    G = len(groups)
    A = np.zeros((G, Zm.shape[1]))
    resid = beta**2 - v - mean_term
    b = np.zeros(G)
    member_rows = [np.asarray(g) for g in groups]
    for rows, C_rows in core.iter_row_blocks():
        contrib = (C_rows**2) @ Zm
        for g, members in enumerate(member_rows):
            sel = members[(members >= rows[0]) & (members <= rows[-1])]
            if sel.size:
                A[g] += contrib[sel - rows[0]].sum(axis=0)
    sizes = np.array([len(g) for g in groups], dtype=float)
    A = tau_global * A / sizes[:, None]
    for g, members in enumerate(member_rows):
        b[g] = resid[members].mean()
    labels = tuple(f"{grouping.name}:{g}" for g in range(G))
    return MomentSystem(A=A, b=b, group_labels=labels)


def build_mean_system(
    core: MomentCore,
    Z: CoDataMatrix,
    grouping: Grouping,
    mu_tilde=None,
) -> MomentSystem:
    """First-moment system for group prior means: ``A = P C Z``."""
    groups = grouping.groups
    Zm = Z.entries
    p_pen = core.n_pen
    beta = core.beta_tilde[core.pen_idx]
    mt = np.zeros(p_pen) if mu_tilde is None else np.asarray(mu_tilde, dtype=float)
    G = len(groups)
    A = np.zeros((G, Zm.shape[1]))
    member_rows = [np.asarray(g) for g in groups]
    for rows, C_rows in core.iter_row_blocks():
        contrib = C_rows @ Zm
        for g, members in enumerate(member_rows):
            sel = members[(members >= rows[0]) & (members <= rows[-1])]
            if sel.size:
                A[g] += contrib[sel - rows[0]].sum(axis=0)
    sizes = np.array([len(g) for g in groups], dtype=float)
    A = A / sizes[:, None]
    rhs = beta - (mt - core.matvec_pen(mt))
    b = _group_average(rhs, groups)
    labels = tuple(f"{grouping.name}:{g}" for g in range(G))
    return MomentSystem(A=A, b=b, group_labels=labels)


def build_split_systems(
    core: MomentCore,
    grouping: Grouping,
    split: GroupSplit,
    Z: CoDataMatrix | None = None,
    tau_global: float = 1.0,
) -> tuple[MomentSystem, MomentSystem]:
    """Variance systems restricted to the in- and out-halves of each group.

    Row sums run over the half's members only; the column structure (and
    hence the unknowns) stays per original group.  A group with an empty
    half has its equation dropped from that half's system, with a warning.
    """
    if Z is None:
        Z = build_codata_matrix(grouping)
    Zm = Z.entries
    beta = core.beta_tilde[core.pen_idx]
    v = core.v[core.pen_idx]
    resid = beta**2 - v

    def restricted(parts, tag):
        keep = [g for g, part in enumerate(parts) if len(part) > 0]
        if len(keep) < len(parts):
            warnings.warn(
                f"{len(parts) - len(keep)} group(s) with empty {tag}-part dropped",
                stacklevel=3,
            )
        member_rows = [np.asarray(parts[g]) for g in keep]
        A = np.zeros((len(keep), Zm.shape[1]))
        for rows, C_rows in core.iter_row_blocks():
            contrib = (C_rows**2) @ Zm
            for gi, members in enumerate(member_rows):
                sel = members[(members >= rows[0]) & (members <= rows[-1])]
                if sel.size:
                    A[gi] += contrib[sel - rows[0]].sum(axis=0)
        sizes = np.array([len(m) for m in member_rows], dtype=float)
        A = tau_global * A / sizes[:, None]
        b = np.array([resid[m].mean() for m in member_rows])
        labels = tuple(f"{grouping.name}:{g}:{tag}" for g in keep)
        return MomentSystem(A=A, b=b, group_labels=labels)

    return restricted(split.in_groups, "in"), restricted(split.out_groups, "out")


def build_grouping_weight_system(
    core: MomentCore,
    codata_matrices: list[CoDataMatrix],
    groupings: list[Grouping],
    gamma_hats: list[np.ndarray],
    tau_global: float,
) -> MomentSystem:
    """Pooled system for the per-grouping weights.

    All groups of all groupings are pooled into one variance system; fixing
    the fitted group weights turns it into ``G_total`` equations in the D
    grouping weights, with column d equal to
    ``tau_global * A_pool[:, block d] @ gamma_hat_d``.
    """
    if not (len(codata_matrices) == len(groupings) == len(gamma_hats)):
        raise DataError("one co-data matrix and weight vector per grouping required")
    for Z, grouping, gam in zip(codata_matrices, groupings, gamma_hats):
        if Z.entries.shape[1] != len(gam):
            raise DataError(
                f"grouping '{grouping.name}': {Z.entries.shape[1]} groups but "
                f"{len(gam)} fitted weights"
            )
    Z_all = np.hstack([Z.entries for Z in codata_matrices])
    beta = core.beta_tilde[core.pen_idx]
    v = core.v[core.pen_idx]
    resid = beta**2 - v

    all_groups = []
    labels = []
    for grouping in groupings:
        for g, members in enumerate(grouping.groups):
            all_groups.append(np.asarray(members))
            labels.append(f"{grouping.name}:{g}")
    G_total = len(all_groups)
    A_pool = np.zeros((G_total, Z_all.shape[1]))
    for rows, C_rows in core.iter_row_blocks():
        contrib = (C_rows**2) @ Z_all
        for gi, members in enumerate(all_groups):
            sel = members[(members >= rows[0]) & (members <= rows[-1])]
            if sel.size:
                A_pool[gi] += contrib[sel - rows[0]].sum(axis=0)
    sizes = np.array([len(m) for m in all_groups], dtype=float)
    A_pool /= sizes[:, None]

    D = len(groupings)
    A_tilde = np.zeros((G_total, D))
    offset = 0
    for d, (Z, gam) in enumerate(zip(codata_matrices, gamma_hats)):
        Gd = Z.entries.shape[1]
        A_tilde[:, d] = tau_global * A_pool[:, offset : offset + Gd] @ np.asarray(gam)
        offset += Gd
    b = np.array([resid[m].mean() for m in all_groups])
    return MomentSystem(A=A_tilde, b=b, group_labels=tuple(labels))
