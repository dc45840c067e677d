"""Design and penalty blocks for semiparametric model terms.

Each term contributes a design matrix and a matching penalty: cubic
P-splines for univariate trends, a low-rank isotropic thin-plate basis
for spatial surfaces, and identity-penalized indicator blocks for
district-level random effects. Sum-to-zero constraints are absorbed by
reparameterization so constrained terms simply lose one column.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.interpolate import BSpline
from scipy.spatial.distance import cdist

__all__ = [
    "BasisBlock",
    "SmoothSpec",
    "pspline_block",
    "thinplate_block",
    "ridge_block",
    "absorb_sum_to_zero",
]

RANK_TOL = 1e-10  # singular values below this times the max count as zero
PSD_TOL = 1e-9


class BasisError(ValueError):
    pass


def _nullspace_dim(S):
    if S.size == 0:
        return 0
    ev = np.linalg.eigvalsh(S)
    top = max(ev.max(), 0.0)
    if top == 0.0:
        return S.shape[0]
    return int(np.sum(ev < RANK_TOL * top))


@dataclass
class BasisBlock:
    """One model term: design columns, penalty, and its null space size.

    ``rowfn`` maps new covariate values to design rows in the block's
    parameterization, enabling prediction at unobserved points.
    """

    design: np.ndarray
    penalty: np.ndarray
    nullspace_dim: int
    label: str
    rowfn: object = None
    levels: list = field(default_factory=list)

    def __post_init__(self):
        self.design = np.asarray(self.design, dtype=float)
        S = np.asarray(self.penalty, dtype=float)
        scale = max(1.0, np.abs(S).max()) if S.size else 1.0
        if S.size and np.abs(S - S.T).max() > 1e-12 * scale:
            raise BasisError(f"{self.label}: penalty is not symmetric")
        S = 0.5 * (S + S.T)
        self.penalty = S
        if S.shape[0] != self.design.shape[1]:
            raise BasisError(f"{self.label}: penalty dimension mismatch")
        if S.size:
            ev = np.linalg.eigvalsh(S)
            if ev.min() < -PSD_TOL * max(ev.max(), 1.0):
                raise BasisError(f"{self.label}: penalty is not positive semidefinite")
            if _nullspace_dim(S) != self.nullspace_dim:
                raise BasisError(
                    f"{self.label}: declared null space {self.nullspace_dim} "
                    f"but penalty has {_nullspace_dim(S)} zero eigenvalues"
                )

    @property
    def ncol(self):
        return self.design.shape[1]

    def rows(self, xnew):
        if self.rowfn is None:
            raise BasisError(f"{self.label}: block has no prediction rule")
        return self.rowfn(xnew)


@dataclass
class SmoothSpec:
    kind: str  # pspline | thinplate | ridge
    k: int = 20
    degree: int = 3
    diff_order: int = 2
    constraint: bool = False

    def __post_init__(self):
        if self.kind not in ("pspline", "thinplate", "ridge"):
            raise BasisError(f"unknown smooth kind {self.kind!r}")
        if self.kind == "pspline":
            if self.k < 3:
                raise BasisError("spline basis needs k >= 3")
            if self.diff_order >= self.k:
                raise BasisError("difference order must be below basis size")


def _bspline_knots(xmin, xmax, k, degree):
    # endpoints exact so boundary evaluations stay inside the base interval
    inner = np.linspace(xmin, xmax, k - degree + 1)
    h = inner[1] - inner[0]
    ext = h * np.arange(1, degree + 1)
    return np.concatenate([xmin - ext[::-1], inner, xmax + ext])


def _bspline_rows(x, knots, degree, xmin, xmax):
    x = np.clip(np.asarray(x, dtype=float), xmin, xmax)
    return BSpline.design_matrix(x, knots, degree, extrapolate=False).toarray()


def pspline_block(x, spec: SmoothSpec, label="trend") -> BasisBlock:
    """Cubic B-spline design on equally spaced knots with a difference penalty.

    Knots span [min x, max x]; the penalty is D'D for the order-
    ``spec.diff_order`` difference matrix D, leaving polynomials up to that
    order unpenalized. Evaluation outside the data range clamps to the
    boundary.
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise BasisError(f"{label}: covariate contains non-finite values")
    k, degree = spec.k, spec.degree
    if k <= degree:
        raise BasisError(f"{label}: need k > degree ({degree}) basis functions")
    n_distinct = np.unique(x).size
    if k > n_distinct:
        raise BasisError(
            f"{label}: k={k} exceeds the {n_distinct} distinct covariate values"
        )
    xmin, xmax = float(x.min()), float(x.max())
    knots = _bspline_knots(xmin, xmax, k, degree)
    design = _bspline_rows(x, knots, degree, xmin, xmax)
    D = np.diff(np.eye(k), n=spec.diff_order, axis=0)
    S = D.T @ D

    def rowfn(xnew):
        return _bspline_rows(xnew, knots, degree, xmin, xmax)

    return BasisBlock(design, S, nullspace_dim=spec.diff_order, label=label,
                      rowfn=rowfn)


def _tps_eta(r):
    r = np.asarray(r, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = r * r * np.log(r)
    return np.where(r > 0.0, v, 0.0) / (8.0 * np.pi)


def thinplate_block(coords, spec: SmoothSpec, label="surface") -> BasisBlock:
    """Low-rank thin-plate spline surface over 2-D coordinates.

    The full radial basis eta(r) = r^2 log(r) / (8 pi) at every data site is
    truncated to the ``spec.k`` eigenvectors of largest magnitude; the linear
    polynomial 1, x1, x2 is kept unpenalized, and the side condition tying
    radial coefficients to the polynomial space is absorbed by a QR
    reparameterization. The resulting quadratic form equals the integrated
    squared second derivatives of the represented surface.
    """
    X = np.asarray(coords, dtype=float)
    if X.ndim != 2 or X.shape[1] != 2:
        raise BasisError(f"{label}: coordinates must be n x 2")
    n, k = X.shape[0], spec.k
    if k < 4:
        raise BasisError(f"{label}: thin-plate rank must be at least 4")
    if np.unique(X, axis=0).shape[0] < k:
        raise BasisError(
            f"{label}: only {np.unique(X, axis=0).shape[0]} distinct sites "
            f"for requested rank {k}"
        )
    E = _tps_eta(cdist(X, X))
    T = np.column_stack([np.ones(n), X[:, 0], X[:, 1]])
    lam, U = np.linalg.eigh(E)
    order = np.argsort(-np.abs(lam), kind="stable")
    lam, U = lam[order], U[:, order]
    if np.sum(np.abs(lam) > RANK_TOL * np.abs(lam).max()) < k:
        raise BasisError(f"{label}: radial system is rank-deficient below k={k}")
    lam_k, U_k = lam[:k], U[:, :k]
    Q, _ = np.linalg.qr(U_k.T @ T, mode="complete")
    Z = Q[:, 3:]  # null space of the polynomial side condition
    UZ = U_k @ Z
    design = np.column_stack([(U_k * lam_k) @ Z, T])
    S_spline = Z.T @ (Z * lam_k[:, None])
    q = design.shape[1]
    S = np.zeros((q, q))
    S[: k - 3, : k - 3] = 0.5 * (S_spline + S_spline.T)

    def rowfn(new_coords):
        Xn = np.asarray(new_coords, dtype=float).reshape(-1, 2)
        En = _tps_eta(cdist(Xn, X))
        Tn = np.column_stack([np.ones(Xn.shape[0]), Xn[:, 0], Xn[:, 1]])
        return np.column_stack([En @ UZ, Tn])

    return BasisBlock(design, S, nullspace_dim=3, label=label, rowfn=rowfn)


def ridge_block(labels, label="district") -> BasisBlock:
    """Indicator column per level with an identity penalty (random effect)."""
    labels = list(labels)
    levels = list(dict.fromkeys(labels))
    if len(levels) < 2:
        raise BasisError(f"{label}: ridge block needs at least 2 levels")
    index = {lv: j for j, lv in enumerate(levels)}
    design = np.zeros((len(labels), len(levels)))
    for i, lv in enumerate(labels):
        design[i, index[lv]] = 1.0
    S = np.eye(len(levels))

    def rowfn(new_labels):
        rows = np.zeros((len(new_labels), len(levels)))
        for i, lv in enumerate(new_labels):
            if lv not in index:
                raise BasisError(f"{label}: unseen level {lv!r}")
            rows[i, index[lv]] = 1.0
        return rows

    return BasisBlock(design, S, nullspace_dim=0, label=label, rowfn=rowfn,
                      levels=levels)


def absorb_sum_to_zero(block: BasisBlock) -> BasisBlock:
    """Reparameterize so every representable term sums to zero over the data.

    The single constraint (column sums) is rotated onto the first
    coordinate by a QR decomposition and dropped; the penalty transforms
    congruently and any prediction rule is composed with the same map.
    """
    if block.ncol < 2:
        raise BasisError(f"{block.label}: cannot constrain a single column")
    c = block.design.sum(axis=0)
    norm = np.linalg.norm(c)
    if norm <= 1e-12 * max(1.0, np.abs(block.design).max() * len(block.design)):
        raise BasisError(f"{block.label}: constraint is vacuous for this design")
    Q, _ = np.linalg.qr(c[:, None] / norm, mode="complete")
    Z = Q[:, 1:]
    design = block.design @ Z
    S = Z.T @ block.penalty @ Z
    S = 0.5 * (S + S.T)
    old_rowfn = block.rowfn
    rowfn = (lambda xnew: old_rowfn(xnew) @ Z) if old_rowfn is not None else None
    return BasisBlock(design, S, nullspace_dim=_nullspace_dim(S),
                      label=block.label, rowfn=rowfn, levels=list(block.levels))
