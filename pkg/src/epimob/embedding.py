"""Embed districts in a two-dimensional social space.

Pairwise connectedness scores are inverted into dissimilarities, made
Euclidean by the smallest additive constant, embedded by classical
metric multidimensional scaling, and finally aligned to geographic
coordinates through a closed-form similarity (Procrustes) transform so
the axes are interpretable on a map.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ConnectednessMatrix",
    "DistanceMatrix",
    "EmbeddingCoordinates",
    "SimilarityTransform",
    "connectedness_to_distance",
    "additive_constant",
    "classical_mds",
    "procrustes_align",
    "embed_and_align",
    "read_connectedness_csv",
    "write_coordinates_csv",
]

PSD_TOL = 1e-9


class EmbeddingError(ValueError):
    pass


@dataclass
class ConnectednessMatrix:
    """Symmetric nonnegative connectedness scores between districts."""

    matrix: np.ndarray
    district_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=float)
        M = self.matrix
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise EmbeddingError("connectedness matrix must be square")
        if not np.allclose(M, M.T, rtol=0, atol=1e-10 * max(1.0, np.abs(M).max())):
            raise EmbeddingError("connectedness matrix must be symmetric")
        off = M[~np.eye(M.shape[0], dtype=bool)]
        if np.any(off <= 0):
            i, j = _first_bad_pair(M)
            raise EmbeddingError(f"non-positive connectedness between {i} and {j}")


@dataclass
class DistanceMatrix:
    """Symmetric dissimilarities with zero diagonal."""

    matrix: np.ndarray
    additive_constant_applied: float = 0.0
    district_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=float)
        D = self.matrix
        if D.ndim != 2 or D.shape[0] != D.shape[1]:
            raise EmbeddingError("distance matrix must be square")
        if not np.allclose(D, D.T, rtol=0, atol=1e-10 * max(1.0, np.abs(D).max())):
            raise EmbeddingError("distance matrix must be symmetric")
        if np.any(np.abs(np.diag(D)) > 0):
            raise EmbeddingError("distance matrix must have zero diagonal")
        if self.additive_constant_applied < 0:
            raise EmbeddingError("additive constant must be nonnegative")

    @property
    def n(self):
        return self.matrix.shape[0]


@dataclass
class EmbeddingCoordinates:
    """Centered MDS coordinates with retained eigenvalues and stress."""

    coords: np.ndarray  # (n, p)
    eigenvalues: np.ndarray  # (p,)
    stress: float
    district_ids: list[str] = field(default_factory=list)


@dataclass
class SimilarityTransform:
    """Dilation, orthogonal map and translation minimizing the residual."""

    rho: float
    rotation: np.ndarray  # (2, 2) orthogonal, reflections allowed
    translation: np.ndarray  # (2,)
    r_squared: float  # residual sum of squares at the optimum

    def apply(self, coords):
        coords = np.asarray(coords, float)
        return self.rho * coords @ self.rotation + self.translation


def _first_bad_pair(M):
    n = M.shape[0]
    for i in range(n):
        for j in range(n):
            if i != j and M[i, j] <= 0:
                return i, j
    return -1, -1


def connectedness_to_distance(C: ConnectednessMatrix) -> DistanceMatrix:
    """Reciprocal transform: strongly connected pairs become close."""
    with np.errstate(divide="ignore"):
        D = 1.0 / C.matrix
    np.fill_diagonal(D, 0.0)
    D = 0.5 * (D + D.T)
    return DistanceMatrix(D, additive_constant_applied=0.0,
                          district_ids=list(C.district_ids))


def _gram(D2):
    n = D2.shape[0]
    J = np.eye(n) - np.ones((n, n)) / n
    return -0.5 * J @ D2 @ J


def _min_gram_eigenvalue(D, c):
    Dc = D + c
    np.fill_diagonal(Dc, 0.0)
    return np.linalg.eigvalsh(_gram(Dc ** 2)).min()


def additive_constant(D: DistanceMatrix, tol=PSD_TOL):
    """Smallest constant whose off-diagonal addition makes D Euclidean.

    Uses the eigenvalue characterization: the constant is the largest real
    eigenvalue of the 2n x 2n block matrix [[0, 2*B1], [-I, -4*B2]] built
    from the centered Gram matrices of squared (B1) and plain (B2)
    dissimilarities. The result is verified by checking the minimum
    eigenvalue of the corrected Gram matrix; a bisection refines it if the
    verification fails.
    """
    Dm = D.matrix
    n = Dm.shape[0]
    if _min_gram_eigenvalue(Dm, 0.0) >= -tol:
        return 0.0
    B1 = _gram(Dm ** 2)
    B2 = _gram(Dm)
    block = np.block([
        [np.zeros((n, n)), 2.0 * B1],
        [-np.eye(n), -4.0 * B2],
    ])
    ev = np.linalg.eigvals(block)
    real = ev.real[np.abs(ev.imag) <= 1e-8 * (1.0 + np.abs(ev).max())]
    c = float(real.max()) if real.size else float(ev.real.max())
    c = max(c, 0.0)
    if _min_gram_eigenvalue(Dm, c) >= -tol:
        return c
    # fall back: expand until PSD, then bisect down to the boundary
    hi = max(c, Dm.max(), 1.0)
    while _min_gram_eigenvalue(Dm, hi) < -tol:
        hi *= 2.0
        if hi > 1e12 * (1.0 + Dm.max()):
            raise EmbeddingError("additive constant search failed to bracket")
    lo = 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _min_gram_eigenvalue(Dm, mid) >= -tol:
            hi = mid
        else:
            lo = mid
        if hi - lo < 1e-12 * (1.0 + hi):
            break
    return hi


def apply_additive_constant(D: DistanceMatrix, c) -> DistanceMatrix:
    Dc = D.matrix + c
    np.fill_diagonal(Dc, 0.0)
    return DistanceMatrix(Dc, additive_constant_applied=c,
                          district_ids=list(D.district_ids))


def classical_mds(D: DistanceMatrix, p=2) -> EmbeddingCoordinates:
    """Coordinates from the top-p eigenpairs of the doubly centered Gram matrix.

    Eigenvector signs are fixed so the largest-magnitude entry of each
    retained vector is positive, making the output deterministic. The
    reported stress is the root of the summed squared differences between
    the input dissimilarities and the embedded Euclidean distances over all
    ordered pairs.
    """
    B = _gram(D.matrix ** 2)
    lam, U = np.linalg.eigh(B)
    order = np.argsort(lam)[::-1]
    lam, U = lam[order], U[:, order]
    scale = max(1.0, np.abs(lam).max())
    # exactly-zero eigenvalues are legitimate (flat directions); negative
    # ones mean the dissimilarities are not Euclidean in p dimensions
    if np.sum(lam > -PSD_TOL * scale) < p:
        raise EmbeddingError(
            f"only {int(np.sum(lam > PSD_TOL * scale))} positive eigenvalues; "
            "increase the additive constant before embedding"
        )
    lam_p, U_p = np.maximum(lam[:p], 0.0), U[:, :p].copy()
    for j in range(p):
        k = np.argmax(np.abs(U_p[:, j]))
        if U_p[k, j] < 0:
            U_p[:, j] = -U_p[:, j]
    X = U_p * np.sqrt(lam_p)
    X = X - X.mean(axis=0)
    delta = _pairwise_distances(X)
    resid = D.matrix - delta
    stress = float(np.sqrt(np.sum(resid ** 2)))
    return EmbeddingCoordinates(X, lam_p, stress, district_ids=list(D.district_ids))


def _pairwise_distances(X):
    diff = X[:, None, :] - X[None, :, :]
    return np.sqrt(np.sum(diff ** 2, axis=-1))


def procrustes_align(source, target):
    """Closed-form similarity transform mapping source onto target.

    Minimizes sum_i || rho * A' x_i + b - y_i ||^2 over dilations rho > 0,
    orthogonal A (reflections allowed) and translations b. Returns the
    transform and the aligned coordinates.
    """
    X = source.coords if isinstance(source, EmbeddingCoordinates) else np.asarray(source, float)
    Y = np.asarray(target, float)
    if X.shape != Y.shape:
        raise EmbeddingError("source and target must have matching shapes")
    if X.shape[0] < 3:
        raise EmbeddingError("alignment needs at least 3 points")
    xbar, ybar = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - xbar, Y - ybar
    sx = np.sum(Xc ** 2)
    if sx <= 1e-14 * max(1.0, np.sum(Yc ** 2)):
        raise EmbeddingError("degenerate source configuration: all points coincide")
    C = Xc.T @ Yc
    U, S, Vt = np.linalg.svd(C)
    A = U @ Vt  # acts as x -> A' x, so aligned rows are Xc @ A
    rho = float(S.sum() / sx)
    b = ybar - rho * (A.T @ xbar)
    aligned = rho * X @ A + b
    r2 = float(np.sum((aligned - Y) ** 2))
    transform = SimilarityTransform(rho=rho, rotation=A, translation=b, r_squared=r2)
    return transform, aligned


def embed_and_align(C: ConnectednessMatrix, geo_coords, p=2):
    """Full pipeline: reciprocal distances, additive constant, MDS, alignment.

    Returns (aligned coordinates, transform, corrected DistanceMatrix,
    EmbeddingCoordinates).
    """
    D = connectedness_to_distance(C)
    c = additive_constant(D)
    Dc = apply_additive_constant(D, c)
    emb = classical_mds(Dc, p=p)
    transform, aligned = procrustes_align(emb, geo_coords)
    return aligned, transform, Dc, emb


def read_connectedness_csv(path, district_ids):
    """Read `src_district,dst_district,sci` rows into a ConnectednessMatrix.

    Missing symmetric counterparts are mirrored; conflicting asymmetric
    values are averaged.
    """
    index = {d: i for i, d in enumerate(district_ids)}
    n = len(district_ids)
    M = np.zeros((n, n))
    seen = np.zeros((n, n), dtype=bool)
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            src, dst = row["src_district"], row["dst_district"]
            if src not in index or dst not in index:
                raise EmbeddingError(f"unknown district in connectedness file: {src}/{dst}")
            i, j = index[src], index[dst]
            M[i, j] = float(row["sci"])
            seen[i, j] = True
    both = seen & seen.T
    M_sym = np.where(both, 0.5 * (M + M.T), np.where(seen, M, M.T))
    np.fill_diagonal(M_sym, 0.0)
    off = ~np.eye(n, dtype=bool)
    if np.any(~(seen | seen.T)[off]):
        i, j = np.argwhere(~(seen | seen.T) & off)[0]
        raise EmbeddingError(
            f"no connectedness value for pair {district_ids[i]}/{district_ids[j]}"
        )
    return ConnectednessMatrix(M_sym, district_ids=list(district_ids))


def write_coordinates_csv(path, district_ids, coords):
    coords = np.asarray(coords, float)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["district_id", "dim1", "dim2"])
        for d, (x1, x2) in zip(district_ids, coords):
            writer.writerow([d, repr(float(x1)), repr(float(x2))])


def read_coordinates_csv(path):
    """Reload written coordinates; eigenvalues and stress are not stored."""
    ids, rows = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            ids.append(row["district_id"])
            rows.append([float(row["dim1"]), float(row["dim2"])])
    if not ids:
        raise EmbeddingError(f"no coordinates in {path}")
    return EmbeddingCoordinates(np.array(rows), np.full(2, np.nan),
                                float("nan"), district_ids=ids)
