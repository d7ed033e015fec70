"""Graph construction and spectral machinery.

Builds the weighted adjacency from pairwise station distances, derives the
symmetric normalized Laplacian and its rescaled variant, estimates the largest
Laplacian eigenvalue by shifted power iteration, and applies Chebyshev graph
convolution through the autodiff engine. A dense eigendecomposition route is
provided for tests only.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, DimensionError, NumericError, ValidationError
from .tensor import Tensor, matmul


def _as_square(a, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {a.shape}")
    return a


def build_adjacency(distances, sigma2=10.0, eps_threshold=0.5):
    """Thresholded Gaussian kernel weights from pairwise distances.

    W_ij = exp(-d_ij^2 / sigma2) when i != j and the value clears
    eps_threshold, else 0. Missing measurements are encoded as +inf
    distances and always map to 0.
    """
    d = _as_square(distances, "distances")
    if sigma2 <= 0:
        raise ValidationError(f"sigma2 must be positive, got {sigma2}")
    if not 0.0 <= eps_threshold < 1.0:
        raise ValidationError(
            f"eps_threshold must lie in [0, 1), got {eps_threshold}")
    if np.any(np.isnan(d)):
        raise ValidationError("distances contain NaN")
    if np.any(d < 0):
        raise ValidationError("distances must be nonnegative")
    if not np.array_equal(d, d.T):
        raise ValidationError("distances must be symmetric")
    if np.any(np.diagonal(d) != 0):
        raise ValidationError("distances must have zero diagonal")

    with np.errstate(over="ignore"):
        w = np.exp(-np.square(d) / sigma2)
    w[w < eps_threshold] = 0.0
    np.fill_diagonal(w, 0.0)
    return w


def normalized_laplacian(adjacency):
    """L = I - D^{-1/2} W D^{-1/2}; isolated nodes keep an identity row."""
    w = _as_square(adjacency, "adjacency")
    if np.any(w < 0):
        raise ValidationError("adjacency must be nonnegative")
    if not np.allclose(w, w.T, atol=0):
        raise ValidationError("adjacency must be symmetric")
    deg = w.sum(axis=1)
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    lap = -w * np.outer(inv_sqrt, inv_sqrt)
    np.fill_diagonal(lap, 1.0)
    return lap


def lambda_max(laplacian, tol=1e-8, max_iter=200000, seed=0):
    """Largest eigenvalue of a symmetric PSD matrix by power iteration.

    Iterates on L + 2I so the target eigenvalue strictly dominates in
    magnitude for any normalized Laplacian spectrum. Raises on failure to
    converge, carrying the last Rayleigh estimate. The iteration budget
    covers spectral gaps down to roughly 1e-3 at desk-scale N, where one
    matvec costs microseconds; certification, not the estimate, is what
    consumes iterations on small-gap graphs.
    """
    lap = _as_square(laplacian, "laplacian")
    if not np.allclose(lap, lap.T, atol=1e-12):
        raise ValidationError("laplacian must be symmetric")
    n = lap.shape[0]
    shifted = lap + 2.0 * np.eye(n)
    rng = np.random.default_rng(seed)
    v = rng.normal(size=n)
    v /= np.linalg.norm(v)
    est = None
    delta_prev = None
    rho_prev = None
    eps_floor = 8.0 * np.finfo(np.float64).eps
    for _ in range(max_iter):
        w = shifted @ v
        est_new = float(v @ w)
        delta = None if est is None else est_new - est
        est = est_new
        # Fast path: for symmetric matrices the residual norm bounds the
        # distance from the Rayleigh quotient to the nearest eigenvalue.
        if np.linalg.norm(w - est * v) <= tol:
            return est - 2.0
        if delta is not None and tol >= 4.0 * eps_floor:
            # Rayleigh updates exhausted double precision: the sequence has
            # converged even if the residual stalls on degenerate spectra.
            stalled = abs(delta) <= eps_floor * max(1.0, abs(est))
            if stalled and delta_prev is not None and (
                    abs(delta_prev) <= eps_floor * max(1.0, abs(est))):
                return est - 2.0
            # Rayleigh error decays twice as fast as the residual. Once the
            # delta ratio rho has stabilized it estimates the spectral gap,
            # and the Kato-Temple bound err <= resid^2 / gap certifies the
            # Rayleigh quotient long before the residual itself reaches tol.
            rho = None
            if delta_prev not in (None, 0.0):
                rho = delta / delta_prev
            if (rho is not None and rho_prev is not None
                    and 0.0 < rho < 1.0 and 0.0 < rho_prev < 1.0
                    and abs(rho - rho_prev) <= 0.15 * (1.0 - rho)):
                gap_est = 0.5 * (1.0 - max(rho, rho_prev)) * est
                resid = float(np.linalg.norm(w - est * v))
                if gap_est > 0.0 and resid * resid <= tol * gap_est:
                    return est - 2.0
            delta_prev, rho_prev = delta, rho
        norm = np.linalg.norm(w)
        if norm == 0.0:
            raise NumericError("power iteration collapsed to the zero vector")
        v = w / norm
    raise ConvergenceError(
        f"power iteration did not converge within {max_iter} iterations",
        last_estimate=est - 2.0)


def scaled_laplacian(laplacian, lam_max):
    """Rescale so the spectrum maps into [-1, 1]: 2L/lam_max - I."""
    lap = _as_square(laplacian, "laplacian")
    if lam_max <= 0:
        raise ValidationError(f"lam_max must be positive, got {lam_max}")
    return 2.0 * lap / lam_max - np.eye(lap.shape[0])


def cheb_conv(scaled_lap, x, theta):
    """Chebyshev graph convolution Y = sum_k T_k(L~) X theta_k.

    Runs the vector recurrence Z_0 = X, Z_1 = L~ X, Z_k = 2 L~ Z_{k-1} -
    Z_{k-2} without materializing the matrix polynomials; differentiable
    with respect to x and every theta_k.
    """
    lap = _as_square(
        scaled_lap.data if isinstance(scaled_lap, Tensor) else scaled_lap,
        "scaled_lap")
    if not isinstance(x, Tensor) or x.data.ndim != 2:
        raise DimensionError("x must be a rank-2 tensor of node signals")
    if len(theta) < 1:
        raise ValidationError("theta must contain at least one coefficient")
    n, c = x.data.shape
    if lap.shape[0] != n:
        raise DimensionError(
            f"scaled_lap has {lap.shape[0]} nodes but x has {n}")
    for k, th in enumerate(theta):
        if th.data.ndim != 2 or th.data.shape[0] != c:
            raise DimensionError(
                f"theta[{k}] shape {th.data.shape} incompatible with C={c}")

    lap_t = Tensor(lap)
    z_prev, z = x, None
    out = matmul(z_prev, theta[0])
    for k in range(1, len(theta)):
        if k == 1:
            z = matmul(lap_t, z_prev)
        else:
            z_next = matmul(lap_t, z) * 2.0 - z_prev
            z_prev, z = z, z_next
        out = out + matmul(z, theta[k])
    return out


def spectral_oracle(laplacian, x, theta, lam_max):
    """Exact spectral-domain convolution used only to cross-check cheb_conv.

    Diagonalizes L with a dense symmetric eigensolver, evaluates the
    Chebyshev scalar recurrence on the rescaled eigenvalues, and assembles
    U T_k(Lambda~) U^T X theta_k. Plain numpy throughout; not differentiable.
    """
    lap = _as_square(laplacian, "laplacian")
    if lap.shape[0] > 64:
        raise ValidationError("oracle is restricted to N <= 64 test graphs")
    x_arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    coeffs = [np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64)
              for t in theta]
    try:
        lam, u = np.linalg.eigh(lap)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigendecomposition failed: {exc}") from exc
    lam_scaled = 2.0 * lam / lam_max - 1.0

    t_prev = np.ones_like(lam_scaled)
    t_cur = None
    proj = u.T @ x_arr
    out = u @ (t_prev[:, None] * proj) @ coeffs[0]
    for k in range(1, len(coeffs)):
        if k == 1:
            t_cur = lam_scaled.copy()
        else:
            t_next = 2.0 * lam_scaled * t_cur - t_prev
            t_prev, t_cur = t_cur, t_next
        out = out + u @ (t_cur[:, None] * proj) @ coeffs[k]
    return out


@dataclass(frozen=True)
class SpectralOperator:
    """Laplacian, its largest eigenvalue, and the rescaled Laplacian."""

    laplacian: np.ndarray
    lambda_max: float
    scaled_laplacian: np.ndarray


@dataclass(frozen=True)
class TrafficGraph:
    """Sensor graph: distances, kernel adjacency, and spectral operators."""

    n_nodes: int
    distances: np.ndarray
    adjacency: np.ndarray
    spectral: SpectralOperator

    @classmethod
    def from_distances(cls, distances, sigma2=10.0, eps_threshold=0.5,
                       tol=1e-8, max_iter=200000, seed=0):
        d = _as_square(distances, "distances")
        w = build_adjacency(d, sigma2=sigma2, eps_threshold=eps_threshold)
        lap = normalized_laplacian(w)
        if np.any(w > 0):
            lam = lambda_max(lap, tol=tol, max_iter=max_iter, seed=seed)
        else:
            lam = 1.0
        return cls(
            n_nodes=d.shape[0],
            distances=d,
            adjacency=w,
            spectral=SpectralOperator(
                laplacian=lap,
                lambda_max=lam,
                scaled_laplacian=scaled_laplacian(lap, lam)))


def load_distances(path, n_nodes=None):
    """Read `from,to,distance` triples into a dense symmetric matrix.

    Node ids are 0-based integers. Pairs absent from the file have no
    direct measurement and become +inf (so their kernel weight is 0).
    Entries given in both directions must agree within 1e-9.
    """
    records = {}
    max_id = -1
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        while header is not None and header and header[0].startswith("#"):
            header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["from", "to", "distance"]:
            raise ValidationError(
                f"{path}: expected header 'from,to,distance', got {header}")
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if row[0].startswith("#"):
                continue
            if len(row) != 3:
                raise ValidationError(f"{path}:{row_no}: expected 3 fields")
            try:
                i, j = int(row[0]), int(row[1])
                cost = float(row[2])
            except ValueError as exc:
                raise ValidationError(f"{path}:{row_no}: {exc}") from exc
            if i < 0 or j < 0:
                raise ValidationError(f"{path}:{row_no}: negative node id")
            if cost < 0 or np.isnan(cost):
                raise ValidationError(f"{path}:{row_no}: bad distance {row[2]}")
            for key in ((j, i), (i, j)):
                prev = records.get(key)
                if prev is not None and abs(prev - cost) > 1e-9:
                    raise ValidationError(
                        f"{path}:{row_no}: ({i},{j}) disagrees with earlier "
                        f"entry for {key}: {cost} vs {prev}")
            records[(i, j)] = cost
            max_id = max(max_id, i, j)
    if n_nodes is None:
        n_nodes = max_id + 1
    if n_nodes <= 0:
        raise ValidationError(f"{path}: no nodes found")
    if max_id >= n_nodes:
        raise ValidationError(
            f"{path}: node id {max_id} exceeds n_nodes={n_nodes}")

    d = np.full((n_nodes, n_nodes), np.inf)
    np.fill_diagonal(d, 0.0)
    for (i, j), cost in records.items():
        if i == j:
            if cost != 0.0:
                raise ValidationError(
                    f"{path}: self-distance for node {i} must be 0")
            continue
        d[i, j] = cost
        d[j, i] = cost
    return d
