"""Gaussian mixture patch prior: representation, EM training, sampling, I/O.

The prior is a K-component mixture of full-covariance Gaussians over
vectorized 8x8 image patches (64-dim, row-major flattening, raw intensity
including the DC component). Patches are modeled in absolute intensity so
the separation task can apportion the DC of a summed patch between layers.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.cluster.vq import kmeans2
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from .errors import InvalidInputError

log = logging.getLogger(__name__)

PATCH_SIZE = 8
PATCH_DIM = PATCH_SIZE * PATCH_SIZE

_LOG_2PI = float(np.log(2.0 * np.pi))


def _as_patch_matrix(x) -> np.ndarray:
    """Coerce a single patch or a batch of patches to an (N, 64) float array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != PATCH_DIM:
        raise InvalidInputError(f"expected patches of dimension {PATCH_DIM}, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class GmmPrior:
    """Immutable K-component Gaussian mixture over 64-dim patch vectors.

    Cholesky factors, precisions and log-determinants are cached at
    construction; the arrays are frozen (read-only) so a prior can be shared
    across worker threads without copies.
    """

    weights: np.ndarray       # (K,)
    means: np.ndarray         # (K, 64)
    covariances: np.ndarray   # (K, 64, 64)
    chol: np.ndarray = field(repr=False, default=None)        # (K, 64, 64) lower
    precisions: np.ndarray = field(repr=False, default=None)  # (K, 64, 64)
    log_dets: np.ndarray = field(repr=False, default=None)    # (K,) log|Sigma_k|

    @classmethod
    def create(cls, weights, means, covariances, validate: bool = True) -> "GmmPrior":
        weights = np.ascontiguousarray(weights, dtype=np.float64)
        means = np.ascontiguousarray(means, dtype=np.float64)
        covariances = np.ascontiguousarray(covariances, dtype=np.float64)
        k = weights.shape[0]
        if means.shape != (k, PATCH_DIM) or covariances.shape != (k, PATCH_DIM, PATCH_DIM):
            raise InvalidInputError("inconsistent mixture parameter shapes")
        if validate:
            if not np.all(np.isfinite(weights)) or np.any(weights <= 0):
                raise InvalidInputError("mixture weights must be finite and strictly positive")
            if abs(weights.sum() - 1.0) > 1e-12:
                raise InvalidInputError(f"mixture weights sum to {weights.sum()!r}, not 1")
            if not np.all(np.isfinite(means)) or not np.all(np.isfinite(covariances)):
                raise InvalidInputError("non-finite mixture parameters")
            asym = np.abs(covariances - covariances.transpose(0, 2, 1)).max()
            if asym > 1e-10:
                raise InvalidInputError(f"covariance asymmetry {asym:.3e} exceeds 1e-10")
        try:
            chol = np.linalg.cholesky(covariances)
        except np.linalg.LinAlgError as e:
            raise InvalidInputError("covariance not positive definite") from e
        eye = np.eye(PATCH_DIM)
        # Sigma^-1 = L^-T L^-1 via two batched triangular solves (LAPACK through solve).
        inv_l = np.linalg.solve(chol, np.broadcast_to(eye, chol.shape).copy())
        precisions = inv_l.transpose(0, 2, 1) @ inv_l
        precisions = 0.5 * (precisions + precisions.transpose(0, 2, 1))
        log_dets = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
        for a in (weights, means, covariances, chol, precisions, log_dets):
            a.setflags(write=False)
        return cls(weights, means, covariances, chol, precisions, log_dets)

    @property
    def k(self) -> int:
        return self.weights.shape[0]

    @property
    def log_weights(self) -> np.ndarray:
        return np.log(self.weights)


@dataclass(frozen=True)
class TrainConfig:
    """EM training hyperparameters (the paper leaves the schedule open)."""

    k: int
    max_iters: int = 100
    tol: float = 1e-6
    cov_floor: float = 1e-6
    seed: int = 0
    init: str = "kmeans"   # or "random-responsibility"
    chunk_size: int = 65536

    def __post_init__(self):
        if self.k < 1:
            raise InvalidInputError("K must be >= 1")
        if self.cov_floor <= 0:
            raise InvalidInputError("cov_floor must be > 0")
        if self.init not in ("random-responsibility", "kmeans"):
            raise InvalidInputError(f"unknown init scheme {self.init!r}")


def component_log_densities(x, prior: GmmPrior) -> np.ndarray:
    """Per-component Gaussian log densities, shape (N, K).

    Uses the cached Cholesky factors: the quadratic form is a triangular
    solve, the log-determinant comes from the factor diagonal.
    """
    X = _as_patch_matrix(x)
    if not np.all(np.isfinite(X)):
        raise InvalidInputError("patch contains non-finite entries")
    n, k = X.shape[0], prior.k
    out = np.empty((n, k))
    for j in range(k):
        diff = (X - prior.means[j]).T
        sol = solve_triangular(prior.chol[j], diff, lower=True, check_finite=False)
        out[:, j] = -0.5 * (PATCH_DIM * _LOG_2PI + prior.log_dets[j] + (sol * sol).sum(axis=0))
    return out


def log_density(x, prior: GmmPrior):
    """Mixture log density log P(x) in nats; scalar in, scalar out."""
    X = _as_patch_matrix(x)
    ld = logsumexp(component_log_densities(X, prior) + prior.log_weights, axis=1)
    return float(ld[0]) if np.asarray(x).ndim == 1 else ld


def log_density_gradient(x, prior: GmmPrior) -> np.ndarray:
    """Gradient of log P(x): minus the responsibility-weighted precision residual."""
    X = _as_patch_matrix(x)
    logp = component_log_densities(X, prior) + prior.log_weights
    resp = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))   # (N, K)
    grad = np.zeros_like(X)
    for j in range(prior.k):
        grad -= resp[:, j:j + 1] * ((X - prior.means[j]) @ prior.precisions[j])
    return grad[0] if np.asarray(x).ndim == 1 else grad


def sample(prior: GmmPrior, n: int, seed: int, return_labels: bool = False):
    """Draw n i.i.d. patches; component by weight, then a Cholesky transform."""
    rng = np.random.default_rng(seed)
    labels = rng.choice(prior.k, size=n, p=prior.weights)
    z = rng.standard_normal((n, PATCH_DIM))
    out = np.empty((n, PATCH_DIM))
    for j in range(prior.k):
        idx = labels == j
        if idx.any():
            out[idx] = prior.means[j] + z[idx] @ prior.chol[j].T
    return (out, labels) if return_labels else out


def _init_params(X: np.ndarray, cfg: TrainConfig, rng: np.random.Generator):
    n, d = X.shape
    if cfg.init == "kmeans":
        # cluster a subsample; random-responsibility starts every mean at the
        # data centroid, a symmetric saddle EM can take ages to leave
        sub = X if n <= 50_000 else X[rng.choice(n, 50_000, replace=False)]
        with np.errstate(invalid="ignore"):
            _, labels = kmeans2(sub, cfg.k, minit="++", seed=rng, iter=20)
        resp = np.zeros((len(sub), cfg.k))
        resp[np.arange(len(sub)), labels] = 1.0
        empty = resp.sum(axis=0) == 0
        if empty.any():
            resp[:, empty] = 1e-3
        X = sub
    else:
        resp = rng.random((n, cfg.k))
    resp /= resp.sum(axis=1, keepdims=True)
    return _m_step(X, resp.sum(axis=0), resp.T @ X, _weighted_scatter(X, resp), cfg, rng)


def _weighted_scatter(X: np.ndarray, resp: np.ndarray) -> np.ndarray:
    k = resp.shape[1]
    sxx = np.empty((k, X.shape[1], X.shape[1]))
    for j in range(k):
        xw = X * resp[:, j:j + 1]
        sxx[j] = X.T @ xw
    return sxx


def _m_step(X, nk, sx, sxx, cfg: TrainConfig, rng: np.random.Generator):
    n, d = X.shape
    nk = nk.copy()
    sx = sx.copy()
    sxx = sxx.copy()
    collapsed = np.flatnonzero(nk <= 0)
    if collapsed.size:
        # re-seed dead components from random data points; never crash
        log.warning("EM component collapse: re-seeding components %s", collapsed.tolist())
        var = X.var(axis=0).mean() + cfg.cov_floor
        for j in collapsed:
            pick = X[rng.integers(n)]
            nk[j] = 1.0
            sx[j] = pick
            sxx[j] = np.outer(pick, pick) + var * np.eye(d)
    weights = nk / nk.sum()
    means = sx / nk[:, None]
    covs = sxx / nk[:, None, None] - means[:, :, None] * means[:, None, :]
    covs = 0.5 * (covs + covs.transpose(0, 2, 1))
    covs += cfg.cov_floor * np.eye(d)
    return weights, means, covs


def em_fit(patches, cfg: TrainConfig):
    """Run EM, returning the fitted prior and the per-iteration log-likelihood trace.

    The trace entry for iteration t is the total data log-likelihood of the
    model entering that E-step (floored covariances included), so the
    sequence is the one EM guarantees non-decreasing.
    """
    X = _as_patch_matrix(patches)
    n = X.shape[0]
    if n < cfg.k:
        raise InvalidInputError(f"need at least K={cfg.k} patches, got {n}")
    rng = np.random.default_rng(cfg.seed)
    weights, means, covs = _init_params(X, cfg, rng)

    trace = []
    prev_ll = -np.inf
    for _ in range(cfg.max_iters):
        prior = GmmPrior.create(weights, means, covs, validate=False)
        nk = np.zeros(cfg.k)
        sx = np.zeros((cfg.k, PATCH_DIM))
        sxx = np.zeros((cfg.k, PATCH_DIM, PATCH_DIM))
        ll = 0.0
        # fixed chunk order keeps the reduction deterministic
        for lo in range(0, n, cfg.chunk_size):
            chunk = X[lo:lo + cfg.chunk_size]
            logp = component_log_densities(chunk, prior) + prior.log_weights
            norm = logsumexp(logp, axis=1, keepdims=True)
            ll += norm.sum()
            resp = np.exp(logp - norm)
            nk += resp.sum(axis=0)
            sx += resp.T @ chunk
            sxx += _weighted_scatter(chunk, resp)
        trace.append(ll)
        if np.isfinite(prev_ll) and abs(ll - prev_ll) <= cfg.tol * abs(prev_ll):
            break
        prev_ll = ll
        weights, means, covs = _m_step(X, nk, sx, sxx, cfg, rng)

    return GmmPrior.create(weights, means, covs), np.asarray(trace)


def train_em(patches, cfg: TrainConfig) -> GmmPrior:
    """EM-train a patch prior; deterministic given cfg.seed."""
    prior, _ = em_fit(patches, cfg)
    return prior


def extract_patches(image, stride: int = 1):
    """All fully-interior 8x8 patches at the given stride, row-major order.

    Returns (indices, patches): indices are the linear (row-major) pixel
    index of each patch's top-left corner, patches an (M, 64) matrix.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] < PATCH_SIZE or img.shape[1] < PATCH_SIZE:
        raise InvalidInputError(f"image must be 2-D and at least {PATCH_SIZE}x{PATCH_SIZE}, got {img.shape}")
    if stride < 1:
        raise InvalidInputError("stride must be >= 1")
    h, w = img.shape
    windows = sliding_window_view(img, (PATCH_SIZE, PATCH_SIZE))[::stride, ::stride]
    rows = np.arange(0, h - PATCH_SIZE + 1, stride)
    cols = np.arange(0, w - PATCH_SIZE + 1, stride)
    indices = (rows[:, None] * w + cols[None, :]).ravel()
    patches = windows.reshape(-1, PATCH_DIM).copy()
    return indices, patches


def patch_grid(shape, stride: int = 1):
    """Top-left (rows, cols) of the stride-spaced patch lattice for an image shape."""
    h, w = shape
    rows = np.arange(0, h - PATCH_SIZE + 1, stride)
    cols = np.arange(0, w - PATCH_SIZE + 1, stride)
    return rows, cols


def accumulate_patches(values, shape, stride: int = 1):
    """Scatter-add patch vectors back onto the pixel grid.

    Returns (sums, counts): sums[p] is the sum of all patch entries covering
    pixel p, counts[p] the number of covering patches (the diagonal of
    sum_i Pi^T Pi).
    """
    h, w = shape
    rows, cols = patch_grid(shape, stride)
    vals = np.asarray(values, dtype=np.float64).reshape(len(rows), len(cols), PATCH_SIZE, PATCH_SIZE)
    sums = np.zeros((h, w))
    counts = np.zeros((h, w))
    for a in range(PATCH_SIZE):
        for b in range(PATCH_SIZE):
            np.add.at(sums, (rows[:, None] + a, cols[None, :] + b), vals[:, :, a, b])
            np.add.at(counts, (rows[:, None] + a, cols[None, :] + b), 1.0)
    return sums, counts


# --- GMM1 binary model format ------------------------------------------------
#
# little-endian: magic "GMM1", u32 version=1, u32 K, u32 dim=64,
# then K float64 weights, K*64 float64 means, K*64*64 float64 covariances.
# Factorizations are recomputed on load, never stored.

_MAGIC = b"GMM1"


def model_bytes(prior: GmmPrior) -> bytes:
    head = _MAGIC + struct.pack("<III", 1, prior.k, PATCH_DIM)
    body = (prior.weights.astype("<f8").tobytes()
            + prior.means.astype("<f8").tobytes()
            + prior.covariances.astype("<f8").tobytes())
    return head + body


def save_model(prior: GmmPrior, path) -> None:
    with open(path, "wb") as f:
        f.write(model_bytes(prior))


def load_model(path) -> GmmPrior:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _MAGIC:
        raise InvalidInputError(f"{path}: not a GMM1 model file")
    version, k, dim = struct.unpack_from("<III", raw, 4)
    if version != 1:
        raise InvalidInputError(f"{path}: unsupported GMM1 version {version}")
    if dim != PATCH_DIM:
        raise InvalidInputError(f"{path}: model dimension {dim} != {PATCH_DIM}")
    off = 16
    weights = np.frombuffer(raw, "<f8", k, off).copy()
    off += 8 * k
    means = np.frombuffer(raw, "<f8", k * dim, off).reshape(k, dim).copy()
    off += 8 * k * dim
    covs = np.frombuffer(raw, "<f8", k * dim * dim, off).reshape(k, dim, dim).copy()
    return GmmPrior.create(weights, means, covs)


def model_id(prior: GmmPrior) -> str:
    """Content hash of the canonical GMM1 serialization."""
    return hashlib.sha256(model_bytes(prior)).hexdigest()
