"""Two-layer patch posterior: pair table, K^2 posterior mixture, candidate ranking.

Conditioning the mixture prior on an observed sum y = x1 + x2 of two
independent prior draws gives another Gaussian mixture with one component
per ordered pair (i, j) of prior components:

    cov_ij = (inv(C_i) + inv(C_j))^-1                       (y-independent)
    mu_ij(y) = cov_ij [inv(C_i) m_i + inv(C_j)(y - m_j)]
    w_ij(y) = (1/Z) pi_i pi_j N(y; m_i + m_j, C_i + C_j)

cov_ij is symmetric in (i, j) and mu_ji = y - mu_ij, so pair quantities are
stored packed over unordered pairs (i <= j, i-major order). All weight
arithmetic stays in log space; at K=200 the 40,000 raw cross-term weights
underflow doubles routinely.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import gmm
from .errors import InvalidInputError, RefsepError
from .gmm import GmmPrior, PATCH_DIM, _as_patch_matrix

log = logging.getLogger(__name__)

_LOG_2PI = float(np.log(2.0 * np.pi))

# above this many unordered pairs the A/B and pair-Cholesky caches are
# skipped and recomputed per query; K=200 would otherwise need ~2.6 GB
_FULL_CACHE_MAX_PAIRS = 3000


def _chol_with_jitter(mats: np.ndarray) -> np.ndarray:
    """Batched Cholesky; on failure add 1e-10 diagonal jitter once, then give up."""
    try:
        return np.linalg.cholesky(mats)
    except np.linalg.LinAlgError:
        pass
    out = np.empty_like(mats)
    eye = 1e-10 * np.eye(mats.shape[-1])
    for idx in range(mats.shape[0]):
        try:
            out[idx] = np.linalg.cholesky(mats[idx])
        except np.linalg.LinAlgError:
            try:
                out[idx] = np.linalg.cholesky(mats[idx] + eye)
                log.warning("pair covariance %d needed diagonal jitter", idx)
            except np.linalg.LinAlgError as e:
                raise RefsepError(f"pair covariance {idx} not positive definite "
                                  "even after 1e-10 jitter") from e
    return out


@dataclass(frozen=True)
class PairTable:
    """Precomputed per-pair posterior covariances and factors for one prior.

    Packed storage over unordered pairs (i <= j), i-major; pair_index maps an
    ordered (i, j) to its packed slot. cov_ij == cov_ji is shared storage by
    construction. With cache="full" the per-pair Cholesky factors of cov_ij
    and the mean-map matrices A_ij = cov_ij inv(C_i) are kept; in "lean" mode
    they are recomputed per query from the per-component precisions.
    Immutable after build, safe to share across threads.
    """

    prior: GmmPrior
    prior_id: str
    cache: str
    pair_index: np.ndarray      # (K, K) int32 -> packed slot
    packed_i: np.ndarray        # (P,) first index of each packed pair
    packed_j: np.ndarray        # (P,)
    pair_cov: np.ndarray        # (P, 64, 64) cov_ij
    sum_chol_inv: np.ndarray    # (P, 64, 64) inverse Cholesky factor of C_i + C_j
    sum_log_dets: np.ndarray    # (P,) log det (C_i + C_j)
    pair_log_dets: np.ndarray   # (P,) log det cov_ij
    prec_mu: np.ndarray         # (K, 64) inv(C_k) m_k
    pair_chol: np.ndarray = field(repr=False, default=None)   # (P, 64, 64) or None
    a_mats: np.ndarray = field(repr=False, default=None)      # (P, 64, 64) A_ij for i<=j, or None

    @property
    def n_pairs(self) -> int:
        return self.pair_cov.shape[0]

    def matches(self, prior: GmmPrior) -> bool:
        if prior is self.prior:
            return True
        return (np.array_equal(prior.weights, self.prior.weights)
                and np.array_equal(prior.means, self.prior.means)
                and np.array_equal(prior.covariances, self.prior.covariances))

    def cov(self, i: int, j: int) -> np.ndarray:
        return self.pair_cov[self.pair_index[i, j]]

    def chol(self, i: int, j: int) -> np.ndarray:
        p = self.pair_index[i, j]
        if self.pair_chol is not None:
            return self.pair_chol[p]
        return _chol_with_jitter(self.pair_cov[p][None])[0]

    def chol_packed(self, packed: np.ndarray) -> np.ndarray:
        if self.pair_chol is not None:
            return self.pair_chol[packed]
        return _chol_with_jitter(self.pair_cov[packed])

    def a_mat(self, i: int, j: int) -> np.ndarray:
        """A_ij = cov_ij inv(C_i), the matrix applied to m_i in the mean map."""
        p = self.pair_index[i, j]
        if self.a_mats is not None:
            a = self.a_mats[p]
            return a if i <= j else np.eye(PATCH_DIM) - a
        return self.pair_cov[p] @ self.prior.precisions[i]

    def b_mat(self, i: int, j: int) -> np.ndarray:
        """B_ij = cov_ij inv(C_j) = I - A_ij, applied to (y - m_j)."""
        return np.eye(PATCH_DIM) - self.a_mat(i, j)


def build_pair_table(prior: GmmPrior, cache: str = "auto", chunk: int = 2048) -> PairTable:
    """Build the packed pair table for a prior.

    cov_ij is computed as C_i (C_i + C_j)^-1 C_j using the Cholesky factor of
    the sum, never as an inverse of a sum of inverses; that keeps the build
    stable when components span very different scales (floored flat
    components next to broad texture components).
    """
    if cache not in ("auto", "full", "lean"):
        raise InvalidInputError(f"unknown cache mode {cache!r}")
    k = prior.k
    pi_idx, pj_idx = np.triu_indices(k)
    n_pairs = pi_idx.shape[0]
    if cache == "auto":
        cache = "full" if n_pairs <= _FULL_CACHE_MAX_PAIRS else "lean"

    pair_index = np.empty((k, k), dtype=np.int32)
    packed = np.arange(n_pairs, dtype=np.int32)
    pair_index[pi_idx, pj_idx] = packed
    pair_index[pj_idx, pi_idx] = packed

    d = PATCH_DIM
    eye = np.eye(d)
    pair_cov = np.empty((n_pairs, d, d))
    sum_chol_inv = np.empty((n_pairs, d, d))
    sum_log_dets = np.empty(n_pairs)
    full = cache == "full"
    a_mats = np.empty((n_pairs, d, d)) if full else None

    covs = prior.covariances
    for lo in range(0, n_pairs, chunk):
        sl = slice(lo, min(lo + chunk, n_pairs))
        ci = covs[pi_idx[sl]]
        cj = covs[pj_idx[sl]]
        s = ci + cj
        ls = np.linalg.cholesky(s)
        linv = np.linalg.solve(ls, np.broadcast_to(eye, ls.shape).copy())
        sum_chol_inv[sl] = linv
        sum_log_dets[sl] = 2.0 * np.log(np.diagonal(ls, axis1=1, axis2=2)).sum(axis=1)
        # cov_ij = C_i S^-1 C_j with S^-1 = Linv^T Linv
        t = linv.transpose(0, 2, 1) @ (linv @ cj)
        pc = ci @ t
        pair_cov[sl] = 0.5 * (pc + pc.transpose(0, 2, 1))
        if full:
            a_mats[sl] = pair_cov[sl] @ prior.precisions[pi_idx[sl]]

    # det cov_ij = det C_i det C_j / det(C_i + C_j)
    pair_log_dets = prior.log_dets[pi_idx] + prior.log_dets[pj_idx] - sum_log_dets
    pair_chol = _chol_with_jitter(pair_cov) if full else None
    prec_mu = np.einsum("kab,kb->ka", prior.precisions, prior.means)

    arrays = [pair_index, packed, pair_cov, sum_chol_inv, sum_log_dets,
              pair_log_dets, prec_mu]
    if full:
        arrays += [pair_chol, a_mats]
    for a in arrays:
        a.setflags(write=False)
    return PairTable(prior=prior, prior_id=gmm.model_id(prior), cache=cache,
                     pair_index=pair_index, packed_i=pi_idx, packed_j=pj_idx,
                     pair_cov=pair_cov, sum_chol_inv=sum_chol_inv,
                     sum_log_dets=sum_log_dets, pair_log_dets=pair_log_dets,
                     prec_mu=prec_mu, pair_chol=pair_chol, a_mats=a_mats)


def _check_patch(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64).ravel()
    if y.shape != (PATCH_DIM,):
        raise InvalidInputError(f"expected a {PATCH_DIM}-vector, got shape {y.shape}")
    if not np.all(np.isfinite(y)):
        raise InvalidInputError("patch contains non-finite entries")
    return y


class PosteriorGmm:
    """The K^2-component posterior mixture over x1 given one observed patch y.

    log_weights is the full ordered (K, K) array of normalized log weights;
    log_z is the normalizer, which equals the log density of y under the
    sum-of-two-draws prior. Means are materialized lazily (the candidate
    path and the invariant checks want them all; the separation solver only
    ever needs one per patch).
    """

    def __init__(self, y: np.ndarray, prior: GmmPrior, table: PairTable,
                 log_weights: np.ndarray, log_z: float):
        self.y = y
        self.prior = prior
        self.table = table
        self.log_weights = log_weights
        self.log_z = log_z
        self._means = None

    @property
    def k(self) -> int:
        return self.prior.k

    def mean(self, i: int, j: int) -> np.ndarray:
        """mu_ij(y) for one ordered pair."""
        t, y = self.table, self.y
        if t.a_mats is not None:
            return t.a_mat(i, j) @ self.prior.means[i] + t.b_mat(i, j) @ (y - self.prior.means[j])
        w = t.prec_mu[i] - t.prec_mu[j] + self.prior.precisions[j] @ y
        return t.cov(i, j) @ w

    def means_for(self, idx_i: np.ndarray, idx_j: np.ndarray) -> np.ndarray:
        """mu_ij(y) for arrays of ordered pairs, vectorized over pairs."""
        t, y = self.table, self.y
        packed = t.pair_index[idx_i, idx_j]
        ly = np.einsum("kab,b->ka", self.prior.precisions, y)
        w = t.prec_mu[idx_i] - t.prec_mu[idx_j] + ly[idx_j]
        out = np.empty((packed.shape[0], PATCH_DIM))
        # chunked gather keeps peak memory bounded at K=200 (40k x 32 KB of covs)
        for lo in range(0, packed.shape[0], 4096):
            sl = slice(lo, min(lo + 4096, packed.shape[0]))
            out[sl] = np.einsum("pab,pb->pa", t.pair_cov[packed[sl]], w[sl])
        return out

    @property
    def means(self) -> np.ndarray:
        """All ordered means as a (K, K, 64) array, cached after first use."""
        if self._means is None:
            k = self.k
            ii, jj = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
            m = self.means_for(ii.ravel(), jj.ravel()).reshape(k, k, PATCH_DIM)
            m.setflags(write=False)
            self._means = m
        return self._means

    def log_density(self, x1) -> float:
        """Posterior log density at x1 by direct evaluation of all K^2 terms."""
        x1 = _check_patch(x1)
        lp = self._component_log_densities(x1)
        return float(logsumexp(lp + self.log_weights.ravel()))

    def log_density_gradient(self, x1) -> np.ndarray:
        """d/dx1 of log_density; responsibility-weighted precision residuals."""
        x1 = _check_patch(x1)
        lp = self._component_log_densities(x1) + self.log_weights.ravel()
        resp = np.exp(lp - logsumexp(lp))
        k = self.k
        ii, jj = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
        packed = self.table.pair_index[ii.ravel(), jj.ravel()]
        diff = self.means.reshape(-1, PATCH_DIM) - x1
        grad = np.zeros(PATCH_DIM)
        for lo in range(0, packed.shape[0], 4096):
            sl = slice(lo, min(lo + 4096, packed.shape[0]))
            ch = self.table.chol_packed(packed[sl])
            sol = np.linalg.solve(ch, diff[sl][..., None])
            sol = np.linalg.solve(ch.transpose(0, 2, 1), sol)[..., 0]
            grad += resp[sl] @ sol
        return grad

    def _component_log_densities(self, x1: np.ndarray) -> np.ndarray:
        """log N(x1; mu_ij, cov_ij) for all ordered pairs, flat (K*K,)."""
        k = self.k
        ii, jj = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
        packed = self.table.pair_index[ii.ravel(), jj.ravel()]
        diff = self.means.reshape(-1, PATCH_DIM) - x1
        out = np.empty(packed.shape[0])
        for lo in range(0, packed.shape[0], 4096):
            sl = slice(lo, min(lo + 4096, packed.shape[0]))
            ch = self.table.chol_packed(packed[sl])
            sol = np.linalg.solve(ch, diff[sl][..., None])[..., 0]
            quad = (sol * sol).sum(axis=1)
            out[sl] = -0.5 * (PATCH_DIM * _LOG_2PI + self.table.pair_log_dets[packed[sl]] + quad)
        return out


def posterior_components(y, prior: GmmPrior, table: PairTable) -> PosteriorGmm:
    """Condition the prior on an observed sum patch y.

    All K^2 log weights are computed packed (each unordered pair once, the
    value is symmetric in (i, j)) and normalized with log-sum-exp.
    """
    y = _check_patch(y)
    if not table.matches(prior):
        raise InvalidInputError("pair table was built from a different prior")
    d = table.prior.means[table.packed_i] + table.prior.means[table.packed_j] - y
    sol = np.einsum("pab,pb->pa", table.sum_chol_inv, d)
    quad = (sol * sol).sum(axis=1)
    logpi = prior.log_weights
    lw_packed = (logpi[table.packed_i] + logpi[table.packed_j]
                 - 0.5 * (PATCH_DIM * _LOG_2PI + table.sum_log_dets + quad))
    k = prior.k
    lw = np.empty((k, k))
    lw[table.packed_i, table.packed_j] = lw_packed
    lw[table.packed_j, table.packed_i] = lw_packed
    log_z = float(logsumexp(lw))
    lw = lw - log_z
    lw.setflags(write=False)
    return PosteriorGmm(y=y, prior=prior, table=table, log_weights=lw, log_z=log_z)


def sum_log_density(y, prior: GmmPrior, table: PairTable) -> float:
    """log density of y under the sum-of-two-independent-draws prior (= log Z)."""
    y = _check_patch(y)
    d = table.prior.means[table.packed_i] + table.prior.means[table.packed_j] - y
    sol = np.einsum("pab,pb->pa", table.sum_chol_inv, d)
    quad = (sol * sol).sum(axis=1)
    logpi = prior.log_weights
    lw = (logpi[table.packed_i] + logpi[table.packed_j]
          - 0.5 * (PATCH_DIM * _LOG_2PI + table.sum_log_dets + quad))
    # off-diagonal packed entries stand for two ordered terms
    mult = np.where(table.packed_i == table.packed_j, 0.0, np.log(2.0))
    return float(logsumexp(lw + mult))


@dataclass(frozen=True)
class Candidate:
    rank: int
    i: int
    j: int
    log_weight: float
    x1_mean: np.ndarray
    x2_complement: np.ndarray


@dataclass(frozen=True)
class CandidateSet:
    y: np.ndarray
    entries: tuple

    def __len__(self) -> int:
        return len(self.entries)

    def to_json_obj(self) -> list:
        return [{"rank": c.rank, "i": int(c.i), "j": int(c.j),
                 "log_weight": float(c.log_weight),
                 "x1": [float(v) for v in c.x1_mean],
                 "x2": [float(v) for v in c.x2_complement]} for c in self.entries]


def top_candidates(post: PosteriorGmm, n: int) -> CandidateSet:
    """The min(n, K^2) highest-weight posterior means, ties broken by (i, j).

    Selection partitions to a superset first and only sorts that; symmetric
    (i, j)/(j, i) twins carry exactly equal weights, so the superset keeps
    enough slack for the lexicographic tie-break to see whole tie groups.
    """
    if n < 1:
        raise InvalidInputError("candidate count must be >= 1")
    k = post.k
    flat = post.log_weights.ravel()
    m = min(n, k * k)
    take = min(k * k, 4 * m + 64)
    if take < k * k:
        part = np.argpartition(-flat, take - 1)[:take]
    else:
        part = np.arange(k * k)
    ii, jj = np.divmod(part, k)
    order = np.lexsort((jj, ii, -flat[part]))[:m]
    sel_i, sel_j = ii[order], jj[order]
    x1 = post.means_for(sel_i, sel_j)
    entries = []
    for r in range(m):
        x1r = x1[r].copy()
        x2r = post.y - x1r
        x1r.setflags(write=False)
        x2r.setflags(write=False)
        entries.append(Candidate(rank=r, i=int(sel_i[r]), j=int(sel_j[r]),
                                 log_weight=float(flat[part[order[r]]]),
                                 x1_mean=x1r, x2_complement=x2r))
    return CandidateSet(y=post.y, entries=tuple(entries))


def best_candidate_psnr(x1_true, cands: CandidateSet) -> float:
    """Best (highest) PSNR between the true layer patch and any candidate mean."""
    from .metrics import psnr
    if not cands.entries:
        raise InvalidInputError("empty candidate set")
    x1_true = _check_patch(x1_true)
    return max(psnr(x1_true, c.x1_mean) for c in cands.entries)
