"""Variational Bayesian Gaussian mixture with automatic component pruning.

Conjugate model: Dirichlet(alpha0) over the mixing weights and a
Gaussian-Wishart over each component's mean and precision, where the mean
prior has covariance ``(beta0 * Lambda_k)^-1``. The mean-field posterior is
found by coordinate ascent; the evidence lower bound (ELBO) is tracked every
iteration and can only go up.

With a small ``alpha0`` the expected weight of a component that explains no
data, ``(alpha0 + N_k) / (K * alpha0 + N)``, goes to zero as N grows, so the
number of effective components is found by the fit instead of being tuned.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import digamma, gammaln, logsumexp, xlogy

from .errors import InsufficientDataError, ValidationError

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
LOG_2PI = math.log(2.0 * math.pi)
MAX_JITTER_ESCALATIONS = 3


@dataclass
class VbHyperparams:
    """Prior hyperparameters. ``None`` fields are resolved against the data:
    ``m0`` to the data mean, ``W0`` to the identity, ``nu0`` to ``D + 2``."""

    alpha0: float = 1e-3
    beta0: float = 1.0
    m0: np.ndarray | None = None
    W0: np.ndarray | None = None
    nu0: float | None = None
    k_max: int = 10

    def resolve(self, data: np.ndarray) -> "VbHyperparams":
        d = data.shape[1]
        m0 = data.mean(axis=0) if self.m0 is None else np.asarray(self.m0, float).reshape(d)
        W0 = np.eye(d) if self.W0 is None else np.asarray(self.W0, float).reshape(d, d)
        nu0 = d + 2.0 if self.nu0 is None else float(self.nu0)
        out = VbHyperparams(float(self.alpha0), float(self.beta0), m0, W0, nu0, int(self.k_max))
        out.validate(d)
        return out

    def validate(self, d: int) -> None:
        if not self.alpha0 > 0:
            raise ValidationError(f"alpha0 must be > 0, got {self.alpha0}")
        if not self.beta0 > 0:
            raise ValidationError(f"beta0 must be > 0, got {self.beta0}")
        if self.k_max < 1:
            raise ValidationError(f"k_max must be >= 1, got {self.k_max}")
        if self.nu0 is not None and not self.nu0 > d - 1:
            raise ValidationError(f"nu0 must exceed D - 1 = {d - 1}, got {self.nu0}")
        if self.W0 is not None:
            W0 = np.asarray(self.W0, float)
            if not np.allclose(W0, W0.T, rtol=0, atol=1e-12 * max(1.0, np.abs(W0).max())):
                raise ValidationError("W0 must be symmetric")
            try:
                np.linalg.cholesky(W0)
            except np.linalg.LinAlgError:
                raise ValidationError("W0 must be positive definite") from None


@dataclass
class VbPosterior:
    alpha: np.ndarray  # (K,)
    beta: np.ndarray  # (K,)
    m: np.ndarray  # (K, D)
    W: np.ndarray  # (K, D, D)
    nu: np.ndarray  # (K,)
    Nk: np.ndarray  # (K,)
    resp: np.ndarray  # (N, K)
    hyper: VbHyperparams
    elbo_trace: list[float] = field(default_factory=list)
    converged: bool = False
    jitter_events: int = 0

    @property
    def n_components(self) -> int:
        return len(self.alpha)

    @property
    def dim(self) -> int:
        return self.m.shape[1]

    @property
    def n_samples(self) -> int:
        return self.resp.shape[0]

    def expected_weights(self) -> np.ndarray:
        """E[pi_k] = (alpha0 + N_k) / (K alpha0 + N)."""
        K = self.n_components
        a0 = self.hyper.alpha0
        return (a0 + self.Nk) / (K * a0 + self.Nk.sum())

    def to_dict(self) -> dict:
        h = self.hyper
        return {
            "format": "ecoroute.vb_posterior",
            "version": FORMAT_VERSION,
            "dim": self.dim,
            "k": self.n_components,
            "alpha": self.alpha.tolist(),
            "beta": self.beta.tolist(),
            "m": self.m.tolist(),
            "W": self.W.tolist(),
            "nu": self.nu.tolist(),
            "Nk": self.Nk.tolist(),
            "hyper": {
                "alpha0": h.alpha0,
                "beta0": h.beta0,
                "m0": np.asarray(h.m0).tolist(),
                "W0": np.asarray(h.W0).tolist(),
                "nu0": h.nu0,
                "k_max": h.k_max,
            },
            "elbo_trace": list(self.elbo_trace),
            "converged": self.converged,
        }


class GaussianMixture:
    """Finite Gaussian mixture with cached Cholesky factors."""

    def __init__(self, weights, means, covariances):
        w = np.atleast_1d(np.asarray(weights, float))
        mu = np.asarray(means, float)
        cov = np.asarray(covariances, float)
        if mu.ndim == 1:
            mu = mu.reshape(len(w), -1)
        k, d = mu.shape
        cov = cov.reshape(k, d, d)
        if len(w) != k:
            raise ValidationError("weights and means disagree on component count")
        if k == 0:
            raise ValidationError("mixture needs at least one component")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValidationError(f"weights must be nonnegative and sum to 1, sum={w.sum()!r}")
        self.weights = w
        self.means = mu
        self.covariances = cov
        try:
            self._chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ValidationError("every covariance must be symmetric positive definite") from None
        self._logdet = 2.0 * np.log(np.diagonal(self._chol, axis1=1, axis2=2)).sum(axis=1)

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def component_log_pdf(self, x: np.ndarray) -> np.ndarray:
        """(n, K) matrix of log N(x_n; mu_k, Sigma_k)."""
        x = np.atleast_2d(x)
        if x.shape[1] != self.dim:
            raise ValidationError(f"dimension mismatch: expected {self.dim}, got {x.shape[1]}")
        out = np.empty((x.shape[0], self.n_components))
        for k in range(self.n_components):
            z = _solve_lower(self._chol[k], (x - self.means[k]).T)
            out[:, k] = -0.5 * (self.dim * LOG_2PI + self._logdet[k] + np.einsum("ij,ij->j", z, z))
        return out

    def log_pdf(self, X) -> np.ndarray:
        """Mixture log density for each row of ``X``.

        A 1-D ``X`` is read as n scalar points when the mixture is 1-D and as
        a single point otherwise.
        """
        X = np.asarray(X, float)
        if X.ndim <= 1:
            X = X.reshape(-1, 1) if self.dim == 1 else X.reshape(1, -1)
        with np.errstate(divide="ignore"):
            lw = np.log(self.weights)
        return logsumexp(self.component_log_pdf(X) + lw, axis=1)

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        labels = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        x = self.means[labels] + np.einsum("nij,nj->ni", self._chol[labels], z)
        return x, labels

    def to_dict(self) -> dict:
        return {
            "format": "ecoroute.mixture",
            "version": FORMAT_VERSION,
            "dim": self.dim,
            "k": self.n_components,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
        }

    @classmethod
    def from_dict(cls, blob: dict) -> "GaussianMixture":
        if blob.get("format") != "ecoroute.mixture":
            raise ValidationError(f"not a mixture blob: format={blob.get('format')!r}")
        if blob.get("version") != FORMAT_VERSION:
            raise ValidationError(f"unsupported mixture version {blob.get('version')!r}")
        d, k = int(blob["dim"]), int(blob["k"])
        return cls(
            np.asarray(blob["weights"], float),
            np.asarray(blob["means"], float).reshape(k, d),
            np.asarray(blob["covariances"], float).reshape(k, d, d),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "GaussianMixture":
        return cls.from_dict(json.loads(text))


def _solve_lower(L, b):
    return solve_triangular(L, b, lower=True, check_finite=False)


def log_density(mixture: GaussianMixture, x) -> float:
    """log sum_k pi_k N(x; mu_k, Sigma_k), stabilised with log-sum-exp."""
    x = np.asarray(x, float).reshape(-1)
    if x.shape[0] != mixture.dim:
        raise ValidationError(f"dimension mismatch: expected {mixture.dim}, got {x.shape[0]}")
    return float(mixture.log_pdf(x.reshape(1, -1))[0])


# --------------------------------------------------------------------------
# fitting


def kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding (D^2 sampling)."""
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            i = rng.choice(n, p=d2 / total)
        else:
            i = rng.integers(n)
        centers[j] = X[i]
        d2 = np.minimum(d2, ((X - centers[j]) ** 2).sum(axis=1))
    return centers


def _spd_inverse(A: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
    """Inverse of a (nominally) SPD matrix with escalating diagonal jitter.

    Returns (inverse, cholesky factor of the inverse, jitter escalations used).
    """
    d = A.shape[0]
    A = 0.5 * (A + A.T)
    base = 1e-8 * max(np.trace(A) / d, np.finfo(float).tiny)
    eye = np.eye(d)
    for attempt in range(MAX_JITTER_ESCALATIONS + 1):
        M = A if attempt == 0 else A + base * 100.0 ** (attempt - 1) * eye
        try:
            L = np.linalg.cholesky(M)
            Linv = np.linalg.inv(L)
            inv = Linv.T @ Linv
            inv = 0.5 * (inv + inv.T)
            return inv, np.linalg.cholesky(inv), attempt
        except np.linalg.LinAlgError:
            continue
    raise ValidationError("scale matrix update is not positive definite after jitter escalation")


@dataclass
class _Stats:
    Nk: np.ndarray
    xbar: np.ndarray
    S: np.ndarray


def _sufficient_stats(X, R) -> _Stats:
    Nk = R.sum(axis=0)
    denom = Nk + 10 * np.finfo(float).eps
    xbar = (R.T @ X) / denom[:, None]
    K, D = xbar.shape
    S = np.empty((K, D, D))
    for k in range(K):
        diff = X - xbar[k]
        S[k] = (R[:, k, None] * diff).T @ diff / denom[k]
    return _Stats(Nk, xbar, S)


def _m_step(st: _Stats, h: VbHyperparams, W0_inv: np.ndarray):
    K, D = st.xbar.shape
    alpha = h.alpha0 + st.Nk
    beta = h.beta0 + st.Nk
    nu = h.nu0 + st.Nk
    m = (h.beta0 * h.m0 + st.Nk[:, None] * st.xbar) / beta[:, None]
    W = np.empty((K, D, D))
    W_chol = np.empty((K, D, D))
    jitter = 0
    for k in range(K):
        dm = st.xbar[k] - h.m0
        W_inv = W0_inv + st.Nk[k] * st.S[k] + (h.beta0 * st.Nk[k] / (h.beta0 + st.Nk[k])) * np.outer(dm, dm)
        W[k], W_chol[k], used = _spd_inverse(W_inv)
        jitter += used
    return alpha, beta, m, W, W_chol, nu, jitter


def _expected_log_det(W, nu, D):
    i = np.arange(1, D + 1)
    _, logdet = np.linalg.slogdet(W)
    return digamma(0.5 * (nu[:, None] + 1 - i)).sum(axis=1) + D * math.log(2.0) + logdet


def _log_wishart_norm(logdetW, nu, D):
    """ln B(W, nu) of the Wishart normaliser."""
    i = np.arange(1, D + 1)
    return (
        -0.5 * nu * logdetW
        - 0.5 * nu * D * math.log(2.0)
        - 0.25 * D * (D - 1) * math.log(math.pi)
        - gammaln(0.5 * (np.asarray(nu)[..., None] + 1 - i)).sum(axis=-1)
    )


def _log_dirichlet_norm(alpha):
    return gammaln(alpha.sum()) - gammaln(alpha).sum()


def _e_step(X, alpha, beta, m, W_chol, nu, ln_lambda):
    N, D = X.shape
    K = len(alpha)
    ln_pi = digamma(alpha) - digamma(alpha.sum())
    log_rho = np.empty((N, K))
    for k in range(K):
        z = (X - m[k]) @ W_chol[k]  # ||L^T (x - m)||^2 = (x-m)^T W (x-m)
        quad = D / beta[k] + nu[k] * np.einsum("ij,ij->i", z, z)
        log_rho[:, k] = ln_pi[k] + 0.5 * ln_lambda[k] - 0.5 * D * LOG_2PI - 0.5 * quad
    log_r = log_rho - logsumexp(log_rho, axis=1, keepdims=True)
    return np.exp(log_r)


def _elbo(R, st, h, W0_inv, alpha, beta, m, W, nu, ln_lambda) -> float:
    K, D = m.shape
    ln_pi = digamma(alpha) - digamma(alpha.sum())
    _, logdetW = np.linalg.slogdet(W)
    _, logdetW0 = np.linalg.slogdet(h.W0)

    tr_SW = np.einsum("kij,kji->k", st.S, W)
    dx = st.xbar - m
    quad_x = np.einsum("ki,kij,kj->k", dx, W, dx)
    e_lik = 0.5 * np.sum(st.Nk * (ln_lambda - D / beta - nu * tr_SW - nu * quad_x - D * LOG_2PI))

    e_z = np.sum(st.Nk * ln_pi)
    e_pi = _log_dirichlet_norm(np.full(K, h.alpha0)) + (h.alpha0 - 1.0) * ln_pi.sum()

    dm = m - h.m0
    quad_m = np.einsum("ki,kij,kj->k", dm, W, dm)
    tr_W0W = np.einsum("ij,kji->k", W0_inv, W)
    e_mulam = (
        0.5 * np.sum(D * math.log(h.beta0 / (2 * math.pi)) + ln_lambda - D * h.beta0 / beta - h.beta0 * nu * quad_m)
        + K * float(_log_wishart_norm(logdetW0, h.nu0, D))
        + 0.5 * (h.nu0 - D - 1) * ln_lambda.sum()
        - 0.5 * np.sum(nu * tr_W0W)
    )

    q_z = float(np.sum(xlogy(R, R)))
    q_pi = float(np.sum((alpha - 1.0) * ln_pi) + _log_dirichlet_norm(alpha))
    entropy_lam = -_log_wishart_norm(logdetW, nu, D) - 0.5 * (nu - D - 1) * ln_lambda + 0.5 * nu * D
    q_mulam = float(np.sum(0.5 * ln_lambda + 0.5 * D * np.log(beta / (2 * math.pi)) - 0.5 * D - entropy_lam))

    return float(e_lik + e_z + e_pi + e_mulam - q_z - q_pi - q_mulam)


class _Ascent:
    """Coordinate-ascent state on fixed data; every accepted step raises the ELBO."""

    def __init__(self, X, h: VbHyperparams, W0_inv):
        self.X = X
        self.h = h
        self.W0_inv = W0_inv
        self.trace: list[float] = []
        self.jitter = 0

    def evaluate(self, R):
        """M-step for responsibilities ``R``; returns (elbo, state)."""
        st = _sufficient_stats(self.X, R)
        alpha, beta, m, W, W_chol, nu, jitter = _m_step(st, self.h, self.W0_inv)
        self.jitter += jitter
        ln_lambda = _expected_log_det(W, nu, self.X.shape[1])
        elbo = _elbo(R, st, self.h, self.W0_inv, alpha, beta, m, W, nu, ln_lambda)
        return elbo, (R, st, alpha, beta, m, W, W_chol, nu, ln_lambda)

    def record(self, elbo):
        if self.trace and elbo < self.trace[-1] - 1e-8 * max(1.0, abs(self.trace[-1])):
            log.warning("ELBO decreased: %.12g -> %.12g", self.trace[-1], elbo)
        self.trace.append(elbo)

    def run(self, state, elbo, tol, budget):
        """Alternate E and M steps until the relative ELBO change drops below tol."""
        used = 0
        converged = False
        while used < budget:
            _, _, alpha, beta, m, _, W_chol, nu, ln_lambda = state
            R = _e_step(self.X, alpha, beta, m, W_chol, nu, ln_lambda)
            new_elbo, state = self.evaluate(R)
            self.record(new_elbo)
            used += 1
            done = abs(new_elbo - elbo) <= tol * abs(elbo)
            elbo = new_elbo
            if done:
                converged = True
                break
        return state, elbo, used, converged


def _merge_candidates(state, min_count):
    """Pairs of active components, closest (in expected-precision metric) first."""
    _, st, _, _, m, W, _, nu, _ = state
    active = np.flatnonzero(st.Nk > min_count)
    pairs = []
    for a_pos, i in enumerate(active):
        for j in active[a_pos + 1:]:
            dm = m[i] - m[j]
            P = 0.5 * (nu[i] * W[i] + nu[j] * W[j])
            pairs.append((float(dm @ P @ dm), int(i), int(j)))
    pairs.sort()
    return [(i, j) for _, i, j in pairs]


def fit(
    data,
    hyper: VbHyperparams | None = None,
    tol: float = 1e-6,
    max_iter: int = 500,
    seed: int = 0,
    init_resp: np.ndarray | None = None,
    merge_moves: bool = True,
) -> VbPosterior:
    """Fit the variational posterior by coordinate ascent on the ELBO.

    After the plain ascent converges, pairs of components are tentatively
    merged (responsibilities summed); a merge is kept only if the ELBO of the
    merged state is higher, after which ascent resumes. This escapes the
    split-cluster local optima that k-means++ seeding with a generous
    ``k_max`` tends to produce. ``max_iter`` bounds the total number of
    E/M sweeps including those after merges.

    ``init_resp`` replaces the k-means++ initialisation with a given
    responsibility matrix.
    """
    X = np.asarray(data, float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2 or X.shape[1] < 1:
        raise ValidationError(f"data must be an N x D matrix, got shape {X.shape}")
    N, D = X.shape
    if not np.all(np.isfinite(X)):
        raise ValidationError("data contains non-finite values")
    if N <= D + 1:
        raise InsufficientDataError(f"need N > D + 1 samples, got N={N}, D={D}")
    h = (hyper or VbHyperparams()).resolve(X)
    W0_inv, _, _ = _spd_inverse(h.W0)

    if init_resp is not None:
        R = np.asarray(init_resp, float)
        if R.shape[0] != N:
            raise ValidationError("init_resp row count must match data")
    else:
        K = min(h.k_max, N)
        rng = np.random.default_rng(seed)
        centers = kmeans_pp(X, K, rng)
        d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        R = np.zeros((N, K))
        R[np.arange(N), np.argmin(d2, axis=1)] = 1.0

    asc = _Ascent(X, h, W0_inv)
    elbo, state = asc.evaluate(R)
    asc.record(elbo)
    budget = max_iter - 1
    state, elbo, used, converged = asc.run(state, elbo, tol, budget)
    budget -= used

    while merge_moves and converged and budget > 0:
        accepted = False
        for i, j in _merge_candidates(state, min_count=0.5):
            R = state[0].copy()
            R[:, i] += R[:, j]
            R[:, j] = 0.0
            cand_elbo, cand = asc.evaluate(R)
            if cand_elbo > elbo:
                asc.record(cand_elbo)
                budget -= 1
                state, elbo, used, converged = asc.run(cand, cand_elbo, tol, budget)
                budget -= used
                accepted = True
                break
        if not accepted:
            break

    if asc.jitter:
        log.info("scale-matrix jitter engaged %d times", asc.jitter)
    R, st, alpha, beta, m, W, _, nu, _ = state
    return VbPosterior(alpha, beta, m, W, nu, st.Nk, R, h, asc.trace, converged, asc.jitter)


def expected_mixture(posterior: VbPosterior, prune_below: float = 0.01) -> GaussianMixture:
    """Point-estimate mixture from the posterior, with redundant components removed.

    Weights are E[pi_k]; covariances are the inverse expected precision
    ``(nu_k W_k)^-1``.
    """
    w = posterior.expected_weights()
    keep = w >= prune_below
    if not np.any(keep):
        raise ValidationError(f"every component weight is below prune threshold {prune_below}")
    w = w[keep] / w[keep].sum()
    means = posterior.m[keep]
    covs = np.empty((int(keep.sum()), posterior.dim, posterior.dim))
    for j, k in enumerate(np.flatnonzero(keep)):
        covs[j], _, _ = _spd_inverse(posterior.nu[k] * posterior.W[k])
        covs[j] = floor_covariance(covs[j])
    return GaussianMixture(w, means, covs)


def floor_covariance(C: np.ndarray, floor: float = 1e-12) -> np.ndarray:
    """Raise eigenvalues of a symmetric matrix to at least ``floor * max(1, trace/D)``."""
    C = 0.5 * (C + C.T)
    vals, vecs = np.linalg.eigh(C)
    lo = floor * max(1.0, float(np.trace(C)) / C.shape[0])
    if vals.min() >= lo:
        return C
    vals = np.maximum(vals, lo)
    return (vecs * vals) @ vecs.T


def fit_mixture(data, hyper: VbHyperparams | None = None, prune_below: float = 0.01, **kw) -> GaussianMixture:
    return expected_mixture(fit(data, hyper, **kw), prune_below)
