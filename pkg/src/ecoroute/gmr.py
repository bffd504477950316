"""Gaussian mixture regression.

A joint mixture over ``(x, y)`` (``y`` scalar, stored as the last coordinate)
is conditioned on ``x``. Each component contributes its Gaussian conditional
``y | x`` weighted by how strongly it explains ``x``:

    E[y | x] = sum_k w_k(x) * (mu_y,k + Sigma_yx,k Sigma_xx,k^-1 (x - mu_x,k))
    w_k(x)  ∝ pi_k N(x; mu_x,k, Sigma_xx,k)

Everything needed per component is factorised once at construction, so a
query costs O(K P^2).
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import logsumexp

from .errors import ValidationError
from .vbgmm import LOG_2PI, GaussianMixture


class GmrModel:
    def __init__(self, joint: GaussianMixture):
        if joint.dim < 2:
            raise ValidationError("joint mixture needs at least one input and one output coordinate")
        self.joint = joint
        P = joint.dim - 1
        self.n_inputs = P
        mu = joint.means
        cov = joint.covariances
        self.mu_x = mu[:, :P].copy()
        self.mu_y = mu[:, P].copy()
        self.s_xx = cov[:, :P, :P].copy()
        self.s_xy = cov[:, :P, P].copy()
        self.s_yy = cov[:, P, P].copy()
        K = joint.n_components
        self.chol_xx = np.empty((K, P, P))
        self.gain = np.empty((K, P))  # Sigma_yx Sigma_xx^-1
        for k in range(K):
            try:
                self.chol_xx[k] = np.linalg.cholesky(self.s_xx[k])
            except np.linalg.LinAlgError:
                raise ValidationError(f"input covariance of component {k} is not positive definite") from None
            self.gain[k] = cho_solve((self.chol_xx[k], True), self.s_xy[k])
        self.logdet_xx = 2.0 * np.log(np.diagonal(self.chol_xx, axis1=1, axis2=2)).sum(axis=1)
        self.cond_var = np.maximum(self.s_yy - np.einsum("kp,kp->k", self.gain, self.s_xy), 0.0)
        with np.errstate(divide="ignore"):
            self.log_pi = np.log(joint.weights)

    @property
    def n_components(self) -> int:
        return self.joint.n_components

    def _as_batch(self, x):
        X = np.asarray(x, float)
        single = X.ndim <= 1
        if single:
            X = X.reshape(1, -1)
        if X.shape[1] != self.n_inputs:
            raise ValidationError(f"dimension mismatch: model has {self.n_inputs} inputs, got {X.shape[1]}")
        return X, single

    def _log_input_weights(self, X):
        n = X.shape[0]
        K = self.n_components
        lw = np.empty((n, K))
        for k in range(K):
            z = solve_triangular(self.chol_xx[k], (X - self.mu_x[k]).T, lower=True, check_finite=False)
            lw[:, k] = self.log_pi[k] - 0.5 * (self.n_inputs * LOG_2PI + self.logdet_xx[k] + np.einsum("ij,ij->j", z, z))
        return lw - logsumexp(lw, axis=1, keepdims=True)

    def _component_means(self, X):
        # (n, K) conditional means m_k(x)
        return self.mu_y[None, :] + np.einsum("kp,nkp->nk", self.gain, X[:, None, :] - self.mu_x[None, :, :])

    def input_weights(self, x) -> np.ndarray:
        X, single = self._as_batch(x)
        w = np.exp(self._log_input_weights(X))
        return w[0] if single else w

    def predict_mean(self, x):
        X, single = self._as_batch(x)
        w = np.exp(self._log_input_weights(X))
        out = np.einsum("nk,nk->n", w, self._component_means(X))
        return float(out[0]) if single else out

    def predict_variance(self, x):
        """Law of total variance over the component conditionals."""
        X, single = self._as_batch(x)
        w = np.exp(self._log_input_weights(X))
        m = self._component_means(X)
        mean = np.einsum("nk,nk->n", w, m)
        second = np.einsum("nk,nk->n", w, self.cond_var[None, :] + m * m)
        var = second - mean * mean
        var = np.maximum(var, 0.0)  # cancellation can leave ~-1e-16
        return float(var[0]) if single else var

    def to_dict(self) -> dict:
        return {"mixture": self.joint.to_dict(), "split": {"n_inputs": self.n_inputs, "output_index": self.n_inputs}}

    @classmethod
    def from_dict(cls, blob: dict) -> "GmrModel":
        joint = GaussianMixture.from_dict(blob["mixture"])
        split = blob.get("split", {})
        if int(split.get("n_inputs", joint.dim - 1)) != joint.dim - 1:
            raise ValidationError("only a single trailing output coordinate is supported")
        return cls(joint)


def input_weights(model: GmrModel, x) -> np.ndarray:
    return model.input_weights(x)


def predict_mean(model: GmrModel, x) -> float:
    return model.predict_mean(x)


def predict_variance(model: GmrModel, x) -> float:
    return model.predict_variance(x)
