"""Gaussian-mixture data distribution with closed-form posterior oracles.

Everything a diagonal-covariance mixture admits in closed form lives here:
posterior responsibilities and moments given a noisy observation, the
marginal velocity field, its mini-batch ("network-free") approximation,
and a ground-truth flow map obtained by integrating the marginal-velocity
ODE with RK4.  These are the reference answers that trained fields are
scored against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, SingularTimeError, UnsupportedConfigError
from .interpolant import Interpolant

# Oracle evaluations are clipped this far (in normalized time) from the data
# endpoint, where sigma_t -> 0 makes the posterior formulas singular.  The
# limit map there is the identity.
T_MIN = 1e-3

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class PosteriorStats:
    """Posterior of the clean data point given a noisy observation.

    responsibilities: (n, K) mixture weights given x_t, rows sum to 1
    component_means:  (n, K, d) per-component posterior means
    component_vars:   (n, K, d) per-component posterior variances
    mean:             (n, d) overall posterior mean E[x | x_t]
    """

    responsibilities: np.ndarray
    component_means: np.ndarray
    component_vars: np.ndarray
    mean: np.ndarray


class GaussianMixture:
    """Mixture with diagonal covariances, shared across threads read-only."""

    def __init__(self, weights, means, variances):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        self.variances = np.atleast_2d(np.asarray(variances, dtype=np.float64))
        if self.weights.ndim != 1:
            raise DimensionError("weights must be a vector")
        k = self.weights.shape[0]
        if self.means.shape[0] != k or self.variances.shape != self.means.shape:
            raise DimensionError(
                f"inconsistent component shapes: weights {k}, means "
                f"{self.means.shape}, variances {self.variances.shape}"
            )
        if np.any(self.weights < 0.0):
            raise ValueError("mixture weights must be nonnegative")
        if abs(float(self.weights.sum()) - 1.0) > 1e-12:
            raise ValueError(f"mixture weights sum to {self.weights.sum()!r}, not 1")
        if np.any(self.variances <= 0.0):
            raise ValueError("all variances must be positive")
        self._log_weights = np.log(np.maximum(self.weights, 1e-300))

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def mean(self) -> np.ndarray:
        """Overall mixture mean (the mean-collapse limit of one-step maps)."""
        return self.weights @ self.means

    @classmethod
    def ring(cls, k: int = 8, radius: float = 1.5, sigma: float = 0.12) -> "GaussianMixture":
        """Default toy dataset: k equal components on a circle."""
        angles = 2.0 * np.pi * np.arange(k) / k
        means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        return cls(np.full(k, 1.0 / k), means, np.full((k, 2), sigma**2))

    def sample(self, rng: np.random.Generator, n: int):
        """Draw n points; returns (points (n, d), component labels (n,))."""
        if n < 1:
            raise ValueError("need at least one sample")
        labels = rng.choice(self.n_components, size=n, p=self.weights)
        eps = rng.standard_normal((n, self.dim))
        x = self.means[labels] + np.sqrt(self.variances[labels]) * eps
        return x, labels

    def _check_times(self, interp: Interpolant, y: np.ndarray, t):
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        if y.shape[1] != self.dim:
            raise DimensionError(f"points have dim {y.shape[1]}, mixture has {self.dim}")
        alpha, sigma, dalpha, dsigma = interp.schedule(t)
        sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
        if np.any(sigma <= 0.0):
            raise SingularTimeError(
                "posterior is singular where sigma_t = 0; clip to T_MIN first"
            )
        bc = np.broadcast_to
        n = y.shape[0]
        return y, bc(np.atleast_1d(alpha), (n,)), bc(sigma, (n,)), \
            bc(np.atleast_1d(dalpha), (n,)), bc(np.atleast_1d(dsigma), (n,))

    def posterior(self, interp: Interpolant, y, t) -> PosteriorStats:
        """Closed-form posterior p(x | x_t = y) as a K-component mixture.

        Per component i and dimension d:
            evidence   N(y; alpha*mu_i, alpha^2 sig_i^2 + sigma_t^2)
            mean       (alpha sig_i^2 y + mu_i sigma_t^2) / (sigma_t^2 + sig_i^2 alpha^2)
            variance   sig_i^2 sigma_t^2 / (sigma_t^2 + sig_i^2 alpha^2)
        Responsibilities are evidence-weighted priors, normalized in the log
        domain so small sigma_t cannot underflow them.
        """
        y, alpha, sigma, _, _ = self._check_times(interp, y, t)
        a = alpha[:, None, None]
        s2 = (sigma**2)[:, None, None]
        mu = self.means[None, :, :]
        var = self.variances[None, :, :]

        ev_var = a**2 * var + s2
        resid = y[:, None, :] - a * mu
        log_ev = -0.5 * np.sum(resid**2 / ev_var + np.log(ev_var) + _LOG_2PI, axis=2)
        logits = self._log_weights[None, :] + log_ev
        logits -= logits.max(axis=1, keepdims=True)
        r = np.exp(logits)
        r /= r.sum(axis=1, keepdims=True)

        denom = s2 + var * a**2
        comp_mean = (a * var * y[:, None, :] + mu * s2) / denom
        comp_var = var * s2 / denom
        mean = np.sum(r[:, :, None] * comp_mean, axis=1)
        return PosteriorStats(r, comp_mean, np.broadcast_to(comp_var, comp_mean.shape), mean)

    def marginal_velocity(self, interp: Interpolant, y, t) -> np.ndarray:
        """v*(y, t) = alpha' m + sigma' (y - alpha m) / sigma, m = E[x | x_t=y]."""
        y2, alpha, sigma, dalpha, dsigma = self._check_times(interp, y, t)
        m = self.posterior(interp, y2, t).mean
        v = dalpha[:, None] * m + dsigma[:, None] * (y2 - alpha[:, None] * m) / sigma[:, None]
        return v if np.asarray(y).ndim > 1 else v[0]

    def true_flowmap(self, interp: Interpolant, y, t: float, s: float,
                     steps: int = 128) -> np.ndarray:
        """Integrate dx/dtau = v*(x, tau) from t to s with classic RK4.

        The endpoint nearer the data is clipped to T_MIN (normalized) where
        the velocity oracle becomes singular.
        """
        if steps < 1:
            raise ValueError("need at least one integration step")
        t_floor = T_MIN * interp.t_max
        t = float(np.clip(t, t_floor, interp.t_max))
        s = float(np.clip(s, t_floor, interp.t_max))
        y = np.atleast_2d(np.asarray(y, dtype=np.float64)).copy()
        h = (s - t) / steps
        if h == 0.0:
            return y
        tau = t
        for _ in range(steps):
            k1 = self.marginal_velocity(interp, y, tau)
            k2 = self.marginal_velocity(interp, y + 0.5 * h * k1, tau + 0.5 * h)
            k3 = self.marginal_velocity(interp, y + 0.5 * h * k2, tau + 0.5 * h)
            k4 = self.marginal_velocity(interp, y + h * k3, tau + h)
            y += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            tau += h
        return y


def batch_marginal_velocity(interp: Interpolant, batch: np.ndarray, y, t) -> np.ndarray:
    """Marginal velocity of the empirical measure of a mini-batch.

    Treats the batch as a Dirac mixture under the linear schedule, so each
    point contributes N(y; (1-t) x_j, t^2 I) evidence and velocity
    (y - x_j) / t.  Only defined for the linear interpolant; the softmax is
    computed from log evidences for stability at small t.
    """
    if interp.kind != "linear":
        raise UnsupportedConfigError("batch marginal velocity assumes the linear interpolant")
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    y_in = np.asarray(y, dtype=np.float64)
    y = np.atleast_2d(y_in)
    if batch.shape[1] != y.shape[1]:
        raise DimensionError("batch and query dimensions differ")
    t = float(t)
    if t <= 0.0:
        raise SingularTimeError("batch marginal velocity undefined at t = 0")
    # log N(y; (1-t) x_j, t^2 I) up to shared constants
    diff = y[:, None, :] - (1.0 - t) * batch[None, :, :]
    logits = -np.sum(diff**2, axis=2) / (2.0 * t**2)
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    vel = (y[:, None, :] - batch[None, :, :]) / t
    v = np.sum(w[:, :, None] * vel, axis=1)
    return v if y_in.ndim > 1 else v[0]


def parse_mixture(spec: str) -> GaussianMixture:
    """Parse a mixture config string.

    Two forms are accepted:
      ring:<k>:<radius>:<sigma>
      w:m1,m2:v1,v2|w:m1,m2:v1,v2|...   (weight : mean : variance triples)
    """
    spec = spec.strip()
    if spec.startswith("ring:"):
        parts = spec.split(":")
        if len(parts) != 4:
            raise ValueError(f"ring spec needs ring:<k>:<radius>:<sigma>, got {spec!r}")
        return GaussianMixture.ring(int(parts[1]), float(parts[2]), float(parts[3]))
    weights, means, variances = [], [], []
    for comp in spec.split("|"):
        fields = comp.strip().split(":")
        if len(fields) != 3:
            raise ValueError(f"mixture component {comp!r} is not weight:mean:variance")
        weights.append(float(fields[0]))
        means.append([float(v) for v in fields[1].split(",")])
        variances.append([float(v) for v in fields[2].split(",")])
    return GaussianMixture(weights, means, variances)
