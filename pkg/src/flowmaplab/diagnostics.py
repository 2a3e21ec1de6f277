"""Measurement instruments: residual proxy, sample distance, loss landscape.

``ed_proxy`` Monte-Carlo averages the squared Eulerian residual under the
analytic marginal velocity; a field that truly represents the flow map
drives it to zero, so it works as a degeneracy detector independent of the
training objective.  ``landscape_probe`` explores the loss surface along
the top-2 Hessian eigendirections (power iteration over finite-difference
Hessian-vector products) and reports the variance and spike counts used to
compare objective smoothness.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .fieldnet import FieldNet, hvp
from .interpolant import Interpolant
from .mixture import T_MIN, GaussianMixture
from .objectives import eulerian_residual


def ed_proxy(net: FieldNet, params: dict, mixture: GaussianMixture, interp: Interpolant,
             n: int, rng: np.random.Generator, time_a: float = 0.8, time_b: float = 1.0,
             labels=None, jvp: str = "exact") -> float:
    """Mean squared Eulerian residual with oracle guidance over fresh draws."""
    from .trainer import sample_times  # deferred: trainer imports this module

    if n < 1:
        raise ValueError("need at least one draw")
    x, _ = mixture.sample(rng, n)
    z = rng.standard_normal((n, mixture.dim))
    t, s = sample_times(rng, time_a, time_b, n, interp)
    t = np.maximum(t, T_MIN * interp.t_max)  # oracle is singular at the data end
    x_t = interp.interpolate(x, z, t)
    guide = torch.from_numpy(mixture.marginal_velocity(interp, x_t, t))
    with torch.no_grad():
        r = eulerian_residual(net, params, interp, torch.from_numpy(x_t), t, s,
                              guide, labels=labels, jvp=jvp)
    return float((r**2).sum(dim=1).mean())


def energy_distance(a: np.ndarray, b: np.ndarray, block: int = 1024) -> float:
    """Energy distance 2 E|A-B| - E|A-A'| - E|B-B'| via U-statistics."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("both sample sets must be non-empty")
    if a.shape[1] != b.shape[1]:
        raise ValueError("sample sets have different dimensions")

    def mean_cross(u, v):
        total = 0.0
        for i in range(0, u.shape[0], block):
            d = u[i:i + block, None, :] - v[None, :, :]
            total += float(np.sqrt((d**2).sum(axis=2)).sum())
        return total / (u.shape[0] * v.shape[0])

    def mean_within(u):
        n = u.shape[0]
        if n < 2:
            return 0.0
        total = 0.0
        for i in range(0, n, block):
            d = u[i:i + block, None, :] - u[None, :, :]
            total += float(np.sqrt((d**2).sum(axis=2)).sum())
        return total / (n * (n - 1))  # diagonal contributes zero

    return 2.0 * mean_cross(a, b) - mean_within(a) - mean_within(b)


@dataclass
class LandscapeReport:
    grid: np.ndarray            # (resolution, resolution) loss values
    alphas: np.ndarray
    sigma: float                # std of the grid
    spikes: int                 # values outside mean +- 1.96 sigma (own bound)
    eigvals: tuple[float, float]
    directions: np.ndarray      # (2, n_params)
    converged: bool

    def spikes_against(self, ref: "LandscapeReport") -> int:
        """Spike count against another report's 95% bound (common reference)."""
        lo = ref.grid.mean() - 1.96 * ref.sigma
        hi = ref.grid.mean() + 1.96 * ref.sigma
        return int(np.sum((self.grid < lo) | (self.grid > hi)))


def _power_iteration(net, params, loss_fn, rng, delta, n_iters=50, tol=1e-4,
                     deflate=None):
    n = net.n_params()
    u = torch.from_numpy(rng.standard_normal(n))
    if deflate is not None:
        u = u - (u @ deflate) * deflate
    u = u / torch.linalg.vector_norm(u)
    lam_prev, converged = None, False
    lam = 0.0
    for _ in range(n_iters):
        hu = hvp(net, params, loss_fn, u, delta)
        if deflate is not None:
            hu = hu - (hu @ deflate) * deflate
        lam = float(u @ hu)
        norm = float(torch.linalg.vector_norm(hu))
        if norm == 0.0:
            break
        u = hu / norm
        if lam_prev is not None and abs(lam - lam_prev) <= tol * max(1.0, abs(lam)):
            converged = True
            break
        lam_prev = lam
    return u, lam, converged


def landscape_probe(net: FieldNet, params: dict, loss_fn, resolution: int = 25,
                    radius: float = 1.0, rng: np.random.Generator | None = None,
                    n_iters: int = 50, tol: float = 1e-4) -> LandscapeReport:
    """Loss surface over the span of the top-2 Hessian eigendirections.

    ``loss_fn(params) -> scalar tensor`` must close over one frozen batch so
    the grid varies only through the parameters.  Non-convergence of the
    power iteration is reported, not raised.
    """
    rng = rng or np.random.default_rng(0)
    theta = net.flatten(params)
    delta = 1e-4 * (1.0 + float(theta.abs().max()))
    u1, lam1, conv1 = _power_iteration(net, params, loss_fn, rng, delta,
                                       n_iters=n_iters, tol=tol)
    u2, lam2, conv2 = _power_iteration(net, params, loss_fn, rng, delta,
                                       n_iters=n_iters, tol=tol, deflate=u1)
    alphas = np.linspace(-radius, radius, resolution)
    grid = np.empty((resolution, resolution))
    with torch.no_grad():
        for i, a in enumerate(alphas):
            for j, b in enumerate(alphas):
                p = net.unflatten(theta + a * u1 + b * u2)
                grid[i, j] = float(loss_fn(p))
    sigma = float(grid.std())
    mean = float(grid.mean())
    spikes = int(np.sum(np.abs(grid - mean) > 1.96 * sigma)) if sigma > 0 else 0
    return LandscapeReport(grid=grid, alphas=alphas, sigma=sigma, spikes=spikes,
                           eigvals=(lam1, lam2),
                           directions=np.stack([u1.numpy(), u2.numpy()]),
                           converged=conv1 and conv2)


def grad_norm_trace(records, start: int, end: int) -> dict:
    """Windowed gradient-norm statistics over metric records."""
    vals = [r.grad_norm for r in records if start <= r.step <= end]
    if not vals:
        raise ValueError(f"no records in step window [{start}, {end}]")
    return {"mean": float(np.mean(vals)), "max": float(np.max(vals)), "n": len(vals)}
