"""Interpolation schedules, bridge coefficients, and the constant-speed condition.

A schedule mixes a data point ``x`` and a noise point ``z`` as
``x_t = alpha_t * x + sigma_t * z``.  Three families are supported:

* ``linear``        alpha = 1 - t, sigma = t on [0, 1]
* ``trig``          alpha = cos t, sigma = sin t on [0, pi/2]
* ``power:<c>``     alpha = (1 - gamma_t)^c, sigma = gamma_t^c on [0, 1],
                    where gamma_t inverts the regularized incomplete beta
                    relation I_gamma(c, c) = t and c lies in [0.5, 1]

All three keep the speed ``nu = alpha*sigma' - sigma*alpha'`` constant in t
(1 for linear/trig, c*B(c, c) for the power family), which is what makes the
one-step flow-map representation well posed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, InvariantViolation

HALF_PI = float(np.pi / 2.0)

_KINDS = ("linear", "trig", "power")

# Slack for floating-point drift at domain boundaries.
_EDGE_EPS = 1e-9


def _beta_kernel(phi: np.ndarray, c: float, tol: float = 5e-12) -> np.ndarray:
    """Incomplete beta B(gamma; c, c) with gamma = sin^2(phi).

    Substituting eta = sin^2(u) removes the endpoint singularities of the
    raw integrand eta^(c-1) (1-eta)^(c-1), leaving the smooth kernel
    2 * (sin u * cos u)^(2c-1) on [0, phi].  Integrated by composite Simpson
    with panel doubling until two refinements agree to ``tol``.
    """
    phi = np.atleast_1d(np.asarray(phi, dtype=np.float64))
    expo = 2.0 * c - 1.0

    def simpson(n: int) -> np.ndarray:
        u = phi[:, None] * np.linspace(0.0, 1.0, n + 1)[None, :]
        base = np.sin(u) * np.cos(u)
        if expo == 0.0:
            g = np.full_like(base, 2.0)
        elif expo == 1.0:
            g = 2.0 * base
        else:
            g = 2.0 * np.power(base, expo)
        w = np.ones(n + 1)
        w[1:-1:2] = 4.0
        w[2:-1:2] = 2.0
        return (phi / (3.0 * n)) * (g @ w)

    n = 128
    prev = simpson(n)
    while n < 4096:
        n *= 2
        cur = simpson(n)
        if np.max(np.abs(cur - prev)) < tol:
            return cur
        prev = cur
    return prev


@dataclass(frozen=True)
class BridgeCoeffs:
    """A_{t,s} = sigma_t*alpha_s - sigma_s*alpha_t and its first two t-derivatives."""

    A: np.ndarray
    A1: np.ndarray
    A2: np.ndarray


@dataclass(frozen=True)
class Interpolant:
    kind: str
    c: float = 1.0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown interpolant kind {self.kind!r}")
        if self.kind == "power" and not (0.5 <= self.c <= 1.0):
            raise ValueError(f"power-family exponent must lie in [0.5, 1], got {self.c}")

    @property
    def t_max(self) -> float:
        return HALF_PI if self.kind == "trig" else 1.0

    @property
    def nu(self) -> float:
        """Constant speed alpha*sigma' - sigma*alpha' (no grid verification)."""
        if self.kind != "power":
            return 1.0
        if "nu" not in self._cache:
            # nu = c * B(c, c); full beta is the kernel at phi = pi/2.
            self._cache["nu"] = self.c * float(_beta_kernel(np.array([HALF_PI]), self.c)[0])
        return self._cache["nu"]

    def _check_domain(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < -_EDGE_EPS) or np.any(t > self.t_max + _EDGE_EPS):
            raise DomainError(
                f"time outside [0, {self.t_max:.6g}] for {self.kind} interpolant"
            )
        return np.clip(t, 0.0, self.t_max)

    def _gamma(self, t: np.ndarray) -> np.ndarray:
        """Invert I_gamma(c, c) = t by bisection (tolerance 1e-12, <=200 iters)."""
        beta_cc = self.nu / self.c
        target = np.asarray(t, dtype=np.float64) * beta_cc
        lo = np.zeros_like(target)
        hi = np.ones_like(target)
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            val = _beta_kernel(np.arcsin(np.sqrt(mid)), self.c)
            above = val > target
            hi = np.where(above, mid, hi)
            lo = np.where(above, lo, mid)
            if np.max(hi - lo) < 1e-12:
                break
        return 0.5 * (lo + hi)

    def schedule(self, t) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Return (alpha, sigma, dalpha, dsigma) at time t (scalar or array)."""
        t = self._check_domain(t)
        if self.kind == "linear":
            one = np.ones_like(t)
            return 1.0 - t, t + 0.0, -one, one
        if self.kind == "trig":
            return np.cos(t), np.sin(t), -np.sin(t), np.cos(t)
        gamma = self._gamma(np.atleast_1d(t))
        c, nu = self.c, self.nu
        alpha = np.power(1.0 - gamma, c)
        sigma = np.power(gamma, c)
        # From nu = c*(1-g)^(c-1) g^(c-1) g': the g' factors cancel, leaving
        # closed forms in gamma alone.
        dalpha = -nu * np.power(gamma, 1.0 - c)
        dsigma = nu * np.power(1.0 - gamma, 1.0 - c)
        if np.isscalar(t) or t.ndim == 0:
            return alpha[0], sigma[0], dalpha[0], dsigma[0]
        return alpha, sigma, dalpha, dsigma

    def _bridge_a1(self, t, s) -> np.ndarray:
        _, _, dat, dst = self.schedule(t)
        als, sis, _, _ = self.schedule(s)
        return dst * als - sis * dat

    def bridge(self, t, s) -> BridgeCoeffs:
        """Bridge coefficients A, dA/dt, d^2A/dt^2 between times t and s."""
        t = self._check_domain(t)
        s = self._check_domain(s)
        if self.kind == "linear":
            z = np.zeros_like(np.asarray(t, dtype=np.float64) * np.asarray(s))
            return BridgeCoeffs(A=t - s, A1=z + 1.0, A2=z)
        if self.kind == "trig":
            d = np.asarray(t, dtype=np.float64) - s
            return BridgeCoeffs(A=np.sin(d), A1=np.cos(d), A2=-np.sin(d))
        alt, sit, dat, dst = self.schedule(t)
        als, sis, _, _ = self.schedule(s)
        A = sit * als - sis * alt
        A1 = dst * als - sis * dat
        # Second derivative by differencing A1; accuracy only has to support
        # its use inside the detached regression target.
        h = 1e-5
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        s_b = np.broadcast_to(np.asarray(s, dtype=np.float64), t.shape)
        tm, tp = t - h, t + h
        lo_edge, hi_edge = tm < 0.0, tp > self.t_max
        inner = ~(lo_edge | hi_edge)
        A2 = np.empty_like(t)
        if np.any(inner):
            A2[inner] = (
                self._bridge_a1(tp[inner], s_b[inner])
                - self._bridge_a1(tm[inner], s_b[inner])
            ) / (2.0 * h)
        for mask, sign in ((lo_edge, 1.0), (hi_edge, -1.0)):
            if np.any(mask):
                t0 = t[mask]
                a0 = self._bridge_a1(t0, s_b[mask])
                a1 = self._bridge_a1(t0 + sign * h, s_b[mask])
                a2 = self._bridge_a1(t0 + sign * 2 * h, s_b[mask])
                A2[mask] = sign * (-3.0 * a0 + 4.0 * a1 - a2) / (2.0 * h)
        if np.ndim(A) == 0:
            return BridgeCoeffs(A=A, A1=A1, A2=A2[0])
        return BridgeCoeffs(A=A, A1=A1, A2=A2.reshape(np.shape(A)))

    def interpolate(self, x: np.ndarray, z: np.ndarray, t) -> np.ndarray:
        """x_t = alpha_t * x + sigma_t * z."""
        x, z = np.asarray(x, dtype=np.float64), np.asarray(z, dtype=np.float64)
        if x.shape != z.shape:
            raise ValueError(f"shape mismatch: x {x.shape} vs z {z.shape}")
        alpha, sigma, _, _ = self.schedule(t)
        return _per_row(alpha, x) * x + _per_row(sigma, x) * z

    def conditional_velocity(self, x: np.ndarray, z: np.ndarray, t) -> np.ndarray:
        """v_t(x_t | x) = alpha'_t * x + sigma'_t * z."""
        x, z = np.asarray(x, dtype=np.float64), np.asarray(z, dtype=np.float64)
        if x.shape != z.shape:
            raise ValueError(f"shape mismatch: x {x.shape} vs z {z.shape}")
        _, _, dalpha, dsigma = self.schedule(t)
        return _per_row(dalpha, x) * x + _per_row(dsigma, x) * z

    def from_normalized(self, t):
        """Map normalized time in [0, 1] into the interpolant's own domain."""
        return np.asarray(t, dtype=np.float64) * self.t_max


def _per_row(coef, arr: np.ndarray):
    """Broadcast per-sample scalars over trailing feature dimensions."""
    coef = np.asarray(coef, dtype=np.float64)
    if coef.ndim == 0 or arr.ndim == coef.ndim:
        return coef
    return coef.reshape(coef.shape + (1,) * (arr.ndim - coef.ndim))


def make_interpolant(spec: str) -> Interpolant:
    """Build an interpolant from its config name: linear | trig | power:<c>."""
    spec = spec.strip().lower()
    if spec == "linear":
        return Interpolant("linear")
    if spec == "trig":
        return Interpolant("trig")
    if spec.startswith("power:"):
        try:
            c = float(spec.split(":", 1)[1])
        except ValueError as e:
            raise ValueError(f"bad power-family spec {spec!r}") from e
        return Interpolant("power", c=c)
    raise ValueError(f"unknown interpolant spec {spec!r}")


def nu(interp: Interpolant, points: int = 1024, tol: float = 1e-6) -> float:
    """Return nu after verifying its constancy on a dense time grid.

    Raises InvariantViolation if alpha*sigma' - sigma*alpha' deviates from
    the midpoint value by more than ``tol`` anywhere on the grid; this guards
    schedule families added later against silently breaking the flow-map
    representation.
    """
    grid = np.linspace(0.0, interp.t_max, points)
    alpha, sigma, dalpha, dsigma = interp.schedule(grid)
    vals = alpha * dsigma - sigma * dalpha
    ref = vals[points // 2]
    dev = float(np.max(np.abs(vals - ref)))
    if dev >= tol:
        raise InvariantViolation(
            f"nu varies by {dev:.3e} over the domain of {interp.kind} (tol {tol:g})"
        )
    return float(ref)
