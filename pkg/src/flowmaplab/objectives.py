"""Training objectives over the one-step flow-map representation.

The flow map is parameterized as ``f(x_t; t, s) = (A' x_t - A F(x_t; t, s)) / nu``
with bridge coefficient ``A = A_{t,s}``.  Its total time derivative along a
guiding velocity v,

    df/dt = (A'' x_t + A' (v - F) - A dF/dt) / nu,

is the residual every objective here is built from.  Squaring it directly
gives the Eulerian-distillation family (``ed`` with the oracle marginal
velocity, ``dt`` with the conditional velocity, ``sd``/``sd_sg`` with the
model's own instantaneous velocity); detaching it into a regression target

    F_tgt = A'' x_t + A' v + (1 - A') F - A dF/dt

gives the consistency-training family (``ct``, ``cd``, ``sdr``) and the
joint objectives (``isd`` and its CFG variants ``isd_t``, ``isd_u``,
``isd_c``).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch

from .errors import UnsupportedConfigError
from .fieldnet import FieldNet
from .interpolant import Interpolant
from .mixture import GaussianMixture, batch_marginal_velocity

OBJECTIVES = (
    "cfm", "ed", "dt", "ct", "cd", "sd", "sd_sg", "sdr",
    "isd", "isd_t", "isd_u", "isd_c",
)
GUIDES = ("conditional", "oracle", "self", "batch", "precfg")

# objective -> (loss form, default guiding velocity)
_FORMS = {
    "cfm": ("cfm", "conditional"),
    "ed": ("residual", "oracle"),
    "dt": ("residual", "conditional"),
    "sd": ("residual", "self"),
    "sd_sg": ("residual", "self"),
    "ct": ("target", "conditional"),
    "cd": ("target", "oracle"),
    "sdr": ("target", "self"),
    "isd": ("joint", "self"),
    "isd_t": ("joint", "self"),
    "isd_u": ("joint", "precfg"),
    "isd_c": ("joint", "precfg"),
}


@dataclass(frozen=True)
class LossConfig:
    objective: str = "isd"
    guiding: str | None = None      # None -> objective default
    jvp: str = "approx"             # "exact" | "approx"
    jvp_eps: float = 0.005
    weighting: str = "adaptive"     # "none" | "cosine" | "adaptive"
    weight_p: float = 1.0
    weight_eta: float = 0.01
    omega: float = 1.0
    label_dropout: float = 0.0
    ct_bridge_weight: bool = False  # extra A/nu^2 factor on target-form losses

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise UnsupportedConfigError(f"unknown objective {self.objective!r}")
        if self.guiding is not None and self.guiding not in GUIDES:
            raise UnsupportedConfigError(f"unknown guiding velocity {self.guiding!r}")
        if self.jvp not in ("exact", "approx"):
            raise UnsupportedConfigError(f"jvp mode must be exact or approx, got {self.jvp!r}")
        if self.jvp_eps <= 0.0:
            raise UnsupportedConfigError("jvp_eps must be positive")
        if self.weighting not in ("none", "cosine", "adaptive"):
            raise UnsupportedConfigError(f"unknown weighting {self.weighting!r}")
        if self.omega < 1.0:
            raise UnsupportedConfigError("guidance scale omega must be >= 1")
        if not 0.0 <= self.label_dropout < 1.0:
            raise UnsupportedConfigError("label dropout must lie in [0, 1)")

    @property
    def guide(self) -> str:
        return self.guiding or _FORMS[self.objective][1]

    @property
    def form(self) -> str:
        return _FORMS[self.objective][0]

    def with_(self, **kw) -> "LossConfig":
        return replace(self, **kw)


@dataclass
class LossOutput:
    total: torch.Tensor      # weighted scalar, differentiable
    cfm: float               # unweighted mean of the flow-matching term
    sd: float                # unweighted mean of the map-consistency term


# ----------------------------------------------------------------------
# coefficient plumbing: numpy schedule values -> torch column tensors
# ----------------------------------------------------------------------


def _col(a: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.atleast_1d(np.asarray(a, dtype=np.float64))).reshape(-1, 1)


def schedule_cols(interp: Interpolant, t: np.ndarray):
    alpha, sigma, dalpha, dsigma = interp.schedule(t)
    return _col(alpha), _col(sigma), _col(dalpha), _col(dsigma)


def bridge_cols(interp: Interpolant, t: np.ndarray, s: np.ndarray):
    b = interp.bridge(t, s)
    return _col(b.A), _col(b.A1), _col(b.A2)


def flow_map(interp: Interpolant, x_t: torch.Tensor, t, s, F: torch.Tensor) -> torch.Tensor:
    """One-step flow map f = (A' x_t - A F) / nu."""
    A, A1, _ = bridge_cols(interp, np.asarray(t, dtype=np.float64),
                           np.asarray(s, dtype=np.float64))
    return (A1 * x_t - A * F) / interp.nu


def sdr_target_parts(x_t, F, v, dFdt, A, A1, A2) -> torch.Tensor:
    """Regression target F + A''x + A'(v - F) - A dF/dt.

    Written as A''x + A'v + (1 - A')F - A dF/dt so that under the linear
    schedule (A'' = 0, A' = 1) the zero terms drop out bitwise and the
    result is exactly the average-velocity regression target v - (t-s) dF/dt.
    """
    return A2 * x_t + A1 * v + (1.0 - A1) * F - A * dFdt


def pre_cfg_velocity(v_cond: torch.Tensor, f_null: torch.Tensor, omega: float) -> torch.Tensor:
    """Self-referential CFG flow-matching target F_null + omega (v - F_null).

    ``f_null`` must already be gradient-detached.  omega = 1 returns the
    conditional velocity itself, exactly.
    """
    if omega == 1.0:
        return v_cond
    return f_null + omega * (v_cond - f_null)


# ----------------------------------------------------------------------
# loss evaluation
# ----------------------------------------------------------------------


def _detached(params):
    return {k: v.detach() for k, v in params.items()}


def _cat_labels(labels, copies: int):
    return None if labels is None else torch.cat([labels] * copies)


def _dfdt_approx(net: FieldNet, params, x_t, t_t, s_t, v, eps, labels, omega):
    """Central difference along displaced inputs, both sides in one pass."""
    n = x_t.shape[0]
    X = torch.cat([x_t + eps * v, x_t - eps * v])
    T = torch.cat([t_t + eps, t_t - eps])
    S = torch.cat([s_t, s_t])
    om = None if omega is None else (omega if np.isscalar(omega) else torch.cat([omega] * 2))
    out = net.apply(params, X, T, S, labels=_cat_labels(labels, 2), omega=om)
    return (out[:n] - out[n:]) / (2.0 * eps)


def _dfdt(net: FieldNet, params, x_t, t_t, s_t, tangent_v, labels, omega, cfg: LossConfig,
          with_grad: bool):
    """dF/dt along the tangent velocity, exact (forward-mode) or central FD."""
    p = params if with_grad else _detached(params)
    if cfg.jvp == "exact":
        if with_grad:
            return net.apply_jvp(p, x_t, t_t, s_t, [(tangent_v, 1.0, 0.0)],
                                 labels=labels, omega=omega)[1][0]
        with torch.no_grad():
            return net.apply_jvp(p, x_t, t_t, s_t, [(tangent_v, 1.0, 0.0)],
                                 labels=labels, omega=omega)[1][0]
    if with_grad:
        return _dfdt_approx(net, p, x_t, t_t, s_t, tangent_v, cfg.jvp_eps, labels, omega)
    with torch.no_grad():
        return _dfdt_approx(net, p, x_t, t_t, s_t, tangent_v, cfg.jvp_eps, labels, omega)


def eulerian_residual(net: FieldNet, params, interp: Interpolant, x_t, t, s,
                      guide: torch.Tensor, labels=None, jvp: str = "exact",
                      jvp_eps: float = 0.005) -> torch.Tensor:
    """df/dt of the represented flow map along ``guide``; zero at the optimum."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    s = np.atleast_1d(np.asarray(s, dtype=np.float64))
    x_t = torch.as_tensor(x_t, dtype=torch.float64)
    t_t, s_t = torch.from_numpy(t), torch.from_numpy(s)
    A, A1, A2 = bridge_cols(interp, t, s)
    if jvp == "exact":
        F, (dF,) = net.apply_jvp(params, x_t, t_t, s_t, [(guide, 1.0, 0.0)], labels=labels)
    else:
        F = net.apply(params, x_t, t_t, s_t, labels=labels)
        dF = _dfdt_approx(net, params, x_t, t_t, s_t, guide, jvp_eps, labels, None)
    return (A2 * x_t + A1 * (guide - F) - A * dF) / interp.nu


def _weights(cfg: LossConfig, interp: Interpolant, t: np.ndarray,
             per_sample: torch.Tensor) -> torch.Tensor:
    if cfg.weighting == "none":
        return torch.ones_like(per_sample)
    if cfg.weighting == "cosine":
        t_norm = np.asarray(t, dtype=np.float64) / interp.t_max
        return torch.from_numpy(np.cos(0.5 * np.pi * t_norm))
    return (per_sample.detach() + cfg.weight_eta) ** (-cfg.weight_p)


def _guide_velocity(name: str, *, v_cond, f_tt_det, mixture, interp, x_t, t, cfg,
                    f_null_det=None):
    if name == "conditional":
        return v_cond
    if name == "self":
        return f_tt_det
    if name == "oracle":
        if mixture is None:
            raise UnsupportedConfigError("oracle guidance needs a mixture")
        v = mixture.marginal_velocity(interp, x_t.detach().numpy(), t)
        return torch.from_numpy(np.atleast_2d(v))
    if name == "batch":
        v = batch_marginal_velocity(interp, x_t.detach().numpy(), x_t.detach().numpy(), t)
        return torch.from_numpy(np.atleast_2d(v))
    if name == "precfg":
        return pre_cfg_velocity(v_cond, f_null_det, cfg.omega)
    raise UnsupportedConfigError(f"unknown guiding velocity {name!r}")


def _mean(x: torch.Tensor) -> float:
    return float(x.detach().mean())


def compute_loss(net: FieldNet, params, interp: Interpolant, cfg: LossConfig,
                 x: torch.Tensor, z: torch.Tensor, t: np.ndarray, s: np.ndarray,
                 labels=None, mixture: GaussianMixture | None = None) -> LossOutput:
    """Evaluate the configured objective on one batch.

    ``x``/``z`` are data and noise (n, d) tensors; ``t``/``s`` are ordered
    times (t >= s) in the interpolant's own domain.  Label dropout, ordering
    and time-domain scaling are the caller's job.
    """
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    s = np.atleast_1d(np.asarray(s, dtype=np.float64))
    alpha, sigma, dalpha, dsigma = schedule_cols(interp, t)
    x_t = alpha * x + sigma * z
    v_cond = dalpha * x + dsigma * z
    t_t, s_t = torch.from_numpy(t), torch.from_numpy(s)
    obj, form = cfg.objective, cfg.form
    n = x.shape[0]

    if obj == "isd_c" and not net.omega_channel:
        raise UnsupportedConfigError("isd_c needs a network with a guidance-scale channel")

    if form == "cfm":
        f_tt = net.apply(params, x_t, t_t, t_t, labels=labels)
        cfm_i = ((f_tt - v_cond) ** 2).sum(dim=1)
        w = _weights(cfg, interp, t, cfm_i)
        return LossOutput((w * cfm_i).mean(), _mean(cfm_i), 0.0)

    A, A1, A2 = bridge_cols(interp, t, s)
    nu = interp.nu

    if form == "residual":
        f_tt_det = None
        if cfg.guide == "self":
            with torch.no_grad():
                f_tt_det = net.apply(_detached(params), x_t, t_t, t_t, labels=labels)
        guide = _guide_velocity(cfg.guide, v_cond=v_cond, f_tt_det=f_tt_det,
                                mixture=mixture, interp=interp, x_t=x_t, t=t, cfg=cfg)
        guide = guide.detach()
        if obj == "sd_sg":
            if cfg.jvp == "exact":
                F, (dF_space, dF_time) = net.apply_jvp(
                    params, x_t, t_t, s_t, [(guide, 0.0, 0.0), (None, 1.0, 0.0)],
                    labels=labels)
            else:
                fn = net.field_fn(params, labels=labels)
                F = fn(x_t, t_t, s_t)
                e = cfg.jvp_eps
                dF_time = (fn(x_t, t_t + e, s_t) - fn(x_t, t_t - e, s_t)) / (2.0 * e)
                dF_space = (fn(x_t + e * guide, t_t, s_t) - fn(x_t - e * guide, t_t, s_t)) \
                    / (2.0 * e)
            # time-derivative branch keeps its gradient; the advected
            # (spatial) branch is detached
            r = (A2 * x_t - A1 * F - A * dF_time) / nu \
                + ((A1 * guide - A * dF_space) / nu).detach()
        else:
            if cfg.jvp == "exact":
                F, (dF,) = net.apply_jvp(params, x_t, t_t, s_t, [(guide, 1.0, 0.0)],
                                         labels=labels)
            else:
                F = net.apply(params, x_t, t_t, s_t, labels=labels)
                dF = _dfdt_approx(net, params, x_t, t_t, s_t, guide, cfg.jvp_eps,
                                  labels, None)
            r = (A2 * x_t + A1 * (guide - F) - A * dF) / nu
        sd_i = (r ** 2).sum(dim=1)
        w = _weights(cfg, interp, t, sd_i)
        return LossOutput((w * sd_i).mean(), 0.0, _mean(sd_i))

    if form == "target":
        f_tt_det = None
        if cfg.guide == "self":
            with torch.no_grad():
                f_tt_det = net.apply(_detached(params), x_t, t_t, t_t, labels=labels)
        f_null_det = None
        if cfg.guide == "precfg":
            with torch.no_grad():
                f_null_det = net.apply(_detached(params), x_t, t_t, t_t, labels=None)
        guide = _guide_velocity(cfg.guide, v_cond=v_cond, f_tt_det=f_tt_det,
                                mixture=mixture, interp=interp, x_t=x_t, t=t, cfg=cfg,
                                f_null_det=f_null_det).detach()
        f_ts = net.apply(params, x_t, t_t, s_t, labels=labels)
        dF = _dfdt(net, params, x_t, t_t, s_t, guide, labels, None, cfg, with_grad=False)
        tgt = sdr_target_parts(x_t, f_ts.detach(), guide, dF, A, A1, A2)
        sd_i = ((f_ts - tgt) ** 2).sum(dim=1)
        if cfg.ct_bridge_weight:
            sd_i = sd_i * (A.squeeze(1) / nu**2)
        w = _weights(cfg, interp, t, sd_i)
        return LossOutput((w * sd_i).mean(), 0.0, _mean(sd_i))

    # joint objectives: flow matching + detached-target self-distillation.
    # F_{t,s} and F_{t,t} are evaluated in one stacked forward pass.
    if obj == "isd_c":
        om2 = torch.cat([torch.full((n,), cfg.omega, dtype=torch.float64),
                         torch.ones(n, dtype=torch.float64)])
        f2 = net.apply(params, torch.cat([x_t, x_t]), torch.cat([t_t, t_t]),
                       torch.cat([s_t, t_t]), labels=_cat_labels(labels, 2), omega=om2)
        f_ts, f_tt = f2[:n], f2[n:]
        cfm_tgt = v_cond
        with torch.no_grad():
            f_null = net.apply(_detached(params), x_t, t_t, t_t, labels=None, omega=1.0)
        f_c = f_tt.detach()
        guide = f_null + cfg.omega * (f_c - f_null) if cfg.omega != 1.0 else f_c
        dF = _dfdt(net, params, x_t, t_t, s_t, guide, labels, cfg.omega, cfg,
                   with_grad=False)
    else:
        f2 = net.apply(params, torch.cat([x_t, x_t]), torch.cat([t_t, t_t]),
                       torch.cat([s_t, t_t]), labels=_cat_labels(labels, 2))
        f_ts, f_tt = f2[:n], f2[n:]
        if obj in ("isd_t", "isd_u"):
            with torch.no_grad():
                f_null = net.apply(_detached(params), x_t, t_t, t_t, labels=None)
        cfm_tgt = pre_cfg_velocity(v_cond, f_null, cfg.omega) if obj == "isd_t" else v_cond
        if obj == "isd_u":
            f_c = f_tt.detach()
            guide = f_null + cfg.omega * (f_c - f_null) if cfg.omega != 1.0 else f_c
        elif cfg.guide == "self":
            guide = f_tt.detach()
        else:
            guide = _guide_velocity(cfg.guide, v_cond=v_cond, f_tt_det=f_tt.detach(),
                                    mixture=mixture, interp=interp, x_t=x_t, t=t,
                                    cfg=cfg).detach()
        dF = _dfdt(net, params, x_t, t_t, s_t, guide, labels, None, cfg, with_grad=False)

    tgt = sdr_target_parts(x_t, f_ts.detach(), guide, dF, A, A1, A2)
    cfm_i = ((f_tt - cfm_tgt) ** 2).sum(dim=1)
    sd_i = ((f_ts - tgt) ** 2).sum(dim=1)
    w = _weights(cfg, interp, t, cfm_i + sd_i)
    total = (w * (cfm_i + sd_i)).mean()
    return LossOutput(total, _mean(cfm_i), _mean(sd_i))
