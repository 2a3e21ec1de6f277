"""Few-step generation by iterating the one-step flow-map update.

Each step moves the batch from time t_i to t_{i+1} via
``x <- (A'_{t_i,t_{i+1}} x - A_{t_i,t_{i+1}} F(x; t_i, t_{i+1}, c)) / nu``;
under the trigonometric schedule this is exactly
``cos(t_{i+1}-t_i) x + sin(t_{i+1}-t_i) F``.  Post-hoc classifier-free
guidance blends conditional and null field evaluations before the update.
"""

from __future__ import annotations

import numpy as np
import torch

from .fieldnet import FieldNet
from .interpolant import Interpolant
from .mixture import T_MIN


def uniform_schedule(interp: Interpolant, n_steps: int, t_min: float = T_MIN) -> np.ndarray:
    """Descending times from the noise end to the (clipped) data end."""
    if n_steps < 1:
        raise ValueError("need at least one sampling step")
    return np.linspace(interp.t_max, t_min * interp.t_max, n_steps + 1)


def _check_schedule(interp: Interpolant, schedule) -> np.ndarray:
    ts = np.asarray(schedule, dtype=np.float64)
    if ts.ndim != 1 or ts.shape[0] < 2:
        raise ValueError("schedule needs at least two timesteps")
    if np.any(ts < -1e-12) or np.any(ts > interp.t_max + 1e-12):
        raise ValueError("schedule leaves the interpolant's time domain")
    if np.any(np.diff(ts) > 0.0):
        raise ValueError("schedule times must be non-increasing")
    return ts


def few_step_sample(field, interp: Interpolant, z: torch.Tensor, schedule) -> torch.Tensor:
    """Iterate the flow-map update along ``schedule`` starting from noise z.

    ``field`` is a callable (x, t, s) -> F with conditioning already bound
    (see FieldNet.field_fn).  Pure given its inputs.
    """
    ts = _check_schedule(interp, schedule)
    x = torch.as_tensor(z, dtype=torch.float64)
    nu = interp.nu
    with torch.no_grad():
        for i in range(len(ts) - 1):
            b = interp.bridge(ts[i], ts[i + 1])
            t_col = torch.full((x.shape[0],), ts[i], dtype=torch.float64)
            s_col = torch.full((x.shape[0],), ts[i + 1], dtype=torch.float64)
            F = field(x, t_col, s_col)
            x = (float(b.A1) * x - float(b.A) * F) / nu
    return x


def post_cfg_sample(net: FieldNet, params: dict, interp: Interpolant, z: torch.Tensor,
                    schedule, labels, omega: float) -> torch.Tensor:
    """Sampling with post-hoc CFG: blend (1-w) F_null + w F_cond per step.

    omega = 1 is exactly conditional sampling (single field evaluation per
    step); omega = 0 is exactly unconditional sampling.
    """
    if net.n_classes == 0:
        raise ValueError("post-CFG sampling needs a class-conditional network")
    if omega == 1.0:
        return few_step_sample(net.field_fn(params, labels=labels), interp, z, schedule)
    if omega == 0.0:
        return few_step_sample(net.field_fn(params, labels=None), interp, z, schedule)

    def blended(x, t, s):
        f_c = net.apply(params, x, t, s, labels=labels)
        f_null = net.apply(params, x, t, s, labels=None)
        return (1.0 - omega) * f_null + omega * f_c

    return few_step_sample(blended, interp, z, schedule)
