"""Trainable field F(x; t, s, c) and the differentiation contracts it exposes.

The network is a small MLP over [x, fourier(t), fourier(s), class-embedding,
optional guidance-scale channel] with a C^2 activation (SiLU), evaluated in
float64 throughout.  Besides the forward pass this module provides:

* ``grad``        reverse-mode parameter gradients of scalar losses, valid
                  even when the loss contains exact-JVP subexpressions
* ``jvp_exact``   forward-mode directional derivative over (x, t, s)
* ``jvp_approx``  central finite difference along displaced inputs
* ``hvp``         Hessian-vector products by differencing gradients

Parameters travel as plain dicts of float64 tensors so that training state
can be packed into a flat vector and serialized byte-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch

from .errors import DimensionError

_MAGIC = b"FMLB"
_VERSION = 1


@dataclass
class Tangent:
    """Directional perturbation (dx, dt, ds) for forward-mode evaluation."""

    dx: torch.Tensor
    dt: float | torch.Tensor = 0.0
    ds: float | torch.Tensor = 0.0


class FieldNet:
    """MLP field with Fourier time features and optional class conditioning.

    ``n_classes = 0`` builds an unconditional net.  Otherwise an embedding
    table with ``n_classes + 1`` rows is added; the last row is the null
    label used for classifier-free guidance.  ``time_scale`` divides t and s
    before the Fourier features so trigonometric-domain times are seen on
    the same normalized scale as linear ones.
    """

    def __init__(self, data_dim: int, hidden: int = 256, depth: int = 5,
                 n_freqs: int = 8, n_classes: int = 0, class_embed_dim: int = 16,
                 omega_channel: bool = False, time_scale: float = 1.0):
        if depth < 2:
            raise ValueError("need at least input and output layers")
        self.data_dim = data_dim
        self.hidden = hidden
        self.depth = depth
        self.n_freqs = n_freqs
        self.n_classes = n_classes
        self.class_embed_dim = class_embed_dim if n_classes > 0 else 0
        self.omega_channel = omega_channel
        self.time_scale = float(time_scale)
        self.in_dim = (
            data_dim + 4 * n_freqs + self.class_embed_dim + (1 if omega_channel else 0)
        )
        dims = [self.in_dim] + [hidden] * (depth - 1) + [data_dim]
        self.layer_dims = list(zip(dims[:-1], dims[1:]))
        # Fourier frequencies pre-divided by the time scale so features see
        # normalized time regardless of the interpolant domain.
        self._freqs = (
            torch.pow(2.0, torch.arange(n_freqs, dtype=torch.float64)) * np.pi / self.time_scale
        )

    @property
    def null_label(self) -> int:
        return self.n_classes

    # ------------------------------------------------------------------
    # parameters
    # ------------------------------------------------------------------

    def init_params(self, seed: int = 0) -> dict[str, torch.Tensor]:
        """Fan-in uniform init; the final layer starts at zero so the flow
        map opens as a near-identity."""
        g = torch.Generator().manual_seed(int(seed))
        params: dict[str, torch.Tensor] = {}
        for i, (fan_in, fan_out) in enumerate(self.layer_dims):
            bound = 1.0 / np.sqrt(fan_in)
            w = torch.empty(fan_in, fan_out, dtype=torch.float64)
            b = torch.empty(fan_out, dtype=torch.float64)
            if i == len(self.layer_dims) - 1:
                w.zero_()
                b.zero_()
            else:
                w.uniform_(-bound, bound, generator=g)
                b.uniform_(-bound, bound, generator=g)
            params[f"w{i}"] = w
            params[f"b{i}"] = b
        if self.n_classes > 0:
            emb = torch.empty(self.n_classes + 1, self.class_embed_dim, dtype=torch.float64)
            emb.normal_(0.0, 0.05, generator=g)
            params["embed"] = emb
        return params

    def param_names(self) -> list[str]:
        names = []
        for i in range(len(self.layer_dims)):
            names += [f"w{i}", f"b{i}"]
        if self.n_classes > 0:
            names.append("embed")
        return names

    def flatten(self, params: dict[str, torch.Tensor]) -> torch.Tensor:
        return torch.cat([params[k].reshape(-1) for k in self.param_names()])

    def unflatten(self, vec: torch.Tensor) -> dict[str, torch.Tensor]:
        out, offset = {}, 0
        shapes = {f"w{i}": (fi, fo) for i, (fi, fo) in enumerate(self.layer_dims)}
        shapes.update({f"b{i}": (fo,) for i, (_, fo) in enumerate(self.layer_dims)})
        if self.n_classes > 0:
            shapes["embed"] = (self.n_classes + 1, self.class_embed_dim)
        for k in self.param_names():
            n = int(np.prod(shapes[k]))
            out[k] = vec[offset:offset + n].reshape(shapes[k])
            offset += n
        return out

    def n_params(self) -> int:
        n = sum(fi * fo + fo for fi, fo in self.layer_dims)
        if self.n_classes > 0:
            n += (self.n_classes + 1) * self.class_embed_dim
        return n

    # ------------------------------------------------------------------
    # forward
    # ------------------------------------------------------------------

    def _time_col(self, t, n: int) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
        return t.expand(n) if t.shape[0] == 1 and n > 1 else t

    def _features(self, x, t, s, labels, omega, params):
        n = x.shape[0]
        ang = torch.cat([t.reshape(-1, 1) * self._freqs, s.reshape(-1, 1) * self._freqs], dim=1)
        cols = [x, torch.sin(ang), torch.cos(ang)]
        if self.n_classes > 0:
            if labels is None:
                idx = torch.full((n,), self.null_label, dtype=torch.long)
            else:
                idx = torch.as_tensor(labels, dtype=torch.long)
                if idx.ndim == 0:
                    idx = idx.reshape(1).expand(n)
            cols.append(params["embed"][idx])
        if self.omega_channel:
            om = torch.as_tensor(1.0 if omega is None else omega, dtype=x.dtype).reshape(-1)
            cols.append(om.expand(n).reshape(-1, 1) if om.shape[0] == 1 else om.reshape(-1, 1))
        return torch.cat(cols, dim=1), ang

    def _check_x(self, x) -> torch.Tensor:
        x = torch.as_tensor(x, dtype=torch.float64)
        if x.ndim != 2 or x.shape[1] != self.data_dim:
            raise DimensionError(f"expected (n, {self.data_dim}) input, got {tuple(x.shape)}")
        return x

    def apply(self, params, x, t, s, labels=None, omega=None) -> torch.Tensor:
        """Forward pass; x is (n, d), times are scalars or (n,) tensors."""
        x = self._check_x(x)
        n = x.shape[0]
        h, _ = self._features(x, self._time_col(t, n), self._time_col(s, n),
                              labels, omega, params)
        last = len(self.layer_dims) - 1
        for i in range(len(self.layer_dims)):
            h = torch.addmm(params[f"b{i}"], h, params[f"w{i}"])
            if i != last:
                h = h * torch.sigmoid(h)  # SiLU; cheaper than the fused f64 kernel
        return h

    def apply_jvp(self, params, x, t, s, tangents, labels=None, omega=None):
        """Forward pass carrying one or more directional derivatives.

        ``tangents`` is a list of (dx, dt, ds) triples (dx may be None for
        zero; dt/ds are scalars or (n,) tensors).  Duals are propagated by
        hand through the feature map and each layer with plain tensor ops,
        so the result is itself differentiable in reverse mode.  Returns
        (F, [dF_1, ..., dF_k]).  Agrees with torch.func.jvp on the same
        field to roundoff; kept separate because it is several times faster
        on small batches.
        """
        x = self._check_x(x)
        n = x.shape[0]
        t = self._time_col(t, n)
        s = self._time_col(s, n)
        h, ang = self._features(x, t, s, labels, omega, params)
        sin_a, cos_a = torch.sin(ang), torch.cos(ang)
        k = len(tangents)
        dcols = []
        pad = self.class_embed_dim + (1 if self.omega_channel else 0)
        for dx, dt, ds in tangents:
            dxc = torch.zeros(n, self.data_dim, dtype=torch.float64) if dx is None \
                else torch.as_tensor(dx, dtype=torch.float64).expand(n, self.data_dim)
            dt_c = self._time_col(dt, n).reshape(-1, 1)
            ds_c = self._time_col(ds, n).reshape(-1, 1)
            dang = torch.cat([dt_c * self._freqs, ds_c * self._freqs], dim=1) / self.time_scale
            pieces = [dxc, cos_a * dang, -sin_a * dang]
            if pad:
                pieces.append(torch.zeros(n, pad, dtype=torch.float64))
            dcols.append(torch.cat(pieces, dim=1))
        dh = torch.cat(dcols, dim=0)  # (k n, in_dim)
        last = len(self.layer_dims) - 1
        for i in range(len(self.layer_dims)):
            w = params[f"w{i}"]
            h = torch.addmm(params[f"b{i}"], h, w)
            dh = dh @ w
            if i != last:
                sig = torch.sigmoid(h)
                act = h * sig
                # d silu = sig (1 + h (1 - sig)) = sig + act (1 - sig)
                dmul = torch.addcmul(sig, act, torch.rsub(sig, 1.0))
                dh = dh * (dmul if k == 1 else dmul.repeat(k, 1))
                h = act
        return h, list(dh.chunk(k, dim=0))

    def field_fn(self, params, labels=None, omega=None):
        """Closure (x, t, s) -> F with conditioning fixed, for JVP helpers."""
        return lambda x, t, s: self.apply(params, x, t, s, labels=labels, omega=omega)


# ----------------------------------------------------------------------
# differentiation helpers (work for any callable field, not just FieldNet)
# ----------------------------------------------------------------------


def jvp_exact(field, x, t, s, tangent: Tangent):
    """Forward-mode directional derivative of ``field`` at (x, t, s).

    Returns (F, dF) where dF = d/de field(x + e dx, t + e dt, s + e ds)|_0.
    """
    x = torch.as_tensor(x, dtype=torch.float64)
    t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    s = torch.as_tensor(s, dtype=torch.float64).reshape(-1)
    dx = torch.as_tensor(tangent.dx, dtype=torch.float64).expand_as(x)
    dt = torch.as_tensor(tangent.dt, dtype=torch.float64).expand_as(t) \
        if torch.as_tensor(tangent.dt).ndim == 0 else torch.as_tensor(tangent.dt).reshape(-1)
    ds = torch.as_tensor(tangent.ds, dtype=torch.float64).expand_as(s) \
        if torch.as_tensor(tangent.ds).ndim == 0 else torch.as_tensor(tangent.ds).reshape(-1)
    if dx.shape != x.shape:
        raise DimensionError("tangent dx must match x")
    return torch.func.jvp(field, (x, t, s), (dx.contiguous(), dt.contiguous(), ds.contiguous()))


def jvp_approx(field, x, t, s, v, eps: float = 0.005):
    """Central-difference approximation to dF/dt along the velocity v.

    Displaces the inputs to (x +- eps*v, t +- eps) with s held fixed, so the
    estimate tracks the same trajectory a JVP with tangent (v, 1, 0) would.
    """
    if eps <= 0.0:
        raise ValueError("finite-difference step must be positive")
    x = torch.as_tensor(x, dtype=torch.float64)
    t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    s = torch.as_tensor(s, dtype=torch.float64).reshape(-1)
    v = torch.as_tensor(v, dtype=torch.float64).expand_as(x)
    f_plus = field(x + eps * v, t + eps, s)
    f_minus = field(x - eps * v, t - eps, s)
    return (f_plus - f_minus) / (2.0 * eps)


def grad(net: FieldNet, params: dict, loss_fn):
    """Reverse-mode gradient of ``loss_fn(params) -> scalar`` over all params.

    The loss may contain exact-JVP subexpressions; forward-mode duals compose
    with the reverse pass.  Returns (loss_value, grads dict).
    """
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    loss = loss_fn(leaves)
    names = list(leaves)
    gs = torch.autograd.grad(loss, [leaves[k] for k in names], allow_unused=True)
    grads = {
        k: (g if g is not None else torch.zeros_like(leaves[k]))
        for k, g in zip(names, gs)
    }
    return float(loss.detach()), grads


def hvp(net: FieldNet, params: dict, loss_fn, v: torch.Tensor, delta: float) -> torch.Tensor:
    """Hessian-vector product by central differences of the gradient.

    HVP(v) = (grad(theta + delta*v_hat) - grad(theta - delta*v_hat)) / (2 delta) * |v|.
    """
    if delta <= 0.0:
        raise ValueError("difference step must be positive")
    norm = float(torch.linalg.vector_norm(v))
    if norm == 0.0:
        raise ValueError("hvp direction must be nonzero")
    vhat = v / norm
    theta = net.flatten(params)

    def g_at(vec):
        _, gs = grad(net, net.unflatten(vec), loss_fn)
        return net.flatten(gs)

    return (g_at(theta + delta * vhat) - g_at(theta - delta * vhat)) / (2.0 * delta) * norm


# ----------------------------------------------------------------------
# checkpoint format: magic FMLB, version u32, u32 architecture list,
# float64 little-endian parameters, flag byte, optional EMA parameters
# ----------------------------------------------------------------------


def _arch_list(net: FieldNet) -> list[int]:
    return [
        net.data_dim, net.hidden, net.depth, net.n_freqs, net.n_classes,
        net.class_embed_dim, 1 if net.omega_channel else 0,
        1 if abs(net.time_scale - np.pi / 2) < 1e-12 else 0,
        net.n_params(),
    ]


def save_checkpoint(path, net: FieldNet, params: dict, ema: dict | None = None) -> None:
    theta = net.flatten(params).detach().numpy().astype("<f8")
    arch = _arch_list(net)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<I", len(arch)))
        fh.write(struct.pack(f"<{len(arch)}I", *arch))
        fh.write(theta.tobytes())
        if ema is None:
            fh.write(b"\x00")
        else:
            fh.write(b"\x01")
            fh.write(net.flatten(ema).detach().numpy().astype("<f8").tobytes())


def load_checkpoint(path):
    """Returns (net, params, ema-or-None) rebuilt from an FMLB file."""
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path}: not an FMLB checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (n_arch,) = struct.unpack("<I", fh.read(4))
        arch = struct.unpack(f"<{n_arch}I", fh.read(4 * n_arch))
        data_dim, hidden, depth, n_freqs, n_classes, embed_dim, omega_flag, trig_flag, n_par = arch
        net = FieldNet(
            data_dim, hidden=hidden, depth=depth, n_freqs=n_freqs,
            n_classes=n_classes, class_embed_dim=embed_dim or 16,
            omega_channel=bool(omega_flag),
            time_scale=np.pi / 2 if trig_flag else 1.0,
        )
        if net.n_params() != n_par:
            raise ValueError(f"{path}: parameter count mismatch")
        theta = np.frombuffer(fh.read(8 * n_par), dtype="<f8").copy()
        params = net.unflatten(torch.from_numpy(theta))
        (flag,) = struct.unpack("B", fh.read(1))
        ema = None
        if flag == 1:
            ema_v = np.frombuffer(fh.read(8 * n_par), dtype="<f8").copy()
            ema = net.unflatten(torch.from_numpy(ema_v))
    return net, params, ema
