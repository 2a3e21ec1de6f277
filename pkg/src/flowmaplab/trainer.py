"""Reproducible training loop: time sampling, Adam, EMA, metrics, resume.

All randomness in a run flows from one numpy PCG64 generator seeded by the
config, and parameters are updated as a single flat float64 vector, so runs
are bit-reproducible and training state can be serialized and resumed
exactly.  Evaluation draws use seeds derived from (config seed, step) and
never touch the training stream.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from . import diagnostics, sampler
from .errors import TrainingDiverged
from .fieldnet import FieldNet, grad, load_checkpoint, save_checkpoint
from .interpolant import Interpolant
from .mixture import GaussianMixture
from .objectives import LossConfig, compute_loss

CSV_HEADER = "step,loss_total,loss_cfm,loss_sd,grad_norm,ed_proxy,dist_energy"

_STATE_TAG = b"OPT1"


@dataclass(frozen=True)
class TrainConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    batch_size: int = 2048
    steps: int = 5000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    ema_decay: float = 0.999
    time_a: float = 0.8
    time_b: float = 1.0
    time_mode: str = "pair"     # "pair" | "s_zero" (fix s at the data end)
    seed: int = 0
    eval_every: int = 250
    eval_samples: int = 2048
    eval_sample_steps: int = 4
    net_hidden: int = 64
    net_depth: int = 5
    net_freqs: int = 8
    conditional: bool = False
    embed_dim: int = 16

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        for b in (self.beta1, self.beta2):
            if not 0.0 <= b < 1.0:
                raise ValueError("Adam betas must lie in [0, 1)")
        if self.time_mode not in ("pair", "s_zero"):
            raise ValueError(f"unknown time_mode {self.time_mode!r}")
        if self.time_a <= 0 or self.time_b <= 0:
            raise ValueError("Beta parameters must be positive")


@dataclass
class MetricsRecord:
    step: int
    loss_total: float
    loss_cfm: float
    loss_sd: float
    grad_norm: float
    ed_proxy: float | None = None
    dist_energy: float | None = None


@dataclass
class TrainBatch:
    x: torch.Tensor
    z: torch.Tensor
    t: np.ndarray
    s: np.ndarray
    labels: torch.Tensor | None


class TrainState:
    """Everything a run owns: parameters, EMA, Adam moments, RNG, step count."""

    def __init__(self, config: TrainConfig, mixture: GaussianMixture, interp: Interpolant):
        self.config = config
        self.mixture = mixture
        self.interp = interp
        self.net = FieldNet(
            mixture.dim, hidden=config.net_hidden, depth=config.net_depth,
            n_freqs=config.net_freqs,
            n_classes=mixture.n_components if config.conditional else 0,
            class_embed_dim=config.embed_dim,
            omega_channel=config.loss.objective == "isd_c",
            time_scale=interp.t_max,
        )
        self.theta = self.net.flatten(self.net.init_params(config.seed))
        self.ema = self.theta.clone()
        self.m = torch.zeros_like(self.theta)
        self.v = torch.zeros_like(self.theta)
        self.step = 0
        self.rng = np.random.default_rng(config.seed)

    @property
    def params(self) -> dict:
        return self.net.unflatten(self.theta)

    @property
    def ema_params(self) -> dict:
        return self.net.unflatten(self.ema)

    def eval_params(self) -> dict:
        return self.ema_params if self.config.ema_decay > 0.0 else self.params

    # -- serialization: FMLB checkpoint plus an OPT1 optimizer trailer ------

    def save(self, path) -> None:
        save_checkpoint(path, self.net, self.params, ema=self.ema_params)
        st = self.rng.bit_generator.state
        with open(path, "ab") as fh:
            fh.write(_STATE_TAG)
            fh.write(struct.pack("<Q", self.step))
            fh.write(self.m.numpy().astype("<f8").tobytes())
            fh.write(self.v.numpy().astype("<f8").tobytes())
            fh.write(int(st["state"]["state"]).to_bytes(16, "little"))
            fh.write(int(st["state"]["inc"]).to_bytes(16, "little"))
            fh.write(struct.pack("<II", int(st["has_uint32"]), int(st["uinteger"])))

    def load(self, path) -> None:
        net, params, ema = load_checkpoint(path)
        if net.n_params() != self.net.n_params():
            raise ValueError("checkpoint architecture does not match this state")
        self.theta = self.net.flatten(params)
        self.ema = self.net.flatten(ema if ema is not None else params)
        n = self.net.n_params()
        with open(path, "rb") as fh:
            blob = fh.read()
        idx = blob.rindex(_STATE_TAG)
        off = idx + len(_STATE_TAG)
        (self.step,) = struct.unpack_from("<Q", blob, off)
        off += 8
        self.m = torch.from_numpy(np.frombuffer(blob, dtype="<f8", count=n, offset=off).copy())
        off += 8 * n
        self.v = torch.from_numpy(np.frombuffer(blob, dtype="<f8", count=n, offset=off).copy())
        off += 8 * n
        state_int = int.from_bytes(blob[off:off + 16], "little")
        inc_int = int.from_bytes(blob[off + 16:off + 32], "little")
        has_u, uint = struct.unpack_from("<II", blob, off + 32)
        self.rng = np.random.default_rng(0)
        self.rng.bit_generator.state = {
            "bit_generator": "PCG64",
            "state": {"state": state_int, "inc": inc_int},
            "has_uint32": int(has_u),
            "uinteger": int(uint),
        }


def sample_times(rng: np.random.Generator, a: float, b: float, n: int,
                 interp: Interpolant, mode: str = "pair"):
    """Two independent Beta(a, b) draws per sample, ordered so t >= s, then
    scaled into the interpolant's time domain."""
    draws = rng.beta(a, b, size=(2, n))
    t = np.maximum(draws[0], draws[1])
    s = np.minimum(draws[0], draws[1])
    if mode == "s_zero":
        s = np.zeros_like(s)
    return t * interp.t_max, s * interp.t_max


def draw_batch(state: TrainState) -> TrainBatch:
    cfg = state.config
    x_np, label_np = state.mixture.sample(state.rng, cfg.batch_size)
    z_np = state.rng.standard_normal((cfg.batch_size, state.mixture.dim))
    t, s = sample_times(state.rng, cfg.time_a, cfg.time_b, cfg.batch_size,
                        state.interp, cfg.time_mode)
    labels = None
    if cfg.conditional:
        label_np = label_np.copy()
        p = cfg.loss.label_dropout
        if p > 0.0:
            drop = state.rng.random(cfg.batch_size) < p
            label_np[drop] = state.net.null_label
        labels = torch.from_numpy(label_np.astype(np.int64))
    return TrainBatch(torch.from_numpy(x_np), torch.from_numpy(z_np), t, s, labels)


def train_step(state: TrainState, batch: TrainBatch) -> MetricsRecord:
    cfg = state.config
    parts = {}

    def loss_fn(p):
        out = compute_loss(state.net, p, state.interp, cfg.loss, batch.x, batch.z,
                           batch.t, batch.s, labels=batch.labels, mixture=state.mixture)
        parts["cfm"], parts["sd"] = out.cfm, out.sd
        return out.total

    loss_val, grads = grad(state.net, state.params, loss_fn)
    g = state.net.flatten(grads)
    gnorm = float(torch.linalg.vector_norm(g))
    record = MetricsRecord(state.step + 1, loss_val, parts["cfm"], parts["sd"], gnorm)
    if not (np.isfinite(loss_val) and np.isfinite(gnorm)):
        raise TrainingDiverged(
            f"non-finite loss/gradient at step {state.step + 1}", record=record
        )

    state.step += 1
    k = state.step
    state.m.mul_(cfg.beta1).add_(g, alpha=1.0 - cfg.beta1)
    state.v.mul_(cfg.beta2).addcmul_(g, g, value=1.0 - cfg.beta2)
    m_hat = state.m / (1.0 - cfg.beta1**k)
    v_hat = state.v / (1.0 - cfg.beta2**k)
    state.theta.sub_(cfg.lr * m_hat / (torch.sqrt(v_hat) + cfg.adam_eps))
    state.ema.mul_(cfg.ema_decay).add_(state.theta, alpha=1.0 - cfg.ema_decay)
    return record


def evaluate(state: TrainState, step: int):
    """ed-proxy and sample energy distance on seeds derived from (seed, step)."""
    cfg = state.config
    params = state.eval_params()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, step, 101]))
    ed = diagnostics.ed_proxy(state.net, params, state.mixture, state.interp,
                              cfg.eval_samples, rng, time_a=cfg.time_a, time_b=cfg.time_b)
    rng2 = np.random.default_rng(np.random.SeedSequence([cfg.seed, step, 202]))
    z = torch.from_numpy(rng2.standard_normal((cfg.eval_samples, state.mixture.dim)))
    labels = None
    if cfg.conditional:
        labels = torch.from_numpy(
            rng2.choice(state.mixture.n_components, size=cfg.eval_samples,
                        p=state.mixture.weights).astype(np.int64))
    schedule = sampler.uniform_schedule(state.interp, cfg.eval_sample_steps)
    gen = sampler.few_step_sample(state.net.field_fn(params, labels=labels),
                                  state.interp, z, schedule)
    data, _ = state.mixture.sample(rng2, cfg.eval_samples)
    dist = diagnostics.energy_distance(gen.numpy(), data)
    return ed, dist


def run_experiment(config: TrainConfig, mixture: GaussianMixture, interp: Interpolant,
                   out_csv=None, checkpoint=None, progress=False):
    """Full training run with periodic evaluation; returns (records, state)."""
    state = TrainState(config, mixture, interp)
    records: list[MetricsRecord] = []
    try:
        for _ in range(config.steps):
            batch = draw_batch(state)
            rec = train_step(state, batch)
            if config.eval_every > 0 and (
                state.step % config.eval_every == 0 or state.step == config.steps
            ):
                rec.ed_proxy, rec.dist_energy = evaluate(state, state.step)
                if progress:
                    print(f"step {rec.step}  loss {rec.loss_total:.5f}  "
                          f"ed_proxy {rec.ed_proxy:.5f}  energy {rec.dist_energy:.5f}",
                          flush=True)
            records.append(rec)
    except TrainingDiverged as err:
        if err.record is not None:
            records.append(err.record)
        if out_csv is not None:
            write_metrics_csv(out_csv, records)
        if checkpoint is not None:
            state.save(checkpoint)
        raise
    if out_csv is not None:
        write_metrics_csv(out_csv, records)
    if checkpoint is not None:
        state.save(checkpoint)
    return records, state


# ----------------------------------------------------------------------
# metrics CSV
# ----------------------------------------------------------------------


def _fmt(v: float | None) -> str:
    if v is None:
        return ""
    return f"{v:.17g}"


def write_metrics_csv(path, records) -> None:
    lines = [CSV_HEADER]
    for r in records:
        lines.append(",".join([
            str(r.step), _fmt(r.loss_total), _fmt(r.loss_cfm), _fmt(r.loss_sd),
            _fmt(r.grad_norm), _fmt(r.ed_proxy), _fmt(r.dist_energy),
        ]))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_metrics_csv(path) -> list[MetricsRecord]:
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"{path}: unexpected metrics header")
    out = []
    for ln in lines[1:]:
        f = ln.split(",")
        out.append(MetricsRecord(
            step=int(f[0]), loss_total=float(f[1]), loss_cfm=float(f[2]),
            loss_sd=float(f[3]), grad_norm=float(f[4]),
            ed_proxy=float(f[5]) if f[5] else None,
            dist_energy=float(f[6]) if f[6] else None,
        ))
    return out
