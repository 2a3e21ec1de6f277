"""Flat key=value experiment configs.

One key per line, ``#`` comments, section prefixes instead of nesting
(``train.lr``, ``loss.objective``, ...).  Unknown keys are rejected and the
parse/serialize round trip is lossless, so configs diff cleanly and a run
can always be reproduced from the resolved copy it writes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .errors import ConfigParseError
from .interpolant import Interpolant, make_interpolant
from .mixture import GaussianMixture, parse_mixture
from .objectives import LossConfig
from .trainer import TrainConfig


@dataclass(frozen=True)
class SampleConfig:
    n: int = 4096
    steps: int = 4
    omega: float = 1.0
    label: int = -1   # -1 = unconditional / null label


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/out"
    mixture: str = "ring:8:1.5:0.12"
    interp: str = "linear"
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)

    def build_mixture(self) -> GaussianMixture:
        return parse_mixture(self.mixture)

    def build_interpolant(self) -> Interpolant:
        return make_interpolant(self.interp)

    def train_config(self) -> TrainConfig:
        return replace(self.train, loss=self.loss, seed=self.seed)


def _jvp_str(cfg: LossConfig) -> str:
    return "exact" if cfg.jvp == "exact" else f"approx:{cfg.jvp_eps:g}"


def _weighting_str(cfg: LossConfig) -> str:
    if cfg.weighting == "adaptive":
        return f"adaptive:{cfg.weight_p:g}:{cfg.weight_eta:g}"
    return cfg.weighting


def to_text(cfg: ExperimentConfig) -> str:
    """Serialize; parse(to_text(c)) == c."""
    kv = [
        ("seed", str(cfg.seed)),
        ("out", cfg.out),
        ("mixture", cfg.mixture),
        ("interp", cfg.interp),
        ("loss.objective", cfg.loss.objective),
        ("loss.jvp", _jvp_str(cfg.loss)),
        ("loss.weighting", _weighting_str(cfg.loss)),
        ("loss.omega", f"{cfg.loss.omega:g}"),
        ("loss.label_dropout", f"{cfg.loss.label_dropout:g}"),
        ("loss.ct_bridge_weight", str(int(cfg.loss.ct_bridge_weight))),
        ("train.batch_size", str(cfg.train.batch_size)),
        ("train.steps", str(cfg.train.steps)),
        ("train.lr", f"{cfg.train.lr:g}"),
        ("train.beta1", f"{cfg.train.beta1:g}"),
        ("train.beta2", f"{cfg.train.beta2:g}"),
        ("train.adam_eps", f"{cfg.train.adam_eps:g}"),
        ("train.ema_decay", f"{cfg.train.ema_decay:g}"),
        ("train.time_a", f"{cfg.train.time_a:g}"),
        ("train.time_b", f"{cfg.train.time_b:g}"),
        ("train.time_mode", cfg.train.time_mode),
        ("train.eval_every", str(cfg.train.eval_every)),
        ("train.eval_samples", str(cfg.train.eval_samples)),
        ("train.eval_sample_steps", str(cfg.train.eval_sample_steps)),
        ("net.hidden", str(cfg.train.net_hidden)),
        ("net.depth", str(cfg.train.net_depth)),
        ("net.freqs", str(cfg.train.net_freqs)),
        ("net.conditional", str(int(cfg.train.conditional))),
        ("net.embed_dim", str(cfg.train.embed_dim)),
        ("sample.n", str(cfg.sample.n)),
        ("sample.steps", str(cfg.sample.steps)),
        ("sample.omega", f"{cfg.sample.omega:g}"),
        ("sample.label", str(cfg.sample.label)),
    ]
    if cfg.loss.guiding is not None:
        kv.insert(5, ("loss.guiding", cfg.loss.guiding))
    return "\n".join(f"{k} = {v}" for k, v in kv) + "\n"


_INT_KEYS = {
    "seed", "train.batch_size", "train.steps", "train.eval_every",
    "train.eval_samples", "train.eval_sample_steps", "net.hidden", "net.depth",
    "net.freqs", "net.embed_dim", "sample.n", "sample.steps", "sample.label",
}
_FLOAT_KEYS = {
    "loss.omega", "loss.label_dropout", "train.lr", "train.beta1", "train.beta2",
    "train.adam_eps", "train.ema_decay", "train.time_a", "train.time_b",
    "sample.omega",
}
_BOOL_KEYS = {"loss.ct_bridge_weight", "net.conditional"}
_STR_KEYS = {
    "out", "mixture", "interp", "loss.objective", "loss.guiding", "loss.jvp",
    "loss.weighting", "train.time_mode",
}
_ALL_KEYS = _INT_KEYS | _FLOAT_KEYS | _BOOL_KEYS | _STR_KEYS


def parse_text(text: str, source: str = "<config>") -> ExperimentConfig:
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigParseError(f"{source}:{lineno}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _ALL_KEYS:
            raise ConfigParseError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigParseError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            if key in _INT_KEYS:
                values[key] = int(value)
            elif key in _FLOAT_KEYS:
                values[key] = float(value)
            elif key in _BOOL_KEYS:
                if value not in ("0", "1"):
                    raise ValueError("expected 0 or 1")
                values[key] = value == "1"
            else:
                values[key] = value
        except ValueError as e:
            raise ConfigParseError(f"{source}:{lineno}: bad value for {key}: {e}") from e
    return _assemble(values, source)


def _assemble(v: dict, source: str) -> ExperimentConfig:
    def take(key, default):
        return v.get(key, default)

    jvp_spec = str(take("loss.jvp", "approx:0.005"))
    if jvp_spec == "exact":
        jvp, jvp_eps = "exact", 0.005
    elif jvp_spec == "approx":
        jvp, jvp_eps = "approx", 0.005
    elif jvp_spec.startswith("approx:"):
        jvp, jvp_eps = "approx", float(jvp_spec.split(":", 1)[1])
    else:
        raise ConfigParseError(f"{source}: loss.jvp must be exact or approx:<eps>")

    w_spec = str(take("loss.weighting", "adaptive:1:0.01"))
    weight_p, weight_eta = 1.0, 0.01
    if w_spec in ("none", "cosine"):
        weighting = w_spec
    elif w_spec == "adaptive":
        weighting = "adaptive"
    elif w_spec.startswith("adaptive:"):
        parts = w_spec.split(":")
        if len(parts) != 3:
            raise ConfigParseError(f"{source}: loss.weighting adaptive needs <p>:<eta>")
        weighting, weight_p, weight_eta = "adaptive", float(parts[1]), float(parts[2])
    else:
        raise ConfigParseError(f"{source}: unknown loss.weighting {w_spec!r}")

    try:
        loss = LossConfig(
            objective=str(take("loss.objective", "isd")),
            guiding=v.get("loss.guiding"),
            jvp=jvp, jvp_eps=jvp_eps, weighting=weighting,
            weight_p=weight_p, weight_eta=weight_eta,
            omega=float(take("loss.omega", 1.0)),
            label_dropout=float(take("loss.label_dropout", 0.0)),
            ct_bridge_weight=bool(take("loss.ct_bridge_weight", False)),
        )
        train = TrainConfig(
            loss=loss,
            batch_size=int(take("train.batch_size", 2048)),
            steps=int(take("train.steps", 5000)),
            lr=float(take("train.lr", 1e-3)),
            beta1=float(take("train.beta1", 0.9)),
            beta2=float(take("train.beta2", 0.999)),
            adam_eps=float(take("train.adam_eps", 1e-8)),
            ema_decay=float(take("train.ema_decay", 0.999)),
            time_a=float(take("train.time_a", 0.8)),
            time_b=float(take("train.time_b", 1.0)),
            time_mode=str(take("train.time_mode", "pair")),
            seed=int(take("seed", 0)),
            eval_every=int(take("train.eval_every", 250)),
            eval_samples=int(take("train.eval_samples", 2048)),
            eval_sample_steps=int(take("train.eval_sample_steps", 4)),
            net_hidden=int(take("net.hidden", 48)),
            net_depth=int(take("net.depth", 5)),
            net_freqs=int(take("net.freqs", 8)),
            conditional=bool(take("net.conditional", False)),
            embed_dim=int(take("net.embed_dim", 16)),
        )
        sample = SampleConfig(
            n=int(take("sample.n", 4096)),
            steps=int(take("sample.steps", 4)),
            omega=float(take("sample.omega", 1.0)),
            label=int(take("sample.label", -1)),
        )
        cfg = ExperimentConfig(
            seed=int(take("seed", 0)),
            out=str(take("out", "runs/out")),
            mixture=str(take("mixture", "ring:8:1.5:0.12")),
            interp=str(take("interp", "linear")),
            loss=loss, train=train, sample=sample,
        )
        cfg.build_mixture()
        cfg.build_interpolant()
    except ConfigParseError:
        raise
    except (ValueError, TypeError) as e:
        raise ConfigParseError(f"{source}: {e}") from e
    return cfg


def load(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_text(fh.read(), source=str(path))
