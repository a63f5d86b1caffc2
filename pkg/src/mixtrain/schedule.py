"""Phase arithmetic, learning-rate schedule, and the AdamW optimizer.

The run is split into (pure self-supervised, merged, pure supervised) phases;
the merged phase absorbs ``floor(rho * min(e_ssl, e_sl))`` epochs from each
side. Every phase gets its own warmup+cosine LR cycle; the merged phase uses
the self-supervised base LR. Warmup lengths are expressed per 100 epochs and
scaled to the actual phase length so short runs keep the warmup fraction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Iterable, Optional

import numpy as np

from . import kernels
from .tensor import Tensor

METHODS = ("sl", "ssl_sl", "mixtraining")
LOSS_TARGETS = ("masked", "unmasked", "all")


class ConfigError(ValueError):
    pass


class NonFiniteGradient(RuntimeError):
    pass


@dataclass
class TrainConfig:
    # schedule
    method: str = "mixtraining"
    e_ssl: int = 20
    e_sl: int = 20
    rho: float = 0.5           # fraction of min(e_ssl, e_sl) merged
    alpha: float = 0.5         # weight on the reconstruction term
    lam: float = 0.5           # input blend weight (config key: lambda)
    p: float = 1.0             # data fraction kept
    batch_size: int = 128
    seed: int = 1
    # optimizer
    base_lr_ssl: float = 1.5e-4
    base_lr_sl: float = 1e-3
    warmup_ssl: int = 20
    warmup_sl: int = 5
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.95)
    adam_eps: float = 1e-8
    # model
    height: int = 16
    width: int = 16
    channels: int = 1
    patch_size: int = 2
    embed_dim: int = 64
    depth: int = 2
    num_heads: int = 2
    kind: str = "transformer"
    mlp_ratio: int = 4
    decoder_depth: int = 2
    mask_ratio: float = 0.75
    loss_target: str = "masked"
    head_parallel: bool = False
    dtype: str = "float32"
    # data
    data: str = ""             # comma-separated task dataset paths
    data_format: str = "synthetic_spec"
    ssl_data: str = ""         # optional separate unlabeled pool
    ssl_data_format: str = ""
    val_fraction: float = 0.1
    augment: bool = True
    flip: bool = True
    crop_pad: int = 4
    norm_mean: float = 0.0
    norm_std: float = 1.0
    # run control
    checkpoint_every: int = 0  # epochs; 0 = final checkpoint only

    def validate(self) -> "TrainConfig":
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError(f"rho must be in [0, 1], got {self.rho}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must be in [0, 1], got {self.lam}")
        if not 0.0 < self.p <= 1.0:
            raise ConfigError(f"p must be in (0, 1], got {self.p}")
        if self.e_ssl < 0 or self.e_sl < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        if self.loss_target not in LOSS_TARGETS:
            raise ConfigError(f"loss_target must be one of {LOSS_TARGETS}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must be in [0, 1), got {self.mask_ratio}")
        if len(self.betas) != 2:
            raise ConfigError("betas must be a pair")
        return self

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


# config-file key for the blend weight keeps the greek name
_KEY_ALIASES = {"lambda": "lam"}
_FIELD_TO_KEY = {"lam": "lambda"}


def config_to_kv(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name == "betas":
            v = ",".join(repr(b) for b in v)
        key = _FIELD_TO_KEY.get(f.name, f.name)
        lines.append(f"{key}={v}")
    return "\n".join(lines) + "\n"


def _coerce(name: str, raw: str, target_type):
    if target_type is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    if target_type is tuple:
        parts = [p for p in raw.split(",") if p]
        return tuple(float(p) for p in parts)
    try:
        return target_type(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {target_type.__name__}") from None


def config_from_kv(pairs: dict[str, str], base: Optional[TrainConfig] = None) -> TrainConfig:
    cfg = base or TrainConfig()
    by_name = {f.name: f for f in fields(cfg)}
    for key, raw in pairs.items():
        name = _KEY_ALIASES.get(key, key)
        if name not in by_name:
            raise ConfigError(f"unknown config key {key!r}")
        f = by_name[name]
        target = type(getattr(cfg, name))
        setattr(cfg, name, _coerce(key, raw, target))
    return cfg


@dataclass(frozen=True)
class PhaseSchedule:
    e_mix: int
    pure_ssl_epochs: int
    pure_sl_epochs: int
    total_epochs: int

    def phases(self) -> list[tuple[str, int]]:
        return [("ssl", self.pure_ssl_epochs), ("mix", self.e_mix), ("sl", self.pure_sl_epochs)]


def plan(cfg: TrainConfig) -> PhaseSchedule:
    """Phase lengths: e_mix = floor(rho * min(e_ssl, e_sl)), merged from both sides."""
    if cfg.method == "sl":
        return PhaseSchedule(e_mix=0, pure_ssl_epochs=0, pure_sl_epochs=cfg.e_sl,
                             total_epochs=cfg.e_sl)
    if cfg.method == "ssl_sl":
        e_mix = 0
    else:
        e_mix = int(math.floor(cfg.rho * min(cfg.e_ssl, cfg.e_sl)))
    return PhaseSchedule(e_mix=e_mix,
                         pure_ssl_epochs=cfg.e_ssl - e_mix,
                         pure_sl_epochs=cfg.e_sl - e_mix,
                         total_epochs=cfg.e_ssl + cfg.e_sl - e_mix)


def effective_warmup(warmup_per_100: int, phase_len: int) -> int:
    """Warmup epochs for a phase, preserving the per-100-epoch fraction."""
    if warmup_per_100 <= 0 or phase_len <= 0:
        return 0
    return min(int(math.ceil(warmup_per_100 * phase_len / 100.0)), phase_len)


def lr_at(phase: str, epoch_in_phase: int, phase_len: int, cfg: TrainConfig) -> float:
    """Linear warmup to the base LR, then cosine decay to zero at phase end."""
    if not 0 <= epoch_in_phase < phase_len:
        raise ConfigError(f"epoch {epoch_in_phase} outside phase of length {phase_len}")
    if phase == "sl":
        base, w100 = cfg.base_lr_sl, cfg.warmup_sl
    elif phase in ("ssl", "mix"):
        base, w100 = cfg.base_lr_ssl, cfg.warmup_ssl
    else:
        raise ConfigError(f"unknown phase {phase!r}")
    w = effective_warmup(w100, phase_len)
    if epoch_in_phase < w:
        return base * (epoch_in_phase + 1) / w
    span = phase_len - w
    if span <= 0:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * (epoch_in_phase - w) / span))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def adamw_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
               step: int, lr: float, betas, eps: float, weight_decay: float) -> None:
    """One in-place decoupled-weight-decay Adam update (flat arrays, 1-based step)."""
    if param.shape != grad.shape or param.shape != m.shape or param.shape != v.shape:
        raise ConfigError("adamw_step: param/grad/state shapes must match")
    kernels.adamw_update(param, grad, m, v, step, lr, betas[0], betas[1], eps, weight_decay)


class AdamW:
    """Per-parameter moments and step counts; decay skipped on the no-decay set.

    Parameters whose gradient is absent in a step are left untouched, so a
    round-robin schedule over task heads does not decay idle heads.
    """

    def __init__(self, params: dict[str, Tensor], no_decay: Iterable[str],
                 betas=(0.9, 0.95), eps: float = 1e-8, weight_decay: float = 0.05):
        self.params = dict(params)
        self.no_decay = set(no_decay)
        self.betas = tuple(betas)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.steps = {n: 0 for n in self.params}

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise NonFiniteGradient(f"non-finite gradient in parameter {name!r}")
            self.steps[name] += 1
            decay = 0.0 if name in self.no_decay else self.weight_decay
            adamw_step(p.data.reshape(-1), np.ascontiguousarray(g).reshape(-1),
                       self.m[name].reshape(-1), self.v[name].reshape(-1),
                       self.steps[name], lr, self.betas, self.eps, decay)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for n in self.params:
            out[f"{n}.m"] = self.m[n]
            out[f"{n}.v"] = self.v[n]
        return out

    def load_state(self, moments: dict[str, np.ndarray], steps: dict[str, int]) -> None:
        for n in self.params:
            self.m[n] = moments[f"{n}.m"].reshape(self.m[n].shape).astype(self.m[n].dtype)
            self.v[n] = moments[f"{n}.v"].reshape(self.v[n].shape).astype(self.v[n].dtype)
            self.steps[n] = int(steps[n])
