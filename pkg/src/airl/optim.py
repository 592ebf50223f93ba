"""SGD-with-momentum and LARS optimizers plus learning-rate schedules.

LARS scales each tensor's step by the layer-wise trust ratio
eta * ||w|| / (||grad + wd*w|| + eps) and, per its standard large-batch
configuration, excludes normalization and bias parameters from both weight
decay and the trust-ratio adaptation (they receive plain momentum-SGD steps).
Every parameter carries a role tag, so the exclusions are driven by role.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import EncoderParams
from .errors import ConfigError, NumericOverflowError

EXCLUDE_NORM_ROLES = frozenset({"norm_gain", "norm_bias"})
EXCLUDE_BIAS_ROLES = frozenset({"bias"})


@dataclass(frozen=True)
class SgdConfig:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    nesterov: bool = False

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")


@dataclass(frozen=True)
class LarsConfig:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    trust_coefficient: float = 1e-3
    eps: float = 1e-9
    exclude_roles: frozenset = EXCLUDE_NORM_ROLES | EXCLUDE_BIAS_ROLES

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup from 0 to base_lr, then cosine or stepwise decay."""

    kind: str  # "cosine" | "step_decay"
    base_lr: float
    warmup_epochs: int = 0
    total_epochs: int = 1
    milestones: tuple[float, ...] = (0.6, 0.8)
    decay_factor: float = 0.1

    def __post_init__(self):
        if self.kind not in ("cosine", "step_decay"):
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if self.total_epochs < 1:
            raise ConfigError("total_epochs must be >= 1")
        if not 0 <= self.warmup_epochs <= self.total_epochs:
            raise ConfigError("warmup_epochs must be in [0, total_epochs]")


def lr_at(epoch_frac: float, sched: LrSchedule) -> float:
    """Learning rate at a training progress fraction in [0, 1]."""
    if not 0.0 <= epoch_frac <= 1.0:
        raise ConfigError(f"epoch_frac must be in [0, 1], got {epoch_frac}")
    warmup_frac = sched.warmup_epochs / sched.total_epochs
    if warmup_frac > 0.0 and epoch_frac < warmup_frac:
        return sched.base_lr * (epoch_frac / warmup_frac)
    if warmup_frac >= 1.0:
        return sched.base_lr
    p = (epoch_frac - warmup_frac) / (1.0 - warmup_frac)
    if sched.kind == "cosine":
        return sched.base_lr * (np.cos(np.pi * p) + 1.0) / 2.0
    hits = sum(1 for m in sched.milestones if p >= m)
    return sched.base_lr * sched.decay_factor**hits


def _check_finite(name: str, grad: np.ndarray) -> None:
    if not np.all(np.isfinite(grad)):
        raise NumericOverflowError(f"non-finite gradient for {name!r}")


def sgd_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    velocities: dict[str, np.ndarray],
    cfg: SgdConfig,
    lr_t: float,
) -> dict[str, np.ndarray]:
    """In-place SGD update: g += wd*w; v = mu*v + g; w -= lr * v.

    The nesterov variant applies w -= lr * (g + mu*v) instead.
    """
    for name, w in params.items():
        grad = grads[name]
        _check_finite(name, grad)
        g = grad + cfg.weight_decay * w
        v = velocities.get(name)
        if v is None:
            v = velocities[name] = np.zeros_like(w)
        v *= cfg.momentum
        v += g
        if cfg.nesterov:
            w -= lr_t * (g + cfg.momentum * v)
        else:
            w -= lr_t * v
    return params


def lars_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    velocities: dict[str, np.ndarray],
    roles: dict[str, str],
    cfg: LarsConfig,
    lr_t: float,
) -> dict[str, np.ndarray]:
    """In-place LARS update.

    Non-excluded tensors: g += wd*w, scaled by the trust ratio
    eta*||w||/(||g||+eps) (1 when either norm vanishes); excluded roles get
    no decay and no adaptation. v = mu*v + lr*local*g; w -= v.
    """
    for name, w in params.items():
        grad = grads[name]
        _check_finite(name, grad)
        role = roles.get(name)
        if role is None:
            raise ConfigError(f"parameter {name!r} has no role tag")
        if role in cfg.exclude_roles:
            g = grad
            local = 1.0
        else:
            g = grad + cfg.weight_decay * w
            w_norm = float(np.linalg.norm(w))
            g_norm = float(np.linalg.norm(g))
            if w_norm > 0.0 and g_norm > 0.0:
                local = cfg.trust_coefficient * w_norm / (g_norm + cfg.eps)
            else:
                local = 1.0
        v = velocities.get(name)
        if v is None:
            v = velocities[name] = np.zeros_like(w)
        v *= cfg.momentum
        v += (lr_t * local) * g
        w -= v
    return params


class Optimizer:
    """One optimizer instance: config, schedule, and momentum buffers."""

    def __init__(self, cfg: SgdConfig | LarsConfig, schedule: LrSchedule):
        self.cfg = cfg
        self.schedule = schedule
        self.velocities: dict[str, np.ndarray] = {}

    @property
    def kind(self) -> str:
        return "lars" if isinstance(self.cfg, LarsConfig) else "sgd"

    def lr(self, progress: float) -> float:
        return lr_at(progress, self.schedule)

    def step(self, params, grads, roles, progress: float) -> float:
        """Apply one update at the given progress; returns the lr used."""
        lr_t = self.lr(progress)
        if isinstance(self.cfg, LarsConfig):
            lars_step(params, grads, self.velocities, roles, self.cfg, lr_t)
        else:
            sgd_step(params, grads, self.velocities, self.cfg, lr_t)
        return lr_t


def weight_norm_report(params: EncoderParams) -> dict[str, float]:
    """2-norm of every weight-role tensor, in depth order."""
    report: dict[str, float] = {}
    for spec in params.specs:
        name = f"{spec.name}.weight"
        if name in params.tensors:
            report[name] = float(np.linalg.norm(params.tensors[name]))
    return report


def norm_sum_by_role(params: EncoderParams, role: str) -> float:
    """Sum of 2-norms over all tensors with the given role tag."""
    return float(
        sum(
            np.linalg.norm(t)
            for name, t in params.tensors.items()
            if params.roles[name] == role
        )
    )
