"""Checkpoint post-processing: weight-norm rescaling and representation CKA.

`norm_rescale` replaces each tensor's norm with an anchor norm while keeping
its direction: w* = ||w_anchor|| * w / ||w||, or w* = c * w for a constant
anchor. It recovers a usable scale regime for models whose norms drifted
under a decay-free optimizer, without touching what the representation
encodes (direction preserved, per-stage CKA stays ~1).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import encoder
from .errors import (
    ArchitectureMismatchError,
    ConfigError,
    DegenerateFeatureError,
    DimensionError,
)
from .numerics import matmul


@dataclass(frozen=True)
class Anchor:
    """Per-name target norms from a reference model, or a constant factor."""

    kind: str  # "checkpoint" | "constant"
    norms: dict | None = None
    factor: float | None = None

    @staticmethod
    def from_tensors(tensors: dict[str, np.ndarray]) -> "Anchor":
        return Anchor(
            kind="checkpoint",
            norms={k: float(np.linalg.norm(v)) for k, v in tensors.items()},
        )

    @staticmethod
    def constant(factor: float) -> "Anchor":
        if factor <= 0:
            raise ConfigError(f"constant anchor factor must be > 0, got {factor}")
        return Anchor(kind="constant", factor=factor)


@dataclass
class RescaleReport:
    touched: list = field(default_factory=list)  # (name, old_norm, new_norm)
    skipped_zero: list = field(default_factory=list)
    unmatched: list = field(default_factory=list)

    def summary(self) -> str:
        lines = [
            f"rescaled {len(self.touched)} tensors, "
            f"skipped {len(self.skipped_zero)} zero-norm, "
            f"{len(self.unmatched)} without anchor counterpart"
        ]
        lines += [f"  {n}: {o:.6g} -> {s:.6g}" for n, o, s in self.touched]
        lines += [f"  skipped (zero norm): {n}" for n in self.skipped_zero]
        lines += [f"  unmatched: {n}" for n in self.unmatched]
        return "\n".join(lines)


def rescale_to_norm(w: np.ndarray, target_norm: float) -> np.ndarray:
    """w * target_norm / ||w||; caller guarantees ||w|| > 0."""
    norm = float(np.linalg.norm(w))
    return w * (target_norm / norm)


def norm_rescale(
    tensors: dict[str, np.ndarray],
    anchor: Anchor,
    roles: dict[str, str] | None = None,
    include_roles: frozenset | None = None,
) -> tuple[dict[str, np.ndarray], RescaleReport]:
    """Rescale every matched tensor's norm to the anchor's, keeping direction.

    By default all role tags are rescaled. Tensors with zero norm are skipped
    (their direction is undefined) and tensors without an anchor counterpart
    are left unchanged; both show up in the report. BN running statistics are
    not parameters and never pass through here.
    """
    out: dict[str, np.ndarray] = {}
    report = RescaleReport()
    for name, w in tensors.items():
        if include_roles is not None:
            role = (roles or {}).get(name)
            if role not in include_roles:
                out[name] = w.copy()
                continue
        old_norm = float(np.linalg.norm(w))
        if anchor.kind == "constant":
            target = anchor.factor * old_norm
        else:
            if name not in anchor.norms:
                out[name] = w.copy()
                report.unmatched.append(name)
                continue
            target = anchor.norms[name]
        if old_norm == 0.0:
            out[name] = w.copy()
            report.skipped_zero.append(name)
            continue
        out[name] = w * (target / old_norm)
        report.touched.append((name, old_norm, target))
    return out, report


def linear_cka(x: np.ndarray, y: np.ndarray) -> float:
    """Linear centered kernel alignment between two representation matrices.

    Rows are samples. Computed in feature space as
    ||Y^T X||_F^2 / (||X^T X||_F * ||Y^T Y||_F) after column centering;
    invariant to orthogonal transforms and isotropic scaling, bounded by 1.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise DimensionError(
            f"need (n, p) and (n, q) with matching n, got {x.shape}, {y.shape}"
        )
    if x.shape[0] < 2:
        raise DimensionError("CKA needs at least 2 samples")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    xx = float(np.linalg.norm(matmul(xc.T, xc)))
    yy = float(np.linalg.norm(matmul(yc.T, yc)))
    if xx < 1e-300 or yy < 1e-300:
        raise DegenerateFeatureError(
            "zero-variance representation after centering"
        )
    xy = float(np.linalg.norm(matmul(yc.T, xc)))
    return xy * xy / (xx * yy)


def stagewise_cka(
    model_a: encoder.EncoderParams,
    model_b: encoder.EncoderParams,
    probe_batch: np.ndarray,
) -> list[tuple[str, float]]:
    """CKA of eval-mode activations after each stage, on a shared batch."""
    stages_a = model_a.stage_names()
    stages_b = model_b.stage_names()
    if stages_a != stages_b:
        raise ArchitectureMismatchError(
            f"stage layouts differ: {stages_a} vs {stages_b}"
        )
    acts_a = encoder.eval_stage_outputs(model_a, probe_batch)
    acts_b = encoder.eval_stage_outputs(model_b, probe_batch)
    return [(s, linear_cka(acts_a[s], acts_b[s])) for s in stages_a]
