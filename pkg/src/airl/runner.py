"""Experiment shell: pretraining loop, command implementations, studies.

Every stochastic consumer pulls from a named child stream of the run seed,
so a config + seed pair identifies one bit-exact training trajectory. The
pre-canned studies express each paper-style comparison (configuration
ladder, optimizer crossover, augmentation removal, collapse, norm
divergence) as a matrix of config diffs at desk scale.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint, encoder, evaluation, frameworks, surgery
from .augment import two_views
from .config import ExperimentConfig, config_from_overrides, load_config
from .errors import ConfigError, NumericOverflowError
from .evaluation import (
    ProbeConfig,
    collapse_metrics,
    linear_probe,
    make_synthetic_dataset,
)
from .numerics import Rng, l2_normalize_rows
from .optim import norm_sum_by_role, weight_norm_report

OUT_ROOT_ENV = "AIRL_OUT"

METRIC_COLUMNS = (
    "step", "loss", "lr", "momentum_m", "queue_fill", "feat_std", "eff_rank"
)

STUDIES = ("ladder", "crossover", "aug-ablation", "collapse", "norm-divergence")


def out_root(explicit=None) -> Path:
    if explicit is not None:
        return Path(explicit)
    return Path(os.environ.get(OUT_ROOT_ENV, "airl_runs"))


def dataset_from_config(cfg: ExperimentConfig) -> evaluation.Dataset:
    return make_synthetic_dataset(
        classes=cfg["data.classes"],
        per_class=cfg["data.per_class"],
        side=cfg["data.side"],
        rng=Rng(cfg["data.seed"], 0).child("data"),
        noise=cfg["data.noise"],
        tint=cfg["data.tint"],
        val_per_class=cfg["data.val_per_class"],
    )


@dataclass
class PretrainResult:
    state: frameworks.SiameseState
    cfg: ExperimentConfig
    run_dir: Path
    checkpoint_path: Path
    metrics_path: Path


def _augmented_batch(images, indices, pipeline, rng, epoch):
    first, second = [], []
    for i in indices:
        v1, v2 = two_views(images[int(i)], pipeline, rng.child("aug", epoch, int(i)))
        first.append(v1.reshape(-1))
        second.append(v2.reshape(-1))
    return np.stack(first), np.stack(second)


def pretrain(cfg: ExperimentConfig, run_dir) -> PretrainResult:
    """Run the configured pretraining; writes metrics.csv and checkpoints."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(cfg.canonical_text(), encoding="utf-8")

    fw = cfg.framework_config()
    pipeline = cfg.pipeline()
    data = dataset_from_config(cfg)
    images = data.train_images
    n_train = images.shape[0]
    batch = cfg["run.batch"]
    epochs = cfg["run.epochs"]
    steps_per_epoch = n_train // batch
    if epochs > 0 and steps_per_epoch == 0:
        raise ConfigError(
            f"batch size {batch} exceeds the {n_train} training images"
        )
    total_steps = epochs * steps_per_epoch

    run_rng = Rng(cfg["run.seed"], 0)
    state = frameworks.init_siamese_state(
        fw, run_rng.child("init"), total_steps=total_steps
    )
    opt = cfg.optimizer()

    metrics_path = run_dir / "metrics.csv"
    ckpt_path = run_dir / "ckpt_final.airl"
    every = cfg["run.checkpoint_every"]
    with open(metrics_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for epoch in range(epochs):
            order = run_rng.child("order", epoch).permutation(n_train)
            for b in range(steps_per_epoch):
                idx = order[b * batch:(b + 1) * batch]
                x1, x2 = _augmented_batch(images, idx, pipeline, run_rng, epoch)
                try:
                    state, met = frameworks.training_step(
                        state, x1, x2, fw, opt, run_rng.child("step", state.step)
                    )
                except NumericOverflowError:
                    checkpoint.save_state(
                        run_dir / "ckpt_diagnostic.airl", state, cfg
                    )
                    raise
                feat_std, eff_rank = collapse_metrics(met["embeddings"])
                writer.writerow([
                    state.step - 1,
                    repr(met["loss"]),
                    repr(met["lr"]),
                    repr(met["momentum_m"]),
                    met["queue_fill"],
                    repr(feat_std),
                    repr(eff_rank),
                ])
            if every and (epoch + 1) % every == 0 and epoch + 1 < epochs:
                checkpoint.save_state(
                    run_dir / f"ckpt_epoch{epoch + 1:04d}.airl", state, cfg
                )
    checkpoint.save_state(ckpt_path, state, cfg)
    return PretrainResult(state, cfg, run_dir, ckpt_path, metrics_path)


def cmd_pretrain(config_path, out=None) -> PretrainResult:
    cfg = load_config(config_path)
    name = cfg["run.name"] or Path(config_path).stem
    return pretrain(cfg, out_root(out) / name)


def embedding_metrics(state: frameworks.SiameseState,
                      dataset: evaluation.Dataset) -> tuple[float, float]:
    """Collapse metrics of the loss-space embeddings on the val images.

    Uses the branch the training signal targets: teacher features under
    stop-gradient, student features for the direct-distance ablation.
    """
    branch = state.teacher if state.teacher.specs else state.student
    x = evaluation.images_to_inputs(dataset.val_images, branch)
    out, _ = encoder.forward(branch, x, training=False)
    return collapse_metrics(l2_normalize_rows(out))


def probe_checkpoint(ckpt_path, dataset=None, probe: ProbeConfig = ProbeConfig()):
    state, cfg, _ = checkpoint.load_state(ckpt_path)
    if dataset is None:
        dataset = dataset_from_config(cfg)
    acc, _ = linear_probe(state.student, dataset, probe)
    return acc


def parse_data_spec(spec: str) -> dict:
    """Parse 'classes=8,per_class=64,side=16,noise=0.05,tint=0.35,seed=1'."""
    fields = {
        "classes": 8, "per_class": 64, "val_per_class": 16, "side": 16,
        "noise": 0.05, "tint": 0.35, "seed": 1,
    }
    if spec:
        for part in spec.split(","):
            key, _, value = part.partition("=")
            key = key.strip()
            if key not in fields:
                raise ConfigError(f"unknown data-spec field {key!r}")
            fields[key] = (
                float(value) if key in ("noise", "tint") else int(value)
            )
    return fields


def dataset_from_spec(spec: str) -> evaluation.Dataset:
    f = parse_data_spec(spec)
    return make_synthetic_dataset(
        classes=f["classes"], per_class=f["per_class"], side=f["side"],
        rng=Rng(f["seed"], 0).child("data"), noise=f["noise"], tint=f["tint"],
        val_per_class=f["val_per_class"],
    )


def cmd_eval_linear(ckpt_path, data_spec: str, out_path, probe_seed: int = 0):
    state, cfg, _ = checkpoint.load_state(ckpt_path)
    dataset = (dataset_from_spec(data_spec) if data_spec
               else dataset_from_config(cfg))
    acc, _ = linear_probe(state.student, dataset,
                          ProbeConfig(seed=probe_seed))
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["checkpoint", "probe_seed", "top1"])
        writer.writerow([str(ckpt_path), probe_seed, repr(acc)])
    return acc


def cmd_surgery_rescale(input_path, output_path, anchor_path=None,
                        factor=None,
                        refresh_stats: bool = False) -> surgery.RescaleReport:
    """Rescale every trainable tensor's norm to the anchor's (direction
    preserved); BN running statistics and the queue are never rescaled.

    With refresh_stats=True the BN running statistics are re-estimated from
    the checkpoint's own training images afterwards: surgery changes
    pre-activation scales, and frozen eval-mode consumers (the linear probe)
    would otherwise normalize with stale statistics.
    """
    if (anchor_path is None) == (factor is None):
        raise ConfigError("need exactly one of an anchor checkpoint or a factor")
    records, metadata = checkpoint.load_checkpoint(input_path)
    trainable = checkpoint.trainable_records(records)
    if anchor_path is not None:
        anchor_records, _ = checkpoint.load_checkpoint(anchor_path)
        anchor = surgery.Anchor.from_tensors(
            {n: a for n, (_, a) in
             checkpoint.trainable_records(anchor_records).items()}
        )
    else:
        anchor = surgery.Anchor.constant(float(factor))
    tensors = {name: array for name, (_, array) in trainable.items()}
    rescaled, report = surgery.norm_rescale(tensors, anchor)
    new_records = dict(records)
    for name, array in rescaled.items():
        new_records[name] = (trainable[name][0], array)
    metadata = dict(metadata)
    metadata["rescaled"] = {
        "anchor": str(anchor_path) if anchor_path is not None else None,
        "factor": factor,
    }
    checkpoint.save_checkpoint(output_path, new_records, metadata)
    if refresh_stats:
        state, cfg, meta = checkpoint.load_state(output_path)
        data = dataset_from_config(cfg)
        for branch in (state.student, state.teacher):
            if branch.specs:
                encoder.refresh_running_stats(
                    branch, evaluation.images_to_inputs(data.train_images,
                                                        branch)
                )
        records2, _ = checkpoint.state_records(state, cfg)
        checkpoint.save_checkpoint(output_path, records2, meta)
    return report


def cmd_analyze_norms(input_path, out_path=None):
    """List the 2-norm of every weight-role tensor in the checkpoint."""
    records, _ = checkpoint.load_checkpoint(input_path)
    rows = [
        (name, float(np.linalg.norm(array)))
        for name, (role, array) in sorted(records.items())
        if role == "weight"
    ]
    _write_rows(out_path, ["tensor", "norm"],
                [(n, repr(v)) for n, v in rows])
    return rows


def cmd_analyze_cka(a_path, b_path, data_spec: str = "", out_path=None):
    """Stagewise CKA between two checkpoints on a shared eval batch."""
    state_a, cfg_a, _ = checkpoint.load_state(a_path)
    state_b, _, _ = checkpoint.load_state(b_path)
    dataset = (dataset_from_spec(data_spec) if data_spec
               else dataset_from_config(cfg_a))
    probe_batch = evaluation.images_to_inputs(dataset.val_images,
                                              state_a.student)
    rows = surgery.stagewise_cka(state_a.student, state_b.student, probe_batch)
    _write_rows(out_path, ["stage", "cka"],
                [(s, repr(v)) for s, v in rows])
    return rows


def _write_rows(out_path, header, rows) -> None:
    if out_path is None:
        return
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# Studies: pre-canned config matrices at desk scale. Each study pins its own
# data/optimization regime; sizes are chosen so every study finishes in
# minutes while still showing its paper-scale effect.

# Shared by the ladder / crossover / augmentation studies: texture classes
# with a brightness-gain nuisance and enough pixel noise that the blur and
# jitter stages have real work to do. The crop range is widened from the
# published (0.08, 1.0): 16-pixel textures do not survive 8%-area crops.
MAIN_DATA = dict(
    data__classes=8, data__per_class=48, data__val_per_class=32,
    data__side=16, data__tint=0.6, data__noise=0.2, data__seed=1,
    augment__crop_scale=(0.4, 1.0),
)
MAIN_EPOCHS = 30

# The collapse study wants long stable runs; mild data keeps them cheap.
COLLAPSE_DATA = dict(
    data__classes=8, data__per_class=48, data__val_per_class=16,
    data__side=16, data__tint=0.35, data__noise=0.05, data__seed=1,
)
COLLAPSE_EPOCHS = 30

# Norm divergence needs many small noisy steps so the decay-free LARS
# parameters random-walk visibly; tiny images keep thousands of steps cheap.
NORMDIV_DATA = dict(
    data__classes=8, data__per_class=48, data__val_per_class=8,
    data__side=8, data__tint=0.35, data__noise=0.05, data__seed=1,
    augment__out_side=8,
)
NORMDIV_EPOCHS = 60
NORMDIV_BATCH = 12
NORMDIV_LARS_LR = 16.0

CROSSOVER_LARS_LR = 1.0  # gentle regime: good features, inflated norms


def _study_cfg(kind: str, seed: int = 0, epochs: int = MAIN_EPOCHS,
               **overrides) -> ExperimentConfig:
    base = dict(
        framework__kind=kind,
        framework__queue_size=256,
        run__epochs=epochs,
        run__batch=48,
        run__seed=seed,
        **MAIN_DATA,
    )
    base.update(overrides)
    return config_from_overrides(**base)


def _run_and_probe(cfg: ExperimentConfig, run_dir, dataset=None,
                   probe: ProbeConfig = ProbeConfig()) -> tuple[PretrainResult, float]:
    result = pretrain(cfg, run_dir)
    if dataset is None:
        dataset = dataset_from_config(cfg)
    acc, _ = linear_probe(result.state.student, dataset, probe)
    return result, acc


LADDER_RUNGS = (
    ("moco_v2", dict(augment__removed="solarization")),
    ("+sync_bn+hidden_bn", dict(
        augment__removed="solarization",
        framework__bn_mode="global", framework__projector_hidden_bn=True)),
    ("+predictor", dict(
        augment__removed="solarization",
        framework__bn_mode="global", framework__projector_hidden_bn=True,
        framework__predictor_placement="student_only")),
    ("+momentum_ascend", dict(
        augment__removed="solarization",
        framework__bn_mode="global", framework__projector_hidden_bn=True,
        framework__predictor_placement="student_only",
        framework__momentum_base=0.99,
        framework__momentum_schedule="cosine_ascend")),
    ("+symmetric_loss (moco_v2+)", dict(
        augment__removed="solarization",
        framework__bn_mode="global", framework__projector_hidden_bn=True,
        framework__predictor_placement="student_only",
        framework__momentum_base=0.99,
        framework__momentum_schedule="cosine_ascend",
        framework__symmetric_loss=True)),
    ("+solarization", dict(
        framework__bn_mode="global", framework__projector_hidden_bn=True,
        framework__predictor_placement="student_only",
        framework__momentum_base=0.99,
        framework__momentum_schedule="cosine_ascend",
        framework__symmetric_loss=True)),
)


def study_ladder(root: Path) -> list[dict]:
    """Configuration ladder from the MoCo v2 baseline to MoCo v2+ plus
    richer augmentations; one config diff per rung."""
    rows = []
    for i, (label, overrides) in enumerate(LADDER_RUNGS):
        cfg = _study_cfg("moco_v2", **overrides)
        _, acc = _run_and_probe(cfg, root / f"rung{i}")
        rows.append({"rung": i, "config": label, "top1": acc})
    return rows


def study_crossover(root: Path) -> list[dict]:
    """2x2 framework x optimizer grid plus norm-rescued LARS checkpoints.

    The LARS checkpoints are rescued by rescaling onto the matching SGD
    checkpoint's norms and re-estimating BN statistics, then evaluated with
    the same fixed probe recipe as everything else.
    """
    rows = []
    ckpts: dict[tuple[str, str], Path] = {}
    for kind in ("moco_v2_plus", "byol"):
        for opt_kind in ("sgd", "lars"):
            overrides = dict(optimizer__kind=opt_kind)
            if opt_kind == "lars":
                overrides["optimizer__lr"] = CROSSOVER_LARS_LR
            cfg = _study_cfg(kind, **overrides)
            result, acc = _run_and_probe(cfg, root / f"{kind}_{opt_kind}")
            ckpts[(kind, opt_kind)] = result.checkpoint_path
            rows.append({"framework": kind, "optimizer": opt_kind,
                         "rescued": False, "top1": acc})
    for kind in ("moco_v2_plus", "byol"):
        rescued = root / f"{kind}_lars_rescaled.airl"
        cmd_surgery_rescale(ckpts[(kind, "lars")], rescued,
                            anchor_path=ckpts[(kind, "sgd")],
                            refresh_stats=True)
        acc = probe_checkpoint(rescued)
        rows.append({"framework": kind, "optimizer": "lars",
                     "rescued": True, "top1": acc})
    return rows


def study_aug_ablation(root: Path, seeds=(0, 1, 2)) -> list[dict]:
    """Remove color augmentations in the fixed ladder order for all three
    aligned frameworks; probe accuracy per (framework, rung, seed)."""
    from .augment import REMOVAL_ORDER

    rows = []
    for kind in ("moco_v2_plus", "s_moco_v2_plus", "byol"):
        for rung in range(len(REMOVAL_ORDER) + 1):
            removed = ",".join(REMOVAL_ORDER[:rung])
            for seed in seeds:
                cfg = _study_cfg(kind, seed=seed, augment__removed=removed)
                _, acc = _run_and_probe(
                    cfg, root / f"{kind}_r{rung}_s{seed}"
                )
                rows.append({
                    "framework": kind, "rung": rung,
                    "removed": removed or "(none)", "seed": seed, "top1": acc,
                })
    return rows


def study_collapse(root: Path) -> list[dict]:
    """Healthy BYOL vs the no-predictor/no-stop-gradient ablation, plus
    MoCo v2+ in both BN modes; reports embedding spread vs the isotropic
    reference."""
    arms = (
        ("byol", dict()),
        ("byol_no_pred_no_stopgrad", dict(
            framework__predictor_placement="none",
            framework__stop_gradient=False)),
        ("moco_v2_plus_global", dict()),
        ("moco_v2_plus_shuffled", dict(framework__bn_mode="shuffled")),
    )
    rows = []
    for label, overrides in arms:
        kind = "byol" if label.startswith("byol") else "moco_v2_plus"
        cfg = config_from_overrides(
            framework__kind=kind, framework__queue_size=256,
            run__epochs=COLLAPSE_EPOCHS, run__batch=48, run__seed=0,
            **COLLAPSE_DATA, **overrides,
        )
        result = pretrain(cfg, root / label)
        dataset = dataset_from_config(cfg)
        feat_std, eff_rank = embedding_metrics(result.state, dataset)
        ref = evaluation.isotropic_std_reference(
            cfg["encoder.projector_out"]
        )
        rows.append({
            "arm": label, "feat_std": feat_std, "eff_rank": eff_rank,
            "std_over_reference": feat_std / ref,
        })
    return rows


def study_norm_divergence(root: Path) -> list[dict]:
    """LARS (decay exclusions on norm/bias) vs SGD (decay everywhere) from
    identical init and data order; compares accumulated norm-gain mass."""
    rows = []
    for opt_kind in ("sgd", "lars"):
        overrides = dict(optimizer__kind=opt_kind)
        if opt_kind == "lars":
            overrides["optimizer__lr"] = NORMDIV_LARS_LR
        cfg = config_from_overrides(
            framework__kind="byol",
            run__epochs=NORMDIV_EPOCHS, run__batch=NORMDIV_BATCH,
            run__seed=0, **NORMDIV_DATA, **overrides,
        )
        result = pretrain(cfg, root / f"byol_{opt_kind}")
        report = weight_norm_report(result.state.student)
        rows.append({
            "optimizer": opt_kind,
            "norm_gain_sum": norm_sum_by_role(result.state.student, "norm_gain"),
            "weight_norm_sum": sum(report.values()),
            **{f"norm[{k}]": v for k, v in report.items()},
        })
    return rows


def run_study(name: str, out=None) -> tuple[list[dict], Path]:
    """Run one named study; returns its rows and the table path."""
    if name not in STUDIES:
        raise ConfigError(
            f"unknown study {name!r}; available: {', '.join(STUDIES)}"
        )
    root = out_root(out) / f"study_{name.replace('-', '_')}"
    root.mkdir(parents=True, exist_ok=True)
    started = time.time()
    fn = {
        "ladder": study_ladder,
        "crossover": study_crossover,
        "aug-ablation": study_aug_ablation,
        "collapse": study_collapse,
        "norm-divergence": study_norm_divergence,
    }[name]
    rows = fn(root)
    table_path = root / "table.csv"
    if rows:
        with open(table_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            for row in rows:
                writer.writerow({
                    k: repr(v) if isinstance(v, float) else v
                    for k, v in row.items()
                })
    elapsed = time.time() - started
    print(f"study {name}: {len(rows)} rows in {elapsed:.1f}s -> {table_path}")
    return rows, table_path


def format_table(rows: list[dict]) -> str:
    if not rows:
        return "(no rows)"
    cols = list(rows[0].keys())
    rendered = [
        [f"{v:.4f}" if isinstance(v, float) else str(v) for v in row.values()]
        for row in rows
    ]
    widths = [
        max(len(c), *(len(r[i]) for r in rendered))
        for i, c in enumerate(cols)
    ]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in rendered]
    return "\n".join(lines)
