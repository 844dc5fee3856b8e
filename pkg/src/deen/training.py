"""Cross-modality PK sampling, learning-rate schedule, SGD and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .augment import AugmentConfig, augment
from .backbone import DeenNet, save_checkpoint
from .errors import ConfigError, ContractError, NumericError, ProtocolError
from .losses import LossWeights, total_loss
from .ndtensor import Tensor
from .synthdata import DatasetIndex

log = logging.getLogger(__name__)

LOSS_CSV_FIELDS = ["step", "L_ce", "L_tri", "L_cpm", "L_ort", "L_total", "lr"]


@dataclass
class TrainConfig:
    ids_per_batch: int = 6
    vis_per_id: int = 4
    ir_per_id: int = 4
    epochs: int = 150
    base_lr: float = 1e-2
    peak_lr: float = 1e-1
    momentum: float = 0.9
    max_grad_norm: Optional[float] = 5.0  # global-norm clip; None disables
    warmup_epochs: int = 10
    milestones: Tuple[int, int, int] = (20, 60, 120)
    reference_epochs: int = 150
    compress_schedule: bool = False
    seed: int = 0
    checkpoint_every: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)

    @property
    def batch_size(self) -> int:
        return self.ids_per_batch * (self.vis_per_id + self.ir_per_id)

    def validate(self) -> "TrainConfig":
        if min(self.ids_per_batch, self.vis_per_id, self.ir_per_id) < 1:
            raise ConfigError("batch composition counts must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not self.base_lr > 0 or not self.peak_lr > 0 or not 0 <= self.momentum < 1:
            raise ConfigError("learning rates must be positive and momentum in [0, 1)")
        if self.max_grad_norm is not None and not self.max_grad_norm > 0:
            raise ConfigError("max_grad_norm must be positive or None")
        if len(self.milestones) != 3 or list(self.milestones) != sorted(self.milestones):
            raise ConfigError(f"milestones must be 3 increasing epochs, got {self.milestones}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        d["augment"]["out_hw"] = list(self.augment.out_hw)
        d["augment"]["erase_area"] = list(self.augment.erase_area)
        return d


# ----------------------------------------------------------------- sampling


@dataclass
class Batch:
    vis_refs: np.ndarray
    ir_refs: np.ndarray
    vis_labels: np.ndarray  # class indices
    ir_labels: np.ndarray
    identities: np.ndarray  # the chosen raw identities, in batch order

    @property
    def size(self) -> int:
        return len(self.vis_refs) + len(self.ir_refs)


def sample_batch(index: DatasetIndex, cfg: TrainConfig, rng: np.random.Generator) -> Batch:
    """Pick ``ids_per_batch`` distinct identities, then ``vis_per_id`` VIS and
    ``ir_per_id`` IR records of each (with replacement only when an identity is short)."""
    eligible = index.identities
    if len(eligible) < cfg.ids_per_batch:
        raise ProtocolError(f"{len(eligible)} identities available, batch needs {cfg.ids_per_batch}")
    chosen = rng.choice(eligible, size=cfg.ids_per_batch, replace=False)
    vis, ir, vl, il = [], [], [], []
    for ident in chosen:
        ident = int(ident)
        pool_v, pool_i = index.vis[ident], index.ir[ident]
        vis.extend(rng.choice(pool_v, size=cfg.vis_per_id, replace=len(pool_v) < cfg.vis_per_id))
        ir.extend(rng.choice(pool_i, size=cfg.ir_per_id, replace=len(pool_i) < cfg.ir_per_id))
        vl += [index.class_of[ident]] * cfg.vis_per_id
        il += [index.class_of[ident]] * cfg.ir_per_id
    return Batch(np.array(vis), np.array(ir), np.array(vl), np.array(il), chosen.astype(np.int64))


# ---------------------------------------------------------------- schedule


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Linear warm-up from ``base_lr`` to ``peak_lr`` over ``warmup_epochs``, then
    ``peak_lr`` until the first milestone and a 10x drop to ``base_lr``, 1e-3 and
    1e-4 (relative to ``base_lr``) at the three milestones.

    With ``compress_schedule`` the epoch boundaries are rescaled from
    ``reference_epochs`` to ``epochs`` so short runs see the whole shape.
    """
    if not 0 <= epoch < cfg.epochs:
        raise ContractError(f"epoch {epoch} outside 0..{cfg.epochs - 1}")
    scale = cfg.epochs / cfg.reference_epochs if cfg.compress_schedule else 1.0
    warm = cfg.warmup_epochs * scale
    m1, m2, m3 = (m * scale for m in cfg.milestones)
    if epoch < warm:
        return cfg.base_lr + (cfg.peak_lr - cfg.base_lr) * epoch / warm
    if epoch < m1:
        return cfg.peak_lr
    if epoch < m2:
        return cfg.base_lr
    if epoch < m3:
        return cfg.base_lr * 0.1
    return cfg.base_lr * 0.01


# -------------------------------------------------------------------- SGD


def sgd_step(
    params: Sequence[Tensor], velocity: Dict[int, np.ndarray], lr: float, momentum: float
) -> None:
    """``v = momentum * v + g; p = p - lr * v`` in place. ``velocity`` is keyed by position."""
    for k, p in enumerate(params):
        if p.grad is None:
            raise ContractError(f"parameter {p.name or k} has no gradient")
    for k, p in enumerate(params):
        v = velocity.get(k)
        v = p.grad.copy() if v is None else momentum * v + p.grad
        velocity[k] = v
        p.data = (p.data - lr * v).astype(p.dtype, copy=False)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale all gradients jointly so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    total = math.sqrt(sum(float(np.square(p.grad, dtype=np.float64).sum()) for p in params if p.grad is not None))
    if total > max_norm:
        factor = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * factor).astype(p.dtype, copy=False)
    return total


# ------------------------------------------------------------------ loop


@dataclass
class FitResult:
    rows: List[dict]
    steps: int
    checkpoints: List[Path]


def steps_per_epoch(index: DatasetIndex, cfg: TrainConfig) -> int:
    return max(1, len(index) // cfg.batch_size)


def _images(index: DatasetIndex, refs: np.ndarray, rng_key: Tuple[int, ...], cfg: TrainConfig, offset: int):
    out = []
    for pos, ref in enumerate(refs):
        rng = np.random.default_rng(rng_key + (offset + pos,))
        out.append(augment(index.records[int(ref)].image, rng, cfg.augment))
    return np.stack(out)


def fit(
    model: DeenNet,
    index: DatasetIndex,
    cfg: TrainConfig,
    run_dir: Optional[Union[str, Path]] = None,
    start_epoch: int = 0,
) -> FitResult:
    """Train ``model`` in place: sample, augment, forward, loss, backward, SGD.

    The sampler and each sample's augmentation draw from streams derived from
    ``cfg.seed`` (augmentation keyed by global step and position in the batch),
    so two runs with the same seed produce identical parameters. When
    ``run_dir`` is given the per-step loss CSV and checkpoints are written there.
    """
    cfg.validate()
    if cfg.augment.out_hw != model.config.input_hw:
        raise ConfigError(f"augment geometry {cfg.augment.out_hw} != model input {model.config.input_hw}")
    run_dir = Path(run_dir) if run_dir is not None else None
    spe = steps_per_epoch(index, cfg)
    sampler = np.random.default_rng([cfg.seed, 101])
    params = model.parameters()
    velocity: Dict[int, np.ndarray] = {}
    rows: List[dict] = []
    ckpts: List[Path] = []
    fh = writer = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        fh = open(run_dir / "loss.csv", "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOSS_CSV_FIELDS)
    step = start_epoch * spe
    # replay the sampler so resumed runs see the same batches
    for _ in range(step):
        sample_batch(index, cfg, sampler)
    try:
        for epoch in range(start_epoch, cfg.epochs):
            lr = lr_schedule(epoch, cfg)
            for _ in range(spe):
                batch = sample_batch(index, cfg, sampler)
                key = (cfg.seed, 202, step)
                vis = _images(index, batch.vis_refs, key, cfg, 0)
                ir = _images(index, batch.ir_refs, key, cfg, len(batch.vis_refs))
                bundle = model.forward(vis, ir, batch.vis_labels, batch.ir_labels, mode="train")
                loss, parts = total_loss(bundle, cfg.weights)
                if not math.isfinite(parts.total):
                    dump = None
                    if run_dir is not None:
                        dump = run_dir / f"nan_batch_step{step}.npz"
                        np.savez(dump, vis=vis, ir=ir, vis_labels=batch.vis_labels, ir_labels=batch.ir_labels)
                    raise NumericError(
                        f"non-finite loss at step {step} (epoch {epoch}): ce={parts.ce} tri={parts.tri} "
                        f"cpm={parts.cpm} ort={parts.ort}; batch dumped to {dump}"
                    )
                model.zero_grad()
                loss.backward()
                if cfg.max_grad_norm is not None:
                    clip_grad_norm(params, cfg.max_grad_norm)
                sgd_step(params, velocity, lr, cfg.momentum)
                row = {
                    "step": step, "L_ce": parts.ce, "L_tri": parts.tri, "L_cpm": parts.cpm,
                    "L_ort": parts.ort, "L_total": parts.total, "lr": lr,
                }
                rows.append(row)
                if writer is not None:
                    writer.writerow([row[k] if k == "step" else repr(float(row[k])) for k in LOSS_CSV_FIELDS])
                step += 1
            log.debug("epoch %d lr %.4g last loss %.4f", epoch, lr, rows[-1]["L_total"] if rows else float("nan"))
            if run_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                path = run_dir / f"checkpoint_epoch{epoch + 1:03d}.deen"
                save_checkpoint(path, model, {"epoch": epoch + 1, "step": step, "seed": cfg.seed})
                ckpts.append(path)
    finally:
        if fh is not None:
            fh.close()
    if run_dir is not None:
        path = run_dir / "checkpoint.deen"
        save_checkpoint(path, model, {"epoch": cfg.epochs, "step": step, "seed": cfg.seed})
        ckpts.append(path)
    return FitResult(rows, step, ckpts)
