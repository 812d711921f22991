"""Training recipe for the paired classifier.

Weighted binary cross-entropy (positive class weighted 4x against the class
imbalance), paired online augmentations, Adam, plateau-driven learning-rate
reduction, and early stopping on validation loss. Spatial augmentations
share their sampled parameters across the two images of a pair so the
pre/post geometric correspondence the fusion layers rely on is preserved;
contrast jitter is drawn independently per image. Validation runs without
augmentation.
"""

from __future__ import annotations

import copy
import math
import random
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torchvision.transforms.functional as TF
from torchvision.transforms import InterpolationMode

from .dataset_core import ImagePair, load_image_array
from .paired_classifier import ModelConfig, PairedModel, normalize_image

BCE_EPS = 1e-7


class TrainingError(Exception):
    """Training contract violation or aborted run (non-finite loss, ...)."""


@dataclass
class TrainConfig:
    pos_weight: float = 4.0
    batch_size: int = 32
    initial_lr: float = 1e-4
    plateau_factor: float = 0.05
    plateau_patience: int = 10
    min_lr: float = 1e-6
    early_stop_patience: int = 20
    max_epochs: int = 300
    spatial_aug_p: float = 0.5
    nonspatial_aug_p: float = 0.2
    rotation_deg: float = 15.0
    contrast_range: tuple[float, float] = (0.8, 1.25)
    seed: int = 0

    def validate(self) -> None:
        for name in ("spatial_aug_p", "nonspatial_aug_p"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise TrainingError(f"{name} must be a probability")
        if not self.min_lr < self.initial_lr:
            raise TrainingError("min_lr must be below initial_lr")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise TrainingError("patiences must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise TrainingError("batch_size and max_epochs must be >= 1")
        if not 0 < self.plateau_factor < 1:
            raise TrainingError("plateau_factor must lie in (0, 1)")


@dataclass
class TrainState:
    epoch: int = 0
    best_val_loss: float = math.inf
    best_epoch: int = 0
    epochs_since_improve: int = 0
    plateau_counter: int = 0
    current_lr: float = 0.0
    history: list[dict] = field(default_factory=list)
    lr_reductions: list[int] = field(default_factory=list)
    stop_reason: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def weighted_bce(
    p: torch.Tensor | float,
    y: torch.Tensor | float | int,
    pos_weight: float = 4.0,
    reduction: str = "mean",
) -> torch.Tensor:
    """loss = -[w*y*ln(p) + (1-y)*ln(1-p)], probabilities clamped at 1e-7."""
    p_t = torch.as_tensor(p)
    y_t = torch.as_tensor(y, dtype=p_t.dtype)
    p_c = p_t.clamp(BCE_EPS, 1.0 - BCE_EPS)
    loss = -(pos_weight * y_t * torch.log(p_c) + (1.0 - y_t) * torch.log(1.0 - p_c))
    if reduction == "mean":
        return loss.mean()
    if reduction == "none":
        return loss
    raise TrainingError(f"unknown reduction {reduction!r}")


@dataclass
class AugmentationSpec:
    spatial_p: float = 0.5
    nonspatial_p: float = 0.2
    rotation_deg: float = 15.0
    contrast_range: tuple[float, float] = (0.8, 1.25)

    @classmethod
    def from_train_config(cls, cfg: TrainConfig) -> "AugmentationSpec":
        return cls(
            spatial_p=cfg.spatial_aug_p,
            nonspatial_p=cfg.nonspatial_aug_p,
            rotation_deg=cfg.rotation_deg,
            contrast_range=cfg.contrast_range,
        )


@dataclass(frozen=True)
class AugmentationDraw:
    """One sampled augmentation: spatial parameters are shared by the pair,
    contrast factors are per-image (None = not applied)."""

    spatial_op: Optional[str] = None  # None | "hflip" | "rotation"
    angle_deg: float = 0.0
    contrast_pre: Optional[float] = None
    contrast_post: Optional[float] = None


def sample_augmentation(spec: AugmentationSpec, rng: random.Random) -> AugmentationDraw:
    spatial_op = None
    angle = 0.0
    if rng.random() < spec.spatial_p:
        spatial_op = rng.choice(("hflip", "rotation"))
        if spatial_op == "rotation":
            angle = rng.uniform(-spec.rotation_deg, spec.rotation_deg)
    factors = []
    for _ in range(2):
        if rng.random() < spec.nonspatial_p:
            factors.append(rng.uniform(*spec.contrast_range))
        else:
            factors.append(None)
    return AugmentationDraw(
        spatial_op=spatial_op,
        angle_deg=angle,
        contrast_pre=factors[0],
        contrast_post=factors[1],
    )


def _apply_one(img: torch.Tensor, draw: AugmentationDraw, contrast: Optional[float]) -> torch.Tensor:
    if draw.spatial_op == "hflip":
        img = TF.hflip(img)
    elif draw.spatial_op == "rotation":
        img = TF.rotate(img, draw.angle_deg, interpolation=InterpolationMode.BILINEAR)
    if contrast is not None:
        img = TF.adjust_contrast(img, contrast)
    return img


def apply_augmentation(
    pre: torch.Tensor, post: torch.Tensor, draw: AugmentationDraw
) -> tuple[torch.Tensor, torch.Tensor]:
    return _apply_one(pre, draw, draw.contrast_pre), _apply_one(post, draw, draw.contrast_post)


def augment_pair(
    pre: torch.Tensor,
    post: torch.Tensor,
    spec: AugmentationSpec,
    rng: random.Random,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Augment one (pre, post) pair of float [0,1] (3,H,W) tensors."""
    return apply_augmentation(pre, post, sample_augmentation(spec, rng))


class PairTensorDataset:
    """All pairs of one split held in memory as uint8 tensors."""

    def __init__(
        self,
        pre: torch.Tensor,
        post: torch.Tensor,
        labels: torch.Tensor,
        pair_ids: list[str],
        patient_ids: list[str],
    ):
        self.pre = pre
        self.post = post
        self.labels = labels
        self.pair_ids = pair_ids
        self.patient_ids = patient_ids

    def __len__(self) -> int:
        return self.pre.shape[0]

    @classmethod
    def from_pairs(cls, pairs: list[ImagePair], corpus_root: str | Path) -> "PairTensorDataset":
        root = Path(corpus_root)
        pres, posts, labels, pair_ids, patient_ids = [], [], [], [], []
        for pair in pairs:
            pre = load_image_array(root / pair.pre.uri)
            post = load_image_array(root / pair.post.uri)
            pres.append(torch.from_numpy(pre.copy()).permute(2, 0, 1))
            posts.append(torch.from_numpy(post.copy()).permute(2, 0, 1))
            labels.append(0 if pair.label is None else int(pair.label))
            pair_ids.append(pair.pair_id)
            patient_ids.append(pair.patient_id)
        if not pres:
            return cls(
                torch.zeros(0, 3, 1, 1, dtype=torch.uint8),
                torch.zeros(0, 3, 1, 1, dtype=torch.uint8),
                torch.zeros(0, dtype=torch.long),
                [],
                [],
            )
        return cls(
            torch.stack(pres), torch.stack(posts),
            torch.tensor(labels, dtype=torch.long), pair_ids, patient_ids,
        )


def _forward_batch(
    model: PairedModel,
    ds: PairTensorDataset,
    idx: list[int],
    model_cfg: ModelConfig,
    augment: Optional[tuple[AugmentationSpec, random.Random]] = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    pre = ds.pre[idx].float() / 255.0
    post = ds.post[idx].float() / 255.0
    if augment is not None:
        spec, rng = augment
        out_pre, out_post = [], []
        for i in range(pre.shape[0]):
            a, b = augment_pair(pre[i], post[i], spec, rng)
            out_pre.append(a)
            out_post.append(b)
        pre = torch.stack(out_pre)
        post = torch.stack(out_post)
    pre = normalize_image(pre, model_cfg)
    post = normalize_image(post, model_cfg)
    probs = model(pre, post)
    return probs.reshape(-1), ds.labels[idx].to(torch.float32)


def dataset_probs(
    model: PairedModel, ds: PairTensorDataset, batch_size: int = 32
) -> torch.Tensor:
    model.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, len(ds), batch_size):
            idx = list(range(start, min(start + batch_size, len(ds))))
            probs, _ = _forward_batch(model, ds, idx, model.config)
            chunks.append(probs)
    return torch.cat(chunks) if chunks else torch.zeros(0)


def compute_val_loss(
    model: PairedModel, ds: PairTensorDataset, config: TrainConfig
) -> float:
    model.eval()
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(ds), config.batch_size):
            idx = list(range(start, min(start + config.batch_size, len(ds))))
            probs, ys = _forward_batch(model, ds, idx, model.config)
            losses = weighted_bce(probs, ys, config.pos_weight, reduction="none")
            total += float(losses.sum())
    return total / len(ds)


def train(
    model: PairedModel,
    train_ds: PairTensorDataset,
    val_ds: Optional[PairTensorDataset],
    config: TrainConfig,
    val_loss_fn: Optional[Callable[[PairedModel, int], float]] = None,
    epoch_callback: Optional[Callable[[TrainState], None]] = None,
) -> tuple[PairedModel, TrainState]:
    """Run the full recipe and return the best-validation-loss checkpoint.

    ``val_loss_fn`` (model, epoch) -> loss substitutes the validation pass;
    tests use it to drive the scheduler with scripted losses.
    """
    config.validate()
    if len(train_ds) == 0:
        raise TrainingError("empty training set")
    if val_loss_fn is None and (val_ds is None or len(val_ds) == 0):
        raise TrainingError("empty validation set")

    torch.manual_seed(config.seed)
    spec = AugmentationSpec.from_train_config(config)
    optimizer = torch.optim.Adam(
        [p for p in model.parameters() if p.requires_grad], lr=config.initial_lr
    )

    state = TrainState(current_lr=config.initial_lr)
    best_weights = copy.deepcopy(model.state_dict())

    for epoch in range(1, config.max_epochs + 1):
        state.epoch = epoch
        epoch_seed = config.seed * 1_000_003 + epoch
        order_rng = random.Random(epoch_seed)
        aug_rng = random.Random(epoch_seed ^ 0x5EED)

        indices = list(range(len(train_ds)))
        order_rng.shuffle(indices)

        model.train()
        running = 0.0
        for start in range(0, len(indices), config.batch_size):
            batch = indices[start : start + config.batch_size]
            probs, ys = _forward_batch(
                model, train_ds, batch, model.config, augment=(spec, aug_rng)
            )
            loss = weighted_bce(probs, ys, config.pos_weight)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite training loss at epoch {epoch}, "
                    f"batch starting {start} (lr={state.current_lr:g})"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            running += float(loss) * len(batch)
        train_loss = running / len(train_ds)

        if val_loss_fn is not None:
            val_loss = float(val_loss_fn(model, epoch))
        else:
            val_loss = compute_val_loss(model, val_ds, config)
        if not math.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")

        if val_loss < state.best_val_loss:
            state.best_val_loss = val_loss
            state.best_epoch = epoch
            state.epochs_since_improve = 0
            state.plateau_counter = 0
            best_weights = copy.deepcopy(model.state_dict())
        else:
            state.epochs_since_improve += 1
            state.plateau_counter += 1
            if state.plateau_counter >= config.plateau_patience:
                reduced = max(state.current_lr * config.plateau_factor, config.min_lr)
                if reduced < state.current_lr:
                    state.current_lr = reduced
                    for group in optimizer.param_groups:
                        group["lr"] = state.current_lr
                    state.lr_reductions.append(epoch)
                state.plateau_counter = 0

        state.history.append(
            {
                "epoch": epoch,
                "train_loss": train_loss,
                "val_loss": val_loss,
                "lr": state.current_lr,
            }
        )
        if epoch_callback is not None:
            epoch_callback(state)

        if state.epochs_since_improve >= config.early_stop_patience:
            state.stop_reason = f"early_stop(patience={config.early_stop_patience})"
            break
    else:
        state.stop_reason = f"max_epochs({config.max_epochs})"

    model.load_state_dict(best_weights)
    return model, state
