"""Dual-input classifier over (pre-acid, post-acid) image pairs.

Both images pass through a shared, frozen early section of an 18-layer
residual backbone (Part A). Their n-channel feature maps are concatenated
channel-wise to 2n, reduced back to n by trainable fusion convolutions, and
the fused map runs through the remaining residual stages (Part B) and a
fully connected head ending in a sigmoid VIA-positivity probability.

The Part A/Part B boundary, channel width, head sizes, and input resolution
are all configuration; the default splits after the second residual stage
(n = 128 at 1/8 resolution).
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import torch
import torch.nn as nn
from torchvision.models import resnet18

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# output channels after each residual stage of the 18-layer backbone
STAGE_CHANNELS = {"layer1": 64, "layer2": 128, "layer3": 256}
FINAL_CHANNELS = 512

AGGREGATIONS = ("mean", "max")


class ModelConfigError(Exception):
    """Inconsistent channel arithmetic or invalid architecture config."""


class PretrainedWeightsUnavailable(Exception):
    """ImageNet weights requested but not fetchable in this environment."""


@dataclass
class ModelConfig:
    input_resolution: tuple[int, int] = (224, 224)  # (height, width)
    split_point: str = "layer2"
    n_channels: int = 128
    fusion_kernel: int = 3
    fusion_layers: int = 2
    fusion_out_channels: Optional[int] = None  # defaults to n_channels
    head_dims: tuple[int, ...] = (128, 64)
    pretrained_init: bool = True
    normalize_mean: tuple[float, float, float] = IMAGENET_MEAN
    normalize_std: tuple[float, float, float] = IMAGENET_STD

    def resolved_fusion_out(self) -> int:
        return self.n_channels if self.fusion_out_channels is None else self.fusion_out_channels

    def validate(self) -> None:
        if self.split_point not in STAGE_CHANNELS:
            raise ModelConfigError(
                f"split_point must be one of {sorted(STAGE_CHANNELS)}, got {self.split_point!r}"
            )
        expected = STAGE_CHANNELS[self.split_point]
        if self.n_channels != expected:
            raise ModelConfigError(
                f"n_channels {self.n_channels} inconsistent with split after "
                f"{self.split_point} (stage emits {expected})"
            )
        if self.resolved_fusion_out() != self.n_channels:
            raise ModelConfigError(
                f"fusion must map 2n -> n ({2 * self.n_channels} -> {self.n_channels}); "
                f"configured output {self.resolved_fusion_out()}"
            )
        if self.fusion_kernel % 2 != 1 or self.fusion_kernel < 1:
            raise ModelConfigError("fusion_kernel must be odd and positive")
        if self.fusion_layers < 1:
            raise ModelConfigError("fusion needs at least one conv layer")
        if not self.head_dims or any(d < 1 for d in self.head_dims):
            raise ModelConfigError("head_dims must be positive")
        h, w = self.input_resolution
        if h < 32 or w < 32:
            raise ModelConfigError("input_resolution must be at least 32x32")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        cfg = cls(
            input_resolution=tuple(d["input_resolution"]),
            split_point=d["split_point"],
            n_channels=int(d["n_channels"]),
            fusion_kernel=int(d.get("fusion_kernel", 3)),
            fusion_layers=int(d.get("fusion_layers", 2)),
            fusion_out_channels=d.get("fusion_out_channels"),
            head_dims=tuple(d["head_dims"]),
            pretrained_init=bool(d["pretrained_init"]),
            normalize_mean=tuple(d.get("normalize_mean", IMAGENET_MEAN)),
            normalize_std=tuple(d.get("normalize_std", IMAGENET_STD)),
        )
        cfg.validate()
        return cfg


def _backbone(pretrained: bool) -> nn.Module:
    if not pretrained:
        return resnet18(weights=None)
    try:
        from torchvision.models import ResNet18_Weights

        return resnet18(weights=ResNet18_Weights.IMAGENET1K_V1)
    except Exception as exc:
        raise PretrainedWeightsUnavailable(
            "pretrained_init=True requires downloading ImageNet weights; "
            f"fetch failed ({exc}). Set pretrained_init=False for offline use."
        ) from exc


class PairedModel(nn.Module):
    """Frozen shared encoder, channel fusion, trainable tail, sigmoid head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config

        backbone = _backbone(config.pretrained_init)
        stages = ["layer1", "layer2", "layer3", "layer4"]
        cut = stages.index(config.split_point) + 1

        part_a_layers = [backbone.conv1, backbone.bn1, backbone.relu, backbone.maxpool]
        part_a_layers += [getattr(backbone, s) for s in stages[:cut]]
        self.part_a = nn.Sequential(*part_a_layers)
        for p in self.part_a.parameters():
            p.requires_grad_(False)

        n = config.n_channels
        fusion_layers: list[nn.Module] = []
        in_ch = 2 * n
        for _ in range(config.fusion_layers):
            fusion_layers += [
                nn.Conv2d(in_ch, config.resolved_fusion_out(), config.fusion_kernel,
                          stride=1, padding=config.fusion_kernel // 2, bias=False),
                nn.BatchNorm2d(config.resolved_fusion_out()),
                nn.ReLU(inplace=True),
            ]
            in_ch = config.resolved_fusion_out()
        self.fusion = nn.Sequential(*fusion_layers)

        self.part_b = nn.Sequential(*[getattr(backbone, s) for s in stages[cut:]])

        head_layers: list[nn.Module] = [nn.AdaptiveAvgPool2d(1), nn.Flatten()]
        prev = FINAL_CHANNELS
        for dim in config.head_dims:
            head_layers += [nn.Linear(prev, dim), nn.ReLU(inplace=True)]
            prev = dim
        head_layers.append(nn.Linear(prev, 1))
        self.head = nn.Sequential(*head_layers)

    def train(self, mode: bool = True) -> "PairedModel":
        # Part A stays fully frozen: parameters get no gradients and its
        # batch-norm statistics never update.
        super().train(mode)
        self.part_a.eval()
        return self

    def _check_input(self, x: torch.Tensor, name: str) -> torch.Tensor:
        if x.dim() == 3:
            x = x.unsqueeze(0)
        h, w = self.config.input_resolution
        if x.dim() != 4 or x.shape[1] != 3 or x.shape[2] != h or x.shape[3] != w:
            raise ValueError(
                f"{name} must be (B,3,{h},{w}) or (3,{h},{w}), got {tuple(x.shape)}"
            )
        return x

    def forward(self, pre: torch.Tensor, post: torch.Tensor) -> torch.Tensor:
        squeeze = pre.dim() == 3
        pre = self._check_input(pre, "pre")
        post = self._check_input(post, "post")
        if pre.shape[0] != post.shape[0]:
            raise ValueError("pre/post batch sizes differ")
        feat_pre = self.part_a(pre)
        feat_post = self.part_a(post)
        fused = self.fusion(torch.cat([feat_pre, feat_post], dim=1))
        logit = self.head(self.part_b(fused)).squeeze(-1)
        prob = torch.sigmoid(logit)
        return prob.squeeze(0) if squeeze else prob


def build_model(config: Optional[ModelConfig] = None) -> PairedModel:
    config = config or ModelConfig()
    return PairedModel(config)


def parameter_partition(model: PairedModel) -> dict[str, int]:
    frozen = sum(p.numel() for p in model.part_a.parameters())
    trainable = sum(
        p.numel()
        for m in (model.fusion, model.part_b, model.head)
        for p in m.parameters()
        if p.requires_grad
    )
    return {"frozen": frozen, "trainable": trainable}


def normalize_image(image: torch.Tensor, config: ModelConfig) -> torch.Tensor:
    """uint8 (C,H,W) or (B,C,H,W) image tensor -> normalized float32."""
    x = image.float()
    if x.max() > 1.5:
        x = x / 255.0
    shape = (3, 1, 1) if x.dim() == 3 else (1, 3, 1, 1)
    mean = torch.tensor(config.normalize_mean, dtype=x.dtype).view(shape)
    std = torch.tensor(config.normalize_std, dtype=x.dtype).view(shape)
    return (x - mean) / std


def aggregate_probs(probs: Sequence[float], aggregation: str = "mean") -> float:
    if aggregation not in AGGREGATIONS:
        raise ValueError(f"aggregation must be one of {AGGREGATIONS}")
    values = [float(p) for p in probs]
    if not values:
        raise ValueError("cannot aggregate zero pair probabilities")
    return max(values) if aggregation == "max" else sum(values) / len(values)


def predict_patient(
    model: PairedModel,
    pre_batch: torch.Tensor,
    post_batch: torch.Tensor,
    aggregation: str = "mean",
) -> float:
    """Patient-level probability from all of one woman's cropped pairs."""
    if pre_batch.dim() == 3:
        pre_batch = pre_batch.unsqueeze(0)
        post_batch = post_batch.unsqueeze(0)
    if pre_batch.shape[0] == 0:
        raise ValueError("cannot aggregate zero pairs")
    model.eval()
    with torch.no_grad():
        probs = model(pre_batch, post_batch)
    return aggregate_probs(probs.reshape(-1).tolist(), aggregation)


def save_checkpoint(
    path: str | Path,
    model: PairedModel,
    corpus_hash: str = "",
    split_seed: Optional[int] = None,
    extra: Optional[dict] = None,
) -> None:
    payload = {
        "format": "viascreen-checkpoint-1",
        "config": model.config.to_dict(),
        "state_dict": model.state_dict(),
        "corpus_hash": corpus_hash,
        "split_seed": split_seed,
        "extra": extra or {},
    }
    torch.save(payload, str(path))


def load_checkpoint(path: str | Path) -> tuple[PairedModel, dict]:
    payload = torch.load(str(path), map_location="cpu", weights_only=False)
    if payload.get("format") != "viascreen-checkpoint-1":
        raise ModelConfigError(f"unrecognized checkpoint format in {path}")
    config = ModelConfig.from_dict(payload["config"])
    # weights come from the checkpoint; never refetch the pretrained source
    build_cfg = copy.deepcopy(config)
    build_cfg.pretrained_init = False
    model = PairedModel(build_cfg)
    model.load_state_dict(payload["state_dict"])
    model.config = config
    meta = {
        "corpus_hash": payload.get("corpus_hash", ""),
        "split_seed": payload.get("split_seed"),
        "extra": payload.get("extra", {}),
    }
    return model, meta


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
