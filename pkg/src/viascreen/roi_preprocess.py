"""Cervix region detection and pair cropping ahead of classification.

The detector sits behind a small contract — train from corner-labeled boxes,
then deterministically propose one box per image with a confidence score —
so any architecture can back it. The bundled implementation is a calibrated
bright-region proposer: smartphone VIA frames put an illuminated cervix on a
dark speculum/vaginal surround, so a tuned intensity percentile plus largest
connected component recovers the region without a GPU. Cropping never drops
a pair: detection failures fall back to a configured center crop.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from PIL import Image
from scipy import ndimage

from .dataset_core import ImagePair, ImageRef, load_image_array

DETECTOR_VERSION = "bright-region-1"


class DetectorError(Exception):
    """Detector training/inference contract violation."""


@dataclass(frozen=True)
class BoundingBox:
    x_min: int
    y_min: int
    x_max: int
    y_max: int
    confidence: float = 1.0

    def validate(self, width: Optional[int] = None, height: Optional[int] = None) -> None:
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise DetectorError(f"degenerate box {self}")
        if self.x_min < 0 or self.y_min < 0:
            raise DetectorError(f"negative box corner {self}")
        if width is not None and self.x_max > width:
            raise DetectorError(f"box {self} exceeds width {width}")
        if height is not None and self.y_max > height:
            raise DetectorError(f"box {self} exceeds height {height}")

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    def area(self) -> int:
        return self.width * self.height


def iou(a: BoundingBox, b: BoundingBox) -> float:
    ix = max(0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    iy = max(0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = ix * iy
    union = a.area() + b.area() - inter
    return inter / union if union else 0.0


@dataclass
class DetectorConfig:
    percentile_grid: tuple[float, ...] = (70.0, 75.0, 80.0, 85.0, 90.0, 94.0, 97.0)
    smooth_fraction_grid: tuple[float, ...] = (0.02, 0.05)
    min_area_fraction: float = 0.002
    max_area_fraction: float = 0.98
    holdout_fraction: float = 0.2
    seed: int = 0


@dataclass
class DetectorHandle:
    """Opaque trained-detector reference; `detect` is deterministic per handle."""

    kind: str
    params: dict
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"kind": self.kind, "params": self.params, "metadata": self.metadata},
                          indent=2, sort_keys=True)


def save_detector(handle: DetectorHandle, path: str | Path) -> None:
    Path(path).write_text(handle.to_json() + "\n")


def load_detector(path: str | Path) -> DetectorHandle:
    d = json.loads(Path(path).read_text())
    if d.get("kind") != DETECTOR_VERSION:
        raise DetectorError(f"unsupported detector kind {d.get('kind')!r}")
    return DetectorHandle(kind=d["kind"], params=d["params"], metadata=d.get("metadata", {}))


def _check_image(image: np.ndarray) -> np.ndarray:
    if not isinstance(image, np.ndarray) or image.ndim != 3 or image.shape[2] != 3:
        raise DetectorError("detector expects an HxWx3 array")
    return image


def _propose(
    image: np.ndarray,
    percentile: float,
    smooth_fraction: float,
    min_area_fraction: float,
    max_area_fraction: float,
) -> Optional[BoundingBox]:
    """Single deterministic box proposal: smoothed-luminance percentile mask,
    largest component, inside/outside contrast as confidence."""
    h, w = image.shape[:2]
    gray = image.astype(np.float32).mean(axis=2)
    size = max(3, int(round(min(h, w) * smooth_fraction)))
    smoothed = ndimage.uniform_filter(gray, size=size)

    thr = float(np.percentile(smoothed, percentile))
    mask = smoothed >= thr
    if not mask.any() or mask.all():
        return None
    labeled, n = ndimage.label(mask)
    if n == 0:
        return None
    sizes = ndimage.sum_labels(np.ones_like(gray), labeled, index=np.arange(1, n + 1))
    best = int(np.argmax(sizes)) + 1
    component = labeled == best
    ys, xs = np.nonzero(component)
    box = BoundingBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)

    area_frac = component.sum() / (h * w)
    if not (min_area_fraction <= area_frac <= max_area_fraction):
        return None
    inside = smoothed[component]
    outside = smoothed[~component]
    if outside.size == 0 or inside.size == 0:
        return None
    contrast = float(inside.mean() - outside.mean()) / 255.0
    confidence = float(np.clip(contrast, 0.0, 1.0))
    return BoundingBox(box.x_min, box.y_min, box.x_max, box.y_max, confidence)


def train_detector(
    boxed_images: list[tuple[np.ndarray, BoundingBox]],
    config: Optional[DetectorConfig] = None,
) -> DetectorHandle:
    """Calibrate the proposer on labeled boxes: grid-search percentile and
    smoothing for best mean IoU, then report held-out IoU (not enforced)."""
    config = config or DetectorConfig()
    if not boxed_images:
        raise DetectorError("empty detector training set")
    for image, box in boxed_images:
        _check_image(image)
        box.validate(width=image.shape[1], height=image.shape[0])

    rng = random.Random(config.seed)
    indices = list(range(len(boxed_images)))
    rng.shuffle(indices)
    n_holdout = int(round(len(indices) * config.holdout_fraction))
    holdout_idx = set(indices[:n_holdout])
    fit_idx = [i for i in indices if i not in holdout_idx] or indices

    best = None
    for percentile in config.percentile_grid:
        for smooth in config.smooth_fraction_grid:
            ious = []
            for i in fit_idx:
                image, gt = boxed_images[i]
                prop = _propose(image, percentile, smooth,
                                config.min_area_fraction, config.max_area_fraction)
                ious.append(iou(prop, gt) if prop else 0.0)
            score = float(np.mean(ious))
            key = (score, -percentile)  # prefer lower percentile on ties (larger regions)
            if best is None or key > best[0]:
                best = (key, percentile, smooth)
    _, percentile, smooth = best

    params = {
        "percentile": percentile,
        "smooth_fraction": smooth,
        "min_area_fraction": config.min_area_fraction,
        "max_area_fraction": config.max_area_fraction,
    }
    handle = DetectorHandle(kind=DETECTOR_VERSION, params=params)

    holdout = sorted(holdout_idx)
    holdout_ious = []
    for i in holdout:
        image, gt = boxed_images[i]
        prop = _propose(image, percentile, smooth,
                        config.min_area_fraction, config.max_area_fraction)
        holdout_ious.append(iou(prop, gt) if prop else 0.0)
    handle.metadata = {
        "version": DETECTOR_VERSION,
        "training_set_size": len(boxed_images),
        "holdout_size": len(holdout),
        "holdout_mean_iou": float(np.mean(holdout_ious)) if holdout_ious else None,
        "holdout_fraction_iou_ge_05": (
            float(np.mean([v >= 0.5 for v in holdout_ious])) if holdout_ious else None
        ),
    }
    return handle


def detect(handle: DetectorHandle, image: np.ndarray, threshold: float = 0.5) -> Optional[BoundingBox]:
    """Highest-confidence box, or None when confidence falls below threshold."""
    _check_image(image)
    p = handle.params
    prop = _propose(
        image,
        p["percentile"],
        p["smooth_fraction"],
        p["min_area_fraction"],
        p["max_area_fraction"],
    )
    if prop is None or prop.confidence < threshold:
        return None
    return prop


@dataclass
class CropPolicy:
    margin: float = 0.10  # box expansion per side, fraction of box size
    confidence_threshold: float = 0.5
    center_fraction: float = 0.8  # fallback center-crop fraction of the frame
    output_size: tuple[int, int] = (224, 224)  # (height, width)


def expand_and_clip(box: BoundingBox, width: int, height: int, margin: float) -> BoundingBox:
    dx = int(round(box.width * margin))
    dy = int(round(box.height * margin))
    return BoundingBox(
        max(0, box.x_min - dx),
        max(0, box.y_min - dy),
        min(width, box.x_max + dx),
        min(height, box.y_max + dy),
        box.confidence,
    )


def center_box(width: int, height: int, fraction: float) -> BoundingBox:
    cw = max(1, int(round(width * fraction)))
    ch = max(1, int(round(height * fraction)))
    x0 = (width - cw) // 2
    y0 = (height - ch) // 2
    return BoundingBox(x0, y0, x0 + cw, y0 + ch, 0.0)


def crop_array(
    image: np.ndarray,
    handle: DetectorHandle,
    policy: CropPolicy,
) -> tuple[np.ndarray, dict]:
    """Crop one frame to its detected region (expanded, clipped) or the
    fallback center crop, then resize to the classifier input size."""
    _check_image(image)
    h, w = image.shape[:2]
    box = detect(handle, image, policy.confidence_threshold)
    if box is not None:
        used = expand_and_clip(box, w, h, policy.margin)
        source = "detector"
    else:
        used = center_box(w, h, policy.center_fraction)
        source = "fallback"
    crop = image[used.y_min : used.y_max, used.x_min : used.x_max]
    out_h, out_w = policy.output_size
    resized = np.asarray(
        Image.fromarray(crop).resize((out_w, out_h), Image.BILINEAR)
    )
    info = {"source": source, "box": asdict(used)}
    return resized, info


def crop_pair(
    pair: ImagePair,
    handle: DetectorHandle,
    policy: CropPolicy,
    corpus_root: str | Path,
    out_root: str | Path,
) -> tuple[ImagePair, dict]:
    """Crop both images of a pair independently and write them under
    ``out_root`` mirroring the original layout. Never drops a pair."""
    corpus_root = Path(corpus_root)
    out_root = Path(out_root)
    out_h, out_w = policy.output_size
    new_refs = {}
    infos = {}
    for role, ref in (("pre", pair.pre), ("post", pair.post)):
        image = load_image_array(corpus_root / ref.uri)
        cropped, info = crop_array(image, handle, policy)
        rel = Path(ref.uri).with_suffix(".png")
        dest = out_root / rel
        dest.parent.mkdir(parents=True, exist_ok=True)
        if not dest.exists():  # the same pre image serves several pairs
            Image.fromarray(cropped).save(dest, format="PNG")
        new_refs[role] = ImageRef(
            image_id=ref.image_id,
            uri=str(rel),
            phase=ref.phase,
            width_px=out_w,
            height_px=out_h,
        )
        infos[role] = info
    cropped_pair = ImagePair(
        pair_id=pair.pair_id,
        patient_id=pair.patient_id,
        pre=new_refs["pre"],
        post=new_refs["post"],
        label=pair.label,
    )
    return cropped_pair, infos


def parse_box_file(path: str | Path) -> dict[str, BoundingBox]:
    """Corner-coordinate text format: `image_id x_min y_min x_max y_max` per line."""
    boxes: dict[str, BoundingBox] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 5:
            raise DetectorError(f"{path}:{lineno}: expected `image_id x0 y0 x1 y1`")
        iid, *coords = parts
        try:
            x0, y0, x1, y1 = (int(c) for c in coords)
        except ValueError as exc:
            raise DetectorError(f"{path}:{lineno}: non-integer corner") from exc
        box = BoundingBox(x0, y0, x1, y1)
        box.validate()
        boxes[iid] = box
    return boxes


def write_box_file(boxes: dict[str, BoundingBox], path: str | Path) -> None:
    with Path(path).open("w") as fh:
        fh.write("# image_id x_min y_min x_max y_max\n")
        for iid in sorted(boxes):
            b = boxes[iid]
            fh.write(f"{iid} {b.x_min} {b.y_min} {b.x_max} {b.y_max}\n")
