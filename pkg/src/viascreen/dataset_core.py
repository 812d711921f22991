"""Domain types, manifest IO, and corpus auditing for camp-collected screening data.

A corpus lives on disk as a directory of original images laid out as
``<camp_id>/<patient_id>/<phase>_<k>.<ext>`` plus a line-delimited manifest:
the first line is a header record declaring ``schema_version``, every
following line is one patient record. Images are never re-encoded at
ingestion; QC needs unaltered pixels.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from PIL import Image

MANIFEST_SCHEMA_VERSION = "1"

PHASES = ("pre_via", "post_via")
BIOPSY_GRADES = ("normal", "LSIL", "HSIL", "cancer")
OPERATOR_CALLS = ("positive", "negative", "unknown")

# nominal seconds between post-acid shots when the capture app recorded none
DEFAULT_POST_SPACING_S = 10.0


class ManifestError(Exception):
    """Malformed manifest file (unparseable or bad header)."""


class ValidationError(Exception):
    """Structurally valid manifest violating record invariants."""

    def __init__(self, message: str, patient_ids: Optional[list[str]] = None):
        super().__init__(message)
        self.patient_ids = patient_ids or []


class MissingImageError(Exception):
    """Manifest references image files that do not resolve on disk."""

    def __init__(self, message: str, uris: Optional[list[str]] = None):
        super().__init__(message)
        self.uris = uris or []


@dataclass(frozen=True)
class ImageRef:
    image_id: str
    uri: str
    phase: str  # "pre_via" | "post_via"
    width_px: int
    height_px: int

    def validate(self) -> None:
        if self.phase not in PHASES:
            raise ValidationError(f"image {self.image_id}: unknown phase {self.phase!r}")
        if self.width_px <= 0 or self.height_px <= 0:
            raise ValidationError(f"image {self.image_id}: non-positive dimensions")


@dataclass(frozen=True)
class BiopsyResult:
    grade: str  # "normal" | "LSIL" | "HSIL" | "cancer"

    @property
    def lsil_plus(self) -> bool:
        return self.grade in ("LSIL", "HSIL", "cancer")

    def validate(self) -> None:
        if self.grade not in BIOPSY_GRADES:
            raise ValidationError(f"unknown biopsy grade {self.grade!r}")


@dataclass(frozen=True)
class PatientCase:
    patient_id: str
    camp_id: str
    pre_image: ImageRef
    post_images: tuple[ImageRef, ...]
    capture_offsets_s: tuple[float, ...]
    operator_via_call: str = "unknown"
    biopsy: Optional[BiopsyResult] = None

    def validate(self) -> None:
        pid = self.patient_id
        if self.pre_image.phase != "pre_via":
            raise ValidationError(f"patient {pid}: pre_image not phase pre_via", [pid])
        if not 1 <= len(self.post_images) <= 6:
            raise ValidationError(
                f"patient {pid}: {len(self.post_images)} post images outside 1..6", [pid]
            )
        if any(im.phase != "post_via" for im in self.post_images):
            raise ValidationError(f"patient {pid}: post image with non-post phase", [pid])
        if len(self.capture_offsets_s) != len(self.post_images):
            raise ValidationError(f"patient {pid}: offsets/post-image count mismatch", [pid])
        if any(b > a for a, b in zip(self.capture_offsets_s[1:], self.capture_offsets_s)):
            raise ValidationError(f"patient {pid}: capture offsets not non-decreasing", [pid])
        if self.operator_via_call not in OPERATOR_CALLS:
            raise ValidationError(f"patient {pid}: bad operator call", [pid])
        self.pre_image.validate()
        for im in self.post_images:
            im.validate()
        if self.biopsy is not None:
            self.biopsy.validate()

    @property
    def images(self) -> tuple[ImageRef, ...]:
        return (self.pre_image,) + self.post_images


@dataclass(frozen=True)
class ImagePair:
    """One classifier input unit: a patient's pre-acid image with one post-acid image."""

    pair_id: str
    patient_id: str
    pre: ImageRef
    post: ImageRef
    label: Optional[int] = None  # 1 positive, 0 negative, None unlabeled


@dataclass
class CorpusManifest:
    records: list[PatientCase]
    schema_version: str = MANIFEST_SCHEMA_VERSION
    counts: dict[str, int] = field(default_factory=dict)

    def recount(self) -> dict[str, int]:
        n_post = sum(len(r.post_images) for r in self.records)
        return {
            "women": len(self.records),
            "pre_images": len(self.records),
            "post_images": n_post,
            "images": len(self.records) + n_post,
        }

    def image_index(self) -> dict[str, ImageRef]:
        index: dict[str, ImageRef] = {}
        for rec in self.records:
            for im in rec.images:
                index[im.image_id] = im
        return index

    def patient_of_image(self) -> dict[str, str]:
        return {im.image_id: rec.patient_id for rec in self.records for im in rec.images}

    def validate(self) -> None:
        bad: list[str] = []
        messages: list[str] = []
        for rec in self.records:
            try:
                rec.validate()
            except ValidationError as exc:
                bad.append(rec.patient_id)
                messages.append(str(exc))
        if bad:
            raise ValidationError(
                "manifest validation failed: " + "; ".join(messages), sorted(set(bad))
            )
        pid_counts = Counter(r.patient_id for r in self.records)
        dup_pids = sorted(p for p, c in pid_counts.items() if c > 1)
        if dup_pids:
            raise ValidationError(f"duplicate patient_ids: {dup_pids}", dup_pids)
        iid_counts = Counter(im.image_id for r in self.records for im in r.images)
        dup_iids = sorted(i for i, c in iid_counts.items() if c > 1)
        if dup_iids:
            raise ValidationError(f"duplicate image_ids: {dup_iids}")
        if self.counts:
            actual = self.recount()
            declared = {k: v for k, v in self.counts.items() if k in actual}
            mismatched = {k: (v, actual[k]) for k, v in declared.items() if v != actual[k]}
            if mismatched:
                raise ValidationError(f"declared counts disagree with records: {mismatched}")
        self.counts = self.recount()


def _image_ref_to_dict(im: ImageRef) -> dict:
    return asdict(im)


def _image_ref_from_dict(d: dict) -> ImageRef:
    return ImageRef(
        image_id=str(d["image_id"]),
        uri=str(d["uri"]),
        phase=str(d["phase"]),
        width_px=int(d["width_px"]),
        height_px=int(d["height_px"]),
    )


def _record_to_dict(rec: PatientCase) -> dict:
    d = {
        "patient_id": rec.patient_id,
        "camp_id": rec.camp_id,
        "pre_image": _image_ref_to_dict(rec.pre_image),
        "post_images": [_image_ref_to_dict(im) for im in rec.post_images],
        "capture_offsets_s": list(rec.capture_offsets_s),
        "operator_via_call": rec.operator_via_call,
    }
    if rec.biopsy is not None:
        d["biopsy"] = {"grade": rec.biopsy.grade, "lsil_plus": rec.biopsy.lsil_plus}
    return d


def _record_from_dict(d: dict) -> PatientCase:
    post = tuple(_image_ref_from_dict(x) for x in d["post_images"])
    offsets = d.get("capture_offsets_s")
    if offsets is None:
        offsets = tuple(DEFAULT_POST_SPACING_S * (k + 1) for k in range(len(post)))
    else:
        offsets = tuple(float(x) for x in offsets)
    biopsy = None
    if d.get("biopsy") is not None:
        biopsy = BiopsyResult(grade=str(d["biopsy"]["grade"]))
    return PatientCase(
        patient_id=str(d["patient_id"]),
        camp_id=str(d["camp_id"]),
        pre_image=_image_ref_from_dict(d["pre_image"]),
        post_images=post,
        capture_offsets_s=offsets,
        operator_via_call=str(d.get("operator_via_call", "unknown")),
        biopsy=biopsy,
    )


def load_manifest(path: str | Path, check_images: bool = True) -> CorpusManifest:
    """Parse and validate a manifest file.

    Relative image uris resolve against the manifest's directory. With
    ``check_images`` every uri must exist on disk (decodability is audited
    separately by :func:`audit_corpus`).
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    lines = path.read_text().splitlines()
    lines = [ln for ln in lines if ln.strip()]
    if not lines:
        raise ManifestError(f"empty manifest: {path}")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ManifestError(f"unparseable manifest header: {exc}") from exc
    if not isinstance(header, dict) or "schema_version" not in header:
        raise ManifestError("manifest header must declare schema_version")
    version = str(header["schema_version"])
    if version != MANIFEST_SCHEMA_VERSION:
        raise ManifestError(f"unsupported schema_version {version!r}")

    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            d = json.loads(line)
            records.append(_record_from_dict(d))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"bad record at line {lineno}: {exc}") from exc

    manifest = CorpusManifest(
        records=records,
        schema_version=version,
        counts=dict(header.get("counts", {})),
    )
    manifest.validate()

    if check_images:
        root = path.parent
        missing = [
            im.uri
            for rec in manifest.records
            for im in rec.images
            if not (root / im.uri).exists()
        ]
        if missing:
            raise MissingImageError(
                f"{len(missing)} image uri(s) do not resolve (first: {missing[0]})", missing
            )
    return manifest


def write_manifest(manifest: CorpusManifest, path: str | Path) -> None:
    path = Path(path)
    manifest.counts = manifest.recount()
    header = {
        "schema_version": manifest.schema_version,
        "kind": "corpus_manifest",
        "counts": manifest.counts,
    }
    with path.open("w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in manifest.records:
            fh.write(json.dumps(_record_to_dict(rec), sort_keys=True) + "\n")


def load_image_array(path: str | Path) -> np.ndarray:
    """Decode an image file to an RGB uint8 array (H, W, 3)."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except Exception as exc:
        raise MissingImageError(f"undecodable image {path}: {exc}", [str(path)]) from exc


def image_layout_path(camp_id: str, patient_id: str, phase: str, k: int, ext: str = "png") -> str:
    """Canonical on-disk location for one capture: <camp>/<patient>/<phase>_<k>.<ext>."""
    token = "pre" if phase == "pre_via" else "post"
    return f"{camp_id}/{patient_id}/{token}_{k}.{ext}"


def audit_corpus(manifest: CorpusManifest, corpus_root: Optional[str | Path] = None) -> dict:
    """Deterministic corpus audit: per-camp/per-patient tallies and decode failures.

    Decode checks run only when ``corpus_root`` is given; failures are report
    entries, never exceptions.
    """
    per_camp: Counter = Counter()
    per_patient_images: dict[str, int] = {}
    decode_failures: list[str] = []

    for rec in sorted(manifest.records, key=lambda r: r.patient_id):
        per_camp[rec.camp_id] += 1
        per_patient_images[rec.patient_id] = len(rec.images)
        if corpus_root is not None:
            for im in rec.images:
                try:
                    arr = load_image_array(Path(corpus_root) / im.uri)
                    if arr.ndim != 3 or arr.shape[2] != 3:
                        decode_failures.append(im.image_id)
                except MissingImageError:
                    decode_failures.append(im.image_id)

    counts = manifest.recount()
    women = counts["women"]
    report = {
        "counts": counts,
        "per_camp_women": dict(sorted(per_camp.items())),
        "per_patient_image_counts": per_patient_images,
        "decode_failures": sorted(decode_failures),
        "mean_post_images_per_woman": (counts["post_images"] / women) if women else 0.0,
    }
    return report
