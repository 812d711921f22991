"""Expert questionnaire records, quality-control discards, and label merging.

The questionnaire captures, per image: cervix presence, quality-issue flags,
quality sufficiency, SCJ visibility, anatomical decidability, orientation,
percent cervix visibility, and (when quality suffices) the four-class VIA
call. Post-acid images are discarded for insufficient quality, non-cervix
content, or an undecidable call; suspicious-cancer and VIA-positive calls
merge into the binary positive class. QC never inspects pixels — it is
annotation-driven only.
"""

from __future__ import annotations

import json
import random
from collections import defaultdict
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable, Optional

from .dataset_core import CorpusManifest

ANNOTATION_SCHEMA_VERSION = "1"

QUALITY_FLAGS = (
    "blur",
    "motion",
    "overexposure",
    "underexposure",
    "specular_reflection",
    "blood",
    "mucus",
    "obstruction",
    "other",
)
SCJ_VISIBILITY = ("fully", "partially", "not_visible")
ORIENTATIONS = ("correct", "rotated", "inverted")
VIA_CLASSES = ("via_positive", "via_negative", "suspicious_cancer", "not_decidable")

MERGE_RULES = ("any_positive", "majority", "adjudicator")

# discard reasons, in the precedence order a single image is counted under
REASON_INSUFFICIENT = "insufficient_quality"
REASON_NOT_CERVIX = "not_cervix"
REASON_NOT_DECIDABLE = "not_decidable"
REASON_NO_VALID_PRE = "no_valid_pre"


class AnnotationSchemaError(Exception):
    """Annotation record violating the questionnaire schema."""


class QcContractError(Exception):
    """QC pipeline contract violation (dangling ids, missing via_class, ...)."""


@dataclass(frozen=True)
class AnnotationRecord:
    image_id: str
    annotator_id: str
    is_cervix: bool
    quality_flags: frozenset[str]
    quality_sufficient: bool
    scj_visible: str
    decidable_by_anatomy: bool
    orientation: str
    cervix_visibility_pct: int
    via_class: Optional[str]
    timestamp: str

    def validate(self, extra_flags: Iterable[str] = ()) -> None:
        vocab = set(QUALITY_FLAGS) | set(extra_flags)
        unknown = self.quality_flags - vocab
        if unknown:
            raise AnnotationSchemaError(
                f"image {self.image_id}: unknown quality flags {sorted(unknown)}"
            )
        if self.scj_visible not in SCJ_VISIBILITY:
            raise AnnotationSchemaError(f"image {self.image_id}: bad scj_visible")
        if self.orientation not in ORIENTATIONS:
            raise AnnotationSchemaError(f"image {self.image_id}: bad orientation")
        if not 0 <= self.cervix_visibility_pct <= 100:
            raise AnnotationSchemaError(
                f"image {self.image_id}: cervix_visibility_pct outside 0..100"
            )
        if self.quality_sufficient:
            if self.via_class is None:
                raise AnnotationSchemaError(
                    f"image {self.image_id}: via_class required when quality_sufficient"
                )
            if self.via_class not in VIA_CLASSES:
                raise AnnotationSchemaError(f"image {self.image_id}: bad via_class")
        elif self.via_class is not None:
            raise AnnotationSchemaError(
                f"image {self.image_id}: via_class present despite insufficient quality"
            )


@dataclass(frozen=True)
class LabeledImage:
    image_id: str
    final_label: str  # "positive" | "negative"
    provenance: dict

    @property
    def positive(self) -> bool:
        return self.final_label == "positive"


def record_to_dict(rec: AnnotationRecord) -> dict:
    d = asdict(rec)
    d["quality_flags"] = sorted(rec.quality_flags)
    return d


def record_from_dict(d: dict, extra_flags: Iterable[str] = ()) -> AnnotationRecord:
    try:
        rec = AnnotationRecord(
            image_id=str(d["image_id"]),
            annotator_id=str(d["annotator_id"]),
            is_cervix=bool(d["is_cervix"]),
            quality_flags=frozenset(d.get("quality_flags", [])),
            quality_sufficient=bool(d["quality_sufficient"]),
            scj_visible=str(d["scj_visible"]),
            decidable_by_anatomy=bool(d["decidable_by_anatomy"]),
            orientation=str(d["orientation"]),
            cervix_visibility_pct=int(d["cervix_visibility_pct"]),
            via_class=d.get("via_class"),
            timestamp=str(d.get("timestamp", "")),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise AnnotationSchemaError(f"bad annotation record: {exc}") from exc
    rec.validate(extra_flags)
    return rec


def load_annotations(path: str | Path, extra_flags: Iterable[str] = ()) -> list[AnnotationRecord]:
    """Read annotation records from the shared header+JSONL format."""
    path = Path(path)
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise AnnotationSchemaError(f"empty annotation file: {path}")
    header = json.loads(lines[0])
    if str(header.get("schema_version")) != ANNOTATION_SCHEMA_VERSION:
        raise AnnotationSchemaError(f"unsupported annotation schema in {path}")
    return [record_from_dict(json.loads(ln), extra_flags) for ln in lines[1:]]


def write_annotations(records: Iterable[AnnotationRecord], path: str | Path) -> None:
    path = Path(path)
    header = {"schema_version": ANNOTATION_SCHEMA_VERSION, "kind": "annotations"}
    with path.open("w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(record_to_dict(rec), sort_keys=True) + "\n")


@dataclass
class DiscardReport:
    by_reason: dict[str, list[str]] = field(default_factory=dict)
    unannotated: list[str] = field(default_factory=list)
    excluded_patients: list[str] = field(default_factory=list)

    def all_discarded(self) -> set[str]:
        return {iid for ids in self.by_reason.values() for iid in ids}

    def to_dict(self) -> dict:
        return {
            "by_reason": {k: sorted(v) for k, v in self.by_reason.items()},
            "unannotated": sorted(self.unannotated),
            "excluded_patients": sorted(self.excluded_patients),
            "n_discarded": len(self.all_discarded()),
        }

    def summary(self) -> str:
        lines = ["QC discard report"]
        for reason in sorted(self.by_reason):
            lines.append(f"  {reason}: {len(self.by_reason[reason])} images")
        lines.append(f"  unannotated post images: {len(self.unannotated)}")
        lines.append(f"  patients excluded (no valid pre): {len(self.excluded_patients)}")
        return "\n".join(lines)


def _record_discard_reason(rec: AnnotationRecord, is_post: bool) -> Optional[str]:
    if not rec.quality_sufficient:
        return REASON_INSUFFICIENT
    if not rec.is_cervix:
        return REASON_NOT_CERVIX
    if is_post and rec.via_class == "not_decidable":
        return REASON_NOT_DECIDABLE
    return None


def apply_qc(
    annotations: list[AnnotationRecord], manifest: CorpusManifest
) -> tuple[list[str], DiscardReport]:
    """Partition annotated post-acid images into retained vs discarded.

    An image is discarded when any of its annotators marked insufficient
    quality, non-cervix content, or (post images) an undecidable call; each
    image is counted once under the first matching reason. Patients whose
    pre-acid image fails QC are excluded entirely (reason ``no_valid_pre``)
    because pairing requires the pre image. Pre-acid images bypass the
    via_class rule — the VIA decision applies to post-acid images.
    """
    index = manifest.image_index()
    patient_of = manifest.patient_of_image()
    dangling = sorted({a.image_id for a in annotations} - set(index))
    if dangling:
        raise QcContractError(f"annotations reference unknown image_ids: {dangling}")

    by_image: dict[str, list[AnnotationRecord]] = defaultdict(list)
    for ann in annotations:
        by_image[ann.image_id].append(ann)

    report = DiscardReport(by_reason={
        REASON_INSUFFICIENT: [],
        REASON_NOT_CERVIX: [],
        REASON_NOT_DECIDABLE: [],
        REASON_NO_VALID_PRE: [],
    })

    # pass 1: per-image verdicts from each image's own annotations
    image_reason: dict[str, Optional[str]] = {}
    for iid, recs in by_image.items():
        is_post = index[iid].phase == "post_via"
        reasons = [_record_discard_reason(r, is_post) for r in recs]
        hit = [r for r in reasons if r is not None]
        image_reason[iid] = min(hit, key=_reason_rank) if hit else None

    # pass 2: patients with an annotated-and-failed pre image lose all post images
    no_pre_patients = set()
    for rec in manifest.records:
        pre_id = rec.pre_image.image_id
        if pre_id in image_reason and image_reason[pre_id] is not None:
            no_pre_patients.add(rec.patient_id)
    report.excluded_patients = sorted(no_pre_patients)

    retained: list[str] = []
    for iid in sorted(by_image):
        if index[iid].phase != "post_via":
            continue
        reason = image_reason[iid]
        if reason is None and patient_of[iid] in no_pre_patients:
            reason = REASON_NO_VALID_PRE
        if reason is None:
            retained.append(iid)
        else:
            report.by_reason[reason].append(iid)

    annotated = {iid for iid in by_image if index[iid].phase == "post_via"}
    report.unannotated = sorted(
        im.image_id
        for rec in manifest.records
        for im in rec.post_images
        if im.image_id not in annotated
    )
    return retained, report


_REASON_ORDER = {
    REASON_INSUFFICIENT: 0,
    REASON_NOT_CERVIX: 1,
    REASON_NOT_DECIDABLE: 2,
    REASON_NO_VALID_PRE: 3,
}


def _reason_rank(reason: str) -> int:
    return _REASON_ORDER[reason]


def merge_labels(
    annotations_by_image: dict[str, list[AnnotationRecord]],
    rule: str = "any_positive",
    adjudicator_id: Optional[str] = None,
) -> list[LabeledImage]:
    """Reduce per-image four-class calls to the binary target.

    via_positive and suspicious_cancer map to positive, via_negative to
    negative. Multi-annotator conflicts resolve per ``rule``: any_positive
    (default, favors screening sensitivity), majority (ties positive), or
    adjudicator (that annotator's call wins, others break absences).
    """
    if rule not in MERGE_RULES:
        raise ValueError(f"unknown merge rule {rule!r}")
    if rule == "adjudicator" and not adjudicator_id:
        raise ValueError("adjudicator rule requires adjudicator_id")

    out: list[LabeledImage] = []
    for iid in sorted(annotations_by_image):
        recs = annotations_by_image[iid]
        calls = {}
        for rec in recs:
            if rec.via_class is None or rec.via_class == "not_decidable":
                raise QcContractError(
                    f"retained image {iid} lacks a decidable via_class from {rec.annotator_id}"
                )
            calls[rec.annotator_id] = rec.via_class
        votes = {a: (c in ("via_positive", "suspicious_cancer")) for a, c in calls.items()}
        conflict = len(set(votes.values())) > 1

        if rule == "any_positive":
            positive = any(votes.values())
        elif rule == "majority":
            n_pos = sum(votes.values())
            positive = n_pos * 2 >= len(votes)  # ties go positive
        else:
            if adjudicator_id in votes:
                positive = votes[adjudicator_id]
            else:
                positive = any(votes.values())
        out.append(
            LabeledImage(
                image_id=iid,
                final_label="positive" if positive else "negative",
                provenance={
                    "annotators": sorted(calls),
                    "calls": {a: calls[a] for a in sorted(calls)},
                    "rule": rule,
                    "conflict": conflict,
                },
            )
        )
    return out


def write_labels(labels: Iterable[LabeledImage], path: str | Path) -> None:
    path = Path(path)
    header = {"schema_version": ANNOTATION_SCHEMA_VERSION, "kind": "labels"}
    with path.open("w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for lab in labels:
            fh.write(json.dumps(asdict(lab), sort_keys=True) + "\n")


def load_labels(path: str | Path) -> list[LabeledImage]:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    out = []
    for ln in lines[1:]:
        d = json.loads(ln)
        out.append(LabeledImage(d["image_id"], d["final_label"], d.get("provenance", {})))
    return out


def assignment_plan(
    patients: list[str],
    annotators: list[str],
    overlap_n: int = 0,
    seed: int = 0,
) -> dict[str, list[str]]:
    """Assign patients to annotators: overlap patients to everyone, the rest
    one annotator each, balanced within one task. Deterministic per seed.

    Returns patient_id -> list of annotator_ids.
    """
    if not annotators:
        raise ValueError("at least one annotator required")
    if overlap_n > len(patients):
        raise ValueError(f"overlap_n {overlap_n} exceeds patient count {len(patients)}")
    rng = random.Random(seed)
    shuffled = sorted(patients)
    rng.shuffle(shuffled)
    plan: dict[str, list[str]] = {}
    overlap = shuffled[:overlap_n]
    for pid in overlap:
        plan[pid] = list(annotators)
    for k, pid in enumerate(shuffled[overlap_n:]):
        plan[pid] = [annotators[k % len(annotators)]]
    return plan
