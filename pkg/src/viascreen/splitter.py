"""Patient-level stratified train/val/test partitioning and pair materialization.

Splits are made at the woman level so no image of one patient ever crosses
splits. A patient counts as positive when any of her retained post-acid
images is positive. test_fraction and val_fraction are fractions of the
whole labeled cohort; validation patients are drawn from the non-test pool.
"""

from __future__ import annotations

import json
import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from .dataset_core import CorpusManifest, ImagePair
from .qc_labeling import LabeledImage

SPLITS = ("train", "val", "test")


class SplitError(Exception):
    """Split infeasible for the given class counts or inconsistent inputs."""


@dataclass
class SplitPlan:
    split_of: dict[str, str]  # patient_id -> "train" | "val" | "test"
    seed: int
    test_fraction: float
    val_fraction: float
    strat_report: dict = field(default_factory=dict)

    def patients(self, split: str) -> list[str]:
        return sorted(p for p, s in self.split_of.items() if s == split)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "test_fraction": self.test_fraction,
            "val_fraction": self.val_fraction,
            "split_of": dict(sorted(self.split_of.items())),
            "strat_report": self.strat_report,
        }


def write_split_plan(plan: SplitPlan, path: str | Path) -> None:
    Path(path).write_text(json.dumps(plan.to_dict(), indent=2, sort_keys=True) + "\n")


def load_split_plan(path: str | Path) -> SplitPlan:
    d = json.loads(Path(path).read_text())
    return SplitPlan(
        split_of=d["split_of"],
        seed=int(d["seed"]),
        test_fraction=float(d["test_fraction"]),
        val_fraction=float(d["val_fraction"]),
        strat_report=d.get("strat_report", {}),
    )


def patient_level_labels(
    manifest: CorpusManifest, labels: Iterable[LabeledImage]
) -> dict[str, bool]:
    """Any-positive reduction of retained post-image labels to the woman level.

    Patients with no labeled (retained) post image are omitted — they carry
    nothing into training or evaluation.
    """
    patient_of = manifest.patient_of_image()
    out: dict[str, bool] = {}
    for lab in labels:
        pid = patient_of.get(lab.image_id)
        if pid is None:
            raise SplitError(f"label references unknown image {lab.image_id}")
        out[pid] = out.get(pid, False) or lab.positive
    return out


def _allocate(n: int, test_fraction: float, val_fraction: float) -> dict[str, int]:
    """Nearest-integer apportionment of n items into test/val/train counts."""
    counts = {
        "test": int(round(n * test_fraction)),
        "val": int(round(n * val_fraction)),
    }
    while counts["test"] + counts["val"] >= n:
        counts["val" if counts["val"] >= counts["test"] else "test"] -= 1
    counts["train"] = n - counts["test"] - counts["val"]
    return counts


def make_split(
    patient_labels: dict[str, bool],
    test_fraction: float,
    val_fraction: float = 0.0,
    seed: int = 0,
) -> SplitPlan:
    """Stratified patient-level split, deterministic per seed.

    Each class (positive/negative women) is shuffled and apportioned to
    test/val/train by rounded proportional counts, so split positive
    fractions track the global fraction within max(1/split_size, 0.02)
    whenever class sizes permit.
    """
    if not patient_labels:
        raise SplitError("no labeled patients to split")
    if not (0 <= test_fraction < 1 and 0 <= val_fraction < 1):
        raise SplitError("fractions must lie in [0, 1)")
    if test_fraction + val_fraction >= 1:
        raise SplitError("test_fraction + val_fraction must be < 1")

    by_class: dict[bool, list[str]] = {True: [], False: []}
    for pid in sorted(patient_labels):
        by_class[patient_labels[pid]].append(pid)

    active_splits = ["train"]
    if test_fraction > 0:
        active_splits.append("test")
    if val_fraction > 0:
        active_splits.append("val")

    rng = random.Random(seed)
    split_of: dict[str, str] = {}
    for cls, members in (("positive", by_class[True]), ("negative", by_class[False])):
        if not members:
            continue
        if len(members) < len(active_splits):
            raise SplitError(
                f"class {cls} has {len(members)} patients, "
                f"not enough to populate {len(active_splits)} splits"
            )
        counts = _allocate(len(members), test_fraction, val_fraction)
        for split in active_splits:
            if counts[split] == 0:
                # steal one from train so every active split sees each class
                counts[split] = 1
                counts["train"] -= 1
        if counts["train"] < 1:
            raise SplitError(f"class {cls}: train split would be empty")
        shuffled = list(members)
        rng.shuffle(shuffled)
        cursor = 0
        for split in ("test", "val"):
            for pid in shuffled[cursor : cursor + counts[split]]:
                split_of[pid] = split
            cursor += counts[split]
        for pid in shuffled[cursor:]:
            split_of[pid] = "train"

    plan = SplitPlan(
        split_of=split_of,
        seed=seed,
        test_fraction=test_fraction,
        val_fraction=val_fraction,
    )
    plan.strat_report = stratification_report(plan, patient_labels)
    return plan


def stratification_report(plan: SplitPlan, patient_labels: dict[str, bool]) -> dict:
    n_pos_total = sum(patient_labels.values())
    global_frac = n_pos_total / len(patient_labels) if patient_labels else 0.0
    report: dict = {"global_positive_fraction": global_frac, "splits": {}}
    for split in SPLITS:
        members = plan.patients(split)
        if not members:
            continue
        n_pos = sum(patient_labels[p] for p in members)
        report["splits"][split] = {
            "women": len(members),
            "positive_women": n_pos,
            "negative_women": len(members) - n_pos,
            "positive_fraction": n_pos / len(members),
        }
    return report


def stratification_tolerance_ok(plan: SplitPlan, patient_labels: dict[str, bool]) -> bool:
    report = stratification_report(plan, patient_labels)
    g = report["global_positive_fraction"]
    for split_stats in report["splits"].values():
        tol = max(1.0 / split_stats["women"], 0.02)
        if abs(split_stats["positive_fraction"] - g) > tol:
            return False
    return True


def materialize_pairs(
    plan: SplitPlan,
    manifest: CorpusManifest,
    labels: Iterable[LabeledImage],
) -> dict[str, list[ImagePair]]:
    """Build per-split (pre, post) pairs: one pair per retained post image,
    labeled by that post image's merged label."""
    label_of = {lab.image_id: lab for lab in labels}
    pairs: dict[str, list[ImagePair]] = {s: [] for s in SPLITS}
    for rec in sorted(manifest.records, key=lambda r: r.patient_id):
        split = plan.split_of.get(rec.patient_id)
        if split is None:
            continue
        retained_posts = [im for im in rec.post_images if im.image_id in label_of]
        if not retained_posts:
            continue
        if rec.pre_image is None:
            raise SplitError(f"patient {rec.patient_id} has no pre image for pairing")
        for im in retained_posts:
            lab = label_of[im.image_id]
            pairs[split].append(
                ImagePair(
                    pair_id=f"{rec.pre_image.image_id}|{im.image_id}",
                    patient_id=rec.patient_id,
                    pre=rec.pre_image,
                    post=im,
                    label=1 if lab.positive else 0,
                )
            )
    return pairs


def pair_counts(pairs: dict[str, list[ImagePair]]) -> dict[str, dict[str, int]]:
    out = {}
    for split, plist in pairs.items():
        c = Counter("positive" if p.label == 1 else "negative" for p in plist)
        out[split] = {"pairs": len(plist), "positive": c["positive"], "negative": c["negative"]}
    return out


def write_pairs(pairs: dict[str, list[ImagePair]], path: str | Path) -> None:
    header = {"schema_version": "1", "kind": "image_pairs"}
    with Path(path).open("w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for split in SPLITS:
            for p in pairs.get(split, []):
                fh.write(
                    json.dumps(
                        {
                            "split": split,
                            "pair_id": p.pair_id,
                            "patient_id": p.patient_id,
                            "pre_image_id": p.pre.image_id,
                            "post_image_id": p.post.image_id,
                            "label": p.label,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )


def load_pairs(path: str | Path, manifest: CorpusManifest) -> dict[str, list[ImagePair]]:
    index = manifest.image_index()
    pairs: dict[str, list[ImagePair]] = {s: [] for s in SPLITS}
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    for ln in lines[1:]:
        d = json.loads(ln)
        pre = index.get(d["pre_image_id"])
        post = index.get(d["post_image_id"])
        if pre is None or post is None:
            raise SplitError(f"pair {d['pair_id']} references images absent from manifest")
        pairs[d["split"]].append(
            ImagePair(
                pair_id=d["pair_id"],
                patient_id=d["patient_id"],
                pre=pre,
                post=post,
                label=d.get("label"),
            )
        )
    return pairs
