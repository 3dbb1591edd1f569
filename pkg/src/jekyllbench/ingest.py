"""Manifest loading, patient-level partitioning, augmentation, and victim screening."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .core import (
    DatasetManifest,
    Partition,
    PatientRecord,
    ValidationError,
    assert_disjoint,
    derive_rng,
    load_image,
    validate_image,
    validate_manifest,
    write_json,
)

AUGMENT_OPS = ("gaussian_blur", "random_rotation")


@dataclass(frozen=True)
class AugmentationSpec:
    target_count_per_patient: int
    ops: tuple[str, ...] = AUGMENT_OPS
    rotation_range: float = 15.0
    blur_sigma: float = 1.0

    def __post_init__(self) -> None:
        if self.target_count_per_patient < 1:
            raise ValidationError("target_count_per_patient must be >= 1")
        unknown = set(self.ops) - set(AUGMENT_OPS)
        if unknown:
            raise ValidationError(f"unknown augmentation ops: {sorted(unknown)}")
        if not 0.0 < self.rotation_range <= 180.0:
            raise ValidationError(f"rotation_range must lie in (0, 180], got {self.rotation_range}")
        if self.blur_sigma <= 0:
            raise ValidationError(f"blur_sigma must be positive, got {self.blur_sigma}")


@dataclass(frozen=True)
class VictimSet:
    """Evaluation-partition non-disease images that passed both classifier screens."""

    entries: tuple[tuple[str, str], ...]  # (patient_id, image_ref)
    source_partition: str = "evaluation"

    def __post_init__(self) -> None:
        if self.source_partition != "evaluation":
            raise ValidationError("victims must come from the evaluation partition")

    def save(self, path: str | Path) -> None:
        write_json(
            {
                "source_partition": self.source_partition,
                "entries": [{"patient_id": p, "path": r} for p, r in self.entries],
            },
            path,
        )

    @staticmethod
    def load(path: str | Path) -> "VictimSet":
        with open(path, "r", encoding="utf-8") as handle:
            data = json.load(handle)
        entries = tuple((e["patient_id"], e["path"]) for e in data["entries"])
        return VictimSet(entries, data["source_partition"])


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse a JSONL manifest (header line + one image per line) and validate it."""
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as handle:
            raw_lines = handle.readlines()
    except OSError as exc:
        raise OSError(f"cannot read manifest {path}: {exc}") from exc
    lines: list[tuple[int, dict]] = []
    for number, text in enumerate(raw_lines, start=1):
        if not text.strip():
            continue
        try:
            lines.append((number, json.loads(text)))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: malformed JSON on line {number}: {exc}") from exc
    if not lines:
        raise ValidationError(f"{path}: empty manifest, missing header line")
    header_no, header = lines[0]
    if "vocabulary" not in header or "resolution" not in header:
        raise ValidationError(f"{path}: line {header_no} is not a manifest header")
    by_patient: dict[str, list[tuple[str, str]]] = {}
    order: list[str] = []
    for number, entry in lines[1:]:
        missing = {"path", "patient_id", "label"} - set(entry)
        if missing:
            raise ValidationError(f"{path}: line {number} missing keys {sorted(missing)}")
        pid = entry["patient_id"]
        if pid not in by_patient:
            by_patient[pid] = []
            order.append(pid)
        by_patient[pid].append((entry["path"], entry["label"]))
    records = tuple(
        PatientRecord(pid, tuple(p for p, _ in by_patient[pid]), tuple(l for _, l in by_patient[pid]))
        for pid in order
    )
    manifest = DatasetManifest(
        records=records,
        condition_vocabulary=tuple(header["vocabulary"]),
        image_resolution=int(header["resolution"]),
        root=path.parent,
    )
    violations = validate_manifest(manifest)
    if violations:
        raise ValidationError(f"{path}: manifest invalid", violations)
    return manifest


def partition_patients(
    manifest: DatasetManifest,
    eval_fraction: float = 0.2,
    min_images_for_identity: int = 10,
    seed: int = 0,
) -> tuple[Partition, Partition]:
    """Split patients into disjoint attack/evaluation sets covering everyone.

    The evaluation side is drawn only from patients with at least
    ``min_images_for_identity`` images, so a per-patient identity classifier
    can be trained on it. Too few qualifying patients is an error rather than
    a silently smaller evaluation set.
    """
    if not 0.0 < eval_fraction < 1.0:
        raise ValidationError(f"eval_fraction must lie in (0, 1), got {eval_fraction}")
    all_ids = sorted(manifest.patient_ids)
    n_eval = int(round(eval_fraction * len(all_ids)))
    if n_eval < 1 or n_eval >= len(all_ids):
        raise ValidationError(
            f"eval_fraction {eval_fraction} leaves no usable split for {len(all_ids)} patients"
        )
    qualifying = sorted(
        record.patient_id for record in manifest.records if len(record.image_refs) >= min_images_for_identity
    )
    if len(qualifying) < n_eval:
        raise ValidationError(
            f"need {n_eval} patients with >= {min_images_for_identity} images, found {len(qualifying)}"
        )
    rng = derive_rng(seed, "partition")
    chosen = rng.choice(len(qualifying), size=n_eval, replace=False)
    eval_ids = frozenset(qualifying[i] for i in chosen)
    attack_ids = frozenset(all_ids) - eval_ids
    attack = Partition("attack", attack_ids)
    evaluation = Partition("evaluation", eval_ids)
    assert_disjoint(attack, evaluation)
    assert attack.patient_ids | evaluation.patient_ids == set(all_ids)
    return attack, evaluation


def partition_images(
    manifest: DatasetManifest, partition: Partition, label_filter: Callable[[str], bool] | None = None
) -> list[tuple[str, str, str]]:
    """(patient_id, image_ref, label) triples for one partition, manifest order."""
    out = []
    for pid, ref, label in manifest.iter_images():
        if pid in partition.patient_ids and (label_filter is None or label_filter(label)):
            out.append((pid, ref, label))
    return out


def build_victim_set(
    candidates: Sequence[tuple[str, str]],
    disease_model,
    identity_model,
    image_loader: Callable[[str], np.ndarray],
) -> VictimSet:
    """Keep candidates that screen as non-disease and as the correct patient.

    ``candidates`` are (patient_id, image_ref) pairs of non-disease images
    from the evaluation partition; both models must be the evaluation-side
    classifiers. Non-disease means disease probability < 0.5; identity passes
    when the argmax patient matches.
    """
    from .classifiers import predict_disease, predict_identity

    if not candidates:
        raise ValidationError("no victim candidates supplied")
    kept = []
    for patient_id, ref in candidates:
        img = image_loader(ref)
        if predict_disease(disease_model, img) >= 0.5:
            continue
        predicted, _ = predict_identity(identity_model, img)
        if predicted == patient_id:
            kept.append((patient_id, ref))
    if not kept:
        raise ValidationError("no victims survived classifier screening")
    return VictimSet(tuple(kept))


def augment(image: np.ndarray, spec: AugmentationSpec, seed: int) -> list[np.ndarray]:
    """Produce ``target_count_per_patient`` variants; index 0 is the original.

    Each variant draws its own rotation angle (uniform over +/-rotation_range)
    and blur strength (uniform over (0, blur_sigma]); a fixed seed fixes the
    whole set.
    """
    validate_image(image)
    out = [image]
    for j in range(1, spec.target_count_per_patient):
        rng = derive_rng(seed, "augment", j)
        variant = image.astype(np.float32)
        if "random_rotation" in spec.ops:
            angle = float(rng.uniform(-spec.rotation_range, spec.rotation_range))
            variant = np.stack(
                [
                    ndimage.rotate(ch, angle, reshape=False, order=1, mode="nearest")
                    for ch in variant
                ]
            )
        if "gaussian_blur" in spec.ops:
            sigma = float(rng.uniform(0.0, spec.blur_sigma))
            variant = np.stack([ndimage.gaussian_filter(ch, sigma=sigma) for ch in variant])
        out.append(np.clip(variant, -1.0, 1.0).astype(np.float32))
    return out


def upsample_minority(images_by_class: dict[str, list]) -> dict[str, list]:
    """Balance classes to the majority count by cyclic repetition; nothing dropped."""
    if not images_by_class:
        raise ValidationError("no classes to balance")
    for name, items in images_by_class.items():
        if not items:
            raise ValidationError(f"class {name!r} is empty")
    target = max(len(items) for items in images_by_class.values())
    balanced = {}
    for name, items in images_by_class.items():
        repeated = list(items)
        i = 0
        while len(repeated) < target:
            repeated.append(items[i % len(items)])
            i += 1
        balanced[name] = repeated
    return balanced


def manifest_loader(manifest: DatasetManifest) -> Callable[[str], np.ndarray]:
    """Image loader resolving refs against the manifest root, with a small cache."""
    cache: dict[str, np.ndarray] = {}

    def load(ref: str) -> np.ndarray:
        if ref not in cache:
            cache[ref] = load_image(manifest.resolve(ref))
        return cache[ref]

    return load


def save_partitions(attack: Partition, evaluation: Partition, path: str | Path) -> None:
    write_json(
        {
            "attack": sorted(attack.patient_ids),
            "evaluation": sorted(evaluation.patient_ids),
        },
        path,
    )


def load_partitions(path: str | Path) -> tuple[Partition, Partition]:
    with open(path, "r", encoding="utf-8") as handle:
        data = json.load(handle)
    attack = Partition("attack", frozenset(data["attack"]))
    evaluation = Partition("evaluation", frozenset(data["evaluation"]))
    assert_disjoint(attack, evaluation)
    return attack, evaluation
