"""Shared domain types, validation, seeding, and image-value conventions.

Every other module builds on the conventions fixed here:

* images are float32 arrays of shape (C, H, W) with C in {1, 3} and values
  in [-1, 1] (the generator ends in tanh, so the whole pipeline adopts that
  range);
* grayscale data is stored single-channel and replicated to three channels
  only at model boundaries;
* randomness flows from a single integer seed through derived per-item
  generators so work can be parallelized without changing results.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import torch
from PIL import Image


class ValidationError(ValueError):
    """Invalid input or configuration. CLI maps this to exit code 1."""

    def __init__(self, message: str, violations: Sequence[str] = ()):
        super().__init__(message)
        self.violations = list(violations)


# --------------------------------------------------------------------------
# Image values


def from_uint8(pixels: np.ndarray) -> np.ndarray:
    """Map 8-bit pixels p in [0, 255] to float32 values 2p/255 - 1."""
    return (pixels.astype(np.float32) * (2.0 / 255.0)) - 1.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Inverse of :func:`from_uint8`, clipping and rounding to the nearest level."""
    levels = (np.clip(img, -1.0, 1.0) + 1.0) * (255.0 / 2.0)
    return np.rint(levels).astype(np.uint8)


def validate_image(img: np.ndarray, *, what: str = "image") -> np.ndarray:
    """Check the (C, H, W) / range / channel-count invariants. Returns ``img``."""
    if not isinstance(img, np.ndarray):
        raise ValidationError(f"{what}: expected numpy array, got {type(img).__name__}")
    if img.ndim != 3:
        raise ValidationError(f"{what}: expected (C, H, W), got shape {img.shape}")
    channels, height, width = img.shape
    if channels not in (1, 3):
        raise ValidationError(f"{what}: channel count must be 1 or 3, got {channels}")
    if height <= 0 or width <= 0:
        raise ValidationError(f"{what}: non-positive spatial size {img.shape}")
    if not np.issubdtype(img.dtype, np.floating):
        raise ValidationError(f"{what}: expected float dtype, got {img.dtype}")
    # tanh outputs touch +/-1 exactly; leave a hair of float slack beyond that
    if img.size and (img.min() < -1.0 - 1e-6 or img.max() > 1.0 + 1e-6):
        raise ValidationError(
            f"{what}: values outside [-1, 1] (min {img.min():.4f}, max {img.max():.4f})"
        )
    return img


def replicate_channels(img: np.ndarray) -> np.ndarray:
    """Return a 3-channel view of a (1, H, W) image; pass 3-channel input through."""
    if img.shape[0] == 3:
        return img
    if img.shape[0] == 1:
        return np.repeat(img, 3, axis=0)
    raise ValidationError(f"cannot replicate {img.shape[0]}-channel image to RGB")


def load_image(path: str | Path) -> np.ndarray:
    """Read an 8-bit PNG/JPEG into a normalized (C, H, W) float32 array."""
    with Image.open(path) as handle:
        if handle.mode not in ("L", "RGB"):
            handle = handle.convert("RGB" if len(handle.getbands()) > 1 else "L")
        pixels = np.asarray(handle)
    if pixels.ndim == 2:
        pixels = pixels[None, :, :]
    else:
        pixels = pixels.transpose(2, 0, 1)
    return from_uint8(pixels)


def save_image(img: np.ndarray, path: str | Path) -> None:
    validate_image(img)
    pixels = to_uint8(img)
    if pixels.shape[0] == 1:
        pil = Image.fromarray(pixels[0], mode="L")
    else:
        pil = Image.fromarray(pixels.transpose(1, 2, 0), mode="RGB")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    pil.save(path)


# --------------------------------------------------------------------------
# Dataset records


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    image_refs: tuple[str, ...]
    labels: tuple[str, ...]


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[PatientRecord, ...]
    condition_vocabulary: tuple[str, ...]
    image_resolution: int
    root: Path = Path(".")

    def iter_images(self) -> Iterator[tuple[str, str, str]]:
        """Yield (patient_id, image_ref, label) over all records in manifest order."""
        for record in self.records:
            for ref, label in zip(record.image_refs, record.labels):
                yield record.patient_id, ref, label

    def resolve(self, image_ref: str) -> Path:
        return self.root / image_ref

    @property
    def patient_ids(self) -> tuple[str, ...]:
        return tuple(record.patient_id for record in self.records)


def validate_manifest(manifest: DatasetManifest) -> list[str]:
    """Return a list of invariant violations, empty iff the manifest is sound."""
    violations: list[str] = []
    if manifest.image_resolution <= 0:
        violations.append(f"resolution must be positive, got {manifest.image_resolution}")
    vocabulary = set(manifest.condition_vocabulary)
    if len(vocabulary) != len(manifest.condition_vocabulary):
        violations.append("condition vocabulary contains duplicates")
    seen: set[str] = set()
    for record in manifest.records:
        who = f"patient {record.patient_id!r}"
        if not record.patient_id:
            violations.append("record with empty patient_id")
        if record.patient_id in seen:
            violations.append(f"duplicate patient_id {record.patient_id!r}")
        seen.add(record.patient_id)
        if not record.image_refs:
            violations.append(f"{who}: no images")
        if len(record.labels) != len(record.image_refs):
            violations.append(f"{who}: {len(record.image_refs)} images but {len(record.labels)} labels")
        for label in record.labels:
            if label not in vocabulary:
                violations.append(f"{who}: unknown label {label!r}")
    return violations


MANIFEST_HEADER_KEYS = ("vocabulary", "resolution")


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Serialize to JSONL: a header object followed by one object per image."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as out:
        header = {
            "vocabulary": list(manifest.condition_vocabulary),
            "resolution": manifest.image_resolution,
        }
        out.write(json.dumps(header, sort_keys=True) + "\n")
        for patient_id, ref, label in manifest.iter_images():
            line = {"path": ref, "patient_id": patient_id, "label": label}
            out.write(json.dumps(line, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# Partitions

PARTITION_NAMES = ("attack", "evaluation")


@dataclass(frozen=True)
class Partition:
    name: str
    patient_ids: frozenset[str]

    def __post_init__(self) -> None:
        if self.name not in PARTITION_NAMES:
            raise ValidationError(f"partition name must be one of {PARTITION_NAMES}, got {self.name!r}")


def assert_disjoint(attack: Partition, evaluation: Partition) -> None:
    """Patient-level disjointness is load-bearing; check it on every split."""
    overlap = attack.patient_ids & evaluation.patient_ids
    if overlap:
        raise ValidationError(
            f"partitions share {len(overlap)} patients, e.g. {sorted(overlap)[:3]}"
        )


# --------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class LossWeights:
    lambda_adv: float
    lambda_disease: float
    lambda_identity: float
    lambda_cycle: float

    def __post_init__(self) -> None:
        for name, value in dataclasses.asdict(self).items():
            if value < 0:
                raise ValidationError(f"{name} must be nonnegative, got {value}")

    def as_dict(self) -> dict[str, float]:
        return dataclasses.asdict(self)


# Published per-condition weight presets; "effusion" has no published row and
# reuses the cardiomegaly weights. "toy" is tuned for the 64x64 synthetic runs.
WEIGHT_PRESETS: dict[str, LossWeights] = {
    "cardiomegaly": LossWeights(20.0, 50.0, 25.0, 200.0),
    "effusion": LossWeights(20.0, 50.0, 25.0, 200.0),
    "severe_dr": LossWeights(5.0, 5.0, 20.0, 200.0),
    "proliferative_dr": LossWeights(5.0, 10.0, 20.0, 200.0),
    "toy": LossWeights(10.0, 10.0, 20.0, 100.0),
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Knobs for one translation-model training run."""

    seed: int = 0
    loss_weights: LossWeights = field(default_factory=lambda: WEIGHT_PRESETS["cardiomegaly"])
    epochs_constant: int = 100
    epochs_decay: int = 100
    batch_size: int = 1
    learning_rate: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    deterministic_mode: bool = False

    image_size: int = 256
    image_channels: int = 1
    generator_base_width: int = 64
    discriminator_base_width: int = 64
    residual_blocks: int = 9
    steps_per_epoch: int | None = None  # None = one pass over min(|X|, |Y|)
    adversarial_convention: str = "standard_lsgan"  # or "as_written"
    identity_second_term: str = "translation"  # or "input"
    use_image_buffer: bool = True
    image_buffer_size: int = 50
    checkpoint_every: int = 1

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValidationError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        for name in ("adam_beta1", "adam_beta2"):
            beta = getattr(self, name)
            if not 0.0 < beta < 1.0:
                raise ValidationError(f"{name} must lie in (0, 1), got {beta}")
        if self.epochs_constant < 0 or self.epochs_decay < 0:
            raise ValidationError("epoch counts must be nonnegative")
        if self.adversarial_convention not in ("standard_lsgan", "as_written"):
            raise ValidationError(f"unknown adversarial convention {self.adversarial_convention!r}")
        if self.identity_second_term not in ("translation", "input"):
            raise ValidationError(f"identity_second_term must be 'translation' or 'input'")

    def to_dict(self) -> dict:
        data = dataclasses.asdict(self)
        data["loss_weights"] = self.loss_weights.as_dict()
        return data

    @staticmethod
    def from_dict(data: dict) -> "ExperimentConfig":
        data = dict(data)
        weights = data.pop("loss_weights", None)
        if isinstance(weights, dict):
            data["loss_weights"] = LossWeights(**weights)
        elif isinstance(weights, str):
            data["loss_weights"] = WEIGHT_PRESETS[weights]
        known = {f.name for f in dataclasses.fields(ExperimentConfig)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return ExperimentConfig(**data)


def config_hash(payload: dict) -> str:
    """SHA-256 over the canonical JSON form of a config mapping."""
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# --------------------------------------------------------------------------
# Seeding


def seed_everything(seed: int, deterministic: bool = False) -> np.random.Generator:
    """Seed python/numpy/torch RNGs; returns a numpy Generator for local draws.

    With ``deterministic=True``, torch is additionally pinned to deterministic
    kernels and a single thread so repeated runs are bitwise repeatable.
    """
    if seed < 0:
        raise ValidationError(f"seed must be nonnegative, got {seed}")
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
    return np.random.default_rng(seed)


def stable_int(token: str) -> int:
    """Map a string to a stable 63-bit integer (for seed derivation)."""
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def derive_rng(seed: int, *keys: int | str) -> np.random.Generator:
    """Per-item generator: same (seed, keys) always yields the same stream."""
    material = [seed] + [stable_int(k) if isinstance(k, str) else int(k) for k in keys]
    return np.random.default_rng(material)


def write_json(payload: dict, path: str | Path) -> None:
    """Write reproducible JSON: sorted keys, trailing newline, no timestamps."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as out:
        json.dump(payload, out, sort_keys=True, indent=2)
        out.write("\n")


def read_json(path: str | Path) -> dict:
    with open(path, "r", encoding="utf-8") as handle:
        return json.load(handle)
