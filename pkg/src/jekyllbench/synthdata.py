"""Deterministic synthetic toy datasets with exact ground truth.

Each patient gets a unique sinusoidal texture (identity signal); diseased
images additionally carry a bright centered ellipse whose intensity encodes
the stage (disease signal). Both signals are recoverable by trivial pixel
statistics, which is what makes the toy runs verifiable: the oracle file
written next to the images records the texture parameters and the exact
marker geometry for every image.

Images of either label may also carry a benign off-center blob (a distractor).
Without it, "bright blob anywhere" perfectly predicts the disease label, and a
translator steered by a pooled-feature classifier learns to paint the blob
wherever it is cheapest instead of at the marker site. The distractor appears
independently of the label and never touches the marker region, so location
is the only thing that separates it from the disease signal.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    DatasetManifest,
    PatientRecord,
    ValidationError,
    derive_rng,
    save_image,
    validate_manifest,
    write_manifest,
)

NON_DISEASE_LABEL = "non-disease"


@dataclass(frozen=True)
class ToySpec:
    n_patients: int
    images_per_patient: int
    resolution: int = 64
    stage_levels: tuple[float, ...] = (0.5, 0.9)  # additive marker peak per stage
    color: bool = False
    texture_amplitude: float = 0.2
    noise_sigma: float = 0.04
    marker_semiaxes: tuple[float, float] = (0.18, 0.24)  # fractions of (H, W)
    distractor_rate: float = 0.5
    distractor_intensity: float = 0.45

    def __post_init__(self) -> None:
        if self.n_patients < 1 or self.images_per_patient < 2:
            raise ValidationError("need >= 1 patient and >= 2 images per patient")
        if self.resolution < 8:
            raise ValidationError(f"resolution too small: {self.resolution}")
        if any(b <= a for a, b in zip(self.stage_levels, self.stage_levels[1:])):
            raise ValidationError("stage_levels must be strictly increasing")
        if not self.stage_levels or min(self.stage_levels) <= 0:
            raise ValidationError("stage_levels must be positive")
        if not 0.0 <= self.distractor_rate <= 1.0:
            raise ValidationError("distractor_rate must lie in [0, 1]")

    @property
    def stage_labels(self) -> tuple[str, ...]:
        return tuple(f"disease-s{i + 1}" for i in range(len(self.stage_levels)))

    @property
    def vocabulary(self) -> tuple[str, ...]:
        return (NON_DISEASE_LABEL,) + self.stage_labels


def _patient_params(spec: ToySpec, seed: int, k: int) -> dict:
    rng = derive_rng(seed, "toy-patient", k)
    return {
        "base": float(rng.uniform(-0.55, -0.25)),
        "freq1": float(rng.uniform(2.0, 7.0)),
        "freq2": float(rng.uniform(8.0, 15.0)),
        "theta1": float(rng.uniform(0.0, math.pi)),
        "theta2": float(rng.uniform(0.0, math.pi)),
        "phase1": float(rng.uniform(0.0, 2.0 * math.pi)),
        "phase2": float(rng.uniform(0.0, 2.0 * math.pi)),
        # Red-dominant channel ordering with small per-patient jitter mimics a
        # single imaging modality's tight color signature; identity stays in
        # the texture, not the tint.
        "gains": [
            float(rng.uniform(0.92, 1.0)),
            float(rng.uniform(0.78, 0.86)),
            float(rng.uniform(0.64, 0.72)),
        ],
    }


def _texture(spec: ToySpec, params: dict) -> np.ndarray:
    n = spec.resolution
    rows, cols = np.meshgrid(np.linspace(0.0, 1.0, n), np.linspace(0.0, 1.0, n), indexing="ij")
    waves = np.zeros((n, n), dtype=np.float64)
    for f, theta, phase in (
        (params["freq1"], params["theta1"], params["phase1"]),
        (params["freq2"], params["theta2"], params["phase2"]),
    ):
        axis = cols * math.cos(theta) + rows * math.sin(theta)
        waves += 0.5 * np.sin(2.0 * math.pi * f * axis + phase)
    return params["base"] + spec.texture_amplitude * waves


def _marker(spec: ToySpec, intensity: float, scale: float) -> tuple[np.ndarray, list[int]]:
    """Additive ellipse profile max(0, 1 - rho^2) and its half-open bbox."""
    n = spec.resolution
    cy = cx = (n - 1) / 2.0
    ay = spec.marker_semiaxes[0] * n * scale
    ax = spec.marker_semiaxes[1] * n * scale
    rows, cols = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    rho2 = ((rows - cy) / ay) ** 2 + ((cols - cx) / ax) ** 2
    profile = intensity * np.clip(1.0 - rho2, 0.0, 1.0)
    bbox = [
        int(math.floor(cy - ay)),
        int(math.floor(cx - ax)),
        int(math.ceil(cy + ay)) + 1,
        int(math.ceil(cx + ax)) + 1,
    ]
    return profile, bbox


def _distractor(spec: ToySpec, rng: np.random.Generator) -> np.ndarray | None:
    """Benign circular blob placed clear of the worst-case marker bbox."""
    n = spec.resolution
    radius = float(n * rng.uniform(0.07, 0.10))
    _, guard = _marker(spec, 1.0, 1.1)
    for _ in range(50):
        cy, cx = rng.uniform(radius, n - 1 - radius, size=2)
        clear = (
            cy + radius < guard[0]
            or cy - radius >= guard[2]
            or cx + radius < guard[1]
            or cx - radius >= guard[3]
        )
        if clear:
            rows, cols = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
            rho2 = ((rows - cy) ** 2 + (cols - cx) ** 2) / radius**2
            level = spec.distractor_intensity * float(rng.uniform(0.8, 1.2))
            return level * np.clip(1.0 - rho2, 0.0, 1.0)
    return None  # no room at this resolution


def render_image(spec: ToySpec, seed: int, patient: int, index: int, stage: int) -> tuple[np.ndarray, list[int] | None]:
    """Render one toy image. ``stage`` 0 means non-disease; returns (image, bbox)."""
    params = _patient_params(spec, seed, patient)
    rng = derive_rng(seed, "toy-image", patient, index)
    field_ = _texture(spec, params)
    field_ = field_ + rng.uniform(-0.04, 0.04)  # per-image exposure jitter
    bbox = None
    if stage > 0:
        profile, bbox = _marker(spec, spec.stage_levels[stage - 1], float(rng.uniform(0.9, 1.1)))
        field_ = field_ + profile
    drng = derive_rng(seed, "toy-distractor", patient, index)
    if drng.uniform() < spec.distractor_rate:
        blob = _distractor(spec, drng)
        if blob is not None:
            field_ = field_ + blob
    field_ = field_ + rng.normal(0.0, spec.noise_sigma, size=field_.shape)
    gray = np.clip(field_, -1.0, 1.0)
    if not spec.color:
        return gray[None, :, :].astype(np.float32), bbox
    unit = (gray + 1.0) / 2.0
    channels = np.stack([unit * g for g in params["gains"]], axis=0)
    return (channels * 2.0 - 1.0).astype(np.float32), bbox


def _stage_for_index(spec: ToySpec, index: int) -> int:
    """First half of a patient's images are non-disease, rest cycle the stages."""
    half = spec.images_per_patient // 2
    if index < half:
        return 0
    return (index - half) % len(spec.stage_levels) + 1


def generate_toy_dataset(spec: ToySpec, seed: int, out_dir: str | Path) -> tuple[DatasetManifest, Path]:
    """Write images + manifest.jsonl + oracle.jsonl under ``out_dir``.

    Fully determined by (spec, seed): regenerating yields byte-identical files.
    """
    out_dir = Path(out_dir)
    records = []
    oracle_lines = []
    patients_meta = {}
    for k in range(spec.n_patients):
        patient_id = f"p{k:04d}"
        patients_meta[patient_id] = _patient_params(spec, seed, k)
        refs, labels = [], []
        for i in range(spec.images_per_patient):
            stage = _stage_for_index(spec, i)
            img, bbox = render_image(spec, seed, k, i, stage)
            ref = f"images/{patient_id}/i{i:04d}.png"
            save_image(img, out_dir / ref)
            label = NON_DISEASE_LABEL if stage == 0 else spec.stage_labels[stage - 1]
            refs.append(ref)
            labels.append(label)
            oracle_lines.append(
                {"path": ref, "patient_id": patient_id, "label": label, "marker_bbox": bbox, "stage": stage}
            )
        records.append(PatientRecord(patient_id, tuple(refs), tuple(labels)))
    manifest = DatasetManifest(tuple(records), spec.vocabulary, spec.resolution, root=out_dir)
    violations = validate_manifest(manifest)
    if violations:
        raise ValidationError("generated manifest is invalid", violations)
    write_manifest(manifest, out_dir / "manifest.jsonl")
    oracle_path = out_dir / "oracle.jsonl"
    with open(oracle_path, "w", encoding="utf-8") as out:
        header = {"patients": patients_meta, "stage_levels": list(spec.stage_levels), "color": spec.color}
        out.write(json.dumps(header, sort_keys=True) + "\n")
        for line in oracle_lines:
            out.write(json.dumps(line, sort_keys=True) + "\n")
    return manifest, oracle_path


@dataclass
class ToyOracle:
    """Ground-truth lookup for images produced by :func:`generate_toy_dataset`."""

    patients: dict
    stage_levels: list[float]
    color: bool
    by_path: dict = field(default_factory=dict)

    @staticmethod
    def load(path: str | Path) -> "ToyOracle":
        with open(path, "r", encoding="utf-8") as handle:
            lines = [json.loads(line) for line in handle if line.strip()]
        if not lines or "patients" not in lines[0]:
            raise ValidationError(f"not an oracle file: {path}")
        header = lines[0]
        oracle = ToyOracle(header["patients"], header["stage_levels"], header["color"])
        for entry in lines[1:]:
            oracle.by_path[entry["path"]] = entry
        return oracle

    def classify(self, image_ref: str) -> tuple[str, str]:
        """Exact (label, patient_id) for a generated image; unknown ref is an error."""
        entry = self.by_path.get(image_ref)
        if entry is None:
            raise ValidationError(f"image not in oracle: {image_ref!r}")
        return entry["label"], entry["patient_id"]

    def entry(self, image_ref: str) -> dict:
        entry = self.by_path.get(image_ref)
        if entry is None:
            raise ValidationError(f"image not in oracle: {image_ref!r}")
        return entry


def oracle_classify(oracle: ToyOracle, image_ref: str) -> tuple[str, str]:
    return oracle.classify(image_ref)


def marker_mean_difference(img: np.ndarray, bbox: list[int]) -> float:
    """Mean intensity inside the marker bbox minus outside (grayscale collapse).

    The additive marker makes this statistic a perfect disease detector on
    toy data; tests use it as the independent pixel-statistic oracle.
    """
    gray = img.mean(axis=0)
    r0, c0, r1, c1 = bbox
    mask = np.zeros(gray.shape, dtype=bool)
    mask[max(r0, 0) : r1, max(c0, 0) : c1] = True
    if mask.all() or not mask.any():
        raise ValidationError(f"degenerate marker bbox {bbox} for shape {gray.shape}")
    return float(gray[mask].mean() - gray[~mask].mean())


def default_marker_bbox(resolution: int, semiaxes: tuple[float, float] = (0.18, 0.24)) -> list[int]:
    """Nominal (scale=1) marker bbox for images of the given resolution."""
    cy = cx = (resolution - 1) / 2.0
    ay, ax = semiaxes[0] * resolution, semiaxes[1] * resolution
    return [
        int(math.floor(cy - ay)),
        int(math.floor(cx - ax)),
        int(math.ceil(cy + ay)) + 1,
        int(math.ceil(cx + ax)) + 1,
    ]
