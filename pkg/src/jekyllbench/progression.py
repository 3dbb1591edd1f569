"""Multi-stage attack tooling: interpolation, masked blending, progression curves."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .classifiers import ClassifierHandle, predict_disease
from .core import ValidationError, validate_image
from .translator import TranslationModel, translate


@dataclass(frozen=True)
class InterpolationSpec:
    alphas: tuple[float, ...]
    mask: np.ndarray | None = None

    def __post_init__(self) -> None:
        if any(not 0.0 <= a <= 1.0 for a in self.alphas):
            raise ValidationError("alphas must lie in [0, 1]")
        if any(b < a for a, b in zip(self.alphas, self.alphas[1:])):
            raise ValidationError("alphas must be sorted ascending")
        if self.mask is not None and (self.mask.min() < 0.0 or self.mask.max() > 1.0):
            raise ValidationError("mask values must lie in [0, 1]")


@dataclass(frozen=True)
class StageRegistry:
    """Severity-ordered translation models, one per disease stage."""

    stages: tuple[tuple[str, TranslationModel], ...]

    def __post_init__(self) -> None:
        if not self.stages:
            raise ValidationError("registry needs at least one stage")
        names = [name for name, _ in self.stages]
        if len(set(names)) != len(names):
            raise ValidationError("duplicate stage names")

    @property
    def stage_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.stages)

    def model_for(self, stage_name: str) -> TranslationModel:
        for name, model in self.stages:
            if name == stage_name:
                return model
        raise ValidationError(f"unknown stage {stage_name!r}, have {list(self.stage_names)}")


def interpolate_stage(i_nd: np.ndarray, i_d: np.ndarray, alpha: float) -> np.ndarray:
    """Convex blend alpha*I_d + (1-alpha)*I_nd; exact at both endpoints."""
    validate_image(i_nd, what="i_nd")
    validate_image(i_d, what="i_d")
    if i_nd.shape != i_d.shape:
        raise ValidationError(f"shape mismatch {i_nd.shape} vs {i_d.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha must lie in [0, 1], got {alpha}")
    alpha = np.float32(alpha)
    return alpha * i_d + (np.float32(1.0) - alpha) * i_nd


def masked_interpolate(i_nd: np.ndarray, i_fake: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-pixel blend: mask=1 keeps the original pixel, mask=0 the fake one.

    Used to restore localized regions (e.g. a watermark) after translation.
    The mask may be (H, W), (1, H, W), or full (C, H, W).
    """
    validate_image(i_nd, what="i_nd")
    validate_image(i_fake, what="i_fake")
    if i_nd.shape != i_fake.shape:
        raise ValidationError(f"shape mismatch {i_nd.shape} vs {i_fake.shape}")
    mask = np.asarray(mask, dtype=i_nd.dtype)
    if mask.ndim == 2:
        mask = mask[None]
    if mask.shape not in ((1,) + i_nd.shape[1:], i_nd.shape):
        raise ValidationError(f"mask shape {mask.shape} does not match image {i_nd.shape}")
    if mask.size and (mask.min() < 0.0 or mask.max() > 1.0):
        raise ValidationError("mask values must lie in [0, 1]")
    return mask * i_nd + (np.asarray(1.0, dtype=i_nd.dtype) - mask) * i_fake


def progression_curve(
    eval_disease_model: ClassifierHandle,
    i_nd: np.ndarray,
    i_d: np.ndarray,
    alphas: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0),
    tolerance: float = 0.02,
) -> dict:
    """Disease probability along the blend path, with a monotonicity verdict.

    The verdict is "nondecreasing within tolerance": each step may dip at
    most ``tolerance`` below its predecessor. alphas 0 and 1 reduce exactly to
    the probability of the untouched endpoint images.
    """
    spec = InterpolationSpec(tuple(alphas))
    probabilities = [
        predict_disease(eval_disease_model, interpolate_stage(i_nd, i_d, alpha)) for alpha in spec.alphas
    ]
    monotone = all(b >= a - tolerance for a, b in zip(probabilities, probabilities[1:]))
    return {
        "alphas": list(spec.alphas),
        "probabilities": probabilities,
        "monotone": monotone,
        "tolerance": tolerance,
    }


def stage_translate(registry: StageRegistry, i_nd: np.ndarray, stage_name: str) -> np.ndarray:
    """Translate with the model registered for one named stage."""
    return translate(registry.model_for(stage_name), i_nd, direction="xy")
