"""Attack metrics: injection rate, identity preservation, MS-SSIM, reports."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.ndimage import correlate1d

import jsonschema

from .classifiers import ClassifierHandle, predict_disease_probs, predict_identity_batch
from .core import ValidationError, write_json

# Standard multi-scale SSIM constants: 5 dyadic scales with these weights,
# an 11x11 Gaussian window (sigma 1.5), and stability constants K1/K2.
MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _gaussian_window(size: int = WINDOW_SIZE, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    window = np.exp(-(offsets**2) / (2.0 * sigma**2))
    return window / window.sum()


def _filter_valid(plane: np.ndarray, window: np.ndarray) -> np.ndarray:
    """Separable Gaussian filtering, keeping only fully-covered positions."""
    half = len(window) // 2
    out = correlate1d(plane, window, axis=0, mode="constant")
    out = correlate1d(out, window, axis=1, mode="constant")
    return out[half:-half, half:-half]


def _downsample(plane: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    if h % 2:
        plane = np.concatenate([plane, plane[-1:]], axis=0)
    if w % 2:
        plane = np.concatenate([plane, plane[:, -1:]], axis=1)
    return (plane[0::2, 0::2] + plane[1::2, 0::2] + plane[0::2, 1::2] + plane[1::2, 1::2]) / 4.0


def _ssim_terms(a: np.ndarray, b: np.ndarray, window: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-position luminance and contrast-structure maps for one scale."""
    c1 = K1**2
    c2 = K2**2
    mu_a = _filter_valid(a, window)
    mu_b = _filter_valid(b, window)
    sigma_a = _filter_valid(a * a, window) - mu_a * mu_a
    sigma_b = _filter_valid(b * b, window) - mu_b * mu_b
    sigma_ab = _filter_valid(a * b, window) - mu_a * mu_b
    luminance = (2.0 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1)
    cs = (2.0 * sigma_ab + c2) / (sigma_a + sigma_b + c2)
    return luminance, cs


def usable_scales(height: int, width: int, max_scales: int = len(MSSSIM_WEIGHTS)) -> int:
    """How many dyadic scales keep the smaller side at least one window wide."""
    scales = 0
    side = min(height, width)
    while scales < max_scales and side >= WINDOW_SIZE:
        scales += 1
        side //= 2
    return scales


def _mssim_single_channel(a: np.ndarray, b: np.ndarray, scales: int, weights: np.ndarray) -> float:
    window = _gaussian_window()
    score = 1.0
    for scale in range(scales):
        luminance, cs = _ssim_terms(a, b, window)
        if scale < scales - 1:
            term = float(np.mean(cs))
            a, b = _downsample(a), _downsample(b)
        else:
            term = float(np.mean(luminance * cs))
        score *= max(term, 0.0) ** weights[scale]
    return score


def mssim(image_a: np.ndarray, image_b: np.ndarray, max_scales: int = len(MSSSIM_WEIGHTS)) -> float:
    """Multi-scale structural similarity of two [-1, 1] images, in [0, 1].

    Symmetric in its arguments and exactly 1 for identical inputs. Images too
    small for five scales automatically use fewer (with the weight vector
    truncated and renormalized); anything narrower than the 11-pixel window
    is an error. Color images average the per-channel scores.
    """
    if image_a.shape != image_b.shape:
        raise ValidationError(f"shape mismatch {image_a.shape} vs {image_b.shape}")
    if image_a.ndim != 3:
        raise ValidationError(f"expected (C, H, W) images, got {image_a.shape}")
    _, height, width = image_a.shape
    scales = usable_scales(height, width, max_scales)
    if scales < 1:
        raise ValidationError(
            f"image {height}x{width} is smaller than the {WINDOW_SIZE}x{WINDOW_SIZE} window"
        )
    weights = np.asarray(MSSSIM_WEIGHTS[:scales], dtype=np.float64)
    weights = weights / weights.sum()
    unit_a = (image_a.astype(np.float64) + 1.0) / 2.0
    unit_b = (image_b.astype(np.float64) + 1.0) / 2.0
    per_channel = [
        _mssim_single_channel(unit_a[c], unit_b[c], scales, weights) for c in range(image_a.shape[0])
    ]
    return float(np.mean(per_channel))


def mssim_cohort(
    real_a: Sequence[np.ndarray],
    real_b: Sequence[np.ndarray],
    fakes: Sequence[np.ndarray],
    pairing_seed: int,
    n_pairs: int | None = None,
) -> dict:
    """Average MS-SSIM over seeded random pairings: real-vs-real and real-vs-fake.

    Pair count defaults to the smaller set size of each comparison and is
    reported alongside the scores.
    """
    if not real_a or not real_b or not fakes:
        raise ValidationError("cohort sets must all be non-empty")
    rng = np.random.default_rng(pairing_seed)

    def paired_mean(left: Sequence[np.ndarray], right: Sequence[np.ndarray]) -> tuple[float, int]:
        count = min(len(left), len(right)) if n_pairs is None else min(n_pairs, len(left), len(right))
        li = rng.permutation(len(left))[:count]
        ri = rng.permutation(len(right))[:count]
        return float(np.mean([mssim(left[i], right[j]) for i, j in zip(li, ri)])), count

    real_real, n_rr = paired_mean(real_a, real_b)
    real_fake, n_rf = paired_mean(real_a, fakes)
    return {
        "real_real": real_real,
        "real_fake": real_fake,
        "pairs_real_real": n_rr,
        "pairs_real_fake": n_rf,
    }


# --------------------------------------------------------------------------
# Attack-success rates


def disease_verdicts(
    eval_disease_model: ClassifierHandle, fakes: Sequence[np.ndarray], threshold: float = 0.5
) -> list[tuple[float, bool]]:
    if not fakes:
        raise ValidationError("no fakes to evaluate")
    probs = predict_disease_probs(eval_disease_model, list(fakes))
    return [(float(p), bool(p >= threshold)) for p in probs]


def injection_rate(
    eval_disease_model: ClassifierHandle, fakes: Sequence[np.ndarray], threshold: float = 0.5
) -> float:
    """Percentage of fakes the evaluation disease classifier calls diseased."""
    verdicts = disease_verdicts(eval_disease_model, fakes, threshold)
    return 100.0 * sum(hit for _, hit in verdicts) / len(verdicts)


def identity_verdicts(
    eval_identity_model: ClassifierHandle, fakes: Sequence[np.ndarray], true_ids: Sequence[str]
) -> list[tuple[str, bool]]:
    if len(fakes) != len(true_ids):
        raise ValidationError("each fake needs its victim's patient_id")
    if not fakes:
        raise ValidationError("no fakes to evaluate")
    known = set(eval_identity_model.class_names)
    unknown = set(true_ids) - known
    if unknown:
        raise ValidationError(f"patient ids not known to the identity model: {sorted(unknown)[:3]}")
    predictions = predict_identity_batch(eval_identity_model, list(fakes))
    return [(pred, pred == truth) for (pred, _), truth in zip(predictions, true_ids)]


def identity_rate(
    eval_identity_model: ClassifierHandle, fakes: Sequence[np.ndarray], true_ids: Sequence[str]
) -> float:
    """Percentage of fakes still assigned to the victim's own patient id."""
    verdicts = identity_verdicts(eval_identity_model, fakes, true_ids)
    return 100.0 * sum(ok for _, ok in verdicts) / len(verdicts)


# --------------------------------------------------------------------------
# Report assembly

REPORT_SCHEMA = {
    "type": "object",
    "required": [
        "r_d",
        "r_i",
        "mssim_real_real",
        "mssim_real_fake",
        "per_image",
        "seed",
        "config_hash",
        "missing",
    ],
    "properties": {
        "r_d": {"type": ["number", "null"], "minimum": 0, "maximum": 100},
        "r_i": {"type": ["number", "null"], "minimum": 0, "maximum": 100},
        "mssim_real_real": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "mssim_real_fake": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "mssim_pairs": {"type": ["integer", "null"]},
        "disease_threshold": {"type": "number"},
        "seed": {"type": "integer"},
        "config_hash": {"type": "string"},
        "missing": {"type": "object", "additionalProperties": {"type": "string"}},
        "per_image": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["image_ref", "patient_id", "disease_prob", "disease_verdict"],
                "properties": {
                    "image_ref": {"type": "string"},
                    "patient_id": {"type": "string"},
                    "disease_prob": {"type": "number"},
                    "disease_verdict": {"type": "boolean"},
                    "predicted_patient": {"type": ["string", "null"]},
                    "identity_correct": {"type": ["boolean", "null"]},
                },
            },
        },
    },
}


def assemble_report(
    per_image: list[dict],
    mssim_scores: dict | None,
    seed: int,
    config_hash: str,
    disease_threshold: float = 0.5,
    missing: dict[str, str] | None = None,
    path=None,
) -> dict:
    """Aggregate per-image verdicts into the persisted evaluation report.

    The aggregates are recomputed from the per-image list here, so the list
    is the source of truth. Unavailable metrics appear as explicit nulls with
    a reason under "missing". Writing is byte-reproducible (sorted keys, no
    timestamps).
    """
    missing = dict(missing or {})
    if per_image:
        r_d = 100.0 * sum(e["disease_verdict"] for e in per_image) / len(per_image)
        with_identity = [e for e in per_image if e.get("identity_correct") is not None]
        if with_identity:
            r_i = 100.0 * sum(e["identity_correct"] for e in with_identity) / len(with_identity)
        else:
            r_i = None
            missing.setdefault("r_i", "no identity verdicts recorded")
    else:
        r_d = r_i = None
        missing.setdefault("r_d", "no fakes evaluated")
        missing.setdefault("r_i", "no fakes evaluated")
    if mssim_scores is None:
        mssim_real_real = mssim_real_fake = mssim_pairs = None
        missing.setdefault("mssim", "cohort scoring was not run")
    else:
        mssim_real_real = mssim_scores["real_real"]
        mssim_real_fake = mssim_scores["real_fake"]
        mssim_pairs = mssim_scores["pairs_real_fake"]
    report = {
        "r_d": r_d,
        "r_i": r_i,
        "mssim_real_real": mssim_real_real,
        "mssim_real_fake": mssim_real_fake,
        "mssim_pairs": mssim_pairs,
        "disease_threshold": disease_threshold,
        "per_image": per_image,
        "seed": seed,
        "config_hash": config_hash,
        "missing": missing,
    }
    jsonschema.validate(report, REPORT_SCHEMA)
    if path is not None:
        write_json(report, path)
    return report


def evaluate_attack(
    fakes: Sequence[np.ndarray],
    fake_refs: Sequence[str],
    true_ids: Sequence[str],
    eval_disease_model: ClassifierHandle,
    eval_identity_model: ClassifierHandle | None,
    mssim_scores: dict | None,
    seed: int,
    config_hash: str,
    disease_threshold: float = 0.5,
    path=None,
) -> dict:
    """Score a batch of fakes and assemble the full report in one call."""
    d_verdicts = disease_verdicts(eval_disease_model, fakes, disease_threshold)
    missing: dict[str, str] = {}
    if eval_identity_model is not None:
        i_verdicts = identity_verdicts(eval_identity_model, fakes, true_ids)
    else:
        i_verdicts = [(None, None)] * len(fakes)
        missing["r_i"] = "no identity model supplied"
    per_image = [
        {
            "image_ref": ref,
            "patient_id": pid,
            "disease_prob": prob,
            "disease_verdict": hit,
            "predicted_patient": pred,
            "identity_correct": ok,
        }
        for ref, pid, (prob, hit), (pred, ok) in zip(fake_refs, true_ids, d_verdicts, i_verdicts)
    ]
    return assemble_report(
        per_image, mssim_scores, seed, config_hash, disease_threshold, missing, path
    )
