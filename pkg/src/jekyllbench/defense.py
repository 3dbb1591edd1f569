"""Fake-image defenses: blind color-statistics detector and supervised MesoNet.

The blind path never sees a fake: a one-class SVM learns the color statistics
of real images (HSV and YCbCr channel histograms and moments) and flags
anomalies. The supervised path is a small mesoscopic CNN trained on labeled
real/fake images with patient-disjoint train and test sets.
"""

from __future__ import annotations

import json
import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from matplotlib.colors import rgb_to_hsv
from sklearn.model_selection import KFold
from sklearn.svm import OneClassSVM
from torch import nn

from .core import ValidationError, derive_rng, write_json
from .ingest import upsample_minority

HIST_BINS = 32
CSD_CHANNELS = ("H", "S", "V", "Cb", "Cr")
CSD_DIM = len(CSD_CHANNELS) * (HIST_BINS + 2)


# --------------------------------------------------------------------------
# Color-statistics features


def rgb_to_ycbcr(unit_rgb: np.ndarray) -> np.ndarray:
    """Full-range BT.601 conversion of an (H, W, 3) array in [0, 1]."""
    r, g, b = unit_rgb[..., 0], unit_rgb[..., 1], unit_rgb[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = 0.5 + (b - y) / 1.772
    cr = 0.5 + (r - y) / 1.402
    return np.stack([y, cb, cr], axis=-1)


def csd_features(image: np.ndarray) -> np.ndarray:
    """170-dim color-disparity features of a (3, H, W) image in [-1, 1].

    Per channel of {H, S, V, Cb, Cr}: a 32-bin normalized histogram over
    [0, 1] plus mean and variance. Grayscale input is rejected; the method
    needs color information.
    """
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValidationError("color-statistics features require a 3-channel color image")
    unit = np.clip((image.astype(np.float64) + 1.0) / 2.0, 0.0, 1.0).transpose(1, 2, 0)
    hsv = rgb_to_hsv(unit)
    ycbcr = rgb_to_ycbcr(unit)
    planes = [hsv[..., 0], hsv[..., 1], hsv[..., 2], ycbcr[..., 1], ycbcr[..., 2]]
    features: list[np.ndarray] = []
    for plane in planes:
        flat = np.clip(plane.ravel(), 0.0, 1.0)
        hist, _ = np.histogram(flat, bins=HIST_BINS, range=(0.0, 1.0))
        features.append(hist / flat.size)
        features.append(np.array([flat.mean(), flat.var()]))
    vector = np.concatenate(features)
    assert vector.shape == (CSD_DIM,)
    if not np.isfinite(vector).all():
        raise ValidationError("non-finite color-statistics features")
    return vector


# --------------------------------------------------------------------------
# Blind detector


@dataclass(frozen=True)
class BlindDetectorConfig:
    nu: float = 0.12
    gamma: float = 0.1
    kernel: str = "rbf"

    def __post_init__(self) -> None:
        if not 0.0 < self.nu <= 1.0:
            raise ValidationError(f"nu must lie in (0, 1], got {self.nu}")
        if self.gamma <= 0:
            raise ValidationError(f"gamma must be positive, got {self.gamma}")


@dataclass
class DetectorModel:
    kind: str  # "blind_csd_svm" or "supervised_mesonet"
    model: object
    threshold: float = 0.5
    metadata: dict = field(default_factory=dict)


def train_blind_detector(real_images: Sequence[np.ndarray], config: BlindDetectorConfig) -> DetectorModel:
    """Fit the one-class SVM on real-image color statistics only.

    nu upper-bounds the training anomaly fraction; the achieved fraction is
    recorded in the metadata so callers can check the bound held.
    """
    if len(real_images) < 20:
        raise ValidationError(f"need at least 20 real images, got {len(real_images)}")
    matrix = np.stack([csd_features(img) for img in real_images])
    if float(matrix.var(axis=0).sum()) == 0.0:
        raise ValidationError("degenerate features: zero variance across training images")
    svm = OneClassSVM(kernel=config.kernel, nu=config.nu, gamma=config.gamma)
    svm.fit(matrix)
    anomaly_fraction = float(np.mean(svm.predict(matrix) == -1))
    return DetectorModel(
        kind="blind_csd_svm",
        model=svm,
        metadata={
            "nu": config.nu,
            "gamma": config.gamma,
            "kernel": config.kernel,
            "n_train": len(real_images),
            "train_anomaly_fraction": anomaly_fraction,
        },
    )


def blind_detect(model: DetectorModel, image: np.ndarray) -> str:
    """"fake" if the image's color statistics are anomalous, else "real"."""
    if model.kind != "blind_csd_svm":
        raise ValidationError(f"expected a blind detector, got {model.kind}")
    vector = csd_features(image)
    expected = model.model.n_features_in_
    if vector.shape[0] != expected:
        raise ValidationError(f"feature dimension {vector.shape[0]} != model's {expected}")
    return "fake" if model.model.predict(vector[None])[0] == -1 else "real"


def select_blind_hyperparams(
    real_images: Sequence[np.ndarray],
    nus: Sequence[float] = (0.05, 0.12, 0.2),
    gammas: Sequence[float] = (0.01, 0.1, 1.0),
    folds: int = 5,
    seed: int = 0,
) -> BlindDetectorConfig:
    """5-fold cross-validation pick: held-out anomaly rate closest to nu.

    A well-calibrated one-class fit flags about a nu-fraction of unseen real
    images; large deviations mean the kernel width is off.
    """
    if len(real_images) < folds * 4:
        raise ValidationError(f"need at least {folds * 4} images for {folds}-fold selection")
    matrix = np.stack([csd_features(img) for img in real_images])
    splitter = KFold(n_splits=folds, shuffle=True, random_state=seed)
    best: tuple[float, float, float] | None = None  # (score, nu, gamma)
    for nu in sorted(nus):
        for gamma in sorted(gammas):
            rates = []
            for train_idx, test_idx in splitter.split(matrix):
                svm = OneClassSVM(kernel="rbf", nu=nu, gamma=gamma)
                svm.fit(matrix[train_idx])
                rates.append(float(np.mean(svm.predict(matrix[test_idx]) == -1)))
            score = abs(float(np.mean(rates)) - nu)
            if best is None or score < best[0]:
                best = (score, nu, gamma)
    return BlindDetectorConfig(nu=best[1], gamma=best[2])


# --------------------------------------------------------------------------
# Supervised detector (mesoscopic CNN)


class InceptionBlock(nn.Module):
    """Concatenated 1x1, 3x3, and dilated-3x3 branches, then norm and 2x2 pooling.

    GroupNorm instead of batch statistics keeps eval-mode behaviour identical
    to training on the small detector training sets used here.
    """

    def __init__(self, cin: int, widths: tuple[int, int, int]):
        super().__init__()
        a, b, c = widths
        self.branch1 = nn.Conv2d(cin, a, 1)
        self.branch3 = nn.Sequential(nn.Conv2d(cin, b, 1), nn.ReLU(inplace=True), nn.Conv2d(b, b, 3, padding=1))
        self.branch_dilated = nn.Sequential(
            nn.Conv2d(cin, c, 1), nn.ReLU(inplace=True), nn.Conv2d(c, c, 3, padding=2, dilation=2)
        )
        self.out_channels = a + b + c
        self.norm = nn.GroupNorm(4, self.out_channels)
        self.pool = nn.MaxPool2d(2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        merged = torch.cat([self.branch1(x), self.branch3(x), self.branch_dilated(x)], dim=1)
        return self.pool(self.norm(F.relu(merged)))


class MesoNet(nn.Module):
    """Four inception blocks, pooled to a fixed grid, dense(16) head, one logit.

    The adaptive pooling before the head makes the network resolution
    independent; any input at least 16 pixels on a side produces one score.
    """

    GRID = 4

    def __init__(self, in_channels: int = 3):
        super().__init__()
        widths = [(2, 4, 2), (4, 8, 4), (8, 16, 8), (8, 16, 8)]
        blocks = []
        cin = in_channels
        for w in widths:
            block = InceptionBlock(cin, w)
            blocks.append(block)
            cin = block.out_channels
        self.blocks = nn.Sequential(*blocks)
        self.head = nn.Sequential(
            nn.Flatten(),
            nn.Linear(cin * self.GRID * self.GRID, 16),
            nn.ReLU(inplace=True),
            nn.Dropout(0.5),
            nn.Linear(16, 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        feats = self.blocks(x)
        pooled = F.adaptive_avg_pool2d(feats, self.GRID)
        return self.head(pooled).squeeze(1)


def build_mesonet(in_channels: int = 3) -> DetectorModel:
    net = MesoNet(in_channels)
    n_params = sum(p.numel() for p in net.parameters())
    return DetectorModel(kind="supervised_mesonet", model=net, metadata={"n_parameters": n_params})


@dataclass(frozen=True)
class DetectorRecipe:
    epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 1e-3


def _patients(items: Sequence[tuple[np.ndarray, str]]) -> set[str]:
    return {pid for _, pid in items}


def train_supervised_detector(
    train_real: Sequence[tuple[np.ndarray, str]],
    train_fake: Sequence[tuple[np.ndarray, str]],
    test_real: Sequence[tuple[np.ndarray, str]],
    test_fake: Sequence[tuple[np.ndarray, str]],
    recipe: DetectorRecipe,
    seed: int,
) -> tuple[DetectorModel, dict]:
    """Train MesoNet on labeled (image, patient_id) pairs; fake is the positive class.

    Train and test patients must not overlap; that's a hard error, not a
    warning. Training classes are balanced by repeating the minority side.
    Returns the detector and its test metrics.
    """
    if not (train_real and train_fake and test_real and test_fake):
        raise ValidationError("all four image sets must be non-empty")
    overlap = (_patients(train_real) | _patients(train_fake)) & (_patients(test_real) | _patients(test_fake))
    if overlap:
        raise ValidationError(f"train/test patients overlap: {sorted(overlap)[:3]}")
    balanced = upsample_minority({"real": list(train_real), "fake": list(train_fake)})
    items = [(img, 0.0) for img, _ in balanced["real"]] + [(img, 1.0) for img, _ in balanced["fake"]]

    torch.manual_seed(derive_rng(seed, "mesonet").integers(2**31))
    detector = build_mesonet()
    net: MesoNet = detector.model
    optimizer = torch.optim.Adam(net.parameters(), lr=recipe.learning_rate)
    criterion = nn.BCEWithLogitsLoss()
    for epoch in range(recipe.epochs):
        net.train()
        order = derive_rng(seed, "mesonet-epoch", epoch).permutation(len(items))
        for start in range(0, len(order), recipe.batch_size):
            idx = order[start : start + recipe.batch_size]
            batch = torch.as_tensor(np.stack([items[i][0] for i in idx]).astype(np.float32))
            labels = torch.as_tensor([items[i][1] for i in idx], dtype=torch.float32)
            optimizer.zero_grad()
            loss = criterion(net(batch), labels)
            loss.backward()
            optimizer.step()
    test_items = [(img, "real") for img, _ in test_real] + [(img, "fake") for img, _ in test_fake]
    results = detector_metrics(detector, test_items)
    detector.metadata.update({"seed": seed, "epochs": recipe.epochs, "test_metrics": results})
    return detector, results


def supervised_scores(model: DetectorModel, images: Sequence[np.ndarray], batch_size: int = 64) -> np.ndarray:
    """Fake probability per image from the sigmoid output."""
    if model.kind != "supervised_mesonet":
        raise ValidationError(f"expected a supervised detector, got {model.kind}")
    net: MesoNet = model.model
    net.eval()
    scores = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            batch = torch.as_tensor(np.stack(images[start : start + batch_size]).astype(np.float32))
            scores.append(torch.sigmoid(net(batch)).numpy())
    return np.concatenate(scores) if scores else np.empty(0)


def supervised_detect(model: DetectorModel, image: np.ndarray) -> str:
    return "fake" if float(supervised_scores(model, [image])[0]) >= model.threshold else "real"


def detect(model: DetectorModel, image: np.ndarray) -> str:
    if model.kind == "blind_csd_svm":
        return blind_detect(model, image)
    return supervised_detect(model, image)


def detector_metrics(model: DetectorModel, labeled_items: Sequence[tuple[np.ndarray, str]]) -> dict:
    """Accuracy/precision/recall (percent) with fake as the positive class.

    Precision is reported as 0 when the detector never says "fake".
    """
    if not labeled_items:
        raise ValidationError("empty test set")
    labels = {label for _, label in labeled_items}
    if labels != {"real", "fake"}:
        raise ValidationError(f"test set must contain both classes, got {sorted(labels)}")
    images = [img for img, _ in labeled_items]
    if model.kind == "supervised_mesonet":
        verdicts = ["fake" if s >= model.threshold else "real" for s in supervised_scores(model, images)]
    else:
        verdicts = [blind_detect(model, img) for img in images]
    tp = fp = tn = fn = 0
    for verdict, (_, truth) in zip(verdicts, labeled_items):
        if truth == "fake":
            tp, fn = tp + (verdict == "fake"), fn + (verdict == "real")
        else:
            tn, fp = tn + (verdict == "real"), fp + (verdict == "fake")
    accuracy = 100.0 * (tp + tn) / len(labeled_items)
    precision = 100.0 * tp / (tp + fp) if tp + fp else 0.0
    recall = 100.0 * tp / (tp + fn)
    return {
        "accuracy": accuracy,
        "precision": precision,
        "recall": recall,
        "confusion": {"tp": tp, "fp": fp, "tn": tn, "fn": fn},
    }


def fake_recall(model: DetectorModel, fakes: Sequence[np.ndarray]) -> float:
    """Percentage of a fake-only set the detector flags as fake."""
    if not fakes:
        raise ValidationError("no fakes supplied")
    if model.kind == "supervised_mesonet":
        scores = supervised_scores(model, list(fakes))
        return 100.0 * float(np.mean(scores >= model.threshold))
    return 100.0 * float(np.mean([blind_detect(model, f) == "fake" for f in fakes]))


# --------------------------------------------------------------------------
# Persistence


def save_detector(model: DetectorModel, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if model.kind == "supervised_mesonet":
        torch.save(model.model.state_dict(), directory / "weights.pt")
    else:
        with open(directory / "svm.pkl", "wb") as fh:
            pickle.dump(model.model, fh)
    write_json(
        {"kind": model.kind, "threshold": model.threshold, "metadata": model.metadata},
        directory / "detector.json",
    )


def load_detector(directory: str | Path) -> DetectorModel:
    directory = Path(directory)
    with open(directory / "detector.json", "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta["kind"] == "supervised_mesonet":
        detector = build_mesonet()
        detector.model.load_state_dict(torch.load(directory / "weights.pt", map_location="cpu", weights_only=True))
    else:
        with open(directory / "svm.pkl", "rb") as fh:
            detector = DetectorModel(kind="blind_csd_svm", model=pickle.load(fh))
    detector.threshold = meta["threshold"]
    detector.metadata = meta["metadata"]
    return detector
