"""Disease and identity classifiers, their feature tap, and CAM heatmaps.

Both tasks share one shape of network: a convolutional backbone, global
average pooling, then dense(256) -> dropout(0.5) -> dense(n_classes). The
256-unit layer is deliberately linear so a class activation map can be read
exactly off the composed head weights. The identity network also serves as
the perceptual feature extractor E(.) via a tap on the layer feeding the last
convolutional block.
"""

from __future__ import annotations

import hashlib
import json
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import ValidationError, derive_rng, write_json

TASKS = ("disease", "identity")
PARTITIONS = ("attack", "evaluation")
BACKBONES = ("toycnn", "densenet121")


class _TapNotFound(ValidationError):
    pass


class ClassifierNet(nn.Module):
    """Backbone + GAP + linear-256/dropout/linear head, with a feature tap.

    The tap exposes the activation entering the final conv block; the CAM path
    exposes the final conv feature maps. Input is always 3-channel in [-1, 1];
    single-channel images are replicated by the callers' batch preparation.
    """

    def __init__(self, backbone: str, n_classes: int):
        super().__init__()
        if backbone not in BACKBONES:
            raise ValidationError(f"unknown backbone {backbone!r}, expected one of {BACKBONES}")
        self.backbone_name = backbone
        if backbone == "toycnn":
            def block(cin: int, cout: int, pool: bool) -> nn.Sequential:
                # GroupNorm keeps train and eval behaviour identical, which
                # matters on the small per-partition training sets.
                layers: list[nn.Module] = [
                    nn.Conv2d(cin, cout, 3, padding=1),
                    nn.GroupNorm(8, cout),
                    nn.ReLU(inplace=True),
                ]
                if pool:
                    layers.append(nn.MaxPool2d(2))
                return nn.Sequential(*layers)

            self.features = nn.Sequential(
                OrderedDict(
                    [
                        ("block1", block(3, 32, pool=True)),
                        ("block2", block(32, 64, pool=True)),
                        ("block3", block(64, 96, pool=True)),
                        ("block4", block(96, 128, pool=False)),
                    ]
                )
            )
            self.feature_tap_layer = "block3"
            feat_channels = 128
        else:
            from torchvision.models import densenet121

            net = densenet121(weights=None)
            self.features = net.features
            self.feature_tap_layer = "transition3"
            feat_channels = net.classifier.in_features
        self.fc1 = nn.Linear(feat_channels, 256)
        self.dropout = nn.Dropout(0.5)
        self.fc2 = nn.Linear(256, n_classes)
        tap_module = dict(self.features.named_modules()).get(self.feature_tap_layer)
        if tap_module is None:
            raise _TapNotFound(f"tap layer {self.feature_tap_layer!r} not in backbone")
        self._tap_cache: list[torch.Tensor] = []
        tap_module.register_forward_hook(lambda _m, _i, out: self._tap_cache.append(out))

    def conv_features(self, x: torch.Tensor) -> torch.Tensor:
        out = self.features(x)
        if self.backbone_name == "densenet121":
            out = F.relu(out)
        return out

    def forward_full(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Returns (logits, tap_features, final_conv_features)."""
        self._tap_cache.clear()
        conv = self.conv_features(x)
        if not self._tap_cache:
            raise _TapNotFound("tap hook did not fire")
        tap = self._tap_cache[0]
        self._tap_cache.clear()
        pooled = F.adaptive_avg_pool2d(conv, 1).flatten(1)
        logits = self.fc2(self.dropout(self.fc1(pooled)))
        return logits, tap, conv

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_full(x)[0]

    def effective_head_weights(self, class_index: int) -> torch.Tensor:
        """Per-channel CAM weights: the composed linear head for one class."""
        return self.fc2.weight[class_index] @ self.fc1.weight


@dataclass(frozen=True)
class TrainingRecipe:
    epochs: int
    batch_size: int = 16
    learning_rate: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    frozen_layer_policy: str = "finetune_all"
    freeze_all_but_last_k: int = 70

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if self.frozen_layer_policy not in ("finetune_all", "freeze_all_but_last_K"):
            raise ValidationError(f"unknown frozen_layer_policy {self.frozen_layer_policy!r}")


@dataclass
class ClassifierHandle:
    """A classifier plus the bookkeeping other modules rely on.

    role is "<task>:<partition>"; attack-side models steer training and
    evaluation-side models judge results. class_names maps output indices to
    labels ("non-disease"/"disease") or patient ids. call_counts tracks
    forward passes made through the differentiable helpers, which lets tests
    assert that ablated loss terms never touch a classifier.
    """

    role: str
    net: ClassifierNet
    class_names: tuple[str, ...]
    input_size: int
    trained: bool = False
    metadata: dict = field(default_factory=dict)
    call_counts: dict = field(default_factory=lambda: {"disease": 0, "features": 0})

    @property
    def task(self) -> str:
        return self.role.split(":")[0]

    @property
    def feature_tap_layer(self) -> str:
        return self.net.feature_tap_layer

    def class_index(self, name: str) -> int:
        try:
            return self.class_names.index(name)
        except ValueError:
            raise ValidationError(f"{name!r} is not a class of this {self.role} model") from None


def build_classifier(
    task: str,
    partition: str,
    class_names: Sequence[str],
    backbone: str = "toycnn",
    input_size: int = 64,
) -> ClassifierHandle:
    if task not in TASKS:
        raise ValidationError(f"task must be one of {TASKS}, got {task!r}")
    if partition not in PARTITIONS:
        raise ValidationError(f"partition must be one of {PARTITIONS}, got {partition!r}")
    names = tuple(class_names)
    if task == "disease" and len(names) != 2:
        raise ValidationError(f"disease classifier needs exactly 2 classes, got {len(names)}")
    if len(set(names)) != len(names) or len(names) < 2:
        raise ValidationError("class names must be >= 2 and unique")
    net = ClassifierNet(backbone, len(names))
    return ClassifierHandle(role=f"{task}:{partition}", net=net, class_names=names, input_size=input_size)


def load_pretrained_backbone(handle: ClassifierHandle, path: str | Path) -> None:
    """Initialize backbone weights from a saved feature-extractor state dict."""
    state = torch.load(path, map_location="cpu", weights_only=True)
    handle.net.features.load_state_dict(state)


def prepare_batch(images: Sequence[np.ndarray] | np.ndarray, requires_3ch: bool = True) -> torch.Tensor:
    """Stack (C, H, W) arrays into a float32 batch, replicating gray to RGB."""
    if isinstance(images, np.ndarray) and images.ndim == 3:
        images = [images]
    batch = torch.as_tensor(np.stack([np.asarray(i, dtype=np.float32) for i in images]))
    if requires_3ch and batch.shape[1] == 1:
        batch = batch.expand(-1, 3, -1, -1)
    return batch


def as_model_input(batch: torch.Tensor) -> torch.Tensor:
    """Differentiable gray->RGB replication for tensors already in the graph."""
    if batch.shape[1] == 1:
        return batch.expand(-1, 3, -1, -1)
    return batch


def _parameter_modules(net: nn.Module) -> list[nn.Module]:
    return [m for m in net.modules() if any(True for _ in m.parameters(recurse=False))]


def apply_freeze_policy(net: nn.Module, recipe: TrainingRecipe) -> None:
    if recipe.frozen_layer_policy == "finetune_all":
        for p in net.parameters():
            p.requires_grad_(True)
        return
    modules = _parameter_modules(net)
    cutoff = max(0, len(modules) - recipe.freeze_all_but_last_k)
    for i, module in enumerate(modules):
        for p in module.parameters(recurse=False):
            p.requires_grad_(i >= cutoff)


def train_classifier(
    handle: ClassifierHandle,
    train_items: Sequence[tuple[np.ndarray, int]],
    val_items: Sequence[tuple[np.ndarray, int]],
    recipe: TrainingRecipe,
    seed: int,
) -> float:
    """Train in place and return held-out accuracy in [0, 1].

    Every class must appear in the training items; a zero-epoch recipe leaves
    the weights untouched and just reports validation accuracy.
    """
    present = {label for _, label in train_items}
    missing = set(range(len(handle.class_names))) - present
    if missing:
        names = [handle.class_names[i] for i in sorted(missing)]
        raise ValidationError(f"classes absent from training data: {names}")
    torch.manual_seed(derive_rng(seed, "clf-train").integers(2**31))
    net = handle.net
    apply_freeze_policy(net, recipe)
    params = [p for p in net.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(
        params, lr=recipe.learning_rate, betas=(recipe.adam_beta1, recipe.adam_beta2)
    )
    criterion = nn.CrossEntropyLoss()
    history = []
    for epoch in range(recipe.epochs):
        net.train()
        order = derive_rng(seed, "clf-epoch", epoch).permutation(len(train_items))
        epoch_loss, n_batches = 0.0, 0
        for start in range(0, len(order), recipe.batch_size):
            idx = order[start : start + recipe.batch_size]
            batch = prepare_batch([train_items[i][0] for i in idx])
            labels = torch.as_tensor([train_items[i][1] for i in idx], dtype=torch.long)
            optimizer.zero_grad()
            loss = criterion(net(batch), labels)
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach())
            n_batches += 1
        history.append(epoch_loss / max(n_batches, 1))
    accuracy = evaluate_accuracy(handle, val_items)
    handle.trained = True
    handle.metadata.update({"accuracy": accuracy, "train_loss_history": history, "seed": seed})
    return accuracy


def evaluate_accuracy(handle: ClassifierHandle, items: Sequence[tuple[np.ndarray, int]], batch_size: int = 64) -> float:
    if not items:
        raise ValidationError("no items to evaluate")
    net = handle.net
    net.eval()
    correct = 0
    with torch.no_grad():
        for start in range(0, len(items), batch_size):
            chunk = items[start : start + batch_size]
            batch = prepare_batch([img for img, _ in chunk])
            predicted = net(batch).argmax(dim=1)
            labels = torch.as_tensor([label for _, label in chunk])
            correct += int((predicted == labels).sum())
    return correct / len(items)


def _require_trained(handle: ClassifierHandle) -> None:
    if not handle.trained:
        raise ValidationError(f"{handle.role} classifier has not been trained")


def predict_disease_probs(handle: ClassifierHandle, images: Sequence[np.ndarray], batch_size: int = 64) -> np.ndarray:
    """Probability of the disease class (index 1) per image; dropout disabled."""
    _require_trained(handle)
    if handle.task != "disease":
        raise ValidationError(f"expected a disease-role model, got {handle.role}")
    handle.net.eval()
    probs = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            batch = prepare_batch(images[start : start + batch_size])
            probs.append(torch.softmax(handle.net(batch), dim=1)[:, 1].numpy())
    return np.concatenate(probs) if probs else np.empty(0)


def predict_disease(handle: ClassifierHandle, image: np.ndarray) -> float:
    return float(predict_disease_probs(handle, [image])[0])


def predict_identity_batch(
    handle: ClassifierHandle, images: Sequence[np.ndarray], batch_size: int = 64
) -> list[tuple[str, float]]:
    _require_trained(handle)
    if handle.task != "identity":
        raise ValidationError(f"expected an identity-role model, got {handle.role}")
    handle.net.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            batch = prepare_batch(images[start : start + batch_size])
            probs = torch.softmax(handle.net(batch), dim=1)
            best = probs.argmax(dim=1)
            for row, cls in enumerate(best):
                out.append((handle.class_names[int(cls)], float(probs[row, cls])))
    return out


def predict_identity(handle: ClassifierHandle, image: np.ndarray) -> tuple[str, float]:
    return predict_identity_batch(handle, [image])[0]


def extract_identity_features(handle: ClassifierHandle, image: np.ndarray) -> np.ndarray:
    """E(image): flattened tap activation, deterministic (eval mode, no grad)."""
    _require_trained(handle)
    handle.net.eval()
    with torch.no_grad():
        _, tap, _ = handle.net.forward_full(prepare_batch([image]))
    return tap.flatten().numpy().copy()


def disease_probability_batch(handle: ClassifierHandle, batch: torch.Tensor) -> torch.Tensor:
    """Differentiable disease-class probabilities for use inside training losses.

    The classifier itself stays frozen and in eval mode; gradients flow only
    to the input batch. Counts each call for ablation accounting.
    """
    if handle.task != "disease":
        raise ValidationError(f"expected a disease-role model, got {handle.role}")
    handle.call_counts["disease"] += 1
    handle.net.eval()
    return torch.softmax(handle.net(as_model_input(batch)), dim=1)[:, 1]


def feature_batch(handle: ClassifierHandle, batch: torch.Tensor) -> torch.Tensor:
    """Differentiable E(.) tap features for perceptual losses."""
    handle.call_counts["features"] += 1
    handle.net.eval()
    _, tap, _ = handle.net.forward_full(as_model_input(batch))
    return tap


def class_activation_map(handle: ClassifierHandle, image: np.ndarray, class_index: int) -> np.ndarray:
    """Heatmap of the final conv maps weighted by the composed head weights.

    Min-max normalized to [0, 1] (a constant map collapses to zeros) and
    bilinearly upsampled to the input size.
    """
    _require_trained(handle)
    if not 0 <= class_index < len(handle.class_names):
        raise ValidationError(f"class index {class_index} out of range")
    handle.net.eval()
    with torch.no_grad():
        _, _, conv = handle.net.forward_full(prepare_batch([image]))
        weights = handle.net.effective_head_weights(class_index)
        raw = torch.einsum("c,chw->hw", weights, conv[0])
        spread = float(raw.max() - raw.min())
        if spread <= 0:
            flat = torch.zeros_like(raw)
        else:
            flat = (raw - raw.min()) / spread
        up = F.interpolate(
            flat[None, None], size=image.shape[1:], mode="bilinear", align_corners=False
        )
    return up[0, 0].numpy()


def freeze_classifier(handle: ClassifierHandle) -> ClassifierHandle:
    """Disable gradients and dropout; the GAN must not move these weights."""
    _require_trained(handle)
    for p in handle.net.parameters():
        p.requires_grad_(False)
    handle.net.eval()
    return handle


def weights_sha(handle: ClassifierHandle) -> str:
    digest = hashlib.sha256()
    state = handle.net.state_dict()
    for key in sorted(state):
        digest.update(key.encode())
        digest.update(state[key].numpy().tobytes())
    return digest.hexdigest()


def save_classifier(handle: ClassifierHandle, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(handle.net.state_dict(), directory / "weights.pt")
    write_json(
        {
            "role": handle.role,
            "backbone": handle.net.backbone_name,
            "class_names": list(handle.class_names),
            "class_count": len(handle.class_names),
            "input_size": handle.input_size,
            "feature_tap_layer": handle.feature_tap_layer,
            "trained": handle.trained,
            "metadata": handle.metadata,
        },
        directory / "classifier.json",
    )


def load_classifier(directory: str | Path) -> ClassifierHandle:
    directory = Path(directory)
    with open(directory / "classifier.json", "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    task, partition = meta["role"].split(":")
    handle = build_classifier(task, partition, meta["class_names"], meta["backbone"], meta["input_size"])
    state = torch.load(directory / "weights.pt", map_location="cpu", weights_only=True)
    handle.net.load_state_dict(state)
    handle.trained = meta["trained"]
    handle.metadata = meta.get("metadata", {})
    return handle
