"""Dual-generator translation GAN: networks, losses, training, evasion variant.

Two generators map between the non-disease domain X and the disease domain Y
with PatchGAN discriminators on each side. The generator objective combines
least-squares adversarial terms, a frozen-disease-classifier cross-entropy
("does the translation carry the target condition"), a cycle reconstruction
L1, and a perceptual identity L1 over frozen identity-classifier features.

Two adversarial-target conventions are supported:

* ``standard_lsgan``: discriminators push real->1, fake->0; generators push
  their fakes toward 1. Default, trains stably.
* ``as_written``: the mirrored assignment (real->0, fake->1 inside the
  discriminator objective, which the discriminator ascends). Provided for
  literal reproduction; the generator side is identical in both conventions.
"""

from __future__ import annotations

import dataclasses
import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .classifiers import (
    ClassifierHandle,
    disease_probability_batch,
    feature_batch,
    freeze_classifier,
)
from .core import (
    ExperimentConfig,
    LossWeights,
    ValidationError,
    derive_rng,
    validate_image,
    write_json,
)

CONVENTIONS = ("standard_lsgan", "as_written")
PROB_CLAMP = 1e-7


# --------------------------------------------------------------------------
# Networks


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.body(x)


class Generator(nn.Module):
    """7x7 stem, two stride-2 downsamplers, residual core, mirrored upsamplers, tanh."""

    def __init__(self, channels: int = 1, base_width: int = 64, residual_blocks: int = 9):
        super().__init__()
        b = base_width
        layers: list[nn.Module] = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(channels, b, 7),
            nn.InstanceNorm2d(b),
            nn.ReLU(inplace=True),
            nn.Conv2d(b, 2 * b, 3, stride=2, padding=1),
            nn.InstanceNorm2d(2 * b),
            nn.ReLU(inplace=True),
            nn.Conv2d(2 * b, 4 * b, 3, stride=2, padding=1),
            nn.InstanceNorm2d(4 * b),
            nn.ReLU(inplace=True),
        ]
        layers += [ResidualBlock(4 * b) for _ in range(residual_blocks)]
        layers += [
            nn.ConvTranspose2d(4 * b, 2 * b, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(2 * b),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(2 * b, b, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(b),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(3),
            nn.Conv2d(b, channels, 7),
            nn.Tanh(),
        ]
        self.model = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] % 4 or x.shape[-2] % 4:
            raise ValidationError(f"generator input sides must be multiples of 4, got {tuple(x.shape)}")
        return self.model(x)


class PatchDiscriminator(nn.Module):
    """Five 4x4 convs (stride 2,2,2,1,1) scoring overlapping 70x70 patches.

    The stride-1 layers use asymmetric (1,2,1,2) zero padding so the map keeps
    its size there: a 256x256 input yields a 32x32x1 score map. No final
    nonlinearity.
    """

    def __init__(self, channels: int = 1, base_width: int = 64):
        super().__init__()
        b = base_width

        def down(cin: int, cout: int) -> list[nn.Module]:
            return [nn.Conv2d(cin, cout, 4, stride=2, padding=1), nn.InstanceNorm2d(cout), nn.ReLU(inplace=True)]

        def same(cin: int, cout: int, last: bool = False) -> list[nn.Module]:
            layers: list[nn.Module] = [nn.ZeroPad2d((1, 2, 1, 2)), nn.Conv2d(cin, cout, 4, stride=1)]
            if not last:
                layers += [nn.InstanceNorm2d(cout), nn.ReLU(inplace=True)]
            return layers

        self.model = nn.Sequential(
            *down(channels, b),
            *down(b, 2 * b),
            *down(2 * b, 4 * b),
            *same(4 * b, 8 * b),
            *same(8 * b, 1, last=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.model(x)


class RepurposedDiscriminator(nn.Module):
    """PatchGAN plus a single dense layer turning the patch map into one score.

    Output is the pair (patch map, per-image scalar); the adversarial
    objective applies the same least-squares targets to both, summed with
    equal weight.
    """

    def __init__(self, base: PatchDiscriminator, patch_elements: int):
        super().__init__()
        self.base = base
        self.global_head = nn.Linear(patch_elements, 1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        patch = self.base(x)
        return patch, self.global_head(patch.flatten(1)).squeeze(1)


def init_weights(net: nn.Module) -> nn.Module:
    """Gaussian(0, 0.02) init on conv/linear weights, the usual GAN recipe."""
    for m in net.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, 0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
    return net


@dataclass
class TranslationModel:
    G: Generator
    F: Generator
    D_X: nn.Module
    D_Y: nn.Module
    config: ExperimentConfig
    disease_model: ClassifierHandle | None = None
    identity_model: ClassifierHandle | None = None
    trained: bool = False
    repurposed: bool = False

    @property
    def weights(self) -> LossWeights:
        return self.config.loss_weights

    def networks(self) -> dict[str, nn.Module]:
        return {"G": self.G, "F": self.F, "D_X": self.D_X, "D_Y": self.D_Y}


def build_translation_model(
    config: ExperimentConfig,
    disease_model: ClassifierHandle | None = None,
    identity_model: ClassifierHandle | None = None,
) -> TranslationModel:
    """Fresh networks seeded from config.seed; attached classifiers get frozen."""
    torch.manual_seed(derive_rng(config.seed, "gan-init").integers(2**31))
    c, g, d, r = (
        config.image_channels,
        config.generator_base_width,
        config.discriminator_base_width,
        config.residual_blocks,
    )
    model = TranslationModel(
        G=init_weights(Generator(c, g, r)),
        F=init_weights(Generator(c, g, r)),
        D_X=init_weights(PatchDiscriminator(c, d)),
        D_Y=init_weights(PatchDiscriminator(c, d)),
        config=config,
        disease_model=disease_model,
        identity_model=identity_model,
    )
    for handle in (disease_model, identity_model):
        if handle is not None:
            freeze_classifier(handle)
    return model


def patch_map_elements(config: ExperimentConfig) -> int:
    with torch.no_grad():
        probe = torch.zeros(1, config.image_channels, config.image_size, config.image_size)
        disc = PatchDiscriminator(config.image_channels, config.discriminator_base_width)
        return int(disc(probe).flatten(1).shape[1])


def attach_global_discriminator(model: TranslationModel) -> TranslationModel:
    """Wrap both discriminators with the scalar head (detector-evasion variant)."""
    if model.repurposed:
        raise ValidationError("model already has global discriminator heads")
    elements = patch_map_elements(model.config)
    torch.manual_seed(derive_rng(model.config.seed, "global-head").integers(2**31))
    d_x = RepurposedDiscriminator(model.D_X, elements)
    d_y = RepurposedDiscriminator(model.D_Y, elements)
    init_weights(d_x.global_head)
    init_weights(d_y.global_head)
    return dataclasses.replace(model, D_X=d_x, D_Y=d_y, repurposed=True)


# --------------------------------------------------------------------------
# Losses


def _heads(disc: nn.Module, batch: torch.Tensor) -> tuple[torch.Tensor, ...]:
    out = disc(batch)
    return out if isinstance(out, tuple) else (out,)


def _lsq(scores: torch.Tensor, target: float) -> torch.Tensor:
    return ((scores - target) ** 2).mean()


def _check_batch(batch: torch.Tensor, what: str) -> None:
    if batch.numel() == 0 or batch.shape[0] == 0:
        raise ValidationError(f"empty {what} batch")


def adversarial_loss(
    disc: nn.Module, real_batch: torch.Tensor, fake_batch: torch.Tensor, convention: str = "standard_lsgan"
) -> torch.Tensor:
    """Least-squares discriminator objective, averaged over patches and batch.

    standard_lsgan: mean[(D(real)-1)^2] + mean[D(fake)^2], to be minimized.
    as_written: mean[D(real)^2] + mean[(D(fake)-1)^2], to be maximized by the
    discriminator. Multi-head discriminators contribute one term pair per
    head, summed with equal weight.
    """
    if convention not in CONVENTIONS:
        raise ValidationError(f"unknown convention {convention!r}")
    _check_batch(real_batch, "real")
    _check_batch(fake_batch, "fake")
    real_target, fake_target = (1.0, 0.0) if convention == "standard_lsgan" else (0.0, 1.0)
    total = None
    for real_scores, fake_scores in zip(_heads(disc, real_batch), _heads(disc, fake_batch)):
        term = _lsq(real_scores, real_target) + _lsq(fake_scores, fake_target)
        total = term if total is None else total + term
    return total


def discriminator_step_loss(
    disc: nn.Module, real_batch: torch.Tensor, fake_batch: torch.Tensor, convention: str
) -> torch.Tensor:
    """The quantity gradient descent minimizes for the discriminator update."""
    loss = adversarial_loss(disc, real_batch, fake_batch, convention)
    return loss if convention == "standard_lsgan" else -loss


def generator_adversarial_loss(
    disc: nn.Module, fake_batch: torch.Tensor, convention: str = "standard_lsgan"
) -> torch.Tensor:
    """Generator-side term: drive D(fake) toward 1 (identical in both conventions)."""
    if convention not in CONVENTIONS:
        raise ValidationError(f"unknown convention {convention!r}")
    _check_batch(fake_batch, "fake")
    total = None
    for fake_scores in _heads(disc, fake_batch):
        term = _lsq(fake_scores, 1.0)
        total = term if total is None else total + term
    return total


def disease_loss(disease_model: ClassifierHandle, translated_batch: torch.Tensor) -> torch.Tensor:
    """Mean -log p(disease | translation) under the frozen disease classifier.

    Probabilities are clamped to [1e-7, 1 - 1e-7] so saturated classifiers
    cannot produce non-finite losses.
    """
    _check_batch(translated_batch, "translated")
    probs = disease_probability_batch(disease_model, translated_batch)
    return -torch.log(probs.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)).mean()


def cycle_loss(
    x_batch: torch.Tensor, fgx_batch: torch.Tensor, y_batch: torch.Tensor, gfy_batch: torch.Tensor
) -> torch.Tensor:
    """Per-pixel mean L1 of both reconstructions, F(G(x)) vs x and G(F(y)) vs y."""
    if x_batch.shape != fgx_batch.shape or y_batch.shape != gfy_batch.shape:
        raise ValidationError("cycle loss shape mismatch")
    _check_batch(x_batch, "x")
    return (fgx_batch - x_batch).abs().mean() + (gfy_batch - y_batch).abs().mean()


def identity_loss(
    identity_model: ClassifierHandle,
    x_batch: torch.Tensor,
    gx_batch: torch.Tensor,
    fgx_batch: torch.Tensor,
    second_term: str = "translation",
) -> torch.Tensor:
    """Perceptual L1 over frozen identity features E(.), averaged per element.

    First term compares E(x) with E(G(x)). The second compares E(F(G(x)))
    against E(G(x)) when ``second_term="translation"`` (the printed form) or
    against E(x) with ``second_term="input"``.
    """
    if second_term not in ("translation", "input"):
        raise ValidationError(f"unknown second_term {second_term!r}")
    _check_batch(x_batch, "x")
    e_x = feature_batch(identity_model, x_batch)
    e_gx = feature_batch(identity_model, gx_batch)
    e_fgx = feature_batch(identity_model, fgx_batch)
    reference = e_gx if second_term == "translation" else e_x
    return (e_x - e_gx).abs().mean() + (e_fgx - reference).abs().mean()


def weighted_total(weights: LossWeights, terms: dict[str, torch.Tensor | float]) -> tuple[torch.Tensor, dict[str, float]]:
    """Combine per-term losses into the full objective plus a float breakdown."""
    zero = torch.zeros(())
    adv = terms.get("adv", zero)
    dis = terms.get("disease", zero)
    ident = terms.get("identity", zero)
    cyc = terms.get("cycle", zero)
    total = (
        weights.lambda_adv * adv
        + weights.lambda_disease * dis
        + weights.lambda_identity * ident
        + weights.lambda_cycle * cyc
    )
    def scalar(value: torch.Tensor) -> float:
        return float(value.detach()) if isinstance(value, torch.Tensor) else float(value)

    breakdown = {
        "adv": scalar(adv),
        "disease": scalar(dis),
        "identity": scalar(ident),
        "cycle": scalar(cyc),
        "total": scalar(total),
    }
    return total, breakdown


def compute_generator_objective(
    model: TranslationModel, x_batch: torch.Tensor, y_batch: torch.Tensor
) -> tuple[torch.Tensor, dict[str, float], dict[str, torch.Tensor]]:
    """Full generator-side objective for one batch pair.

    Returns (total, per-term float breakdown, intermediate tensors). Loss
    terms with zero weight are skipped entirely, so an ablated classifier is
    never even evaluated.
    """
    cfg = model.config
    w = model.weights
    gx = model.G(x_batch)
    fy = model.F(y_batch)
    fgx = model.F(gx)
    gfy = model.G(fy)
    terms: dict[str, torch.Tensor] = {}
    if w.lambda_adv > 0:
        terms["adv"] = generator_adversarial_loss(
            model.D_Y, gx, cfg.adversarial_convention
        ) + generator_adversarial_loss(model.D_X, fy, cfg.adversarial_convention)
    if w.lambda_disease > 0:
        if model.disease_model is None:
            raise ValidationError("lambda_disease > 0 requires an attached disease classifier")
        terms["disease"] = disease_loss(model.disease_model, gx)
    if w.lambda_identity > 0:
        if model.identity_model is None:
            raise ValidationError("lambda_identity > 0 requires an attached identity classifier")
        terms["identity"] = identity_loss(model.identity_model, x_batch, gx, fgx, cfg.identity_second_term)
    if w.lambda_cycle > 0:
        terms["cycle"] = cycle_loss(x_batch, fgx, y_batch, gfy)
    total, breakdown = weighted_total(w, terms)
    return total, breakdown, {"gx": gx, "fy": fy, "fgx": fgx, "gfy": gfy}


# --------------------------------------------------------------------------
# Training


class ImagePool:
    """History buffer of generated images for discriminator updates.

    With probability 1/2 a query swaps the incoming fake for a stored one,
    which keeps the discriminator trained on a moving window of past
    generator outputs. Size 0 disables the buffer.
    """

    def __init__(self, size: int, seed: int):
        self.size = size
        self.rng = derive_rng(seed, "image-pool")
        self.items: list[torch.Tensor] = []

    def query(self, batch: torch.Tensor) -> torch.Tensor:
        if self.size <= 0:
            return batch
        out = []
        for img in batch.detach():
            if len(self.items) < self.size:
                self.items.append(img.clone())
                out.append(img)
            elif self.rng.random() < 0.5:
                slot = int(self.rng.integers(self.size))
                out.append(self.items[slot].clone())
                self.items[slot] = img.clone()
            else:
                out.append(img)
        return torch.stack(out)


def lr_factor(epoch: int, epochs_constant: int, epochs_decay: int) -> float:
    """1.0 through the constant phase, then linear from 1 at the start of decay
    to 0 one epoch past the final one."""
    if epoch < epochs_constant:
        return 1.0
    if epochs_decay <= 0:
        return 0.0
    return max(0.0, 1.0 - (epoch - epochs_constant) / epochs_decay)


def _set_requires_grad(net: nn.Module, flag: bool) -> None:
    for p in net.parameters():
        p.requires_grad_(flag)


def train_jekyll(
    model: TranslationModel,
    x_images: np.ndarray,
    y_images: np.ndarray,
    config: ExperimentConfig | None = None,
    seed: int | None = None,
    out_dir: str | Path | None = None,
) -> list[dict]:
    """Alternating generator/discriminator training over the two image pools.

    ``x_images``/``y_images`` are stacked (N, C, H, W) arrays of non-disease
    and disease images from the attack partition. Returns the per-epoch loss
    history; checkpoints land under ``out_dir`` when given. Aborts on a
    non-finite loss rather than training through divergence.
    """
    cfg = config or model.config
    run_seed = cfg.seed if seed is None else seed
    if len(x_images) == 0 or len(y_images) == 0:
        raise ValidationError("both image pools must be non-empty")
    for handle in (model.disease_model, model.identity_model):
        if handle is not None:
            freeze_classifier(handle)
    total_epochs = cfg.epochs_constant + cfg.epochs_decay
    history: list[dict] = []
    if total_epochs == 0:
        return history

    gen_params = list(model.G.parameters()) + list(model.F.parameters())
    disc_params = list(model.D_X.parameters()) + list(model.D_Y.parameters())
    opt_g = torch.optim.Adam(gen_params, lr=cfg.learning_rate, betas=(cfg.adam_beta1, cfg.adam_beta2))
    opt_d = torch.optim.Adam(disc_params, lr=cfg.learning_rate, betas=(cfg.adam_beta1, cfg.adam_beta2))
    sched = lambda e: lr_factor(e, cfg.epochs_constant, cfg.epochs_decay)
    sched_g = torch.optim.lr_scheduler.LambdaLR(opt_g, lr_lambda=sched)
    sched_d = torch.optim.lr_scheduler.LambdaLR(opt_d, lr_lambda=sched)

    buffer_size = cfg.image_buffer_size if cfg.use_image_buffer else 0
    pool_fake_y = ImagePool(buffer_size, derive_rng(run_seed, "pool-y").integers(2**31))
    pool_fake_x = ImagePool(buffer_size, derive_rng(run_seed, "pool-x").integers(2**31))

    for epoch in range(total_epochs):
        rng = derive_rng(run_seed, "gan-epoch", epoch)
        x_order = rng.permutation(len(x_images))
        y_order = rng.permutation(len(y_images))
        n_steps = min(len(x_order), len(y_order)) // cfg.batch_size
        if cfg.steps_per_epoch is not None:
            n_steps = min(n_steps, cfg.steps_per_epoch)
        if n_steps == 0:
            raise ValidationError("not enough images for a single batch")
        sums: dict[str, float] = {}
        for step in range(n_steps):
            lo, hi = step * cfg.batch_size, (step + 1) * cfg.batch_size
            x_batch = torch.from_numpy(x_images[x_order[lo:hi]].copy())
            y_batch = torch.from_numpy(y_images[y_order[lo:hi]].copy())

            _set_requires_grad(model.D_X, False)
            _set_requires_grad(model.D_Y, False)
            opt_g.zero_grad()
            total_g, breakdown, inter = compute_generator_objective(model, x_batch, y_batch)
            if not torch.isfinite(total_g):
                raise RuntimeError(f"generator loss diverged at epoch {epoch} step {step}")
            total_g.backward()
            opt_g.step()

            _set_requires_grad(model.D_X, True)
            _set_requires_grad(model.D_Y, True)
            opt_d.zero_grad()
            fake_y = pool_fake_y.query(inter["gx"])
            fake_x = pool_fake_x.query(inter["fy"])
            loss_d_y = discriminator_step_loss(model.D_Y, y_batch, fake_y, cfg.adversarial_convention)
            loss_d_x = discriminator_step_loss(model.D_X, x_batch, fake_x, cfg.adversarial_convention)
            loss_d = loss_d_y + loss_d_x
            if not torch.isfinite(loss_d):
                raise RuntimeError(f"discriminator loss diverged at epoch {epoch} step {step}")
            loss_d.backward()
            opt_d.step()

            breakdown["d_x"] = float(loss_d_x.detach())
            breakdown["d_y"] = float(loss_d_y.detach())
            for key, value in breakdown.items():
                sums[key] = sums.get(key, 0.0) + value
        entry = {"epoch": epoch, "lr": float(opt_g.param_groups[0]["lr"]), "steps": n_steps}
        entry.update({key: value / n_steps for key, value in sums.items()})
        history.append(entry)
        sched_g.step()
        sched_d.step()
        model.trained = True
        if out_dir is not None:
            last = epoch == total_epochs - 1
            if last or (epoch + 1) % cfg.checkpoint_every == 0:
                save_translation_model(model, Path(out_dir) / f"epoch_{epoch:04d}", epoch=epoch, history=history)
            if last:
                save_translation_model(model, Path(out_dir) / "final", epoch=epoch, history=history)
    return history


def translate(model: TranslationModel, image: np.ndarray, direction: str = "xy") -> np.ndarray:
    """Single forward pass through G (xy: inject) or F (yx: remove)."""
    if direction not in ("xy", "yx"):
        raise ValidationError(f"direction must be 'xy' or 'yx', got {direction!r}")
    if not model.trained:
        warnings.warn("translating with an untrained model", stacklevel=2)
    validate_image(image)
    gen = model.G if direction == "xy" else model.F
    gen.eval()
    with torch.no_grad():
        out = gen(torch.as_tensor(image[None], dtype=torch.float32))
    return out[0].numpy()


def translate_batch(model: TranslationModel, images: Sequence[np.ndarray], direction: str = "xy", batch_size: int = 16) -> list[np.ndarray]:
    gen = model.G if direction == "xy" else model.F
    if direction not in ("xy", "yx"):
        raise ValidationError(f"direction must be 'xy' or 'yx', got {direction!r}")
    gen.eval()
    out: list[np.ndarray] = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = np.stack(images[start : start + batch_size]).astype(np.float32)
            fakes = gen(torch.as_tensor(chunk))
            out.extend(f.numpy() for f in fakes)
    return out


# --------------------------------------------------------------------------
# Persistence


def save_translation_model(
    model: TranslationModel, directory: str | Path, epoch: int | None = None, history: list[dict] | None = None
) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, net in model.networks().items():
        torch.save(net.state_dict(), directory / f"{name}.pt")
    meta = {
        "config": model.config.to_dict(),
        "trained": model.trained,
        "repurposed": model.repurposed,
        "epoch": epoch,
        "loss_breakdown": history[-1] if history else None,
    }
    write_json(meta, directory / "model.json")


def load_translation_model(
    directory: str | Path,
    disease_model: ClassifierHandle | None = None,
    identity_model: ClassifierHandle | None = None,
) -> TranslationModel:
    directory = Path(directory)
    with open(directory / "model.json", "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    config = ExperimentConfig.from_dict(meta["config"])
    model = build_translation_model(config, disease_model, identity_model)
    if meta["repurposed"]:
        model = attach_global_discriminator(model)
    for name, net in model.networks().items():
        state = torch.load(directory / f"{name}.pt", map_location="cpu", weights_only=True)
        net.load_state_dict(state)
    model.trained = meta["trained"]
    return model
