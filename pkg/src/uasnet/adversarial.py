"""Joint adversarial process: pix2pix synthesis from the MCM plus a malignancy critic.

Players:

* ``G`` - a small U-Net turning (image, soft MCM) into a synthetic CT patch;
* ``D`` - a patch discriminator over (image, MCM) pairs;
* ``C`` - a CNN classifying benign / malignant from the predicted ``R`` map.

All probabilities are clamped to ``[EPS, 1 - EPS]`` before taking logs.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidInputError, TrainingDivergedError
from .model import NetworkOutput

EPS = 1e-7
LN2 = math.log(2.0)
SEG_TERMS = ("inter", "union", "r")


def bce(pred: torch.Tensor, target: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Mean binary cross-entropy with clamped probabilities."""
    if pred.shape != target.shape:
        raise InvalidInputError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    p = pred.clamp(eps, 1.0 - eps)
    return -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p)).mean()


def seg_loss(pred: NetworkOutput, targets: dict) -> dict:
    """Sum of BCE on intersection, union and reference predictions.

    ``targets`` holds ``inter``, ``union`` and ``ref`` maps shaped like the
    predictions. Returns the three components and their ``total``.
    """
    parts = {
        "inter": bce(pred.inter_pred, targets["inter"]),
        "union": bce(pred.union_pred, targets["union"]),
        "r": bce(pred.r_pred, targets["ref"]),
    }
    parts["total"] = parts["inter"] + parts["union"] + parts["r"]
    return parts


def l1_loss(x_syn: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if x_syn.shape != target.shape:
        raise InvalidInputError(f"synthetic {tuple(x_syn.shape)} and target {tuple(target.shape)} differ")
    return (x_syn - target).abs().mean()


def gan_terms(d_real: torch.Tensor, d_fake: torch.Tensor, eps: float = EPS):
    """Discriminator and generator losses from realness probabilities.

    gan_d = -[log D(real) + log(1 - D(fake))], gan_g = -log D(fake)
    (non-saturating generator form), each averaged over patches.
    """
    real = d_real.clamp(eps, 1.0 - eps)
    fake = d_fake.clamp(eps, 1.0 - eps)
    gan_d = -(torch.log(real).mean() + torch.log(1.0 - fake).mean())
    gan_g = -torch.log(fake).mean()
    return gan_d, gan_g


def malignancy_ce(logits: torch.Tensor, labels: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Two-class cross-entropy; samples with label < 0 are skipped.

    Returns a zero (still differentiable) scalar when no sample is labelled.
    """
    keep = labels >= 0
    if not bool(keep.any()):
        return logits.sum() * 0.0
    prob = torch.softmax(logits[keep], dim=1).clamp(eps, 1.0 - eps)
    picked = prob.gather(1, labels[keep].long().unsqueeze(1)).squeeze(1)
    return -torch.log(picked).mean()


# ---------------------------------------------------------------------------
# networks


def _down(cin, cout, norm=True):
    layers = [nn.Conv2d(cin, cout, 4, stride=2, padding=1, bias=not norm)]
    if norm:
        layers.append(nn.BatchNorm2d(cout))
    layers.append(nn.LeakyReLU(0.2, inplace=True))
    return nn.Sequential(*layers)


class Generator(nn.Module):
    """U-Net shaped pix2pix generator: (image, MCM) -> synthetic image in [-1, 1]."""

    def __init__(self, widths=(32, 64, 128, 256), in_channels: int = 2):
        super().__init__()
        self.widths = tuple(widths)
        downs = []
        cin = in_channels
        for i, w in enumerate(self.widths):
            downs.append(_down(cin, w, norm=i > 0))
            cin = w
        self.downs = nn.ModuleList(downs)
        ups = []
        for i in reversed(range(len(self.widths))):
            skip = self.widths[i - 1] if i > 0 else in_channels
            cout = self.widths[i - 1] if i > 0 else self.widths[0]
            ups.append(nn.ModuleDict({
                "conv": nn.Sequential(
                    nn.Conv2d(cin, cout, 3, padding=1, bias=False),
                    nn.BatchNorm2d(cout),
                    nn.ReLU(inplace=True),
                ),
                "merge": nn.Sequential(
                    nn.Conv2d(cout + skip, cout, 3, padding=1, bias=False),
                    nn.BatchNorm2d(cout),
                    nn.ReLU(inplace=True),
                ),
            }))
            cin = cout
        self.ups = nn.ModuleList(ups)
        self.out = nn.Conv2d(cin, 1, 1)

    @property
    def divisor(self) -> int:
        return 2 ** len(self.widths)

    def forward(self, image: torch.Tensor, mcm: torch.Tensor) -> torch.Tensor:
        if image.shape != mcm.shape:
            raise InvalidInputError(f"image {tuple(image.shape)} and MCM {tuple(mcm.shape)} resolutions differ")
        x = torch.cat([image, mcm], dim=1)
        skips = [x]
        for down in self.downs:
            x = down(x)
            skips.append(x)
        skips.pop()
        for up in self.ups:
            x = up["conv"](F.interpolate(x, scale_factor=2, mode="nearest"))
            x = up["merge"](torch.cat([x, skips.pop()], dim=1))
        return torch.tanh(self.out(x))


class PatchDiscriminator(nn.Module):
    """Three stride-2 stages and two stride-1 stages (70x70 receptive field).

    Returns a map of realness logits, one per patch.
    """

    def __init__(self, width: int = 32, in_channels: int = 2):
        super().__init__()
        w = width
        self.net = nn.Sequential(
            _down(in_channels, w, norm=False),
            _down(w, 2 * w),
            _down(2 * w, 4 * w),
            nn.Conv2d(4 * w, 8 * w, 4, stride=1, padding=1, bias=False),
            nn.BatchNorm2d(8 * w),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(8 * w, 1, 4, stride=1, padding=1),
        )

    def forward(self, image, mcm):
        return self.net(torch.cat([image, mcm], dim=1))


class MalignancyClassifier(nn.Module):
    def __init__(self, width: int = 16, in_channels: int = 1):
        super().__init__()
        w = width
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, w, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(2 * w),
            nn.ReLU(inplace=True),
            nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(4 * w),
            nn.ReLU(inplace=True),
            nn.AdaptiveAvgPool2d(1),
        )
        self.fc = nn.Linear(4 * w, 2)

    def forward(self, x):
        return self.fc(self.features(x).flatten(1))


@dataclass
class AdvConfig:
    """Hyper-parameters of the adversarial players, stored in checkpoints."""

    generator_widths: tuple = (32, 64, 128, 256)
    discriminator_width: int = 32
    classifier_width: int = 16
    classifier_input: str = "mask"  # or "mask_image": R map times the normalised image

    def __post_init__(self):
        self.generator_widths = tuple(int(w) for w in self.generator_widths)
        if self.classifier_input not in ("mask", "mask_image"):
            raise InvalidInputError(f"classifier_input must be 'mask' or 'mask_image', got {self.classifier_input!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["generator_widths"] = list(self.generator_widths)
        return d


class AdversarialHeads(nn.Module):
    def __init__(self, config: Optional[AdvConfig] = None, **kwargs):
        super().__init__()
        self.config = config if config is not None else AdvConfig(**kwargs)
        self.generator = Generator(self.config.generator_widths)
        self.discriminator = PatchDiscriminator(self.config.discriminator_width)
        self.classifier = MalignancyClassifier(self.config.classifier_width)

    def generate(self, image, mcm_soft):
        """pix2pix synthesis of a normalised CT patch from (image, soft MCM)."""
        return self.generator(image, mcm_soft)

    def realness(self, image, mcm):
        return torch.sigmoid(self.discriminator(image, mcm))

    def gan_losses(self, image_real, image_syn, mcm):
        """(gan_d, gan_g); gan_d sees detached inputs so it only trains D.

        The MCM is a fixed condition for D in both terms, so gan_g reaches the
        segmentation net only through the synthesised image.
        """
        mcm = mcm.detach()
        d_real = self.realness(image_real, mcm)
        d_fake_for_d = self.realness(image_syn.detach(), mcm)
        gan_d, _ = gan_terms(d_real, d_fake_for_d)
        _, gan_g = gan_terms(d_real.detach(), self.realness(image_syn, mcm))
        return gan_d, gan_g

    def malignancy_loss(self, r_pred, labels, image=None):
        x = r_pred
        if self.config.classifier_input == "mask_image":
            if image is None:
                raise InvalidInputError("classifier_input='mask_image' needs the image")
            x = r_pred * image
        return malignancy_ce(self.classifier(x), labels)


# ---------------------------------------------------------------------------
# objective


@dataclass
class LossWeights:
    seg: float = 1.0
    l1: float = 1.0
    gan: float = 1.0
    malignancy: float = 1.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise InvalidInputError(f"loss weight {name} must be >= 0, got {value}")


@dataclass
class LossBreakdown:
    """Values of every objective term for one batch.

    Adversarial terms are ``None`` when the joint adversarial process is off.
    ``total`` is what the minimising players (segmentation net, G, C) descend.
    """

    seg_bce: torch.Tensor
    seg_parts: dict = field(default_factory=dict)
    l1_gen: Optional[torch.Tensor] = None
    gan_g: Optional[torch.Tensor] = None
    gan_d: Optional[torch.Tensor] = None
    malig_ce: Optional[torch.Tensor] = None
    total: Optional[torch.Tensor] = None

    @property
    def jap(self) -> bool:
        return self.l1_gen is not None

    def as_floats(self) -> dict:
        out = {"seg_bce": float(self.seg_bce.detach())}
        for k in SEG_TERMS:
            out[f"seg_{k}"] = float(self.seg_parts[k].detach())
        for name in ("l1_gen", "gan_g", "gan_d", "malig_ce", "total"):
            value = getattr(self, name)
            out[name] = None if value is None else float(value.detach())
        return out

    def check_finite(self):
        values = self.as_floats()
        bad = [k for k, v in values.items() if v is not None and not math.isfinite(v)]
        if bad:
            raise TrainingDivergedError(f"non-finite loss terms: {', '.join(bad)}", values)


def combine(seg_bce, l1_gen=None, gan_g=None, malig_ce=None, weights: Optional[LossWeights] = None):
    """Weighted objective of the minimising players."""
    w = weights or LossWeights()
    total = w.seg * seg_bce
    if l1_gen is not None:
        total = total + w.l1 * l1_gen + w.gan * gan_g + w.malignancy * malig_ce
    return total


def joint_objective(seg_net, heads: Optional[AdversarialHeads], batch: dict, weights: Optional[LossWeights] = None,
                    jap_enabled: bool = True) -> LossBreakdown:
    """Evaluate every loss term at the current parameters.

    ``batch`` needs ``image`` (normalised, B x 1 x H x W), the ``union``,
    ``inter`` and ``ref`` targets and integer ``label`` (-1 = unknown).
    """
    out = seg_net(batch["image"])
    parts = seg_loss(out, batch)
    seg_total = parts.pop("total")
    if not jap_enabled or heads is None:
        return LossBreakdown(seg_bce=seg_total, seg_parts=parts, total=combine(seg_total, weights=weights))
    x_syn = heads.generate(batch["image"], out.mcm_soft)
    l1 = l1_loss(x_syn, batch["image"])
    gan_d, gan_g = heads.gan_losses(batch["image"], x_syn, out.mcm_soft)
    malig = heads.malignancy_loss(out.r_pred, batch["label"], batch["image"])
    return LossBreakdown(
        seg_bce=seg_total,
        seg_parts=parts,
        l1_gen=l1,
        gan_g=gan_g,
        gan_d=gan_d,
        malig_ce=malig,
        total=combine(seg_total, l1, gan_g, malig, weights),
    )
