"""Three-branch segmentation network with Feature-Aware Concatenation.

One shared five-stage encoder feeds three decoders:

* ``union``  - predicts the annotators' union, FA-Cat(Sobel) on its
  high-resolution skips;
* ``inter``  - predicts the intersection, FA-Cat(Otsu) on the same skips;
* ``plain``  - an ordinary U-Net decoder.

The final feature maps of all three decoders are concatenated into a fusion
head that predicts the reference annotation ``R``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidInputError, TrainingDivergedError
from .filters import ADAPTIVE_METHODS
from .masks import MultiConfidenceMask, discretize_mcm

HU_WINDOW = (-1000.0, 400.0)
SQUEEZE_RATIO = 16
DEPTH = 5
BRANCHES = ("union", "inter", "plain")


def normalize_hu(hu):
    """Clip HU to the lung window and rescale linearly to [-1, 1]."""
    lo, hi = HU_WINDOW
    if isinstance(hu, torch.Tensor):
        return (hu.clamp(lo, hi) - lo) / (hi - lo) * 2.0 - 1.0
    hu = np.clip(np.asarray(hu, dtype=np.float32), lo, hi)
    return ((hu - lo) / (hi - lo) * 2.0 - 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# FA-Cat: functional form


@dataclass
class FaCatParams:
    """Weights of one FA-Cat block.

    w1 is (C, C/16), w2 is (C/16, C), compress is (C/16, C).
    """

    w1: torch.Tensor
    w2: torch.Tensor
    compress: torch.Tensor
    adaptive_method: str = "sobel"
    otsu_mode: str = "binary"


def se_block(x: torch.Tensor, w1: torch.Tensor, w2: torch.Tensor) -> torch.Tensor:
    """Channel excitation: scale each channel of ``x`` by a learned gate.

    ``x`` is (C, H, W) or (B, C, H, W).
    """
    c = x.shape[-3]
    if w2.shape != (w1.shape[1], c) or w1.shape[0] != c:
        raise InvalidInputError(f"SE weights {tuple(w1.shape)}/{tuple(w2.shape)} do not match {c} channels")
    z = x.mean(dim=(-2, -1))
    gate = torch.sigmoid(F.relu(z @ w2.t()) @ w1.t())
    return x * gate[..., None, None]


def _adapt(u_small: torch.Tensor, method: str, otsu_mode: str) -> torch.Tensor:
    if method not in ADAPTIVE_METHODS:
        raise InvalidInputError(f"unknown adaptive method {method!r}")
    feats = ADAPTIVE_METHODS[method](u_small.detach())
    if method == "otsu" and otsu_mode == "masked":
        # binary mask is constant; gradient reaches u_small through the product
        return feats * u_small
    return feats


def sa_block(u: torch.Tensor, compress: torch.Tensor, adaptive_method: str,
             otsu_mode: str = "binary") -> torch.Tensor:
    """Squeeze to C/16 channels, apply the adaptive filter, append to ``u``."""
    c = u.shape[-3]
    if c % SQUEEZE_RATIO:
        raise InvalidInputError(f"channel count {c} is not divisible by {SQUEEZE_RATIO}")
    if compress.shape != (c // SQUEEZE_RATIO, c):
        raise InvalidInputError(f"compress weight {tuple(compress.shape)} does not match {c} channels")
    u_small = torch.einsum("oc,...chw->...ohw", compress, u)
    return torch.cat([u, _adapt(u_small, adaptive_method, otsu_mode)], dim=-3)


def fa_cat(x: torch.Tensor, params: FaCatParams) -> torch.Tensor:
    """SE block followed by SA block; output has C + C/16 channels."""
    u = se_block(x, params.w1, params.w2)
    return sa_block(u, params.compress, params.adaptive_method, params.otsu_mode)


class FACat(nn.Module):
    """Module wrapper around :func:`fa_cat`.

    The compression projection only feeds the adaptive filter, which blocks
    gradients; it is therefore a fixed random projection (a buffer) unless
    ``otsu_mode == "masked"`` lets gradients reach it.
    """

    def __init__(self, channels: int, adaptive_method: str, otsu_mode: str = "binary"):
        super().__init__()
        if channels % SQUEEZE_RATIO:
            raise InvalidInputError(f"FA-Cat needs channels divisible by {SQUEEZE_RATIO}, got {channels}")
        if adaptive_method not in ADAPTIVE_METHODS:
            raise InvalidInputError(f"unknown adaptive method {adaptive_method!r}")
        small = channels // SQUEEZE_RATIO
        self.channels = channels
        self.adaptive_method = adaptive_method
        self.otsu_mode = otsu_mode
        bound_w2 = 1.0 / channels ** 0.5
        bound_w1 = 1.0 / small ** 0.5
        self.w1 = nn.Parameter(torch.empty(channels, small).uniform_(-bound_w1, bound_w1))
        self.w2 = nn.Parameter(torch.empty(small, channels).uniform_(-bound_w2, bound_w2))
        compress = torch.empty(small, channels).uniform_(-bound_w2, bound_w2)
        if self.compress_trainable:
            self.compress = nn.Parameter(compress)
        else:
            self.register_buffer("compress", compress)

    @property
    def compress_trainable(self) -> bool:
        return self.adaptive_method == "otsu" and self.otsu_mode == "masked"

    @property
    def out_channels(self) -> int:
        return self.channels + self.channels // SQUEEZE_RATIO

    def params(self) -> FaCatParams:
        return FaCatParams(self.w1, self.w2, self.compress, self.adaptive_method, self.otsu_mode)

    def forward(self, x):
        return fa_cat(x, self.params())


# ---------------------------------------------------------------------------
# network


def double_conv(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class UpStage(nn.Module):
    """Nearest x2 upsample + conv, concatenate the (optionally FA-Cat'd) skip, double conv."""

    def __init__(self, cin: int, skip: int, cout: int, fa_cat_block: Optional[FACat] = None):
        super().__init__()
        self.up = nn.Sequential(
            nn.Conv2d(cin, cout, 3, padding=1, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        )
        self.fa_cat = fa_cat_block
        skip_out = fa_cat_block.out_channels if fa_cat_block is not None else skip
        self.in_channels = cout + skip_out
        self.conv = double_conv(self.in_channels, cout)

    def forward(self, x, skip):
        x = self.up(F.interpolate(x, scale_factor=2, mode="nearest"))
        if self.fa_cat is not None:
            skip = self.fa_cat(skip)
        return self.conv(torch.cat([x, skip], dim=1))


class Decoder(nn.Module):
    def __init__(self, widths: Sequence[int], bottleneck: int, fa_cat_levels=(), method: Optional[str] = None,
                 otsu_mode: str = "binary", with_head: bool = True):
        super().__init__()
        stages = []
        prev = bottleneck
        for level in reversed(range(DEPTH)):
            block = FACat(widths[level], method, otsu_mode) if level in fa_cat_levels else None
            stages.append(UpStage(prev, widths[level], widths[level], block))
            prev = widths[level]
        # stages[i] handles level DEPTH - 1 - i
        self.stages = nn.ModuleList(stages)
        # the plain branch only feeds the fusion head
        self.head = nn.Conv2d(widths[0], 1, 1) if with_head else None

    def stage_for_level(self, level: int) -> UpStage:
        return self.stages[DEPTH - 1 - level]

    def forward(self, bottom, skips):
        x = bottom
        for i, stage in enumerate(self.stages):
            x = stage(x, skips[DEPTH - 1 - i])
        return x


@dataclass
class ArchConfig:
    """Architecture hyper-parameters, stored inside every checkpoint."""

    widths: tuple = (32, 64, 128, 256, 512)
    fa_cat_levels: tuple = (0, 1)
    union_method: str = "sobel"
    inter_method: str = "otsu"
    otsu_mode: str = "binary"
    fusion_convs: int = 2
    in_channels: int = 1

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.fa_cat_levels = tuple(sorted(int(v) for v in self.fa_cat_levels))
        if len(self.widths) != DEPTH:
            raise InvalidInputError(f"need {DEPTH} encoder widths, got {len(self.widths)}")
        for level in self.fa_cat_levels:
            if not 0 <= level < DEPTH:
                raise InvalidInputError(f"FA-Cat level {level} outside [0, {DEPTH})")
            if self.widths[level] % SQUEEZE_RATIO:
                raise InvalidInputError(f"width {self.widths[level]} at FA-Cat level {level} not divisible by 16")
        if self.otsu_mode not in ("binary", "masked"):
            raise InvalidInputError(f"otsu_mode must be 'binary' or 'masked', got {self.otsu_mode!r}")
        if self.fusion_convs < 1:
            raise InvalidInputError("fusion head needs at least one convolution")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["fa_cat_levels"] = list(self.fa_cat_levels)
        return d


def parse_placement(value) -> tuple:
    """Turn ``"high"``, ``"low"`` or ``"0,1"`` into FA-Cat level indices."""
    if isinstance(value, (list, tuple)):
        return tuple(int(v) for v in value)
    text = str(value).strip().lower()
    if text == "high":
        return (0, 1)
    if text == "low":
        return (DEPTH - 2, DEPTH - 1)
    if text in ("none", ""):
        return ()
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise InvalidInputError(f"bad FA-Cat placement {value!r}; use high, low, none or a comma list") from None


@dataclass
class NetworkOutput:
    """Batched network predictions, each (B, 1, H, W) probabilities."""

    union_pred: torch.Tensor
    inter_pred: torch.Tensor
    r_pred: torch.Tensor
    mcm_soft: torch.Tensor
    features: dict = field(default_factory=dict, repr=False)

    def mcm(self, index: int = 0) -> MultiConfidenceMask:
        soft = self.mcm_soft[index, 0].detach().cpu().numpy()
        return MultiConfidenceMask(soft=soft, discrete=discretize_mcm(soft))


class UASNet(nn.Module):
    def __init__(self, config: Optional[ArchConfig] = None, **kwargs):
        super().__init__()
        self.config = config if config is not None else ArchConfig(**kwargs)
        cfg = self.config
        w = cfg.widths
        encoder = []
        for level in range(DEPTH):
            encoder.append(double_conv(cfg.in_channels if level == 0 else w[level - 1], w[level]))
        self.encoder = nn.ModuleList(encoder)
        self.bottleneck = double_conv(w[-1], w[-1])
        self.branches = nn.ModuleDict({
            "union": Decoder(w, w[-1], cfg.fa_cat_levels, cfg.union_method, cfg.otsu_mode),
            "inter": Decoder(w, w[-1], cfg.fa_cat_levels, cfg.inter_method, cfg.otsu_mode),
            "plain": Decoder(w, w[-1], with_head=False),
        })
        fusion = []
        cin = 3 * w[0]
        for _ in range(cfg.fusion_convs - 1):
            fusion += [nn.Conv2d(cin, w[0], 3, padding=1, bias=False), nn.BatchNorm2d(w[0]), nn.ReLU(inplace=True)]
            cin = w[0]
        fusion.append(nn.Conv2d(cin, 1, 1))
        self.fusion = nn.Sequential(*fusion)

    @property
    def divisor(self) -> int:
        return 2 ** DEPTH

    def fa_cat_tags(self) -> list[str]:
        return [f"{b}.fa_cat{level}" for b in ("union", "inter") for level in self.config.fa_cat_levels]

    def fa_cat_module(self, tag: str) -> FACat:
        try:
            branch, rest = tag.split(".")
            level = int(rest.removeprefix("fa_cat"))
            block = self.branches[branch].stage_for_level(level).fa_cat
        except (ValueError, KeyError, IndexError):
            block = None
        if block is None:
            raise InvalidInputError(f"unknown FA-Cat layer tag {tag!r}; available: {self.fa_cat_tags()}")
        return block

    def encode(self, x):
        skips = []
        for level, stage in enumerate(self.encoder):
            if level:
                x = F.max_pool2d(x, 2)
            x = stage(x)
            skips.append(x)
        return self.bottleneck(F.max_pool2d(x, 2)), skips

    def forward(self, x: torch.Tensor) -> NetworkOutput:
        """``x`` is a normalised image batch (B, 1, H, W); H and W divisible by 32."""
        if x.dim() != 4:
            raise InvalidInputError(f"expected (B, C, H, W) input, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % self.divisor or w % self.divisor:
            raise InvalidInputError(f"input size {h}x{w} is not divisible by {self.divisor}")
        bottom, skips = self.encode(x)
        feats = {name: branch(bottom, skips) for name, branch in self.branches.items()}
        union_pred = torch.sigmoid(self.branches["union"].head(feats["union"]))
        inter_pred = torch.sigmoid(self.branches["inter"].head(feats["inter"]))
        r_pred = torch.sigmoid(self.fusion(torch.cat([feats[b] for b in BRANCHES], dim=1)))
        for name, t in (("union", union_pred), ("inter", inter_pred), ("r", r_pred)):
            if not torch.isfinite(t).all():
                raise TrainingDivergedError(f"non-finite activations in {name} output")
        return NetworkOutput(union_pred, inter_pred, r_pred, (union_pred + inter_pred) / 2.0, feats)

    def channel_trace(self, height: int = 64, width: int = 64) -> list[dict]:
        """Dry run recording the channels entering every decoder stage."""
        records = []
        hooks = []
        for name, branch in self.branches.items():
            for level in range(DEPTH):
                stage = branch.stage_for_level(level)

                def hook(module, inputs, _name=name, _level=level, _stage=stage):
                    records.append({
                        "branch": _name,
                        "level": _level,
                        "fa_cat": _stage.fa_cat is not None,
                        "expected": _stage.in_channels,
                        "actual": inputs[0].shape[1],
                    })

                hooks.append(stage.conv.register_forward_pre_hook(hook))
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                self(torch.zeros(1, self.config.in_channels, height, width))
        finally:
            for h in hooks:
                h.remove()
            self.train(was_training)
        return records


def predict(model: UASNet, image_hu) -> dict:
    """Run the model on one 2-D HU image and return numpy maps plus the MCM."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            x = torch.from_numpy(normalize_hu(image_hu))[None, None]
            out = model(x)
    finally:
        model.train(was_training)
    return {
        "union": out.union_pred[0, 0].numpy(),
        "inter": out.inter_pred[0, 0].numpy(),
        "r": out.r_pred[0, 0].numpy(),
        "mcm": out.mcm(0),
    }
