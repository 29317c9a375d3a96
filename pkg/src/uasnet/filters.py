"""Parameter-free feature extractors used inside the Squeeze-and-Adapt block.

Both operators act on feature maps shaped ``(..., C, H, W)`` and treat every
channel independently. They accept numpy arrays or torch tensors and return
the same kind of object. Neither is differentiable in this package: callers
inside the network detach their inputs.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidInputError

SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.t().contiguous()
OTSU_BINS = 256


def _to_tensor(x):
    if isinstance(x, torch.Tensor):
        return x, False
    return torch.as_tensor(np.asarray(x, dtype=np.float64)), True


def _check(t: torch.Tensor):
    if t.dim() < 2:
        raise InvalidInputError(f"feature map needs at least 2 dims, got {tuple(t.shape)}")
    if not torch.isfinite(t).all():
        raise InvalidInputError("feature map contains non-finite values")


def sobel_magnitude(x):
    """Per-channel Sobel gradient magnitude with edge-replicate padding.

    Maps smaller than 3x3 in either spatial dim produce zeros.
    """
    t, was_numpy = _to_tensor(x)
    _check(t)
    h, w = t.shape[-2:]
    if h < 3 or w < 3:
        out = torch.zeros_like(t)
    else:
        lead = t.shape[:-2]
        flat = t.reshape(-1, 1, h, w)
        padded = F.pad(flat, (1, 1, 1, 1), mode="replicate")
        kernels = torch.stack([SOBEL_X, SOBEL_Y]).unsqueeze(1).to(dtype=t.dtype, device=t.device)
        # cross-correlation vs convolution only flips the sign of each response
        g = F.conv2d(padded, kernels)
        out = torch.sqrt(g[:, 0] ** 2 + g[:, 1] ** 2).reshape(*lead, h, w)
    return out.numpy() if was_numpy else out


def otsu_bin_indices(values: torch.Tensor, bins: int = OTSU_BINS) -> torch.Tensor:
    """Min-max normalise each map (last two dims) and return histogram bin ids."""
    flat = values.reshape(*values.shape[:-2], -1)
    lo = flat.min(dim=-1, keepdim=True).values
    hi = flat.max(dim=-1, keepdim=True).values
    span = hi - lo
    norm = (flat - lo) / torch.where(span > 0, span, torch.ones_like(span))
    return torch.clamp((norm * bins).floor().long(), 0, bins - 1), span.squeeze(-1) > 0


def otsu_threshold_bins(idx: torch.Tensor, bins: int = OTSU_BINS) -> torch.Tensor:
    """Best split bin per map: pixels with bin id > result form the upper class.

    Maximises ``w0 * w1 * (mu0 - mu1)**2`` over all ``bins`` splits, using bin
    centres as the class values. Ties resolve to the lowest split.
    """
    hist = torch.zeros(*idx.shape[:-1], bins, dtype=torch.float64, device=idx.device)
    hist.scatter_add_(-1, idx, torch.ones_like(idx, dtype=torch.float64))
    prob = hist / hist.sum(dim=-1, keepdim=True)
    centres = (torch.arange(bins, dtype=torch.float64, device=idx.device) + 0.5) / bins
    w0 = prob.cumsum(-1)
    m0 = (prob * centres).cumsum(-1)
    mean_total = m0[..., -1:]
    w1 = 1.0 - w0
    valid = (w0 > 1e-12) & (w1 > 1e-12)
    mu0 = m0 / torch.where(valid, w0, torch.ones_like(w0))
    mu1 = (mean_total - m0) / torch.where(valid, w1, torch.ones_like(w1))
    score = torch.where(valid, w0 * w1 * (mu0 - mu1) ** 2, torch.full_like(w0, -1.0))
    return torch.argmax(score, dim=-1)  # first maximum on ties


def otsu_binarize(x):
    """Per-channel Otsu binarisation on a 256-bin histogram.

    Each channel is min-max normalised to [0, 1] first, so the result is
    invariant to positive affine rescaling. Constant channels map to zeros.
    """
    t, was_numpy = _to_tensor(x)
    _check(t)
    idx, nonconstant = otsu_bin_indices(t.detach().to(torch.float64))
    k = otsu_threshold_bins(idx)
    out = (idx > k.unsqueeze(-1)) & nonconstant.unsqueeze(-1)
    out = out.reshape(t.shape).to(t.dtype)
    return out.numpy() if was_numpy else out


ADAPTIVE_METHODS = {
    "sobel": sobel_magnitude,
    "otsu": otsu_binarize,
}
