"""Overlap metrics, HU density curves and FA-Cat activation heatmaps."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.integrate import trapezoid

from .errors import EmptyRegionError, InvalidInputError
from .model import UASNet, normalize_hu

HU_GRID = np.arange(-1200.0, 400.0 + 1e-9, 4.0)


def _pair(pred, target):
    p = np.asarray(pred).astype(bool)
    t = np.asarray(target).astype(bool)
    if p.shape != t.shape:
        raise InvalidInputError(f"mask shapes differ: {p.shape} vs {t.shape}")
    return p, t


def dice(pred, target) -> float:
    """2|P & T| / (|P| + |T|); two empty masks score 1."""
    p, t = _pair(pred, target)
    total = int(p.sum()) + int(t.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & t).sum()) / total


def iou(pred, target) -> float:
    """|P & T| / |P | T|; two empty masks score 1."""
    p, t = _pair(pred, target)
    union = int((p | t).sum())
    if union == 0:
        return 1.0
    return int((p & t).sum()) / union


@dataclass
class DensityCurve:
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float
    n: int = 0

    def integral(self) -> float:
        return float(trapezoid(self.density, self.grid))

    def mode(self) -> float:
        return float(self.grid[int(np.argmax(self.density))])

    def normalized(self) -> np.ndarray:
        area = self.integral()
        if area <= 0:
            raise InvalidInputError("density curve has zero mass on its grid")
        return self.density / area


def silverman_bandwidth(values) -> float:
    """0.9 * min(std, IQR / 1.34) * n^(-1/5)."""
    x = np.asarray(values, dtype=np.float64)
    n = x.size
    std = x.std(ddof=1) if n > 1 else 0.0
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(std, (q75 - q25) / 1.34) if q75 > q25 else std
    return float(0.9 * spread * n ** (-0.2))


def kde(values, grid=HU_GRID, bandwidth=None) -> DensityCurve:
    """Gaussian kernel density of ``values`` evaluated on ``grid``.

    The bandwidth never drops below the grid spacing so degenerate samples
    still integrate to one.
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size == 0:
        raise EmptyRegionError("cannot estimate a density from zero values")
    grid = np.asarray(grid, dtype=np.float64)
    step = float(np.min(np.diff(grid))) if grid.size > 1 else 1.0
    h = silverman_bandwidth(x) if bandwidth is None else float(bandwidth)
    h = max(h, step)
    density = np.zeros_like(grid)
    chunk = max(1, 2_000_000 // grid.size)
    for start in range(0, x.size, chunk):
        z = (grid[None, :] - x[start:start + chunk, None]) / h
        density += np.exp(-0.5 * z * z).sum(axis=0)
    density /= x.size * h * np.sqrt(2.0 * np.pi)
    return DensityCurve(grid=grid, density=density, bandwidth=h, n=int(x.size))


def hu_kde(image, region, bandwidth=None, grid=HU_GRID) -> DensityCurve:
    """Density of the HU values inside ``region``."""
    img = np.asarray(image)
    reg = np.asarray(region).astype(bool)
    if img.shape != reg.shape:
        raise InvalidInputError(f"image {img.shape} and region {reg.shape} differ")
    if not reg.any():
        raise EmptyRegionError("region is empty")
    return kde(img[reg], grid, bandwidth)


def distribution_distance(a: DensityCurve, b: DensityCurve) -> float:
    """L1 distance between two area-normalised curves on a shared grid (0..2)."""
    if a.grid.shape != b.grid.shape or not np.allclose(a.grid, b.grid):
        raise InvalidInputError("density curves use different grids")
    return float(trapezoid(np.abs(a.normalized() - b.normalized()), a.grid))


def write_curve_csv(curve: DensityCurve, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["hu", "density"])
        for g, d in zip(curve.grid, curve.density):
            w.writerow([f"{g:.1f}", f"{d:.10e}"])
    return path


def read_curve_csv(path, bandwidth: float = float("nan")) -> DensityCurve:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return DensityCurve(grid=data[:, 0], density=data[:, 1], bandwidth=bandwidth)


def normalize_unit(x: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; constant maps become zeros."""
    x = np.asarray(x, dtype=np.float32)
    lo, hi = float(x.min()), float(x.max())
    if hi - lo <= 0:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def activation_heatmap(model: UASNet, image_hu, layer_tag: str) -> np.ndarray:
    """Channel-mean |activation| of one FA-Cat output, scaled to [0, 1] at input size."""
    block = model.fa_cat_module(layer_tag)
    captured = {}
    handle = block.register_forward_hook(lambda m, i, o: captured.setdefault("out", o.detach()))
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            x = torch.from_numpy(normalize_hu(image_hu))[None, None]
            model(x)
    finally:
        handle.remove()
        model.train(was_training)
    act = captured["out"][0].abs().mean(dim=0, keepdim=True)[None]
    h, w = np.asarray(image_hu).shape
    if act.shape[-2:] != (h, w):
        act = F.interpolate(act, size=(h, w), mode="bilinear", align_corners=False)
    return normalize_unit(act[0, 0].numpy())


def save_png(array, path, vmin: float = 0.0, vmax: float = 1.0) -> Path:
    """Write a 2-D map as 8-bit grayscale PNG."""
    from PIL import Image

    a = np.asarray(array, dtype=np.float64)
    scaled = np.clip((a - vmin) / (vmax - vmin), 0.0, 1.0)
    Image.fromarray(np.round(scaled * 255).astype(np.uint8), mode="L").save(path)
    return Path(path)


# ---------------------------------------------------------------------------
# pooled HC/LC analysis

CURVE_KEYS = ("real_hc", "real_lc", "pred_hc", "pred_lc")


def pooled_region_values(images, regions) -> np.ndarray:
    """Concatenate the HU values under each region across samples."""
    chunks = []
    for img, reg in zip(images, regions):
        img = np.asarray(img)
        reg = np.asarray(reg).astype(bool)
        if img.shape != reg.shape:
            raise InvalidInputError(f"image {img.shape} and region {reg.shape} differ")
        chunks.append(img[reg].astype(np.float64))
    values = np.concatenate(chunks) if chunks else np.zeros(0)
    if values.size == 0:
        raise EmptyRegionError("all regions are empty")
    return values


def hu_curve_set(samples, predictions=None, bandwidth=None, grid=HU_GRID, skip_empty_predictions=False):
    """Real (and optionally predicted) HC/LC density curves pooled over samples.

    ``samples`` are annotated :class:`AnnotationSet` objects; ``predictions``
    is an aligned list of predicted :class:`MultiConfidenceMask`. Returns
    ``(curves, distances)``; distances are empty without predictions.
    With ``skip_empty_predictions`` a predicted region that is empty in every
    sample drops its curve and distance instead of raising.
    """
    from .masks import hc_region, lc_region

    samples = list(samples)
    if predictions is not None:
        if len(predictions) != len(samples):
            raise InvalidInputError("predictions and samples differ in length")
        predictions = [p for p, s in zip(predictions, samples) if s.n_annotations > 0]
    samples = [s for s in samples if s.n_annotations > 0]
    if not samples:
        raise EmptyRegionError("no annotated samples")
    images = [s.image for s in samples]
    curves = {
        "real_hc": kde(pooled_region_values(images, [hc_region(s.masks) for s in samples]), grid, bandwidth),
        "real_lc": kde(pooled_region_values(images, [lc_region(s.masks) for s in samples]), grid, bandwidth),
    }
    distances = {}
    if predictions is not None:
        for key in ("hc", "lc"):
            try:
                values = pooled_region_values(images, [getattr(p, key) for p in predictions])
            except EmptyRegionError:
                if skip_empty_predictions:
                    continue
                raise
            curves[f"pred_{key}"] = kde(values, grid, bandwidth)
            distances[key] = distribution_distance(curves[f"real_{key}"], curves[f"pred_{key}"])
    return curves, distances
