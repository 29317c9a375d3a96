"""Single-file model checkpoints.

A checkpoint is a ``torch.save`` dictionary::

    {
      "format": "uasnet-checkpoint",
      "version": 1,
      "arch": {...ArchConfig...},          # widths, FA-Cat levels, adaptive methods
      "adv": {...AdvConfig...} or None,    # present when G/D/C were built
      "seg_state": state_dict,
      "adv_state": state_dict or None,
      "train_state": {...} or None,        # optimisers, RNG, history (resume only)
    }
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Optional

import torch

from .adversarial import AdvConfig, AdversarialHeads
from .errors import DataError
from .model import ArchConfig, UASNet

CHECKPOINT_FORMAT = "uasnet-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, seg: UASNet, heads: Optional[AdversarialHeads] = None,
                    train_state: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": seg.config.to_dict(),
        "adv": heads.config.to_dict() if heads is not None else None,
        "seg_state": seg.state_dict(),
        "adv_state": heads.state_dict() if heads is not None else None,
        "train_state": train_state,
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def read_checkpoint(path) -> dict:
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    except Exception as exc:  # torch raises a zoo of unpickling errors
        raise DataError(f"unreadable checkpoint {path}: {exc}") from None
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    return payload


def load_models(path):
    """Rebuild ``(seg_net, heads_or_None, payload)`` from a checkpoint."""
    payload = read_checkpoint(path)
    seg = UASNet(ArchConfig(**payload["arch"]))
    seg.load_state_dict(payload["seg_state"])
    heads = None
    if payload.get("adv") is not None:
        heads = AdversarialHeads(AdvConfig(**payload["adv"]))
        heads.load_state_dict(payload["adv_state"])
    seg.eval()
    if heads is not None:
        heads.eval()
    return seg, heads, payload
