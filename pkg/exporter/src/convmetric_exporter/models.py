"""Source models the exporter knows how to obtain.

The bundled miniature backbones are generated procedurally from a fixed
numpy seed (PCG64 streams are stable across platforms and versions), so
every export of them is byte-identical without shipping a checkpoint.
Torchvision-style backbones load from user-supplied weight files; nothing is
downloaded.
"""
from __future__ import annotations

from collections import OrderedDict

import numpy as np
import torch
from torch import nn

from .writer import ExportError

MINI_SEED = 20240817


def _seeded_conv(rng, out_ch, in_ch, ksize) -> nn.Conv2d:
    conv = nn.Conv2d(in_ch, out_ch, ksize, stride=1, padding=ksize // 2, bias=False)
    fan_in = in_ch * ksize * ksize
    weight = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_ch, in_ch, ksize, ksize))
    with torch.no_grad():
        conv.weight.copy_(torch.from_numpy(weight))
    return conv


def _mini(pool_layout: dict[int, type]) -> tuple[nn.Sequential, list[torch.Tensor]]:
    rng = np.random.default_rng(MINI_SEED)
    conv1 = _seeded_conv(rng, 16, 3, 3)
    conv2 = _seeded_conv(rng, 24, 16, 3)
    conv3 = _seeded_conv(rng, 32, 24, 3)
    calib = [torch.from_numpy(np.abs(rng.normal(0.0, 1.0, size=n))) for n in (16, 24, 32)]
    modules = []
    for i, conv in enumerate((conv1, conv2, conv3)):
        modules.append((f"conv{i + 1}", conv))
        modules.append((f"relu{i + 1}", nn.ReLU()))
        if i in pool_layout:
            modules.append((f"pool{i + 1}", pool_layout[i](2, 2)))
    features = nn.Sequential(OrderedDict(modules))
    return features.eval(), calib


def mini_model():
    """Three-stage bias-free backbone with average pooling (exact export path)."""
    return _mini({0: nn.AvgPool2d, 1: nn.AvgPool2d})


def mini_maxpool_model():
    """Variant with one mid-stack max pool, exercising the pool-mapping path."""
    return _mini({1: nn.MaxPool2d})


def backbone_from_files(arch: str, weights_path, calib_path=None):
    """Torchvision-style backbone with user-supplied weights.

    `weights_path` is a torch file holding the features state dict;
    `calib_path` optionally holds a list of per-stage vectors (all-ones when
    omitted). Biased convolutions are rejected later by the walker.
    """
    if arch != "alexnet":
        raise ExportError(f"unknown architecture {arch!r}; available: alexnet")
    from torchvision.models import alexnet

    model = alexnet(weights=None)
    state = torch.load(weights_path, map_location="cpu", weights_only=True)
    model.features.load_state_dict(state)
    features = model.features.eval()
    n_stages = sum(isinstance(m, nn.Conv2d) for m in features)
    if calib_path is not None:
        calib = [torch.as_tensor(v) for v in
                 torch.load(calib_path, map_location="cpu", weights_only=True)]
    else:
        widths = [m.out_channels for m in features if isinstance(m, nn.Conv2d)]
        calib = [torch.ones(w, dtype=torch.float64) for w in widths]
    if len(calib) != n_stages:
        raise ExportError(f"{len(calib)} calibration vectors for {n_stages} conv stages")
    return features, calib


SOURCES = {
    "mini": mini_model,
    "mini-maxpool": mini_maxpool_model,
}


def obtain(source: str, backbone_weights=None, calib=None):
    if source in SOURCES:
        return SOURCES[source]()
    if backbone_weights is None:
        raise ExportError(
            f"source {source!r} needs --backbone-weights (bundled sources: "
            + ", ".join(sorted(SOURCES)) + ")"
        )
    return backbone_from_files(source, backbone_weights, calib)
