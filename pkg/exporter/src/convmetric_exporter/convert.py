"""Torch-module walking and the source-side distance computation.

A source model is a feature extractor built from Conv2d / ReLU / pooling
stages plus one non-negative calibration vector per stage. The walker groups
a Sequential into those stages and refuses anything the PAMW vocabulary
cannot express, naming the offending layer. Max pooling is mapped to 2x2
average pooling with a warning; the fixture tolerance is widened when that
mapping fires because the exported metric then differs from the source.
"""
from __future__ import annotations

import warnings

import numpy as np
import torch
from torch import nn

from .writer import ExportedLayer, ExportError

NORMALIZE_EPS = 1e-10


def _as_square(value) -> int:
    if isinstance(value, (tuple, list)):
        if value[0] != value[1]:
            raise ExportError(f"anisotropic geometry {value}")
        return int(value[0])
    return int(value)


def extract_layers(features: nn.Sequential, calib: list[torch.Tensor]) -> tuple[list[ExportedLayer], bool]:
    """Group conv/relu/pool runs into exported stages.

    Returns the stages and whether any max-pool was mapped to average
    pooling. Calibration vectors pair with stages in order.
    """
    modules = list(features)
    stages: list[ExportedLayer] = []
    pool_mapped = False
    i = 0
    while i < len(modules):
        conv = modules[i]
        if not isinstance(conv, nn.Conv2d):
            raise ExportError(f"layer {i} ({type(conv).__name__}): expected Conv2d at stage start")
        if conv.bias is not None:
            raise ExportError(f"layer {i} (Conv2d): biased convolution is not expressible")
        if conv.dilation != (1, 1) or conv.groups != 1:
            raise ExportError(f"layer {i} (Conv2d): dilation/groups unsupported")
        kernel_size = _as_square(conv.kernel_size)
        stride = _as_square(conv.stride)
        padding_raw = conv.padding
        if isinstance(padding_raw, str):
            raise ExportError(f"layer {i} (Conv2d): string padding {padding_raw!r} unsupported")
        padding = _as_square(padding_raw)
        i += 1

        if i >= len(modules) or not isinstance(modules[i], nn.ReLU):
            found = type(modules[i]).__name__ if i < len(modules) else "end of model"
            raise ExportError(f"layer {i} ({found}): expected ReLU activation after Conv2d")
        i += 1

        pool = "none"
        if i < len(modules) and isinstance(modules[i], (nn.MaxPool2d, nn.AvgPool2d)):
            pool_mod = modules[i]
            ksize = _as_square(pool_mod.kernel_size)
            pstride = _as_square(pool_mod.stride if pool_mod.stride is not None else pool_mod.kernel_size)
            if isinstance(pool_mod, nn.AvgPool2d):
                if ksize != 2 or pstride != 2:
                    raise ExportError(
                        f"layer {i} (AvgPool2d): only 2x2 stride-2 average pooling is expressible"
                    )
            else:
                warnings.warn(
                    f"layer {i}: MaxPool2d({ksize}, stride={pstride}) mapped to 2x2 average "
                    "pooling; exported scores will drift from the source model",
                    stacklevel=2,
                )
                pool_mapped = True
            pool = "avg2"
            i += 1

        stage_index = len(stages)
        if stage_index >= len(calib):
            raise ExportError(f"missing calibration vector for stage {stage_index}")
        kernel = conv.weight.detach().to(torch.float64).numpy()
        vector = calib[stage_index].detach().to(torch.float64).numpy().reshape(-1)
        stages.append(ExportedLayer(kernel=kernel, calib=vector,
                                    stride=stride, padding=padding, pool=pool))

    if len(calib) != len(stages):
        raise ExportError(f"{len(calib)} calibration vectors for {len(stages)} stages")
    return stages, pool_mapped


def source_distance(features: nn.Sequential, calib: list[torch.Tensor],
                    image_a: np.ndarray, image_b: np.ndarray) -> float:
    """Score an image pair with the source model's own forward pass.

    Runs the original modules (max pooling included) in float64: per stage,
    channel-unit-normalized features of both images, squared difference,
    calibration-weighted channel sum, spatial mean, summed over stages.
    """
    def taps(image: np.ndarray) -> list[torch.Tensor]:
        # One tap per stage: after the relu, or after the pool when present.
        x = torch.from_numpy(image).to(torch.float64).unsqueeze(0)
        collected = []
        modules = list(features)
        i = 0
        while i < len(modules):
            x = modules[i].double()(x)  # conv
            i += 1
            x = modules[i](x)  # relu
            i += 1
            if i < len(modules) and isinstance(modules[i], (nn.MaxPool2d, nn.AvgPool2d)):
                x = modules[i](x)
                i += 1
            collected.append(x)
        return collected

    total = 0.0
    with torch.no_grad():
        for feat_a, feat_b, vector in zip(taps(image_a), taps(image_b), calib):
            norm_a = feat_a / torch.sqrt((feat_a * feat_a).sum(dim=1, keepdim=True) + NORMALIZE_EPS)
            norm_b = feat_b / torch.sqrt((feat_b * feat_b).sum(dim=1, keepdim=True) + NORMALIZE_EPS)
            diff = (norm_a - norm_b) ** 2
            weighted = (diff * vector.to(torch.float64).view(1, -1, 1, 1)).sum(dim=1)
            total += float(weighted.mean())
    return total
