"""Differentiable full-reference similarity metrics.

All metrics follow a distance convention: smaller means more similar, and
d(x, x) == 0 for the classical metrics. Images are (C, H, W) float64 arrays
in the attack range [-1, 1]; the SSIM family uses dynamic range 2 accordingly.

Each metric exposes both a plain score (``distance``) and a graph-building
form (``graph``) so attacks can differentiate scores with respect to images
or flow fields through the engine.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .engine import (
    ShapeError,
    Tensor,
    avg_pool2,
    conv2d,
    gaussian_filter,
    global_mean,
    normalize_channels,
    power,
    relu,
    square,
)

MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


class MetricError(ValueError):
    """Invalid metric input (shape mismatch, image too small, bad weights)."""


def _check_pair(a: Tensor, b: Tensor) -> None:
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise MetricError(f"images must be (C, H, W), got {a.data.shape} and {b.data.shape}")
    if a.data.shape != b.data.shape:
        raise MetricError(f"image shapes differ: {a.data.shape} vs {b.data.shape}")


class Metric:
    """Base: a named, pure, deterministic distance over image pairs."""

    name = "metric"
    differentiable = True

    def graph(self, a: Tensor, b: Tensor) -> Tensor:
        raise NotImplementedError

    def distance(self, a: np.ndarray, b: np.ndarray) -> float:
        return self.graph(Tensor(a), Tensor(b)).item()


class L2Distance(Metric):
    """Mean squared error over all elements in [-1, 1] space."""

    name = "l2"

    def graph(self, a: Tensor, b: Tensor) -> Tensor:
        _check_pair(a, b)
        return global_mean(square(a - b))


class SsimDistance(Metric):
    """1 - mean structural-similarity map.

    Per-channel 11x11 Gaussian window (sigma 1.5), valid-region maps (no
    padding), stability constants K1=0.01 / K2=0.03 at dynamic range 2.
    """

    name = "ssim"

    def __init__(self, window: int = 11, sigma: float = 1.5,
                 k1: float = 0.01, k2: float = 0.03, data_range: float = 2.0):
        self.window = window
        self.sigma = sigma
        self.c1 = (k1 * data_range) ** 2
        self.c2 = (k2 * data_range) ** 2

    def _terms(self, a: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
        """Luminance and contrast-structure maps, each (C, h', w')."""
        mu_a = gaussian_filter(a, self.window, self.sigma)
        mu_b = gaussian_filter(b, self.window, self.sigma)
        var_a = gaussian_filter(a * a, self.window, self.sigma) - mu_a * mu_a
        var_b = gaussian_filter(b * b, self.window, self.sigma) - mu_b * mu_b
        cov = gaussian_filter(a * b, self.window, self.sigma) - mu_a * mu_b
        lum = (2.0 * mu_a * mu_b + self.c1) / (mu_a * mu_a + mu_b * mu_b + self.c1)
        cs = (2.0 * cov + self.c2) / (var_a + var_b + self.c2)
        return lum, cs

    def graph(self, a: Tensor, b: Tensor) -> Tensor:
        _check_pair(a, b)
        _, h, w = a.data.shape
        if min(h, w) < self.window:
            raise MetricError(f"image {h}x{w} smaller than SSIM window {self.window}")
        lum, cs = self._terms(a, b)
        return 1.0 - global_mean(lum * cs)


class MsssimDistance(Metric):
    """Multi-scale SSIM distance with 2x2 average-pool downsampling.

    The scale count adapts to the input so the coarsest scale still fits the
    window (three scales at 64x64, capped at five). Standard per-scale
    exponents are renormalized over the scales in use. Contrast-structure
    factors are clamped at zero before exponentiation when combining scales;
    the single-scale case reduces to ``SsimDistance`` exactly.
    """

    name = "msssim"

    def __init__(self, scales: int | None = None, window: int = 11, sigma: float = 1.5):
        self.scales = scales
        self._ssim = SsimDistance(window=window, sigma=sigma)
        self.window = window

    def scale_count(self, h: int, w: int) -> int:
        if self.scales is not None:
            return self.scales
        s = 1
        while s < len(MSSSIM_WEIGHTS) and min(h, w) >= self.window * 2 ** s:
            s += 1
        return s

    def graph(self, a: Tensor, b: Tensor) -> Tensor:
        _check_pair(a, b)
        _, h, w = a.data.shape
        n_scales = self.scale_count(h, w)
        if n_scales < 1 or min(h, w) < self.window * 2 ** (n_scales - 1):
            raise MetricError(
                f"image {h}x{w} too small for {n_scales} scales with window {self.window}"
            )
        weights = np.asarray(MSSSIM_WEIGHTS[:n_scales])
        weights = weights / weights.sum()

        product: Tensor | None = None
        x, y = a, b
        for s in range(n_scales):
            lum, cs = self._ssim._terms(x, y)
            if s < n_scales - 1:
                factor = power(relu(global_mean(cs)), float(weights[s]))
                x, y = avg_pool2(x), avg_pool2(y)
            else:
                full = global_mean(lum * cs)
                if n_scales > 1:
                    full = relu(full)
                factor = power(full, float(weights[s]))
            product = factor if product is None else product * factor
        return 1.0 - product


# -- conv-feature metric -----------------------------------------------------


@dataclass(frozen=True)
class LayerSpec:
    """One stage of the feature extractor: conv -> relu -> optional 2x2 avg pool."""

    out_channels: int
    kernel_size: int
    stride: int = 1
    padding: int = 0
    activation: str = "relu"
    pool: str = "none"  # "none" | "avg2"


@dataclass
class ConvMetricWeights:
    """Layer topology, convolution kernels, and per-channel calibration weights."""

    layers: tuple[LayerSpec, ...]
    kernels: tuple[np.ndarray, ...] = field(repr=False)
    calib: tuple[np.ndarray, ...] = field(repr=False)

    def __post_init__(self) -> None:
        self.kernels = tuple(np.asarray(k, dtype=np.float64) for k in self.kernels)
        self.calib = tuple(np.asarray(c, dtype=np.float64) for c in self.calib)
        self.validate()

    @property
    def input_channels(self) -> int:
        return int(self.kernels[0].shape[1])

    def validate(self) -> None:
        if not (len(self.layers) == len(self.kernels) == len(self.calib)) or not self.layers:
            raise MetricError("layers, kernels and calib must be non-empty and equal length")
        prev_out = self.kernels[0].shape[1]
        for i, (spec, kern, cal) in enumerate(zip(self.layers, self.kernels, self.calib)):
            if spec.activation != "relu":
                raise MetricError(f"layer {i}: unsupported activation {spec.activation!r}")
            if spec.pool not in ("none", "avg2"):
                raise MetricError(f"layer {i}: unsupported pool {spec.pool!r}")
            expected = (spec.out_channels, prev_out, spec.kernel_size, spec.kernel_size)
            if kern.ndim != 4 or kern.shape != expected:
                raise MetricError(
                    f"layer {i}: kernel shape {kern.shape} inconsistent with chain, "
                    f"expected {expected}"
                )
            if cal.shape != (spec.out_channels,):
                raise MetricError(
                    f"layer {i}: calib shape {cal.shape}, expected ({spec.out_channels},)"
                )
            if np.any(cal < 0):
                raise MetricError(f"layer {i}: negative calibration weight")
            if spec.stride < 1 or spec.padding < 0 or spec.kernel_size < 1:
                raise MetricError(f"layer {i}: invalid conv geometry {spec}")
            prev_out = spec.out_channels


class ConvMetricDistance(Metric):
    """Calibrated feature-difference distance over a small conv stack.

    For each layer the features of both images are channel-unit-normalized
    (eps 1e-10 under the root); the squared difference is channel-summed with
    the layer's non-negative calibration weights, spatially averaged, and the
    per-layer scores are summed.
    """

    name = "conv"

    def __init__(self, weights: ConvMetricWeights):
        self.weights = weights

    def _features(self, x: Tensor) -> list[Tensor]:
        feats = []
        for spec, kern in zip(self.weights.layers, self.weights.kernels):
            x = relu(conv2d(x, kern, stride=spec.stride, padding=spec.padding))
            if spec.pool == "avg2":
                x = avg_pool2(x)
            feats.append(x)
        return feats

    def graph(self, a: Tensor, b: Tensor) -> Tensor:
        _check_pair(a, b)
        if a.data.shape[0] != self.weights.input_channels:
            raise MetricError(
                f"metric expects {self.weights.input_channels} channels, image has {a.data.shape[0]}"
            )
        total: Tensor | None = None
        for fa, fb, cal in zip(self._features(a), self._features(b), self.weights.calib):
            diff = square(normalize_channels(fa) - normalize_channels(fb))
            weighted = conv2d(diff, cal.reshape(1, cal.size, 1, 1))
            score = global_mean(weighted)
            total = score if total is None else total + score
        return total


# -- portable weight file (PAMW) ---------------------------------------------

WEIGHTS_MAGIC = b"PAMW"
WEIGHTS_VERSION = 1
_ACTIVATION_CODES = {"relu": 0}
_POOL_CODES = {"none": 0, "avg2": 1}
_ACTIVATION_NAMES = {v: k for k, v in _ACTIVATION_CODES.items()}
_POOL_NAMES = {v: k for k, v in _POOL_CODES.items()}


class WeightsFormatError(ValueError):
    """Corrupt, truncated, or semantically invalid weight file."""


def save_conv_weights(weights: ConvMetricWeights, path) -> None:
    """Write the little-endian PAMW container; load() round-trips bit-exactly."""
    weights.validate()
    parts = [WEIGHTS_MAGIC, struct.pack("<II", WEIGHTS_VERSION, len(weights.layers))]
    for spec, kern, cal in zip(weights.layers, weights.kernels, weights.calib):
        parts.append(
            struct.pack(
                "<7I",
                kern.shape[1],
                spec.out_channels,
                spec.kernel_size,
                spec.stride,
                spec.padding,
                _ACTIVATION_CODES[spec.activation],
                _POOL_CODES[spec.pool],
            )
        )
        parts.append(np.ascontiguousarray(kern, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(cal, dtype="<f8").tobytes())
    payload = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def load_conv_weights(path) -> ConvMetricWeights:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise WeightsFormatError("file too short for PAMW header")
    if blob[:4] != WEIGHTS_MAGIC:
        raise WeightsFormatError(f"bad magic {blob[:4]!r}, expected {WEIGHTS_MAGIC!r}")
    version, n_layers = struct.unpack_from("<II", blob, 4)
    if version != WEIGHTS_VERSION:
        raise WeightsFormatError(f"unsupported version {version}")
    stored_crc = struct.unpack_from("<I", blob, len(blob) - 4)[0]
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored_crc:
        raise WeightsFormatError("checksum mismatch (file truncated or corrupt)")

    offset = 12
    end = len(blob) - 4
    layers, kernels, calibs = [], [], []
    for i in range(n_layers):
        if offset + 28 > end:
            raise WeightsFormatError(f"layer {i}: header extends past payload")
        in_ch, out_ch, ksize, stride, padding, act, pool = struct.unpack_from("<7I", blob, offset)
        offset += 28
        if act not in _ACTIVATION_NAMES:
            raise WeightsFormatError(f"layer {i}: unknown activation code {act}")
        if pool not in _POOL_NAMES:
            raise WeightsFormatError(f"layer {i}: unknown pool code {pool}")
        n_kernel = out_ch * in_ch * ksize * ksize
        n_bytes = 8 * (n_kernel + out_ch)
        if offset + n_bytes > end:
            raise WeightsFormatError(f"layer {i}: arrays extend past payload")
        kern = np.frombuffer(blob, dtype="<f8", count=n_kernel, offset=offset)
        kern = kern.reshape(out_ch, in_ch, ksize, ksize).astype(np.float64)
        offset += 8 * n_kernel
        cal = np.frombuffer(blob, dtype="<f8", count=out_ch, offset=offset).astype(np.float64)
        offset += 8 * out_ch
        layers.append(
            LayerSpec(
                out_channels=out_ch,
                kernel_size=ksize,
                stride=stride,
                padding=padding,
                activation=_ACTIVATION_NAMES[act],
                pool=_POOL_NAMES[pool],
            )
        )
        kernels.append(kern)
        calibs.append(cal)
    if offset != end:
        raise WeightsFormatError(f"{end - offset} trailing payload bytes after last layer")
    try:
        return ConvMetricWeights(tuple(layers), tuple(kernels), tuple(calibs))
    except MetricError as exc:
        raise WeightsFormatError(str(exc)) from exc


# -- registry ----------------------------------------------------------------

METRIC_NAMES = ("l2", "ssim", "msssim", "conv")


def make_metric(name: str, weights_path=None) -> Metric:
    """Instantiate a metric by CLI name; 'conv' requires a PAMW weights file."""
    if name == "l2":
        return L2Distance()
    if name == "ssim":
        return SsimDistance()
    if name == "msssim":
        return MsssimDistance()
    if name == "conv":
        if weights_path is None:
            raise MetricError("metric 'conv' requires a weights file")
        return ConvMetricDistance(load_conv_weights(weights_path))
    raise MetricError(f"unknown metric {name!r}; available: {', '.join(METRIC_NAMES)}")
