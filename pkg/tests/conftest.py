import csv
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from percepattack import ConvMetricWeights, LayerSpec, Triplet, save_png
from percepattack import engine as eng

settings.register_profile("suite", deadline=None, max_examples=25, derandomize=True)
settings.load_profile("suite")


def margin_triplet(rng, prey_dist=0.01, other_dist=0.03, shape=(3, 16, 16)):
    """Triplet with analytically known L2 margins.

    prey = ref + prey_dist * (+-1 field) has MSE prey_dist^2 against ref and
    full-support perturbation direction, so a sign-following attack of budget
    eps raises its MSE to exactly (prey_dist + eps)^2 before clipping. The
    human vote points at the prey (i_1).
    """
    ref = rng.uniform(-0.5, 0.5, shape)
    prey = ref + prey_dist * rng.choice([-1.0, 1.0], size=shape)
    other = ref + other_dist * rng.choice([-1.0, 1.0], size=shape)
    return Triplet(ref, other, prey, human_judgment=1.0)


def smooth_image(rng, shape=(1, 32, 32), waves=3, amp=0.18):
    """Band-limited sinusoid mixture; sub-pixel shifts change it smoothly."""
    _, h, w = shape
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    img = np.zeros((h, w))
    for _ in range(waves):
        fy, fx = rng.uniform(0.03, 0.10, 2)
        ph = rng.uniform(0, 2 * np.pi, 2)
        img += rng.uniform(0.5, 1.0) * amp * np.sin(2 * np.pi * fy * yy + ph[0]) \
            * np.sin(2 * np.pi * fx * xx + ph[1])
    return np.broadcast_to(np.clip(img, -0.9, 0.9), shape).copy()


def column_shift(image, dx):
    """Shift image content by dx columns via the engine's bilinear warp."""
    _, h, w = image.shape
    flow = np.zeros((2, h, w))
    flow[1] = dx
    return eng.bilinear_warp(eng.Tensor(image), eng.Tensor(flow)).data.copy()


def shift_triplet(rng, prey_shift=0.2, other_shift=0.26, shape=(1, 32, 32), amp=0.18):
    """Triplet whose prey is a small sub-pixel shift of the reference content;
    a slightly larger warp pushes it past the other image's distance."""
    ref = smooth_image(rng, shape=shape, amp=amp)
    prey = column_shift(ref, prey_shift)
    other = column_shift(ref, other_shift)
    return Triplet(ref, other, prey, human_judgment=1.0)


def write_manifest_dataset(directory: Path, triplets) -> Path:
    """Materialize triplets as PNGs plus a manifest CSV; returns the CSV path."""
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, t in enumerate(triplets):
        names = (f"ref_{i}.png", f"p0_{i}.png", f"p1_{i}.png")
        for name, img in zip(names, (t.i_ref, t.i_0, t.i_1)):
            save_png(img, directory / name)
        rows.append((*names, t.human_judgment))
    manifest = directory / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["ref", "p0", "p1", "judge"])
        writer.writerows(rows)
    return manifest


def quantize(image):
    """Round-trip an image through the 8-bit PNG pixel grid."""
    return np.clip(np.rint((image + 1.0) * 127.5), 0, 255) / 127.5 - 1.0


def identity_conv_weights(channels=3):
    kern = np.eye(channels).reshape(channels, channels, 1, 1)
    return ConvMetricWeights(
        (LayerSpec(out_channels=channels, kernel_size=1),),
        (kern,),
        (np.ones(channels),),
    )


def random_conv_weights(rng, in_channels=3):
    """Three-layer conv stack with seeded kernels and non-negative calibration."""
    specs = (
        LayerSpec(8, 3, stride=1, padding=1),
        LayerSpec(12, 3, stride=1, padding=1, pool="avg2"),
        LayerSpec(8, 3, stride=1, padding=0),
    )
    chain = (in_channels, 8, 12)
    kernels = tuple(
        rng.normal(size=(spec.out_channels, cin, spec.kernel_size, spec.kernel_size)) * 0.4
        for spec, cin in zip(specs, chain)
    )
    calib = tuple(np.abs(rng.normal(size=spec.out_channels)) for spec in specs)
    return ConvMetricWeights(specs, kernels, calib)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def fixture_dir() -> Path:
    return Path(__file__).parent / "fixtures"
