"""Export orchestration: walk the source, write the container, record the fixture."""
from __future__ import annotations

import json
import warnings
import zlib
from pathlib import Path

import numpy as np
from PIL import Image

from .convert import extract_layers, source_distance
from .models import MINI_SEED, obtain
from .writer import write_pamw

FIXTURE_TOLERANCE = 1e-4
FIXTURE_TOLERANCE_POOL_MAPPED = 1e-2


def fixture_images(size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic image pair: a smooth pattern and a smoothly distorted copy.

    The distortion is band-limited rather than white noise so the scores of
    pooled feature stacks stay stable under the max-to-average mapping.
    """
    rng = np.random.default_rng(MINI_SEED + 1)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")

    def waves(count, lo, hi):
        total = np.zeros((3, size, size))
        for c in range(3):
            for _ in range(count):
                fy, fx = rng.uniform(lo, hi, 2)
                phase = rng.uniform(0, 2 * np.pi, 2)
                total[c] += np.sin(2 * np.pi * fy * yy + phase[0]) \
                    * np.cos(2 * np.pi * fx * xx + phase[1])
        return total

    image_a = waves(2, 0.02, 0.09) * 0.35
    image_b = np.clip(image_a + 0.12 * waves(1, 0.02, 0.06), -1.0, 1.0)
    return _quantize(np.clip(image_a, -1.0, 1.0)), _quantize(image_b)


def _quantize(image: np.ndarray) -> np.ndarray:
    pixels = np.clip(np.rint((image + 1.0) * 127.5), 0, 255).astype(np.uint8)
    return pixels.astype(np.float64) / 127.5 - 1.0


def _save_png(image: np.ndarray, path: Path) -> None:
    pixels = np.clip(np.rint((image + 1.0) * 127.5), 0, 255).astype(np.uint8)
    Image.fromarray(pixels.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def export_weights(source: str, out_dir, backbone_weights=None, calib=None) -> dict:
    """Write weights.pamw, the fixture image pair, and fixture.json.

    Returns the fixture record. The recorded distance is the source model's
    own float64 score on the pair; consumers replay it through the exported
    file and must agree within the recorded tolerance.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    features, calib_vectors = obtain(source, backbone_weights, calib)

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        layers, pool_mapped = extract_layers(features, calib_vectors)
    for warning in caught:
        print(f"warning: {warning.message}")

    weights_path = out_dir / "weights.pamw"
    write_pamw(layers, weights_path)
    # The fixture checksum covers the file as emitted, trailer included.
    crc = zlib.crc32(weights_path.read_bytes()) & 0xFFFFFFFF

    image_a, image_b = fixture_images()
    _save_png(image_a, out_dir / "img_a.png")
    _save_png(image_b, out_dir / "img_b.png")
    distance = source_distance(features, calib_vectors, image_a, image_b)

    record = {
        "source": source,
        "weights_file": "weights.pamw",
        "image_a": "img_a.png",
        "image_b": "img_b.png",
        "distance": round(distance, 6),
        "crc32": crc,
        "pool_mapped": pool_mapped,
        "tolerance": FIXTURE_TOLERANCE_POOL_MAPPED if pool_mapped else FIXTURE_TOLERANCE,
    }
    (out_dir / "fixture.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return record
