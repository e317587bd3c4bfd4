"""Dataset ingestion: PNG triplets from manifest CSVs or BAPPS-style trees.

Pixels are mapped to the attack range via v / 127.5 - 1, so 0 -> -1.0 and
255 -> +1.0. Judgment files use the NPY v1.0 container; the parser here is
written against the format description (magic, version, ASCII header dict,
little-endian float payload) rather than delegating to numpy.
"""
from __future__ import annotations

import ast
import csv
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .attacks import Triplet


class DataError(ValueError):
    """Malformed manifest, image, or judgment file."""


def load_png(path) -> np.ndarray:
    """Read an 8-bit grayscale or RGB PNG as a (C, H, W) array in [-1, 1]."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"image not found: {path}")
    with Image.open(path) as img:
        if img.mode == "L":
            arr = np.asarray(img, dtype=np.uint8)[None, :, :]
        elif img.mode == "RGB":
            arr = np.asarray(img, dtype=np.uint8).transpose(2, 0, 1)
        else:
            raise DataError(f"{path}: unsupported mode {img.mode!r}, need 8-bit gray or RGB")
    return arr.astype(np.float64) / 127.5 - 1.0


def save_png(image: np.ndarray, path) -> None:
    """Write a (C, H, W) array in [-1, 1] as an 8-bit PNG."""
    image = np.asarray(image)
    arr = np.clip(np.rint((image + 1.0) * 127.5), 0, 255).astype(np.uint8)
    if arr.shape[0] == 1:
        pil = Image.fromarray(arr[0], mode="L")
    elif arr.shape[0] == 3:
        pil = Image.fromarray(arr.transpose(1, 2, 0), mode="RGB")
    else:
        raise DataError(f"cannot encode {arr.shape[0]}-channel image")
    pil.save(path, format="PNG")


_NPY_MAGIC = b"\x93NUMPY"


def read_npy_scalar(path) -> float:
    """Parse a single-float NPY v1.0 array (the judgment file format)."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 10 or blob[:6] != _NPY_MAGIC:
        raise DataError(f"{path}: not an NPY file (bad magic)")
    major, minor = blob[6], blob[7]
    if (major, minor) != (1, 0):
        raise DataError(f"{path}: unsupported NPY version {major}.{minor}")
    header_len = struct.unpack_from("<H", blob, 8)[0]
    header_end = 10 + header_len
    if len(blob) < header_end:
        raise DataError(f"{path}: truncated NPY header")
    try:
        header = ast.literal_eval(blob[10:header_end].decode("ascii").strip())
    except (ValueError, SyntaxError, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: unparseable NPY header: {exc}") from exc
    descr = header.get("descr")
    shape = header.get("shape")
    if header.get("fortran_order"):
        raise DataError(f"{path}: fortran-order NPY not supported")
    if descr not in ("<f4", "<f8"):
        raise DataError(f"{path}: expected little-endian float array, got descr {descr!r}")
    count = 1
    for dim in shape:
        count *= dim
    if count != 1:
        raise DataError(f"{path}: expected a single-value array, got shape {shape}")
    itemsize = 4 if descr == "<f4" else 8
    if len(blob) < header_end + itemsize:
        raise DataError(f"{path}: truncated NPY payload")
    value = np.frombuffer(blob, dtype=descr, count=1, offset=header_end)[0]
    return float(value)


def write_npy_scalar(value: float, path, descr: str = "<f8") -> None:
    """Emit a minimal NPY v1.0 single-float file (fixtures, exports)."""
    header = f"{{'descr': '{descr}', 'fortran_order': False, 'shape': (1,), }}"
    # Total header section (magic..newline) padded to a multiple of 64.
    base = len(_NPY_MAGIC) + 2 + 2
    pad = 64 - (base + len(header) + 1) % 64
    header = header + " " * pad + "\n"
    with open(path, "wb") as fh:
        fh.write(_NPY_MAGIC)
        fh.write(bytes([1, 0]))
        fh.write(struct.pack("<H", len(header)))
        fh.write(header.encode("ascii"))
        fh.write(np.array([value], dtype=descr).tobytes())


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with the align-corners=false convention, edge-clamped."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise DataError(f"resize expects (C, H, W), got {image.shape}")
    if out_h < 1 or out_w < 1:
        raise DataError(f"output dims must be >= 1, got {out_h}x{out_w}")
    _, h, w = image.shape

    def _axis_coords(n_out: int, n_in: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        i0 = np.minimum(np.floor(src), max(n_in - 2, 0)).astype(np.intp)
        return i0, np.minimum(i0 + 1, n_in - 1), src - i0

    r0, r1, tr = _axis_coords(out_h, h)
    c0, c1, tc = _axis_coords(out_w, w)
    top = image[:, r0, :][:, :, c0] * (1.0 - tc) + image[:, r0, :][:, :, c1] * tc
    bot = image[:, r1, :][:, :, c0] * (1.0 - tc) + image[:, r1, :][:, :, c1] * tc
    return top * (1.0 - tr)[None, :, None] + bot * tr[None, :, None]


def _maybe_resize(img: np.ndarray, resize_to) -> np.ndarray:
    if resize_to is None:
        return img
    return resize_bilinear(img, resize_to[0], resize_to[1])


def ingest_manifest(path, resize_to: tuple[int, int] | None = None) -> list[Triplet]:
    """Load triplets from a CSV with header ref,p0,p1,judge.

    Image paths are resolved relative to the manifest's directory; judge is
    the fraction of raters preferring p1 and must lie in [0, 1].
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    base = path.parent
    triplets = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"ref", "p0", "p1", "judge"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise DataError(
                f"{path}: manifest header must contain ref,p0,p1,judge, got {reader.fieldnames}"
            )
        for line_no, row in enumerate(reader, start=2):
            try:
                judge = float(row["judge"])
            except (TypeError, ValueError) as exc:
                raise DataError(f"{path}:{line_no}: bad judge value {row['judge']!r}") from exc
            if not 0.0 <= judge <= 1.0 or not np.isfinite(judge):
                raise DataError(f"{path}:{line_no}: judge {judge} outside [0, 1]")
            images = [
                _maybe_resize(load_png(base / row[key]), resize_to)
                for key in ("ref", "p0", "p1")
            ]
            triplets.append(Triplet(images[0], images[1], images[2], judge))
    return triplets


def _bapps_leaf_dirs(root: Path) -> list[Path]:
    if all((root / sub).is_dir() for sub in ("ref", "p0", "p1", "judge")):
        return [root]
    leaves = [
        child for child in sorted(root.iterdir())
        if child.is_dir() and all((child / sub).is_dir() for sub in ("ref", "p0", "p1", "judge"))
    ]
    if not leaves:
        raise DataError(f"{root}: no ref/p0/p1/judge directory structure found")
    return leaves


def ingest_bapps(root, resize_to: tuple[int, int] | None = None,
                 unanimous_only: bool = False) -> list[Triplet]:
    """Load triplets from ref/, p0/, p1/, judge/ directories with matching basenames.

    `root` may contain the four directories directly or hold category
    subdirectories that do (they are walked in sorted order). With
    `unanimous_only` the judgment file is read first and split votes are
    skipped without decoding their images, which keeps full-dataset runs
    within memory.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root not found: {root}")
    triplets = []
    for leaf in _bapps_leaf_dirs(root):
        for ref_path in sorted((leaf / "ref").glob("*.png")):
            stem = ref_path.stem
            p0_path = leaf / "p0" / f"{stem}.png"
            p1_path = leaf / "p1" / f"{stem}.png"
            judge_path = leaf / "judge" / f"{stem}.npy"
            for required, kind in ((p0_path, "p0"), (p1_path, "p1"), (judge_path, "judge")):
                if not required.is_file():
                    raise DataError(f"{leaf}: missing {kind} entry for basename {stem!r}")
            judge = read_npy_scalar(judge_path)
            if not 0.0 <= judge <= 1.0:
                raise DataError(f"{judge_path}: judge {judge} outside [0, 1]")
            if unanimous_only and judge not in (0.0, 1.0):
                continue
            triplets.append(
                Triplet(
                    _maybe_resize(load_png(ref_path), resize_to),
                    _maybe_resize(load_png(p0_path), resize_to),
                    _maybe_resize(load_png(p1_path), resize_to),
                    judge,
                )
            )
    return triplets
