import struct

import numpy as np
import pytest
from PIL import Image

from conftest import margin_triplet, quantize, write_manifest_dataset
from percepattack.dataio import (
    DataError,
    ingest_bapps,
    ingest_manifest,
    load_png,
    read_npy_scalar,
    resize_bilinear,
    save_png,
    write_npy_scalar,
)


def make_npy_bytes(value, descr="<f4", shape=(1,), version=(1, 0), fortran=False):
    """Handcrafted NPY container, written from the format description."""
    header = f"{{'descr': '{descr}', 'fortran_order': {fortran}, 'shape': {shape!r}, }}"
    pad = 64 - (10 + len(header) + 1) % 64
    header = header + " " * pad + "\n"
    out = b"\x93NUMPY" + bytes(version) + struct.pack("<H", len(header))
    out += header.encode("ascii")
    count = int(np.prod(shape)) if shape else 1
    out += np.full(count, value, dtype=descr).tobytes()
    return out


class TestPng:
    def test_pixel_mapping_endpoints(self, tmp_path):
        arr = np.array([[0, 128, 255]], dtype=np.uint8)
        Image.fromarray(arr, mode="L").save(tmp_path / "g.png")
        loaded = load_png(tmp_path / "g.png")
        assert loaded.shape == (1, 1, 3)
        assert loaded[0, 0, 0] == -1.0
        assert loaded[0, 0, 2] == 1.0
        assert loaded[0, 0, 1] == 128 / 127.5 - 1.0  # 0.00392156...

    def test_round_trip_preserves_pixels_exactly(self, rng, tmp_path):
        img = quantize(rng.uniform(-1, 1, (3, 9, 7)))
        save_png(img, tmp_path / "x.png")
        assert np.array_equal(load_png(tmp_path / "x.png"), img)

    def test_grayscale_round_trip(self, rng, tmp_path):
        img = quantize(rng.uniform(-1, 1, (1, 5, 5)))
        save_png(img, tmp_path / "x.png")
        assert np.array_equal(load_png(tmp_path / "x.png"), img)

    def test_unsupported_mode_rejected(self, tmp_path):
        rgba = Image.new("RGBA", (4, 4))
        rgba.save(tmp_path / "a.png")
        with pytest.raises(DataError, match="mode"):
            load_png(tmp_path / "a.png")

    def test_sixteen_bit_rejected(self, tmp_path):
        deep = Image.new("I;16", (4, 4))
        deep.save(tmp_path / "d.png")
        with pytest.raises(DataError, match="mode"):
            load_png(tmp_path / "d.png")

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="not found"):
            load_png(tmp_path / "absent.png")


class TestNpy:
    def test_handwritten_fixture_value(self, tmp_path):
        (tmp_path / "j.npy").write_bytes(make_npy_bytes(0.4, descr="<f4"))
        assert read_npy_scalar(tmp_path / "j.npy") == pytest.approx(0.4, abs=1e-7)

    def test_zero_judgment(self, tmp_path):
        (tmp_path / "j.npy").write_bytes(make_npy_bytes(0.0, descr="<f8"))
        assert read_npy_scalar(tmp_path / "j.npy") == 0.0

    def test_scalar_shape_accepted(self, tmp_path):
        (tmp_path / "j.npy").write_bytes(make_npy_bytes(0.25, descr="<f8", shape=()))
        assert read_npy_scalar(tmp_path / "j.npy") == 0.25

    def test_bad_magic_rejected(self, tmp_path):
        blob = make_npy_bytes(0.5)
        (tmp_path / "j.npy").write_bytes(b"XXNUMPY" + blob[7:])
        with pytest.raises(DataError, match="magic"):
            read_npy_scalar(tmp_path / "j.npy")

    def test_unsupported_version_rejected(self, tmp_path):
        (tmp_path / "j.npy").write_bytes(make_npy_bytes(0.5, version=(2, 0)))
        with pytest.raises(DataError, match="version"):
            read_npy_scalar(tmp_path / "j.npy")

    def test_fortran_order_rejected(self, tmp_path):
        (tmp_path / "j.npy").write_bytes(make_npy_bytes(0.5, fortran=True))
        with pytest.raises(DataError, match="fortran"):
            read_npy_scalar(tmp_path / "j.npy")

    def test_multi_element_rejected(self, tmp_path):
        (tmp_path / "j.npy").write_bytes(make_npy_bytes(0.5, shape=(3,)))
        with pytest.raises(DataError, match="single-value"):
            read_npy_scalar(tmp_path / "j.npy")

    def test_integer_dtype_rejected(self, tmp_path):
        (tmp_path / "j.npy").write_bytes(make_npy_bytes(1, descr="<i4"))
        with pytest.raises(DataError, match="float"):
            read_npy_scalar(tmp_path / "j.npy")

    def test_writer_output_parses_with_numpy_and_ourselves(self, tmp_path):
        write_npy_scalar(0.75, tmp_path / "j.npy")
        assert read_npy_scalar(tmp_path / "j.npy") == 0.75
        assert float(np.load(tmp_path / "j.npy")[0]) == 0.75


class TestResize:
    def test_identity_is_bit_identical(self, rng):
        img = rng.uniform(-1, 1, (3, 7, 9))
        assert resize_bilinear(img, 7, 9).tobytes() == img.tobytes()

    def test_two_by_two_to_one_is_mean(self):
        img = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        assert resize_bilinear(img, 1, 1)[0, 0, 0] == 2.5

    def test_ramp_matches_direct_interpolation_oracle(self, rng):
        img = rng.uniform(-1, 1, (1, 4, 4))
        out_h, out_w = 7, 3
        out = resize_bilinear(img, out_h, out_w)
        for i in range(out_h):
            for j in range(out_w):
                sy = min(max((i + 0.5) * 4 / out_h - 0.5, 0.0), 3.0)
                sx = min(max((j + 0.5) * 4 / out_w - 0.5, 0.0), 3.0)
                y0, x0 = int(min(np.floor(sy), 2)), int(min(np.floor(sx), 2))
                ty, tx = sy - y0, sx - x0
                expect = (img[0, y0, x0] * (1 - ty) * (1 - tx)
                          + img[0, y0, x0 + 1] * (1 - ty) * tx
                          + img[0, y0 + 1, x0] * ty * (1 - tx)
                          + img[0, y0 + 1, x0 + 1] * ty * tx)
                assert abs(out[0, i, j] - expect) < 1e-12

    def test_upscale_stays_within_input_range(self, rng):
        img = rng.uniform(-1, 1, (1, 5, 5))
        out = resize_bilinear(img, 16, 16)
        assert out.min() >= img.min() - 1e-12 and out.max() <= img.max() + 1e-12

    def test_bad_dims_rejected(self, rng):
        with pytest.raises(DataError, match="dims"):
            resize_bilinear(np.zeros((1, 4, 4)), 0, 4)


class TestManifest:
    def test_round_trip_triplets(self, rng, tmp_path):
        triplets = [margin_triplet(rng, 0.02, 0.06) for _ in range(3)]
        quantized = [
            (quantize(t.i_ref), quantize(t.i_0), quantize(t.i_1)) for t in triplets
        ]
        manifest = write_manifest_dataset(tmp_path, triplets)
        loaded = ingest_manifest(manifest)
        assert len(loaded) == 3
        for t, (ref, p0, p1) in zip(loaded, quantized):
            assert np.array_equal(t.i_ref, ref)
            assert np.array_equal(t.i_0, p0)
            assert np.array_equal(t.i_1, p1)
            assert t.human_judgment == 1.0

    def test_empty_manifest(self, tmp_path):
        (tmp_path / "m.csv").write_text("ref,p0,p1,judge\n")
        assert ingest_manifest(tmp_path / "m.csv") == []

    def test_missing_header_rejected(self, tmp_path):
        (tmp_path / "m.csv").write_text("a,b,c\n1,2,3\n")
        with pytest.raises(DataError, match="header"):
            ingest_manifest(tmp_path / "m.csv")

    def test_bad_judge_rejected(self, rng, tmp_path):
        manifest = write_manifest_dataset(tmp_path, [margin_triplet(rng)])
        text = manifest.read_text().replace("1.0", "maybe")
        manifest.write_text(text)
        with pytest.raises(DataError, match="judge"):
            ingest_manifest(manifest)

    def test_judge_out_of_range_rejected(self, rng, tmp_path):
        manifest = write_manifest_dataset(tmp_path, [margin_triplet(rng)])
        manifest.write_text(manifest.read_text().replace("1.0", "1.5"))
        with pytest.raises(DataError, match="judge"):
            ingest_manifest(manifest)

    def test_missing_image_rejected(self, rng, tmp_path):
        manifest = write_manifest_dataset(tmp_path, [margin_triplet(rng)])
        (tmp_path / "p1_0.png").unlink()
        with pytest.raises(DataError, match="not found"):
            ingest_manifest(manifest)

    def test_resize_on_load(self, rng, tmp_path):
        manifest = write_manifest_dataset(tmp_path, [margin_triplet(rng, shape=(3, 32, 32))])
        loaded = ingest_manifest(manifest, resize_to=(16, 16))
        assert loaded[0].i_ref.shape == (3, 16, 16)


def build_bapps_tree(root, triplets, judge_descr="<f4", nested=False):
    base = root / "category_a" if nested else root
    for sub in ("ref", "p0", "p1", "judge"):
        (base / sub).mkdir(parents=True, exist_ok=True)
    for i, t in enumerate(triplets):
        stem = f"{i:06d}"
        save_png(t.i_ref, base / "ref" / f"{stem}.png")
        save_png(t.i_0, base / "p0" / f"{stem}.png")
        save_png(t.i_1, base / "p1" / f"{stem}.png")
        write_npy_scalar(t.human_judgment, base / "judge" / f"{stem}.npy", descr=judge_descr)
    return root


class TestBapps:
    def test_ingest_flat_tree(self, rng, tmp_path):
        triplets = [margin_triplet(rng, 0.02, 0.06) for _ in range(2)]
        build_bapps_tree(tmp_path, triplets)
        loaded = ingest_bapps(tmp_path)
        assert len(loaded) == 2
        assert loaded[0].human_judgment == 1.0
        assert np.array_equal(loaded[0].i_ref, quantize(triplets[0].i_ref))

    def test_ingest_nested_categories(self, rng, tmp_path):
        triplets = [margin_triplet(rng, 0.02, 0.06) for _ in range(2)]
        build_bapps_tree(tmp_path, triplets, nested=True)
        assert len(ingest_bapps(tmp_path)) == 2

    def test_missing_p1_names_basename(self, rng, tmp_path):
        build_bapps_tree(tmp_path, [margin_triplet(rng)])
        (tmp_path / "p1" / "000000.png").unlink()
        with pytest.raises(DataError, match="missing p1 entry for basename '000000'"):
            ingest_bapps(tmp_path)

    def test_no_structure_rejected(self, tmp_path):
        (tmp_path / "stuff").mkdir()
        with pytest.raises(DataError, match="structure"):
            ingest_bapps(tmp_path)
