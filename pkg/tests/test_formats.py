import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from riunet.formats import (
    FormatError,
    Sample,
    decode_range_image,
    encode_range_image,
    read_labeled_cloud,
    read_point_cloud,
    read_ppm,
    read_range_image,
    validate_sample,
    write_labels,
    write_point_cloud,
    write_ppm,
    write_range_image,
)
from riunet.projection import PointCloud


def random_sample(rng, h=64, w=512, labels=True, weights=True, sid="s"):
    mask = (rng.random((h, w)) < 0.8).astype(np.uint8)
    ch = np.stack([rng.uniform(1, 80, (h, w)), rng.normal(0, 2, (h, w))]).astype(np.float32) * mask
    lab = (rng.integers(0, 4, (h, w)) * mask).astype(np.uint8) if labels else None
    wt = (rng.uniform(0.1, 11, (h, w)) * mask).astype(np.float32) if weights else None
    return Sample(sid, ch, mask, lab, wt)


class TestPointCloud:
    def test_empty_file(self, tmp_path):
        (tmp_path / "e.bin").write_bytes(b"")
        assert len(read_point_cloud(tmp_path / "e.bin")) == 0

    def test_two_known_records(self, tmp_path):
        path = tmp_path / "two.bin"
        path.write_bytes(struct.pack("<8f", 1.0, 2.0, 3.0, 0.5, -4.0, 0.25, 8.0, 1.0))
        cloud = read_point_cloud(path)
        np.testing.assert_array_equal(cloud.points, [[1, 2, 3], [-4, 0.25, 8]])
        np.testing.assert_array_equal(cloud.intensity, [0.5, 1.0])

    def test_round_trip_10k_bit_exact(self, tmp_path, rng):
        pts = rng.normal(0, 30, (10_000, 3)).astype(np.float32)
        inten = rng.random(10_000).astype(np.float32)
        path = tmp_path / "c.bin"
        write_point_cloud(PointCloud(pts, inten), path)
        cloud = read_point_cloud(path)
        assert cloud.points.astype(np.float32).tobytes() == pts.tobytes()
        assert cloud.intensity.astype(np.float32).tobytes() == inten.tobytes()
        write_point_cloud(cloud, tmp_path / "again.bin")
        assert (tmp_path / "again.bin").read_bytes() == path.read_bytes()

    def test_truncated_record(self, tmp_path):
        (tmp_path / "t.bin").write_bytes(b"\0" * 20)
        with pytest.raises(FormatError, match="offset 16"):
            read_point_cloud(tmp_path / "t.bin")

    def test_non_finite_reports_offset(self, tmp_path):
        (tmp_path / "n.bin").write_bytes(struct.pack("<8f", 0, 0, 0, 0, 1, float("nan"), 0, 0))
        with pytest.raises(FormatError, match="byte offset 20"):
            read_point_cloud(tmp_path / "n.bin")

    def test_labels(self, tmp_path, rng):
        pts = rng.normal(0, 5, (20, 3))
        write_point_cloud(PointCloud(pts), tmp_path / "a.bin")
        labels = rng.integers(0, 4, 20)
        write_labels(labels, tmp_path / "a.label")
        np.testing.assert_array_equal(read_labeled_cloud(tmp_path / "a.bin").labels, labels)
        write_labels(labels[:5], tmp_path / "a.label")
        with pytest.raises(FormatError, match="5 labels for 20"):
            read_labeled_cloud(tmp_path / "a.bin")


class TestRangeImage:
    def test_minimal_round_trip(self, tmp_path):
        s = Sample("x", np.array([[[2.5]], [[-1.0]]], np.float32), np.ones((1, 1), np.uint8), np.array([[3]], np.uint8), np.array([[1.5]], np.float32))
        write_range_image(s, tmp_path / "x.rimg")
        blob = (tmp_path / "x.rimg").read_bytes()
        assert blob[:4] == b"RIMG" and struct.unpack("<4I", blob[4:20]) == (1, 1, 1, 2)
        back = read_range_image(tmp_path / "x.rimg")
        assert back.id == "x" and back.equals(s)
        write_range_image(back, tmp_path / "y.rimg")
        assert (tmp_path / "y.rimg").read_bytes() == blob

    @pytest.mark.parametrize("labels,weights", [(True, True), (True, False), (False, True), (False, False)])
    def test_full_size_round_trip(self, tmp_path, rng, labels, weights):
        s = random_sample(rng, labels=labels, weights=weights)
        write_range_image(s, tmp_path / "s.rimg")
        back = read_range_image(tmp_path / "s.rimg")
        assert back.equals(s)
        assert encode_range_image(back) == (tmp_path / "s.rimg").read_bytes()

    def test_mask_zero_with_depth_rejected(self, rng):
        s = random_sample(rng, 4, 4)
        s.mask[0, 0] = 0
        s.channels[0, 0, 0] = 7.0
        s.labels[0, 0] = 0
        s.weights[0, 0] = 0
        with pytest.raises(FormatError, match=r"\(0, 0\) has mask 0"):
            validate_sample(s)

    def test_mask_zero_with_label_rejected(self):
        s = Sample("x", np.zeros((2, 1, 1), np.float32), np.zeros((1, 1), np.uint8), np.array([[2]], np.uint8))
        with pytest.raises(FormatError, match="background"):
            validate_sample(s)

    def test_valid_pixel_needs_depth(self):
        s = Sample("x", np.zeros((2, 1, 1), np.float32), np.ones((1, 1), np.uint8))
        with pytest.raises(FormatError, match="positive depth"):
            validate_sample(s)

    def test_negative_weight_rejected(self, rng):
        s = random_sample(rng, 2, 2)
        s.weights[:] = -1
        with pytest.raises(FormatError, match="non-negative"):
            validate_sample(s)

    def test_corrupted_file_rejected_by_validator(self, rng):
        blob = bytearray(encode_range_image(random_sample(rng, 2, 2, labels=False, weights=False)))
        mask_at = 20 + 2 * 4 * 4
        first_empty = bytes(blob[mask_at : mask_at + 4]).find(b"\0")
        if first_empty < 0:
            blob[mask_at] = 0
            first_empty = 0
        # mask byte 0 with the depth value left in place
        blob[20 + 4 * first_empty : 24 + 4 * first_empty] = struct.pack("<f", 9.0)
        with pytest.raises(FormatError):
            decode_range_image(bytes(blob))

    @pytest.mark.parametrize("damage", ["magic", "version", "truncate", "trailing", "flags", "huge"])
    def test_corruption(self, rng, damage):
        blob = bytearray(encode_range_image(random_sample(rng, 4, 8)))
        if damage == "magic":
            blob[:4] = b"RIMX"
        elif damage == "version":
            blob[4:8] = struct.pack("<I", 2)
        elif damage == "truncate":
            blob = blob[:-1]
        elif damage == "trailing":
            blob += b"\1"
        elif damage == "flags":
            at = 20 + 2 * 4 * 32 + 32
            blob[at : at + 4] = struct.pack("<I", 8)
        else:
            blob[8:12] = struct.pack("<I", 2**31)
        with pytest.raises(FormatError):
            decode_range_image(bytes(blob))


def test_ppm_round_trip(tmp_path, rng):
    rgb = rng.integers(0, 256, (5, 7, 3)).astype(np.uint8)
    rgb[0, 0] = (10, 32, 13)  # whitespace byte values right after the header
    write_ppm(rgb, tmp_path / "a.ppm")
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n7 5\n255\n")
    np.testing.assert_array_equal(read_ppm(tmp_path / "a.ppm"), rgb)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), h=st.integers(1, 9), w=st.integers(1, 9))
def test_range_image_round_trip_property(seed, h, w):
    r = np.random.default_rng(seed)
    s = random_sample(r, h, w, labels=bool(seed % 2), weights=bool(seed % 3))
    blob = encode_range_image(s)
    back = decode_range_image(blob)
    assert back.equals(s) and encode_range_image(back) == blob
