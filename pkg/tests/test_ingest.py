import gzip
import struct

import numpy as np
import pytest

from sgdm_volterra.ingest import (DataFormatError, IdxFormatError, RawDataset, load_csv_matrix,
                                  load_idx, load_matrix, parity_target, precondition_rows,
                                  write_csv_matrix, write_idx)


@pytest.fixture
def idx_pair(tmp_path):
    images = np.array([[[0, 255], [128, 1]], [[10, 20], [30, 40]]], dtype=np.uint8)
    labels = np.array([3, 8], dtype=np.uint8)
    write_idx(tmp_path / "img.idx", images)
    write_idx(tmp_path / "lab.idx", labels)
    return tmp_path / "img.idx", tmp_path / "lab.idx", images, labels


def test_idx_round_trip(idx_pair):
    img, lab, images, labels = idx_pair
    data = load_idx(img, lab)
    np.testing.assert_array_equal(data.samples * 255.0, images.reshape(2, 4))
    np.testing.assert_array_equal(data.labels, labels)


def test_idx_header_bytes(idx_pair):
    img, _, _, _ = idx_pair
    raw = img.read_bytes()
    assert raw[:4] == b"\x00\x00\x08\x03"
    assert struct.unpack(">3I", raw[4:16]) == (2, 2, 2)


def test_idx_gzip(idx_pair, tmp_path):
    img, lab, images, _ = idx_pair
    gz = tmp_path / "img.idx.gz"
    gz.write_bytes(gzip.compress(img.read_bytes()))
    np.testing.assert_array_equal(load_idx(gz).samples, load_idx(img).samples)
    np.testing.assert_array_equal(load_matrix(gz), load_idx(img).samples)


def test_labels_with_image_magic_rejected(idx_pair):
    img, _, _, _ = idx_pair
    with pytest.raises(IdxFormatError, match="magic"):
        load_idx(img, img)


def test_truncated_idx(idx_pair, tmp_path):
    img, _, _, _ = idx_pair
    bad = tmp_path / "bad.idx"
    bad.write_bytes(img.read_bytes()[:-1])
    with pytest.raises(IdxFormatError, match="truncated"):
        load_idx(bad)
    bad.write_bytes(b"\x00\x00")
    with pytest.raises(IdxFormatError):
        load_idx(bad)


def test_label_count_mismatch(idx_pair, tmp_path):
    img, _, _, _ = idx_pair
    write_idx(tmp_path / "lab3.idx", np.array([1, 2, 3], dtype=np.uint8))
    with pytest.raises(IdxFormatError):
        load_idx(img, tmp_path / "lab3.idx")


def test_precondition_two_element_row():
    out = precondition_rows(np.array([[1.0, 3.0]]))
    np.testing.assert_allclose(out, [[-1 / np.sqrt(2), 1 / np.sqrt(2)]])


def test_precondition_post_conditions(rng):
    data = RawDataset(rng.uniform(0, 1, (50, 30)) + 5.0, np.arange(50) % 10)
    out = precondition_rows(data)
    assert isinstance(out, RawDataset)
    np.testing.assert_allclose(out.samples.sum(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(out.samples, axis=1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(out.labels, data.labels)


def test_precondition_idempotent(rng):
    once = precondition_rows(rng.normal(size=(20, 9)) * 3 + 1)
    np.testing.assert_allclose(precondition_rows(once), once, atol=1e-12)


def test_precondition_constant_row():
    with pytest.raises(ValueError, match="row 1"):
        precondition_rows(np.array([[1.0, 2.0], [4.0, 4.0]]))


def test_parity():
    np.testing.assert_array_equal(parity_target(np.array([0, 1, 2, 3])), [-0.5, 0.5, -0.5, 0.5])
    np.testing.assert_array_equal(parity_target(np.full(4, 7)), np.full(4, 0.5))
    with pytest.raises(ValueError):
        parity_target(RawDataset(np.ones((2, 2))))


def test_csv(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("1,2\n3,4\n")
    np.testing.assert_array_equal(load_csv_matrix(p), [[1.0, 2.0], [3.0, 4.0]])
    p.write_text("a,b\n1,2\n")
    np.testing.assert_array_equal(load_csv_matrix(p, skip_header=True), [[1.0, 2.0]])


def test_csv_ragged_names_line(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("1,2\n3\n")
    with pytest.raises(DataFormatError, match="line 2"):
        load_csv_matrix(p)
    p.write_text("1,2\n3,x\n")
    with pytest.raises(DataFormatError, match="line 2"):
        load_csv_matrix(p)
    p.write_text("")
    with pytest.raises(DataFormatError):
        load_csv_matrix(p)


def test_csv_round_trip(tmp_path, rng):
    m = rng.normal(size=(5, 3))
    write_csv_matrix(tmp_path / "m.csv", m)
    np.testing.assert_array_equal(load_matrix(tmp_path / "m.csv"), m)


def test_missing_file(tmp_path):
    with pytest.raises(OSError):
        load_idx(tmp_path / "nope.idx")
