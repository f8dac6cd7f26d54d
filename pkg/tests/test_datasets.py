import gzip

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dpisim.datasets import (DataFormatError, DigitSet, load_csv_dir, load_digits, pool_and_pad,
                             read_idx, write_idx)


@pytest.mark.parametrize("compress", [True, False])
@given(arrays(np.uint8, st.tuples(st.integers(1, 4), st.integers(1, 6), st.integers(1, 6))))
def test_idx_round_trip(tmp_path_factory, compress, images):
    path = tmp_path_factory.mktemp("idx") / "x.idx"
    write_idx(path, images, compress=compress)
    np.testing.assert_array_equal(read_idx(path), images)


def test_idx_bytes_are_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    write_idx(a, np.arange(5, dtype=np.uint8))
    write_idx(b, np.arange(5, dtype=np.uint8))
    assert a.read_bytes() == b.read_bytes()


def test_idx_errors(tmp_path):
    bad = tmp_path / "bad"
    bad.write_bytes(b"\x00\x00\x09\x99" + bytes(8))
    with pytest.raises(DataFormatError):
        read_idx(bad)
    short = tmp_path / "short"
    short.write_bytes(gzip.compress(b"\x00\x00\x08\x01\x00\x00\x00\x05abc"))
    with pytest.raises(DataFormatError):
        read_idx(short)
    (tmp_path / "tiny").write_bytes(b"\x00")
    with pytest.raises(DataFormatError):
        read_idx(tmp_path / "tiny")
    with pytest.raises(ValueError):
        write_idx(tmp_path / "2d", np.zeros((2, 2)))


def test_pool_and_pad_averages_and_centers():
    img = np.zeros((1, 4, 4))
    img[0, :2, :2] = 255
    out = pool_and_pad(img, size=4, pool=2).reshape(4, 4)
    expected = np.zeros((4, 4))
    expected[1, 1] = 1.0
    np.testing.assert_allclose(out, expected)
    big = pool_and_pad(np.full((2, 28, 28), 128.0))
    assert big.shape == (2, 256)
    # 28 pooled by 2 is 14, padded by one pixel on each side
    grid = big[0].reshape(16, 16)
    np.testing.assert_allclose(grid[1:15, 1:15], 128 / 255)
    assert grid[0].sum() == grid[-1].sum() == grid[:, 0].sum() == grid[:, -1].sum() == 0


def test_stratified_subset_keeps_class_ratio():
    labels = np.array([0] * 30 + [1] * 10)
    ds = DigitSet(np.arange(40)[:, None].astype(float), labels, "t")
    sub = ds.stratified(20)
    assert len(sub) == 20
    assert np.bincount(sub.labels).tolist() == [15, 5]
    assert ds.stratified(100) is ds


def test_csv_sample_directory(tmp_path):
    rng = np.random.default_rng(0)
    for i, label in enumerate([0, 1, 7, 1]):
        vals = rng.random(16)
        (tmp_path / f"s{i}_{label}.csv").write_text("\n".join(",".join(map(str, r))
                                                               for r in vals.reshape(4, 4)))
    ds = load_csv_dir(tmp_path, channels=16)
    assert ds.labels.tolist() == [0, 1, 1]
    assert ds.x.shape == (3, 16)


def test_csv_sample_directory_errors(tmp_path):
    with pytest.raises(DataFormatError):
        load_csv_dir(tmp_path)
    (tmp_path / "nolabel.csv").write_text("0.5")
    with pytest.raises(DataFormatError):
        load_csv_dir(tmp_path, channels=1)
    (tmp_path / "nolabel.csv").unlink()
    (tmp_path / "a_0.csv").write_text("0.5,2.0")
    with pytest.raises(DataFormatError):
        load_csv_dir(tmp_path, channels=2)
    with pytest.raises(DataFormatError):
        load_csv_dir(tmp_path, channels=3)


def test_bundled_digits_are_binary_and_preprocessed():
    for split in ("train", "test"):
        ds = load_digits(split)
        assert ds.x.shape[1] == 256
        assert set(np.unique(ds.labels)) == {0, 1}
        assert ds.x.min() >= 0 and ds.x.max() <= 1
    assert len(load_digits("test")) >= 500
    with pytest.raises(ValueError):
        load_digits("validation")


def test_data_dir_with_standard_idx_names(tmp_path):
    rng = np.random.default_rng(1)
    images = rng.integers(0, 256, (6, 28, 28), dtype=np.uint8)
    labels = np.array([0, 1, 2, 1, 0, 9], dtype=np.uint8)
    write_idx(tmp_path / "t10k-images-idx3-ubyte", images, compress=False)
    write_idx(tmp_path / "t10k-labels-idx1-ubyte.gz", labels)
    write_idx(tmp_path / "t10k-images-idx3-ubyte.gz", images)
    ds = load_digits("test", tmp_path)
    assert ds.labels.tolist() == [0, 1, 1, 0]
    np.testing.assert_allclose(ds.x, pool_and_pad(images[[0, 1, 3, 4]]))
    with pytest.raises(DataFormatError):
        load_digits("train", tmp_path)
