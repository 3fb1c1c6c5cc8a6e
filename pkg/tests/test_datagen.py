import numpy as np
import pytest

from augshield import datagen
from augshield.datagen import DataFormatError, Dataset


@pytest.fixture(scope="module")
def small():
    return datagen.gen_shapeset(7, 20, (16, 16, 3))


def test_same_seed_is_byte_identical():
    a = datagen.gen_shapeset(7, 5)
    b = datagen.gen_shapeset(7, 5)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()
    assert datagen.gen_shapeset(8, 5).images.tobytes() != a.images.tobytes()


def test_counts_per_class():
    ds = datagen.gen_shapeset(7, 100, (16, 16, 3))
    assert len(ds) == 1000
    assert np.array_equal(ds.class_counts(), np.full(10, 100))


def test_pixels_in_unit_range(small):
    assert small.images.min() >= 0.0 and small.images.max() <= 1.0


def test_classes_are_distinct_motifs(small):
    means = np.stack([small.images[small.labels == k].mean(axis=0) for k in range(10)])
    d = np.linalg.norm((means[:, None] - means[None]).reshape(10, 10, -1), axis=-1)
    assert d[~np.eye(10, dtype=bool)].min() > 1.0


def test_bad_arguments_rejected():
    with pytest.raises(ValueError):
        datagen.gen_shapeset(7, 0)
    with pytest.raises(ValueError):
        datagen.gen_shapeset(7, 1, (8, 8, 3))
    with pytest.raises(DataFormatError):
        Dataset(np.full((1, 2, 2, 1), 1.5), [0], 2)


# ------------------------------------------------------------------ CIFAR-10


def _records(labels, rng):
    pix = rng.integers(0, 256, size=(len(labels), 3072), dtype=np.uint8)
    return np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], pix], axis=1), pix


def test_cifar_label_and_scaling(rng):
    rec, pix = _records([6, 2], rng)
    rec[0, 1] = 255
    images, labels = datagen.parse_cifar10_batch(rec.tobytes())
    assert labels[0] == 6
    # byte 1 is the red channel of pixel (row 0, col 0)
    assert images[0, 0, 0, 0] == 1.0
    assert np.array_equal(images[1, 3, 5, 2], pix[1, 2 * 1024 + 3 * 32 + 5] / 255.0)


def test_cifar_histogram_matches_raw_scan(tmp_path, rng):
    labels = rng.integers(0, 10, size=57)
    rec, _ = _records(labels, rng)
    path = tmp_path / "data_batch_1.bin"
    path.write_bytes(rec.tobytes())
    raw = path.read_bytes()
    scan = [0] * 10
    for off in range(0, len(raw), 3073):
        scan[raw[off]] += 1
    ds = datagen.load_cifar10_batch(path)
    assert list(ds.class_counts()) == scan


def test_cifar_truncation_reports_offset(rng):
    rec, _ = _records([1, 2, 3], rng)
    raw = rec.tobytes()[:-100]
    with pytest.raises(DataFormatError, match="byte offset 6146"):
        datagen.parse_cifar10_batch(raw)
    bad = rec.copy()
    bad[1, 0] = 11
    with pytest.raises(DataFormatError, match="byte offset 3073"):
        datagen.parse_cifar10_batch(bad.tobytes())


def test_cifar_directory_and_roundtrip(tmp_path, rng):
    d = tmp_path / "cifar-10-batches-bin"
    d.mkdir()
    imgs = rng.integers(0, 256, size=(4, 32, 32, 3)) / 255.0
    for b in range(1, 6):
        (d / f"data_batch_{b}.bin").write_bytes(datagen.encode_cifar10_batch(imgs, [b, 0, 1, 9]))
    (d / "test_batch.bin").write_bytes(datagen.encode_cifar10_batch(imgs[:2], [3, 4]))
    train, test = datagen.load_cifar10(tmp_path)
    assert len(train) == 20 and len(test) == 2
    assert np.array_equal(train.images[:4], imgs)
    (d / "data_batch_3.bin").unlink()
    with pytest.raises(DataFormatError, match="data_batch_3"):
        datagen.load_cifar10(d)


# --------------------------------------------------------------------- split


def test_split_half_is_balanced():
    ds = datagen.gen_shapeset(3, 100, (16, 16, 3))
    tr, va = datagen.split(ds, 0.5, 0)
    assert len(tr) == len(va) == 500
    assert np.all(np.abs(tr.class_counts() - 50) <= 1)
    assert np.all(np.abs(va.class_counts() - 50) <= 1)


def test_split_is_seeded_partition(small):
    tr, va = datagen.split(small, 0.3, 11)
    tr2, va2 = datagen.split(small, 0.3, 11)
    assert np.array_equal(tr.source_indices, tr2.source_indices)
    assert np.array_equal(va.source_indices, va2.source_indices)
    both = np.concatenate([tr.source_indices, va.source_indices])
    assert sorted(both) == list(range(len(small)))
    for bad in (0.0, 1.0, -0.2):
        with pytest.raises(ValueError):
            datagen.split(small, bad, 0)


# ------------------------------------------------------------------------ io


def test_save_load_roundtrip_bit_exact(tmp_path, small):
    path = tmp_path / "ds.npz"
    datagen.save_dataset(small, path, fingerprint="abc")
    back = datagen.load_dataset(path)
    assert back.images.tobytes() == small.images.tobytes()
    assert np.array_equal(back.labels, small.labels)
    assert back.provenance == small.provenance


def test_contact_sheet_tiles_match_images(small):
    sheet = datagen.contact_sheet(small.images[:7], ncols=3, pad=2)
    w, h = small.geometry[:2]
    assert sheet.shape == (3 * (w + 2) + 2, 3 * (h + 2) + 2, 3)
    for i in range(7):
        r, c = divmod(i, 3)
        tile = sheet[2 + r * (w + 2) : 2 + r * (w + 2) + w, 2 + c * (h + 2) : 2 + c * (h + 2) + h]
        assert np.array_equal(tile, np.rint(small.images[i] * 255).astype(np.uint8))
