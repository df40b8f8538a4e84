"""Synthetic scene generation, disk format, iteration."""

import json

import numpy as np
import pytest

from adafuse.data import (DatasetError, batch_iter, generate_synthetic,
                          load_dataset, save_dataset, stack_batch)


def small_ds(seed=0, n=6, m=2, classes=5):
    return generate_synthetic(n, 32, 32, classes, m, seed)


# ---------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------

def test_generation_is_byte_identical_per_seed():
    a, b = small_ds(seed=4), small_ds(seed=4)
    for sa, sb in zip(a.samples, b.samples):
        assert sa.label.tobytes() == sb.label.tobytes()
        for name in sa.images:
            assert sa.images[name].tobytes() == sb.images[name].tobytes()
    c = small_ds(seed=5)
    assert any(sa.label.tobytes() != sc.label.tobytes()
               for sa, sc in zip(a.samples, c.samples))


def test_visibility_splits_two_by_two_for_m2_five_classes():
    ds = small_ds(seed=1)
    per_modality = {name: 0 for name in ds.modality_names}
    for cls, vis in ds.class_visibility.items():
        assert len(vis) == 1
        per_modality[vis[0]] += 1
    assert sorted(per_modality.values()) == [2, 2]


def test_each_modality_is_blind_to_at_least_one_class():
    for m in (2, 3):
        ds = generate_synthetic(2, 32, 32, 6, m, seed=7)
        for name in ds.modality_names:
            invisible = [c for c, vis in ds.class_visibility.items()
                         if name not in vis]
            assert invisible


def test_invisible_classes_have_no_contrast():
    ds = generate_synthetic(40, 32, 32, 5, 2, seed=2)
    bg = 0.2
    contrast = {(cls, name): [] for cls in range(1, 5) for name in ds.modality_names}
    for s in ds.samples:
        for cls in range(1, 5):
            mask = s.label == cls
            if mask.sum() < 4:
                continue
            for name in ds.modality_names:
                contrast[(cls, name)].append(
                    float(np.abs(s.images[name][:, mask] - bg).mean()))
    for (cls, name), values in contrast.items():
        if not values:
            continue
        mean_contrast = np.mean(values)
        if name in ds.class_visibility[cls]:
            assert mean_contrast > 0.25, (cls, name, mean_contrast)
        else:
            # only noise remains: E|N(0, 0.05)| ~ 0.04
            assert mean_contrast < 0.08, (cls, name, mean_contrast)


def test_label_histogram_covers_all_classes():
    ds = generate_synthetic(50, 32, 32, 5, 2, seed=3)
    seen = np.zeros(5, dtype=bool)
    for s in ds.samples:
        seen |= np.bincount(s.label.reshape(-1), minlength=5)[:5] > 0
    assert seen.all()


def test_images_in_unit_range_float32():
    ds = small_ds(seed=6)
    for s in ds.samples:
        for img in s.images.values():
            assert img.dtype == np.float32
            assert img.min() >= 0.0 and img.max() <= 1.0


def test_generation_validation():
    with pytest.raises(ValueError):
        generate_synthetic(1, 32, 32, 2, 2, 0)       # too few classes
    with pytest.raises(ValueError):
        generate_synthetic(1, 32, 32, 5, 1, 0)       # single modality
    with pytest.raises(ValueError):
        generate_synthetic(1, 4, 4, 5, 2, 0)         # degenerate size


# ---------------------------------------------------------------------
# disk round trip
# ---------------------------------------------------------------------

def test_save_load_roundtrip_bit_exact(tmp_path):
    ds = small_ds(seed=8)
    save_dataset(ds, tmp_path / "ds")
    back = load_dataset(tmp_path / "ds")
    assert back.num_classes == ds.num_classes
    assert back.modalities == ds.modalities
    assert back.class_visibility == ds.class_visibility
    for sa, sb in zip(ds.samples, back.samples):
        assert np.array_equal(sa.label, sb.label)
        for name in sa.images:
            assert sa.images[name].tobytes() == sb.images[name].tobytes()


def test_truncated_blob_fails_with_byte_count_error(tmp_path):
    root = save_dataset(small_ds(seed=9, n=2), tmp_path / "ds")
    blob = next(root.glob("s00000_*.bin"))
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(DatasetError, match="bytes"):
        load_dataset(root)


def test_missing_blob_fails(tmp_path):
    root = save_dataset(small_ds(seed=10, n=2), tmp_path / "ds")
    next(root.glob("s00001_*.bin")).unlink()
    with pytest.raises(DatasetError, match="missing"):
        load_dataset(root)


def test_absolute_blob_paths_rejected(tmp_path):
    root = save_dataset(small_ds(seed=11, n=1), tmp_path / "ds")
    manifest = json.loads((root / "manifest.json").read_text())
    rec = manifest["samples"][0]["label"]
    rec["path"] = str((root / rec["path"]).resolve())
    (root / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(DatasetError, match="relative"):
        load_dataset(root)


def test_unknown_version_rejected(tmp_path):
    root = save_dataset(small_ds(seed=12, n=1), tmp_path / "ds")
    manifest = json.loads((root / "manifest.json").read_text())
    manifest["version"] = 99
    (root / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(DatasetError, match="version"):
        load_dataset(root)


def test_out_of_range_labels_rejected(tmp_path):
    ds = small_ds(seed=13, n=1)
    ds.samples[0].label[0, 0] = 200    # not a class, not ignore
    root = save_dataset(ds, tmp_path / "ds")
    with pytest.raises(DatasetError, match="class ids"):
        load_dataset(root)


# ---------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------

def test_batch_iter_same_seed_same_order():
    ds = small_ds(seed=14, n=11)
    a = [id(s) for batch in batch_iter(ds, 3, shuffle_seed=5, epoch=2) for s in batch]
    b = [id(s) for batch in batch_iter(ds, 3, shuffle_seed=5, epoch=2) for s in batch]
    assert a == b


def test_batch_iter_epochs_differ():
    ds = small_ds(seed=15, n=12)
    e0 = [id(s) for batch in batch_iter(ds, 4, shuffle_seed=1, epoch=0) for s in batch]
    e1 = [id(s) for batch in batch_iter(ds, 4, shuffle_seed=1, epoch=1) for s in batch]
    assert e0 != e1


def test_batch_iter_partitions_dataset():
    ds = small_ds(seed=16, n=10)
    seen = [s for batch in batch_iter(ds, 3, shuffle_seed=0, epoch=0) for s in batch]
    assert len(seen) == 10
    assert {id(s) for s in seen} == {id(s) for s in ds.samples}
    sizes = [len(b) for b in batch_iter(ds, 3, shuffle_seed=0, epoch=0)]
    assert sizes == [3, 3, 3, 1]   # last partial batch kept


def test_batch_iter_validation():
    with pytest.raises(ValueError):
        next(batch_iter(small_ds(17, n=2), 0))


def test_stack_batch_shapes():
    ds = small_ds(seed=18, n=5)
    batch = next(batch_iter(ds, 4))
    images, labels = stack_batch(batch, ds.modality_names)
    assert labels.shape == (4, 32, 32) and labels.dtype == np.int64
    for name, _ in ds.modalities:
        assert images[name].shape == (4, 1, 32, 32)
