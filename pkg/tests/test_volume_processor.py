import nibabel as nib
import numpy as np
import pytest

from src.errors import ConfigError
from src.volume_processor import (
    VolumeProcessor,
    extract_slices,
    modality_from_filename,
    normalize_volume,
    resample_slice,
)


def _percentile(sorted_values, q):
    pos = q / 100 * (len(sorted_values) - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, len(sorted_values) - 1)
    return sorted_values[lo] + (sorted_values[hi] - sorted_values[lo]) * (pos - lo)


@pytest.mark.parametrize("modality,window", [("flair", (2, 90)), ("t2", (2, 98)), ("t1", (2, 98))])
def test_normalize_matches_sort_based_oracle(modality, window):
    gen = np.random.default_rng(0)
    volume = np.zeros((12, 12, 6))
    volume[2:10, 2:10, :] = gen.gamma(2.0, 50.0, size=(8, 8, 6)) + 1.0
    out = normalize_volume(volume, modality)

    values = sorted(volume[volume > 0].tolist())
    lo, hi = _percentile(values, window[0]), _percentile(values, window[1])
    kept = [v for v in values if lo <= v <= hi]
    mean = sum(kept) / len(kept)
    std = (sum((v - mean) ** 2 for v in kept) / len(kept)) ** 0.5
    expected = np.where(volume > 0, (volume - mean) / std, 0.0)
    assert np.allclose(out, expected, atol=1e-6, rtol=0)
    assert np.all(out[volume == 0] == 0)


def test_normalize_rejects_degenerate_volumes():
    with pytest.raises(ValueError):
        normalize_volume(np.ones((3, 3, 3)), "flair")
    with pytest.raises(ValueError):
        normalize_volume(np.full((8, 8, 8), 5.0), "t2")
    with pytest.raises(ValueError):
        normalize_volume(np.ones((8, 8, 8)), "pd")


def _volumes(depth=100, tumor=None):
    gen = np.random.default_rng(1)
    x = gen.random((8, 8, depth)) + 0.5
    y = gen.random((8, 8, depth)) + 0.5
    labels = np.zeros((8, 8, depth))
    for k, area in (tumor or {}).items():
        labels[:area, 0, k] = 1
    return x, y, labels


def test_training_subject_keeps_every_tumor_free_slice():
    x, y, labels = _volumes()
    pairs = extract_slices(x, y, labels, "train", "sub", (70, 90), target=8)
    assert [p.slice_index for p in pairs] == list(range(70, 91))
    x, y, labels = _volumes(tumor={75: 2, 80: 5, 95: 3})
    pairs = extract_slices(x, y, labels, "train", "sub", (70, 90), target=8)
    assert len(pairs) == 19 and 75 not in [p.slice_index for p in pairs]
    assert all(not p.anomaly_gt.any() for p in pairs)


def test_evaluation_subject_keeps_largest_tumor_slice():
    x, y, labels = _volumes(tumor={72: 3, 81: 6, 84: 6, 95: 8})
    (pair,) = extract_slices(x, y, labels, "test", "sub", (70, 90), target=8)
    assert pair.slice_index == 81
    assert pair.anomaly_pixels == 6 and pair.anomaly_mode == "tumor"
    assert np.array_equal(pair.x, x[:, :, 81].astype(np.float32))


def test_evaluation_subject_without_tumor_is_skipped():
    x, y, labels = _volumes()
    assert extract_slices(x, y, labels, "val", "sub", (70, 90), target=8) == []


def test_extract_checks_volumes():
    x, y, labels = _volumes(depth=50)
    with pytest.raises(ValueError):
        extract_slices(x, y, labels, "train", "sub", (70, 90))
    x, y, labels = _volumes()
    with pytest.raises(ValueError):
        extract_slices(x, y[:4], labels, "train", "sub", (70, 90))


def test_resample_slice():
    image = np.arange(120, dtype=np.float32).reshape(10, 12)
    out = resample_slice(image, 16)
    assert out.shape == (16, 16) and out.dtype == np.float32
    assert out.min() >= image.min() - 1e-4 and out.max() <= image.max() + 1e-4
    label = np.zeros((10, 12), dtype=bool)
    label[3:6, 4:9] = True
    resized = resample_slice(label, 16, is_label=True)
    assert resized.dtype == bool and resized.any()
    square = image[:, :10]
    assert np.array_equal(resample_slice(square, 10), square)
    with pytest.raises(ValueError):
        resample_slice(np.zeros(5), 16)


def test_modality_from_filename():
    assert modality_from_filename("BraTS2021_00000_flair.nii.gz") == "flair"
    assert modality_from_filename("BraTS2021_00000_t1ce.nii.gz") == "t1ce"
    assert modality_from_filename("BraTS2021_00000_t1.nii") == "t1"
    assert modality_from_filename("BraTS2021_00000_seg.nii.gz") == "seg"
    assert modality_from_filename("notes.txt") is None


def _write_subject(root, name, gen):
    subject = root / name
    subject.mkdir(parents=True)
    affine = np.eye(4)
    brain = np.zeros((16, 16, 8), dtype=np.float32)
    brain[3:13, 3:13, :] = 1.0
    for modality in ("flair", "t2"):
        volume = brain * (gen.random((16, 16, 8)).astype(np.float32) * 100 + 10)
        nib.save(nib.Nifti1Image(volume, affine), str(subject / f"{name}_{modality}.nii.gz"))
    seg = np.zeros((16, 16, 8), dtype=np.float32)
    seg[6:9, 6:9, 4] = 2
    nib.save(nib.Nifti1Image(seg, affine), str(subject / f"{name}_seg.nii.gz"))


def test_directory_ingestion(tmp_path):
    gen = np.random.default_rng(2)
    for i in range(10):
        _write_subject(tmp_path, f"BraTS_{i:03d}", gen)
    processor = VolumeProcessor("flair", "t2", slice_range=(2, 6), target=16)
    pairs = processor.process_directory(tmp_path, seed=0)
    by_split = {s: [p for p in pairs if p.split == s] for s in ("train", "val", "test")}
    assert len(by_split["train"]) == 8 * 4
    assert len(by_split["val"]) == 1 and len(by_split["test"]) == 1
    assert by_split["test"][0].slice_index == 4 and by_split["test"][0].anomaly_pixels == 9
    subjects = {s: {p.subject_id for p in ps} for s, ps in by_split.items()}
    assert not (subjects["train"] & subjects["val"]) and not (subjects["train"] & subjects["test"])
    brain = pairs[0].x[3:13, 3:13]
    assert abs(float(brain.mean())) < 0.5 and np.all(pairs[0].x[:3] == 0)


def test_missing_or_empty_directory(tmp_path):
    processor = VolumeProcessor("flair", "t2")
    with pytest.raises(ConfigError, match="layout"):
        processor.find_subjects(tmp_path / "absent")
    (tmp_path / "empty").mkdir()
    with pytest.raises(ConfigError, match="layout"):
        processor.find_subjects(tmp_path / "empty")
