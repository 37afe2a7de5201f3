import logging
import re
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Union

import nibabel as nib
import numpy as np
from skimage.transform import resize

import config
from src.dataset import SlicePair, split_subjects
from src.errors import ConfigError

logger = logging.getLogger(__name__)

# brain-intensity percentile window used for the normalization statistics
PERCENTILE_WINDOWS = {
    "flair": (2.0, 90.0),
    "t1": (2.0, 98.0),
    "t1ce": (2.0, 98.0),
    "t2": (2.0, 98.0),
}
MIN_BRAIN_VOXELS = 100
LABEL_SUFFIX = "seg"


def modality_from_filename(file_name: str) -> Optional[str]:
    """Modality (or 'seg') encoded in a BraTS file name, e.g. 'BraTS2021_00000_flair.nii.gz'."""
    match = re.search(r"_(flair|t1ce|t1|t2|seg)\.nii(?:\.gz)?$", file_name.lower())
    return match.group(1) if match else None


def normalize_volume(volume: np.ndarray, modality: str) -> np.ndarray:
    """Z-score brain voxels with statistics from the modality's percentile window.

    Brain = strictly positive voxels; background stays 0.
    """
    if modality not in PERCENTILE_WINDOWS:
        raise ValueError(f"Unknown modality {modality!r}; expected one of {sorted(PERCENTILE_WINDOWS)}.")
    volume = np.asarray(volume, dtype=np.float64)
    brain = volume > 0
    n_brain = int(brain.sum())
    if n_brain < MIN_BRAIN_VOXELS:
        raise ValueError(f"Volume has {n_brain} brain voxels; at least {MIN_BRAIN_VOXELS} are required.")
    values = volume[brain]
    lo, hi = np.percentile(values, PERCENTILE_WINDOWS[modality])
    selected = values[(values >= lo) & (values <= hi)]
    mean, std = float(selected.mean()), float(selected.std())
    if std == 0.0:
        raise ValueError("Brain intensities inside the percentile window are constant; cannot normalize.")
    out = np.zeros_like(volume)
    out[brain] = (values - mean) / std
    return out


def resample_slice(image: np.ndarray, target: int = config.IMAGE_SIZE, is_label: bool = False) -> np.ndarray:
    """Bilinear resize for intensities, nearest-neighbour for label masks."""
    image = np.asarray(image)
    if image.ndim != 2 or min(image.shape) <= 0:
        raise ValueError(f"Expected a non-empty 2D slice, got shape {image.shape}.")
    if image.shape == (target, target):
        return image.copy()
    out = resize(
        image,
        (target, target),
        order=0 if is_label else 1,
        mode="edge",
        anti_aliasing=False,
        preserve_range=True,
    )
    return out.astype(image.dtype)


def extract_slices(
    x_volume: np.ndarray,
    y_volume: np.ndarray,
    label_volume: np.ndarray,
    split: str,
    subject_id: str,
    slice_range: tuple = config.SLICE_RANGE,
    target: int = config.IMAGE_SIZE,
) -> list[SlicePair]:
    """Axial slices lo..hi (inclusive): every tumor-free one for train, the largest-tumor one otherwise."""
    if not (x_volume.shape == y_volume.shape == label_volume.shape):
        raise ValueError(f"Subject {subject_id}: modality and label volumes are not registered.")
    lo, hi = slice_range
    if x_volume.ndim != 3 or x_volume.shape[2] <= hi:
        raise ValueError(f"Subject {subject_id}: need at least {hi + 1} axial slices, got shape {x_volume.shape}.")

    indices = list(range(lo, hi + 1))
    tumor_area = [int((label_volume[:, :, k] > 0).sum()) for k in indices]
    if split == "train":
        chosen = [k for k, area in zip(indices, tumor_area) if area == 0]
    else:
        best = int(np.argmax(tumor_area))  # first maximum, i.e. lowest index on ties
        if tumor_area[best] == 0:
            logger.warning("Subject %s has no tumor in slices %d-%d; skipped for %s.", subject_id, lo, hi, split)
            return []
        chosen = [indices[best]]

    return [
        SlicePair(
            x=resample_slice(x_volume[:, :, k].astype(np.float32), target),
            y=resample_slice(y_volume[:, :, k].astype(np.float32), target),
            anomaly_gt=resample_slice(label_volume[:, :, k] > 0, target, is_label=True).astype(bool),
            subject_id=subject_id,
            slice_index=k,
            split=split,
            anomaly_mode="tumor" if split != "train" else None,
        )
        for k in chosen
    ]


class VolumeProcessor:
    """Reads BraTS-layout subject directories and turns them into normalized slice pairs."""

    def __init__(
        self,
        modality_x: str,
        modality_y: str,
        slice_range: tuple = config.SLICE_RANGE,
        target: int = config.IMAGE_SIZE,
        workers: int = 0,
    ):
        self.modality_x = modality_x
        self.modality_y = modality_y
        self.slice_range = tuple(slice_range)
        self.target = target
        self.workers = workers

    def load_volume(self, path: Union[str, Path]) -> np.ndarray:
        """Read a NIfTI-1 volume as float32."""
        try:
            return np.asarray(nib.load(str(path)).get_fdata(dtype=np.float32))
        except Exception as e:
            raise RuntimeError(f"Could not read NIfTI volume {path}: {str(e)}") from e

    def subject_files(self, subject_dir: Path) -> dict:
        """Map modality / 'seg' to file path for one subject directory."""
        files = {}
        for path in sorted(subject_dir.iterdir()):
            tag = modality_from_filename(path.name)
            if tag:
                files[tag] = path
        return files

    def find_subjects(self, root: Union[str, Path]) -> list[Path]:
        """Subject directories that hold both modalities and a segmentation."""
        root = Path(root)
        layout = f"<root>/<subject>/<subject>_{{{self.modality_x},{self.modality_y},{LABEL_SUFFIX}}}.nii.gz"
        if not root.is_dir():
            raise ConfigError(f"BraTS directory {root} does not exist; expected layout {layout}.")
        needed = {self.modality_x, self.modality_y, LABEL_SUFFIX}
        subjects = [d for d in sorted(root.iterdir()) if d.is_dir() and needed <= set(self.subject_files(d))]
        if not subjects:
            raise ConfigError(f"No subjects found under {root}; expected layout {layout}.")
        return subjects

    def process_subject(self, subject_dir: Union[str, Path], split: str) -> list[SlicePair]:
        subject_dir = Path(subject_dir)
        files = self.subject_files(subject_dir)
        x = normalize_volume(self.load_volume(files[self.modality_x]), self.modality_x)
        y = normalize_volume(self.load_volume(files[self.modality_y]), self.modality_y)
        labels = self.load_volume(files[LABEL_SUFFIX])
        return extract_slices(x, y, labels, split, subject_dir.name, self.slice_range, self.target)

    def process_directory(self, root: Union[str, Path], seed: int = 0) -> list[SlicePair]:
        """Split subjects 80/10/10 and extract slices for each; merged in subject order."""
        subjects = self.find_subjects(root)
        splits = split_subjects([d.name for d in subjects], seed=seed)
        split_of = {sid: split for split, ids in splits.items() for sid in ids}
        jobs = [(d, split_of[d.name]) for d in subjects]
        if self.workers > 0:
            with ProcessPoolExecutor(max_workers=self.workers) as pool:
                results = list(pool.map(self.process_subject, *zip(*jobs)))
        else:
            results = [self.process_subject(d, split) for d, split in jobs]
        pairs = [p for chunk in results for p in chunk]
        logger.info("Ingested %d slices from %d subjects under %s", len(pairs), len(subjects), root)
        return pairs
