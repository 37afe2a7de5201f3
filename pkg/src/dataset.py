import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
import torch
from torch.utils.data import Dataset

import config
from src.utils import digest_arrays, read_jsonl, slice_name, write_jsonl

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


@dataclass(eq=False)
class SlicePair:
    """A registered (x, y) slice pair with its anomaly ground truth."""

    x: np.ndarray
    y: np.ndarray
    anomaly_gt: np.ndarray
    subject_id: str
    slice_index: int
    split: str
    anomaly_mode: Optional[str] = None

    @property
    def name(self) -> str:
        return slice_name(self.subject_id, self.slice_index)

    @property
    def anomaly_pixels(self) -> int:
        return int(self.anomaly_gt.sum())


def check_pairs(pairs: Iterable[SlicePair]) -> None:
    """Hard checks at dataset build: no anomalies in train, registered shapes."""
    for p in pairs:
        if p.split not in SPLITS:
            raise ValueError(f"Slice {p.name} has unknown split {p.split!r}.")
        if p.x.shape != p.y.shape or p.x.shape != p.anomaly_gt.shape:
            raise ValueError(f"Slice {p.name}: x, y and ground truth shapes differ.")
        if p.split == "train" and p.anomaly_gt.any():
            raise ValueError(f"Training slice {p.name} contains {p.anomaly_pixels} anomalous pixels.")


def _ordered(pairs: Iterable[SlicePair]) -> list[SlicePair]:
    return sorted(pairs, key=lambda p: (SPLITS.index(p.split), p.subject_id, p.slice_index))


def dataset_digest(pairs: Iterable[SlicePair]) -> str:
    """Hash of all pixel data, in canonical (split, subject, slice) order."""
    arrays = []
    for p in _ordered(pairs):
        arrays.extend([p.x, p.y, p.anomaly_gt.astype(np.uint8)])
    return digest_arrays(arrays)


def save_dataset(pairs: Sequence[SlicePair], root: Union[str, Path]) -> str:
    """Write slice tensors, ``manifest.jsonl`` and ``digest.txt``; returns the digest."""
    root = Path(root)
    pairs = _ordered(pairs)
    check_pairs(pairs)
    rows = []
    for p in pairs:
        rel = Path("slices") / p.split / f"{p.name}.npz"
        (root / rel).parent.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(root / rel, x=p.x, y=p.y, anomaly_gt=p.anomaly_gt)
        rows.append({
            "subject_id": p.subject_id,
            "slice_index": int(p.slice_index),
            "split": p.split,
            "anomaly_pixels": p.anomaly_pixels,
            "anomaly_mode": p.anomaly_mode,
            "path": rel.as_posix(),
        })
    write_jsonl(root / "manifest.jsonl", rows)
    digest = dataset_digest(pairs)
    (root / "digest.txt").write_text(digest + "\n", encoding="utf-8")
    logger.info("Wrote %d slices to %s (digest %s)", len(rows), root, digest[:12])
    return digest


def load_dataset(root: Union[str, Path], split: Optional[str] = None) -> list[SlicePair]:
    root = Path(root)
    pairs = []
    for row in read_jsonl(root / "manifest.jsonl"):
        if split is not None and row["split"] != split:
            continue
        with np.load(root / row["path"]) as arrays:
            pairs.append(SlicePair(
                x=arrays["x"],
                y=arrays["y"],
                anomaly_gt=arrays["anomaly_gt"].astype(bool),
                subject_id=row["subject_id"],
                slice_index=int(row["slice_index"]),
                split=row["split"],
                anomaly_mode=row.get("anomaly_mode"),
            ))
    return pairs


def split_subjects(
    subject_ids: Sequence[str],
    fractions: Sequence[float] = config.SPLIT_FRACTIONS,
    seed: int = 0,
) -> dict:
    """Partition subject ids into disjoint train / val / test lists (80/10/10 by default)."""
    if abs(sum(fractions) - 1.0) > 1e-9 or len(fractions) != 3:
        raise ValueError(f"Split fractions must be three values summing to 1, got {fractions}.")
    ids = sorted(set(subject_ids))
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(round(fractions[0] * len(ids)))
    n_val = int(round(fractions[1] * len(ids)))
    shuffled = [ids[i] for i in order]
    return {
        "train": sorted(shuffled[:n_train]),
        "val": sorted(shuffled[n_train:n_train + n_val]),
        "test": sorted(shuffled[n_train + n_val:]),
    }


def to_tensor(image: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(H, W) array -> (1, H, W) tensor."""
    return torch.as_tensor(np.asarray(image), dtype=dtype).unsqueeze(0)


def stack_pairs(pairs: Sequence[SlicePair], dtype: torch.dtype = torch.float32):
    """Batch tensors (N, 1, H, W) for x and y, and a boolean ground-truth stack."""
    x = torch.stack([to_tensor(p.x, dtype) for p in pairs])
    y = torch.stack([to_tensor(p.y, dtype) for p in pairs])
    gt = torch.stack([torch.as_tensor(p.anomaly_gt, dtype=torch.bool) for p in pairs])
    return x, y, gt


class SliceDataset(Dataset):
    """Torch view over slice pairs yielding (x, y) tensors."""

    def __init__(self, pairs: Sequence[SlicePair]):
        self.pairs = list(pairs)

    def __len__(self) -> int:
        return len(self.pairs)

    def __getitem__(self, index: int):
        p = self.pairs[index]
        return to_tensor(p.x), to_tensor(p.y)
