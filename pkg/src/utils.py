import hashlib
import json
import random
import re
from pathlib import Path
from typing import Iterable, Union

import numpy as np
import torch


def seed_everything(seed: int, deterministic: bool = True) -> None:
    """Seed python, numpy and torch; optionally force deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    if torch.cuda.is_available():
        torch.cuda.manual_seed_all(seed)
    if deterministic:
        torch.backends.cudnn.benchmark = False
        torch.backends.cudnn.deterministic = True
        # best effort: some CUDA kernels have no deterministic variant
        torch.use_deterministic_algorithms(True, warn_only=True)


def make_generator(seed: int) -> torch.Generator:
    """CPU generator for all sampled noise, so seeded runs match across devices."""
    return torch.Generator().manual_seed(int(seed))


def slice_name(subject_id: str, slice_index: int) -> str:
    """File-safe name for one slice of one subject."""
    safe = re.sub(r"[^0-9A-Za-z_.-]+", "-", str(subject_id)).strip("-")
    return f"{safe}_{int(slice_index):03d}"


def digest_arrays(arrays: Iterable[np.ndarray]) -> str:
    """SHA-256 over dtype, shape and bytes of every array, in order."""
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def write_jsonl(path: Union[str, Path], rows: Iterable[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    return path


def append_jsonl(path: Union[str, Path], row: dict) -> None:
    with Path(path).open("a", encoding="utf-8") as f:
        f.write(json.dumps(row, sort_keys=True) + "\n")


def read_jsonl(path: Union[str, Path]) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise ValueError(f"Manifest not found: {path}")
    with path.open(encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
