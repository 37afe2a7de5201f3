import logging
from pathlib import Path
from typing import Optional, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from src.dataset import SlicePair  # noqa: E402
from src.inference import InferenceResult  # noqa: E402

logger = logging.getLogger(__name__)


def _panel(ax, image: Optional[np.ndarray], title: str, cmap: str = "gray") -> None:
    ax.set_title(title, fontsize=9)
    ax.axis("off")
    if image is None:
        ax.text(0.5, 0.5, "n/a", ha="center", va="center", transform=ax.transAxes)
        return
    ax.imshow(np.asarray(image), cmap=cmap)


def save_case_figure(
    pair: SlicePair,
    result: InferenceResult,
    path: Union[str, Path],
    title: Optional[str] = None,
) -> Path:
    """One row per case: input x, target y, ground truth, x_bar, y_bar, score, prediction."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    panels = [
        (pair.x, "input x", "gray"),
        (pair.y, "target y", "gray"),
        (pair.anomaly_gt, "ground truth", "gray"),
        (_numpy(result.reconstruction), "x̄ (cycle)", "gray"),
        (_numpy(result.forward_translation), "ȳ (translated)", "gray"),
        (_numpy(result.anomaly_score), "anomaly score", "magma"),
        (_numpy(result.binary_mask), f"score > {result.threshold:.3g}", "gray"),
    ]
    fig, axes = plt.subplots(1, len(panels), figsize=(2.2 * len(panels), 2.6))
    for ax, (image, label, cmap) in zip(axes, panels):
        _panel(ax, image, label, cmap)
    fig.suptitle(title or pair.name, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    logger.debug("Saved case figure %s", path)
    return path


def _numpy(value) -> Optional[np.ndarray]:
    if value is None:
        return None
    return value.detach().cpu().numpy() if hasattr(value, "detach") else np.asarray(value)
