import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import torch
import config

logger = logging.getLogger(__name__)

ORIENTATIONS = ("horizontal", "vertical")


@dataclass(frozen=True)
class MaskStrip:
    """One strip mask: a band of ``extent`` rows (horizontal) or columns (vertical)."""

    orientation: str
    offset: int
    extent: int
    height: int
    width: int

    @property
    def as_image(self) -> torch.Tensor:
        """Binary (height, width) float64 image, 1 inside the strip."""
        image = torch.zeros(self.height, self.width, dtype=torch.float64)
        if self.orientation == "horizontal":
            image[self.offset:self.offset + self.extent, :] = 1.0
        else:
            image[:, self.offset:self.offset + self.extent] = 1.0
        return image


@dataclass(eq=False)
class MaskSet:
    """Ordered strip masks: horizontal by ascending offset, then vertical."""

    masks: list
    stride: int
    height: int
    width: int
    extent: int
    orientations: tuple
    coverage_count: torch.Tensor = field(init=False)
    _stack: torch.Tensor = field(init=False, repr=False)

    def __post_init__(self):
        self._stack = torch.stack([m.as_image for m in self.masks])
        self.coverage_count = self._stack.sum(dim=0).round().long()

    def __len__(self) -> int:
        return len(self.masks)

    def __iter__(self):
        return iter(self.masks)

    def as_tensor(self) -> torch.Tensor:
        """(R, height, width) stack of all mask images."""
        return self._stack

    def provenance(self) -> dict:
        return {
            "extent": self.extent,
            "stride": self.stride,
            "orientations": list(self.orientations),
            "mask_count": len(self.masks),
        }


def _offsets(dim: int, extent: int, stride: int) -> list[int]:
    offsets = list(range(0, dim - extent + 1, stride))
    if offsets and offsets[-1] != dim - extent:
        # flush-to-edge strip so the far border is covered
        offsets.append(dim - extent)
    return offsets


def build_mask_set(
    height: int = config.IMAGE_SIZE,
    width: int = config.IMAGE_SIZE,
    extent: int = config.MASK_EXTENT,
    stride: int = config.MASK_STRIDE,
    orientations: Iterable[str] = config.MASK_ORIENTATIONS,
) -> MaskSet:
    """Slide strips of thickness ``extent`` across the image with the given stride."""
    requested = set(orientations)
    orientations = tuple(o for o in ORIENTATIONS if o in requested)
    if requested - set(ORIENTATIONS) or not orientations:
        raise ValueError(f"Orientations must be a non-empty subset of {ORIENTATIONS}.")
    if stride < 1:
        raise ValueError(f"Mask stride must be >= 1, got {stride}.")
    if extent < 1 or extent > min(height, width):
        raise ValueError(
            f"Mask extent must be in [1, {min(height, width)}] for a {height}x{width} image, got {extent}."
        )

    masks = []
    for orientation in orientations:
        dim = height if orientation == "horizontal" else width
        for offset in _offsets(dim, extent, stride):
            masks.append(MaskStrip(orientation, offset, extent, height, width))
    if not masks:
        raise ValueError("Mask configuration produces zero masks.")
    return MaskSet(masks, stride, height, width, extent, orientations)


def random_masks(mask_set: MaskSet, n: int, generator: torch.Generator = None) -> torch.Tensor:
    """Draw ``n`` masks uniformly from the set, returned as (n, 1, H, W)."""
    stack = mask_set.as_tensor()
    index = torch.randint(len(mask_set), (n,), generator=generator)
    return stack[index].unsqueeze(1)


def apply_mask_noise(x: torch.Tensor, m, eps: torch.Tensor) -> torch.Tensor:
    """Cover the masked area of ``x`` with the noise ``eps``; unmasked pixels are copied."""
    m_image = m.as_image if isinstance(m, MaskStrip) else m
    m_image = m_image.to(device=x.device)
    if x.shape != eps.shape or m_image.shape[-2:] != x.shape[-2:]:
        raise ValueError(
            f"Shape mismatch: image {tuple(x.shape)}, mask {tuple(m_image.shape)}, noise {tuple(eps.shape)}."
        )
    return torch.where(m_image.bool(), eps, x)


def aggregate_anomaly(per_mask_errors: Sequence[torch.Tensor], mask_set: MaskSet) -> torch.Tensor:
    """Per-pixel mean of the error over the masks that cover each pixel.

    Pixels no mask covers get score 0 and a warning.
    """
    if len(per_mask_errors) != len(mask_set):
        raise ValueError(
            f"Expected one error image per mask ({len(mask_set)}), got {len(per_mask_errors)}."
        )
    errors = torch.stack([e.to(torch.float64) for e in per_mask_errors])
    weights = mask_set.as_tensor().to(errors.device)
    if errors.shape != weights.shape:
        raise ValueError(f"Error images {tuple(errors.shape[1:])} do not match masks {tuple(weights.shape[1:])}.")
    total = _compensated_sum(weights * errors)
    count = mask_set.coverage_count.to(errors.device)
    uncovered = count == 0
    if bool(uncovered.any()):
        logger.warning("%d pixels are covered by no mask; their anomaly score is set to 0.", int(uncovered.sum()))
    return torch.where(uncovered, torch.zeros_like(total), total / count.clamp(min=1).to(total.dtype))


def _compensated_sum(stack: torch.Tensor) -> torch.Tensor:
    """Kahan summation over the first axis, keeping the result independent of order to ~1 ulp."""
    total = torch.zeros_like(stack[0])
    carry = torch.zeros_like(stack[0])
    for item in stack:
        y = item - carry
        t = total + y
        carry = (t - total) - y
        total = t
    return total
