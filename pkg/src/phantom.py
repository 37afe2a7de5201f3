import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from skimage.draw import ellipse

import config
from src.dataset import SPLITS, SlicePair

logger = logging.getLogger(__name__)

ANOMALY_MODES = ("distinct", "camouflage")


@dataclass(frozen=True)
class TissueClass:
    class_id: int
    name: str
    intensities: dict


DEFAULT_CLASSES = (
    TissueClass(1, "parenchyma", {"flair": 0.45, "t1": 0.85, "t2": 0.25}),
    TissueClass(2, "rim", {"flair": 0.70, "t1": 0.50, "t2": 0.55}),
    TissueClass(3, "fluid", {"flair": 0.20, "t1": 0.15, "t2": 0.95}),
    TissueClass(4, "nucleus", {"flair": 0.90, "t1": 0.35, "t2": 0.70}),
)
DISTINCT_ANOMALY = {"flair": 1.25, "t1": 0.60, "t2": 1.20}


@dataclass(frozen=True)
class PhantomSpec:
    classes: tuple = DEFAULT_CLASSES
    modality_x: str = "flair"
    modality_y: str = "t2"
    image_size: int = config.IMAGE_SIZE
    noise_sigma: float = config.PHANTOM_NOISE_SIGMA
    anomaly_modes: tuple = ANOMALY_MODES
    parenchyma_class: int = 1
    rim_class: Optional[int] = 2
    region_count: tuple = (3, 6)
    region_radius: tuple = (0.06, 0.14)
    anomaly_radius: tuple = (0.08, 0.14)
    rim_width: tuple = (0.05, 0.08)
    camouflage_class: int = 2
    camouflage_offset: float = 0.6
    distinct_intensities: dict = field(default_factory=lambda: dict(DISTINCT_ANOMALY))
    anomalous_fraction: float = 1.0
    full_field: bool = False
    seed: int = 0

    def intensity(self, class_id: int, modality: str) -> float:
        return float(self._class(class_id).intensities[modality])

    def mapping(self, class_id: int) -> Callable[[np.ndarray], np.ndarray]:
        """Class-wise x -> y intensity map; texture deviations carry over unchanged."""
        ix = self.intensity(class_id, self.modality_x)
        iy = self.intensity(class_id, self.modality_y)
        return lambda v: iy + (np.asarray(v) - ix)

    def class_table(self) -> list:
        """(class id, intensity in x, mapping x -> y) for every normal class."""
        return [(c.class_id, self.intensity(c.class_id, self.modality_x), self.mapping(c.class_id)) for c in self.classes]

    def camouflage_intensities(self) -> tuple:
        ix = self.intensity(self.camouflage_class, self.modality_x)
        iy = self.intensity(self.camouflage_class, self.modality_y)
        ay = iy - self.camouflage_offset if iy >= self.camouflage_offset else iy + self.camouflage_offset
        return ix, ay

    def _class(self, class_id: int) -> TissueClass:
        for c in self.classes:
            if c.class_id == class_id:
                return c
        raise ValueError(f"Phantom has no tissue class {class_id}.")

    def region_classes(self) -> list[int]:
        return [c.class_id for c in self.classes if c.class_id not in (self.parenchyma_class, self.rim_class)]

    def validate(self) -> None:
        for c in self.classes:
            missing = {self.modality_x, self.modality_y} - set(c.intensities)
            if missing:
                raise ValueError(f"Tissue class {c.name!r} has no intensity for {sorted(missing)}.")
        xs = [self.intensity(c.class_id, self.modality_x) for c in self.classes]
        pairs = [(x, self.intensity(c.class_id, self.modality_y)) for x, c in zip(xs, self.classes)]
        if len(set(xs)) != len(xs) or 0.0 in xs or len(set(pairs)) != len(pairs):
            raise ValueError(
                f"Normal tissue mapping {self.modality_x}->{self.modality_y} is not injective: "
                f"every class needs its own non-zero {self.modality_x} intensity."
            )
        self._class(self.parenchyma_class)
        if self.rim_class is not None:
            self._class(self.rim_class)
        unknown = set(self.anomaly_modes) - set(ANOMALY_MODES)
        if unknown:
            raise ValueError(f"Unknown anomaly modes {sorted(unknown)}; expected a subset of {ANOMALY_MODES}.")
        if "camouflage" in self.anomaly_modes:
            self._class(self.camouflage_class)
            if self.camouflage_offset <= 0.5:
                raise ValueError("Camouflage offset must exceed 0.5 so the anomaly differs in y.")
        if "distinct" in self.anomaly_modes and self.distinct_intensities[self.modality_x] in xs:
            raise ValueError("Distinct anomaly intensity coincides with a normal class in x.")
        if self.noise_sigma < 0 or self.image_size < 8:
            raise ValueError("Phantom needs noise_sigma >= 0 and image_size >= 8.")


def _ellipse_mask(rng, center, radii, shape) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    rr, cc = ellipse(center[0], center[1], radii[0], radii[1], shape=shape, rotation=rng.uniform(0, np.pi))
    mask[rr, cc] = True
    return mask


def _point_inside(rng, region: np.ndarray):
    rows, cols = np.nonzero(region)
    k = rng.integers(len(rows))
    return float(rows[k]), float(cols[k])


def _anatomy(spec: PhantomSpec, rng) -> tuple:
    """Label image and the interior mask where regions and anomalies may go."""
    size = spec.image_size
    shape = (size, size)
    labels = np.zeros(shape, dtype=np.int64)
    if spec.full_field:
        labels[:] = spec.parenchyma_class
        interior = np.ones(shape, dtype=bool)
    else:
        center = (size / 2 + rng.uniform(-0.04, 0.04) * size, size / 2 + rng.uniform(-0.04, 0.04) * size)
        radii = (rng.uniform(0.38, 0.45) * size, rng.uniform(0.32, 0.40) * size)
        angle = rng.uniform(-0.2, 0.2)
        rr, cc = ellipse(center[0], center[1], radii[0], radii[1], shape=shape, rotation=angle)
        head = np.zeros(shape, dtype=bool)
        head[rr, cc] = True
        interior = head
        if spec.rim_class is not None:
            width = rng.uniform(*spec.rim_width) * size
            rr, cc = ellipse(center[0], center[1], radii[0] - width, radii[1] - width, shape=shape, rotation=angle)
            interior = np.zeros(shape, dtype=bool)
            interior[rr, cc] = True
            labels[head] = spec.rim_class
        labels[interior] = spec.parenchyma_class

    choices = spec.region_classes()
    n_regions = rng.integers(spec.region_count[0], spec.region_count[1] + 1)
    for _ in range(n_regions if choices else 0):
        radii = (rng.uniform(*spec.region_radius) * size, rng.uniform(*spec.region_radius) * size)
        region = _ellipse_mask(rng, _point_inside(rng, interior), radii, shape) & interior
        labels[region] = choices[rng.integers(len(choices))]
    return labels, interior


def generate_phantom(spec: PhantomSpec, n_slices: int, split: str) -> list[SlicePair]:
    """Deterministic phantom slices for one split; training slices are always anomaly-free."""
    spec.validate()
    if split not in SPLITS:
        raise ValueError(f"Unknown split {split!r}; expected one of {SPLITS}.")
    if n_slices < 0:
        raise ValueError(f"n_slices must be >= 0, got {n_slices}.")
    rng = np.random.default_rng([spec.seed, SPLITS.index(split)])
    shape = (spec.image_size, spec.image_size)
    lookup_x = np.zeros(max(c.class_id for c in spec.classes) + 1)
    lookup_y = np.zeros_like(lookup_x)
    for c in spec.classes:
        lookup_x[c.class_id] = c.intensities[spec.modality_x]
        lookup_y[c.class_id] = c.intensities[spec.modality_y]
    modes = [m for m in ANOMALY_MODES if m in spec.anomaly_modes]

    pairs = []
    for i in range(n_slices):
        labels, interior = _anatomy(spec, rng)
        texture = rng.normal(0.0, spec.noise_sigma, shape) if spec.noise_sigma > 0 else np.zeros(shape)
        tissue = labels > 0
        x = np.where(tissue, lookup_x[labels] + texture, 0.0)
        y = np.where(tissue, lookup_y[labels] + texture, 0.0)

        gt = np.zeros(shape, dtype=bool)
        mode = None
        if split != "train" and modes and rng.random() < spec.anomalous_fraction:
            mode = modes[i % len(modes)]
            radii = (rng.uniform(*spec.anomaly_radius) * spec.image_size,
                     rng.uniform(*spec.anomaly_radius) * spec.image_size)
            gt = _ellipse_mask(rng, _point_inside(rng, interior), radii, shape) & interior
            if mode == "camouflage":
                ax, ay = spec.camouflage_intensities()
            else:
                ax = spec.distinct_intensities[spec.modality_x]
                ay = spec.distinct_intensities[spec.modality_y]
            x = np.where(gt, ax + texture, x)
            y = np.where(gt, ay + texture, y)

        pairs.append(SlicePair(
            x=x.astype(np.float32),
            y=y.astype(np.float32),
            anomaly_gt=gt,
            subject_id=f"phantom-{split}-{i:04d}",
            slice_index=0,
            split=split,
            anomaly_mode=mode,
        ))
    logger.debug("Generated %d %s phantom slices", n_slices, split)
    return pairs


def camouflage_self_check(pairs: list[SlicePair], spec: PhantomSpec) -> dict:
    """Pooled anomaly means of camouflage slices against the matched normal class."""
    xs = np.concatenate([p.x[p.anomaly_gt] for p in pairs if p.anomaly_mode == "camouflage"] or [np.zeros(0)])
    ys = np.concatenate([p.y[p.anomaly_gt] for p in pairs if p.anomaly_mode == "camouflage"] or [np.zeros(0)])
    if xs.size == 0:
        raise ValueError("No camouflage anomalies among the given slices.")
    return {
        "x_difference": abs(float(xs.mean()) - spec.intensity(spec.camouflage_class, spec.modality_x)),
        "y_difference": abs(float(ys.mean()) - spec.intensity(spec.camouflage_class, spec.modality_y)),
        "pixels": int(xs.size),
    }
