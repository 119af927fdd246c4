"""Cell instance labelling from closed contour maps."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .raster import BinaryMask, DimensionMismatchError, Field2D, LabelMap, binarize

_STRUCTURES = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}


@dataclass(frozen=True)
class LabelConfig:
    threshold: float = 0.5
    connectivity: int = 4
    min_area: int = 64
    exclusion: Optional[BinaryMask] = None

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.connectivity not in _STRUCTURES:
            raise ValueError(f"connectivity must be 4 or 8, got {self.connectivity}")
        if self.min_area < 0:
            raise ValueError("min_area must be >= 0")


def canonical_order(labels: np.ndarray) -> np.ndarray:
    """Renumber positive labels 1..K by the row-major position of their first pixel."""
    flat = labels.ravel()
    ids, first = np.unique(flat, return_index=True)
    keep = ids > 0
    ids, first = ids[keep], first[keep]
    lut = np.zeros(int(flat.max()) + 1 if flat.size else 1, dtype=np.int64)
    lut[ids[np.argsort(first)]] = np.arange(1, len(ids) + 1)
    return lut[labels]


def connected_components(mask: BinaryMask, connectivity: int = 4) -> LabelMap:
    if connectivity not in _STRUCTURES:
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    labels, _ = ndimage.label(mask.bits, structure=_STRUCTURES[connectivity])
    return LabelMap(canonical_order(labels))


def label_cells(contour: Field2D, config: LabelConfig = LabelConfig()) -> LabelMap:
    """Label the regions enclosed by contour pixels.

    Cells are the connected components of the pixels below threshold (and
    outside the exclusion mask); components smaller than ``min_area`` are
    folded into label 0.
    """
    background = ~binarize(contour, config.threshold).bits
    if config.exclusion is not None:
        if config.exclusion.shape != contour.shape:
            raise DimensionMismatchError(
                f"exclusion mask {config.exclusion.shape} does not match contour map {contour.shape}"
            )
        background &= ~config.exclusion.bits
    labels = connected_components(BinaryMask(background), config.connectivity).labels
    if config.min_area > 0 and labels.max() > 0:
        areas = np.bincount(labels.ravel())
        small = areas < config.min_area
        small[0] = False
        if small.any():
            labels = np.where(small[labels], 0, labels)
            labels = canonical_order(labels)
    return LabelMap(labels)
