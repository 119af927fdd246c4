"""Synthetic tissue: Voronoi cells separated by closed contours.

Stands in for manually segmented microscopy slices.  Every pixel ends up
either on a contour or inside exactly one 4-connected cell, and labelling
the contour map recovers one component per seed.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .labelling import canonical_order, connected_components
from .perturb import DEFAULT_SEED, slice_rng
from .raster import DEFAULT_SPACING, BinaryMask, LabelMap


@dataclass(frozen=True)
class SynthConfig:
    n_cells: int = 100
    min_separation: Optional[float] = None  # um; None = half the mean cell pitch
    thickness: int = 3  # px
    width: int = 512
    height: int = 512
    spacing: float = DEFAULT_SPACING
    seed: int = DEFAULT_SEED
    max_tries: int = 100_000

    def __post_init__(self):
        if self.n_cells < 1:
            raise ValueError("n_cells must be >= 1")
        if self.thickness < 1:
            raise ValueError("thickness must be >= 1")
        if self.width < 1 or self.height < 1:
            raise ValueError("dimensions must be >= 1")

    @property
    def separation(self) -> float:
        if self.min_separation is not None:
            return self.min_separation
        area = self.width * self.height * self.spacing ** 2
        return 0.5 * np.sqrt(area / self.n_cells)

    def to_dict(self) -> dict:
        return asdict(self)


def sample_seeds(config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Dart-throwing seed points (um, as ``(x, y)`` rows) with a minimum spacing."""
    sep2 = config.separation ** 2
    xmax = (config.width - 1) * config.spacing
    ymax = (config.height - 1) * config.spacing
    pts = []
    tries = 0
    while len(pts) < config.n_cells:
        if tries >= config.max_tries:
            raise ValueError(
                f"placed only {len(pts)} of {config.n_cells} seeds with separation "
                f"{config.separation:.3g} um after {tries} tries"
            )
        tries += 1
        c = (rng.uniform(0, xmax), rng.uniform(0, ymax))
        if all((c[0] - x) ** 2 + (c[1] - y) ** 2 >= sep2 for x, y in pts):
            pts.append(c)
    return np.array(pts, dtype=float).reshape(-1, 2)


def nearest_seed(seeds: np.ndarray, shape: Tuple[int, int], spacing: float) -> np.ndarray:
    """Region map: index (0-based) of the nearest seed for every pixel centre."""
    h, w = shape
    yy, xx = np.indices(shape)
    pix = np.column_stack([xx.ravel() * spacing, yy.ravel() * spacing])
    _, idx = cKDTree(seeds).query(pix)
    return idx.reshape(h, w)


def _wall_pixels(regions: np.ndarray, thickness: int) -> np.ndarray:
    diff_r = regions[:, :-1] != regions[:, 1:]
    diff_d = regions[:-1, :] != regions[1:, :]
    walls = np.zeros(regions.shape, dtype=bool)
    walls[:, :-1] |= diff_r
    walls[:-1, :] |= diff_d
    if thickness % 2 == 0:
        # even widths straddle the boundary
        walls[:, 1:] |= diff_r
        walls[1:, :] |= diff_d
    walls[0, :] = walls[-1, :] = True
    walls[:, 0] = walls[:, -1] = True
    grow = (thickness - 1) // 2 if thickness % 2 else (thickness - 2) // 2
    if grow > 0:
        # Euclidean dilation by `grow` px
        dist = ndimage.distance_transform_edt(~walls)
        walls = dist <= grow
    return walls


def tissue_from_seeds(
    seeds: np.ndarray,
    shape: Tuple[int, int],
    spacing: float = DEFAULT_SPACING,
    thickness: int = 3,
) -> Tuple[BinaryMask, LabelMap]:
    """Contours and cells for the Voronoi tessellation of ``seeds`` (um)."""
    regions = nearest_seed(np.asarray(seeds, dtype=float), shape, spacing)
    contours = _wall_pixels(regions, thickness)

    # a region may be pinched into pieces by its walls: keep its largest piece
    pieces = connected_components(BinaryMask(~contours), 4).labels
    n_pieces = int(pieces.max())
    if n_pieces:
        owner = regions.ravel()[np.unique(pieces.ravel(), return_index=True)[1][1:]]
        sizes = np.bincount(pieces.ravel(), minlength=n_pieces + 1)[1:]
        order = np.lexsort((-sizes, owner))
        keep = np.zeros(n_pieces + 1, dtype=bool)
        first_of_owner = np.r_[True, owner[order][1:] != owner[order][:-1]]
        keep[order[first_of_owner] + 1] = True
        contours = contours | ((pieces > 0) & ~keep[pieces])
        pieces = canonical_order(np.where(keep[pieces], pieces, 0))

    n_seeds = len(seeds)
    if int(pieces.max()) != n_seeds:
        raise ValueError(f"{n_seeds - int(pieces.max())} Voronoi cells vanished under the contours")
    return BinaryMask(contours), LabelMap(pieces)


def voronoi_tissue(config: SynthConfig = SynthConfig(), slice_index: int = 0) -> Tuple[BinaryMask, LabelMap]:
    rng = slice_rng(config.seed, slice_index)
    seeds = sample_seeds(config, rng)
    return tissue_from_seeds(seeds, (config.height, config.width), config.spacing, config.thickness)


def junction_holes(
    contours: BinaryMask,
    cells: LabelMap,
    n_holes: int,
    radius: float,
    spacing: float = DEFAULT_SPACING,
) -> Tuple[BinaryMask, np.ndarray]:
    """Erase ``n_holes`` disks (radius in um) where contours meet.

    Greedy and deterministic: each disk is centred on the contour pixel whose
    opening would join the most cells, among those not already joined by an
    earlier hole (ties in row-major order).  This is the most damaging
    placement of a fixed hole budget, so it probes how bad a contour map can
    get with few small defects.  Returns the holed mask and the ``(row, col)``
    centres.
    """
    if contours.shape != cells.shape:
        raise ValueError(f"contours {contours.shape} and cells {cells.shape} differ")
    r_px = radius / spacing
    k = int(np.floor(r_px))
    off = np.arange(-k - 1, k + 2)
    dy, dx = np.meshgrid(off, off, indexing="ij")
    inside = dy ** 2 + dx ** 2 <= r_px ** 2
    ring = ndimage.binary_dilation(inside, ndimage.generate_binary_structure(2, 1)) & ~inside
    ring_offsets = list(zip(dy[ring], dx[ring]))
    disk_offsets = list(zip(dy[inside], dx[inside]))

    h, w = contours.shape
    m = k + 1
    lab = np.pad(cells.labels, m)
    # labels around every pixel's disk, one layer per ring offset
    stack = np.stack([lab[m + oy : m + oy + h, m + ox : m + ox + w] for oy, ox in ring_offsets])
    stack.sort(axis=0)
    distinct = ((stack[1:] != stack[:-1]) & (stack[1:] > 0)).sum(axis=0) + (stack[0] > 0)

    cand = contours.bits.copy()
    cand[:m, :] = cand[-m:, :] = False
    cand[:, :m] = cand[:, -m:] = False
    ys, xs = np.nonzero(cand)
    order = np.lexsort((xs, ys, -distinct[ys, xs]))

    bits = contours.bits.copy()
    used: set = set()
    centres = []
    for idx in order:
        if len(centres) == n_holes:
            break
        y, x = ys[idx], xs[idx]
        touched = set(stack[:, y, x].tolist()) - {0}
        if len(touched) < 2 or touched & used:
            continue
        used |= touched
        centres.append((y, x))
        for oy, ox in disk_offsets:
            bits[y + oy, x + ox] = False
    return BinaryMask(bits), np.array(centres, dtype=int).reshape(-1, 2)
