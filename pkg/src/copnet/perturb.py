"""Random perturbation maps for the degradation PDE, and binary hole punching.

Both maps are sums of radially linear "tent" kernels ``max(0, 1 - d / R)``
centred on randomly drawn sites.  The diffusion map lives in
``[d_min, d_max]`` and the drop map in ``[0, 1]``.

Randomness always comes from a :class:`numpy.random.Generator` built by
:func:`slice_rng`, so a corpus is reproducible from ``(seed, slice, rep)``
alone, whatever order the slices are processed in.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .raster import DEFAULT_SPACING, BinaryMask, Field2D

DEFAULT_SEED = 20240917


@dataclass(frozen=True)
class PerturbSite:
    x: float  # um from the raster origin, along columns
    y: float  # um from the raster origin, along rows
    radius: float  # um


@dataclass(frozen=True)
class DegradeConfig:
    n_diffusion: int = 6  # N1
    n_drop: int = 10  # N2
    d_min: float = 0.1  # um^2/s
    d_max: float = 1.0  # um^2/s
    r_min: float = 2.0  # um
    r_max: float = 7.0  # um
    T: float = 1.0  # s
    dt: float = 0.05  # s
    seed: int = DEFAULT_SEED
    integer_radii: bool = True
    clamp_tents: bool = True
    conservative: bool = True

    def __post_init__(self):
        if self.n_diffusion < 0 or self.n_drop < 0:
            raise ValueError("site counts must be >= 0")
        if not 0 <= self.d_min <= self.d_max:
            raise ValueError(f"need 0 <= d_min <= d_max, got {self.d_min}, {self.d_max}")
        if not 0 < self.r_min:
            raise ValueError(f"r_min must be > 0, got {self.r_min}")
        if self.r_min > self.r_max:
            raise ValueError(f"r_min ({self.r_min}) > r_max ({self.r_max})")
        if not 0 < self.dt <= self.T:
            raise ValueError(f"need 0 < dt <= T, got dt={self.dt}, T={self.T}")

    def to_dict(self) -> dict:
        return asdict(self)


def slice_rng(seed: int, slice_index: int = 0, rep: int = 0) -> np.random.Generator:
    """Independent generator for one (slice, repetition) of a corpus."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(slice_index), int(rep)))
    return np.random.Generator(np.random.PCG64(ss))


def sample_sites(
    config: DegradeConfig,
    count: int,
    rng: np.random.Generator,
    shape: Tuple[int, int],
    spacing: float = DEFAULT_SPACING,
) -> List[PerturbSite]:
    """Draw ``count`` sites with centres uniform over the image domain.

    Radii are uniform over the integers ``r_min..r_max`` (um) unless
    ``config.integer_radii`` is off, in which case they are continuous.
    """
    if count < 0:
        raise ValueError("count must be >= 0")
    if config.r_min > config.r_max:
        raise ValueError(f"r_min ({config.r_min}) > r_max ({config.r_max})")
    h, w = shape
    xs = rng.uniform(0.0, (w - 1) * spacing, size=count)
    ys = rng.uniform(0.0, (h - 1) * spacing, size=count)
    if config.integer_radii:
        lo, hi = int(np.ceil(config.r_min)), int(np.floor(config.r_max))
        if lo > hi:
            raise ValueError(f"no integer radius in [{config.r_min}, {config.r_max}]")
        radii = rng.integers(lo, hi + 1, size=count).astype(float)
    else:
        radii = rng.uniform(config.r_min, config.r_max, size=count)
    return [PerturbSite(float(x), float(y), float(r)) for x, y, r in zip(xs, ys, radii)]


def tent_sum(sites: Sequence[PerturbSite], x: float, y: float) -> float:
    """Unclamped sum of tents at the point ``(x, y)`` (um)."""
    total = 0.0
    for s in sites:
        d = np.hypot(x - s.x, y - s.y)
        total += max(0.0, 1.0 - d / s.radius)
    return total


def tent_field(sites: Sequence[PerturbSite], shape: Tuple[int, int], spacing: float) -> np.ndarray:
    """Unclamped sum of tents evaluated at every pixel centre.

    Pixel ``(i, j)`` sits at ``(j * spacing, i * spacing)`` um.
    """
    h, w = shape
    out = np.zeros(shape)
    for s in sites:
        # each tent is supported on a disk; only touch its bounding box
        c0 = max(0, int(np.floor((s.x - s.radius) / spacing)))
        c1 = min(w, int(np.ceil((s.x + s.radius) / spacing)) + 1)
        r0 = max(0, int(np.floor((s.y - s.radius) / spacing)))
        r1 = min(h, int(np.ceil((s.y + s.radius) / spacing)) + 1)
        if c0 >= c1 or r0 >= r1:
            continue
        px = np.arange(c0, c1) * spacing - s.x
        py = np.arange(r0, r1) * spacing - s.y
        d = np.hypot(py[:, None], px[None, :])
        out[r0:r1, c0:c1] += np.maximum(0.0, 1.0 - d / s.radius)
    return out


def _draw(config, rng, shape, spacing):
    sites = sample_sites(config, config.n_diffusion + config.n_drop, rng, shape, spacing)
    return sites[: config.n_diffusion], sites[config.n_diffusion :]


def _alpha_from(sites, config, shape, spacing) -> Field2D:
    s = tent_field(sites, shape, spacing)
    if config.clamp_tents:
        s = np.minimum(s, 1.0)
    return Field2D(config.d_min + (config.d_max - config.d_min) * s, spacing)


def _beta_from(sites, config, shape, spacing) -> Field2D:
    s = tent_field(sites, shape, spacing)
    if config.clamp_tents:
        s = np.minimum(s, 1.0)
    return Field2D(s, spacing)


def gen_fields(
    config: DegradeConfig,
    rng: np.random.Generator,
    shape: Tuple[int, int],
    spacing: float = DEFAULT_SPACING,
) -> Tuple[Field2D, Field2D]:
    """Diffusion map and drop map from one draw of ``N1 + N2`` sites.

    The first ``N1`` sites drive diffusion, the remaining ``N2`` drive drops.
    """
    alpha_sites, beta_sites = _draw(config, rng, shape, spacing)
    return (
        _alpha_from(alpha_sites, config, shape, spacing),
        _beta_from(beta_sites, config, shape, spacing),
    )


def gen_alpha(config, rng, shape, spacing=DEFAULT_SPACING) -> Field2D:
    """Diffusion map alone; consumes the same random draws as :func:`gen_fields`."""
    alpha_sites, _ = _draw(config, rng, shape, spacing)
    return _alpha_from(alpha_sites, config, shape, spacing)


def gen_beta(config, rng, shape, spacing=DEFAULT_SPACING) -> Field2D:
    """Drop map alone; consumes the same random draws as :func:`gen_fields`."""
    _, beta_sites = _draw(config, rng, shape, spacing)
    return _beta_from(beta_sites, config, shape, spacing)


def punch_holes(
    mask: BinaryMask,
    n_holes: int,
    r_lo: float,
    r_hi: float,
    rng: np.random.Generator,
    spacing: float = DEFAULT_SPACING,
    centers: str = "uniform",
) -> BinaryMask:
    """Erase contour pixels inside ``n_holes`` random disks.

    Radii (um) are continuous-uniform on ``[r_lo, r_hi]``.  With
    ``centers="uniform"`` disk centres are uniform over the domain; with
    ``centers="contour"`` they are drawn among the contour pixels, so every
    hole actually bites into a contour.
    """
    if r_lo > r_hi:
        raise ValueError(f"r_lo ({r_lo}) > r_hi ({r_hi})")
    if centers not in ("uniform", "contour"):
        raise ValueError(f"unknown centre mode {centers!r}")
    bits = mask.bits.copy()
    h, w = bits.shape
    if n_holes <= 0:
        return BinaryMask(bits)
    if centers == "uniform":
        cx = rng.uniform(0.0, (w - 1) * spacing, size=n_holes)
        cy = rng.uniform(0.0, (h - 1) * spacing, size=n_holes)
    else:
        ys, xs = np.nonzero(mask.bits)
        if len(ys) == 0:
            return BinaryMask(bits)
        pick = rng.integers(0, len(ys), size=n_holes)
        cx = xs[pick] * spacing
        cy = ys[pick] * spacing
    radii = rng.uniform(r_lo, r_hi, size=n_holes)
    yy = np.arange(h)[:, None] * spacing
    xx = np.arange(w)[None, :] * spacing
    for x, y, r in zip(cx, cy, radii):
        bits[(xx - x) ** 2 + (yy - y) ** 2 <= r * r] = False
    return BinaryMask(bits)
