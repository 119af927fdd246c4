"""Iterative contour closing around a pluggable backend.

A backend maps a contour probability map to a (hopefully) more closed one.
It is applied repeatedly until the fraction of pixels whose binarized value
changes between consecutive iterations drops below a threshold.

Three backends exist: ``identity``, ``morphological`` (grayscale closing
with a disk) and ``external``, which hands COPF files to a subprocess::

    <command> <in.copf> <out.copf>

and expects exit status 0 with a same-sized map in ``out.copf``.
"""
from __future__ import annotations

import logging
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Union

import numpy as np
from scipy import ndimage

from .raster import DimensionMismatchError, Field2D, read_copf, write_copf

log = logging.getLogger(__name__)

DEFAULT_CONVERGENCE = 0.001
DEFAULT_MAX_ITERS = 30


class BackendError(RuntimeError):
    """External closing backend failed or misbehaved."""


@dataclass(frozen=True)
class IdentityBackend:
    def __str__(self):
        return "identity"


@dataclass(frozen=True)
class MorphologicalBackend:
    radius: int = 2

    def __post_init__(self):
        if self.radius < 1:
            raise ValueError(f"radius must be >= 1, got {self.radius}")

    def __str__(self):
        return f"morphological:{self.radius}"


@dataclass(frozen=True)
class ExternalBackend:
    command: str
    timeout: float = 300.0

    def __str__(self):
        return f"external:{self.command}"


Backend = Union[IdentityBackend, MorphologicalBackend, ExternalBackend]


def parse_backend(text: str, timeout: float = 300.0) -> Backend:
    """Parse ``identity``, ``morphological[:R]`` or ``external:COMMAND``."""
    name, _, arg = text.partition(":")
    if name == "identity" and not arg:
        return IdentityBackend()
    if name in ("morphological", "morph"):
        return MorphologicalBackend(int(arg) if arg else 2)
    if name == "external" and arg:
        return ExternalBackend(arg, timeout)
    raise ValueError(f"unrecognised backend {text!r}")


@dataclass(frozen=True)
class ClosingConfig:
    convergence: float = DEFAULT_CONVERGENCE
    max_iters: int = DEFAULT_MAX_ITERS
    threshold: float = 0.5
    backend: Backend = field(default_factory=IdentityBackend)
    # keep iterating to max_iters even after convergence (per-iteration sweeps)
    sweep: bool = False

    def __post_init__(self):
        if not 0 < self.convergence < 1:
            raise ValueError(f"convergence threshold must lie in (0, 1), got {self.convergence}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not 0 < self.threshold < 1:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")


@dataclass
class ClosingRun:
    final: Field2D
    iterations: int
    history: List[float]
    converged: bool
    maps: Optional[List[Field2D]] = None


def disk(radius: float) -> np.ndarray:
    """Centre-inclusive disk footprint ``{p : |p| <= radius + 0.5}``."""
    r = int(np.floor(radius + 0.5))
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return xx * xx + yy * yy <= (radius + 0.5) ** 2


def close_morphological(field: Field2D, radius: int) -> Field2D:
    """Grayscale closing: max filter then min filter over a disk.

    The reflecting border makes this the exact closing of the mirrored,
    periodically extended image, so it is extensive and idempotent.
    """
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    fp = disk(radius)
    dilated = ndimage.grey_dilation(field.values, footprint=fp, mode="reflect")
    closed = ndimage.grey_erosion(dilated, footprint=fp, mode="reflect")
    return field.with_values(closed, field.role)


def call_external(backend: ExternalBackend, field: Field2D) -> Field2D:
    """Exchange one map with an external process, without clamping the result."""
    with tempfile.TemporaryDirectory(prefix="copnet-") as tmp:
        src = Path(tmp) / "in.copf"
        dst = Path(tmp) / "out.copf"
        write_copf(field, src)
        argv = shlex.split(backend.command) + [str(src), str(dst)]
        try:
            proc = subprocess.run(argv, capture_output=True, text=True, timeout=backend.timeout)
        except subprocess.TimeoutExpired:
            raise BackendError(f"backend {backend.command!r} timed out after {backend.timeout} s") from None
        except OSError as exc:
            raise BackendError(f"cannot run backend {backend.command!r}: {exc}") from exc
        if proc.stdout:
            log.info("backend stdout: %s", proc.stdout.rstrip())
        if proc.stderr:
            log.info("backend stderr: %s", proc.stderr.rstrip())
        if proc.returncode != 0:
            raise BackendError(f"backend {backend.command!r} exited with status {proc.returncode}")
        if not dst.exists():
            raise BackendError(f"backend {backend.command!r} wrote no output")
        out = read_copf(dst)
    if out.shape != field.shape:
        raise DimensionMismatchError(f"backend returned {out.shape}, expected {field.shape}")
    return Field2D(out.values, field.spacing)


def run_backend(backend: Backend, field: Field2D) -> Field2D:
    if isinstance(backend, IdentityBackend):
        out = field
    elif isinstance(backend, MorphologicalBackend):
        out = close_morphological(field, backend.radius)
    elif isinstance(backend, ExternalBackend):
        out = call_external(backend, field)
    else:
        raise TypeError(f"unknown backend {backend!r}")
    if out.shape != field.shape:
        raise DimensionMismatchError(f"backend returned {out.shape}, expected {field.shape}")
    return Field2D(np.clip(out.values, 0.0, 1.0), field.spacing, "probability")


def modified_fraction(u_prev: Field2D, u_next: Field2D, threshold: float = 0.5) -> float:
    """Fraction of pixels whose binarized state differs between two maps."""
    if u_prev.shape != u_next.shape:
        raise DimensionMismatchError(f"maps differ in shape: {u_prev.shape} vs {u_next.shape}")
    changed = (u_prev.values >= threshold) != (u_next.values >= threshold)
    return int(np.count_nonzero(changed)) / changed.size


def iterate_closing(
    u0: Field2D,
    config: ClosingConfig = ClosingConfig(),
    keep_maps: bool = False,
    callback: Optional[Callable[[int, Field2D, float], None]] = None,
) -> ClosingRun:
    """Apply the backend until the modified fraction drops below threshold.

    ``keep_maps`` retains every intermediate map (index 0 is the input);
    ``callback(k, map_k, fraction_k)`` is called after each iteration.
    """
    u = u0
    history: List[float] = []
    maps = [u0] if keep_maps else None
    converged = False
    for k in range(1, config.max_iters + 1):
        nxt = run_backend(config.backend, u)
        frac = modified_fraction(u, nxt, config.threshold)
        history.append(frac)
        if maps is not None:
            maps.append(nxt)
        if callback is not None:
            callback(k, nxt, frac)
        u = nxt
        converged = frac < config.convergence
        if converged and not config.sweep:
            break
    if not converged:
        log.warning("closing stopped at the %d-iteration cap without converging", config.max_iters)
    return ClosingRun(u, len(history), history, converged, maps)
