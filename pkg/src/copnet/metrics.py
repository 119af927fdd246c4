"""Evaluation: cell matching, NSD, clDice and a one-sided rank-sum test."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Sequence, Tuple

import numpy as np
from scipy import ndimage, special, stats

from .raster import BinaryMask, DimensionMismatchError, LabelMap

LABELLED, MERGED, SPLIT = "labelled", "merged", "split"


# ---------------------------------------------------------------- cell matching

@dataclass
class MatchReport:
    classes: Dict[int, str]
    partners: Dict[int, int]
    overlap_threshold: float
    measure: str = "iou"
    counts: Dict[str, int] = field(init=False)

    def __post_init__(self):
        self.counts = {LABELLED: 0, MERGED: 0, SPLIT: 0}
        for c in self.classes.values():
            self.counts[c] += 1

    @property
    def n_cells(self) -> int:
        return len(self.classes)

    def percent(self, cls: str) -> float:
        return 100.0 * self.counts[cls] / self.n_cells

    @property
    def labelled(self) -> float:
        return self.percent(LABELLED)

    @property
    def merged(self) -> float:
        return self.percent(MERGED)

    @property
    def split(self) -> float:
        return self.percent(SPLIT)


def match_cells(pred: LabelMap, gt: LabelMap, t_overlap: float = 0.85, measure: str = "iou") -> MatchReport:
    """Classify every ground-truth cell as labelled, merged or split.

    Each GT cell's partner is the predicted cell it overlaps most (ties go to
    the lower label).  The cell is *labelled* when the overlap measure
    (``"iou"``, or ``"gt"`` for intersection over GT area) with its partner
    exceeds ``t_overlap``.  Otherwise it is *merged* when another GT cell has
    the same partner, and *split* when it does not (including the case of
    no overlapping predicted cell at all).
    """
    if pred.shape != gt.shape:
        raise DimensionMismatchError(f"pred {pred.shape} and gt {gt.shape} differ")
    if not 0 < t_overlap < 1:
        raise ValueError(f"t_overlap must lie in (0, 1), got {t_overlap}")
    if measure not in ("iou", "gt"):
        raise ValueError(f"unknown overlap measure {measure!r}")
    g = gt.labels.ravel()
    p = pred.labels.ravel()
    gt_ids = np.unique(g[g > 0])
    if len(gt_ids) == 0:
        raise ValueError("ground truth has no cells")

    n_p = int(p.max()) + 1
    gt_area = np.bincount(g, minlength=int(g.max()) + 1)
    pred_area = np.bincount(p, minlength=n_p)
    both = (g > 0) & (p > 0)
    pair = g[both].astype(np.int64) * n_p + p[both]
    keys, counts = np.unique(pair, return_counts=True)
    kg, kp = keys // n_p, keys % n_p

    partners: Dict[int, int] = {}
    best: Dict[int, int] = {}
    # keys are sorted by (gt, pred), so the first strict maximum is the lowest label
    for gi, pi, c in zip(kg.tolist(), kp.tolist(), counts.tolist()):
        if c > best.get(gi, 0):
            best[gi] = c
            partners[gi] = pi

    shared = {}
    for pi in partners.values():
        shared[pi] = shared.get(pi, 0) + 1

    classes: Dict[int, str] = {}
    for gi in gt_ids.tolist():
        pi = partners.get(gi)
        if pi is None:
            classes[gi] = SPLIT
            continue
        inter = best[gi]
        denom = gt_area[gi] + pred_area[pi] - inter if measure == "iou" else gt_area[gi]
        if inter / denom > t_overlap:
            classes[gi] = LABELLED
        elif shared[pi] > 1:
            classes[gi] = MERGED
        else:
            classes[gi] = SPLIT
    return MatchReport(classes, partners, t_overlap, measure)


# ---------------------------------------------------------------- NSD

_CROSS = ndimage.generate_binary_structure(2, 1)


def boundary(mask: BinaryMask) -> BinaryMask:
    """Mask pixels with at least one 4-neighbour outside the mask or the image."""
    inner = ndimage.binary_erosion(mask.bits, structure=_CROSS, border_value=0)
    return BinaryMask(mask.bits & ~inner)


def _sq_dist_to(target: np.ndarray) -> np.ndarray:
    # squared distance in exact integers, recovered from the nearest-pixel indices
    _, (iy, ix) = ndimage.distance_transform_edt(~target, return_indices=True)
    yy, xx = np.indices(target.shape)
    return (yy - iy) ** 2 + (xx - ix) ** 2


def nsd(pred: BinaryMask, gt: BinaryMask, tau: float = 2.0) -> float:
    """Normalized surface distance at tolerance ``tau`` pixels."""
    if pred.shape != gt.shape:
        raise DimensionMismatchError(f"pred {pred.shape} and gt {gt.shape} differ")
    if tau < 0:
        raise ValueError("tau must be >= 0")
    bp = boundary(pred).bits
    bg = boundary(gt).bits
    n_p, n_g = int(bp.sum()), int(bg.sum())
    if n_p + n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    tau2 = tau * tau
    g_ok = int(np.count_nonzero(_sq_dist_to(bp)[bg] <= tau2))
    p_ok = int(np.count_nonzero(_sq_dist_to(bg)[bp] <= tau2))
    return (g_ok + p_ok) / (n_g + n_p)


# ---------------------------------------------------------------- skeletons / clDice

def _neighbours(img: np.ndarray):
    """P2..P9 of every pixel (clockwise from north) on a zero-padded image."""
    p = np.pad(img, 1)
    c = slice(1, -1)
    n, s = slice(0, -2), slice(2, None)
    return [p[n, c], p[n, s], p[c, s], p[s, s], p[s, c], p[s, n], p[c, n], p[n, n]]


def _zs_candidates(img: np.ndarray, first: bool) -> np.ndarray:
    nb = _neighbours(img)
    P2, P3, P4, P5, P6, P7, P8, P9 = nb
    b = sum(x.astype(np.int8) for x in nb)
    ring = nb + [P2]
    a = sum(((~ring[k]) & ring[k + 1]).astype(np.int8) for k in range(8))
    cond = img & (b >= 2) & (b <= 6) & (a == 1)
    if first:
        cond &= ~(P2 & P4 & P6) & ~(P4 & P6 & P8)
    else:
        cond &= ~(P2 & P4 & P8) & ~(P2 & P6 & P8)
    return cond


def skeletonize(mask: BinaryMask) -> BinaryMask:
    """Zhang-Suen thinning, iterated until nothing changes."""
    img = mask.bits.copy()
    while True:
        changed = False
        for first in (True, False):
            rm = _zs_candidates(img, first)
            if rm.any():
                img &= ~rm
                changed = True
        if not changed:
            return BinaryMask(img)


def cldice(pred: BinaryMask, gt: BinaryMask) -> float:
    """Centreline Dice between two contour masks."""
    if pred.shape != gt.shape:
        raise DimensionMismatchError(f"pred {pred.shape} and gt {gt.shape} differ")
    sp_ = skeletonize(pred).bits
    sg = skeletonize(gt).bits
    n_sp, n_sg = int(sp_.sum()), int(sg.sum())
    if n_sp == 0 and n_sg == 0:
        return 1.0
    if n_sp == 0 or n_sg == 0:
        return 0.0
    tprec = np.count_nonzero(sp_ & gt.bits) / n_sp
    tsens = np.count_nonzero(sg & pred.bits) / n_sg
    if tprec + tsens == 0:
        return 0.0
    return 2.0 * tprec * tsens / (tprec + tsens)


def interslice_cldice(stack: Sequence[BinaryMask]) -> Tuple[float, float]:
    """Mean and population std of clDice over consecutive slice pairs."""
    if len(stack) < 2:
        raise ValueError("need at least 2 slices")
    vals = np.array([cldice(a, b) for a, b in zip(stack[:-1], stack[1:])])
    return float(vals.mean()), float(vals.std())


# ---------------------------------------------------------------- Mann-Whitney U

EXACT_COMBINATIONS = 10_000


def _rank_sum_counts(doubled_ranks: np.ndarray, n: int) -> np.ndarray:
    """Number of size-``n`` subsets for every possible sum of doubled ranks.

    Dynamic programme over items; ``counts[k, s]`` = subsets of size k with
    sum s.  Doubled midranks are integers, so ties are handled exactly.
    """
    total = int(doubled_ranks.sum())
    counts = np.zeros((n + 1, total + 1), dtype=object)
    counts[0, 0] = 1
    for r in doubled_ranks.tolist():
        counts[1:, r:] = counts[1:, r:] + counts[:-1, : total + 1 - r]
    return counts[n]


def mann_whitney_u(a, b, alternative: str = "greater", method: str = "auto") -> Tuple[float, float]:
    """One-sided Mann-Whitney U test of ``a`` against ``b``.

    Returns ``(U, p)`` with ``U`` the statistic of ``a`` (pairs with
    ``a > b``, ties counting one half).  ``alternative="greater"`` tests
    whether ``a`` tends to exceed ``b``.  ``method="auto"`` uses the exact
    permutation distribution when there are at most 10 000 rank
    assignments, and the tie-corrected normal approximation with continuity
    correction otherwise.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be non-empty")
    if alternative not in ("greater", "less"):
        raise ValueError(f"alternative must be 'greater' or 'less', got {alternative!r}")
    if method not in ("auto", "exact", "asymptotic"):
        raise ValueError(f"unknown method {method!r}")
    n, m = a.size, b.size
    ranks = stats.rankdata(np.concatenate([a, b]))
    u = float(ranks[:n].sum() - n * (n + 1) / 2.0)

    if method == "auto":
        method = "exact" if special.comb(n + m, n, exact=True) <= EXACT_COMBINATIONS else "asymptotic"

    if method == "exact":
        doubled = np.rint(2 * ranks).astype(np.int64)
        counts = _rank_sum_counts(doubled, n)
        total = sum(counts)
        # U = R/2 - n(n+1)/2, so compare doubled rank sums
        obs = int(doubled[:n].sum())
        tail = counts[obs:] if alternative == "greater" else counts[: obs + 1]
        return u, float(sum(tail) / total)

    N = n + m
    _, t = np.unique(ranks, return_counts=True)
    tie_term = float((t ** 3 - t).sum()) / (N * (N - 1)) if N > 1 else 0.0
    var = n * m / 12.0 * ((N + 1) - tie_term)
    if var <= 0:
        return u, 1.0
    mu = n * m / 2.0
    sd = math.sqrt(var)
    if alternative == "greater":
        p = stats.norm.sf((u - mu - 0.5) / sd)
    else:
        p = stats.norm.cdf((u - mu + 0.5) / sd)
    return u, float(p)
