"""
Scoring a segmentation
======================

Cells are matched to ground truth by overlap; contours are compared by
surface distance and by centreline Dice.  The rank-sum test compares two
sets of per-slice scores.
"""
import numpy as np

from copnet import (
    LabelConfig,
    SynthConfig,
    cldice,
    interslice_cldice,
    junction_holes,
    label_cells,
    mann_whitney_u,
    match_cells,
    nsd,
    voronoi_tissue,
)
from copnet.raster import Field2D

cfg = SynthConfig(n_cells=50, width=256, height=256)
scores_clean, scores_holed, stack = [], [], []
for i in range(6):
    contours, cells = voronoi_tissue(cfg, slice_index=i)
    stack.append(contours)
    holed, _ = junction_holes(contours, cells, n_holes=4 + i, radius=1.5 * cfg.spacing, spacing=cfg.spacing)
    pred = label_cells(Field2D.from_mask(holed), LabelConfig())
    rep = match_cells(pred, cells)
    scores_holed.append(rep.labelled)
    scores_clean.append(match_cells(cells, cells).labelled)
    print(
        f"slice {i}: labelled {rep.labelled:5.1f}%  merged {rep.merged:5.1f}%  "
        f"NSD {nsd(holed, contours):.4f}  clDice {cldice(holed, contours):.4f}"
    )

u, p = mann_whitney_u(scores_clean, scores_holed, alternative="greater")
print(f"clean > holed: U = {u:.0f}, one-sided p = {p:.4f}")

# neighbouring synthetic slices are unrelated, so this is low
mean, std = interslice_cldice(stack)
print(f"clDice between consecutive slices: {mean:.3f} +- {std:.3f}")
print("identical maps score", nsd(stack[0], stack[0]), cldice(stack[0], stack[0]))
print("background share:", np.mean(~stack[0].bits).round(3))
