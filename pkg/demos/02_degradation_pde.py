"""
Degrading a contour map
=======================

Clean contours are blurred by local diffusion and erased by a local decay
term.  Both coefficient fields are sums of tent kernels at random sites.
"""
import numpy as np

from copnet import DegradeConfig, SynthConfig, degrade, gen_fields, simulate_training_pair, slice_rng, voronoi_tissue
from copnet.raster import Field2D

tissue = SynthConfig(n_cells=30, width=192, height=192)
contours, _ = voronoi_tissue(tissue)
cfg = DegradeConfig()  # 6 diffusion sites, 10 drop sites, T = 1 s, dt = 0.05 s

alpha, beta = gen_fields(cfg, slice_rng(cfg.seed, 0, 0), contours.shape, tissue.spacing)
print(f"alpha in [{alpha.values.min():.2f}, {alpha.values.max():.2f}] um^2/s")
print(f"beta > 0 on {np.mean(beta.values > 0):.1%} of the slice")

degraded, gt = simulate_training_pair(contours, cfg, slice_index=0, rep=0)
u0 = contours.bits.astype(float)
print(f"mean contour probability: {u0.mean():.4f} -> {degraded.values.mean():.4f}")
print(f"pixels still >= 0.5: {np.mean(degraded.values[contours.bits] >= 0.5):.1%} of the contour")

# with no decay the zero-flux borders conserve the total exactly
out = degrade(Field2D(u0), alpha, Field2D(np.zeros_like(u0)), T=1.0, dt=0.05, clamp=False)
print(f"mass drift without decay: {abs(out.values.sum() - u0.sum()) / u0.sum():.1e}")

# a uniform decay of ln 2 halves everything in one second
half = degrade(Field2D(u0), Field2D(np.zeros_like(u0)), Field2D(np.full_like(u0, np.log(2))), T=1.0, dt=0.01)
print(f"uniform ln2 decay, max |u/u0 - 1/2| on contours: {np.abs(half.values[contours.bits] - 0.5).max():.1e}")

# repetitions draw new sites for the same slice
again, _ = simulate_training_pair(contours, cfg, slice_index=0, rep=1)
print("rep 1 differs from rep 0:", not np.array_equal(again.values, degraded.values))
