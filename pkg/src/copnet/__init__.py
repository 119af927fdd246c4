"""Contour closing pipeline for cell instance segmentation.

Degrade clean contour masks with a reaction-diffusion PDE, close gaps with
an iterated backend, label cells by connected components and score the
result against ground truth.
"""
__version__ = "0.1.0"

from .closing import (
    BackendError,
    ClosingConfig,
    ClosingRun,
    ExternalBackend,
    IdentityBackend,
    MorphologicalBackend,
    call_external,
    close_morphological,
    iterate_closing,
    modified_fraction,
    parse_backend,
    run_backend,
)
from .labelling import LabelConfig, connected_components, label_cells
from .metrics import (
    MatchReport,
    boundary,
    cldice,
    interslice_cldice,
    mann_whitney_u,
    match_cells,
    nsd,
    skeletonize,
)
from .pde import PdeSystem, SolverError, build_system, degrade, simulate_training_pair, step
from .perturb import (
    DegradeConfig,
    PerturbSite,
    gen_alpha,
    gen_beta,
    gen_fields,
    punch_holes,
    sample_sites,
    slice_rng,
    tent_sum,
)
from .raster import (
    BinaryMask,
    DimensionMismatchError,
    Field2D,
    FormatError,
    LabelMap,
    binarize,
    read_copf,
    read_pgm,
    resize,
    write_copf,
    write_pgm,
    zscore_slice,
)
from .synth import SynthConfig, junction_holes, tissue_from_seeds, voronoi_tissue
