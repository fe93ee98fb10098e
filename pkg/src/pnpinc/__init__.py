"""Plug-and-play image reconstruction with incremental proximal solvers.

The package splits into six layers:

- ``operators``: forward models (dense Gaussian and complex convolutional
  block operators), serialization, norms.
- ``fidelity``: per-block data-fit terms with certified proximal operators
  for the squared-L2 and robust L1 losses, full/minibatch aggregates.
- ``denoisers``: firmly nonexpansive denoising operators (total variation,
  DCT shrinkage, linear smoothing) plus numerical certification.
- ``solvers``: batch and incremental plug-and-play iterations sharing one
  splitting kernel, with recorded iterate traces.
- ``analysis``: executable convergence bounds, fixed-point residuals, and
  per-algorithm memory accounting.
- ``harness``: synthetic problems, metrics, file formats, and the CLI.
"""

from .errors import (
    ContainerFormatError,
    NonConvergenceError,
    PnpIncError,
    ScheduleExhaustedError,
    ShapeMismatchError,
    UnsupportedCombinationError,
)
from .operators import (
    ConvBlock,
    DenseBlock,
    ForwardModel,
    Signal,
    adjoint_block,
    apply_block,
    block_operator_norm,
    load_model,
    make_conv_model,
    make_gaussian_model,
    operator_norm,
    save_model,
)
from .fidelity import (
    FidelityBlock,
    FidelitySet,
    Loss,
    block_gradient,
    block_loss,
    build_fidelity,
    full_gradient,
    full_loss,
    lipschitz_bound,
    minibatch_prox,
    prox_average,
    prox_block,
    prox_full,
    soft_threshold,
)
from .denoisers import (
    AveragedWrap,
    BoxProjection,
    CertificationReport,
    DctSoftThreshold,
    Denoiser,
    ScaledSmoothing,
    TvChambolle,
    certify_contraction,
    certify_firm_nonexpansive,
    tv_backend_name,
)
from .solvers import (
    ALGORITHMS,
    EpochShuffle,
    FixedSchedule,
    IidUniform,
    IterateRecord,
    Problem,
    RunTrace,
    SolverConfig,
    SolverState,
    initial_state,
    matched_admm_state,
    run,
)
from .analysis import (
    BoundReport,
    TheoryParams,
    apply_S,
    apply_S_block,
    block_deviation_bound,
    bound_report,
    fixed_point_residuals,
    lemma_iterate_radius,
    memory_report,
    normalized_residual,
    theorem1_bound,
    theorem2_bound,
    theorem3_envelope,
    theorem3_eta,
)
from .harness import (
    ExperimentConfig,
    generate_cs_problem,
    generate_tomo_problem,
    image_names,
    main,
    make_denoiser,
    read_pgm,
    run_experiment,
    snr_affine,
    synthetic_image,
    write_pgm,
)

__version__ = "0.1.0"
