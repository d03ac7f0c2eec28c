"""MCMC-free post-selection inference after randomized l1 selection.

The selection probability of the observed active set, viewed as a
function of the target statistic, is approximated by a barrier-smoothed
convex program; selective pivots, confidence intervals and the
selective MLE follow from the approximation on a grid.
"""

__version__ = "0.1.0"

from .exceptions import (DegenerateGrid, DomainViolation, EmptyBatch,
                         EmptySelection, GuardExceeded, NonConvergence,
                         Separation, SingularDesign)
from .selector import (Dataset, PenaltySpec, RandomizationSpec,
                       SelectionEvent, draw_randomization, make_dataset,
                       solve_randomized_program, tune_lambda)
from .reconstruction import (KKTMap, TargetContext, build_data_vector,
                             build_kkt_map, decompose_target,
                             refit_unpenalized)
from .volume import (GridApprox, VolumeProblem, cube_log_prob, grid_log_h,
                     mc_volume_oracle, selective_objective, solve_inner)
from .inference import (InferenceRecord, approximate_pivot, infer_target,
                        invert_interval, make_grid, naive_interval,
                        naive_pivot, selective_mle, two_sided_pvalue)
from .experiments import (CoverageRow, ExperimentConfig, TargetResult,
                          aggregate, gen_dataset, run_batch,
                          run_replication, true_target)
