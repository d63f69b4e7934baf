"""Online learning-rate schedules from hypergradients, with exact offline
hypergradient oracles to verify them against."""

__version__ = "0.1.0"

from .data import (Batch, BatchSampler, Dataset, RngStream, full_batch,
                   holdout_split, load_idx_dataset, make_blobs, next_batch,
                   write_idx_dataset)
from .dynamics import (Adam, ClippedObjective, DivergenceError, Dynamics,
                       OptimizerState, Sgd, Sgdm, Tangent, adam_dynamics,
                       clipped_dynamics, sgd_dynamics, sgdm_dynamics)
from .oracle import (Trajectory, g_prime_k, hypergrad_fd,
                     hypergrad_forward_full, hypergrad_reverse, lrs_opt,
                     run_trajectory, s_k_mu_direct)
from .problems import (Beale, Mlp, MlpSpec, Objective, Quadratic,
                       SmoothedBukin, beale_objective,
                       bukin_smoothed_objective, fd_grad_oracle,
                       fd_hvp_oracle, mlp_objective, quadratic_objective)
from .schedulers import (SchedulerState, ValGradSource, constant_schedule,
                         exponential_schedule, hd_delta, hyper_update,
                         init_scheduler, marthe_delta, marthe_step,
                         marthe_tangent_update, rtho_delta_direct)
