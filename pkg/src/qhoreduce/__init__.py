"""KAM reduction of a quasi-periodically forced quantum harmonic oscillator
in a truncated Hermite basis, with independent numerical certification."""

from .basis import (BasisTruncation, Cluster, ModeIndex, enumerate_modes, gauss_hermite,
                    hermite_eval, phi_eval)
from .blockmat import (BlockMatrix, DecayNormReport, SequenceVector, apply, auxiliary_series,
                       block_exp, block_mul, commutator, decay_norm, decay_norm_plus,
                       is_normal_form, structure_constants)
from .estimator import FrequencyScreener, KAMReducer
from .exceptions import (BasisMismatchError, ConfigError, DivisorTooSmall, EmptyBasisError,
                         NotHermitianError, QuadratureError, ScheduleError, StripError)
from .floquet import (Trajectory, conjugacy_error, integrate_direct, integrate_periodic,
                      quasi_energies, sobolev_monitor)
from .homology import (DivisorContext, HomologySolution, diagonalize_block, homological_step,
                       homology_estimates, solve_small_divisor)
from .kam import (KamOptions, KamResult, KamState, Schedule, accumulate_transform, check_smallness,
                  domega_derivatives, kam_iterate, make_schedule)
from .melnikov import (MeasureEstimate, ScreenReport, check_H1, measure_estimate, screen_mu,
                       screen_omega)
from .potential import (PotentialSpec, QuasiPeriodicMatrix, assemble_Q, eval_Q, strip_norm,
                        verify_key_decay)

__version__ = "0.1.0"
