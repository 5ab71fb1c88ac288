"""Riemannian flow matching for disordered crystals."""

from .crystal import (DisorderedCrystal, LatticeParams, Site, from_ordered,
                      make_crystal, make_lattice, make_site, pad_to_order,
                      sample_realization, validate)
from .data_io import (Dataset, default_toy_template, make_toy_dataset,
                      parse_cif, read_jsonl, split, write_jsonl)
from .discretize import (DiscretizeConfig, MultiHotAssignment, discretize_crystal,
                         ensemble_vote, heuristics, stage1_ordered)
from .geometry import (FlowState, LengthPrior, fisher_rao_distance,
                       sample_priors, simplex_interpolate, simplex_to_sphere,
                       sphere_exp, sphere_log, sphere_to_simplex, torus_exp,
                       torus_log, wrap)
from .metrics import (EvalReport, MatchTolerances, compositional_validity,
                      coverage, density, fingerprint, match_rate, n_el,
                      structural_validity, structure_match, wasserstein_1d)
from .sampler import (Condition, EmpiricalSizeSampler, SamplerConfig, sample,
                      sample_batch, sample_csp_batch)
from .training import TrainingConfig, TrainingPair, make_training_pair, train
from .velocity_net import (NetConfig, VelocityBundle, VelocityNet,
                           load_checkpoint, save_checkpoint)

__version__ = "0.1.0"
