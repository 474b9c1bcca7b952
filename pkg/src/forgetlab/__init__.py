"""forgetlab: a from-scratch CNN engine plus a cross-dataset transfer harness
that measures how adaptation strategies trade source-set retention (memory
integrity) against target-set gains (plasticity)."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (CLASS_NAMES, DataError, Dataset, Sample, SplitSpec,
                   load_image_manifest, load_pixel_csv, merge, save_pixel_csv,
                   shuffled_batches, split, take_fraction)
from .gradcheck import GradCheckReport, grad_check
from .harness import (ConfigError, EvalResult, ExperimentConfig, ExperimentResult,
                      MatrixRun, aggregate, config_from_file, evaluate,
                      resolve_dataset, run_matrix)
from .network import (NUM_CLASSES, PARAM_LAYERS, Network, build_baseline,
                      build_network)
from .optim import Adam, SGDMomentum, make_optimizer
from .strategies import (KINDS, DataBundle, ExecResult, FreezeAudit, Hyper,
                         PlanError, StrategyPlan, execute, freeze_audit,
                         load_plan, make_plan, save_plan)
from .synthetic import (DomainParams, default_domain_pair, gen_synthetic_domain,
                        load_params, save_params)

__version__ = "0.1.0"
