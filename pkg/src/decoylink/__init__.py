"""Estimate the false discovery proportion of a record linkage with synthetic decoys."""

from .core import Dataset, Schema, Variable, block_datasets, load_dataset, load_pair
from .errors import (ConfigError, DecoyLinkError, InputError, NumericalError, ParameterError, SchemaError,
                     SpecError)
from .evaluation import assess_estimator, auc_link, confusion_at, exact_match_baseline, true_fdp
from .fdp import FdpConfig, LinkerConfig, aggregate, augment_b, fdp_curve, run_procedure
from .linker import EmConfig, fit_fs_model, score_pairs, select_links
from .simgen import GroundTruth, SimulationSpec, generate_population
from .synth import SynthConfig, fit_synthesiser, sample_synthetic, synth_quality_auc

__version__ = "0.1.0"
