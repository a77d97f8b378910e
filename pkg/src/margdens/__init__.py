"""Tractable joint CDF models with exact marginals and conditionals.

Monotone neural univariate CDFs are combined through a tree of
normalized nonnegative mixing matrices into a joint CDF whose
densities, marginals, and conditionals over arbitrary variable subsets
come from a single contraction.  Models are trained by maximum
(marginal) likelihood with hand-written exact gradients, sampled by a
hierarchical categorical descent plus parallel inverse-CDF transforms,
and applied to mutual-information estimation, missing-data inference,
conditional-independence testing, and anomaly scoring.
"""

from .applications import (CiTestResult, NmdmaModel, anomaly_score,
                           anomaly_scores, ci_test, conditional_cdf_values,
                           estimate_mi, init_nmdma, nmdma_log_density,
                           nmdma_log_density_batch, nmdma_loss_and_grad)
from .archive import load_model, save_model
from .data import Dataset, load_csv, write_csv
from .errors import NumericalError, TrainingDiverged
from .ht import (CdfAt, ConditionDensityAt, DensityAt, HtTensor, Marginalize,
                 MdmaModel, QuerySpec, TreeShape, build_tree, evaluate,
                 ht_contract, log_density, log_density_batch)
from .sampling import (ComponentPath, sample, sample_autoregressive,
                       sample_component)
from .training import (Adam, EpochStats, TrainConfig, adaptive_coupling, fit,
                       init_model, loss_and_grad, negative_log_likelihood,
                       pack_params, set_params)
from .univariate import (PhiBank, UnivariateCdfNet, phi_density, phi_forward,
                         phi_inverse)

__version__ = "0.1.0"

__all__ = [
    "Adam", "CdfAt", "CiTestResult", "ComponentPath", "ConditionDensityAt",
    "Dataset", "DensityAt", "EpochStats", "HtTensor", "Marginalize",
    "MdmaModel", "NmdmaModel", "NumericalError", "PhiBank", "QuerySpec",
    "TrainConfig", "TrainingDiverged", "TreeShape", "UnivariateCdfNet",
    "adaptive_coupling", "anomaly_score", "anomaly_scores", "build_tree",
    "ci_test", "conditional_cdf_values", "estimate_mi", "evaluate", "fit",
    "ht_contract", "init_model", "init_nmdma", "load_csv", "load_model",
    "log_density", "log_density_batch", "loss_and_grad",
    "negative_log_likelihood", "nmdma_log_density", "nmdma_log_density_batch",
    "nmdma_loss_and_grad", "pack_params", "phi_density", "phi_forward",
    "phi_inverse", "sample", "sample_autoregressive", "sample_component",
    "save_model", "set_params", "write_csv",
]
