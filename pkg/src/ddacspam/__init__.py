"""Feature-distributed fitting for high-dimensional sparse additive models.

Columns are split across workers, each worker expands its features in a
B-spline basis, and a shared whitening operator built from the aggregated
Gram matrix removes cross-worker correlation before every worker runs a
standardized group lasso.  The selected union is refined by ridge on the
central machine, and a debiased chi-squared statistic tests individual
component functions.
"""

from .core import Dataset, GroundTruth, PartitionPlan, ScenarioSpec, load_dataset, partition_features
from .errors import DataError, DdacError, FitError, ProtocolError
from .metrics import confusion, mse_h, run_study, testing_study
from .runtime import run_ddac_spam, run_inference
from .spline import compute_dn
from .synthgen import gen_example, gen_fig3, generate, parse_scenario, snr

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "GroundTruth",
    "PartitionPlan",
    "ScenarioSpec",
    "load_dataset",
    "partition_features",
    "DdacError",
    "DataError",
    "FitError",
    "ProtocolError",
    "confusion",
    "mse_h",
    "run_study",
    "testing_study",
    "run_ddac_spam",
    "run_inference",
    "compute_dn",
    "gen_example",
    "gen_fig3",
    "generate",
    "parse_scenario",
    "snr",
    "__version__",
]
