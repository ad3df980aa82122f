"""Two-step hyperparameter search for MLP regressors.

Evaluate many sampled architectures cheaply on a data subset, then retrain
only the best on the full dataset. The package provides the search space,
dataset handling, a from-scratch MLP trainer, a distributed manager/worker
runtime with a resumable ledger, the two-step pipeline itself, analysis
helpers, a command-line interface, and an HTTP service facade.
"""

__version__ = "0.1.0"
