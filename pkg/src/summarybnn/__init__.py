"""Variational Bayesian MLP classifiers with a summary-statistic likelihood.

Training maximizes an evidence lower bound whose likelihood is augmented with
a Dirichlet-process term for the histogram of predicted class-probability
scores, letting prior knowledge about task difficulty or class imbalance shape
the predictive distribution.
"""

from .estimator import VariationalMLPClassifier

__version__ = "0.1.0"

__all__ = ["VariationalMLPClassifier", "__version__"]
