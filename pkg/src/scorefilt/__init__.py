"""Score-driven filtering with implicit updates, certificates, and bounds.

Modules
-------
matcore    symmetric-matrix kernels (Jacobi eigensolver, weighted norms)
models     observation-model catalog (scores, curvature ranges, Fisher info)
filter     implicit / explicit score-driven filter recursions
stability  contraction certificates and invertibility diagnostics
bounds     finite-sample and asymptotic MSE bounds, tuning optimizers
estimate   maximum-likelihood estimation of filter parameters
simlab     simulation studies, reference Kalman filter, competitors
cli        command-line entry points
"""

__version__ = "0.1.0"
