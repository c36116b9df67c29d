"""Error metrics used to score Monte-Carlo estimation runs."""

from __future__ import annotations

import numpy as np

from .exceptions import GridfuseError


def estimation_error(est: float, truth: float) -> float:
    """Signed estimation error in percent, (est - truth) / truth * 100."""
    if truth == 0:
        raise GridfuseError("undefined relative error")
    return (est - truth) / truth * 100.0


def absolute_error(est: float, truth: float) -> float:
    """Magnitude of the estimation error in percent."""
    return abs(estimation_error(est, truth))


def nrmse(estimates, truth) -> float:
    """Root-mean-square error over runs and components, normalized.

    ``estimates`` is (N_s, N_c) with one row per Monte-Carlo run; ``truth``
    has one entry per component. Normalization is by the grand mean
    estimate.
    """
    est = np.atleast_2d(np.asarray(estimates, dtype=float))
    tr = np.asarray(truth, dtype=float).reshape(1, -1)
    if est.size == 0:
        raise GridfuseError("empty estimate matrix")
    if est.shape[1] != tr.shape[1]:
        raise GridfuseError("component count mismatch between estimates and truth")
    rmse = np.sqrt(np.mean((est - tr) ** 2))
    avg = np.mean(est)
    if avg == 0:
        raise GridfuseError("zero mean estimate")
    return float(rmse / abs(avg))


def variance_avg(estimates) -> float:
    """Population variance per component around its own mean, averaged.

    Divisor is N_s (population form), then the per-component variances are
    averaged over the component axis.
    """
    est = np.atleast_2d(np.asarray(estimates, dtype=float))
    if est.size == 0:
        raise GridfuseError("empty estimate matrix")
    per_component = np.mean((est - est.mean(axis=0, keepdims=True)) ** 2, axis=0)
    return float(np.mean(per_component))
