"""Entropy functionals on grid densities.  All logarithms are natural.

On a partition with cell volume ``v`` the differential entropy of a
cellwise-constant density is ``-sum_i theta_i ln(theta_i) v`` with the
``0 ln 0 = 0`` convention; the relative entropy of ``xi`` against ``theta``
is ``sum_i xi_i ln(xi_i / theta_i) v`` and requires the support of ``xi``
to sit inside the support of ``theta`` cellwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, SupportError
from .transfer import DensityVector, ObservableVector

__all__ = [
    "EntropyReport",
    "entropy",
    "relative_entropy",
    "gibbs_gap",
    "expectation",
]


@dataclass(frozen=True)
class EntropyReport:
    value: float
    support_cells: int


def _xlogx_sum(values, vol):
    mask = values > 0
    vals = values[mask]
    return float(np.sum(vals * np.log(vals)) * vol), int(mask.sum())


def entropy(theta):
    """Differential entropy of a density, in nats, with its support size."""
    theta.require_unit_mass()
    s, support = _xlogx_sum(theta.values, theta.partition.cell_volume)
    return EntropyReport(value=-s, support_cells=support)


def _check_support(num_values, ref_values, what):
    bad = (num_values > 0) & (ref_values == 0)
    if np.any(bad):
        cell = int(np.argmax(bad))
        raise SupportError(
            f"{what}: cell {cell} carries mass where the reference density is zero",
            cell=cell,
        )


def relative_entropy(xi, theta):
    """Relative entropy (Kullback-Leibler divergence) of ``xi`` against ``theta``.

    Nonnegative for densities, zero exactly when the two densities agree.
    Raises ``SupportError`` naming the first offending cell if ``xi`` has
    mass outside the support of ``theta``.
    """
    if not xi.partition.matches(theta.partition):
        raise ConfigurationError("densities live on different partitions")
    xi.require_unit_mass()
    theta.require_unit_mass()
    _check_support(xi.values, theta.values, "relative_entropy")
    mask = xi.values > 0
    num = xi.values[mask]
    ref = theta.values[mask]
    return float(np.sum(num * np.log(num / ref)) * xi.partition.cell_volume)


def gibbs_gap(theta, xi):
    """Cross entropy of ``theta`` against ``xi`` minus the entropy of ``theta``.

    Equals the relative entropy of ``theta`` against ``xi``; kept as a
    separate computation of ``(-sum theta ln xi) - (-sum theta ln theta)``
    because the two terms are reported in entropy balance checks.
    """
    if not theta.partition.matches(xi.partition):
        raise ConfigurationError("densities live on different partitions")
    theta.require_unit_mass()
    xi.require_unit_mass()
    _check_support(theta.values, xi.values, "gibbs_gap")
    vol = theta.partition.cell_volume
    mask = theta.values > 0
    cross = -float(np.sum(theta.values[mask] * np.log(xi.values[mask])) * vol)
    own, _ = _xlogx_sum(theta.values, vol)
    return cross + own


def expectation(observable, theta):
    """Volume-weighted expectation of an observable under a density."""
    if not isinstance(observable, ObservableVector):
        observable = ObservableVector(np.asarray(observable, dtype=float))
    theta.require_unit_mass()
    if observable.values.shape != theta.values.shape:
        raise ConfigurationError(
            f"observable length {observable.values.shape[0]} does not match "
            f"{theta.values.shape[0]} cells"
        )
    return float(observable.values @ theta.values * theta.partition.cell_volume)
