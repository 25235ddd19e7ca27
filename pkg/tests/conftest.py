import numpy as np
import pytest

from entrogame import (
    DensityVector,
    FeedbackGain,
    FeedbackProfile,
    GameConfig,
    MultiChannelSystem,
    Partition,
    StrategySpace,
)


def scalar_system(a=0.0, b=1.0):
    return MultiChannelSystem(A=np.array([[a]]), B=(np.array([[b]]),))


def scalar_profile(gain):
    return FeedbackProfile((FeedbackGain(1, np.array([[gain]])),))


def two_channel_system(a=0.0):
    return MultiChannelSystem(
        A=np.array([[a]]), B=(np.array([[1.0]]), np.array([[1.0]]))
    )


def two_channel_profile(g1, g2):
    return FeedbackProfile(
        (FeedbackGain(1, np.array([[g1]])), FeedbackGain(2, np.array([[g2]])))
    )


def line_partition(cells, lo=-1.0, hi=1.0):
    return Partition(np.array([lo]), np.array([hi]), np.array([cells]))


def tilted_density(partition, alpha=0.3):
    """Linear tilt along the first axis, unit mass by construction."""
    centers = partition.centers()[:, 0]
    lo, hi = partition.lower[0], partition.upper[0]
    mid = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    base = 1.0 / partition.domain_volume
    vals = base * (1.0 + alpha * (centers - mid) / half)
    return DensityVector(partition, vals)


def sum_zero_space():
    """Two channels on a scalar state, gains add up in the closed loop.

    Channel 1 reaching for -0.5 against channel 2's 0.5 is the only pairing
    whose closed-loop sum is not positive-expanding or strictly worse, so
    best-response dynamics land on indices (0, 0) from any start.
    """
    ch1 = (np.array([[-0.5]]), np.array([[0.25]]), np.array([[0.5]]))
    ch2 = (np.array([[0.5]]), np.array([[-0.2]]), np.array([[0.1]]))
    return StrategySpace((ch1, ch2))


def sum_zero_config(cells=64, time_grid=(0.5, 1.0), **kwargs):
    part = line_partition(cells)
    return GameConfig(
        time_grid=time_grid,
        theta_ref=DensityVector.uniform(part),
        samples_per_cell=8,
        **kwargs,
    )


@pytest.fixture
def part64():
    return line_partition(64)


@pytest.fixture
def part16():
    return line_partition(16)
