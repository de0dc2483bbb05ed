import warnings

import numpy as np
import pytest

from fleetbo.domain import Dataset, ExperimentRecord, ParameterBounds, ParameterPoint, RepetitionMode
from fleetbo.noise import FeatureMatrix, RunFeature


def make_record(
    device_id=0,
    flow=3000.0,
    lh=0.4,
    mode=RepetitionMode.SIMULTANEOUS,
    replicate=0,
    measured=6.2,
    expected=6.2,
    iteration=0,
):
    return ExperimentRecord(
        device_id=device_id,
        point=ParameterPoint(flow, lh),
        repetition_mode=mode,
        replicate_index=replicate,
        measured_weight=measured,
        expected_weight=expected,
        iteration=iteration,
    )


def make_dataset(groups, fleet_size=3, bounds=None):
    """groups: list of (device_id, flow, lh, mode, [weights])."""
    records = []
    for device_id, flow, lh, mode, weights in groups:
        mode = RepetitionMode(mode)
        for i, w in enumerate(weights):
            records.append(
                make_record(device_id=device_id, flow=flow, lh=lh, mode=mode, replicate=i, measured=w)
            )
    return Dataset(records=records, fleet_size=fleet_size, bounds=bounds or ParameterBounds())


def make_features(rows):
    """rows: list of (device_id, mu, sigma) with var derived."""
    return FeatureMatrix(
        rows=tuple(
            RunFeature(
                device_id=d,
                point=ParameterPoint(3000.0, 0.4),
                repetition_mode=RepetitionMode.SIMULTANEOUS,
                mu=mu,
                sigma=sigma,
                var=sigma**2,
                count=3,
            )
            for d, mu, sigma in rows
        )
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _quiet_known_warnings():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="skipped .* group")
        warnings.filterwarnings("ignore", message="weak cluster structure")
        yield


ACCEPTANCE_RESULTS: list[str] = []


def record_acceptance(line: str):
    ACCEPTANCE_RESULTS.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_RESULTS:
        terminalreporter.write_sep("-", "acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)
