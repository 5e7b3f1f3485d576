import numpy as np
import pytest

from capcurric.data import CaptionPair, SyntheticConfig, generate_synthetic

_CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def record_criterion():
    """Record one acceptance criterion outcome; printed in the terminal summary."""

    def record(number: int, passed: bool, detail: str = "") -> None:
        _CRITERIA[number] = (bool(passed), detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def small_dataset():
    return generate_synthetic(
        SyntheticConfig(n_pairs=60, F=6, V=12, seed=3, n_valid_images=8, n_test_images=8, det_n=5, det_k=3)
    )


def make_pair(pair_id, tokens, features, image_id=None, **kw):
    return CaptionPair(
        pair_id=pair_id,
        image_id=pair_id if image_id is None else image_id,
        features=np.asarray(features, dtype=np.float64),
        tokens=np.asarray(tokens, dtype=np.int64),
        **kw,
    )
