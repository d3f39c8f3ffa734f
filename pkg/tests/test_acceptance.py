"""The ten acceptance criteria at their stated tolerances; one line per criterion."""
import pytest

from idyn.acceptance import CRITERIA

RESULTS = []


@pytest.mark.slow
@pytest.mark.parametrize("number", sorted(CRITERIA), ids=lambda k: f"criterion_{k:02d}")
def test_criterion(number):
    res = CRITERIA[number]()
    line = res.line()
    RESULTS.append(line)
    print(line)
    assert res.passed, line
