"""The ten acceptance criteria at their stated tolerances, one PASS/FAIL line each."""
import pytest

from fluxtheo import acceptance

SLOW = {7, 8, 9}


PARAMS = [pytest.param(n, marks=[pytest.mark.slow] if n in SLOW else [], id=f"criterion_{n:02d}")
          for n in sorted(acceptance.CRITERIA)]


@pytest.mark.parametrize("number", PARAMS)
def test_criterion(number, capsys):
    r = acceptance.CRITERIA[number](seed=0)
    with capsys.disabled():
        print("\n" + r.line())
    assert r.passed, r.line()
