import pytest

from modules.invariant_check import CHECKS, CheckResult, run_invariant_suite


@pytest.mark.parametrize('name, check', CHECKS, ids=[name for name, _ in CHECKS])
def test_invariant_holds(name, check):
    passed, detail = check()
    assert passed, f"{name}: {detail}"


def test_suite_reports_failures_instead_of_raising():
    def broken():
        raise RuntimeError('no solver')

    results = run_invariant_suite((('ok', lambda: (True, 'fine')), ('broken', broken)))
    assert [r.passed for r in results] == [True, False]
    assert all(isinstance(r, CheckResult) and r.seconds >= 0 for r in results)
    assert 'RuntimeError' in results[1].detail
