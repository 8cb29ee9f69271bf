"""Every acceptance criterion at its stated tolerance.

Each test prints its pass/fail line; the lines are also collected and
repeated in the terminal summary.  The training criteria are marked
``slow`` but are part of the default run.
"""

import pytest

from nnapost import acceptance as acc

from conftest import ACCEPTANCE_LINES


def _check(crit):
    res = crit()
    line = res.line()
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert res.passed, line


@pytest.mark.parametrize("crit", acc.INVARIANTS, ids=lambda c: c.__name__)
def test_invariant(crit):
    _check(crit)


@pytest.mark.parametrize("crit", acc.FAST, ids=lambda c: c.__name__)
def test_fast_criterion(crit):
    _check(crit)


@pytest.mark.slow
@pytest.mark.parametrize("crit", acc.TRAINING, ids=lambda c: c.__name__)
def test_training_criterion(crit):
    _check(crit)


def test_injected_quadrature_fault_is_caught():
    res = acc.criterion_5(rules={"tri standard": acc._corrupted(acc.tri_rule("standard"))})
    ACCEPTANCE_LINES.append("(fault injection) " + res.line())
    assert not res.passed
