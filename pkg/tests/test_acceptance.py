"""End-to-end acceptance criteria at their stated tolerances (about 15 minutes)."""
import pytest

from nsamp.acceptance import CHECKS, run_checks


@pytest.mark.slow
@pytest.mark.parametrize("name", list(CHECKS))
def test_criterion(name, acceptance_lines, capsys):
    (res,) = run_checks([name])
    line = f"{res.line()} ({res.seconds:.1f}s)"
    acceptance_lines.append(line)
    with capsys.disabled():
        print(f"\n{line}")
    assert res.passed, f"{res.name}: measured {res.measured:.6g} vs tolerance {res.tolerance:.4g}; {res.detail}"
