from drobust import inner
from drobust.verify import CHECKS, format_table, injected_fault, run_checks


def test_clean_suite_passes():
    results = run_checks()
    assert len(results) >= 12
    failed = [r.name for r in results if not r.ok]
    assert not failed, failed
    table = format_table(results)
    assert all(r.name in table for r in results)


def test_fault_is_detected_and_restored():
    with injected_fault(1e-2):
        results = run_checks(["grid_oracle_cvar", "primal_dual_gap", "duality_sandwich"])
    assert sum(not r.ok for r in results) >= 2
    assert inner._FAULT_SHIFT == 0.0


def test_named_subset():
    names = list(CHECKS)[:2]
    assert [r.name for r in run_checks(names)] == names
