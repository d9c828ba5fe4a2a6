import numpy as np
import pytest

from fedsrcvar.verify import PROPERTIES, VerifyHooks, max_relative_deviation, run_properties


def test_registry():
    assert len(PROPERTIES) == 10
    assert list(PROPERTIES)[0] == "smooth_sandwich"


def test_all_properties_hold():
    seen = []
    results = run_properties(seed=0, on_result=seen.append)
    assert [r.name for r in results] == list(PROPERTIES)
    assert seen == results
    for result in results:
        assert result.passed, result
        assert result.samples > 0


def test_inflated_smoothing_is_caught():
    results = run_properties(VerifyHooks(gamma_scale=4.0), names=["smooth_sandwich"])
    assert len(results) == 1
    assert not results[0].passed
    assert results[0].worst_margin < 0.0


def test_selected_properties_are_seeded():
    first = run_properties(names=["dual_cvar", "bpf_identity"], seed=3)
    second = run_properties(names=["dual_cvar", "bpf_identity"], seed=3)
    assert [r.worst_margin for r in first] == [r.worst_margin for r in second]


def test_max_relative_deviation():
    a = np.array([[1.0, 0.0], [0.0, 2.0]])
    assert max_relative_deviation(a, a) == 0.0
    assert max_relative_deviation(a * 1.01, a) == pytest.approx(0.01)