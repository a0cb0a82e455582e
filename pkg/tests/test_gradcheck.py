import numpy as np
import pytest

from app.core import functional
from app.core.errors import GradcheckError
from app.core.gradcheck import (
    REL_FLOOR,
    SUITES,
    GradCase,
    check_case,
    relative_error,
    run_gradcheck,
)
from app.core.functional import activation


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("module", list(SUITES))
def test_every_suite_passes(module, seed):
    results = run_gradcheck(module, seed)
    assert results
    assert all(r.passed for r in results), [(r.op, r.max_rel_err) for r in results if not r.passed]


def test_relative_error_has_a_floor():
    assert relative_error(0.0, 1e-6) == pytest.approx(1e-6 / REL_FLOOR)
    assert relative_error(2.0, 1.0) == 0.5


def test_sampled_entries(rng):
    case = GradCase("tanh", lambda v: activation("tanh", v["x"]), {"x": rng.normal(size=(2, 3, 4, 4))}, max_entries=5)
    result = check_case(case, "tensor")
    assert result.passed and result.op == "tanh" and result.module == "tensor"


def test_frozen_inputs_are_not_checked(rng):
    case = GradCase("mul", lambda v: v["a"] * v["b"], {"a": rng.normal(size=(1, 1, 2, 2)), "b": rng.normal(size=(1, 1, 2, 2))},
                    frozen=("b",))
    result = check_case(case, "tensor")
    assert result.passed and result.worst_input in ("", "a")


def test_perturbed_backward_is_caught(monkeypatch):
    original = functional.Tanh.backward

    def wrong(self, grad):
        (g,) = original(self, grad)
        return (g * 1.01,)

    monkeypatch.setattr(functional.Tanh, "backward", wrong)
    with pytest.raises(GradcheckError, match="tanh") as info:
        run_gradcheck("tensor", 0)
    assert {r.op for r in info.value.violations} == {"tanh", "conv_bn_act"}


def test_unknown_module():
    with pytest.raises(ValueError):
        run_gradcheck("optim")
