import pytest

import mrmp.autodiff as ad
from mrmp.gradcheck import check_gradients, run_all, suite_names


@pytest.mark.parametrize("seed", [0, 7])
def test_all_suites_pass(seed):
    results = run_all(seed=seed)
    assert [r.name for r in results] == suite_names()
    assert all(r.passed for r in results), [r for r in results if not r.passed]


@pytest.mark.parametrize("name", suite_names())
def test_injected_fault_is_caught(name):
    results = run_all(seed=0, inject=name, only=[name])
    assert len(results) == 1 and not results[0].passed


def test_wrong_gradient_detected(rng):
    def wrong_square(ts):
        (x,) = ts
        out = ad.square(x)
        out._backward = lambda g: (g * x.data,)  # missing factor 2
        return out

    x = rng.uniform(0.5, 1.5, 4)
    assert check_gradients("square", lambda ts: ad.square(ts[0]), [x], seed=0).passed
    assert not check_gradients("bad_square", wrong_square, [x], seed=0).passed
