"""Finite-difference gradient verification machinery."""

import numpy as np
import pytest

from anatomy_attn.gradcheck import grad_check
from anatomy_attn.tensor import Tensor


class TestGradCheck:
    def test_passes_on_correct_gradient(self, rng):
        x = Tensor(rng.normal(size=(3, 3)))
        report = grad_check(lambda t: (t * t).sum(), [x])
        assert report.passed
        assert report.max_rel_err < 1e-6

    def test_catches_wrong_gradient(self):
        def bad(x):
            # forward x^2 but backward claims d/dx = x (missing factor 2)
            return Tensor._from_op(x.data ** 2, (x,),
                                   lambda g: [(x, g * x.data)],
                                   "bad").sum()

        report = grad_check(bad, [Tensor(np.linspace(1.0, 2.0, 4))])
        assert not report.passed

    def test_catches_sign_flip(self):
        def flipped(x):
            return Tensor._from_op(x.data ** 2, (x,),
                                   lambda g: [(x, -2.0 * g * x.data)],
                                   "flipped").sum()

        report = grad_check(flipped, [Tensor(np.linspace(0.5, 1.5, 4))])
        assert not report.passed
        assert report.max_rel_err > 1.0

    def test_skips_relu_kink_without_failing(self):
        # a coordinate exactly at the ReLU corner: any subgradient is valid,
        # the central difference is not
        x = Tensor(np.array([0.0, 1.0, -1.0]))
        report = grad_check(lambda t: t.relu().sum(), [x])
        assert report.passed
        assert report.skipped_kinks == 1

    def test_unattainable_tolerance_fails(self, rng):
        x = Tensor(rng.normal(size=4))
        report = grad_check(lambda t: (t.sigmoid() * t).sum(), [x],
                            tol=1e-12)
        assert not report.passed  # FD noise floor is far above 1e-12

    def test_multiple_inputs_reported_separately(self, rng):
        a = Tensor(rng.normal(size=3))
        b = Tensor(rng.normal(size=2))
        report = grad_check(lambda x, y: x.sum() * y.sum(), [a, b])
        assert len(report.per_input) == 2
        assert report.passed

    def test_coordinate_subsampling_is_deterministic(self, rng):
        x = Tensor(rng.normal(size=(8, 8)))
        r1 = grad_check(lambda t: (t ** 2).sum(), [x], max_coords=5,
                        rng=np.random.default_rng(3))
        r2 = grad_check(lambda t: (t ** 2).sum(), [x], max_coords=5,
                        rng=np.random.default_rng(3))
        assert r1.max_rel_err == r2.max_rel_err

    def test_eps_bounds_enforced(self):
        x = Tensor(np.ones(2))
        with pytest.raises(ValueError):
            grad_check(lambda t: t.sum(), [x], eps=1e-2)
        with pytest.raises(ValueError):
            grad_check(lambda t: t.sum(), [x], eps=1e-9)

    def test_non_scalar_target_rejected(self):
        with pytest.raises(ValueError):
            grad_check(lambda t: t * 2.0, [Tensor(np.ones(3))])

    def test_zero_gradient_input_passes(self):
        a = Tensor(np.ones(2))
        b = Tensor(np.ones(2))
        # `a` does not influence the output at all
        report = grad_check(lambda x, y: (y * y).sum(), [a, b])
        assert report.passed


class TestSuite:
    def test_ops_suite_passes(self):
        from anatomy_attn.suite import run_gradcheck_suite
        reports = run_gradcheck_suite(include_models=False)
        failed = [r.name for r in reports if not r.passed]
        assert failed == []

    def test_injected_fault_is_detected(self):
        from anatomy_attn.suite import run_gradcheck_suite
        reports = run_gradcheck_suite(include_models=False,
                                      inject_fault=True)
        by_name = {r.name: r for r in reports}
        assert not by_name["injected_sign_flip"].passed
