import numpy as np
import pytest

import gradcheck
from seldecode.distill import margin_loss_grad, selection_loss_grad

pytestmark = pytest.mark.criterion(5)


@pytest.mark.parametrize("name", list(gradcheck.CHECKS))
def test_finite_differences(name):
    worst = gradcheck.CHECKS[name]()
    assert worst <= gradcheck.TOL, f"{name}: worst relative error {worst:.2e}"


def test_rel_err_detects_wrong_gradient():
    # the checker itself must reject a deliberately broken gradient
    S = np.array([[0.1, 0.5, 0.3]])
    _, g = selection_loss_grad(S, [0], 0.2)
    num = gradcheck.numeric_grad(lambda: selection_loss_grad(S, [0], 0.2)[0].sum(), S)
    assert gradcheck.rel_err(g, num) < 1e-6
    assert gradcheck.rel_err(1.01 * g, num) > gradcheck.TOL


def test_constant_scores_have_zero_sigma_gradient():
    S = np.full((1, 4), 0.3)
    losses, g = margin_loss_grad(S, [2], 0.2)
    # m_eff = 0 and the gap is 0: hinge sits exactly at its kink, so the subgradient is zero
    assert losses[0] == 0.0 and np.all(g == 0)
