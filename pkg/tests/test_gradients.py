import pytest
import torch

from transflow.decoder import correlate

import gradsuite


@pytest.mark.parametrize("component", list(gradsuite.CHECKS))
def test_finite_difference(component):
    assert gradsuite.CHECKS[component]() < 1e-4


def test_window_correlation_backward():
    g = torch.Generator().manual_seed(0)
    fs = torch.randn(2, 3, 4, 5, generator=g, dtype=torch.float64, requires_grad=True)
    ft = torch.randn(2, 3, 4, 5, generator=g, dtype=torch.float64, requires_grad=True)

    def finite(a, b):
        s = correlate(a, b, 2)
        return s.masked_fill(torch.isinf(s), 0.0)

    assert torch.autograd.gradcheck(finite, (fs, ft), eps=1e-6, atol=1e-8, rtol=1e-6)


def test_rel_err_floor():
    assert gradsuite.rel_err(1e-15, 1e-8, floor=1e-5) == 0.0
    assert gradsuite.rel_err(1.0, 1.1) == pytest.approx(0.1 / 1.1)
