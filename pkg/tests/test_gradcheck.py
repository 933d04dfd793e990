import torch
from torch import nn

from vidbird.gradcheck import (
    calibrate_batchnorm,
    directional_gradcheck,
    parameter_gradcheck,
)


class _WrongSquare(torch.autograd.Function):
    """x**2 with a backward that is off by a factor of 1.01."""

    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x * x

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        return grad * 2.02 * x


class _Net(nn.Module):
    def __init__(self, wrong=False):
        super().__init__()
        self.lin = nn.Linear(4, 3).double()
        self.wrong = wrong

    def forward(self, x):
        h = self.lin(x)
        return (_WrongSquare.apply(h) if self.wrong else h * h).sum()


def _check(fn, wrong):
    torch.manual_seed(0)
    net = _Net(wrong)
    x = torch.randn(5, 4, dtype=torch.float64)
    return fn(net, lambda: net(x))[0]


def test_both_checks_pass_a_correct_gradient():
    assert _check(parameter_gradcheck, wrong=False) < 1e-6
    assert _check(directional_gradcheck, wrong=False) < 1e-6


def test_both_checks_catch_a_one_percent_gradient_error():
    assert _check(parameter_gradcheck, wrong=True) > 5e-3
    assert _check(directional_gradcheck, wrong=True) > 5e-3


def test_calibrate_batchnorm_sets_input_statistics():
    bn = nn.BatchNorm2d(3).double()
    x = torch.randn(4, 3, 5, 5, dtype=torch.float64) * 3 + 1
    calibrate_batchnorm(bn, x)
    assert not bn.training and bn.momentum == 0.1
    torch.testing.assert_close(bn.running_mean, x.mean(dim=(0, 2, 3)))
    torch.testing.assert_close(bn.running_var, x.var(dim=(0, 2, 3), unbiased=True))
