import numpy as np
import pytest
import torch
from torch import nn

from uvrepose.donor import DropoutDecision
from uvrepose.errors import InputError, NumericError
from uvrepose.flow import (
    CondBatch,
    FlowBatch,
    LinearVelocityNet,
    VelocityNet,
    apply_dropout,
    count_parameters,
    fm_loss,
    grad_check,
    grad_norm,
    integrate,
    interpolate,
    make_flow_batch,
    make_optimizer,
    train_step,
)


def cond_batch(gen, b=2, r=16, present=None):
    present = torch.ones(b, 3, dtype=torch.bool) if present is None else present
    return CondBatch(
        torch.rand(b, 3, r, r, generator=gen),
        torch.rand(b, 3, r, r, generator=gen),
        torch.rand(b, 3, r, r, generator=gen),
        present,
    )


class Stub(nn.Module):
    """Velocity field returning fn(x, t)."""

    def __init__(self, fn):
        super().__init__()
        self.fn = fn
        self.w = nn.Parameter(torch.zeros(()))

    def forward(self, x, t, cond=None):
        return self.fn(x, t) + 0 * self.w


def test_interpolate_examples():
    x0, x1 = torch.zeros(2, 3), torch.ones(2, 3)
    assert torch.equal(interpolate(x0, x1, 0.0), x0)
    assert torch.equal(interpolate(x0, x1, 1.0), x1)
    assert torch.allclose(interpolate(x0, x1, torch.tensor([0.25, 0.5])), torch.tensor([[0.25] * 3, [0.5] * 3]))
    with pytest.raises(InputError):
        interpolate(x0, torch.ones(3, 3), 0.5)
    with pytest.raises(InputError):
        interpolate(x0, x1, 1.5)


def test_loss_vanishes_for_the_true_velocity_and_equals_the_second_moment_for_zero():
    gen = torch.Generator().manual_seed(0)
    batch = make_flow_batch(torch.randn(8, 2, generator=gen), gen)
    perfect = Stub(lambda x, t: batch.target)
    assert float(fm_loss(perfect, batch).detach()) == 0.0
    zero = Stub(lambda x, t: torch.zeros_like(x))
    assert float(fm_loss(zero, batch).detach()) == pytest.approx(float((batch.target**2).mean()))


def test_loss_is_permutation_invariant():
    gen = torch.Generator().manual_seed(1)
    net = LinearVelocityNet(seed=0)
    batch = make_flow_batch(torch.rand(4, 3, 8, 8, generator=gen), gen)
    cond = cond_batch(gen, 4, 8)
    perm = torch.tensor([2, 0, 3, 1])
    a = float(fm_loss(net, batch, cond).detach())
    b = float(fm_loss(net, batch.index(perm), cond.index(perm)).detach())
    assert a == pytest.approx(b, rel=1e-6)


def test_network_shapes_and_size():
    net = VelocityNet(width=16, resolution=64)
    assert count_parameters(net) <= 2_000_000
    gen = torch.Generator().manual_seed(2)
    x = torch.rand(2, 3, 64, 64, generator=gen)
    out = net(x, torch.rand(2, generator=gen), cond_batch(gen, 2, 64))
    assert out.shape == x.shape
    with pytest.raises(InputError):
        VelocityNet(resolution=60)


def test_initialization_is_seeded():
    a, b = VelocityNet(width=8, resolution=16, seed=3), VelocityNet(width=8, resolution=16, seed=3)
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))
    c = VelocityNet(width=8, resolution=16, seed=4)
    assert not all(torch.equal(p, q) for p, q in zip(a.parameters(), c.parameters()))


def test_absent_conditions_are_ignored():
    gen = torch.Generator().manual_seed(5)
    net = VelocityNet(width=8, resolution=16)
    present = torch.tensor([[True, False, True], [False, True, False]])
    c1 = cond_batch(gen, 2, 16, present)
    c2 = CondBatch(c1.texture.clone(), c1.pose.clone(), c1.face.clone(), present)
    c2.pose[0] += 1.0
    c2.texture[1] -= 1.0
    c2.face[1] *= 3.0
    x, t = torch.rand(2, 3, 16, 16, generator=gen), torch.rand(2, generator=gen)
    assert torch.equal(net(x, t, c1), net(x, t, c2))
    c2.texture[0] += 1.0
    assert not torch.equal(net(x, t, c1)[0], net(x, t, c2)[0])


def test_drop_all_makes_conditions_irrelevant():
    gen = torch.Generator().manual_seed(6)
    net = VelocityNet(width=8, resolution=16)
    batch = make_flow_batch(torch.rand(2, 3, 16, 16, generator=gen), gen)
    a = apply_dropout(cond_batch(gen), DropoutDecision.DROP_ALL)
    b = apply_dropout(cond_batch(gen), DropoutDecision.DROP_ALL)
    assert not a.present.any()
    assert torch.equal(fm_loss(net, batch, a), fm_loss(net, batch, b))
    with pytest.raises(InputError):
        apply_dropout(cond_batch(gen), [DropoutDecision.KEEP_ALL])


def test_dropout_clears_only_the_named_condition():
    gen = torch.Generator().manual_seed(7)
    c = apply_dropout(cond_batch(gen), [DropoutDecision.DROP_POSE, DropoutDecision.DROP_FACE])
    assert c.present.tolist() == [[True, False, True], [True, True, False]]
    assert not c.pose[0].any() and not c.face[1].any() and c.texture.all()


def test_zero_learning_rate_leaves_parameters_unchanged():
    gen = torch.Generator().manual_seed(8)
    net = VelocityNet(width=8, resolution=16)
    before = [p.clone() for p in net.parameters()]
    opt = make_optimizer(net.parameters(), lr=0.0)
    train_step(net, opt, make_flow_batch(torch.rand(2, 3, 16, 16, generator=gen), gen), cond_batch(gen))
    assert all(torch.equal(a, b) for a, b in zip(before, net.parameters()))


def test_fixed_batch_can_be_overfit():
    gen = torch.Generator().manual_seed(9)
    net = VelocityNet(width=16, resolution=16)
    batch = make_flow_batch(torch.rand(8, 3, 16, 16, generator=gen) * 2 - 1, gen)
    cond = cond_batch(gen, 8, 16)
    opt = make_optimizer(net.parameters(), lr=3e-3)
    first = train_step(net, opt, batch, cond)
    for _ in range(199):
        last = train_step(net, opt, batch, cond)
    assert last < 0.1 * first


def test_non_finite_gradients_abort_the_step():
    net = Stub(lambda x, t: x)
    opt = make_optimizer(net.parameters())
    batch = make_flow_batch(torch.full((2, 2), float("nan")))
    with pytest.raises(NumericError):
        train_step(net, opt, batch)


def test_constant_field_integrates_exactly():
    gen = torch.Generator().manual_seed(10)
    x1 = torch.randn(4, 2, generator=gen, dtype=torch.float64)
    target = torch.randn(4, 2, generator=gen, dtype=torch.float64)
    v = x1 - target
    for steps in (1, 2, 7, 50):
        for scheme in ("euler", "heun"):
            out = integrate(Stub(lambda x, t: v), x1, steps=steps, scheme=scheme)
            torch.testing.assert_close(out, target, atol=1e-12, rtol=0)


def test_step_doubling_converges_at_the_scheme_order():
    # dx/dt = x sin(t): smooth, with a closed-form solution
    field = Stub(lambda x, t: x * torch.sin(t)[:, None])
    x1 = torch.ones(1, 1, dtype=torch.float64)
    exact = float(np.exp(np.cos(1.0) - 1.0))
    ref = float(integrate(field, x1, steps=1024, scheme="heun"))
    assert ref == pytest.approx(exact, abs=1e-6)
    for scheme, order in (("euler", 1), ("heun", 2)):
        e1 = abs(float(integrate(field, x1, steps=16, scheme=scheme)) - ref)
        e2 = abs(float(integrate(field, x1, steps=32, scheme=scheme)) - ref)
        assert e2 / e1 == pytest.approx(0.5**order, rel=0.15)


def test_integrate_validates_arguments():
    with pytest.raises(InputError):
        integrate(Stub(lambda x, t: x), torch.zeros(1, 2), steps=0)
    with pytest.raises(InputError):
        integrate(Stub(lambda x, t: x), torch.zeros(1, 2), scheme="rk4")


def test_grad_check_on_a_linear_network():
    gen = torch.Generator().manual_seed(11)
    net = LinearVelocityNet(seed=1)
    batch = make_flow_batch(torch.rand(2, 3, 8, 8, generator=gen), gen)
    assert grad_check(net, batch, cond_batch(gen, 2, 8)) < 1e-8


def test_zero_loss_configuration_is_stationary():
    net = LinearVelocityNet(seed=2)
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
    x = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    batch = FlowBatch(x, x, torch.rand(2, dtype=torch.float64), x)
    cond = cond_batch(torch.Generator().manual_seed(0), 2, 8).to(torch.float64)
    assert grad_norm(net.double(), batch, cond) < 1e-10


class _BrokenSquare(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x * x

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved_tensors
        return g * 2.2 * x  # wrong by 10%


class _BrokenNet(LinearVelocityNet):
    def forward(self, x, t, cond):
        return _BrokenSquare.apply(super().forward(x, t, cond))


def test_grad_check_catches_a_wrong_backward():
    gen = torch.Generator().manual_seed(12)
    batch = make_flow_batch(torch.rand(2, 3, 8, 8, generator=gen), gen)
    assert grad_check(_BrokenNet(seed=3), batch, cond_batch(gen, 2, 8)) > 1e-2
