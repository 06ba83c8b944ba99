import numpy as np
import pytest
import torch

from tryonlab import flow


def test_forward_noise_endpoints():
    rng = np.random.default_rng(0)
    x0 = rng.random((4, 4)).astype(np.float32)
    eps = rng.standard_normal((4, 4)).astype(np.float32)
    assert np.array_equal(flow.forward_noise(x0, 0.0, eps).x_t, x0)
    assert np.array_equal(flow.forward_noise(x0, 1.0, eps).x_t, eps)


def test_forward_noise_arithmetic():
    x0 = np.zeros((2, 2))
    eps = np.full((2, 2), 2.0)
    state = flow.forward_noise(x0, 0.5, eps)
    assert np.allclose(state.x_t, 1.0)
    assert state.t == 0.5


def test_forward_noise_shape_and_domain_errors():
    with pytest.raises(flow.ShapeContractError):
        flow.forward_noise(np.zeros((2, 2)), 0.5, np.zeros((3, 2)))
    with pytest.raises(flow.DomainError):
        flow.forward_noise(np.zeros((2, 2)), 1.2, np.zeros((2, 2)))


def test_velocity_target():
    rng = np.random.default_rng(1)
    x0 = rng.random((5, 3))
    eps = rng.standard_normal((5, 3))
    assert np.array_equal(flow.velocity_target(x0, eps), eps - x0)
    assert np.all(flow.velocity_target(x0, x0) == 0)
    assert np.all(flow.velocity_target(np.zeros(3), np.ones(3)) == 1.0)


def test_velocity_target_finite_difference():
    rng = np.random.default_rng(2)
    x0 = rng.random((6,))
    eps = rng.standard_normal((6,))
    t, h = 0.3, 1e-4
    xt = flow.forward_noise(x0, t, eps).x_t
    xth = flow.forward_noise(x0, t + h, eps).x_t
    fd = (xth - xt) / h
    assert np.abs(fd - flow.velocity_target(x0, eps)).max() < 1e-9


def test_fm_loss_values():
    pred = np.zeros((2, 3, 4))
    target = np.zeros((2, 3, 4))
    valid = np.ones((2, 3), bool)
    assert flow.fm_loss(pred, target, valid) == 0.0
    assert flow.fm_loss(pred + 2.0, target, valid) == pytest.approx(4.0)


def test_fm_loss_ignores_padding():
    rng = np.random.default_rng(3)
    pred = rng.random((2, 5, 4))
    target = rng.random((2, 5, 4))
    valid = np.zeros((2, 5), bool)
    valid[:, :3] = True
    base = flow.fm_loss(pred, target, valid)
    pred2 = pred.copy()
    pred2[:, 3:] += 100.0
    assert flow.fm_loss(pred2, target, valid) == pytest.approx(base)


def test_fm_loss_all_masked_error():
    with pytest.raises(flow.LossMaskError):
        flow.fm_loss(np.zeros((1, 2, 3)), np.zeros((1, 2, 3)),
                     np.zeros((1, 2), bool))


def test_fm_loss_torch_gradient_matches_analytic():
    torch.manual_seed(0)
    pred = torch.randn(2, 4, 3, dtype=torch.float64, requires_grad=True)
    target = torch.randn(2, 4, 3, dtype=torch.float64)
    valid = torch.ones(2, 4, dtype=torch.bool)
    valid[1, 3] = False
    loss = flow.fm_loss(pred, target, valid)
    loss.backward()
    n = valid.sum().item() * pred.shape[-1]
    analytic = 2 * (pred.detach() - target) * valid.unsqueeze(-1) / n
    rel = (pred.grad - analytic).abs().max() / analytic.abs().max()
    assert rel < 1e-5


def test_schedule_validation():
    with pytest.raises(ValueError):
        flow.FlowSchedule(num_steps=0)
    with pytest.raises(ValueError):
        flow.FlowSchedule(guidance_scale=-0.5)


def test_sample_oracle_velocity_reconstructs_x0():
    rng = np.random.default_rng(4)
    x0 = rng.random((3, 5)).astype(np.float64)
    eps_init = rng.standard_normal((3, 5))

    def oracle(x, t):
        return (x - x0) / max(t, 1e-9)

    for steps in (1, 4, 8, 33):
        out = flow.sample(oracle, eps_init.copy(),
                          flow.FlowSchedule(num_steps=steps))
        assert np.abs(out - x0).max() < 1e-5


def test_sample_guidance_degenerate_equals_cond_only():
    rng = np.random.default_rng(5)
    x0 = rng.random((2, 3))
    eps_init = rng.standard_normal((2, 3))

    def cond(x, t):
        return (x - x0) / max(t, 1e-9)

    def uncond(x, t):
        return np.zeros_like(x)

    a = flow.sample(cond, eps_init.copy(), flow.FlowSchedule(num_steps=8))
    b = flow.sample(cond, eps_init.copy(),
                    flow.FlowSchedule(num_steps=8, guidance_scale=1.0),
                    velocity_uncond_fn=uncond)
    assert np.array_equal(a, b)


def test_sample_guidance_combination():
    # with s=2 and an uncond field of zero, guided velocity is 2 * cond
    eps_init = np.ones((2, 2))
    const = np.full((2, 2), 0.5)

    def cond(x, t):
        return const

    def uncond(x, t):
        return np.zeros_like(x)

    out = flow.sample(cond, eps_init.copy(),
                      flow.FlowSchedule(num_steps=4, guidance_scale=2.0),
                      velocity_uncond_fn=uncond)
    assert np.allclose(out, eps_init - 2.0 * const * 1.0)


def test_sample_determinism_same_seed():
    gen1 = torch.Generator().manual_seed(9)
    gen2 = torch.Generator().manual_seed(9)
    x1 = torch.randn(2, 3, generator=gen1)
    x2 = torch.randn(2, 3, generator=gen2)

    def vel(x, t):
        return 0.3 * x

    a = flow.sample(vel, x1, flow.FlowSchedule(num_steps=6))
    b = flow.sample(vel, x2, flow.FlowSchedule(num_steps=6))
    assert torch.equal(a, b)


def test_diverged_sampling_error_reports_step():
    def bad(x, t):
        return x * np.nan

    with pytest.raises(flow.DivergedSamplingError) as err:
        flow.euler_integrate(bad, np.ones(3), 1.0, 0.0, 5)
    assert err.value.step == 0


def test_interpolant_one_step_consistency():
    # forward noise then one analytic Euler step with the constant velocity
    # recovers x0 exactly, at any t
    rng = np.random.default_rng(6)
    x0 = rng.random((4, 4))
    eps = rng.standard_normal((4, 4))
    for t in (0.1, 0.5, 0.9):
        xt = flow.forward_noise(x0, t, eps).x_t
        rec = xt - t * flow.velocity_target(x0, eps)
        assert np.abs(rec - x0).max() < 1e-12
