"""Rectified-flow core: the linear interpolant, its constant velocity target,
the masked flow-matching loss, and the Euler sampler.

Functions here are written against plain array operators so they accept both
numpy arrays (data pipelines) and torch tensors (model training/inference).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeContractError(ValueError):
    """Shapes of interpolant endpoints disagree."""


class DomainError(ValueError):
    """A time value is outside [0, 1]."""


class LossMaskError(ValueError):
    """The validity mask selects no tokens."""


class DivergedSamplingError(RuntimeError):
    """Non-finite values appeared during integration."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"non-finite state at integration step {step}")


@dataclass
class FlowSchedule:
    num_steps: int = 8
    guidance_scale: float = 1.0
    t_sampling: str = "uniform"
    t_img2img: float = 0.2

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if self.guidance_scale < 0:
            raise ValueError("guidance_scale must be >= 0")
        if self.t_sampling != "uniform":
            raise ValueError(f"unknown t_sampling {self.t_sampling!r}")


@dataclass
class NoisyState:
    x_t: object
    t: object
    eps: object


def _all_finite(x) -> bool:
    if isinstance(x, np.ndarray):
        return bool(np.isfinite(x).all())
    import torch

    if isinstance(x, torch.Tensor):
        return bool(torch.isfinite(x).all())
    return bool(np.isfinite(np.asarray(x)).all())


def _t_in_range(t) -> bool:
    arr = t.detach().cpu().numpy() if hasattr(t, "detach") else np.asarray(t)
    return bool(((arr >= 0) & (arr <= 1)).all())


def forward_noise(x0, t, eps) -> NoisyState:
    """x_t = (1 - t) * x0 + t * eps; t is a scalar or broadcastable array."""
    if getattr(x0, "shape", None) != getattr(eps, "shape", None):
        raise ShapeContractError(f"x0 {getattr(x0, 'shape', None)} vs eps "
                                 f"{getattr(eps, 'shape', None)}")
    if not _t_in_range(t):
        raise DomainError("t outside [0, 1]")
    x_t = (1.0 - t) * x0 + t * eps
    return NoisyState(x_t=x_t, t=t, eps=eps)


def velocity_target(x0, eps):
    """Constant velocity of the linear interpolant: eps - x0."""
    if getattr(x0, "shape", None) != getattr(eps, "shape", None):
        raise ShapeContractError("x0 and eps shapes differ")
    return eps - x0


def fm_loss(pred_v, target_v, valid_mask):
    """Mean squared error over valid tokens only.

    pred_v/target_v: (..., L, F); valid_mask: (..., L) boolean.
    """
    if getattr(pred_v, "shape", None) != getattr(target_v, "shape", None):
        raise ShapeContractError("pred and target shapes differ")
    if isinstance(pred_v, np.ndarray):
        valid = np.asarray(valid_mask, dtype=bool)
        n = valid.sum()
        if n == 0:
            raise LossMaskError("all tokens masked out of the loss")
        se = (pred_v - target_v) ** 2
        return float((se * valid[..., None]).sum() / (n * pred_v.shape[-1]))
    import torch

    valid = valid_mask.bool()
    n = valid.sum()
    if int(n) == 0:
        raise LossMaskError("all tokens masked out of the loss")
    se = (pred_v - target_v) ** 2
    return (se * valid.unsqueeze(-1)).sum() / (n * pred_v.shape[-1])


def euler_integrate(velocity_fn, x, t_start: float, t_end: float, steps: int,
                    check_finite: bool = True):
    """Integrate dx/dt = v(x, t) from t_start to t_end in uniform Euler steps.

    velocity_fn(x, t) must return an array like x; x may also be a list of
    arrays, in which case velocity_fn receives and returns a matching list.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    is_list = isinstance(x, (list, tuple))
    state = list(x) if is_list else [x]
    dt = (t_start - t_end) / steps
    t = t_start
    for k in range(steps):
        vel = velocity_fn(state if is_list else state[0], t)
        vel = list(vel) if is_list else [vel]
        state = [s - dt * v for s, v in zip(state, vel)]
        if check_finite and not all(_all_finite(s) for s in state):
            raise DivergedSamplingError(k)
        t -= dt
    return state if is_list else state[0]


def sample(velocity_fn, x_init, schedule: FlowSchedule, velocity_uncond_fn=None):
    """Euler-integrate from t=1 to t=0 starting at x_init (Gaussian noise).

    With guidance_scale != 1, classifier-free guidance combines the
    conditional and unconditional velocity fields:
    v = v_uncond + s * (v_cond - v_uncond).
    """
    s = schedule.guidance_scale
    if s != 1.0:
        if velocity_uncond_fn is None:
            raise ValueError("guidance_scale != 1 requires an unconditional velocity")

        def guided(x, t):
            vc = velocity_fn(x, t)
            vu = velocity_uncond_fn(x, t)
            if isinstance(vc, (list, tuple)):
                return [u + s * (c - u) for c, u in zip(vc, vu)]
            return vu + s * (vc - vu)

        fn = guided
    else:
        fn = velocity_fn
    return euler_integrate(fn, x_init, 1.0, 0.0, schedule.num_steps)
