"""Object removal pipelines: naive statistics-matched fill (with a trace
knob), blend-mask construction, image-to-image repaint, and the blended
combination used to build training targets.

The repainted image is the training condition; the blended try-on is the
training target. The naive path keeps the fill's statistical artifact, the
traceless path destroys it.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, stats

from . import flow
from .imageio import luminance


class EmptyMaskWarning(UserWarning):
    """Emitted when an erase is requested with an empty mask (no-op)."""


@dataclass
class BlendMask:
    """Soft [0,1] mask: 1 on the interior eroded by blur_radius, 0 beyond
    blur_radius outside, monotone in between."""

    values: np.ndarray
    blur_radius: float


@dataclass
class ErasureResult:
    erased_person: np.ndarray
    repainted_person: np.ndarray
    blended_tryon: np.ndarray
    trace_mode: str  # traced | traceless


@dataclass
class ErasingConfig:
    t: float = 0.2
    blur_radius: float = 3.0
    trace_strength: float = 0.0
    steps: int = 4
    mode: str = "traceless"  # traceless | traced
    ring_width: int = 4
    stub_sigma: float = 1.5
    texture_sigma: float = 0.03
    seed: int = 0
    denoiser: object | None = None  # anything with .velocity(x, t)

    def __post_init__(self):
        if self.mode not in ("traceless", "traced"):
            raise ValueError(f"bad erasing mode {self.mode!r}")
        if self.trace_strength < 0:
            raise ValueError("trace_strength must be >= 0")


class SmoothingDenoiser:
    """Stub denoiser for pre-training data pipelines: estimates the clean
    image as a Gaussian blur of the current state plus a seeded fine-texture
    field (regenerated grain), so the induced velocity is (x - x0_hat) / t.

    Integrating it smooths away input-bound detail and lays down a uniform
    global texture, which is what confuses localized fill artifacts with the
    rest of the image."""

    def __init__(self, sigma: float = 1.5, texture_sigma: float = 0.03,
                 seed: int = 0):
        self.sigma = sigma
        self.texture_sigma = texture_sigma
        self.seed = seed
        self._texture: np.ndarray | None = None

    def _texture_for(self, shape) -> np.ndarray:
        if self._texture is None or self._texture.shape != shape[:2]:
            rng = np.random.default_rng(self.seed)
            self._texture = rng.normal(0.0, self.texture_sigma,
                                       size=shape[:2]).astype(np.float32)
        return self._texture

    def velocity(self, x: np.ndarray, t: float) -> np.ndarray:
        x0_hat = ndimage.gaussian_filter(x, sigma=(self.sigma, self.sigma, 0.0))
        if self.texture_sigma > 0:
            x0_hat = x0_hat + self._texture_for(x.shape)[..., None]
        return (x - x0_hat) / max(t, 1e-3)


class OracleDenoiser:
    """Exact-velocity denoiser for a known clean image (testing aid)."""

    def __init__(self, x0: np.ndarray):
        self.x0 = np.asarray(x0, dtype=np.float32)

    def velocity(self, x: np.ndarray, t: float) -> np.ndarray:
        return (x - self.x0) / max(t, 1e-6)


def _ring(mask: np.ndarray, width: int) -> np.ndarray:
    dist = ndimage.distance_transform_edt(~mask)
    return (dist > 0) & (dist <= width)


def naive_erase(
    tryon: np.ndarray,
    mask: np.ndarray,
    trace_strength: float = 0.0,
    rng: np.random.Generator | int | None = None,
    ring_width: int = 4,
) -> np.ndarray:
    """Fill the masked area with the surrounding ring's mean color plus
    matched grayscale noise; trace_strength adds that much extra noise std
    inside the mask (the detectable artifact real erasers leave behind)."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    mask = np.asarray(mask, dtype=bool)
    out = np.asarray(tryon, dtype=np.float32).copy()
    if not mask.any():
        warnings.warn("naive_erase called with an empty mask; returning input",
                      EmptyMaskWarning)
        return out
    ring = _ring(mask, ring_width)
    if not ring.any():
        ring = ~mask
    mean = out[ring].mean(axis=0)
    sigma = float(out[ring].std(axis=0).mean())
    noise = rng.standard_normal(mask.shape).astype(np.float32)
    fill = mean[None, None, :] + ((sigma + trace_strength) * noise)[..., None]
    out[mask] = np.clip(fill, 0.0, 1.0)[mask]
    return out


def noise_to_level(image, t: float, eps, encoder=None):
    """(1 - t) * enc(image) + t * eps, the forward interpolant at level t."""
    if not 0.0 <= t <= 1.0:
        raise flow.DomainError(f"t={t} outside [0, 1]")
    z = encoder(image) if encoder is not None else image
    return (1.0 - t) * z + t * eps


def img2img_repaint(
    image: np.ndarray,
    t_start: float,
    denoiser,
    steps: int,
    eps: np.ndarray | None = None,
    rng: np.random.Generator | int | None = None,
) -> np.ndarray:
    """Noise the image to t_start, then integrate the denoiser back to 0."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if not 0.0 <= t_start <= 1.0:
        raise flow.DomainError(f"t_start={t_start} outside [0, 1]")
    image = np.asarray(image, dtype=np.float32)
    if t_start == 0.0:
        return image.copy()
    if eps is None:
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        eps = rng.standard_normal(image.shape).astype(np.float32)
    z = noise_to_level(image, t_start, eps)
    z = flow.euler_integrate(denoiser.velocity, z, t_start, 0.0, steps)
    return np.clip(z, 0.0, 1.0).astype(np.float32)


def make_blend_mask(mask: np.ndarray, blur_radius: float) -> BlendMask:
    """Gaussian-blur the binary mask (sigma = radius/2, truncated at 3 sigma)
    and clamp by distance so the stated support/interior bounds hold exactly."""
    if blur_radius < 0:
        raise ValueError("blur_radius must be >= 0")
    mask = np.asarray(mask, dtype=bool)
    if blur_radius == 0:
        return BlendMask(values=mask.astype(np.float32), blur_radius=0.0)
    blurred = ndimage.gaussian_filter(mask.astype(np.float64),
                                      sigma=blur_radius / 2.0, truncate=3.0)
    d_in = ndimage.distance_transform_edt(mask)
    d_out = ndimage.distance_transform_edt(~mask)
    values = np.clip(blurred, 0.0, 1.0)
    values = np.where(d_in >= blur_radius, 1.0, values)
    values = np.where(d_out > blur_radius, 0.0, values)
    return BlendMask(values=values.astype(np.float32), blur_radius=float(blur_radius))


def blend_images(tryon: np.ndarray, repainted: np.ndarray, blend: BlendMask) -> np.ndarray:
    """Convex per-pixel combination: tryon * M + repainted * (1 - M)."""
    v = blend.values[..., None]
    return (tryon * v + repainted * (1.0 - v)).astype(np.float32)


def traceless_erase(tryon: np.ndarray, mask: np.ndarray, cfg: ErasingConfig) -> ErasureResult:
    """Full erase pipeline.

    mode="traceless": naive fill, global image-to-image repaint, then blend
    the original try-on back in over the soft mask. mode="traced" keeps the
    naive fill as both condition and leaves the try-on untouched, reproducing
    the shortcut-prone setup.
    """
    rng = np.random.default_rng(cfg.seed)
    erased = naive_erase(tryon, mask, cfg.trace_strength, rng, cfg.ring_width)
    if cfg.mode == "traced":
        return ErasureResult(
            erased_person=erased,
            repainted_person=erased.copy(),
            blended_tryon=np.asarray(tryon, dtype=np.float32).copy(),
            trace_mode="traced",
        )
    denoiser = cfg.denoiser if cfg.denoiser is not None else \
        SmoothingDenoiser(cfg.stub_sigma, cfg.texture_sigma, seed=cfg.seed + 1)
    # grayscale-replicated noise keeps achromatic scenes achromatic end-to-end
    eps = np.repeat(rng.standard_normal(mask.shape).astype(np.float32)[..., None], 3, axis=2)
    repainted = img2img_repaint(erased, cfg.t, denoiser, cfg.steps, eps=eps)
    blend = make_blend_mask(mask, cfg.blur_radius)
    blended = blend_images(np.asarray(tryon, dtype=np.float32), repainted, blend)
    return ErasureResult(
        erased_person=erased,
        repainted_person=repainted,
        blended_tryon=blended,
        trace_mode="traceless",
    )


def trace_statistic(image: np.ndarray, mask: np.ndarray, ring_width: int = 4) -> float:
    """Shortcut-detector statistic: high-pass residual std inside the mask
    minus the std over the surrounding ring."""
    lum = luminance(image)
    residual = lum - ndimage.gaussian_filter(lum, sigma=1.5)
    ring = _ring(mask, ring_width)
    return float(residual[mask].std() - residual[ring].std())


def trace_pvalue(image: np.ndarray, mask: np.ndarray, ring_width: int = 4) -> float:
    """Two-sample (Levene) p-value comparing residual spread inside the mask
    vs the surrounding ring; small values mean a detectable erase trace."""
    lum = luminance(image)
    residual = lum - ndimage.gaussian_filter(lum, sigma=1.5)
    ring = _ring(mask, ring_width)
    return float(stats.levene(residual[mask], residual[ring]).pvalue)
