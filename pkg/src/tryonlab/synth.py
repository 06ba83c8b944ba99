"""Seeded synthetic scenes: procedural figures, parametric wearable glyphs,
exact masks and anchors, a matched oracle detector, and dataset assembly.

Figures and backgrounds are rendered strictly achromatic (R == G == B), while
glyphs carry saturated colors. Chromaticity is therefore a sound segmentation
cue, which is what makes the oracle detector exact on composed scenes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import imageio

CLASSES = ("hat", "glasses", "necklace", "bag", "top", "shoes")
REPLACING_CLASSES = frozenset({"top", "shoes"})

# Class-balancing weights: the two garment-like classes and bags dominate the
# paired pool, the rest are long-tail.
DEFAULT_CLASS_WEIGHTS = {
    "top": 4.0,
    "shoes": 4.0,
    "bag": 3.0,
    "hat": 1.0,
    "glasses": 1.0,
    "necklace": 1.0,
}

DEFAULT_PATCH_SIZE = 4

DETECTION_THRESHOLD = 0.25
CHROMA_FLOOR = 0.15

_TEMPLATE_RESOLUTION = 24
_TEMPLATE_CACHE: dict[str, list[np.ndarray]] = {}


class ConfigurationError(ValueError):
    """Raised for invalid scene/dataset configuration."""


class CompositionError(ValueError):
    """Raised when a glyph cannot be composited onto a canvas."""


def prompt_for_class(class_label: str) -> str:
    if class_label not in CLASSES:
        raise ConfigurationError(f"unknown class {class_label!r}")
    verb = "replacing" if class_label in REPLACING_CLASSES else "trying on"
    return f"{verb} {class_label}"


# ---------------------------------------------------------------------------
# Specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FigureParams:
    """Body proportions (fractions of canvas height) and a discrete pose."""

    head_r: float = 0.085
    torso_w: float = 0.115
    torso_l: float = 0.30
    arm_l: float = 0.26
    leg_l: float = 0.30
    pose: int = 0  # 0 arms down, 1 arms out, 2 one arm raised, 3 akimbo
    shade: float = 0.42


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    canvas_size: tuple[int, int] = (64, 64)
    figure: FigureParams = field(default_factory=FigureParams)
    background_mode: str = "white"  # white | natural
    texture_seed: int = 0

    def __post_init__(self):
        if self.background_mode not in ("white", "natural"):
            raise ConfigurationError(f"bad background_mode {self.background_mode!r}")
        h, w = self.canvas_size
        if h < 16 or w < 16:
            raise ConfigurationError("canvas too small")


@dataclass(frozen=True)
class ObjectSpec:
    class_id: str
    anchor: tuple[float, float]  # (row, col) in canvas pixels
    scale: float  # base glyph half-extent in pixels
    color: tuple[float, float, float]
    shape_params: tuple[tuple[str, float], ...] = ()
    background_mode: str = "white"  # white | natural | worn
    seed: int = 0

    def __post_init__(self):
        if self.class_id not in CLASSES:
            raise ConfigurationError(f"unknown class {self.class_id!r}")
        if self.background_mode not in ("white", "natural", "worn"):
            raise ConfigurationError(f"bad background_mode {self.background_mode!r}")

    def params(self) -> dict[str, float]:
        return dict(self.shape_params)


@dataclass
class TryOnTriple:
    tryon: np.ndarray
    person: np.ndarray
    mask: np.ndarray
    class_label: str
    prompt: str
    object_image: np.ndarray | None = None
    object_mask: np.ndarray | None = None


# ---------------------------------------------------------------------------
# Signed-distance drawing primitives
# ---------------------------------------------------------------------------


def _grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    yy = np.arange(h, dtype=np.float32)[:, None]
    xx = np.arange(w, dtype=np.float32)[None, :]
    return yy, xx


def _sd_circle(yy, xx, cy, cx, r):
    return np.hypot(yy - cy, xx - cx) - r


def _sd_ellipse(yy, xx, cy, cx, ry, rx):
    k = np.hypot((yy - cy) / max(ry, 1e-6), (xx - cx) / max(rx, 1e-6))
    return (k - 1.0) * min(ry, rx)


def _sd_box(yy, xx, cy, cx, hy, hx, round_r=0.0):
    dy = np.abs(yy - cy) - (hy - round_r)
    dx = np.abs(xx - cx) - (hx - round_r)
    outside = np.hypot(np.maximum(dy, 0.0), np.maximum(dx, 0.0))
    inside = np.minimum(np.maximum(dy, dx), 0.0)
    return outside + inside - round_r


def _sd_capsule(yy, xx, ay, ax, by, bx, r):
    py, px = yy - ay, xx - ax
    vy, vx = by - ay, bx - ax
    denom = vy * vy + vx * vx
    if denom < 1e-9:
        return np.hypot(py, px) - r
    t = np.clip((py * vy + px * vx) / denom, 0.0, 1.0)
    return np.hypot(py - t * vy, px - t * vx) - r


def _sd_ring(yy, xx, cy, cx, r_mid, half_w):
    return np.abs(np.hypot(yy - cy, xx - cx) - r_mid) - half_w


def _clip_below(d, yy, y0):
    # keep only the y >= y0 part of a shape
    return np.maximum(d, y0 - yy)


def _clip_above(d, yy, y0):
    return np.maximum(d, yy - y0)


def _alpha(d, aa=1.0):
    return np.clip(0.5 - d / aa, 0.0, 1.0).astype(np.float32)


def _paint(img, alpha, value):
    """Composite a flat (possibly shaded) gray or color layer over img."""
    a = alpha[..., None]
    return img * (1.0 - a) + np.asarray(value, dtype=np.float32) * a


# ---------------------------------------------------------------------------
# Figure layout and rendering
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FigureLayout:
    canvas: tuple[int, int]
    cx: float
    head_c: tuple[float, float]
    head_r: float
    eye_y: float
    neck_y: float
    hip_y: float
    feet_y: float
    torso_hw: float
    shoulder_y: float
    foot_dx: float


def layout_for(spec: SceneSpec) -> FigureLayout:
    h, w = spec.canvas_size
    f = spec.figure
    rng = np.random.default_rng(spec.seed)
    cx = w / 2.0 + rng.uniform(-0.03, 0.03) * w
    head_r = f.head_r * h
    head_cy = 0.16 * h
    neck_y = head_cy + head_r * 1.25
    hip_y = neck_y + f.torso_l * h
    feet_y = min(hip_y + f.leg_l * h, h - 2.0)
    return FigureLayout(
        canvas=(h, w),
        cx=cx,
        head_c=(head_cy, cx),
        head_r=head_r,
        eye_y=head_cy + 0.15 * head_r,
        neck_y=neck_y,
        hip_y=hip_y,
        feet_y=feet_y,
        torso_hw=f.torso_w * h,
        shoulder_y=neck_y + 0.35 * head_r,
        foot_dx=0.075 * h,
    )


def _figure_parts(spec: SceneSpec, lay: FigureLayout):
    """(sdf, gray value) parts, painter's order."""
    h, w = lay.canvas
    f = spec.figure
    yy, xx = _grid(h, w)
    shade = f.shade
    arm_r = 0.35 * lay.torso_hw
    leg_r = 0.42 * lay.torso_hw
    sy = lay.shoulder_y
    arm_l = f.arm_l * h

    pose_angles = {
        0: (100.0, 80.0),
        1: (135.0, 45.0),
        2: (135.0, -60.0),
        3: (115.0, 65.0),
    }[f.pose % 4]

    def arm_end(angle_deg, side):
        a = np.deg2rad(angle_deg)
        return (sy + arm_l * np.sin(a) * (1 if angle_deg >= 0 else 1),
                lay.cx + side * abs(arm_l * np.cos(a)))

    # angle measured from horizontal; negative angle means raised
    def arm(angle_deg, side):
        a = np.deg2rad(abs(angle_deg))
        ey = sy + arm_l * np.sin(a) * (1.0 if angle_deg > 0 else -1.0)
        ex = lay.cx + side * (lay.torso_hw * 0.8 + arm_l * np.cos(a) * 0.55)
        return _sd_capsule(yy, xx, sy, lay.cx + side * lay.torso_hw * 0.8, ey, ex, arm_r)

    parts = [
        (arm(pose_angles[0], -1.0), shade + 0.05),
        (arm(pose_angles[1], +1.0), shade + 0.05),
        (_sd_capsule(yy, xx, lay.neck_y, lay.cx, lay.hip_y, lay.cx, lay.torso_hw), shade),
        (_sd_capsule(yy, xx, lay.hip_y, lay.cx - 0.5 * lay.foot_dx,
                     lay.feet_y, lay.cx - lay.foot_dx, leg_r), shade - 0.06),
        (_sd_capsule(yy, xx, lay.hip_y, lay.cx + 0.5 * lay.foot_dx,
                     lay.feet_y, lay.cx + lay.foot_dx, leg_r), shade - 0.06),
        (_sd_circle(yy, xx, lay.head_c[0], lay.head_c[1], lay.head_r), shade + 0.14),
    ]
    return parts


def _smooth_field(rng: np.random.Generator, h: int, w: int, lo: float, hi: float,
                  cells: int = 5) -> np.ndarray:
    g = rng.uniform(lo, hi, size=(cells, cells)).astype(np.float32)
    ys = np.linspace(0.0, cells - 1.0, h, dtype=np.float32)
    xs = np.linspace(0.0, cells - 1.0, w, dtype=np.float32)
    y0 = np.clip(np.floor(ys).astype(int), 0, cells - 2)
    x0 = np.clip(np.floor(xs).astype(int), 0, cells - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = g[y0][:, x0]
    b = g[y0][:, x0 + 1]
    c = g[y0 + 1][:, x0]
    d = g[y0 + 1][:, x0 + 1]
    out = (a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx
           + c * fy * (1 - fx) + d * fy * fx)
    return out.astype(np.float32)


def render_person(spec: SceneSpec, patch_size: int = DEFAULT_PATCH_SIZE) -> np.ndarray:
    """Render the figure; deterministic in the spec, achromatic by design."""
    h, w = spec.canvas_size
    if patch_size > 0 and (h % patch_size or w % patch_size):
        raise ConfigurationError(
            f"canvas {spec.canvas_size} not a multiple of patch size {patch_size}")

    tex_rng = np.random.default_rng(spec.texture_seed)
    if spec.background_mode == "white":
        gray = np.ones((h, w), dtype=np.float32)
    else:
        gray = _smooth_field(tex_rng, h, w, 0.62, 0.95)
        gray += tex_rng.normal(0.0, 0.008, size=(h, w)).astype(np.float32)

    lay = layout_for(spec)
    body = np.zeros((h, w), dtype=np.float32)
    for d, value in _figure_parts(spec, lay):
        a = _alpha(d)
        gray = gray * (1.0 - a) + value * a
        body = np.maximum(body, a)

    speck = tex_rng.uniform(-0.02, 0.02, size=(h, w)).astype(np.float32)
    gray = gray + speck * (body > 0.5)
    gray = np.clip(gray, 0.0, 1.0).astype(np.float32)
    return np.repeat(gray[..., None], 3, axis=2)


# ---------------------------------------------------------------------------
# Wearing zones and object specs
# ---------------------------------------------------------------------------


def wearing_zone(lay: FigureLayout, class_id: str) -> tuple[float, float, float, float]:
    """(r0, c0, r1, c1) box a composed glyph's mask centroid must fall in."""
    h, w = lay.canvas
    hr = lay.head_r
    cy, cx = lay.head_c
    zones = {
        "hat": (cy - 2.6 * hr, cx - 2.4 * hr, cy + 0.4 * hr, cx + 2.4 * hr),
        "glasses": (lay.eye_y - 1.4 * hr, cx - 2.4 * hr, lay.eye_y + 1.4 * hr, cx + 2.4 * hr),
        "necklace": (lay.neck_y - 0.8 * hr, cx - 2.4 * hr, lay.neck_y + 2.6 * hr, cx + 2.4 * hr),
        "bag": (lay.hip_y - 0.22 * h, cx - lay.torso_hw - 0.24 * h,
                lay.hip_y + 0.22 * h, cx + lay.torso_hw + 0.24 * h),
        "top": (lay.neck_y - 0.05 * h, cx - lay.torso_hw - 0.12 * h,
                lay.hip_y + 0.08 * h, cx + lay.torso_hw + 0.12 * h),
        "shoes": (lay.feet_y - 0.12 * h, cx - 3.2 * lay.foot_dx,
                  float(h), cx + 3.2 * lay.foot_dx),
    }
    r0, c0, r1, c1 = zones[class_id]
    return (max(r0, 0.0), max(c0, 0.0), min(r1, float(h)), min(c1, float(w)))


def canonical_anchor(lay: FigureLayout, class_id: str) -> tuple[float, float]:
    h, _ = lay.canvas
    hr = lay.head_r
    cy, cx = lay.head_c
    anchors = {
        "hat": (cy - 1.25 * hr, cx),
        "glasses": (lay.eye_y, cx),
        "necklace": (lay.neck_y + 0.9 * hr, cx),
        "bag": (lay.hip_y - 0.02 * h, cx + lay.torso_hw + 0.085 * h),
        "top": ((lay.neck_y + lay.hip_y) / 2.0, cx),
        "shoes": (lay.feet_y - 0.015 * h, cx),
    }
    return anchors[class_id]


def canonical_scale(lay: FigureLayout, class_id: str) -> float:
    h, _ = lay.canvas
    hr = lay.head_r
    scales = {
        "hat": 1.35 * hr,
        "glasses": 1.15 * hr,
        "necklace": 1.05 * hr,
        "bag": 0.085 * h,
        "top": 1.25 * lay.torso_hw,
        "shoes": 1.0 * lay.foot_dx / 0.55,
    }
    return scales[class_id]


def _hsv_to_rgb(hue: float, chroma: float, value: float) -> tuple[float, float, float]:
    x = chroma * (1 - abs(hue % 2 - 1))
    sector = int(hue) % 6
    r, g, b = [(chroma, x, 0), (x, chroma, 0), (0, chroma, x),
               (0, x, chroma), (x, 0, chroma), (chroma, 0, x)][sector]
    m = value - chroma
    return (float(r + m), float(g + m), float(b + m))


def random_color(rng: np.random.Generator,
                 class_id: str | None = None) -> tuple[float, float, float]:
    """Saturated RGB with chroma (max - min) at least 0.5.

    With a class, the hue is drawn from that class's sector of the wheel, so
    a class prompt carries real appearance information while objects still
    vary within the class."""
    if class_id is None:
        hue = rng.uniform(0.0, 6.0)
        chroma = rng.uniform(0.5, 1.0)
    else:
        hue = (CLASSES.index(class_id) + 0.33 + rng.uniform(0.0, 0.35)) % 6.0
        chroma = rng.uniform(0.65, 1.0)
    value = rng.uniform(max(chroma, 0.8), 1.0)
    return _hsv_to_rgb(hue, chroma, value)


def class_color(class_id: str) -> tuple[float, float, float]:
    """Center of the class's hue sector at full saturation."""
    return _hsv_to_rgb(CLASSES.index(class_id) + 0.5, 0.85, 0.95)


def random_object_spec(
    rng: np.random.Generator,
    class_id: str,
    lay: FigureLayout,
    background_mode: str = "white",
    jitter: float = 1.0,
) -> ObjectSpec:
    """Object spec anchored inside the class wearing zone, with optional jitter."""
    ar, ac = canonical_anchor(lay, class_id)
    s = canonical_scale(lay, class_id)
    h, _ = lay.canvas
    if jitter > 0:
        ar += rng.uniform(-0.012, 0.012) * h * jitter
        ac += rng.uniform(-0.016, 0.016) * h * jitter
        s *= 1.0 + rng.uniform(-0.08, 0.08) * jitter
        if class_id == "bag" and rng.random() < 0.5:
            ac = 2 * lay.cx - ac  # other hip
    params = tuple(
        (k, 1.0 + (rng.uniform(-0.08, 0.08) * jitter if jitter > 0 else 0.0))
        for k in ("w", "h")
    )
    spec = ObjectSpec(
        class_id=class_id,
        anchor=(float(ar), float(ac)),
        scale=float(s),
        color=random_color(rng, class_id),
        shape_params=params,
        background_mode=background_mode,
        seed=int(rng.integers(0, 2**31 - 1)),
    )
    _validate_anchor(spec, lay)
    return spec


def canonical_object_spec(class_id: str, lay: FigureLayout,
                          color: tuple[float, float, float] | None = None,
                          background_mode="white",
                          seed: int = 0) -> ObjectSpec:
    if color is None:
        color = class_color(class_id)
    return ObjectSpec(
        class_id=class_id,
        anchor=canonical_anchor(lay, class_id),
        scale=canonical_scale(lay, class_id),
        color=color,
        shape_params=(("w", 1.0), ("h", 1.0)),
        background_mode=background_mode,
        seed=seed,
    )


def _validate_anchor(spec: ObjectSpec, lay: FigureLayout) -> None:
    r0, c0, r1, c1 = wearing_zone(lay, spec.class_id)
    ar, ac = spec.anchor
    if not (r0 <= ar <= r1 and c0 <= ac <= c1):
        raise ConfigurationError(
            f"{spec.class_id} anchor {spec.anchor} outside wearing zone {(r0, c0, r1, c1)}")


# ---------------------------------------------------------------------------
# Glyph rendering
# ---------------------------------------------------------------------------


def _glyph_sdf(class_id: str, params: dict[str, float], yy, xx, cy, cx, s):
    pw = params.get("w", 1.0)
    ph = params.get("h", 1.0)
    if class_id == "hat":
        crown = _sd_ellipse(yy, xx, cy - 0.30 * s * ph, cx, 0.62 * s * ph, 0.72 * s * pw)
        crown = _clip_above(crown, yy, cy + 0.18 * s)
        brim = _sd_box(yy, xx, cy + 0.18 * s, cx, 0.16 * s * ph, 1.18 * s * pw, 0.08 * s)
        return np.minimum(crown, brim)
    if class_id == "glasses":
        dx = 0.58 * s * pw
        r_out = 0.42 * s * ph
        lens_l = _sd_ring(yy, xx, cy, cx - dx, r_out * 0.75, r_out * 0.34)
        lens_r = _sd_ring(yy, xx, cy, cx + dx, r_out * 0.75, r_out * 0.34)
        bridge = _sd_capsule(yy, xx, cy - 0.08 * s, cx - dx * 0.35, cy - 0.08 * s,
                             cx + dx * 0.35, 0.11 * s)
        return np.minimum(np.minimum(lens_l, lens_r), bridge)
    if class_id == "necklace":
        chain = _sd_ring(yy, xx, cy - 0.45 * s * ph, cx, 0.75 * s * pw, 0.15 * s)
        chain = _clip_below(chain, yy, cy - 0.42 * s * ph)
        pendant = _sd_circle(yy, xx, cy + 0.42 * s * ph, cx, 0.26 * s)
        return np.minimum(chain, pendant)
    if class_id == "bag":
        body = _sd_box(yy, xx, cy + 0.12 * s, cx, 0.52 * s * ph, 0.66 * s * pw, 0.14 * s)
        handle = _sd_ring(yy, xx, cy - 0.30 * s * ph, cx, 0.38 * s * pw, 0.075 * s)
        handle = _clip_above(handle, yy, cy - 0.32 * s * ph)
        return np.minimum(body, handle)
    if class_id == "top":
        body = _sd_box(yy, xx, cy + 0.08 * s, cx, 0.82 * s * ph, 0.72 * s * pw, 0.18 * s)
        shoulders = _sd_box(yy, xx, cy - 0.58 * s * ph, cx, 0.24 * s * ph, 1.12 * s * pw,
                            0.10 * s)
        return np.minimum(body, shoulders)
    if class_id == "shoes":
        dx = 0.55 * s * pw
        left = _sd_ellipse(yy, xx, cy, cx - dx, 0.26 * s * ph, 0.46 * s)
        right = _sd_ellipse(yy, xx, cy, cx + dx, 0.26 * s * ph, 0.46 * s)
        return np.minimum(left, right)
    raise ConfigurationError(f"unknown class {class_id!r}")


def render_glyph(
    spec: ObjectSpec,
    canvas_size: tuple[int, int],
    center: tuple[float, float] | None = None,
    scale: float | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Render the glyph alone: (rgb (H,W,3), alpha (H,W) in [0,1])."""
    h, w = canvas_size
    cy, cx = center if center is not None else spec.anchor
    s = scale if scale is not None else spec.scale
    yy, xx = _grid(h, w)
    d = _glyph_sdf(spec.class_id, spec.params(), yy, xx, cy, cx, s)
    alpha = _alpha(d)
    # vertical shading as a uniform subtractive offset: brightness varies while
    # per-pixel chroma (max - min) stays exact, keeping segmentation sound
    color = np.asarray(spec.color, dtype=np.float32)
    depth = 0.5 * float(color.min())
    ramp = np.clip((yy - (cy - s)) / max(2.0 * s, 1e-6), 0.0, 1.0) + 0.0 * xx
    rgb = color[None, None, :] - (depth * ramp)[..., None]
    return np.clip(rgb, 0.0, 1.0).astype(np.float32), alpha


def compose_tryon(person: np.ndarray, obj: ObjectSpec) -> tuple[np.ndarray, np.ndarray]:
    """Alpha-composite the glyph at its anchor.

    Returns the try-on image and the exact binary mask (alpha > 0.5). Pixels
    outside the mask equal the person image bit-for-bit.
    """
    h, w = person.shape[:2]
    ar, ac = obj.anchor
    if not (0 <= ar < h and 0 <= ac < w):
        raise CompositionError(f"anchor {obj.anchor} outside canvas {(h, w)}")
    rgb, alpha = render_glyph(obj, (h, w))
    mask = alpha > 0.5
    if not mask.any():
        raise CompositionError("composited glyph has an empty mask")
    tryon = person.copy()
    # boost in-mask alpha so boundary pixels stay glyph-dominated; pixels
    # outside the binary mask are untouched, keeping the fidelity invariant
    a = np.clip(0.4 + 0.6 * alpha, 0.0, 1.0)[..., None]
    blended = person * (1.0 - a) + rgb * a
    tryon[mask] = np.clip(blended, 0.0, 1.0)[mask].astype(np.float32)
    return tryon, mask


def render_object_image(
    spec: ObjectSpec,
    canvas_size: tuple[int, int],
    patch_size: int = DEFAULT_PATCH_SIZE,
) -> tuple[np.ndarray, np.ndarray]:
    """Standalone object image per its background mode, with its exact mask."""
    h, w = canvas_size
    rng = np.random.default_rng(spec.seed)
    if spec.background_mode == "worn":
        scene = SceneSpec(
            seed=spec.seed,
            canvas_size=canvas_size,
            background_mode="white" if rng.random() < 0.5 else "natural",
            texture_seed=spec.seed + 1,
        )
        person = render_person(scene, patch_size)
        lay = layout_for(scene)
        worn = replace(
            spec,
            anchor=canonical_anchor(lay, spec.class_id),
            scale=canonical_scale(lay, spec.class_id),
        )
        return compose_tryon(person, worn)

    if spec.background_mode == "white":
        bg = np.ones((h, w, 3), dtype=np.float32)
    else:
        gray = _smooth_field(rng, h, w, 0.62, 0.95)
        bg = np.repeat(np.clip(gray, 0.0, 1.0)[..., None], 3, axis=2)

    # product-shot framing: centered, filling most of the canvas
    s = 0.30 * min(h, w)
    rgb, alpha = render_glyph(spec, (h, w), center=(h / 2.0, w / 2.0), scale=s)
    mask = alpha > 0.5
    img = bg.copy()
    a = np.clip(0.4 + 0.6 * alpha, 0.0, 1.0)[..., None]
    blended = bg * (1.0 - a) + rgb * a
    img[mask] = np.clip(blended, 0.0, 1.0)[mask].astype(np.float32)
    return img, mask


# ---------------------------------------------------------------------------
# Oracle detector
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Detection:
    box: tuple[int, int, int, int]  # (r0, c0, r1, c1), exclusive on r1/c1
    confidence: float


def segment_chromatic(image: np.ndarray, floor: float = CHROMA_FLOOR) -> np.ndarray | None:
    """Segment saturated pixels; returns None when nothing chromatic exists.

    The threshold adapts to half the image's peak chroma so anti-aliased
    boundary pixels do not inflate the region.
    """
    img = np.asarray(image, dtype=np.float32)
    chroma = img.max(axis=-1) - img.min(axis=-1)
    peak = float(chroma.max()) if chroma.size else 0.0
    if peak < floor:
        return None
    mask = chroma >= max(floor, 0.5 * peak)
    if mask.sum() < 6:
        return None
    return mask


def _tight_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1


def _silhouette(mask: np.ndarray, box, res=_TEMPLATE_RESOLUTION) -> np.ndarray:
    r0, c0, r1, c1 = box
    crop = mask[r0:r1, c0:c1].astype(np.float32)
    return imageio.resize(crop, (res, res)) > 0.35


def _class_templates(class_id: str) -> list[np.ndarray]:
    if class_id in _TEMPLATE_CACHE:
        return _TEMPLATE_CACHE[class_id]
    templates = []
    canvas = (72, 72)
    for pw, ph in ((1.0, 1.0), (0.85, 1.0), (1.15, 1.0), (1.0, 0.85), (1.0, 1.15)):
        spec = ObjectSpec(
            class_id=class_id,
            anchor=(36.0, 36.0),
            scale=18.0,
            color=(1.0, 0.0, 0.0),
            shape_params=(("w", pw), ("h", ph)),
        )
        _, alpha = render_glyph(spec, canvas)
        sil = alpha > 0.5
        templates.append(_silhouette(sil, _tight_box(sil)))
    _TEMPLATE_CACHE[class_id] = templates
    return templates


def _dice(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.logical_and(a, b).sum()
    total = a.sum() + b.sum()
    return float(2.0 * inter / total) if total else 0.0


def oracle_detect(image: np.ndarray, class_label: str) -> Detection | None:
    """Template/color-matching detector over the known glyph family."""
    if class_label not in CLASSES:
        raise ConfigurationError(f"unknown class {class_label!r}")
    mask = segment_chromatic(image)
    if mask is None:
        return None
    box = _tight_box(mask)
    sil = _silhouette(mask, box)
    conf = max(_dice(sil, t) for t in _class_templates(class_label))
    return Detection(box=box, confidence=conf)


def box_iou(a, b) -> float:
    r0 = max(a[0], b[0])
    c0 = max(a[1], b[1])
    r1 = min(a[2], b[2])
    c1 = min(a[3], b[3])
    inter = max(r1 - r0, 0) * max(c1 - c0, 0)
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union else 0.0


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    return float(inter / union) if union else 0.0


# ---------------------------------------------------------------------------
# Dataset assembly
# ---------------------------------------------------------------------------


@dataclass
class DatasetConfig:
    out_dir: str | Path
    n: int = 200
    classes: tuple[str, ...] = CLASSES
    weights: dict[str, float] | None = None
    class_counts: dict[str, int] | None = None  # exact counts override sampling
    seed: int = 0
    split: str = "train"
    canvas: tuple[int, int] = (64, 64)
    paired: bool = False
    person_backgrounds: tuple[str, ...] = ("white", "natural")
    object_backgrounds: tuple[str, ...] = ("white", "natural", "worn")
    jitter: float = 1.0
    patch_size: int = DEFAULT_PATCH_SIZE


def _sample_classes(cfg: DatasetConfig, rng: np.random.Generator) -> list[str]:
    if cfg.class_counts is not None:
        out = []
        for cls in cfg.classes:
            out.extend([cls] * int(cfg.class_counts.get(cls, 0)))
        rng.shuffle(out)
        return out
    weights = cfg.weights or {c: DEFAULT_CLASS_WEIGHTS.get(c, 1.0) for c in cfg.classes}
    w = np.array([max(float(weights.get(c, 0.0)), 0.0) for c in cfg.classes])
    total = w.sum()
    if total <= 0:
        raise ConfigurationError("class sampling weights sum to zero")
    keep = w > 0
    classes = [c for c, k in zip(cfg.classes, keep) if k]
    probs = w[keep] / w[keep].sum()
    return [classes[i] for i in rng.choice(len(classes), size=cfg.n, p=probs)]


def generate_triple(
    rng: np.random.Generator,
    class_id: str,
    canvas: tuple[int, int],
    paired: bool,
    person_backgrounds=("white", "natural"),
    object_backgrounds=("white", "natural", "worn"),
    jitter: float = 1.0,
    patch_size: int = DEFAULT_PATCH_SIZE,
) -> TryOnTriple:
    scene = SceneSpec(
        seed=int(rng.integers(0, 2**31 - 1)),
        canvas_size=canvas,
        figure=FigureParams(pose=int(rng.integers(0, 4))),
        background_mode=person_backgrounds[int(rng.integers(0, len(person_backgrounds)))],
        texture_seed=int(rng.integers(0, 2**31 - 1)),
    )
    person = render_person(scene, patch_size)
    lay = layout_for(scene)
    obj_bg = object_backgrounds[int(rng.integers(0, len(object_backgrounds)))]
    obj = random_object_spec(rng, class_id, lay, background_mode=obj_bg, jitter=jitter)
    tryon, mask = compose_tryon(person, obj)
    triple = TryOnTriple(
        tryon=tryon,
        person=person,
        mask=mask,
        class_label=class_id,
        prompt=prompt_for_class(class_id),
    )
    if paired:
        obj_img, obj_mask = render_object_image(obj, canvas, patch_size)
        triple.object_image = obj_img
        triple.object_mask = obj_mask
    return triple


def make_dataset(cfg: DatasetConfig) -> list[dict]:
    """Write images plus a JSON manifest; returns the manifest records."""
    rng = np.random.default_rng(cfg.seed)
    classes = _sample_classes(cfg, rng)
    out = Path(cfg.out_dir)
    img_dir = out / "images"
    img_dir.mkdir(parents=True, exist_ok=True)

    records = []
    for i, cls in enumerate(classes):
        triple = generate_triple(
            rng, cls, cfg.canvas, cfg.paired,
            cfg.person_backgrounds, cfg.object_backgrounds,
            cfg.jitter, cfg.patch_size,
        )
        rid = f"{cfg.split}-{i:05d}"
        paths = {
            "tryon_path": f"images/{rid}_tryon.png",
            "person_path": f"images/{rid}_person.png",
            "mask_path": f"images/{rid}_mask.png",
        }
        imageio.save_image(out / paths["tryon_path"], triple.tryon)
        imageio.save_image(out / paths["person_path"], triple.person)
        imageio.save_mask(out / paths["mask_path"], triple.mask)
        object_path = None
        if triple.object_image is not None:
            object_path = f"images/{rid}_object.png"
            imageio.save_image(out / object_path, triple.object_image)
        records.append({
            "id": rid,
            "tryon_path": paths["tryon_path"],
            "person_path": paths["person_path"],
            "object_path": object_path,
            "mask_path": paths["mask_path"],
            "class": cls,
            "prompt": triple.prompt,
            "split": cfg.split,
        })

    with open(out / "manifest.json", "w") as f:
        json.dump(records, f, indent=1)
    return records


def load_manifest(path: str | Path) -> list[dict]:
    with open(path) as f:
        records = json.load(f)
    if not isinstance(records, list):
        raise ConfigurationError(f"manifest {path} is not a list of records")
    return records


def load_triple(record: dict, root: str | Path) -> TryOnTriple:
    root = Path(root)
    obj = record.get("object_path")
    return TryOnTriple(
        tryon=imageio.load_image(root / record["tryon_path"]),
        person=imageio.load_image(root / record["person_path"]),
        mask=imageio.load_mask(root / record["mask_path"]),
        class_label=record["class"],
        prompt=record["prompt"],
        object_image=imageio.load_image(root / obj) if obj else None,
    )
