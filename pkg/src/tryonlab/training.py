"""Training loops: base "copier" pretraining on generic inpainting, stage 1
(mask-free localization on unpaired data, location adapter only), and stage 2
(object identity preservation on paired data, both adapters plus the
object-copy loss).

The base model stands in for a pretrained inpainting backbone: it is trained
with real masks so that a zero mask makes it copy its condition, which is the
behavior stages 1 and 2 build on with low-rank adapters only.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import flow
from .adapters import AdapterSet, save_adapters
from .model import (
    SOURCE_OBJECT_IMAGE,
    SOURCE_OBJECT_TEXT,
    SOURCE_TRYON_IMAGE,
    SOURCE_TRYON_TEXT,
    SOURCE_TO_ROUTE,
    PromptVocab,
    Segment,
    TokenSequence,
    TryOnModel,
    build_inpaint_input,
    patch_grid_coords,
    patches_to_pixels,
    pixels_to_patches,
    save_model,
)

STAGES = ("pretrain", "stage1", "stage2")


@dataclass
class TrainConfig:
    stage: str
    steps: int = 1000
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    grad_clip: float = 1.0
    seed: int = 0
    object_loss_weight: float = 1.0
    prompt_dropout: float = 0.1
    mix_ratio: tuple[int, int] = (2, 1)  # stage-1 unpaired : paired-sans-object
    init_tag: str | None = None  # stage 2 only: "scratch" or "stage1-init"
    freeze_location: bool = False
    attention: str = "block"
    one_stream: bool = False
    few_shot: int | None = None
    class_weights: dict[str, float] | None = None
    log_every: int = 50
    probe_every: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")
        if self.stage == "stage2" and not self.init_tag:
            raise ValueError('stage 2 requires an adapter init tag '
                             '("scratch" or "stage1-init")')


# ---------------------------------------------------------------------------
# Samples and batches
# ---------------------------------------------------------------------------


@dataclass
class Stage1Sample:
    target: torch.Tensor  # (H, W, 3) training target image
    condition: torch.Tensor  # (H, W, 3) erased/repainted person
    prompt_id: int
    class_label: str = ""
    sample_id: str = ""


@dataclass
class Stage2Sample(Stage1Sample):
    object_image: torch.Tensor | None = None  # (H, W, 3)


@dataclass
class PretrainSample:
    image: torch.Tensor  # (H, W, 3) composed try-on image
    mask: torch.Tensor  # (H, W) bool glyph mask
    prompt_id: int
    sample_id: str = ""


@dataclass
class SequenceSample:
    """Raw per-sample sequence pieces; object rope columns already shifted."""

    tryon_patches: torch.Tensor  # (L1, patch_dim)
    tryon_coords: torch.Tensor  # (L1, 2)
    tryon_grid: tuple[int, int]
    prompt_id: int
    target_tryon: torch.Tensor  # (L1, velocity_dim)
    object_patches: torch.Tensor | None = None
    object_coords: torch.Tensor | None = None
    object_grid: tuple[int, int] | None = None
    object_prompt_id: int | None = None
    target_object: torch.Tensor | None = None
    sample_id: str = ""

    @property
    def total_tokens(self) -> int:
        n = self.tryon_patches.shape[0] + 1
        if self.object_patches is not None:
            n += self.object_patches.shape[0] + 1
        return n


@dataclass
class Batch:
    """Padded batch: raw patch stacks per segment, targets aligned to them,
    validity masks, rope coords, and the shared timestep draw."""

    t: torch.Tensor  # (B,)
    prompt_ids: torch.Tensor  # (B,)
    tryon_patches: torch.Tensor  # (B, L1, patch_dim)
    tryon_coords: torch.Tensor  # (B, L1, 2)
    tryon_valid: torch.Tensor  # (B, L1)
    target_tryon: torch.Tensor  # (B, L1, velocity_dim)
    grids: list[dict[str, tuple[int, int]]]
    ids: list[str]
    object_prompt_ids: torch.Tensor | None = None
    object_patches: torch.Tensor | None = None
    object_coords: torch.Tensor | None = None
    object_valid: torch.Tensor | None = None
    target_object: torch.Tensor | None = None

    @property
    def has_object(self) -> bool:
        return self.object_patches is not None


def _pad_stack(items: list[torch.Tensor], length: int) -> torch.Tensor:
    out = torch.zeros(len(items), length, *items[0].shape[1:], dtype=items[0].dtype)
    for i, it in enumerate(items):
        out[i, : it.shape[0]] = it
    return out


def _valid_mask(lengths: list[int], length: int) -> torch.Tensor:
    out = torch.zeros(len(lengths), length, dtype=torch.bool)
    for i, n in enumerate(lengths):
        out[i, :n] = True
    return out


def pad_and_collate(samples: list[SequenceSample], t: torch.Tensor,
                    max_tokens: int | None = None) -> Batch:
    """Right-pad each segment to its batch maximum; rope coords are kept
    per sample and loss masks cover valid tokens only."""
    if max_tokens is not None:
        for s in samples:
            if s.total_tokens > max_tokens:
                raise ValueError(
                    f"sample {s.sample_id!r} has {s.total_tokens} tokens, "
                    f"exceeding max_tokens {max_tokens}")
    l1 = max(s.tryon_patches.shape[0] for s in samples)
    lens1 = [s.tryon_patches.shape[0] for s in samples]
    batch = Batch(
        t=t,
        prompt_ids=torch.tensor([s.prompt_id for s in samples]),
        tryon_patches=_pad_stack([s.tryon_patches for s in samples], l1),
        tryon_coords=_pad_stack([s.tryon_coords for s in samples], l1).long(),
        tryon_valid=_valid_mask(lens1, l1),
        target_tryon=_pad_stack([s.target_tryon for s in samples], l1),
        grids=[{SOURCE_TRYON_IMAGE: s.tryon_grid} for s in samples],
        ids=[s.sample_id for s in samples],
    )
    with_object = [s.object_patches is not None for s in samples]
    if any(with_object):
        if not all(with_object):
            raise ValueError("cannot mix paired and unpaired samples in one batch")
        l2 = max(s.object_patches.shape[0] for s in samples)
        lens2 = [s.object_patches.shape[0] for s in samples]
        batch.object_patches = _pad_stack([s.object_patches for s in samples], l2)
        batch.object_coords = _pad_stack([s.object_coords for s in samples], l2).long()
        batch.object_valid = _valid_mask(lens2, l2)
        batch.target_object = _pad_stack([s.target_object for s in samples], l2)
        batch.object_prompt_ids = torch.tensor(
            [s.object_prompt_id for s in samples])
        for i, s in enumerate(samples):
            batch.grids[i][SOURCE_OBJECT_IMAGE] = s.object_grid
    return batch


def batch_to_sequence(model: TryOnModel, batch: Batch) -> TokenSequence:
    """Embed a collated batch into the model's token sequence."""
    tok1 = model.embed_patches(batch.tryon_patches, SOURCE_TO_ROUTE[SOURCE_TRYON_IMAGE])
    pr1 = model.embed_prompt(batch.prompt_ids)
    b, l1 = tok1.shape[:2]
    segs = [Segment(SOURCE_TRYON_IMAGE, l1), Segment(SOURCE_TRYON_TEXT, 1)]
    parts = [tok1, pr1]
    coords = [batch.tryon_coords, torch.zeros(b, 1, 2, dtype=torch.long)]
    valids = [batch.tryon_valid, torch.ones(b, 1, dtype=torch.bool)]
    if batch.has_object:
        tok2 = model.embed_patches(batch.object_patches,
                                   SOURCE_TO_ROUTE[SOURCE_OBJECT_IMAGE])
        pr2 = model.embed_prompt(batch.object_prompt_ids)
        l2 = tok2.shape[1]
        segs += [Segment(SOURCE_OBJECT_IMAGE, l2), Segment(SOURCE_OBJECT_TEXT, 1)]
        parts += [tok2, pr2]
        coords += [batch.object_coords, torch.zeros(b, 1, 2, dtype=torch.long)]
        valids += [batch.object_valid, torch.ones(b, 1, dtype=torch.bool)]
    total = sum(s.length for s in segs)
    route = torch.empty(total, dtype=torch.long)
    off = 0
    for seg in segs:
        route[off:off + seg.length] = SOURCE_TO_ROUTE[seg.source]
        off += seg.length
    return TokenSequence(
        segments=tuple(segs),
        tokens=torch.cat(parts, dim=1),
        rope_coords=torch.cat(coords, dim=1),
        valid=torch.cat(valids, dim=1),
        route=route.unsqueeze(0).expand(b, -1).clone(),
        grids=batch.grids,
    )


# ---------------------------------------------------------------------------
# Batch construction (noising happens here)
# ---------------------------------------------------------------------------


def _image_sample(model_cfg, target_img, cond_img, mask, t, gen, prompt_id,
                  sample_id):
    p = model_cfg.patch_size
    h, w = target_img.shape[:2]
    eps = torch.randn(target_img.shape, generator=gen)
    x_t = flow.forward_noise(target_img, float(t), eps).x_t
    stack = build_inpaint_input(x_t.unsqueeze(0), cond_img.unsqueeze(0),
                                None if mask is None else mask.unsqueeze(0))
    patches = pixels_to_patches(stack, p)[0]
    target_v = pixels_to_patches(
        flow.velocity_target(target_img, eps).unsqueeze(0), p)[0]
    grid = (h // p, w // p)
    return patches, patch_grid_coords(grid), grid, target_v


def _uniform_image_batch(model_cfg, targets, conds, masks, t, gen):
    """Vectorized path when every sample shares one canvas size.

    Returns (patches (B,L,P), coords (B,L,2), grid, target_v (B,L,F)).
    """
    p = model_cfg.patch_size
    target = torch.stack(targets)
    cond = torch.stack(conds)
    b, h, w, _ = target.shape
    eps = torch.randn(target.shape, generator=gen)
    tt = t.reshape(-1, 1, 1, 1)
    x_t = flow.forward_noise(target, tt, eps).x_t
    mask = None if masks is None else torch.stack(masks)
    patches = pixels_to_patches(build_inpaint_input(x_t, cond, mask), p)
    target_v = pixels_to_patches(flow.velocity_target(target, eps), p)
    grid = (h // p, w // p)
    coords = patch_grid_coords(grid).unsqueeze(0).expand(b, -1, -1).long()
    return patches, coords, grid, target_v


def _maybe_drop_prompt(prompt_id: int, rng: np.random.Generator, p_drop: float) -> int:
    if p_drop > 0 and rng.random() < p_drop:
        return PromptVocab.NULL_ID
    return prompt_id


def _uniform_sizes(samples) -> bool:
    shapes = {tuple(s.target.shape) for s in samples}
    return len(shapes) == 1


def _check_capacity(total_tokens: int, max_tokens: int | None, ids) -> None:
    if max_tokens is not None and total_tokens > max_tokens:
        raise ValueError(f"sample {ids[0]!r} has {total_tokens} tokens, "
                         f"exceeding max_tokens {max_tokens}")


def make_stage1_batch(samples: list[Stage1Sample], model_cfg, cfg: TrainConfig,
                      rng: np.random.Generator, gen: torch.Generator) -> Batch:
    t = torch.tensor(rng.uniform(0.0, 1.0, len(samples)), dtype=torch.float32)
    prompt_ids = torch.tensor([_maybe_drop_prompt(s.prompt_id, rng,
                                                  cfg.prompt_dropout)
                               for s in samples])
    if _uniform_sizes(samples):
        patches, coords, grid, tv = _uniform_image_batch(
            model_cfg, [s.target for s in samples],
            [s.condition for s in samples], None, t, gen)
        b, l = patches.shape[:2]
        _check_capacity(l + 1, model_cfg.max_tokens,
                        [s.sample_id for s in samples])
        return Batch(
            t=t, prompt_ids=prompt_ids, tryon_patches=patches,
            tryon_coords=coords, tryon_valid=torch.ones(b, l, dtype=torch.bool),
            target_tryon=tv,
            grids=[{SOURCE_TRYON_IMAGE: grid} for _ in samples],
            ids=[s.sample_id for s in samples])
    seq_samples = []
    for i, s in enumerate(samples):
        patches, coords, grid, tv = _image_sample(
            model_cfg, s.target, s.condition, None, t[i], gen,
            s.prompt_id, s.sample_id)
        seq_samples.append(SequenceSample(
            tryon_patches=patches, tryon_coords=coords, tryon_grid=grid,
            prompt_id=int(prompt_ids[i]),
            target_tryon=tv, sample_id=s.sample_id))
    return pad_and_collate(seq_samples, t, model_cfg.max_tokens)


def make_stage2_batch(samples: list[Stage2Sample], model_cfg, cfg: TrainConfig,
                      rng: np.random.Generator, gen: torch.Generator) -> Batch:
    t = torch.tensor(rng.uniform(0.0, 1.0, len(samples)), dtype=torch.float32)
    prompt_ids = [_maybe_drop_prompt(s.prompt_id, rng, cfg.prompt_dropout)
                  for s in samples]
    uniform = _uniform_sizes(samples) and len(
        {tuple(s.object_image.shape) for s in samples}) == 1
    if uniform:
        patches, coords, grid, tv = _uniform_image_batch(
            model_cfg, [s.target for s in samples],
            [s.condition for s in samples], None, t, gen)
        # object branch: clean object image as condition, itself as the
        # diffusion target (copy objective), same t as the try-on branch
        opatches, ocoords, ogrid, otv = _uniform_image_batch(
            model_cfg, [s.object_image for s in samples],
            [s.object_image for s in samples], None, t, gen)
        ocoords = ocoords.clone()
        ocoords[..., 1] += grid[1]  # rope width shift past the try-on image
        b, l1 = patches.shape[:2]
        l2 = opatches.shape[1]
        _check_capacity(l1 + l2 + 2, model_cfg.max_tokens,
                        [s.sample_id for s in samples])
        return Batch(
            t=t, prompt_ids=torch.tensor(prompt_ids), tryon_patches=patches,
            tryon_coords=coords, tryon_valid=torch.ones(b, l1, dtype=torch.bool),
            target_tryon=tv,
            grids=[{SOURCE_TRYON_IMAGE: grid, SOURCE_OBJECT_IMAGE: ogrid}
                   for _ in samples],
            ids=[s.sample_id for s in samples],
            object_prompt_ids=torch.tensor(prompt_ids),
            object_patches=opatches, object_coords=ocoords,
            object_valid=torch.ones(b, l2, dtype=torch.bool),
            target_object=otv)
    seq_samples = []
    for i, s in enumerate(samples):
        patches, coords, grid, tv = _image_sample(
            model_cfg, s.target, s.condition, None, t[i], gen,
            s.prompt_id, s.sample_id)
        opatches, ocoords, ogrid, otv = _image_sample(
            model_cfg, s.object_image, s.object_image, None, t[i], gen,
            s.prompt_id, s.sample_id)
        ocoords = ocoords.clone()
        ocoords[:, 1] += grid[1]
        seq_samples.append(SequenceSample(
            tryon_patches=patches, tryon_coords=coords, tryon_grid=grid,
            prompt_id=prompt_ids[i], target_tryon=tv,
            object_patches=opatches, object_coords=ocoords, object_grid=ogrid,
            object_prompt_id=prompt_ids[i], target_object=otv,
            sample_id=s.sample_id))
    return pad_and_collate(seq_samples, t, model_cfg.max_tokens)


def _pretrain_mask(shape, glyph_mask, rng: np.random.Generator) -> torch.Tensor | None:
    """Mask menu for base pretraining: glyph mask, random rectangle, zero, or
    full-ones. Zero-mask batches teach the copy behavior the mask-free stages
    rely on."""
    h, w = shape
    u = rng.random()
    if u < 0.3:
        return glyph_mask
    if u < 0.7:
        m = torch.zeros(h, w)
        mh = int(rng.integers(h // 8, h // 2))
        mw = int(rng.integers(w // 8, w // 2))
        r0 = int(rng.integers(0, h - mh))
        c0 = int(rng.integers(0, w - mw))
        m[r0:r0 + mh, c0:c0 + mw] = 1.0
        return m
    if u < 0.9:
        return None  # all-zero mask
    return torch.ones(h, w)


def make_pretrain_batch(samples: list[PretrainSample], model_cfg, cfg: TrainConfig,
                        rng: np.random.Generator, gen: torch.Generator) -> Batch:
    t = torch.tensor(rng.uniform(0.0, 1.0, len(samples)), dtype=torch.float32)
    prompt_ids = torch.tensor([_maybe_drop_prompt(s.prompt_id, rng,
                                                  cfg.prompt_dropout)
                               for s in samples])
    masks = []
    for s in samples:
        m = _pretrain_mask(s.image.shape[:2], s.mask.float(), rng)
        masks.append(torch.zeros(s.image.shape[:2]) if m is None else m)
    if _uniform_sizes_pretrain(samples):
        patches, coords, grid, tv = _uniform_image_batch(
            model_cfg, [s.image for s in samples],
            [s.image for s in samples], masks, t, gen)
        b, l = patches.shape[:2]
        _check_capacity(l + 1, model_cfg.max_tokens,
                        [s.sample_id for s in samples])
        return Batch(
            t=t, prompt_ids=prompt_ids, tryon_patches=patches,
            tryon_coords=coords, tryon_valid=torch.ones(b, l, dtype=torch.bool),
            target_tryon=tv,
            grids=[{SOURCE_TRYON_IMAGE: grid} for _ in samples],
            ids=[s.sample_id for s in samples])
    seq_samples = []
    for i, s in enumerate(samples):
        patches, coords, grid, tv = _image_sample(
            model_cfg, s.image, s.image, masks[i], t[i], gen, s.prompt_id,
            s.sample_id)
        seq_samples.append(SequenceSample(
            tryon_patches=patches, tryon_coords=coords, tryon_grid=grid,
            prompt_id=int(prompt_ids[i]),
            target_tryon=tv, sample_id=s.sample_id))
    return pad_and_collate(seq_samples, t, model_cfg.max_tokens)


def _uniform_sizes_pretrain(samples) -> bool:
    return len({tuple(s.image.shape) for s in samples}) == 1


# ---------------------------------------------------------------------------
# Steps
# ---------------------------------------------------------------------------


def _forward_losses(batch: Batch, model: TryOnModel, cfg: TrainConfig):
    seq = batch_to_sequence(model, batch)
    use_adapters = cfg.stage != "pretrain"
    v = model(seq, batch.t, attention=cfg.attention,
              one_stream=cfg.one_stream, use_adapters=use_adapters)
    sl1 = seq.slice_of(SOURCE_TRYON_IMAGE)
    loss1 = flow.fm_loss(v[:, sl1], batch.target_tryon, batch.tryon_valid)
    loss2 = None
    if batch.has_object:
        sl2 = seq.slice_of(SOURCE_OBJECT_IMAGE)
        loss2 = flow.fm_loss(v[:, sl2], batch.target_object, batch.object_valid)
    return loss1, loss2


def stage1_step(batch: Batch, model: TryOnModel, adapters: AdapterSet,
                cfg: TrainConfig) -> torch.Tensor:
    """Flow-matching loss on try-on tokens; gradients reach the location
    adapter only (the batch carries no object segments)."""
    loss1, _ = _forward_losses(batch, model, cfg)
    loss1.backward()
    return loss1.detach()


def stage2_step(batch: Batch, model: TryOnModel, adapters: AdapterSet,
                cfg: TrainConfig) -> torch.Tensor:
    """Try-on loss plus the weighted object self-supervision (copy) loss."""
    loss1, loss2 = _forward_losses(batch, model, cfg)
    total = loss1 + cfg.object_loss_weight * loss2
    total.backward()
    return total.detach()


def pretrain_step(batch: Batch, model: TryOnModel, cfg: TrainConfig) -> torch.Tensor:
    loss1, _ = _forward_losses(batch, model, cfg)
    loss1.backward()
    return loss1.detach()


# ---------------------------------------------------------------------------
# Samplers
# ---------------------------------------------------------------------------


class WeightedSampler:
    """Draw records with per-class weights as categorical probabilities."""

    def __init__(self, samples, class_weights: dict[str, float] | None,
                 rng: np.random.Generator):
        self.samples = samples
        self.rng = rng
        if class_weights:
            w = np.array([max(class_weights.get(s.class_label, 1.0), 0.0)
                          for s in samples])
        else:
            w = np.ones(len(samples))
        if w.sum() <= 0:
            raise ValueError("sampling weights sum to zero")
        self.probs = w / w.sum()

    def draw(self, n: int):
        idx = self.rng.choice(len(self.samples), size=n, p=self.probs)
        return [self.samples[i] for i in idx]


class CyclingSampler:
    """Deterministically cycle a small (few-shot) pool in seeded permutations."""

    def __init__(self, samples, rng: np.random.Generator):
        self.samples = list(samples)
        self.rng = rng
        self._order: list[int] = []

    def draw(self, n: int):
        out = []
        while len(out) < n:
            if not self._order:
                self._order = list(self.rng.permutation(len(self.samples)))
            out.append(self.samples[self._order.pop()])
        return out


class MixSampler:
    """Mix two pools at a fixed ratio (per-draw pool choice)."""

    def __init__(self, primary, extra, ratio: tuple[int, int],
                 rng: np.random.Generator):
        self.primary = primary
        self.extra = extra
        self.p_primary = ratio[0] / (ratio[0] + ratio[1])
        self.rng = rng

    def draw(self, n: int):
        out = []
        for _ in range(n):
            pool = self.primary if (not self.extra
                                    or self.rng.random() < self.p_primary) else self.extra
            out.append(pool.draw(1)[0])
        return out


# ---------------------------------------------------------------------------
# Run loop
# ---------------------------------------------------------------------------


@dataclass
class TrainData:
    """Stage-specific training pools.

    pretrain: ``pretrain`` list. stage1: ``stage1`` (unpaired) plus optional
    ``stage1_extra`` (paired pool stripped of objects) mixed at
    cfg.mix_ratio. stage2: ``stage2`` list.
    """

    pretrain: list[PretrainSample] = field(default_factory=list)
    stage1: list[Stage1Sample] = field(default_factory=list)
    stage1_extra: list[Stage1Sample] = field(default_factory=list)
    stage2: list[Stage2Sample] = field(default_factory=list)


@dataclass
class ProbeCase:
    condition: torch.Tensor  # (H, W, 3) person to edit
    prompt: str
    oracle_mask: np.ndarray  # (H, W) bool


@dataclass
class TrainResult:
    losses: list[float]
    log_path: str | None
    checkpoint_path: str | None
    probes: list[dict]


def trainable_parameters(model: TryOnModel, adapters: AdapterSet,
                         cfg: TrainConfig) -> list[torch.nn.Parameter]:
    if cfg.stage == "pretrain":
        return model.base_parameters()
    params = [] if cfg.freeze_location else adapters.parameters("location")
    if cfg.stage == "stage2":
        params = params + adapters.parameters("identity")
    if not params:
        raise ValueError("no trainable parameters for this configuration")
    return params


def run_training(
    model: TryOnModel,
    adapters: AdapterSet,
    cfg: TrainConfig,
    data: TrainData,
    out_dir: str | Path | None = None,
    probe_set: list[ProbeCase] | None = None,
    schedule: flow.FlowSchedule | None = None,
) -> TrainResult:
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    params = trainable_parameters(model, adapters, cfg)
    for p in model.parameters():
        p.requires_grad_(False)
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.AdamW(params, lr=cfg.lr, betas=cfg.betas,
                            weight_decay=cfg.weight_decay)

    if cfg.stage == "pretrain":
        pool = data.pretrain
        sampler = CyclingSampler(pool, rng) if cfg.few_shot else \
            WeightedSampler(pool, cfg.class_weights, rng)
    elif cfg.stage == "stage1":
        primary = WeightedSampler(data.stage1, cfg.class_weights, rng)
        extra = (WeightedSampler(data.stage1_extra, cfg.class_weights, rng)
                 if data.stage1_extra else None)
        sampler = MixSampler(primary, extra, cfg.mix_ratio, rng)
    else:
        pool = data.stage2
        if cfg.few_shot:
            sampler = CyclingSampler(pool, rng)
        else:
            sampler = WeightedSampler(pool, cfg.class_weights, rng)

    out_dir = Path(out_dir) if out_dir is not None else None
    log_f = None
    log_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.jsonl"
        log_f = open(log_path, "w")

    losses: list[float] = []
    probes: list[dict] = []
    t0 = time.time()
    try:
        for step in range(cfg.steps):
            samples = sampler.draw(cfg.batch_size)
            if cfg.stage == "pretrain":
                batch = make_pretrain_batch(samples, model.config, cfg, rng, gen)
            elif cfg.stage == "stage1":
                batch = make_stage1_batch(samples, model.config, cfg, rng, gen)
            else:
                batch = make_stage2_batch(samples, model.config, cfg, rng, gen)
            opt.zero_grad(set_to_none=True)
            if cfg.stage == "pretrain":
                loss = pretrain_step(batch, model, cfg)
            elif cfg.stage == "stage1":
                loss = stage1_step(batch, model, adapters, cfg)
            else:
                loss = stage2_step(batch, model, adapters, cfg)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"NaN loss at step {step} (batch ids {batch.ids})")
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            losses.append(float(loss))

            record = None
            if log_f and (step % cfg.log_every == 0 or step == cfg.steps - 1):
                record = {"step": step, "loss": float(loss),
                          "elapsed_s": round(time.time() - t0, 2)}
            if probe_set and cfg.probe_every and \
                    (step + 1) % cfg.probe_every == 0:
                probe = probe_localization(model, probe_set,
                                           schedule or flow.FlowSchedule())
                probe["step"] = step
                probes.append(probe)
                record = record or {"step": step, "loss": float(loss)}
                record["probe"] = {k: v for k, v in probe.items() if k != "ious"}
            if log_f and record:
                log_f.write(json.dumps(record) + "\n")
            if out_dir and cfg.checkpoint_every and \
                    (step + 1) % cfg.checkpoint_every == 0:
                _save_stage_checkpoint(model, adapters, cfg, out_dir, step + 1)
    finally:
        if log_f:
            log_f.close()

    if cfg.stage == "stage2":
        adapters.roles.add("identity")
    ckpt = _save_stage_checkpoint(model, adapters, cfg, out_dir, None) \
        if out_dir else None
    return TrainResult(losses=losses, log_path=str(log_path) if log_path else None,
                       checkpoint_path=ckpt, probes=probes)


def _save_stage_checkpoint(model, adapters, cfg, out_dir, step) -> str:
    suffix = "final" if step is None else f"step{step:06d}"
    if cfg.stage == "pretrain":
        path = Path(out_dir) / f"base_{suffix}.npz"
        save_model(path, model)
    else:
        path = Path(out_dir) / f"adapters_{cfg.stage}_{suffix}.npz"
        roles = ("location",) if cfg.stage == "stage1" else ("location", "identity")
        save_adapters(adapters, path, roles=roles)
    return str(path)


# ---------------------------------------------------------------------------
# Probes
# ---------------------------------------------------------------------------


def change_mask(result: np.ndarray, person: np.ndarray,
                threshold: float = 0.1) -> np.ndarray:
    return np.abs(result - person).max(axis=-1) > threshold


def probe_localization(model: TryOnModel, cases: list[ProbeCase],
                       schedule: flow.FlowSchedule,
                       seed: int = 0, iou_threshold: float = 0.5) -> dict:
    """Sample an edit for each probe person and score the changed-pixel mask
    against the oracle object mask."""
    from . import inference  # local import to avoid a cycle
    from . import synth

    ious = []
    for i, case in enumerate(cases):
        req = inference.TryOnRequest(
            person=case.condition.numpy(), prompt=case.prompt, seed=seed + i)
        res = inference.try_on(req, model, None, schedule=schedule)
        ious.append(synth.mask_iou(res.change_mask, case.oracle_mask))
    ious_arr = np.array(ious)
    return {
        "iou_mean": float(ious_arr.mean()),
        "iou_median": float(np.median(ious_arr)),
        "success_rate": float((ious_arr >= iou_threshold).mean()),
        "ious": [float(x) for x in ious],
    }
