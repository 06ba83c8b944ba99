"""Tiny pixel-space diffusion transformer for mask-free try-on.

Per-pixel input is the inpainting-style stack [X ; I_c * (1 - M) ; M]; with an
all-zero mask the model sees [X ; I_c ; 0] and its pretrained behavior is to
copy the condition. Sequences concatenate try-on image / try-on text / object
image / object text segments in that order; object tokens get their rotary
column coordinates shifted past the try-on width, and a 4x4 block mask keeps
generated try-on content from flowing into the object tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint, synth
from .adapters import ROUTES, RoutedLoraLinear, insertion_plan

SOURCE_TRYON_IMAGE = "tryon_image"
SOURCE_TRYON_TEXT = "tryon_text"
SOURCE_OBJECT_IMAGE = "object_image"
SOURCE_OBJECT_TEXT = "object_text"

SEGMENT_ORDER = (SOURCE_TRYON_IMAGE, SOURCE_TRYON_TEXT,
                 SOURCE_OBJECT_IMAGE, SOURCE_OBJECT_TEXT)
SOURCE_TO_BLOCK = {s: i for i, s in enumerate(SEGMENT_ORDER)}
SOURCE_TO_ROUTE = {
    SOURCE_TRYON_IMAGE: 0,
    SOURCE_TRYON_TEXT: 0,
    SOURCE_OBJECT_IMAGE: 1,
    SOURCE_OBJECT_TEXT: 1,
}

# rows = query segment, cols = key segment over (I1, T1, I2, T2)
BLOCK_ATTENTION = np.array(
    [[1, 1, 1, 0],
     [1, 1, 0, 0],
     [0, 0, 1, 1],
     [0, 0, 1, 1]], dtype=bool)


class CapacityError(ValueError):
    """Assembled sequence exceeds max_tokens."""


class AttentionContractError(RuntimeError):
    """A valid query row has no attendable keys."""


class NumericError(RuntimeError):
    """Non-finite activations inside the model."""

    def __init__(self, layer: str):
        self.layer = layer
        super().__init__(f"non-finite activations at {layer}")


@dataclass
class ModelConfig:
    embed_dim: int = 128
    num_heads: int = 4
    depth: int = 6
    patch_size: int = 4
    image_channels: int = 3
    text_vocab: int = len(synth.CLASSES) + 1  # class templates + null
    max_tokens: int = 1024
    lora_rank: int = 16
    lora_alpha: float = 16.0
    rope_base: float = 10000.0
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.embed_dim % (2 * self.num_heads) != 0:
            raise ValueError("embed_dim must be divisible by 2 * num_heads "
                             "(rotary pairing)")
        if self.text_vocab < 1:
            raise ValueError("text_vocab must be >= 1")

    @property
    def channels_in(self) -> int:
        # concat(X ; I_c (1 - M) ; M) per pixel
        return 2 * self.image_channels + 1

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels_in

    @property
    def velocity_dim(self) -> int:
        return self.patch_size * self.patch_size * self.image_channels


class PromptVocab:
    """Fixed class-template prompts plus a null entry (index 0) for
    classifier-free prompt dropout."""

    NULL_ID = 0

    def __init__(self, classes=synth.CLASSES):
        self.templates = [synth.prompt_for_class(c) for c in classes]
        self._ids = {p: i + 1 for i, p in enumerate(self.templates)}

    @property
    def size(self) -> int:
        return len(self.templates) + 1

    def id_of(self, prompt: str) -> int:
        if prompt not in self._ids:
            raise KeyError(f"unknown prompt {prompt!r}")
        return self._ids[prompt]


@dataclass
class Segment:
    source: str
    length: int

    def __post_init__(self):
        if self.source not in SEGMENT_ORDER:
            raise ValueError(f"unknown segment source {self.source!r}")


@dataclass
class TokenSequence:
    """Batched embedded token sequence with per-token metadata.

    Segment layout is shared across the batch (padded lengths); per-sample
    differences live in the validity mask.
    """

    segments: tuple[Segment, ...]
    tokens: torch.Tensor  # (B, L, D)
    rope_coords: torch.Tensor  # (B, L, 2) long
    valid: torch.Tensor  # (B, L) bool
    route: torch.Tensor  # (B, L) long in {0, 1}
    grids: list[dict[str, tuple[int, int]]] = field(default_factory=list)

    def __post_init__(self):
        total = sum(s.length for s in self.segments)
        if total != self.tokens.shape[1]:
            raise ValueError(f"segment lengths {total} != token length "
                             f"{self.tokens.shape[1]}")

    def segment_slices(self) -> list[tuple[Segment, slice]]:
        out, offset = [], 0
        for seg in self.segments:
            out.append((seg, slice(offset, offset + seg.length)))
            offset += seg.length
        return out

    def slice_of(self, source: str) -> slice:
        for seg, sl in self.segment_slices():
            if seg.source == source:
                return sl
        raise KeyError(f"no segment with source {source!r}")

    def block_index(self) -> torch.Tensor:
        idx = torch.empty(self.tokens.shape[1], dtype=torch.long)
        for seg, sl in self.segment_slices():
            idx[sl] = SOURCE_TO_BLOCK[seg.source]
        return idx


# ---------------------------------------------------------------------------
# Pixel <-> patch reshaping (projection-free)
# ---------------------------------------------------------------------------


def pixels_to_patches(img: torch.Tensor, patch: int) -> torch.Tensor:
    """(B, H, W, C) -> (B, H/p * W/p, p*p*C), non-overlapping row-major."""
    b, h, w, c = img.shape
    if h % patch or w % patch:
        raise ValueError(f"spatial dims {(h, w)} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = img.reshape(b, gh, patch, gw, patch, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, gh * gw, patch * patch * c)


def patches_to_pixels(tokens: torch.Tensor, grid: tuple[int, int], patch: int,
                      channels: int) -> torch.Tensor:
    """Inverse of pixels_to_patches for a known patch grid."""
    b, l, d = tokens.shape
    gh, gw = grid
    if l != gh * gw or d != patch * patch * channels:
        raise ValueError("token layout inconsistent with grid")
    x = tokens.reshape(b, gh, gw, patch, patch, channels)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, gh * patch, gw * patch, channels)


def patch_grid_coords(grid: tuple[int, int]) -> torch.Tensor:
    gh, gw = grid
    rows = torch.arange(gh).repeat_interleave(gw)
    cols = torch.arange(gw).repeat(gh)
    return torch.stack([rows, cols], dim=-1)  # (gh*gw, 2)


def build_inpaint_input(noisy, cond_image: torch.Tensor,
                        mask: torch.Tensor | None) -> torch.Tensor:
    """Channel stack [X ; I_c * (1 - M) ; M]; mask=None means the all-zero
    mask of the repurposed, mask-free configuration."""
    x = noisy.x_t if hasattr(noisy, "x_t") else noisy
    if x.shape[:3] != cond_image.shape[:3]:
        raise ValueError(f"noisy {tuple(x.shape)} vs condition "
                         f"{tuple(cond_image.shape)} spatial mismatch")
    if mask is None:
        m = torch.zeros(x.shape[:3] + (1,), dtype=x.dtype, device=x.device)
    else:
        m = mask if mask.dim() == 4 else mask.unsqueeze(-1)
        m = m.to(x.dtype)
        if m.shape[:3] != x.shape[:3]:
            raise ValueError("mask spatial size mismatch")
    return torch.cat([x, cond_image * (1.0 - m), m], dim=-1)


# ---------------------------------------------------------------------------
# Rotary position embedding (two axes: patch row, patch col)
# ---------------------------------------------------------------------------


def rope_tables(coords: torch.Tensor, head_dim: int, base: float
                ) -> tuple[torch.Tensor, torch.Tensor]:
    """cos/sin tables of shape (B, L, head_dim/2) from integer (row, col)."""
    pairs = head_dim // 2
    p_row = (pairs + 1) // 2
    p_col = pairs - p_row
    freq_row = base ** (-torch.arange(p_row, dtype=torch.float32) / max(p_row, 1))
    freq_col = base ** (-torch.arange(p_col, dtype=torch.float32) / max(p_col, 1))
    row = coords[..., 0].float().unsqueeze(-1) * freq_row
    col = coords[..., 1].float().unsqueeze(-1) * freq_col
    angles = torch.cat([row, col], dim=-1)
    return angles.cos(), angles.sin()


def apply_rope(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate (B, H, L, hd) by per-token angles; split-half pair layout."""
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    c = cos.unsqueeze(1)
    s = sin.unsqueeze(1)
    return torch.cat([x1 * c - x2 * s, x1 * s + x2 * c], dim=-1)


# ---------------------------------------------------------------------------
# Modules
# ---------------------------------------------------------------------------


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0
                       ) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period)
                      * torch.arange(half, dtype=torch.float32) / half)
    args = t.float().reshape(-1, 1) * 1000.0 * freqs
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class MaskedAttention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, r, a = cfg.embed_dim, cfg.lora_rank, cfg.lora_alpha
        self.num_heads = cfg.num_heads
        self.head_dim = cfg.head_dim
        self.q = RoutedLoraLinear(d, d, r, a)
        self.k = RoutedLoraLinear(d, d, r, a)
        self.v = RoutedLoraLinear(d, d, r, a)
        self.out = RoutedLoraLinear(d, d, r, a)

    def forward(self, x, cos, sin, allow, route_onehot, return_weights=False):
        b, l, d = x.shape
        h, hd = self.num_heads, self.head_dim

        def heads(t):
            return t.view(b, l, h, hd).transpose(1, 2)

        q = apply_rope(heads(self.q(x, route_onehot)), cos, sin)
        k = apply_rope(heads(self.k(x, route_onehot)), cos, sin)
        v = heads(self.v(x, route_onehot))
        logits = (q @ k.transpose(-2, -1)) * hd ** -0.5
        logits = logits.masked_fill(~allow, float("-inf"))
        weights = logits.softmax(dim=-1)
        o = (weights @ v).transpose(1, 2).reshape(b, l, d)
        o = self.out(o, route_onehot)
        if return_weights:
            return o, weights
        return o


class FeedForward(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, r, a = cfg.embed_dim, cfg.lora_rank, cfg.lora_alpha
        hidden = int(d * cfg.mlp_ratio)
        self.fc1 = RoutedLoraLinear(d, hidden, r, a)
        self.fc2 = RoutedLoraLinear(hidden, d, r, a)

    def forward(self, x, route_onehot):
        return self.fc2(F.gelu(self.fc1(x, route_onehot)), route_onehot)


class TransformerBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, r, a = cfg.embed_dim, cfg.lora_rank, cfg.lora_alpha
        self.norm1 = nn.LayerNorm(d, elementwise_affine=False)
        self.norm2 = nn.LayerNorm(d, elementwise_affine=False)
        # adaLN-zero: modulation projections start at zero so each block is
        # the identity at initialization
        self.mod_attn = RoutedLoraLinear(d, 3 * d, r, a, zero_init_base=True)
        self.mod_mlp = RoutedLoraLinear(d, 3 * d, r, a, zero_init_base=True)
        self.attn = MaskedAttention(cfg)
        self.ffn = FeedForward(cfg)

    def forward(self, x, temb, cos, sin, allow, route_onehot):
        shift, scale, gate = self.mod_attn(temb, route_onehot).chunk(3, dim=-1)
        h = self.norm1(x) * (1.0 + scale) + shift
        x = x + gate * self.attn(h, cos, sin, allow, route_onehot)
        shift, scale, gate = self.mod_mlp(temb, route_onehot).chunk(3, dim=-1)
        h = self.norm2(x) * (1.0 + scale) + shift
        return x + gate * self.ffn(h, route_onehot)


class TryOnModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d, r, a = config.embed_dim, config.lora_rank, config.lora_alpha
        self.patch_in = RoutedLoraLinear(config.patch_dim, d, r, a)
        self.text_embed = nn.Embedding(config.text_vocab, d)
        self.t_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList(TransformerBlock(config)
                                    for _ in range(config.depth))
        # the final modulation acts on the raw residual stream: velocity
        # magnitude is t- and token-dependent, so normalizing here would
        # discard exactly the signal the head must regress
        self.final_mod = nn.Linear(d, 2 * d)
        nn.init.zeros_(self.final_mod.weight)
        nn.init.zeros_(self.final_mod.bias)
        # zero-init output projection: velocity prediction starts at zero
        self.head = RoutedLoraLinear(d, config.velocity_dim, r, a,
                                     zero_init_base=True)

    # -- layer registry ----------------------------------------------------

    def adapted_layers(self) -> dict[str, RoutedLoraLinear]:
        out = {"patch_in": self.patch_in}
        for i, blk in enumerate(self.blocks):
            out[f"blocks.{i}.attn.q"] = blk.attn.q
            out[f"blocks.{i}.attn.k"] = blk.attn.k
            out[f"blocks.{i}.attn.v"] = blk.attn.v
            out[f"blocks.{i}.attn.out"] = blk.attn.out
            out[f"blocks.{i}.ffn.fc1"] = blk.ffn.fc1
            out[f"blocks.{i}.ffn.fc2"] = blk.ffn.fc2
            out[f"blocks.{i}.mod_attn"] = blk.mod_attn
            out[f"blocks.{i}.mod_mlp"] = blk.mod_mlp
        out["head"] = self.head
        assert tuple(out) == insertion_plan(self.config)
        return out

    def base_parameters(self) -> list[nn.Parameter]:
        return [p for n, p in self.named_parameters()
                if "lora_A" not in n and "lora_B" not in n]

    # -- embedding and assembly --------------------------------------------

    def patchify(self, channel_stack: torch.Tensor, route: int
                 ) -> tuple[torch.Tensor, torch.Tensor]:
        """Project per-pixel channel stacks to embedded patch tokens.

        Returns (tokens (B, L, D), rope_coords (B, L, 2)).
        """
        b, h, w, c = channel_stack.shape
        if c != self.config.channels_in:
            raise ValueError(f"expected {self.config.channels_in} channels, got {c}")
        patches = pixels_to_patches(channel_stack, self.config.patch_size)
        tokens = self.embed_patches(patches, route)
        grid = (h // self.config.patch_size, w // self.config.patch_size)
        coords = patch_grid_coords(grid).unsqueeze(0).expand(b, -1, -1)
        return tokens, coords

    def embed_patches(self, patches: torch.Tensor, route: int) -> torch.Tensor:
        """Project raw (B, L, patch_dim) stacks through the routed patch
        projection (padding rows included; they are masked downstream)."""
        onehot = torch.zeros(patches.shape[0], patches.shape[1], len(ROUTES))
        onehot[..., route] = 1.0
        return self.patch_in(patches, onehot)

    def embed_prompt(self, prompt_ids: torch.Tensor) -> torch.Tensor:
        return self.text_embed(prompt_ids.long()).unsqueeze(1)  # (B, 1, D)

    def assemble_sequence(
        self,
        tryon_tokens: torch.Tensor,
        tryon_coords: torch.Tensor,
        tryon_grid: tuple[int, int],
        tryon_prompt_tokens: torch.Tensor,
        object_tokens: torch.Tensor | None = None,
        object_coords: torch.Tensor | None = None,
        object_grid: tuple[int, int] | None = None,
        object_prompt_tokens: torch.Tensor | None = None,
        valid_image: torch.Tensor | None = None,
        valid_object: torch.Tensor | None = None,
    ) -> TokenSequence:
        """Concatenate segments in I1, T1[, I2, T2] order; object rope columns
        are shifted past the try-on patch width."""
        b, l1, d = tryon_tokens.shape
        parts = [tryon_tokens, tryon_prompt_tokens]
        segs = [Segment(SOURCE_TRYON_IMAGE, l1), Segment(SOURCE_TRYON_TEXT, 1)]
        text_coords = torch.zeros(b, 1, 2, dtype=torch.long)
        coords = [tryon_coords.long(), text_coords]
        valids = [
            valid_image if valid_image is not None
            else torch.ones(b, l1, dtype=torch.bool),
            torch.ones(b, 1, dtype=torch.bool),
        ]
        grids = {SOURCE_TRYON_IMAGE: tryon_grid}
        if object_tokens is not None:
            if object_prompt_tokens is None or object_coords is None \
                    or object_grid is None:
                raise ValueError("object segments need tokens, coords, grid, prompt")
            l2 = object_tokens.shape[1]
            shifted = object_coords.long().clone()
            shifted[..., 1] = shifted[..., 1] + tryon_grid[1]
            parts.extend([object_tokens, object_prompt_tokens])
            segs.extend([Segment(SOURCE_OBJECT_IMAGE, l2),
                         Segment(SOURCE_OBJECT_TEXT, 1)])
            coords.extend([shifted, text_coords])
            valids.extend([
                valid_object if valid_object is not None
                else torch.ones(b, l2, dtype=torch.bool),
                torch.ones(b, 1, dtype=torch.bool),
            ])
            grids[SOURCE_OBJECT_IMAGE] = object_grid
        total = sum(s.length for s in segs)
        if total > self.config.max_tokens:
            raise CapacityError(f"sequence length {total} exceeds "
                                f"max_tokens {self.config.max_tokens}")
        route = torch.empty(total, dtype=torch.long)
        offset = 0
        for seg in segs:
            route[offset:offset + seg.length] = SOURCE_TO_ROUTE[seg.source]
            offset += seg.length
        return TokenSequence(
            segments=tuple(segs),
            tokens=torch.cat(parts, dim=1),
            rope_coords=torch.cat(coords, dim=1),
            valid=torch.cat(valids, dim=1),
            route=route.unsqueeze(0).expand(b, -1).clone(),
            grids=[dict(grids) for _ in range(b)],
        )

    # -- attention mask -----------------------------------------------------

    def attention_mask(self, seq: TokenSequence, attention: str = "block"
                       ) -> torch.Tensor:
        """(B, 1, L, L) boolean allow mask: block pattern composed with key
        validity; padding queries self-attend so softmax stays finite."""
        if attention not in ("block", "full"):
            raise ValueError(f"unknown attention mode {attention!r}")
        l = seq.tokens.shape[1]
        bi = seq.block_index()
        if attention == "full":
            pattern = torch.ones(l, l, dtype=torch.bool)
        else:
            blk = torch.from_numpy(BLOCK_ATTENTION)
            pattern = blk[bi.unsqueeze(1), bi.unsqueeze(0)]
        allow = pattern.unsqueeze(0) & seq.valid.unsqueeze(1)
        starved = (~allow.any(dim=-1)) & seq.valid
        if bool(starved.any()):
            raise AttentionContractError("valid query with all keys masked")
        idx = torch.arange(l)
        pad_q = ~seq.valid
        allow[:, idx, idx] = allow[:, idx, idx] | pad_q
        return allow.unsqueeze(1)

    # -- forward -------------------------------------------------------------

    def forward(
        self,
        seq: TokenSequence,
        t: torch.Tensor,
        attention: str = "block",
        one_stream: bool = False,
        use_adapters: bool = True,
    ) -> torch.Tensor:
        """Predicted velocity tokens, (B, L, patch^2 * image_channels).

        Values are meaningful at image-token positions; text positions carry
        the head's output but are never trained or decoded.
        """
        if use_adapters:
            route = torch.zeros_like(seq.route) if one_stream else seq.route
            route_onehot = F.one_hot(route, len(ROUTES)).to(seq.tokens.dtype)
        else:
            route_onehot = None
        temb = self.t_mlp(timestep_embedding(t, self.config.embed_dim)).unsqueeze(1)
        cos, sin = rope_tables(seq.rope_coords, self.config.head_dim,
                               self.config.rope_base)
        allow = self.attention_mask(seq, attention)
        x = seq.tokens
        for i, blk in enumerate(self.blocks):
            x = blk(x, temb, cos, sin, allow, route_onehot)
            if not torch.isfinite(x).all():
                raise NumericError(f"blocks.{i}")
        shift, scale = self.final_mod(temb).chunk(2, dim=-1)
        h = x * (1.0 + scale) + shift
        v = self.head(h, route_onehot)
        if not torch.isfinite(v).all():
            raise NumericError("head")
        return v


# ---------------------------------------------------------------------------
# Checkpoint I/O
# ---------------------------------------------------------------------------


def save_model(path, model: TryOnModel) -> None:
    arrays = {k: v.detach().numpy() for k, v in model.state_dict().items()}
    checkpoint.save_arrays(path, arrays,
                           {"kind": "model", "config": asdict(model.config)})


def load_model(path) -> TryOnModel:
    arrays, meta = checkpoint.load_arrays(path, expected_kind="model")
    model = TryOnModel(ModelConfig(**meta["config"]))
    state = {k: torch.from_numpy(v.copy()) for k, v in arrays.items()}
    model.load_state_dict(state, strict=True)
    return model
