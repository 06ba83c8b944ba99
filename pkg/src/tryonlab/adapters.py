"""Two-stream low-rank adapters: a location stream for try-on tokens and an
identity stream for object tokens, routed per token by its source segment.

Every adapted layer keeps its frozen base weight plus one (A, B) pair per
stream; B starts at zero so a fresh adapter leaves the base model untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from . import checkpoint

ROUTES = ("location", "identity")
ROUTE_LOCATION = 0
ROUTE_IDENTITY = 1


class AdapterLoadError(ValueError):
    """Adapter file is incompatible with the target model (no partial load)."""


@dataclass
class LowRankDelta:
    """Numpy snapshot of one adapted layer's low-rank update."""

    A: np.ndarray  # (rank, d_in)
    B: np.ndarray  # (d_out, rank)
    rank: int
    alpha: float

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def dense(self) -> np.ndarray:
        return self.scale * (self.B @ self.A)


def adapt_linear(x, base_weight, base_bias, A, B, alpha: float):
    """y = x @ W.T + b + (alpha/rank) * ((x @ A.T) @ B.T).

    Works for numpy arrays and torch tensors alike.
    """
    rank = A.shape[0]
    y = x @ base_weight.T
    if base_bias is not None:
        y = y + base_bias
    return y + (alpha / rank) * ((x @ A.T) @ B.T)


class RoutedLoraLinear(nn.Module):
    """Linear layer with one low-rank delta per token stream.

    ``route_onehot`` has shape (B, L, n_routes); the input may be per-token
    (B, L, d_in) or shared across tokens (B, 1, d_in) as with timestep
    modulation, in which case the output is still per token.
    """

    def __init__(self, d_in: int, d_out: int, rank: int, alpha: float,
                 bias: bool = True, zero_init_base: bool = False):
        super().__init__()
        self.base = nn.Linear(d_in, d_out, bias=bias)
        if zero_init_base:
            nn.init.zeros_(self.base.weight)
            if bias:
                nn.init.zeros_(self.base.bias)
        self.rank = rank
        self.alpha = alpha
        self.lora_A = nn.ParameterDict()
        self.lora_B = nn.ParameterDict()
        for route in ROUTES:
            a = torch.empty(rank, d_in)
            nn.init.kaiming_uniform_(a, a=math.sqrt(5))
            self.lora_A[route] = nn.Parameter(a)
            self.lora_B[route] = nn.Parameter(torch.zeros(d_out, rank))

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def forward(self, x: torch.Tensor, route_onehot: torch.Tensor | None) -> torch.Tensor:
        y = self.base(x)
        if route_onehot is None:
            return y
        for i, route in enumerate(ROUTES):
            gate = route_onehot[..., i : i + 1]
            if not bool((gate > 0).any()):
                continue  # stream absent from this batch: skip its graph
            delta = (x @ self.lora_A[route].T) @ self.lora_B[route].T
            if bool((gate == 1).all()):
                y = y + self.scale * delta
            else:
                y = y + self.scale * delta * gate
        return y

    def reinit_route_(self, route: str, generator: torch.Generator | None = None):
        a = torch.empty_like(self.lora_A[route])
        if generator is None:
            nn.init.kaiming_uniform_(a, a=math.sqrt(5))
        else:
            bound = 1.0 / math.sqrt(a.shape[1])
            a.uniform_(-bound, bound, generator=generator)
        with torch.no_grad():
            self.lora_A[route].copy_(a)
            self.lora_B[route].zero_()


def insertion_plan(model_config) -> tuple[str, ...]:
    """Adapted layer names: q/k/v/out projections, both feed-forward linears,
    both modulation projections per block, plus the input patch projection
    and the final output projection."""
    names = ["patch_in"]
    for i in range(model_config.depth):
        names.extend(
            f"blocks.{i}.{leaf}"
            for leaf in ("attn.q", "attn.k", "attn.v", "attn.out",
                         "ffn.fc1", "ffn.fc2", "mod_attn", "mod_mlp")
        )
    names.append("head")
    return tuple(names)


class AdapterSet:
    """Accessor over a model's routed adapter parameters, with role metadata.

    ``roles`` records which streams carry meaningful (loaded or trained)
    weights; a fresh set reports both streams since zero-initialized adapters
    are valid (they reproduce the base model).
    """

    def __init__(self, model, roles=ROUTES, init_tag: str = "scratch"):
        self.model = model
        self.layers: dict[str, RoutedLoraLinear] = model.adapted_layers()
        self.roles = set(roles)
        self.init_tag = init_tag
        self.rank = model.config.lora_rank
        self.alpha = model.config.lora_alpha

    def parameters(self, role: str) -> list[nn.Parameter]:
        if role not in ROUTES:
            raise AdapterLoadError(f"unknown adapter role {role!r}")
        params = []
        for layer in self.layers.values():
            params.append(layer.lora_A[role])
            params.append(layer.lora_B[role])
        return params

    def deltas(self, role: str) -> dict[str, LowRankDelta]:
        return {
            name: LowRankDelta(
                A=layer.lora_A[role].detach().numpy().copy(),
                B=layer.lora_B[role].detach().numpy().copy(),
                rank=self.rank,
                alpha=self.alpha,
            )
            for name, layer in self.layers.items()
        }

    def zero_(self, role: str):
        with torch.no_grad():
            for layer in self.layers.values():
                layer.lora_B[role].zero_()

    def reinit_(self, role: str, seed: int | None = None):
        gen = None
        if seed is not None:
            gen = torch.Generator().manual_seed(seed)
        for layer in self.layers.values():
            layer.reinit_route_(role, gen)

    def max_abs_b(self, role: str) -> float:
        return max(float(layer.lora_B[role].detach().abs().max())
                   for layer in self.layers.values())


def save_adapters(adapters: AdapterSet, path, roles=None) -> None:
    roles = tuple(roles) if roles is not None else tuple(sorted(adapters.roles))
    arrays = {}
    for role in roles:
        for name, layer in adapters.layers.items():
            arrays[f"{role}/{name}/A"] = layer.lora_A[role].detach().numpy()
            arrays[f"{role}/{name}/B"] = layer.lora_B[role].detach().numpy()
    meta = {
        "kind": "adapters",
        "roles": list(roles),
        "rank": adapters.rank,
        "alpha": adapters.alpha,
        "init_tag": adapters.init_tag,
        "layer_names": sorted(adapters.layers),
    }
    checkpoint.save_arrays(path, arrays, meta)


def load_adapters(adapters: AdapterSet, path, fresh_identity_seed: int | None = None
                  ) -> AdapterSet:
    """Load adapter streams into ``adapters``; all-or-nothing.

    A location-only file may initialize a stage-2 set: pass
    ``fresh_identity_seed`` to re-draw a fresh identity stream, which tags the
    set "stage2-init". Without it the set is flagged location-only.
    """
    arrays, meta = checkpoint.load_arrays(path, expected_kind="adapters")
    if meta["rank"] != adapters.rank or meta["alpha"] != adapters.alpha:
        raise AdapterLoadError(
            f"rank/alpha mismatch: file ({meta['rank']}, {meta['alpha']}) vs "
            f"model ({adapters.rank}, {adapters.alpha})")
    if meta["layer_names"] != sorted(adapters.layers):
        raise AdapterLoadError("adapter layer set differs from the model's plan")
    file_roles = tuple(meta["roles"])
    staged: list[tuple[nn.Parameter, np.ndarray]] = []
    for role in file_roles:
        for name, layer in adapters.layers.items():
            a = arrays[f"{role}/{name}/A"]
            b = arrays[f"{role}/{name}/B"]
            if a.shape != tuple(layer.lora_A[role].shape) or \
                    b.shape != tuple(layer.lora_B[role].shape):
                raise AdapterLoadError(f"shape mismatch at {role}/{name}")
            staged.append((layer.lora_A[role], a))
            staged.append((layer.lora_B[role], b))
    with torch.no_grad():
        for param, value in staged:
            param.copy_(torch.from_numpy(value.copy()))
    adapters.roles = set(file_roles)
    adapters.init_tag = meta.get("init_tag", "loaded")
    if "identity" not in file_roles and fresh_identity_seed is not None:
        adapters.reinit_("identity", fresh_identity_seed)
        adapters.roles.add("identity")
        adapters.init_tag = "stage2-init"
    return adapters
