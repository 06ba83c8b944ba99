"""Token plumbing in the transformer: the channel-extended zero-mask input,
the I1/T1/I2/T2 sequence with width-shifted rotary coordinates, the 4-block
attention mask, and the hard guarantee that try-on content never flows into
object tokens.

Run:  python demos/03_sequence_and_attention.py
"""

import numpy as np
import torch

from tryonlab import model as M
from tryonlab.adapters import AdapterSet, insertion_plan

torch.manual_seed(0)
cfg = M.ModelConfig(embed_dim=64, num_heads=4, depth=2, patch_size=4,
                    max_tokens=600)
net = M.TryOnModel(cfg)

# nonzero base weights so the demo shows real signal (adapters stay zero)
with torch.no_grad():
    for name, p in net.named_parameters():
        if "lora_" not in name:
            p.add_(torch.randn_like(p) * 0.03)

x = torch.rand(1, 32, 32, 3)
person = torch.rand(1, 32, 32, 3)
stack = M.build_inpaint_input(x, person, None)
print("channel stack:", tuple(stack.shape), "(noisy RGB | condition RGB | zero mask)")

tok1, coords1 = net.patchify(stack, route=0)
obj_stack = M.build_inpaint_input(torch.rand(1, 32, 32, 3),
                                  torch.rand(1, 32, 32, 3), None)
tok2, coords2 = net.patchify(obj_stack, route=1)
seq = net.assemble_sequence(tok1, coords1, (8, 8),
                            net.embed_prompt(torch.tensor([1])),
                            tok2, coords2, (8, 8),
                            net.embed_prompt(torch.tensor([1])))
print("segments:", [(s.source, s.length) for s in seq.segments])
i2 = seq.slice_of("object_image")
print("object rope columns:",
      int(seq.rope_coords[0, i2, 1].min()), "..",
      int(seq.rope_coords[0, i2, 1].max()),
      "(shifted past the try-on width of 8)")

allow = net.attention_mask(seq)[0, 0]
labels = ["I1", "T1", "I2", "T2"]
slices = [seq.slice_of(s) for s in ("tryon_image", "tryon_text",
                                    "object_image", "object_text")]
print("\nblock visibility (query row -> key col):")
print("      " + "  ".join(f"{l:>3s}" for l in labels))
for ql, qs in zip(labels, slices):
    row = ["yes" if bool(allow[qs, ks].any()) else "  -" for ks in slices]
    print(f"  {ql:>3s} " + "  ".join(row))

# hard blocking check: perturb a try-on token, object outputs cannot move
t = torch.tensor([0.4])
with torch.no_grad():
    v0 = net(seq, t)
tokens = seq.tokens.clone()
tokens[0, 10, 3] += 5.0
seq_p = M.TokenSequence(segments=seq.segments, tokens=tokens,
                        rope_coords=seq.rope_coords, valid=seq.valid,
                        route=seq.route, grids=seq.grids)
with torch.no_grad():
    v1 = net(seq_p, t)
print("\nperturbed one try-on token by +5.0:")
print("  max |delta| on try-on outputs :", float((v1 - v0)[0, slices[0]].abs().max()))
print("  max |delta| on object outputs :", float((v1 - v0)[0, slices[2]].abs().max()))

# adapters: zero-initialized streams leave the base model untouched
ad = AdapterSet(net)
with torch.no_grad():
    va = net(seq, t, use_adapters=True)
    vb = net(seq, t, use_adapters=False)
print("\nzero-init adapters, adapted == base forward:",
      bool(torch.equal(va, vb)))
print("insertion plan:", len(insertion_plan(cfg)), "layers;",
      "first/last:", insertion_plan(cfg)[0], "/", insertion_plan(cfg)[-1])
