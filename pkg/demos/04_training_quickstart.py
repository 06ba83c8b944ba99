"""Miniature end-to-end training pass: pretrain a tiny copier base on
synthetic inpainting, adapt it with the stage-1 location stream, and sample a
mask-free edit. Deliberately small so it finishes in a couple of minutes; the
full-scale runs live behind `tryonlab experiment`.

Run:  python demos/04_training_quickstart.py
"""

import time
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from tryonlab import erasing, flow, inference, synth, training
from tryonlab.adapters import AdapterSet
from tryonlab.model import ModelConfig, PromptVocab, TryOnModel

OUT = Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)
t0 = time.time()
torch.manual_seed(0)
rng = np.random.default_rng(1)
vocab = PromptVocab()
CANVAS = (32, 32)

triples = [synth.generate_triple(rng, synth.CLASSES[i % 6], CANVAS,
                                 paired=False)
           for i in range(120)]

model = TryOnModel(ModelConfig(embed_dim=96, num_heads=4, depth=3,
                               patch_size=4, max_tokens=512))

pre_pool = [training.PretrainSample(image=torch.from_numpy(tr.tryon),
                                    mask=torch.from_numpy(tr.mask),
                                    prompt_id=vocab.id_of(tr.prompt),
                                    sample_id=f"p{i}")
            for i, tr in enumerate(triples)]
pre_cfg = training.TrainConfig(stage="pretrain", steps=400, batch_size=12,
                               seed=0, lr=3e-4)
res = training.run_training(model, AdapterSet(model), pre_cfg,
                            training.TrainData(pretrain=pre_pool))
print(f"pretrain: loss {res.losses[0]:.3f} -> {np.mean(res.losses[-30:]):.3f} "
      f"({time.time() - t0:.0f}s)")

samples = []
for i, tr in enumerate(triples):
    er = erasing.traceless_erase(tr.tryon, tr.mask,
                                 erasing.ErasingConfig(trace_strength=0.08,
                                                       seed=100 + i))
    samples.append(training.Stage1Sample(
        target=torch.from_numpy(er.blended_tryon),
        condition=torch.from_numpy(er.repainted_person),
        prompt_id=vocab.id_of(tr.prompt), class_label=tr.class_label,
        sample_id=f"s{i}"))

adapters = AdapterSet(model)
adapters.reinit_("location", 17)
s1_cfg = training.TrainConfig(stage="stage1", steps=300, batch_size=12,
                              seed=0, lr=3e-4)
res = training.run_training(model, adapters, s1_cfg,
                            training.TrainData(stage1=samples))
print(f"stage 1: loss {res.losses[0]:.3f} -> {np.mean(res.losses[-30:]):.3f} "
      f"({time.time() - t0:.0f}s)")

# sample an edit on a fresh person
probe = synth.generate_triple(np.random.default_rng(99), "hat", CANVAS,
                              paired=False, jitter=0.5)
req = inference.TryOnRequest(person=probe.person, prompt="trying on hat",
                             seed=3)
out = inference.try_on(req, model, adapters,
                       schedule=flow.FlowSchedule(num_steps=8))
iou = synth.mask_iou(out.change_mask, probe.mask)
print(f"change-mask IoU vs oracle hat mask: {iou:.2f} "
      "(a quickstart-sized run gives rough placement; the experiment "
      "configs train several times longer)")

fig, axes = plt.subplots(1, 4, figsize=(12, 3.2))
for ax, (title, img) in zip(axes, [
        ("input person", probe.person),
        ("generated edit", out.image),
        ("change mask", np.repeat(out.change_mask[..., None], 3, 2).astype(float)),
        ("oracle mask", np.repeat(probe.mask[..., None], 3, 2).astype(float))]):
    ax.imshow(np.clip(img, 0, 1))
    ax.set_title(title, fontsize=9)
    ax.axis("off")
fig.tight_layout()
fig.savefig(OUT / "training_quickstart.png", dpi=110)
print(f"wrote {OUT / 'training_quickstart.png'} ({time.time() - t0:.0f}s total)")
