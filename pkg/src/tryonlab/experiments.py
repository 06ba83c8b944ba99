"""The two headline experiments, shared by the CLI and the acceptance suite.

``shortcut``: train stage-1 variants on traced vs traceless erasures and show
that the traced model localizes erased regions (it keys on the fill artifact)
while failing on clean inputs, whereas the traceless model genuinely places
objects on clean inputs.

``fewshot``: train stage-2 from scratch vs from a stage-1 location adapter at
several paired-samples-per-class budgets and compare object consistency and
localization.
"""

from __future__ import annotations

import copy
import csv
import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from . import erasing, evaluation, flow, inference, synth, training
from .adapters import AdapterSet, load_adapters, save_adapters
from .model import ModelConfig, PromptVocab, TryOnModel, load_model, save_model


@dataclass
class ExperimentConfig:
    """Desk-scale experiment knobs: a small canvas and model keep the two
    experiments inside their CPU budgets on one core."""

    out_dir: str | Path = "runs/experiments"
    canvas: tuple[int, int] = (48, 48)
    embed_dim: int = 64
    num_heads: int = 4
    depth: int = 3
    patch_size: int = 4
    seed: int = 0
    n_unpaired: int = 240
    n_eval: int = 36
    trace_strength: float = 0.08
    blur_radius: float = 3.0
    pretrain_steps: int = 600
    stage1_steps: int = 800
    stage2_steps: int = 250
    batch_size: int = 12
    num_sample_steps: int = 8
    fewshot_sizes: tuple[int, ...] = (1, 4, 16, 64)
    budget_minutes: float | None = None

    def model_config(self) -> ModelConfig:
        return ModelConfig(embed_dim=self.embed_dim, num_heads=self.num_heads,
                           depth=self.depth, patch_size=self.patch_size,
                           max_tokens=1024)

    def schedule(self) -> flow.FlowSchedule:
        return flow.FlowSchedule(num_steps=self.num_sample_steps)


class _Budget:
    def __init__(self, minutes: float | None):
        self.t0 = time.time()
        self.limit = minutes * 60.0 if minutes else None
        self.exceeded = False

    def check(self) -> bool:
        if self.limit is not None and time.time() - self.t0 > self.limit:
            self.exceeded = True
        return self.exceeded


# ---------------------------------------------------------------------------
# Shared workspace: synthetic pools, pretrained base, stage-1 adapters
# ---------------------------------------------------------------------------


def _make_triples(n: int, seed: int, canvas, paired: bool, jitter: float = 1.0
                  ) -> list[synth.TryOnTriple]:
    rng = np.random.default_rng(seed)
    weights = synth.DEFAULT_CLASS_WEIGHTS
    probs = np.array([weights[c] for c in synth.CLASSES], dtype=float)
    probs /= probs.sum()
    out = []
    for _ in range(n):
        cls = synth.CLASSES[int(rng.choice(6, p=probs))]
        out.append(synth.generate_triple(rng, cls, canvas, paired=paired,
                                         jitter=jitter))
    return out


def _balanced_paired_triples(per_class: int, seed: int, canvas,
                             jitter: float = 1.0) -> list[synth.TryOnTriple]:
    rng = np.random.default_rng(seed)
    out = []
    for cls in synth.CLASSES:
        for _ in range(per_class):
            out.append(synth.generate_triple(rng, cls, canvas, paired=True,
                                             jitter=jitter))
    return out


def _stage1_samples(triples, mode: str, trace_strength: float,
                    blur_radius: float, vocab: PromptVocab, seed: int
                    ) -> list[training.Stage1Sample]:
    out = []
    for i, tr in enumerate(triples):
        cfg = erasing.ErasingConfig(mode=mode, trace_strength=trace_strength,
                                    blur_radius=blur_radius, seed=seed + i)
        res = erasing.traceless_erase(tr.tryon, tr.mask, cfg)
        out.append(training.Stage1Sample(
            target=torch.from_numpy(res.blended_tryon),
            condition=torch.from_numpy(res.repainted_person),
            prompt_id=vocab.id_of(tr.prompt),
            class_label=tr.class_label,
            sample_id=f"{mode}-{i}"))
    return out


def _stage2_samples(triples, trace_strength: float, blur_radius: float,
                    vocab: PromptVocab, seed: int) -> list[training.Stage2Sample]:
    out = []
    for i, tr in enumerate(triples):
        cfg = erasing.ErasingConfig(mode="traceless", trace_strength=trace_strength,
                                    blur_radius=blur_radius, seed=seed + i)
        res = erasing.traceless_erase(tr.tryon, tr.mask, cfg)
        out.append(training.Stage2Sample(
            target=torch.from_numpy(res.blended_tryon),
            condition=torch.from_numpy(res.repainted_person),
            prompt_id=vocab.id_of(tr.prompt),
            class_label=tr.class_label,
            object_image=torch.from_numpy(tr.object_image),
            sample_id=f"paired-{i}"))
    return out


@dataclass
class Workspace:
    cfg: ExperimentConfig
    vocab: PromptVocab
    model: TryOnModel
    base_state: dict
    unpaired: list[synth.TryOnTriple]
    eval_triples: list[synth.TryOnTriple]
    stage1_adapter_path: str | None = None

    def reset_to_base(self) -> None:
        self.model.load_state_dict(copy.deepcopy(self.base_state))


def prepare_workspace(cfg: ExperimentConfig, need_stage1: bool = True) -> Workspace:
    """Synthesize the pools and pretrain (or reload) the base copier model;
    optionally also train (or reload) the traceless stage-1 location adapter."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab = PromptVocab()
    torch.manual_seed(cfg.seed)

    unpaired = _make_triples(cfg.n_unpaired, cfg.seed + 1, cfg.canvas, paired=False)
    eval_triples = _make_triples(cfg.n_eval, cfg.seed + 2, cfg.canvas,
                                 paired=False, jitter=0.7)

    base_path = out / "base_final.npz"
    if base_path.exists():
        model = load_model(base_path)
    else:
        model = TryOnModel(cfg.model_config())
        pre_pool = [training.PretrainSample(
            image=torch.from_numpy(tr.tryon), mask=torch.from_numpy(tr.mask),
            prompt_id=vocab.id_of(tr.prompt), sample_id=f"pre-{i}")
            for i, tr in enumerate(unpaired)]
        pre_cfg = training.TrainConfig(stage="pretrain", steps=cfg.pretrain_steps,
                                       batch_size=cfg.batch_size, seed=cfg.seed)
        training.run_training(model, AdapterSet(model), pre_cfg,
                              training.TrainData(pretrain=pre_pool),
                              out_dir=out)
    ws = Workspace(cfg=cfg, vocab=vocab, model=model,
                   base_state=copy.deepcopy(model.state_dict()),
                   unpaired=unpaired, eval_triples=eval_triples)

    if need_stage1:
        s1_path = out / "adapters_stage1_final.npz"
        if not s1_path.exists():
            samples = _stage1_samples(unpaired, "traceless", cfg.trace_strength,
                                      cfg.blur_radius, vocab, cfg.seed * 1000)
            _train_stage1(ws, training.TrainData(stage1=samples), out)
            ws.reset_to_base()
        ws.stage1_adapter_path = str(s1_path)
    return ws


def _train_stage1(ws: Workspace, data: training.TrainData, out_dir) -> str:
    cfg = ws.cfg
    adapters = AdapterSet(ws.model)
    adapters.reinit_("location", cfg.seed + 17)
    adapters.zero_("identity")
    train_cfg = training.TrainConfig(stage="stage1", steps=cfg.stage1_steps,
                                     batch_size=cfg.batch_size, seed=cfg.seed)
    res = training.run_training(ws.model, adapters, train_cfg, data,
                                out_dir=out_dir)
    return res.checkpoint_path


# ---------------------------------------------------------------------------
# Shortcut experiment
# ---------------------------------------------------------------------------


def _localization_eval(ws: Workspace, condition_mode: str,
                       iou_threshold: float = 0.5) -> dict:
    """Generate an edit for each eval person and score the changed-pixel
    mask against the oracle object mask. condition_mode 'traced' feeds
    naively-erased (artifact-bearing) inputs; 'clean' feeds pure renders."""
    sched = ws.cfg.schedule()
    ious = []
    for i, tr in enumerate(ws.eval_triples):
        if condition_mode == "traced":
            cond = erasing.naive_erase(tr.tryon, tr.mask, ws.cfg.trace_strength,
                                       rng=np.random.default_rng(90000 + i))
        else:
            cond = tr.person
        req = inference.TryOnRequest(person=cond, prompt=tr.prompt, seed=500 + i)
        res = inference.try_on(req, ws.model, None, schedule=sched,
                               vocab=ws.vocab)
        ious.append(synth.mask_iou(res.change_mask, tr.mask))
    arr = np.array(ious)
    return {
        "condition": condition_mode,
        "success_rate": float((arr >= iou_threshold).mean()),
        "iou_mean": float(arr.mean()),
        "iou_median": float(np.median(arr)),
    }


def run_shortcut_experiment(cfg: ExperimentConfig) -> dict:
    """Fig.-style reproduction: traced-data training learns the erase
    artifact; traceless training learns genuine placement."""
    budget = _Budget(cfg.budget_minutes)
    out = Path(cfg.out_dir)
    ws = prepare_workspace(cfg, need_stage1=False)

    report = {"experiment": "shortcut", "config": _config_dict(cfg), "rows": [],
              "partial": False}
    for mode in ("traced", "traceless"):
        if budget.check():
            report["partial"] = True
            break
        samples = _stage1_samples(ws.unpaired, mode, cfg.trace_strength,
                                  cfg.blur_radius, ws.vocab, cfg.seed * 1000)
        ws.reset_to_base()
        run_dir = out / f"shortcut_{mode}"
        _train_stage1(ws, training.TrainData(stage1=samples), run_dir)
        row = {"trained_on": mode,
               "on_traced": _localization_eval(ws, "traced"),
               "on_clean": _localization_eval(ws, "clean")}
        report["rows"].append(row)

    _write_report(out / "shortcut_report.json", report)
    _write_shortcut_csv(out / "shortcut_report.csv", report)
    return report


def _write_shortcut_csv(path: Path, report: dict) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["trained_on", "eval_condition", "success_rate",
                    "iou_mean", "iou_median"])
        for row in report["rows"]:
            for key in ("on_traced", "on_clean"):
                e = row[key]
                w.writerow([row["trained_on"], e["condition"],
                            f"{e['success_rate']:.4f}", f"{e['iou_mean']:.4f}",
                            f"{e['iou_median']:.4f}"])


# ---------------------------------------------------------------------------
# Few-shot experiment
# ---------------------------------------------------------------------------


def _paired_eval_set(cfg: ExperimentConfig) -> list[synth.TryOnTriple]:
    return _balanced_paired_triples(max(1, cfg.n_eval // len(synth.CLASSES)),
                                    cfg.seed + 3, cfg.canvas, jitter=0.7)


def _consistency_eval(ws: Workspace, eval_pairs: list[synth.TryOnTriple]) -> dict:
    """Try on each eval object; score local-encoder consistency (missing
    detections contribute zero) and detection success."""
    sched = ws.cfg.schedule()
    local = evaluation.LocalPatchEncoder()
    glob = evaluation.GlobalMomentEncoder()
    cons, detected = [], []
    for i, tr in enumerate(eval_pairs):
        req = inference.TryOnRequest(person=tr.person, prompt=tr.prompt,
                                     object_image=tr.object_image, seed=700 + i)
        res = inference.try_on(req, ws.model, None, schedule=sched,
                               vocab=ws.vocab)
        g, _ = evaluation.localization_metrics(res.image, tr.class_label,
                                               tr.prompt)
        detected.append(g)
        m_dino, _ = evaluation.object_consistency(
            res.image, synth.segment_chromatic(res.image),
            tr.object_image, tr.object_mask or synth.segment_chromatic(tr.object_image),
            local, glob)
        cons.append(m_dino if (g and m_dino is not None) else 0.0)
    return {"consistency": float(np.mean(cons)),
            "localization_success": float(np.mean(detected))}


def _object_copy_mse(ws: Workspace, eval_pairs: list[synth.TryOnTriple],
                     n: int = 8) -> float:
    sched = ws.cfg.schedule()
    errs = []
    for i, tr in enumerate(eval_pairs[:n]):
        req = inference.TryOnRequest(person=tr.person, prompt=tr.prompt,
                                     object_image=tr.object_image, seed=900 + i)
        res = inference.try_on(req, ws.model, None, schedule=sched,
                               vocab=ws.vocab)
        errs.append(float(((res.object_decoded - tr.object_image) ** 2).mean()))
    return float(np.mean(errs))


def run_fewshot_experiment(cfg: ExperimentConfig) -> dict:
    """Stage-1-initialized vs from-scratch stage-2 training across paired
    sample budgets."""
    budget = _Budget(cfg.budget_minutes)
    out = Path(cfg.out_dir)
    ws = prepare_workspace(cfg, need_stage1=True)
    eval_pairs = _paired_eval_set(cfg)

    pool = _balanced_paired_triples(max(cfg.fewshot_sizes), cfg.seed + 4,
                                    cfg.canvas)
    by_class: dict[str, list] = {}
    for tr in pool:
        by_class.setdefault(tr.class_label, []).append(tr)

    report = {"experiment": "fewshot", "config": _config_dict(cfg), "rows": [],
              "partial": False, "object_copy_mse": None}
    for n in cfg.fewshot_sizes:
        subset = [tr for cls in synth.CLASSES for tr in by_class[cls][:n]]
        samples = _stage2_samples(subset, cfg.trace_strength, cfg.blur_radius,
                                  ws.vocab, cfg.seed * 2000)
        for init in ("scratch", "stage1-init"):
            if budget.check():
                report["partial"] = True
                break
            ws.reset_to_base()
            adapters = AdapterSet(ws.model)
            if init == "stage1-init":
                load_adapters(adapters, ws.stage1_adapter_path,
                              fresh_identity_seed=cfg.seed + 23)
            else:
                adapters.reinit_("location", cfg.seed + 23)
                adapters.reinit_("identity", cfg.seed + 23)
                adapters.init_tag = "scratch"
            t_cfg = training.TrainConfig(
                stage="stage2", steps=cfg.stage2_steps,
                batch_size=min(cfg.batch_size, max(4, len(samples))),
                seed=cfg.seed, few_shot=n, init_tag=adapters.init_tag)
            training.run_training(ws.model, adapters, t_cfg,
                                  training.TrainData(stage2=samples),
                                  out_dir=out / f"fewshot_n{n}_{init}")
            row = {"n_per_class": n, "init": init}
            row.update(_consistency_eval(ws, eval_pairs))
            report["rows"].append(row)
            if init == "stage1-init" and n == max(cfg.fewshot_sizes):
                report["object_copy_mse"] = _object_copy_mse(ws, eval_pairs)
        if report["partial"]:
            break

    _write_report(out / "fewshot_report.json", report)
    _write_fewshot_csv(out / "fewshot_report.csv", report)
    _plot_fewshot(out / "fewshot_report.png", report)
    return report


def _write_fewshot_csv(path: Path, report: dict) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["n_per_class", "init", "consistency", "localization_success"])
        for row in report["rows"]:
            w.writerow([row["n_per_class"], row["init"],
                        f"{row['consistency']:.4f}",
                        f"{row['localization_success']:.4f}"])


def _plot_fewshot(path: Path, report: dict) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for metric, ax in zip(("consistency", "localization_success"), axes):
        for init, style in (("stage1-init", "o-"), ("scratch", "s--")):
            rows = [r for r in report["rows"] if r["init"] == init]
            if rows:
                ax.plot([r["n_per_class"] for r in rows],
                        [r[metric] for r in rows], style, label=init)
        ax.set_xscale("log", base=2)
        ax.set_xlabel("paired samples per class")
        ax.set_ylabel(metric.replace("_", " "))
        ax.legend()
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _config_dict(cfg: ExperimentConfig) -> dict:
    d = asdict(cfg)
    d["out_dir"] = str(d["out_dir"])
    return d


def _write_report(path: Path, report: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(report, f, indent=1)
