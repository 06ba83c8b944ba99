"""Single command-line entry point wiring all modules into reproducible runs.

Subcommands: synth, erase, train, infer, eval, experiment. Every run writes a
config echo next to its outputs so it can be reproduced exactly. Exit codes:
0 ok, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import erasing, evaluation, flow, imageio, inference, synth, training
from .adapters import AdapterLoadError, AdapterSet, load_adapters
from .checkpoint import CorruptCheckpointError
from .model import NumericError, PromptVocab, TryOnModel, load_model
from .experiments import (ExperimentConfig, run_fewshot_experiment,
                          run_shortcut_experiment)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

CONFIG_VERSION = 1

log = logging.getLogger("tryonlab")


class UsageError(ValueError):
    pass


class DataError(ValueError):
    pass


def load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise DataError(f"config file not found: {path}")
    with open(p) as f:
        cfg = yaml.safe_load(f) or {}
    if not isinstance(cfg, dict):
        raise DataError(f"config file {path} must be a mapping")
    version = cfg.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise DataError(f"unsupported config version {version}")
    return cfg


def echo_config(out_dir: str | Path, command: str, merged: dict) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"version": CONFIG_VERSION, "command": command, command: merged}
    with open(out / "config_echo.yaml", "w") as f:
        yaml.safe_dump(payload, f, sort_keys=True)


def _section(cfg: dict, name: str, overrides: dict) -> dict:
    merged = dict(cfg.get(name) or {})
    for k, v in overrides.items():
        if v is not None:
            merged[k] = v
    return merged


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def cmd_synth(args, file_cfg: dict) -> int:
    merged = _section(file_cfg, "synth", {
        "n": args.n, "seed": args.seed, "out_dir": args.out,
        "split": args.split, "paired": args.paired,
        "canvas": list(args.canvas) if args.canvas else None,
        "classes": args.classes, "jitter": args.jitter,
    })
    merged.setdefault("n", 200)
    merged.setdefault("seed", 0)
    merged.setdefault("split", "train")
    merged.setdefault("paired", False)
    merged.setdefault("canvas", [64, 64])
    if not merged.get("out_dir"):
        raise UsageError("synth requires --out")
    cfg = synth.DatasetConfig(
        out_dir=merged["out_dir"],
        n=int(merged["n"]),
        classes=tuple(merged.get("classes") or synth.CLASSES),
        weights=merged.get("weights"),
        class_counts=merged.get("class_counts"),
        seed=int(merged["seed"]),
        split=merged["split"],
        canvas=tuple(merged["canvas"]),
        paired=bool(merged["paired"]),
        jitter=float(merged.get("jitter", 1.0)),
    )
    records = synth.make_dataset(cfg)
    echo_config(cfg.out_dir, "synth", merged)
    log.info("wrote %d records under %s", len(records), cfg.out_dir)
    print(f"synth: {len(records)} records -> {Path(cfg.out_dir) / 'manifest.json'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# erase
# ---------------------------------------------------------------------------


def cmd_erase(args, file_cfg: dict) -> int:
    merged = _section(file_cfg, "erase", {
        "manifest": args.manifest, "out_dir": args.out, "mode": args.mode,
        "t": args.t, "blur_radius": args.blur_radius,
        "trace_strength": args.trace_strength, "steps": args.steps,
        "seed": args.seed,
    })
    if not merged.get("manifest") or not merged.get("out_dir"):
        raise UsageError("erase requires --manifest and --out")
    merged.setdefault("mode", "traceless")
    merged.setdefault("t", 0.2)
    merged.setdefault("blur_radius", 3.0)
    merged.setdefault("trace_strength", 0.0)
    merged.setdefault("steps", 4)
    merged.setdefault("seed", 0)

    manifest_path = Path(merged["manifest"])
    if not manifest_path.exists():
        raise DataError(f"manifest not found: {manifest_path}")
    records = synth.load_manifest(manifest_path)
    root = manifest_path.parent
    out = Path(merged["out_dir"])
    (out / "images").mkdir(parents=True, exist_ok=True)

    extended = []
    for i, rec in enumerate(records):
        tryon = imageio.load_image(root / rec["tryon_path"])
        mask = imageio.load_mask(root / rec["mask_path"])
        cfg = erasing.ErasingConfig(
            t=float(merged["t"]), blur_radius=float(merged["blur_radius"]),
            trace_strength=float(merged["trace_strength"]),
            steps=int(merged["steps"]), mode=merged["mode"],
            seed=int(merged["seed"]) + i)
        res = erasing.traceless_erase(tryon, mask, cfg)
        rp = f"images/{rec['id']}_repainted.png"
        bp = f"images/{rec['id']}_blended.png"
        imageio.save_image(out / rp, res.repainted_person)
        imageio.save_image(out / bp, res.blended_tryon)
        new = dict(rec)
        # untouched source images stay in place: re-anchor their paths to
        # this manifest's directory
        for key in ("tryon_path", "person_path", "mask_path", "object_path"):
            if new.get(key):
                new[key] = str(Path(os.path.relpath(root / new[key], out)))
        new.update({
            "repainted_person_path": rp,
            "blended_tryon_path": bp,
            "trace_mode": res.trace_mode,
            "t": float(merged["t"]),
            "blur_radius": float(merged["blur_radius"]),
        })
        extended.append(new)
    with open(out / "manifest.json", "w") as f:
        json.dump(extended, f, indent=1)
    echo_config(out, "erase", merged)
    print(f"erase: {len(extended)} records -> {out / 'manifest.json'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _load_erased_samples(manifest: Path, vocab: PromptVocab, paired: bool):
    records = synth.load_manifest(manifest)
    root = manifest.parent
    samples = []
    for rec in records:
        if "blended_tryon_path" not in rec:
            raise DataError(f"record {rec.get('id')} lacks erased fields; "
                            "run the erase command first")
        import torch

        target = torch.from_numpy(imageio.load_image(root / rec["blended_tryon_path"]))
        cond = torch.from_numpy(imageio.load_image(root / rec["repainted_person_path"]))
        common = dict(target=target, condition=cond,
                      prompt_id=vocab.id_of(rec["prompt"]),
                      class_label=rec["class"], sample_id=rec["id"])
        if paired:
            if not rec.get("object_path"):
                raise DataError(f"record {rec['id']} lacks object_path for stage 2")
            obj = torch.from_numpy(imageio.load_image(root / rec["object_path"]))
            samples.append(training.Stage2Sample(object_image=obj, **common))
        else:
            samples.append(training.Stage1Sample(**common))
    return samples


def _load_pretrain_samples(manifest: Path, vocab: PromptVocab):
    import torch

    records = synth.load_manifest(manifest)
    root = manifest.parent
    return [training.PretrainSample(
        image=torch.from_numpy(imageio.load_image(root / rec["tryon_path"])),
        mask=torch.from_numpy(imageio.load_mask(root / rec["mask_path"])),
        prompt_id=vocab.id_of(rec["prompt"]), sample_id=rec["id"])
        for rec in records]


def cmd_train(args, file_cfg: dict) -> int:
    import torch

    merged = _section(file_cfg, "train", {
        "stage": args.stage, "manifest": args.manifest, "out_dir": args.out,
        "steps": args.steps, "batch_size": args.batch_size, "seed": args.seed,
        "model": args.model, "init": args.init, "few_shot": args.few_shot,
        "mix_manifest": args.mix_manifest,
        "embed_dim": args.embed_dim, "depth": args.depth,
        "freeze_location": args.freeze_location or None,
        "attention": args.attention, "one_stream": args.one_stream or None,
    })
    for key in ("stage", "manifest", "out_dir"):
        if not merged.get(key):
            raise UsageError(f"train requires --{key.replace('_', '-')}")
    stage = str(merged["stage"])
    if stage not in training.STAGES:
        raise UsageError(f"stage must be one of {training.STAGES}")
    merged.setdefault("steps", 500)
    merged.setdefault("batch_size", 12)
    merged.setdefault("seed", 0)
    out = Path(merged["out_dir"])
    vocab = PromptVocab()

    if merged.get("model"):
        model = load_model(merged["model"])
    else:
        from .model import ModelConfig

        model = TryOnModel(ModelConfig(
            embed_dim=int(merged.get("embed_dim") or 64),
            num_heads=int(merged.get("num_heads") or 4),
            depth=int(merged.get("depth") or 3),
        ))
        if stage != "pretrain":
            raise UsageError("stage 1/2 training requires --model (a "
                             "pretrained base checkpoint)")
    torch.manual_seed(int(merged["seed"]))
    adapters = AdapterSet(model)

    manifest = Path(merged["manifest"])
    if not manifest.exists():
        raise DataError(f"manifest not found: {manifest}")

    data = training.TrainData()
    init_tag = None
    if stage == "pretrain":
        data.pretrain = _load_pretrain_samples(manifest, vocab)
    elif stage == "stage1":
        data.stage1 = _load_erased_samples(manifest, vocab, paired=False)
        if merged.get("mix_manifest"):
            data.stage1_extra = _load_erased_samples(
                Path(merged["mix_manifest"]), vocab, paired=False)
        adapters.reinit_("location", int(merged["seed"]) + 17)
    else:
        data.stage2 = _load_erased_samples(manifest, vocab, paired=True)
        init = merged.get("init") or "scratch"
        if init == "scratch":
            adapters.reinit_("location", int(merged["seed"]) + 17)
            adapters.reinit_("identity", int(merged["seed"]) + 17)
            adapters.init_tag = "scratch"
        else:
            load_adapters(adapters, init,
                          fresh_identity_seed=int(merged["seed"]) + 23)
        init_tag = adapters.init_tag

    cfg = training.TrainConfig(
        stage=stage, steps=int(merged["steps"]),
        batch_size=int(merged["batch_size"]), seed=int(merged["seed"]),
        init_tag=init_tag, few_shot=merged.get("few_shot"),
        freeze_location=bool(merged.get("freeze_location", False)),
        attention=merged.get("attention") or "block",
        one_stream=bool(merged.get("one_stream", False)),
        class_weights=merged.get("class_weights"),
    )
    result = training.run_training(model, adapters, cfg, data, out_dir=out)
    echo_config(out, "train", merged)
    print(f"train[{stage}]: {len(result.losses)} steps, "
          f"final loss {result.losses[-1]:.5f} -> {result.checkpoint_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------


def cmd_infer(args, file_cfg: dict) -> int:
    merged = _section(file_cfg, "infer", {
        "person": args.person, "object": args.object, "prompt": args.prompt,
        "seed": args.seed, "out": args.out_file, "model": args.model,
        "adapters": args.adapters, "num_steps": args.num_steps,
        "guidance_scale": args.guidance_scale,
    })
    for key in ("person", "prompt", "out", "model"):
        if not merged.get(key):
            raise UsageError(f"infer requires --{key}")
    merged.setdefault("seed", 0)
    model = load_model(merged["model"])
    adapters = AdapterSet(model)
    if merged.get("adapters"):
        load_adapters(adapters, merged["adapters"])
    person = imageio.load_image(merged["person"])
    obj = imageio.load_image(merged["object"]) if merged.get("object") else None
    req = inference.TryOnRequest(
        person=person, prompt=merged["prompt"], object_image=obj,
        seed=int(merged["seed"]),
        num_steps=merged.get("num_steps"),
        guidance_scale=merged.get("guidance_scale"))
    res = inference.try_on(req, model, adapters)
    out_file = Path(merged["out"])
    imageio.save_image(out_file, res.image)
    imageio.save_mask(out_file.with_name(out_file.stem + "_change.png"),
                      res.change_mask)
    echo_config(out_file.parent, "infer", merged)
    print(f"infer: wrote {out_file}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(args, file_cfg: dict) -> int:
    merged = _section(file_cfg, "eval", {
        "results": args.results, "plan": args.plan, "out": args.out,
    })
    if not merged.get("results"):
        raise UsageError("eval requires --results")
    results_path = Path(merged["results"])
    if not results_path.exists():
        raise DataError(f"results manifest not found: {results_path}")
    with open(results_path) as f:
        results = json.load(f)
    root = results_path.parent

    plan_pairs = None
    if merged.get("plan"):
        with open(merged["plan"]) as f:
            plan_pairs = json.load(f).get("pairs")

    per_pair = []
    for rec in results:
        if not rec.get("ok", True):
            continue
        for key in ("result_path", "person_path"):
            if not (root / rec[key]).exists() and not Path(rec[key]).exists():
                raise DataError(f"pair {rec['id']}: missing file {rec[key]}")
        tryon = _load_relative(root, rec["result_path"])
        person = _load_relative(root, rec["person_path"])
        obj = (_load_relative(root, rec["object_path"])
               if rec.get("object_path") else None)
        metrics = evaluation.evaluate_pair(tryon, person, obj, rec["class"],
                                           rec["prompt"])
        metrics["id"] = rec["id"]
        per_pair.append(metrics)
    if not per_pair:
        raise DataError("no successful pairs to evaluate")
    meta = {"results": str(results_path), "n_plan_pairs": len(plan_pairs)
            if plan_pairs else None,
            "encoders": ["toy-local", "toy-global"],
            "detector": "oracle-chromatic",
            "detection_threshold": evaluation.DETECTION_THRESHOLD}
    report = evaluation.aggregate(per_pair, meta)
    out_path = Path(merged.get("out") or results_path.parent / "report.json")
    evaluation.write_report(report, out_path)
    echo_config(out_path.parent, "eval", merged)
    summary = report["summary"]
    print("eval:", json.dumps({k: (round(v, 4) if isinstance(v, float) else v)
                               for k, v in summary.items()}))
    return EXIT_OK


def _load_relative(root: Path, path: str) -> np.ndarray:
    p = root / path
    return imageio.load_image(p if p.exists() else Path(path))


# ---------------------------------------------------------------------------
# experiment
# ---------------------------------------------------------------------------


def cmd_experiment(args, file_cfg: dict) -> int:
    merged = _section(file_cfg, "experiment", {
        "name": args.name, "out_dir": args.out, "seed": args.seed,
        "budget_minutes": args.budget_minutes,
    })
    name = merged.get("name")
    if name not in ("shortcut", "fewshot"):
        raise UsageError("experiment name must be 'shortcut' or 'fewshot'")
    kwargs = {k: v for k, v in merged.items() if k != "name"}
    kwargs.setdefault("out_dir", f"runs/{name}")
    if "canvas" in kwargs:
        kwargs["canvas"] = tuple(kwargs["canvas"])
    if "fewshot_sizes" in kwargs:
        kwargs["fewshot_sizes"] = tuple(kwargs["fewshot_sizes"])
    cfg = ExperimentConfig(**kwargs)
    runner = run_shortcut_experiment if name == "shortcut" else run_fewshot_experiment
    report = runner(cfg)
    echo_config(cfg.out_dir, "experiment", merged)
    flag = " (PARTIAL: budget exceeded)" if report.get("partial") else ""
    print(f"experiment[{name}]: report -> "
          f"{Path(cfg.out_dir) / (name + '_report.json')}{flag}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser / main
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="tryonlab",
        description="Mask-free try-on at desk scale: data synthesis, "
                    "traceless erasing, two-stage training, inference, "
                    "benchmark evaluation, and the headline experiments.")
    p.add_argument("--config", help="YAML config file (sections per command)")
    p.add_argument("--log-level", default="INFO")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset + manifest")
    s.add_argument("--n", type=int)
    s.add_argument("--classes", nargs="+")
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.add_argument("--split")
    s.add_argument("--paired", action="store_true", default=None)
    s.add_argument("--canvas", type=int, nargs=2)
    s.add_argument("--jitter", type=float)

    e = sub.add_parser("erase", help="run the erase pipeline over a manifest")
    e.add_argument("--manifest")
    e.add_argument("--out")
    e.add_argument("--mode", choices=["traceless", "traced"])
    e.add_argument("--t", type=float)
    e.add_argument("--blur-radius", type=float, dest="blur_radius")
    e.add_argument("--trace-strength", type=float, dest="trace_strength")
    e.add_argument("--steps", type=int)
    e.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="pretrain the base or train a stage")
    t.add_argument("--stage", choices=list(training.STAGES))
    t.add_argument("--manifest")
    t.add_argument("--mix-manifest", dest="mix_manifest")
    t.add_argument("--out")
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.add_argument("--seed", type=int)
    t.add_argument("--model", help="base model checkpoint (stages 1/2)")
    t.add_argument("--init", help='stage 2 adapter init: "scratch" or a '
                                  "stage-1 adapter checkpoint path")
    t.add_argument("--few-shot", type=int, dest="few_shot")
    t.add_argument("--embed-dim", type=int, dest="embed_dim")
    t.add_argument("--depth", type=int)
    t.add_argument("--freeze-location", action="store_true",
                   dest="freeze_location", default=None)
    t.add_argument("--attention", choices=["block", "full"])
    t.add_argument("--one-stream", action="store_true", dest="one_stream",
                   default=None)

    i = sub.add_parser("infer", help="single try-on generation")
    i.add_argument("--person")
    i.add_argument("--object")
    i.add_argument("--prompt")
    i.add_argument("--seed", type=int)
    i.add_argument("--out", dest="out_file")
    i.add_argument("--model")
    i.add_argument("--adapters")
    i.add_argument("--num-steps", type=int, dest="num_steps")
    i.add_argument("--guidance-scale", type=float, dest="guidance_scale")

    v = sub.add_parser("eval", help="score a results manifest")
    v.add_argument("--results")
    v.add_argument("--plan")
    v.add_argument("--out")

    x = sub.add_parser("experiment", help="run a headline experiment")
    x.add_argument("name", choices=["shortcut", "fewshot"])
    x.add_argument("--out")
    x.add_argument("--seed", type=int)
    x.add_argument("--budget-minutes", type=float, dest="budget_minutes")
    return p


COMMANDS = {
    "synth": cmd_synth,
    "erase": cmd_erase,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "experiment": cmd_experiment,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=getattr(logging, args.log_level.upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        file_cfg = load_config_file(args.config)
        return COMMANDS[args.command](args, file_cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, synth.ConfigurationError,
            AdapterLoadError, CorruptCheckpointError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (flow.DivergedSamplingError, NumericError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
