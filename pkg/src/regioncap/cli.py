"""Operator surface: gen-data, pretrain, finetune, infer, eval, ablate.

Every run writes an atomic JSON manifest recording the resolved config,
seed, timestamps, checkpoint paths, and metric summary.  Exit codes:
0 success, 1 runtime failure, 2 usage or config errors.  All paths are
resolved relative to --work-dir; SCA_SEED overrides the config seed.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, replace

import numpy as np

from . import lm as lm_mod
from . import metrics as mt
from . import mixer as mx
from . import scenegen as sg
from . import trainer as tr
from .autodiff import Tensor
from .checkpoint import (Checkpoint, CheckpointError, ConfigMismatch, config_hash,
                         load_checkpoint, load_into, save_checkpoint, snapshot)
from .config import ConfigError, RunConfig, load_run_config
from .model import ModelConfig, RegionCaptioner
from .report import write_comparison, write_score_report
from .seeds import derive

USAGE_ERROR, RUNTIME_ERROR = 2, 1


def _resolve(work_dir: str, path: str | None):
    if path is None:
        return None
    return path if os.path.isabs(path) else os.path.join(work_dir, path)


def _write_manifest(path: str, payload: dict):
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(payload, f, indent=2, default=str)
    os.replace(tmp, path)


def _manifest(command: str, run_cfg: RunConfig, started: float,
              checkpoints=(), metrics=None) -> dict:
    return {
        "command": command,
        "config": asdict(run_cfg),
        "config_hash": config_hash((run_cfg.model, run_cfg.seed)),
        "seed": run_cfg.seed,
        "started": started,
        "ended": time.time(),
        "checkpoints": list(checkpoints),
        "metrics": metrics or {},
    }


def _build_corpora(run_cfg: RunConfig):
    scene = run_cfg.model.scene
    data = run_cfg.data
    seed = run_cfg.seed
    return {
        "detection": sg.build_corpus(derive(seed, "detection"),
                                     data.detection_scenes, scene, tag="det"),
        "caption": sg.build_corpus(derive(seed, "caption"),
                                   data.caption_scenes, scene, tag="cap"),
        "val_caption": sg.build_corpus(derive(seed, "val"),
                                       data.val_scenes, scene, tag="val"),
    }


def _pretrained_model(run_cfg: RunConfig, data_dir: str | None) -> RegionCaptioner:
    """Model with its LM pretrained on the grammar corpus, frozen."""
    if data_dir and os.path.exists(os.path.join(data_dir, "lm_corpus.txt")):
        with open(os.path.join(data_dir, "lm_corpus.txt")) as f:
            sentences = [line.split() for line in f.read().splitlines() if line]
    else:
        sentences = sg.lm_text_corpus(derive(run_cfg.seed, "lmtext"),
                                      run_cfg.data.lm_sentences, run_cfg.model.scene)
    lm_cfg = replace(run_cfg.lm_train, seed=derive(run_cfg.seed, "lmtrain"))
    lm_params, ppl = lm_mod.pretrain_lm(sentences, run_cfg.model.lm, lm_cfg)
    model = RegionCaptioner(run_cfg.model, seed=run_cfg.seed, lm_params=lm_params)
    model.lm_holdout_ppl = ppl
    return model


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, run_cfg: RunConfig) -> int:
    started = time.time()
    out = _resolve(args.work_dir, args.out)
    os.makedirs(out, exist_ok=True)
    corpora = _build_corpora(run_cfg)
    counts = {}
    for name, samples in corpora.items():
        sg.export_dataset(samples, os.path.join(out, name))
        counts[name] = len(samples)
    sentences = sg.lm_text_corpus(derive(run_cfg.seed, "lmtext"),
                                  run_cfg.data.lm_sentences, run_cfg.model.scene)
    with open(os.path.join(out, "lm_corpus.txt"), "w") as f:
        f.write("\n".join(" ".join(s) for s in sentences) + "\n")
    image_ratio = run_cfg.data.detection_scenes / max(1, run_cfg.data.caption_scenes)
    manifest = _manifest("gen-data", run_cfg, started, metrics={
        "samples": counts,
        "detection_scenes": run_cfg.data.detection_scenes,
        "caption_scenes": run_cfg.data.caption_scenes,
        "image_ratio_detection_to_caption": image_ratio,
        "lm_sentences": len(sentences),
    })
    _write_manifest(os.path.join(out, "manifest.json"), manifest)
    print(f"wrote {sum(counts.values())} samples across {len(counts)} corpora "
          f"to {out} (image ratio {image_ratio:.1f}:1)")
    return 0


def _load_corpora_from(data_dir: str):
    corpora = {}
    for name in ("detection", "caption", "val_caption"):
        path = os.path.join(data_dir, name)
        if os.path.isdir(path):
            corpora[name] = sg.import_dataset(path)
    return corpora


def _train_command(args, run_cfg: RunConfig, which: str) -> int:
    started = time.time()
    data_dir = _resolve(args.work_dir, args.data_dir)
    out = _resolve(args.work_dir, args.out)
    os.makedirs(out, exist_ok=True)
    corpora = _load_corpora_from(data_dir) if data_dir else _build_corpora(run_cfg)
    init = None
    if getattr(args, "init", None):
        init = load_checkpoint(_resolve(args.work_dir, args.init))
    model = _pretrained_model(run_cfg, data_dir)
    if init is not None:
        load_into(model, init, force=args.force)
    if run_cfg.prefit_steps > 0 and init is None:
        tr.prefit_frozen_stack(model, corpora["detection"], run_cfg.prefit_steps,
                               lr=run_cfg.prefit_lr,
                               seed=derive(run_cfg.seed, "prefit"))
    if which == "pretrain":
        result = tr.run_pretrain(model, corpora, run_cfg.train)
    else:
        result = tr.run_finetune(model, corpora, run_cfg.train, init=init)
    ckpt_path = os.path.join(out, f"{which}.ckpt")
    save_checkpoint(result.checkpoint, ckpt_path)
    manifest = _manifest(which, run_cfg, started, checkpoints=[ckpt_path],
                         metrics={**result.checkpoint.metrics,
                                  "lineage": args.init or "fresh",
                                  "lm_holdout_ppl": getattr(model,
                                                            "lm_holdout_ppl", None)})
    _write_manifest(os.path.join(out, f"{which}_manifest.json"), manifest)
    print(f"{which} finished at step {result.checkpoint.step}; "
          f"final loss {result.checkpoint.metrics['final_loss']:.4f}; "
          f"checkpoint {ckpt_path}")
    return 0


def _restore_model(args, run_cfg: RunConfig) -> RegionCaptioner:
    ckpt = load_checkpoint(_resolve(args.work_dir, args.checkpoint))
    model = RegionCaptioner(run_cfg.model, seed=run_cfg.seed)
    load_into(model, ckpt, force=getattr(args, "force", False))
    return model


def cmd_infer(args, run_cfg: RunConfig) -> int:
    try:
        parts = [float(v) for v in args.box.split(",")]
        if len(parts) != 4:
            raise ValueError
    except ValueError:
        print(f"error: --box wants 'x0,y0,x1,y1', got {args.box!r}", file=sys.stderr)
        return USAGE_ERROR
    box = tuple(parts)
    canvas = run_cfg.model.scene.canvas
    for i, (v, bound) in enumerate(zip(box, (canvas, canvas, canvas, canvas))):
        if v < 0 or v > bound:
            print(f"error: box coordinate {i} = {v} violates bound [0, {bound}]",
                  file=sys.stderr)
            return USAGE_ERROR
    model = _restore_model(args, run_cfg)
    image = np.load(_resolve(args.work_dir, args.image))
    region = sg.RegionSample(box=box, point=(int((box[0] + box[2]) / 2),
                                             int((box[1] + box[3]) / 2)),
                             mask=None, class_label=np.array([]),
                             caption=np.array([]))
    feats = model.frozen_features(Tensor(image), region)
    ids = model.decode(feats, beam=args.beam)
    caption = lm_mod.detokenize(ids)
    mask_logits = model.predict_region_mask(Tensor(image), region)
    out = _resolve(args.work_dir, args.out) or args.work_dir
    os.makedirs(out, exist_ok=True)
    np.save(os.path.join(out, "mask_logits.npy"), mask_logits)
    print(caption)
    return 0


def cmd_eval(args, run_cfg: RunConfig) -> int:
    started = time.time()
    data_dir = _resolve(args.work_dir, args.data_dir)
    corpora = _load_corpora_from(data_dir) if data_dir else _build_corpora(run_cfg)
    split = corpora["val_caption" if args.split == "val" else args.split]
    model = _restore_model(args, run_cfg)
    decoded = tr.decode_corpus(model, split, beam=args.beam)
    vocab = lm_mod.default_vocabulary()
    cands = [lm_mod.detokenize(ids, vocab) for ids in decoded]
    refs = [[lm_mod.detokenize(s.region.caption, vocab)] for s in split]
    rep = mt.score_corpus(cands, refs)
    out = _resolve(args.work_dir, args.report_out)
    write_score_report(rep, out)
    manifest = _manifest("eval", run_cfg, started, metrics=rep.means)
    _write_manifest(os.path.join(out, "eval_manifest.json"), manifest)
    print(f"scored {len(split)} samples; CIDEr-D {rep.means['C']:.2f}; "
          f"report in {out}")
    return 0


# ---------------------------------------------------------------------------
# ablation suites

SUITES = ("mixer-size", "mixer-arch", "lr-grid", "lsj", "pretrain")


def _ablate_run(run_cfg: RunConfig, label: str, steps: int, seed: int,
                variant: str | None = None, n_text_layers: int | None = None,
                mixer_lr: float | None = None, lm_lr: float | None = None,
                lsj=None, with_pretrain: bool = False):
    """Train one desk-scale configuration and score the validation split."""
    mixer_cfg = run_cfg.model.mixer
    if variant is not None:
        mixer_cfg = replace(mixer_cfg, variant=variant)
    if n_text_layers is not None:
        mixer_cfg = replace(mixer_cfg, n_text_layers=n_text_layers)
    model_cfg = replace(run_cfg.model, mixer=mixer_cfg)
    train_cfg = replace(run_cfg.train,
                        mixer_lr=mixer_lr if mixer_lr is not None
                        else run_cfg.train.mixer_lr,
                        lm_lr=lm_lr if lm_lr is not None else run_cfg.train.lm_lr,
                        lsj=lsj, steps_pretrain=steps, steps_finetune=steps,
                        seed=seed)
    sub_cfg = replace(run_cfg, model=model_cfg, train=train_cfg, seed=seed)
    corpora = _build_corpora(sub_cfg)
    model = _pretrained_model(sub_cfg, None)
    if sub_cfg.prefit_steps > 0:
        tr.prefit_frozen_stack(model, corpora["detection"], sub_cfg.prefit_steps,
                               lr=sub_cfg.prefit_lr, seed=derive(seed, "prefit"))
    init = None
    if with_pretrain:
        init = tr.run_pretrain(model, corpora, train_cfg).checkpoint
    result = tr.run_finetune(model, corpora, train_cfg, init=init)
    decoded = tr.decode_corpus(model, corpora["val_caption"])
    vocab = lm_mod.default_vocabulary()
    cands = [lm_mod.detokenize(ids, vocab) for ids in decoded]
    refs = [[lm_mod.detokenize(s.region.caption, vocab)]
            for s in corpora["val_caption"]]
    rep = mt.score_corpus(cands, refs)
    return label, rep.means


def cmd_ablate(args, run_cfg: RunConfig) -> int:
    started = time.time()
    out = _resolve(args.work_dir, args.out)
    os.makedirs(out, exist_ok=True)
    steps, seed = args.steps, run_cfg.seed
    jobs = []
    if args.suite == "mixer-size":
        counts = {}
        for layers in (2, 4, 8, 12, 24):
            counts[layers] = mx.count_params(replace(mx.PAPER_SCALE,
                                                     n_text_layers=layers))
            print(f"{layers:3d} layers -> {counts[layers] / 1e6:.1f} M trainable "
                  f"mixer parameters at paper scale ({counts[layers]:,})")
        for layers in (2, 4, 8):   # desk-trainable subset of the grid
            jobs.append(dict(label=f"layers-{layers}", n_text_layers=layers))
    elif args.suite == "mixer-arch":
        for variant in mx.VARIANTS:
            jobs.append(dict(label=variant.replace("_", "-"), variant=variant))
    elif args.suite == "lr-grid":
        for mlr in (1e-4, 5e-5):
            for llr in (0.0, 1e-5):
                jobs.append(dict(label=f"mixer{mlr:g}-lm{llr:g}",
                                 mixer_lr=mlr, lm_lr=llr))
    elif args.suite == "lsj":
        jobs = [dict(label="no-lsj", lsj=None),
                dict(label="lsj-1.0-2.0", lsj=(1.0, 2.0)),
                dict(label="lsj-0.1-2.0", lsj=(0.1, 2.0))]
    elif args.suite == "pretrain":
        jobs = [dict(label="finetune-only", with_pretrain=False),
                dict(label="pretrain-finetune", with_pretrain=True)]
    else:
        print(f"error: unknown suite {args.suite!r}; choose from "
              f"{', '.join(SUITES)}", file=sys.stderr)
        return USAGE_ERROR

    rows = []
    if args.parallel > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            futures = [pool.submit(_ablate_run, run_cfg, steps=steps, seed=seed,
                                   **job) for job in jobs]
            rows = [f.result() for f in futures]
    else:
        for job in jobs:
            rows.append(_ablate_run(run_cfg, steps=steps, seed=seed, **job))
    for label, means in rows:
        print(f"{label}: C {means['C']:.2f}  M {means['M']:.2f}  "
              f"B@4 {means['B@4']:.2f}")
    write_comparison(rows, out, f"ablate_{args.suite}")
    manifest = _manifest(f"ablate:{args.suite}", run_cfg, started,
                         metrics={label: means for label, means in rows})
    _write_manifest(os.path.join(out, f"ablate_{args.suite}_manifest.json"),
                    manifest)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="regioncap",
        description="Region captioning on synthetic scenes: a frozen encoder "
                    "and frozen LM bridged by a trainable query mixer.")
    parser.add_argument("--work-dir", default=".",
                        help="base directory for all relative paths")
    parser.add_argument("--config", default=None, help="key=value config file")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="materialize the synthetic corpora")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)

    for name in ("pretrain", "finetune"):
        p = sub.add_parser(name, help=f"run {name}")
        p.add_argument("--data-dir", default=None)
        p.add_argument("--out", required=True)
        p.add_argument("--init", default=None,
                       help="checkpoint to initialize from")
        p.add_argument("--force", action="store_true",
                       help="load checkpoints despite a config-hash mismatch")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("infer", help="caption one region of one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help=".npy image of shape HxWx3")
    p.add_argument("--box", required=True, help="'x0,y0,x1,y1' in pixels")
    p.add_argument("--beam", type=int, default=3)
    p.add_argument("--out", default=None)
    p.add_argument("--force", action="store_true")
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("eval", help="score a split and write reports")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", default=None)
    p.add_argument("--report-out", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--beam", type=int, default=3)
    p.add_argument("--force", action="store_true")
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("ablate", help="run an ablation suite at desk scale")
    p.add_argument("--suite", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--seed", type=int, default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        run_cfg = load_run_config(_resolve(args.work_dir, args.config)
                                  if args.config else None)
        if getattr(args, "seed", None) is not None:
            run_cfg = replace(run_cfg, seed=args.seed)
        if args.command == "gen-data":
            return cmd_gen_data(args, run_cfg)
        if args.command in ("pretrain", "finetune"):
            return _train_command(args, run_cfg, args.command)
        if args.command == "infer":
            return cmd_infer(args, run_cfg)
        if args.command == "eval":
            return cmd_eval(args, run_cfg)
        if args.command == "ablate":
            return cmd_ablate(args, run_cfg)
        parser.error(f"unknown command {args.command!r}")
    except (ConfigError, ConfigMismatch, mx.ConfigError, tr.ConfigError,
            sg.ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (tr.TrainingError, lm_mod.TrainingError, CheckpointError,
            sg.GenerationError, sg.ParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR
    return 0


if __name__ == "__main__":
    sys.exit(main())
