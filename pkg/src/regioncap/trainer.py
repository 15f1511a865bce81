"""Training loop: freezing policy, pretrain/finetune schedule, LSJ wiring,
checkpointing, and mixer switching.

Weak-supervision pretraining draws images from the detection and caption
corpora at the configured ratio and always targets class labels; caption
finetuning targets the grammar captions.  Frozen-side features are cached
per sample whenever augmentation is off.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import lm as lm_mod
from .checkpoint import Checkpoint, config_hash, load_into, snapshot
from .model import RegionCaptioner
from .optim import AdamW
from .scenegen import lsj_augment
from .seeds import rng_for


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


LR_CEILING = 4e-4   # config-file loads reject any learning rate above this
SWAP_KEYS = ("text_mixer/", "task_tokens", "prefix_proj/")


@dataclass(frozen=True)
class TrainConfig:
    mixer_lr: float = 1e-4
    lm_lr: float = 0.0
    lr_ceiling: float = LR_CEILING
    batch_size: int = 4
    steps_pretrain: int = 2000
    steps_finetune: int = 2000
    detection_ratio: float = 10.0   # detection : caption draws during pretrain
    lsj: tuple | None = None        # (scale_min, scale_max) or None
    weight_decay: float = 0.01
    warmup_frac: float = 0.05
    label_smoothing: float = 0.1
    eval_every: int = 200
    eval_batch: int = 16
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.lm_lr <= self.mixer_lr <= self.lr_ceiling):
            raise ConfigError(
                f"need 0 <= lm_lr ({self.lm_lr}) <= mixer_lr ({self.mixer_lr}) "
                f"<= lr_ceiling ({self.lr_ceiling})")


def freeze_policy(model: RegionCaptioner, cfg: TrainConfig):
    """Partition the registry into (trainable, frozen) dicts per the config."""
    if cfg.lm_lr > 0:
        model.lm.set_trainable(True)
    else:
        model.lm.set_trainable(False)
    params = model.params()
    trainable = {k: t for k, t in params.items() if t.requires_grad}
    frozen = {k: t for k, t in params.items() if not t.requires_grad}
    expected = {k for k in params
                if k.startswith(SWAP_KEYS) or (cfg.lm_lr > 0 and k.startswith("lm/"))}
    if set(trainable) != expected:
        raise ConfigError(
            f"freezing partition mismatch: unexpected trainable entries "
            f"{sorted(set(trainable) ^ expected)[:4]}")
    return trainable, frozen


class Trainer:
    """One optimization run over a fixed model and step budget."""

    def __init__(self, model: RegionCaptioner, cfg: TrainConfig, total_steps: int,
                 tag: str = "train"):
        self.model = model
        self.cfg = cfg
        self.tag = tag
        self.total_steps = total_steps
        trainable, self.frozen = freeze_policy(model, cfg)
        mixer_group = {k: t for k, t in trainable.items() if not k.startswith("lm/")}
        lm_group = {k: t for k, t in trainable.items() if k.startswith("lm/")}
        self.optimizers = [AdamW(mixer_group, lr=cfg.mixer_lr,
                                 total_steps=total_steps,
                                 weight_decay=cfg.weight_decay,
                                 warmup_frac=cfg.warmup_frac)]
        if lm_group:
            self.optimizers.append(AdamW(lm_group, lr=cfg.lm_lr,
                                         total_steps=total_steps,
                                         weight_decay=cfg.weight_decay,
                                         warmup_frac=cfg.warmup_frac))
        self.step = 0
        self.draw_counts = {"detection": 0, "caption": 0}
        self._cache = {}

    # ------------------------------------------------------------------

    def clear_cache(self):
        self._cache.clear()

    def features_for(self, sample, augment_seed=None):
        if self.cfg.lsj is not None and augment_seed is not None:
            lo, hi = self.cfg.lsj
            aug = lsj_augment(sample, lo, hi, augment_seed)
            if aug is not None and aug.region.mask.data.sum() >= 9:
                return self.model.frozen_features(aug.image, aug.region)
            return None   # destroyed by augmentation; caller resamples
        if sample.uid is not None and sample.uid in self._cache:
            return self._cache[sample.uid]
        feats = self.model.frozen_features(sample.image, sample.region)
        if sample.uid is not None:
            self._cache[sample.uid] = feats
        return feats

    def _draw(self, corpus, rng, kind: str):
        for _ in range(16):   # LSJ may destroy a region; resample a few times
            i = int(rng.integers(0, len(corpus)))
            sample = corpus[i]
            aug_seed = None
            if self.cfg.lsj is not None:
                aug_seed = int(rng.integers(0, 2 ** 62))
            feats = self.features_for(sample, augment_seed=aug_seed)
            if feats is None:
                continue
            target = (sample.region.class_label if kind == "label"
                      else sample.region.caption)
            return feats, target
        raise TrainingError("augmentation destroyed 16 consecutive draws")

    def assemble_batch(self, corpora: dict, kind: str, step: int):
        """Deterministic batch for (seed, tag, step); kind is label|caption."""
        rng = rng_for(self.cfg.seed, self.tag, "batch", step)
        batch = []
        for _ in range(self.cfg.batch_size):
            if kind == "label" and "caption" in corpora:
                ratio = self.cfg.detection_ratio
                pick_detection = rng.random() < ratio / (ratio + 1.0)
                source = "detection" if pick_detection else "caption"
            else:
                source = "caption" if kind == "caption" else "detection"
            self.draw_counts[source] += 1
            batch.append(self._draw(corpora[source], rng, kind))
        return batch

    def train_step(self, batch) -> float:
        """One forward/backward/update over (features, target) pairs."""
        for opt in self.optimizers:
            opt.zero_grad()
        losses = []
        for feats, target in batch:
            losses.append(self.model.sample_loss(feats, target,
                                                 eps=self.cfg.label_smoothing))
        loss = ad.scale(ad.sum_all(ad.concat(
            [ad.reshape(l, (1,)) for l in losses], axis=0)), 1.0 / len(losses))
        value = loss.item()
        if not math.isfinite(value):
            ad.active_tape().reset()
            raise TrainingError(
                f"non-finite loss {value} at step {self.step} "
                f"(lr {self.optimizers[0].lr_at(self.step + 1):.2e}, "
                f"batch size {len(batch)})")
        ad.backward(loss)
        self._assert_frozen_clean()
        for opt in self.optimizers:
            opt.step()
        self.step += 1
        return value

    def _assert_frozen_clean(self):
        for name, t in self.frozen.items():
            if t.grad is not None and np.abs(t.grad).sum() != 0.0:
                raise TrainingError(f"gradient leaked into frozen parameter {name!r}")

    def opt_state(self) -> dict:
        state = {}
        for gi, opt in enumerate(self.optimizers):
            sd = opt.state_dict()
            state[f"g{gi}/t"] = np.array([sd["t"]], dtype=np.float64)
            for k, v in sd.items():
                if k != "t":
                    state[f"g{gi}/{k}"] = v
        return state

    def load_opt_state(self, entries: dict):
        for gi, opt in enumerate(self.optimizers):
            sd = {"t": int(entries[f"g{gi}/t"][0])}
            for k in list(opt.state_dict()):
                if k != "t":
                    sd[k] = entries[f"g{gi}/{k}"]
            opt.load_state_dict(sd)


def _mean_val_loss(model, samples, trainer, eps):
    with_loss = []
    for s in samples:
        feats = trainer.features_for(s)
        with ad.no_grad():
            with_loss.append(model.sample_loss(feats, s.region.caption,
                                               eps=eps).item())
    return float(np.mean(with_loss))


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)


def _run(model, corpora, cfg: TrainConfig, steps: int, kind: str, tag: str,
         resume: Checkpoint | None = None) -> TrainResult:
    if kind == "label" and "detection" not in corpora:
        raise ConfigError("pretraining needs a detection corpus")
    if kind == "caption" and "caption" not in corpora:
        raise ConfigError("finetuning needs a caption corpus")
    trainer = Trainer(model, cfg, total_steps=steps, tag=tag)
    start = 0
    if resume is not None and resume.tag == tag and resume.opt_entries():
        load_into(model, resume)
        trainer.load_opt_state(
            {k[len("opt/"):]: v for k, v in resume.opt_entries().items()})
        start = resume.step
        trainer.step = start
    losses, val_losses = [], []
    val = corpora.get("val_caption") if kind == "caption" else corpora.get(
        "val_detection")
    for step in range(start, steps):
        batch = trainer.assemble_batch(corpora, kind, step)
        losses.append(trainer.train_step(batch))
        if val and (step + 1) % cfg.eval_every == 0:
            val_losses.append(_mean_val_loss(model, val[:cfg.eval_batch], trainer,
                                             cfg.label_smoothing))
    cfg_hash = config_hash((model.config, model.seed))
    metrics = {"final_loss": losses[-1] if losses else float("nan")}
    if val_losses:
        metrics["final_val_loss"] = val_losses[-1]
    ckpt = snapshot(model.params(), set(trainer.frozen), trainer.step, cfg_hash,
                    tag, metrics, opt_state=trainer.opt_state())
    return TrainResult(checkpoint=ckpt, losses=losses, val_losses=val_losses)


def run_pretrain(model, corpora: dict, cfg: TrainConfig) -> TrainResult:
    """Weak-supervision pretraining: class-label targets, 10:1 corpus mixing."""
    return _run(model, corpora, cfg, cfg.steps_pretrain, "label", "pretrain")


def run_finetune(model, corpora: dict, cfg: TrainConfig,
                 init: Checkpoint | None = None) -> TrainResult:
    """Caption finetuning, optionally initialized from a pretrain checkpoint."""
    if init is not None and init.tag != "caption":
        load_into(model, init)
    return _run(model, corpora, cfg, cfg.steps_finetune, "caption", "caption",
                resume=init)


def switch_mixer(model: RegionCaptioner, donor: Checkpoint) -> RegionCaptioner:
    """Swap only the trainable text-mixer side (mixer, queries, task tokens,
    prefix projection) from a donor checkpoint; frozen parts stay untouched."""
    params = model.params()
    stored = donor.param_entries()
    for name, tensor in params.items():
        if not name.startswith(SWAP_KEYS):
            continue
        if name not in stored:
            raise ConfigError(f"donor checkpoint lacks entry {name!r}")
        if stored[name].shape != tensor.data.shape:
            raise ConfigError(
                f"donor entry {name!r} shape {stored[name].shape} != "
                f"{tensor.data.shape}")
        tensor.data[...] = stored[name]
    return model


def prefit_frozen_stack(model: RegionCaptioner, samples, steps: int,
                        lr: float = 1e-3, seed: int = 0,
                        scope: str = "sam") -> float:
    """Optionally pre-fit the frozen-side stack on mask reconstruction.

    Trains the SAM-stage mixer (mask tokens included; with scope
    "encoder+sam" also the encoder) to reproduce region masks through the
    mask-prediction head while keeping per-token patch color linearly
    decodable, then freezes everything again; emulates starting from a
    pretrained segmenter.  The auxiliary color head exists only during the
    pre-fit.  Returns the final loss.
    """
    from . import mixer as mx
    from .encoder import encode_image

    if scope not in ("sam", "encoder+sam"):
        raise ConfigError(f"unknown prefit scope {scope!r}")
    sam_params = {k: t for k, t in model.mixer.tensors.items()
                  if k.startswith("sam_mixer/") or k == "mask_tokens"}
    group = {}
    pool = dict(sam_params)
    if scope == "encoder+sam":
        pool.update(model.encoder.tensors)
    for k, t in pool.items():
        t.requires_grad = True
        group[k] = t
    d = model.config.mixer.d
    head_rng = rng_for(seed, "prefit-head")
    color_w = ad.Tensor(head_rng.normal(0, d ** -0.5, size=(d, 3)),
                        requires_grad=True)
    color_b = ad.Tensor(np.zeros(3), requires_grad=True)
    group["prefit/color_w"] = color_w
    group["prefit/color_b"] = color_b
    opt = AdamW(group, lr=lr, total_steps=steps)
    g = model.config.encoder.grid
    cell = model.config.encoder.canvas // g
    loss_value = float("nan")
    for step in range(steps):
        rng = rng_for(seed, "prefit", step)
        idx = rng.integers(0, len(samples), size=4)
        opt.zero_grad()
        losses = []
        for i in idx:
            s = samples[int(i)]
            tokens = encode_image(model.encoder, s.image)
            flat = ad.reshape(tokens.grid, (g * g, d))
            pe_flat = ad.reshape(tokens.positional_map, (g * g, d))
            prompt = model.prompts.encode(s.region, prefer=model.config.prompt_kind)
            _, m_hat, i_hat = mx.run_sam_stage(model.mixer, prompt.tokens, flat,
                                               pe_flat)
            logits = mx.predict_mask(m_hat, i_hat, g)
            occ = s.region.mask.data.reshape(g, cell, g, cell).mean(axis=(1, 3))
            diff = ad.sub(ad.sigmoid(logits), ad.Tensor(occ))
            losses.append(ad.mean_all(ad.mul(diff, diff)))
            rgb = s.image.data.reshape(g, cell, g, cell, 3).mean(axis=(1, 3))
            cdiff = ad.sub(ad.linear(i_hat, color_w, color_b),
                           ad.Tensor(rgb.reshape(g * g, 3)))
            losses.append(ad.mean_all(ad.mul(cdiff, cdiff)))
        loss = ad.scale(ad.sum_all(ad.concat(
            [ad.reshape(l, (1,)) for l in losses], axis=0)), 1.0 / len(losses))
        loss_value = loss.item()
        if not math.isfinite(loss_value):
            raise TrainingError(f"non-finite prefit loss at step {step}")
        ad.backward(loss)
        opt.step()
    for t in group.values():
        t.requires_grad = False
        t.grad = None
    return loss_value


# ---------------------------------------------------------------------------
# evaluation helpers


def decode_corpus(model, samples, beam: int = 3, max_len: int = 16,
                  trainer: Trainer | None = None):
    """Beam-decoded token ids for every sample (frozen features cached)."""
    out = []
    for s in samples:
        if trainer is not None:
            feats = trainer.features_for(s)
        else:
            feats = model.frozen_features(s.image, s.region)
        out.append(model.decode(feats, beam=beam, max_len=max_len))
    return out


def exact_match_rate(decoded, samples, target: str = "caption") -> float:
    hits = 0
    for ids, s in zip(decoded, samples):
        ref = s.region.caption if target == "caption" else s.region.class_label
        hits += int(len(ids) == len(ref) and (ids == ref).all())
    return hits / max(1, len(samples))
