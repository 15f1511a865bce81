"""Full region captioner: encoder, prompt encoders, mixer stages, prefix, LM.

Frozen-side features (encoder grid, prompt tokens, mask-stage outputs) are a
pure function of the inputs, so they can be computed once per sample and
reused across training steps; only the text stage, query/task tokens, and
the prefix projection carry gradients by default.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import lm as lm_mod
from . import mixer as mx
from .autodiff import Tensor
from .encoder import EncoderConfig, EncoderParams, build_encoder, encode_image
from .lm import LMConfig, LMParams, build_lm, beam_search, caption_loss, lm_forward
from .mixer import MixerConfig, MixerParams, build_mixer
from .prompts import FourierPE, PromptEncoder
from .scenegen import SceneConfig
from .seeds import derive


DESK_MIXER = MixerConfig(d=64, mlp_dim=128, heads=2, n_text_layers=2, lm_dim=64)


@dataclass(frozen=True)
class ModelConfig:
    scene: SceneConfig = SceneConfig()
    encoder: EncoderConfig = EncoderConfig()
    mixer: MixerConfig = DESK_MIXER
    lm: LMConfig = LMConfig()
    prompt_kind: str = "box"

    def __post_init__(self):
        if self.encoder.canvas != self.scene.canvas:
            raise mx.ConfigError("encoder canvas != scene canvas")
        if self.encoder.d_out != self.mixer.d:
            raise mx.ConfigError("encoder output dim != mixer dim")
        if self.mixer.lm_dim != self.lm.d_lm:
            raise mx.ConfigError("mixer lm_dim != LM width")


@dataclass
class FrozenFeatures:
    """Per-sample frozen-side forward results (all requires_grad=False)."""
    prompt: Tensor        # (n_p, d) raw prompt tokens
    image: Tensor         # (G^2, d) raw grid tokens
    dense_pe: Tensor      # (G^2, d)
    p_hat: Tensor | None = None
    m_hat: Tensor | None = None
    i_hat: Tensor | None = None
    grid: Tensor | None = None   # (G, G, d) for ROI pooling
    box: tuple | None = None


class RegionCaptioner:
    def __init__(self, config: ModelConfig, seed: int,
                 lm_params: LMParams | None = None):
        self.config = config
        self.seed = seed
        d = config.mixer.d
        self.pe = FourierPE(d, derive(seed, "pe"))
        self.encoder = build_encoder(config.encoder, derive(seed, "encoder"),
                                     pe=self.pe)
        self.prompts = PromptEncoder(d, config.scene.canvas, config.encoder.grid,
                                     derive(seed, "prompts"), pe=self.pe)
        self.mixer = build_mixer(config.mixer, derive(seed, "mixer"))
        self.lm = lm_params or build_lm(config.lm, derive(seed, "lm"),
                                        trainable=False)
        rng = np.random.default_rng(derive(seed, "head"))
        self.task_tokens = Tensor(rng.normal(0.0, 0.1,
                                             size=(config.mixer.n_task_tokens,
                                                   config.lm.d_lm)),
                                  requires_grad=True)
        self.prefix_w = Tensor(rng.normal(0.0, 0.05, size=(d, config.lm.d_lm)),
                               requires_grad=True)
        self.prefix_b = Tensor(np.zeros(config.lm.d_lm), requires_grad=True)

    # ------------------------------------------------------------------
    # parameter registry

    def params(self) -> dict:
        reg = {}
        reg["prompt/fourier"] = Tensor(self.pe.matrix)
        for k, t in self.encoder.tensors.items():
            reg[f"encoder/{k}"] = t
        for k, t in self.prompts.tensors.items():
            reg[f"prompt/{k}"] = t
        for k, t in self.mixer.tensors.items():
            reg[k] = t
        for k, t in self.lm.tensors.items():
            reg[f"lm/{k}"] = t
        reg["task_tokens"] = self.task_tokens
        reg["prefix_proj/w"] = self.prefix_w
        reg["prefix_proj/b"] = self.prefix_b
        return reg

    def trainable_params(self) -> dict:
        return {k: t for k, t in self.params().items() if t.requires_grad}

    def frozen_params(self) -> dict:
        return {k: t for k, t in self.params().items() if not t.requires_grad}

    # ------------------------------------------------------------------
    # forward

    def _encode_prompt(self, region):
        return self.prompts.encode(region, prefer=self.config.prompt_kind)

    def frozen_features(self, image, region) -> FrozenFeatures:
        """Everything upstream of the trainable path, never on the tape."""
        cfg = self.config.mixer
        with ad.no_grad():
            tokens = encode_image(self.encoder, image)
            g = self.config.encoder.grid
            flat = ad.reshape(tokens.grid, (g * g, cfg.d))
            pe_flat = ad.reshape(tokens.positional_map, (g * g, cfg.d))
            prompt = self._encode_prompt(region).tokens
            feats = FrozenFeatures(prompt=prompt.detach(), image=flat.detach(),
                                   dense_pe=pe_flat.detach(),
                                   grid=tokens.grid.detach(), box=region.box)
            needs_sam = cfg.variant in ("text_query_with_sam_tokens",
                                        "sam_query_decode") \
                or cfg.text_stage_uses_mask_tokens
            if needs_sam:
                p_hat, m_hat, i_hat = mx.run_sam_stage(self.mixer, prompt, flat,
                                                       pe_flat)
                feats.p_hat = p_hat.detach()
                feats.m_hat = m_hat.detach()
                feats.i_hat = i_hat.detach()
        return feats

    def region_queries(self, feats: FrozenFeatures) -> Tensor:
        """Trainable path from frozen features to the fused query rows."""
        cfg = self.config.mixer
        if cfg.variant == "text_query_with_sam_tokens":
            return mx.run_text_stage(self.mixer, feats.p_hat, feats.i_hat,
                                     feats.dense_pe, mask_tokens=feats.m_hat)
        if cfg.variant == "text_query_without_sam_tokens":
            return mx.run_text_stage(self.mixer, feats.prompt, feats.image,
                                     feats.dense_pe, mask_tokens=feats.m_hat)
        if cfg.variant == "sam_query_decode":
            return mx.sam_query_features(self.mixer, feats.m_hat)
        return mx.roi_features(self.mixer, feats.grid, feats.box,
                               self.config.encoder.patch)

    def prefix_rows(self, queries: Tensor) -> Tensor:
        projected = ad.linear(queries, self.prefix_w, self.prefix_b)
        return ad.concat([self.task_tokens, projected], axis=0)

    def caption_logits(self, feats: FrozenFeatures, input_ids) -> Tensor:
        prefix = self.prefix_rows(self.region_queries(feats))
        return lm_forward(self.lm, prefix, input_ids)

    def sample_loss(self, feats: FrozenFeatures, target_ids,
                    eps: float = 0.1) -> Tensor:
        target_ids = np.asarray(target_ids, dtype=np.int64)
        inputs = np.concatenate([[lm_mod.BOS], target_ids[:-1]])
        logits = self.caption_logits(feats, inputs)
        return caption_loss(logits, target_ids, eps=eps)

    def decode(self, feats: FrozenFeatures, beam: int = 3,
               max_len: int = 16) -> np.ndarray:
        with ad.no_grad():
            prefix = self.prefix_rows(self.region_queries(feats))
            prefix = prefix.detach()
        return beam_search(self.lm, prefix, beam=beam, max_len=max_len)

    def predict_region_mask(self, image, region) -> np.ndarray:
        """Mask logits over the token grid; reads only SAM-stage outputs."""
        with ad.no_grad():
            tokens = encode_image(self.encoder, image)
            g = self.config.encoder.grid
            flat = ad.reshape(tokens.grid, (g * g, self.config.mixer.d))
            pe_flat = ad.reshape(tokens.positional_map, (g * g, self.config.mixer.d))
            prompt = self._encode_prompt(region).tokens
            _, m_hat, i_hat = mx.run_sam_stage(self.mixer, prompt, flat, pe_flat)
            return mx.predict_mask(m_hat, i_hat, g).data
