"""Frozen ViT-style image encoder with windowed and interleaved global attention.

Produces a single-level feature grid from the last block, projected by a 1x1
neck to the mixer width.  All parameters are frozen at build time; an
optional pre-fit pass elsewhere may adapt them before freezing, never after.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .prompts import FourierPE
from .seeds import rng_for


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    canvas: int = 64
    patch: int = 8
    width: int = 64        # transformer width inside the encoder
    depth: int = 4
    heads: int = 4
    window: int = 4        # window side length in grid cells
    global_every: int = 2  # every k-th block attends globally
    mlp_ratio: int = 4
    d_out: int = 64        # neck output dim (mixer width)

    @property
    def grid(self) -> int:
        return self.canvas // self.patch


@dataclass
class ImageTokens:
    grid: Tensor            # (G, G, D)
    positional_map: Tensor  # (G, G, D)


@dataclass
class EncoderParams:
    config: EncoderConfig
    tensors: dict = field(default_factory=dict)
    blocks: list = field(default_factory=list)
    pe: FourierPE | None = None

    def set_trainable(self, flag: bool):
        for t in self.tensors.values():
            t.requires_grad = flag
            if not flag:
                t.grad = None


def count_encoder_params(cfg: EncoderConfig) -> int:
    w, m = cfg.width, cfg.mlp_ratio * cfg.width
    g2 = cfg.grid * cfg.grid
    patch_embed = cfg.patch * cfg.patch * 3 * w + w
    per_block = (2 * w                       # ln1
                 + 4 * (w * w + w)           # attention projections
                 + 2 * w                     # ln2
                 + w * m + m + m * w + w)    # mlp
    neck = w * cfg.d_out + cfg.d_out + 2 * cfg.d_out
    return patch_embed + g2 * w + cfg.depth * per_block + neck


def build_encoder(cfg: EncoderConfig, seed: int,
                  pe: FourierPE | None = None) -> EncoderParams:
    """Seeded frozen encoder; raises ConfigError on divisibility violations."""
    if cfg.canvas % cfg.patch != 0:
        raise ConfigError(f"patch {cfg.patch} does not divide canvas {cfg.canvas}")
    if cfg.grid % cfg.window != 0:
        raise ConfigError(f"window {cfg.window} does not divide grid {cfg.grid}")
    rng = rng_for(seed, "encoder")
    params = EncoderParams(config=cfg)
    reg = params.tensors
    w = cfg.width

    def p(name, shape, std=0.02):
        t = Tensor(rng.normal(0.0, std, size=shape), requires_grad=False)
        reg[name] = t
        return t

    def norm(name):
        g = Tensor(np.ones(w), requires_grad=False)
        b = Tensor(np.zeros(w), requires_grad=False)
        reg[f"{name}/gain"] = g
        reg[f"{name}/bias"] = b
        return g, b

    p("patch_w", (cfg.patch * cfg.patch * 3, w))
    p("patch_b", (w,), std=0.0)
    p("pos_emb", (cfg.grid * cfg.grid, w))
    for i in range(cfg.depth):
        base = f"block{i}"
        attn = ad.attention_params(rng, w, w, trainable=False)
        for k, t in attn.tensors().items():
            reg[f"{base}/attn/{k}"] = t
        block = {"attn": attn, "ln1": norm(f"{base}/ln1"), "ln2": norm(f"{base}/ln2"),
                 "global": (i + 1) % cfg.global_every == 0}
        block["mlp_w1"] = p(f"{base}/mlp/w1", (w, cfg.mlp_ratio * w))
        block["mlp_b1"] = p(f"{base}/mlp/b1", (cfg.mlp_ratio * w,), std=0.0)
        block["mlp_w2"] = p(f"{base}/mlp/w2", (cfg.mlp_ratio * w, w))
        block["mlp_b2"] = p(f"{base}/mlp/b2", (w,), std=0.0)
        params.blocks.append(block)
    p("neck_w", (w, cfg.d_out))
    p("neck_b", (cfg.d_out,), std=0.0)
    reg["neck_ln/gain"] = Tensor(np.ones(cfg.d_out), requires_grad=False)
    reg["neck_ln/bias"] = Tensor(np.zeros(cfg.d_out), requires_grad=False)
    params.pe = pe or FourierPE(cfg.d_out, seed)
    return params


def _patchify(image: np.ndarray, patch: int) -> np.ndarray:
    h = image.shape[0]
    g = h // patch
    x = image.reshape(g, patch, g, patch, 3)
    return x.transpose(0, 2, 1, 3, 4).reshape(g * g, patch * patch * 3)


def _window_partition(x: Tensor, g: int, win: int):
    """(G^2, w) tokens -> list of (win^2, w) windows in row-major window order."""
    nwin = g // win
    d = x.shape[-1]
    stacked = ad.reshape(x, (nwin, win, nwin, win, d))
    stacked = ad.permute(stacked, (0, 2, 1, 3, 4))
    stacked = ad.reshape(stacked, (nwin * nwin, win * win, d))
    return [ad.reshape(ad.row_slice(stacked, i, i + 1), (win * win, d))
            for i in range(nwin * nwin)]


def _window_merge(windows, g: int, win: int) -> Tensor:
    nwin = g // win
    d = windows[0].shape[-1]
    stacked = ad.concat([ad.reshape(wt, (1, win * win, d)) for wt in windows], axis=0)
    stacked = ad.reshape(stacked, (nwin, nwin, win, win, d))
    stacked = ad.permute(stacked, (0, 2, 1, 3, 4))
    return ad.reshape(stacked, (g * g, d))


def forward_tokens(params: EncoderParams, image, n_blocks: int | None = None) -> Tensor:
    """Token matrix (G^2, width) after the first ``n_blocks`` blocks."""
    cfg = params.config
    img = image.data if isinstance(image, Tensor) else np.asarray(image)
    if img.shape != (cfg.canvas, cfg.canvas, 3):
        raise ad.ContractError(
            f"image shape {img.shape} != ({cfg.canvas}, {cfg.canvas}, 3)")
    reg = params.tensors
    patches = Tensor(_patchify(img, cfg.patch))
    x = ad.linear(patches, reg["patch_w"], reg["patch_b"])
    x = ad.add(x, reg["pos_emb"])
    blocks = params.blocks if n_blocks is None else params.blocks[:n_blocks]
    for block in blocks:
        g1, b1 = block["ln1"]
        n1 = ad.layer_norm(x, g1, b1)
        if block["global"] or cfg.window == cfg.grid:
            attn = ad.mha(block["attn"], n1, n1, n1, cfg.heads)
        else:
            wins = _window_partition(n1, cfg.grid, cfg.window)
            outs = [ad.mha(block["attn"], wt, wt, wt, cfg.heads) for wt in wins]
            attn = _window_merge(outs, cfg.grid, cfg.window)
        x = ad.add(x, attn)
        g2, b2 = block["ln2"]
        n2 = ad.layer_norm(x, g2, b2)
        m = ad.linear(n2, block["mlp_w1"], block["mlp_b1"])
        m = ad.gelu(m)
        m = ad.linear(m, block["mlp_w2"], block["mlp_b2"])
        x = ad.add(x, m)
    return x


def encode_image(params: EncoderParams, image) -> ImageTokens:
    """Single-level feature grid from the last block, deterministic per input."""
    cfg = params.config
    x = forward_tokens(params, image)
    x = ad.linear(x, params.tensors["neck_w"], params.tensors["neck_b"])
    x = ad.layer_norm(x, params.tensors["neck_ln/gain"], params.tensors["neck_ln/bias"])
    grid = ad.reshape(x, (cfg.grid, cfg.grid, cfg.d_out))
    return ImageTokens(grid=grid, positional_map=Tensor(params.pe.grid_map(cfg.grid)))
