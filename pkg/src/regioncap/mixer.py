"""Query-based feature mixers: the frozen two-layer mask stage, the trainable
stacked text stage, ablation baselines, and exact parameter accounting.

A two-way block runs four sublayers: self-attention over the sparse tokens,
sparse-to-dense cross-attention at half width, an MLP, and dense-to-sparse
cross-attention, each followed by residual + layer norm.  Positional
encodings (the stage's initial sparse tokens, and the encoder's positional
map for dense tokens) are re-added to queries and keys at every sublayer.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AttentionParams, Tensor
from .seeds import rng_for


class ConfigError(ValueError):
    pass


VARIANTS = ("text_query_with_sam_tokens", "text_query_without_sam_tokens",
            "sam_query_decode", "roi_align", "roi_align_mlp")
TEXT_VARIANTS = VARIANTS[:2]


@dataclass(frozen=True)
class MixerConfig:
    d: int = 256
    mlp_dim: int = 2048
    heads: int = 8
    downsample_rate: int = 2
    n_text_layers: int = 12
    n_sam_layers: int = 2
    n_query_tokens: int = 8
    n_mask_tokens: int = 4
    n_task_tokens: int = 6
    lm_dim: int = 3200
    variant: str = "text_query_with_sam_tokens"
    text_stage_uses_mask_tokens: bool = False

    def __post_init__(self):
        if self.d % self.downsample_rate != 0:
            raise ConfigError(f"d={self.d} not divisible by rate={self.downsample_rate}")
        if self.d_internal % self.heads != 0:
            raise ConfigError(
                f"d_internal={self.d_internal} not divisible by heads={self.heads}")
        if self.d % self.heads != 0:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")
        if self.n_text_layers < 1:
            raise ConfigError("n_text_layers must be >= 1")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown mixer variant {self.variant!r}")

    @property
    def d_internal(self) -> int:
        return self.d // self.downsample_rate


PAPER_SCALE = MixerConfig()


# ---------------------------------------------------------------------------
# parameter accounting (pure arithmetic; validated against built tensors)


def _norm_count(d: int) -> int:
    return 2 * d


def block_param_count(cfg: MixerConfig) -> int:
    d, di = cfg.d, cfg.d_internal
    self_attn = AttentionParams.count(d, d)
    cross = AttentionParams.count(d, di)
    mlp = d * cfg.mlp_dim + cfg.mlp_dim + cfg.mlp_dim * d + d
    return self_attn + 2 * cross + mlp + 4 * _norm_count(d)


def tail_param_count(cfg: MixerConfig) -> int:
    return AttentionParams.count(cfg.d, cfg.d_internal) + _norm_count(cfg.d)


def count_params(cfg: MixerConfig) -> int:
    """Exact trainable parameter count of the text stage.

    Covers the stacked blocks, the final attention + norm tail, the query
    token embeddings, and the task token embeddings (at the LM width); the
    token embeddings sit below the reporting precision of the usual tables.
    """
    return (cfg.n_text_layers * block_param_count(cfg)
            + tail_param_count(cfg)
            + cfg.n_query_tokens * cfg.d
            + cfg.n_task_tokens * cfg.lm_dim)


# ---------------------------------------------------------------------------
# construction


def _build_norm(reg, name, d, trainable):
    g = Tensor(np.ones(d), requires_grad=trainable)
    b = Tensor(np.zeros(d), requires_grad=trainable)
    reg[f"{name}/gain"] = g
    reg[f"{name}/bias"] = b
    return g, b


def _build_block(reg, prefix, cfg: MixerConfig, rng, trainable):
    d, di = cfg.d, cfg.d_internal
    block = {}

    def attn(name, internal):
        a = ad.attention_params(rng, d, internal, std=d ** -0.5,
                                trainable=trainable)
        for k, t in a.tensors().items():
            reg[f"{prefix}/{name}/{k}"] = t
        return a

    block["self_attn"] = attn("self_attn", d)
    block["norm1"] = _build_norm(reg, f"{prefix}/norm1", d, trainable)
    block["cross_sd"] = attn("cross_sd", di)
    block["norm2"] = _build_norm(reg, f"{prefix}/norm2", d, trainable)
    block["mlp_w1"] = ad.parameter(rng, (d, cfg.mlp_dim), std=d ** -0.5,
                                   trainable=trainable)
    block["mlp_b1"] = Tensor(np.zeros(cfg.mlp_dim), requires_grad=trainable)
    block["mlp_w2"] = ad.parameter(rng, (cfg.mlp_dim, d), std=cfg.mlp_dim ** -0.5,
                                   trainable=trainable)
    block["mlp_b2"] = Tensor(np.zeros(d), requires_grad=trainable)
    reg[f"{prefix}/mlp/w1"] = block["mlp_w1"]
    reg[f"{prefix}/mlp/b1"] = block["mlp_b1"]
    reg[f"{prefix}/mlp/w2"] = block["mlp_w2"]
    reg[f"{prefix}/mlp/b2"] = block["mlp_b2"]
    block["norm3"] = _build_norm(reg, f"{prefix}/norm3", d, trainable)
    block["cross_ds"] = attn("cross_ds", di)
    block["norm4"] = _build_norm(reg, f"{prefix}/norm4", d, trainable)
    return block


def _build_stage(reg, prefix, cfg: MixerConfig, n_layers, rng, trainable):
    stage = {"blocks": [], "heads": cfg.heads}
    for i in range(n_layers):
        stage["blocks"].append(_build_block(reg, f"{prefix}/block{i}", cfg, rng,
                                            trainable))
    tail = ad.attention_params(rng, cfg.d, cfg.d_internal, std=cfg.d ** -0.5,
                               trainable=trainable)
    for k, t in tail.tensors().items():
        reg[f"{prefix}/tail/attn/{k}"] = t
    stage["tail_attn"] = tail
    stage["tail_norm"] = _build_norm(reg, f"{prefix}/tail_norm", cfg.d, trainable)
    return stage


@dataclass
class MixerParams:
    config: MixerConfig
    tensors: dict = field(default_factory=dict)
    sam_stage: dict | None = None
    text_stage: dict | None = None
    query_tokens: Tensor | None = None
    mask_tokens: Tensor | None = None
    proj: dict = field(default_factory=dict)   # variant-specific projections


def build_mixer(cfg: MixerConfig, seed: int) -> MixerParams:
    rng = rng_for(seed, "mixer")
    params = MixerParams(config=cfg)
    reg = params.tensors
    params.sam_stage = _build_stage(reg, "sam_mixer", cfg, cfg.n_sam_layers, rng,
                                    trainable=False)
    params.mask_tokens = Tensor(rng.normal(0.0, 0.5, size=(cfg.n_mask_tokens, cfg.d)),
                                requires_grad=False)
    reg["mask_tokens"] = params.mask_tokens

    if cfg.variant in TEXT_VARIANTS:
        params.text_stage = _build_stage(reg, "text_mixer", cfg, cfg.n_text_layers,
                                         rng, trainable=True)
        params.query_tokens = ad.parameter(rng, (cfg.n_query_tokens, cfg.d), std=0.1)
        reg["text_mixer/query_tokens"] = params.query_tokens
    elif cfg.variant == "sam_query_decode":
        w = ad.parameter(rng, (cfg.n_mask_tokens * cfg.d, cfg.n_query_tokens * cfg.d),
                         std=(cfg.n_mask_tokens * cfg.d) ** -0.5)
        b = Tensor(np.zeros(cfg.n_query_tokens * cfg.d), requires_grad=True)
        params.proj = {"w": w, "b": b}
        reg["text_mixer/sam_query_proj/w"] = w
        reg["text_mixer/sam_query_proj/b"] = b
    else:   # roi_align / roi_align_mlp
        w = ad.parameter(rng, (4 * cfg.d, cfg.n_query_tokens * cfg.d),
                         std=(4 * cfg.d) ** -0.5)
        b = Tensor(np.zeros(cfg.n_query_tokens * cfg.d), requires_grad=True)
        params.proj = {"w": w, "b": b}
        reg["text_mixer/roi_proj/w"] = w
        reg["text_mixer/roi_proj/b"] = b
        if cfg.variant == "roi_align_mlp":
            params.proj["mlp_w1"] = ad.parameter(rng, (cfg.d, cfg.d),
                                                 std=cfg.d ** -0.5)
            params.proj["mlp_b1"] = Tensor(np.zeros(cfg.d), requires_grad=True)
            params.proj["mlp_w2"] = ad.parameter(rng, (cfg.d, cfg.d),
                                                 std=cfg.d ** -0.5)
            params.proj["mlp_b2"] = Tensor(np.zeros(cfg.d), requires_grad=True)
            reg["text_mixer/roi_mlp/w1"] = params.proj["mlp_w1"]
            reg["text_mixer/roi_mlp/b1"] = params.proj["mlp_b1"]
            reg["text_mixer/roi_mlp/w2"] = params.proj["mlp_w2"]
            reg["text_mixer/roi_mlp/b2"] = params.proj["mlp_b2"]
    return params


# ---------------------------------------------------------------------------
# forward


def two_way_block(block, sparse, dense, sparse_pe, dense_pe, heads):
    """One four-sublayer unit; returns updated (sparse, dense)."""
    if sparse.shape[1] != dense.shape[1]:
        raise ad.ContractError(
            f"sparse/dense widths differ: {sparse.shape} vs {dense.shape}")
    q = ad.add(sparse, sparse_pe)
    attn = ad.mha(block["self_attn"], q, q, sparse, heads)
    g, b = block["norm1"]
    sparse = ad.layer_norm(ad.add(sparse, attn), g, b)

    q = ad.add(sparse, sparse_pe)
    k = ad.add(dense, dense_pe)
    attn = ad.mha(block["cross_sd"], q, k, dense, heads)
    g, b = block["norm2"]
    sparse = ad.layer_norm(ad.add(sparse, attn), g, b)

    m = ad.linear(sparse, block["mlp_w1"], block["mlp_b1"])
    m = ad.gelu(m)
    m = ad.linear(m, block["mlp_w2"], block["mlp_b2"])
    g, b = block["norm3"]
    sparse = ad.layer_norm(ad.add(sparse, m), g, b)

    q = ad.add(sparse, sparse_pe)
    k = ad.add(dense, dense_pe)
    attn = ad.mha(block["cross_ds"], k, q, sparse, heads)
    g, b = block["norm4"]
    dense = ad.layer_norm(ad.add(dense, attn), g, b)
    return sparse, dense


def run_stage_blocks(stage, sparse, dense, sparse_pe, dense_pe,
                     start: int = 0, end: int | None = None):
    """Run a contiguous block range without the tail (stage loop recursion)."""
    blocks = stage["blocks"][start:end]
    for block in blocks:
        sparse, dense = two_way_block(block, sparse, dense, sparse_pe, dense_pe,
                                      stage["heads"])
    return sparse, dense


def run_stage(stage, sparse, dense, sparse_pe, dense_pe):
    """All blocks plus the final sparse-to-dense attention and norm."""
    sparse, dense = run_stage_blocks(stage, sparse, dense, sparse_pe, dense_pe)
    q = ad.add(sparse, sparse_pe)
    k = ad.add(dense, dense_pe)
    attn = ad.mha(stage["tail_attn"], q, k, dense, stage["heads"])
    g, b = stage["tail_norm"]
    sparse = ad.layer_norm(ad.add(sparse, attn), g, b)
    return sparse, dense


def run_sam_stage(mixer: MixerParams, prompt_tokens, image_tokens, dense_pe):
    """Frozen mask-mixer stage over sparse=[P; M], dense=I.

    Returns (P_hat, M_hat, I_hat); deterministic per input.
    """
    n_p = prompt_tokens.shape[0]
    sparse0 = ad.concat([prompt_tokens, mixer.mask_tokens], axis=0)
    sparse, dense = run_stage(mixer.sam_stage, sparse0, image_tokens,
                              sparse0, dense_pe)
    p_hat = ad.row_slice(sparse, 0, n_p)
    m_hat = ad.row_slice(sparse, n_p, n_p + mixer.config.n_mask_tokens)
    return p_hat, m_hat, dense


def run_text_stage(mixer: MixerParams, prompt_tokens, image_tokens, dense_pe,
                   mask_tokens=None):
    """Trainable stacked stage; returns the fused caption query rows.

    ``prompt_tokens``/``image_tokens`` are the SAM-stage outputs for the
    default variant and the raw encodings for the without-SAM variant.
    """
    cfg = mixer.config
    if cfg.variant not in TEXT_VARIANTS:
        raise ad.ContractError(
            f"run_text_stage is undefined for variant {cfg.variant!r}")
    parts = [prompt_tokens]
    if cfg.text_stage_uses_mask_tokens and mask_tokens is not None:
        parts.append(mask_tokens)
    parts.append(mixer.query_tokens)
    sparse0 = ad.concat(parts, axis=0)
    sparse, _ = run_stage(mixer.text_stage, sparse0, image_tokens,
                          sparse0, dense_pe)
    n = sparse.shape[0]
    return ad.row_slice(sparse, n - cfg.n_query_tokens, n)


# ---------------------------------------------------------------------------
# ablation baselines


def bilinear_sample(grid: np.ndarray, u: float, v: float) -> np.ndarray:
    """Bilinear read of a (G, G, D) grid at feature coords (u=row, v=col)."""
    g = grid.shape[0]
    u = min(max(u, 0.0), g - 1.0)
    v = min(max(v, 0.0), g - 1.0)
    u0, v0 = int(np.floor(u)), int(np.floor(v))
    u1, v1 = min(u0 + 1, g - 1), min(v0 + 1, g - 1)
    fu, fv = u - u0, v - v0
    return ((1 - fu) * (1 - fv) * grid[u0, v0] + (1 - fu) * fv * grid[u0, v1]
            + fu * (1 - fv) * grid[u1, v0] + fu * fv * grid[u1, v1])


def roi_align_pool(grid, box, patch: int, out: int = 2) -> np.ndarray:
    """(out, out, D) average of bilinear samples inside the box.

    Sampling density per output cell adapts to the cell extent in feature
    units, so pooling the whole canvas at 1x1 recovers the exact grid mean.
    """
    data = grid.data if isinstance(grid, Tensor) else np.asarray(grid)
    g = data.shape[0]
    x0, y0, x1, y1 = (float(v) for v in box)
    if not (x0 < x1 and y0 < y1):
        raise ad.ContractError(f"degenerate box {box}")
    if x0 < 0 or y0 < 0 or x1 > g * patch or y1 > g * patch:
        raise ad.ContractError(f"box {box} outside canvas {g * patch}")
    cw, ch = (x1 - x0) / out, (y1 - y0) / out
    pooled = np.zeros((out, out, data.shape[-1]))
    for i in range(out):
        for j in range(out):
            ny = max(1, int(np.ceil(ch / patch)))
            nx = max(1, int(np.ceil(cw / patch)))
            acc = np.zeros(data.shape[-1])
            for ky in range(ny):
                for kx in range(nx):
                    sx = x0 + j * cw + (kx + 0.5) * cw / nx
                    sy = y0 + i * ch + (ky + 0.5) * ch / ny
                    acc += bilinear_sample(data, sy / patch - 0.5, sx / patch - 0.5)
            pooled[i, j] = acc / (nx * ny)
    return pooled


def roi_features(mixer: MixerParams, grid, box, patch: int) -> Tensor:
    """Box-pooled pseudo-query rows for the ROI-align baselines."""
    cfg = mixer.config
    pooled = roi_align_pool(grid, box, patch, out=2)
    flat = Tensor(pooled.reshape(1, -1))
    rows = ad.linear(flat, mixer.proj["w"], mixer.proj["b"])
    rows = ad.reshape(rows, (cfg.n_query_tokens, cfg.d))
    if cfg.variant == "roi_align_mlp":
        h = ad.linear(rows, mixer.proj["mlp_w1"], mixer.proj["mlp_b1"])
        h = ad.gelu(h)
        rows = ad.linear(h, mixer.proj["mlp_w2"], mixer.proj["mlp_b2"])
    return rows


def sam_query_features(mixer: MixerParams, m_hat: Tensor) -> Tensor:
    """Decode directly from the mask queries through a single projection."""
    cfg = mixer.config
    flat = ad.reshape(m_hat, (1, cfg.n_mask_tokens * cfg.d))
    rows = ad.linear(flat, mixer.proj["w"], mixer.proj["b"])
    return ad.reshape(rows, (cfg.n_query_tokens, cfg.d))


def predict_mask(m_hat: Tensor, i_hat: Tensor, grid: int) -> Tensor:
    """Mask logits: first mask token dotted with each dense token."""
    first = ad.row_slice(m_hat, 0, 1)
    logits = ad.matmul(first, ad.transpose(i_hat))
    return ad.reshape(logits, (grid, grid))
