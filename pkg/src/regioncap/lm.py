"""Tokenizer, frozen tiny causal language model, prefix conditioning, and decoding.

The LM is a small pre-norm causal transformer pretrained on grammar text,
then frozen; region features reach it only as a projected prefix, so
gradient flows into the mixer but never into LM weights unless the LM
learning rate is raised explicitly.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import grammar
from .optim import AdamW
from .seeds import rng_for

PAD, BOS, EOS, UNK = 0, 1, 2, 3
_RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")


class TrainingError(RuntimeError):
    """Training failed to meet its contract (divergence, non-convergence)."""


class Vocabulary:
    """Dense token ids: reserved PAD/BOS/EOS/UNK then the grammar words."""

    def __init__(self, words=grammar.WORDS):
        self.tokens = list(_RESERVED) + list(words)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def encode(self, words, add_eos: bool = False) -> np.ndarray:
        ids = []
        for w in words:
            i = self.index.get(w)
            if i is None:
                warnings.warn(f"unknown word {w!r} mapped to UNK")
                i = UNK
            ids.append(i)
        if add_eos:
            ids.append(EOS)
        return np.array(ids, dtype=np.int64)

    def decode_words(self, ids) -> list:
        return [self.tokens[int(i)] for i in ids if int(i) > UNK]

    def save(self, path: str):
        with open(path, "w") as f:
            f.write("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        with open(path) as f:
            tokens = f.read().splitlines()
        if tokens[:4] != list(_RESERVED):
            raise ValueError(f"vocabulary file {path} lacks the reserved tokens")
        vocab = cls(words=tokens[4:])
        return vocab


_DEFAULT_VOCAB = None


def default_vocabulary() -> Vocabulary:
    global _DEFAULT_VOCAB
    if _DEFAULT_VOCAB is None:
        _DEFAULT_VOCAB = Vocabulary()
    return _DEFAULT_VOCAB


def tokenize(text: str, vocab: Vocabulary | None = None) -> np.ndarray:
    return (vocab or default_vocabulary()).encode(text.split())


def detokenize(ids, vocab: Vocabulary | None = None) -> str:
    return " ".join((vocab or default_vocabulary()).decode_words(ids))


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class LMConfig:
    vocab_size: int = len(_RESERVED) + len(grammar.WORDS)
    d_lm: int = 64
    n_blocks: int = 2
    heads: int = 4
    mlp_dim: int = 128
    max_len: int = 48


@dataclass
class LMParams:
    config: LMConfig
    tensors: dict = field(default_factory=dict)   # name -> Tensor
    blocks: list = field(default_factory=list)    # per-block component dicts

    def set_trainable(self, flag: bool):
        for t in self.tensors.values():
            t.requires_grad = flag
            if not flag:
                t.grad = None


def build_lm(config: LMConfig, seed: int, trainable: bool = True) -> LMParams:
    rng = rng_for(seed, "lm")
    d, v = config.d_lm, config.vocab_size
    params = LMParams(config=config)
    reg = params.tensors

    def p(name, shape, std=None):
        std = d ** -0.5 if std is None else std
        t = ad.parameter(rng, shape, std=std, trainable=trainable)
        reg[name] = t
        return t

    def norm(name):
        g = ad.Tensor(np.ones(d), requires_grad=trainable)
        b = ad.Tensor(np.zeros(d), requires_grad=trainable)
        reg[f"{name}/gain"] = g
        reg[f"{name}/bias"] = b
        return g, b

    p("tok_emb", (v, d), std=0.1)
    p("pos_emb", (config.max_len, d), std=0.1)
    for i in range(config.n_blocks):
        base = f"block{i}"
        attn = ad.attention_params(rng, d, d, std=d ** -0.5, trainable=trainable)
        for k, t in attn.tensors().items():
            reg[f"{base}/attn/{k}"] = t
        block = {"attn": attn, "ln1": norm(f"{base}/ln1"), "ln2": norm(f"{base}/ln2")}
        block["mlp_w1"] = p(f"{base}/mlp/w1", (d, config.mlp_dim))
        block["mlp_b1"] = p(f"{base}/mlp/b1", (config.mlp_dim,), std=0.0)
        block["mlp_w2"] = p(f"{base}/mlp/w2", (config.mlp_dim, d),
                            std=config.mlp_dim ** -0.5)
        block["mlp_b2"] = p(f"{base}/mlp/b2", (d,), std=0.0)
        params.blocks.append(block)
    norm("final_ln")
    p("head_w", (d, v))
    p("head_b", (v,), std=0.0)
    return params


def lm_forward(params: LMParams, prefix, ids, pos_offset: int = 0) -> ad.Tensor:
    """Causal logits for each position of ``ids`` after an optional prefix.

    Row j of the result scores the token following ids[j]; it depends only
    on the prefix and ids[0..j].  ``pos_offset`` shifts the positional
    embeddings; pretraining randomizes it so the frozen LM stays usable
    behind prefixes of any length.
    """
    cfg = params.config
    ids = np.asarray(ids, dtype=np.int64)
    k = len(ids)
    r = 0 if prefix is None else prefix.shape[0]
    if pos_offset + r + k > cfg.max_len:
        raise ad.ContractError(
            f"sequence length {pos_offset + r + k} exceeds max_len {cfg.max_len}")
    if k == 0:
        raise ad.ContractError("lm_forward needs at least one input token")
    reg = params.tensors
    tok = ad.embed_rows(reg["tok_emb"], ids)
    h = tok if prefix is None else ad.concat([prefix, tok], axis=0)
    h = ad.add(h, ad.row_slice(reg["pos_emb"], pos_offset, pos_offset + r + k))
    for block in params.blocks:
        g1, b1 = block["ln1"]
        n1 = ad.layer_norm(h, g1, b1)
        h = ad.add(h, ad.mha(block["attn"], n1, n1, n1, cfg.heads, causal=True))
        g2, b2 = block["ln2"]
        n2 = ad.layer_norm(h, g2, b2)
        m = ad.linear(n2, block["mlp_w1"], block["mlp_b1"])
        m = ad.gelu(m)
        m = ad.linear(m, block["mlp_w2"], block["mlp_b2"])
        h = ad.add(h, m)
    h = ad.layer_norm(h, reg["final_ln/gain"], reg["final_ln/bias"])
    h = ad.row_slice(h, r, r + k)
    return ad.linear(h, reg["head_w"], reg["head_b"])


def caption_loss(logits: ad.Tensor, targets, eps: float = 0.1) -> ad.Tensor:
    """Label-smoothed cross entropy averaged over non-PAD target positions.

    Smoothed target distribution: 1 - eps + eps/V on the gold id, eps/V
    elsewhere, applied uniformly (EOS included).
    """
    targets = np.asarray(targets, dtype=np.int64)
    k, v = logits.shape
    if len(targets) != k:
        raise ad.ContractError(
            f"targets length {len(targets)} != logits rows {k}")
    keep = targets != PAD
    n = int(keep.sum())
    if n == 0:
        raise ad.ContractError("all target positions are PAD")
    logp = ad.log_softmax(logits, axis=-1)
    gold = ad.gather_cols(logp, np.where(keep, targets, 0))
    mask = ad.Tensor(keep.astype(np.float64))
    gold_term = ad.sum_all(ad.mul(gold, mask))
    if eps == 0.0:
        return ad.scale(gold_term, -1.0 / n)
    row_sums = ad.reshape(ad.matmul(logp, ad.Tensor(np.ones((v, 1)))), (k,))
    smooth_term = ad.sum_all(ad.mul(row_sums, mask))
    total = ad.add(ad.scale(gold_term, 1.0 - eps), ad.scale(smooth_term, eps / v))
    return ad.scale(total, -1.0 / n)


def sequence_loss(params: LMParams, prefix, token_ids, eps: float = 0.1,
                  pos_offset: int = 0) -> ad.Tensor:
    """Next-token loss for one sequence: inputs [BOS, w1..wn], targets [w1..wn, EOS]."""
    token_ids = np.asarray(token_ids, dtype=np.int64)
    if len(token_ids) == 0 or token_ids[-1] != EOS:
        raise ad.ContractError("target sequence must be non-empty and end with EOS")
    inputs = np.concatenate([[BOS], token_ids[:-1]])
    logits = lm_forward(params, prefix, inputs, pos_offset=pos_offset)
    return caption_loss(logits, token_ids, eps=eps)


# ---------------------------------------------------------------------------
# decoding


def _next_log_probs(params: LMParams, prefix, ids) -> np.ndarray:
    logits = lm_forward(params, prefix, ids).data[-1]
    shifted = logits - logits.max()
    return shifted - math.log(np.exp(shifted).sum())


def beam_search(params: LMParams, prefix, beam: int = 3, max_len: int = 16,
                length_norm: bool = True) -> np.ndarray:
    """Beam search over log-probs; returns the best id sequence (with EOS).

    Finished hypotheses retire on EOS; the winner maximizes log-prob divided
    by generated-token count (when ``length_norm``).  PAD and BOS are never
    proposed.  beam=1 reduces to greedy decoding.
    """
    if beam < 1:
        raise ad.ContractError(f"beam must be >= 1, got {beam}")
    banned = (PAD, BOS)

    def score(logp, length):
        return logp / length if length_norm else logp

    with ad.no_grad():
        live = [([BOS], 0.0)]
        finished = []
        for _ in range(max_len):
            candidates = []
            for ids, logp in live:
                lp = _next_log_probs(params, prefix, np.array(ids))
                for v in range(len(lp)):
                    if v in banned:
                        continue
                    candidates.append((ids + [v], logp + lp[v]))
            candidates.sort(key=lambda c: -c[1])
            live = []
            for ids, logp in candidates[:beam]:
                if ids[-1] == EOS:
                    finished.append((ids, score(logp, len(ids) - 1)))
                else:
                    live.append((ids, logp))
            if not live:
                break
        for ids, logp in live:
            finished.append((ids, score(logp, len(ids) - 1)))
    best = max(finished, key=lambda c: c[1])
    return np.array(best[0][1:], dtype=np.int64)


def perplexity(params: LMParams, sentences, vocab: Vocabulary) -> float:
    """exp(mean per-token plain CE) over tokenized sentences (EOS included)."""
    total, count = 0.0, 0
    with ad.no_grad():
        for words in sentences:
            ids = vocab.encode(words, add_eos=True)
            loss = sequence_loss(params, None, ids, eps=0.0)
            total += loss.item() * len(ids)
            count += len(ids)
    return math.exp(total / count)


# ---------------------------------------------------------------------------
# pretraining


@dataclass(frozen=True)
class LMTrainConfig:
    steps: int = 2400
    batch: int = 16
    lr: float = 3e-3
    holdout_frac: float = 0.1
    ppl_threshold: float = 1.5
    offset_max: int = 14    # randomized position offsets keep the LM prefix-ready
    seed: int = 0


def pretrain_lm(sentences, config: LMConfig = LMConfig(),
                train_config: LMTrainConfig = LMTrainConfig(),
                vocab: Vocabulary | None = None) -> tuple:
    """Train a small causal LM on grammar text until held-out perplexity clears
    the configured threshold; returns (frozen LMParams, held-out perplexity)."""
    if not sentences:
        raise ad.ContractError("pretrain_lm needs a non-empty corpus")
    vocab = vocab or default_vocabulary()
    rng = rng_for(train_config.seed, "lmsplit")
    order = rng.permutation(len(sentences))
    n_hold = max(1, int(len(sentences) * train_config.holdout_frac))
    holdout = [sentences[i] for i in order[:n_hold]]
    train = [sentences[i] for i in order[n_hold:]]

    params = build_lm(config, seed=train_config.seed, trainable=True)
    opt = AdamW(params.tensors, lr=train_config.lr, total_steps=train_config.steps)
    for step in range(train_config.steps):
        batch_rng = rng_for(train_config.seed, "lmbatch", step)
        idx = batch_rng.integers(0, len(train), size=train_config.batch)
        offsets = batch_rng.integers(0, train_config.offset_max + 1,
                                     size=train_config.batch)
        opt.zero_grad()
        losses = []
        for i, off in zip(idx, offsets):
            ids = vocab.encode(train[int(i)], add_eos=True)
            losses.append(sequence_loss(params, None, ids, eps=0.0,
                                        pos_offset=int(off)))
        loss = ad.scale(ad.sum_all(ad.concat(
            [ad.reshape(l, (1,)) for l in losses], axis=0)), 1.0 / len(losses))
        ad.backward(loss)
        if not np.isfinite(loss.item()):
            raise TrainingError(f"non-finite LM loss at step {step}")
        opt.step()

    opt.zero_grad()
    ppl = perplexity(params, holdout, vocab)
    if ppl >= train_config.ppl_threshold:
        raise TrainingError(
            f"LM did not converge: held-out perplexity {ppl:.3f} >= "
            f"threshold {train_config.ppl_threshold} after {train_config.steps} steps "
            f"({len(train)} train / {len(holdout)} held-out sentences)")
    params.set_trainable(False)
    return params, ppl
