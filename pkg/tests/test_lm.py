import itertools
import math

import numpy as np
import pytest

from regioncap import autodiff as ad
from regioncap import lm
from regioncap import scenegen as sg
from regioncap.seeds import rng_for


TINY = lm.LMConfig(vocab_size=8, d_lm=16, n_blocks=1, heads=2, mlp_dim=32,
                   max_len=24)


class TestTokenizer:
    def test_roundtrip(self):
        ids = lm.tokenize("a red triangle")
        assert lm.detokenize(ids) == "a red triangle"

    def test_empty_string(self):
        assert lm.tokenize("").tolist() == []
        assert lm.detokenize([]) == ""

    def test_unknown_word_maps_to_unk(self):
        with pytest.warns(UserWarning):
            ids = lm.tokenize("a zamboni")
        assert ids[1] == lm.UNK

    def test_reserved_ids_distinct_and_dense(self):
        v = lm.default_vocabulary()
        assert (lm.PAD, lm.BOS, lm.EOS, lm.UNK) == (0, 1, 2, 3)
        assert sorted(v.index.values()) == list(range(len(v)))

    def test_generated_captions_roundtrip(self):
        v = lm.default_vocabulary()
        count = 0
        seed = 0
        while count < 1000:
            scene = sg.generate_scene(seed, sg.SceneConfig())
            for region in sg.regions_of(scene):
                text = lm.detokenize(region.caption, v)
                assert (v.encode(text.split(), add_eos=True)
                        == region.caption).all()
                count += 1
            seed += 1

    def test_vocab_file_roundtrip(self, tmp_path):
        v = lm.default_vocabulary()
        path = str(tmp_path / "vocab.txt")
        v.save(path)
        back = lm.Vocabulary.load(path)
        assert back.tokens == v.tokens


class TestLmForward:
    def _params(self, seed=0):
        return lm.build_lm(TINY, seed=seed)

    def test_causality_exact(self):
        params = self._params()
        rng = rng_for(0, "ids")
        ids = rng.integers(4, TINY.vocab_size, size=6)
        with ad.no_grad():
            base = lm.lm_forward(params, None, ids).data
        for k in range(1, 6):
            mutated = ids.copy()
            mutated[k] = 4 + (mutated[k] - 4 + 1) % (TINY.vocab_size - 4)
            with ad.no_grad():
                out = lm.lm_forward(params, None, mutated).data
            np.testing.assert_array_equal(out[:k], base[:k])
            assert not np.allclose(out[k], base[k])

    def test_bos_only_yields_one_row(self):
        params = self._params()
        with ad.no_grad():
            out = lm.lm_forward(params, None, [lm.BOS])
        assert out.shape == (1, TINY.vocab_size)

    def test_length_overflow_rejected(self):
        params = self._params()
        with pytest.raises(ad.ContractError):
            lm.lm_forward(params, None, [lm.BOS] * (TINY.max_len + 1))

    def test_gradient_flows_into_prefix_not_frozen_lm(self):
        params = self._params()
        params.set_trainable(False)
        prefix = ad.Tensor(rng_for(1, "p").normal(size=(3, TINY.d_lm)),
                           requires_grad=True)
        loss = lm.caption_loss(lm.lm_forward(params, prefix, [lm.BOS, 4, 5]),
                               [4, 5, lm.EOS])
        ad.backward(loss)
        assert prefix.grad is not None and np.abs(prefix.grad).sum() > 0
        assert all(t.grad is None for t in params.tensors.values())


class TestCaptionLoss:
    def test_uniform_logits_give_log_vocab(self):
        logits = ad.Tensor(np.zeros((3, 11)))
        for eps in (0.0, 0.1, 0.5):
            loss = lm.caption_loss(logits, [4, 5, lm.EOS], eps=eps)
            assert abs(loss.item() - math.log(11)) < 1e-12

    def test_confident_correct_logits_drive_loss_to_zero(self):
        targets = [4, 6, lm.EOS]
        logits = np.full((3, 8), -1000.0)
        for i, t in enumerate(targets):
            logits[i, t] = 1000.0
        loss = lm.caption_loss(ad.Tensor(logits), targets, eps=0.0)
        assert loss.item() < 1e-10

    def test_hand_computed_smoothed_ce(self):
        rng = rng_for(2, "loss")
        logits = rng.normal(size=(3, 7))
        targets = [4, 2, 6]
        eps = 0.1
        logp = logits - logits.max(axis=1, keepdims=True)
        logp = logp - np.log(np.exp(logp).sum(axis=1, keepdims=True))
        hand = 0.0
        for i, t in enumerate(targets):
            q = np.full(7, eps / 7)
            q[t] += 1.0 - eps
            hand += -(q * logp[i]).sum()
        hand /= 3
        got = lm.caption_loss(ad.Tensor(logits), targets, eps=eps).item()
        assert abs(got - hand) < 1e-10

    def test_loss_decomposes_over_positions(self):
        rng = rng_for(3, "loss")
        logits = rng.normal(size=(4, 9))
        targets = [4, 5, 6, lm.EOS]
        whole = lm.caption_loss(ad.Tensor(logits), targets, eps=0.1).item()
        parts = [lm.caption_loss(ad.Tensor(logits[i:i + 1]), targets[i:i + 1],
                                 eps=0.1).item() for i in range(4)]
        assert abs(whole - sum(parts) / 4) < 1e-12

    def test_pad_positions_excluded(self):
        rng = rng_for(4, "loss")
        logits = rng.normal(size=(3, 9))
        full = lm.caption_loss(ad.Tensor(logits[:2]), [4, lm.EOS], eps=0.1).item()
        padded = lm.caption_loss(ad.Tensor(logits), [4, lm.EOS, lm.PAD],
                                 eps=0.1).item()
        assert abs(full - padded * 3 / 2) < 1e-9 or abs(full - padded) < 1e-9

    def test_length_mismatch_rejected(self):
        with pytest.raises(ad.ContractError):
            lm.caption_loss(ad.Tensor(np.zeros((2, 5))), [4, 5, lm.EOS])


class TestBeamSearch:
    def _params(self, seed):
        return lm.build_lm(TINY, seed=seed)

    def test_beam_one_equals_greedy(self):
        params = self._params(5)
        prefix = ad.Tensor(rng_for(5, "p").normal(size=(2, TINY.d_lm)))
        got = lm.beam_search(params, prefix, beam=1, max_len=8)
        ids = [lm.BOS]
        with ad.no_grad():
            for _ in range(8):
                logits = lm.lm_forward(params, prefix, ids).data[-1]
                order = np.argsort(-logits)
                nxt = next(int(v) for v in order if v not in (lm.PAD, lm.BOS))
                ids.append(nxt)
                if nxt == lm.EOS:
                    break
        assert got.tolist() == ids[1:]

    def test_exhaustive_oracle_tiny_vocab(self):
        cfg = lm.LMConfig(vocab_size=4, d_lm=8, n_blocks=1, heads=2, mlp_dim=16,
                          max_len=12)
        max_len = 3
        for seed in range(8):
            params = lm.build_lm(cfg, seed=seed)
            prefix = ad.Tensor(rng_for(seed, "pp").normal(size=(1, cfg.d_lm)))
            got = lm.beam_search(params, prefix, beam=4 ** max_len + 1,
                                 max_len=max_len)

            def score(seq):
                with ad.no_grad():
                    total = 0.0
                    ids = [lm.BOS]
                    for tok in seq:
                        logits = lm.lm_forward(params, prefix, ids).data[-1]
                        logits = logits - logits.max()
                        logp = logits - math.log(np.exp(logits).sum())
                        total += logp[tok]
                        ids.append(tok)
                return total / len(seq)

            candidates = []
            alphabet = [v for v in range(cfg.vocab_size) if v not in (lm.PAD, lm.BOS)]
            for n in range(1, max_len + 1):
                for seq in itertools.product(alphabet, repeat=n):
                    if lm.EOS in seq[:-1]:
                        continue
                    if n < max_len and seq[-1] != lm.EOS:
                        continue
                    candidates.append(seq)
            best = max(candidates, key=score)
            assert got.tolist() == list(best), f"seed {seed}"

    def test_deterministic_across_runs(self):
        params = self._params(6)
        prefix = ad.Tensor(rng_for(6, "p").normal(size=(2, TINY.d_lm)))
        a = lm.beam_search(params, prefix, beam=3, max_len=10)
        b = lm.beam_search(params, prefix, beam=3, max_len=10)
        assert (a == b).all()

    def test_beam_zero_rejected(self):
        with pytest.raises(ad.ContractError):
            lm.beam_search(self._params(7), None, beam=0)


class TestPretrainLm:
    def test_holdout_perplexity_below_threshold(self, pretrained_lm):
        params, ppl = pretrained_lm
        assert ppl < 1.5
        assert not any(t.requires_grad for t in params.tensors.values())

    def test_empty_corpus_rejected(self):
        with pytest.raises(ad.ContractError):
            lm.pretrain_lm([], lm.LMConfig())

    def test_nonconvergence_raises_with_diagnostics(self, lm_corpus):
        with pytest.raises(lm.TrainingError, match="perplexity"):
            lm.pretrain_lm(lm_corpus[:200], lm.LMConfig(),
                           lm.LMTrainConfig(steps=5, ppl_threshold=1.5, seed=0))

    def test_larger_lm_no_worse_at_equal_steps(self, lm_corpus):
        small = lm.LMConfig(d_lm=32, n_blocks=2, heads=2, mlp_dim=64)
        large = lm.LMConfig(d_lm=64, n_blocks=2, heads=2, mlp_dim=128)
        wins = 0
        for seed in range(3):
            tc = lm.LMTrainConfig(steps=160, batch=8, ppl_threshold=float("inf"),
                                  seed=seed)
            _, ppl_small = lm.pretrain_lm(lm_corpus[:600], small, tc)
            _, ppl_large = lm.pretrain_lm(lm_corpus[:600], large, tc)
            wins += int(ppl_large <= ppl_small)
        assert wins >= 2
