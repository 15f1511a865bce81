import numpy as np
import pytest

from regioncap import autodiff as ad
from regioncap.prompts import FourierPE, PromptEncoder, fourier_pe
from regioncap.seeds import rng_for

D, CANVAS, GRID = 64, 64, 8


@pytest.fixture(scope="module")
def enc():
    return PromptEncoder(D, CANVAS, GRID, seed=0)


class TestFourierPE:
    def test_identical_coords_identical_embeddings(self):
        pe = FourierPE(D, seed=1)
        a = pe.embed(np.array([[0.3, 0.7]]))
        b = pe.embed(np.array([[0.3, 0.7]]))
        assert (a == b).all()

    def test_embedding_norm_is_sqrt_half_d(self):
        pe = FourierPE(D, seed=2)
        rng = rng_for(0, "coords")
        for _ in range(20):
            v = pe.embed(rng.random(2)[None, :])[0]
            assert abs(np.linalg.norm(v) - np.sqrt(D / 2)) < 1e-9

    def test_nearby_coords_more_similar_than_distant(self):
        pe = FourierPE(D, seed=3)
        rng = rng_for(1, "triples")
        wins = 0
        trials = 1000
        for _ in range(trials):
            a, b, c = rng.random((3, 2))
            da, dc = np.linalg.norm(a - b), np.linalg.norm(a - c)
            near, far = (b, c) if da < dc else (c, b)
            ea = pe.embed(a[None])[0]
            sim_near = ea @ pe.embed(near[None])[0]
            sim_far = ea @ pe.embed(far[None])[0]
            wins += int(sim_near > sim_far)
        assert wins / trials >= 0.95

    def test_out_of_range_coords_rejected(self):
        pe = FourierPE(D, seed=4)
        with pytest.raises(ad.ContractError):
            pe.embed(np.array([[1.2, 0.0]]))
        with pytest.raises(ad.ContractError):
            fourier_pe(pe, (-0.1, 0.5))


class TestPromptEncoder:
    def test_whole_canvas_box_uses_unit_corners(self, enc):
        out = enc.encode_box((0, 0, CANVAS, CANVAS))
        want0 = enc.pe.embed(np.array([[0.0, 0.0]]))[0] \
            + enc.tensors["type_top_left"].data
        want1 = enc.pe.embed(np.array([[1.0, 1.0]]))[0] \
            + enc.tensors["type_bottom_right"].data
        np.testing.assert_allclose(out.tokens.data[0], want0, atol=1e-12)
        np.testing.assert_allclose(out.tokens.data[1], want1, atol=1e-12)

    def test_different_boxes_different_tokens(self, enc):
        a = enc.encode_box((4, 4, 20, 20)).tokens.data
        b = enc.encode_box((5, 4, 20, 20)).tokens.data
        assert not (a == b).all()

    def test_arity_contract(self, enc):
        assert enc.encode_box((1, 2, 30, 40)).tokens.shape == (2, D)
        assert enc.encode_point((10, 12)).tokens.shape == (1, D)
        mask = np.zeros((CANVAS, CANVAS))
        mask[10:20, 10:20] = 1.0
        assert enc.encode_mask(mask).tokens.shape == (enc.n_mask_tokens, D)

    def test_degenerate_box_rejected(self, enc):
        with pytest.raises(ad.ContractError):
            enc.encode_box((5, 5, 5, 9))

    def test_out_of_canvas_geometry_rejected(self, enc):
        with pytest.raises(ad.ContractError):
            enc.encode_box((0, 0, CANVAS + 1, 4))
        with pytest.raises(ad.ContractError):
            enc.encode_point((CANVAS, 0))

    def test_kinds_tagged(self, enc):
        assert enc.encode_box((0, 0, 4, 4)).kind == "box"
        assert enc.encode_point((3, 3)).kind == "point"

    def test_empty_mask_rejected(self, enc):
        with pytest.raises(ad.ContractError):
            enc.encode_mask(np.zeros((CANVAS, CANVAS)))
