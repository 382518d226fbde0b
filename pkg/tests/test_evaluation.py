"""Dice metric, token policy and per-volume evaluation."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from conunetr.evaluation import age_means, binarize, dice_score, evaluate, nearest_token, predict_masks, token_policy
from conunetr.model import build_model, preset_config

masks = st.integers(1, 12).flatmap(lambda n: hnp.arrays(np.uint8, (n, n), elements=st.integers(0, 1)))
mask_pairs = st.integers(1, 12).flatmap(
    lambda n: st.tuples(hnp.arrays(np.uint8, (n, n), elements=st.integers(0, 1)),
                        hnp.arrays(np.uint8, (n, n), elements=st.integers(0, 1)))
)


class TestDice:
    def test_hand_values(self):
        a = np.array([[1, 1], [0, 0]])
        b = np.array([[1, 0], [1, 0]])
        assert dice_score(a, b) == 0.5
        assert dice_score(a, a) == 1.0
        assert dice_score(a, 1 - a) == 0.0

    def test_both_empty(self):
        assert dice_score(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0

    def test_one_empty(self):
        assert dice_score(np.zeros((3, 3)), np.eye(3)) == 0.0

    @given(mask_pairs)
    def test_symmetric_and_bounded(self, pair):
        a, b = pair
        d = dice_score(a, b)
        assert d == dice_score(b, a)
        assert 0.0 <= d <= 1.0

    @given(masks)
    def test_self_overlap_is_one(self, a):
        assert dice_score(a, a) == 1.0

    def test_non_binary(self):
        with pytest.raises(ValueError, match="not binary"):
            dice_score(np.array([0, 2]), np.array([0, 1]))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shapes differ"):
            dice_score(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_volume_pooling_differs_from_slice_mean(self):
        pred = np.array([[[1, 1, 1, 1]], [[0, 0, 0, 0]]])
        true = np.array([[[1, 1, 1, 1]], [[1, 0, 0, 0]]])
        # pooled 2*4/(4+5) vs per-slice mean (1 + 0)/2
        assert dice_score(pred, true) == pytest.approx(8 / 9)


class TestBinarize:
    @given(hnp.arrays(np.float64, (2, 2, 3, 3), elements=st.floats(-50, 50)))
    def test_softmax_and_logits_agree(self, logits):
        e = np.exp(logits - logits.max(1, keepdims=True))
        probs = e / e.sum(1, keepdims=True)
        strict = np.abs(logits[:, 1] - logits[:, 0]) > 1e-9
        assert np.array_equal(binarize(probs)[strict], binarize(logits)[strict])

    def test_tie_goes_to_background(self):
        assert not binarize(np.full((2, 1, 1), 0.5)).any()


class TestTokenPolicy:
    @pytest.mark.parametrize(
        "age,trained,token", [(1, [0, 1, 2], 1), (3, [0, 1, 2], 2), (1, [0, 2], 0), (2, [0], 0), (0, [1, 2], 1)]
    )
    def test_nearest(self, age, trained, token):
        assert nearest_token(age, trained) == token

    def test_policy(self):
        assert token_policy([2, 0])(3) == 2

    def test_empty(self):
        with pytest.raises(ValueError):
            nearest_token(0, [])


class TestEvaluate:
    def test_oracle_predictor(self, small_data):
        manifest, samples = small_data
        vols = {v.volume_id: samples[v.volume_id] for v in manifest.select("test", 0)}
        results, means = evaluate(None, vols, predictor=lambda s: np.stack([x.mask for x in s]))
        assert all(r.dice == 1.0 for r in results)
        assert set(means) == {0, 2}

    def test_per_age_means(self, small_data):
        manifest, samples = small_data
        vols = {v.volume_id: samples[v.volume_id] for v in manifest.select("test", 0)}
        results, means = evaluate(None, vols, predictor=lambda s: np.zeros((len(s), 64, 64), bool))
        assert means == age_means(results)
        assert all(m == 0.0 for m in means.values())

    def test_model_path(self, small_data):
        manifest, samples = small_data
        model = build_model(preset_config("tiny"))
        vol = manifest.select("test", 0)[0]
        pred = predict_masks(model, samples[vol.volume_id], batch_size=2)
        assert pred.shape == (len(vol.annotated), 64, 64) and pred.dtype == bool

    def test_empty(self):
        with pytest.raises(ValueError, match="empty test set"):
            evaluate(None, {})

    def test_size_mismatch(self, small_data):
        manifest, samples = small_data
        model = build_model(preset_config("tiny", img_size=128))
        vol = manifest.select("test", 0)[0]
        with pytest.raises(ValueError, match="expects 128x128"):
            evaluate(model, {vol.volume_id: samples[vol.volume_id]})
