import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ingraphnet import tensor as T
from ingraphnet.features import BoxPx, FeatureExtractor, Image, ValidationError, roi_bins, roi_pool
from ingraphnet.gradcheck import TOLERANCE, check_function
from ingraphnet.tensor import Tensor


def image(seed=0, size=32):
    return Image(np.random.default_rng(seed).uniform(size=(size, size, 3)), "img")


def extractor(d=8, seed=0):
    return FeatureExtractor(d, np.random.default_rng(seed), stem_dim=6, roi_size=4)


class TestBoxes:
    def test_degenerate(self):
        with pytest.raises(ValidationError):
            BoxPx(3, 0, 3, 5)

    def test_clip(self):
        assert BoxPx(-4, 2, 40, 9).clip(32, 32) == BoxPx(0, 2, 32, 9)

    def test_clip_outside(self):
        with pytest.raises(ValidationError, match="outside"):
            BoxPx(40, 40, 50, 50).clip(32, 32)

    def test_union(self):
        assert BoxPx(0, 5, 4, 8).union(BoxPx(2, 1, 9, 6)) == BoxPx(0, 1, 9, 8)

    def test_small_image_rejected(self):
        with pytest.raises(ValidationError):
            Image(np.zeros((8, 32, 3)), "tiny")


class TestStem:
    def test_stride_four(self):
        assert extractor().backbone_stem(image()).shape == (8, 8, 6)

    def test_deterministic(self):
        a = extractor(seed=1).backbone_stem(image())
        b = extractor(seed=1).backbone_stem(image())
        assert a.data.tobytes() == b.data.tobytes()

    def test_gradient_check(self):
        ex = extractor()
        for p in ex.parameters():
            p.data = p.data + np.random.default_rng(2).normal(scale=0.05, size=p.shape)
        img = image(size=16)
        probe = Tensor(np.random.default_rng(3).normal(size=(4, 4, 6)))
        params = [ex.stage1.weight, ex.stage1.bias, ex.stage2.weight, ex.stage2.bias]
        err = check_function(lambda _: T.sum_all(T.mul(ex.backbone_stem(img), probe)), params)
        assert err <= TOLERANCE


class TestRoiPool:
    def test_whole_map_identity(self):
        fmap = np.random.default_rng(0).normal(size=(4, 4, 3))
        out = roi_pool(Tensor(fmap), BoxPx(0, 0, 16, 16), (4, 4), stride=4)
        assert np.array_equal(out.data, fmap)

    def test_constant_map(self):
        out = roi_pool(Tensor(np.full((8, 8, 2), 1.25)), BoxPx(3, 5, 27, 30), (4, 4))
        assert np.all(out.data == 1.25)

    def test_six_by_six_oracle(self):
        fmap = np.random.default_rng(1).normal(size=(6, 6, 2))
        out = roi_pool(Tensor(fmap), BoxPx(1, 1, 5, 5), (2, 2), stride=1)
        for i in range(2):
            for j in range(2):
                for c in range(2):
                    cells = [fmap[y, x, c] for y in range(1 + 2 * i, 3 + 2 * i) for x in range(1 + 2 * j, 3 + 2 * j)]
                    assert out.data[i, j, c] == max(cells)

    def test_box_outside_map(self):
        with pytest.raises(ValidationError):
            roi_pool(Tensor(np.zeros((4, 4, 1))), BoxPx(20, 20, 30, 30), (2, 2), stride=4)

    def test_gradient_reaches_argmax_only(self):
        fmap = Tensor(np.arange(16.0).reshape(4, 4, 1), requires_grad=True)
        T.backward(T.sum_all(roi_pool(fmap, BoxPx(0, 0, 4, 4), (1, 1), stride=1)))
        expected = np.zeros((4, 4, 1))
        expected[3, 3, 0] = 1.0
        assert np.array_equal(fmap.grad, expected)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 30), st.integers(0, 30), st.integers(1, 32), st.integers(1, 32),
       st.integers(1, 5), st.integers(1, 5))
def test_bins_cover_box_and_are_never_empty(x, y, w, h, hr, wr):
    box = BoxPx(x, y, min(x + w, 32), min(y + h, 32))
    bins = roi_bins(box, (8, 8), (hr, wr), stride=4)
    assert len(bins) == hr * wr
    for y0, y1, x0, x1 in bins:
        assert 0 <= y0 < y1 <= 8 and 0 <= x0 < x1 <= 8


class TestTargets:
    def test_three_equal_shapes(self):
        f_s, f_h, f_o = extractor().extract_targets(image(), BoxPx(2, 2, 14, 30), BoxPx(16, 4, 30, 20))
        assert f_s.map.shape == f_h.map.shape == f_o.map.shape == (4, 4, 8)

    def test_scene_independent_of_boxes(self):
        ex = extractor()
        a = ex.extract_targets(image(), BoxPx(2, 2, 14, 30), BoxPx(16, 4, 30, 20))[0]
        b = ex.extract_targets(image(), BoxPx(0, 0, 5, 5), BoxPx(20, 20, 31, 31))[0]
        assert np.array_equal(a.map.data, b.map.data)

    def test_stem_runs_once_per_image(self):
        ex = extractor()
        pairs = [(BoxPx(2, 2, 14, 30), BoxPx(16, 4, 30, 20))] * 5
        out = ex.extract_pairs(image(), pairs)
        assert len(out) == 5
        assert ex.stem_calls == 1

    def test_boxes_clipped_to_image(self):
        f_h = extractor().extract_targets(image(), BoxPx(-10, -10, 14, 30), BoxPx(16, 4, 60, 20))[1]
        assert np.all(np.isfinite(f_h.map.data))

    def test_end_to_end_gradient_reaches_stem(self):
        ex = extractor()
        _, f_h, f_o = ex.extract_targets(image(), BoxPx(2, 2, 14, 30), BoxPx(16, 4, 30, 20))
        T.backward(T.sum_all(T.add(f_h.map, f_o.map)))
        for p in ex.parameters():
            assert p.grad is not None and np.any(p.grad), p.name
