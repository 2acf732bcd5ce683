import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ingraphnet import tensor as T
from ingraphnet.features import BoxPx, ValidationError
from ingraphnet.gradcheck import TOLERANCE, check_function
from ingraphnet.ingraph import InGraphConfig, TargetFeature, TargetKind
from ingraphnet.network import (
    ABLATIONS,
    Ablation,
    BranchScores,
    HOISample,
    InGraphNet,
    NetConfig,
    branch_losses,
    fuse_scores,
    interaction_pattern,
    loss,
)
from ingraphnet.tensor import Tensor

SMALL = NetConfig(ingraph=InGraphConfig(8, 4, 3), num_categories=3, pattern_size=8, head_hidden=6, spatial_dim=4)


def sample(cfg=SMALL, seed=0, labels=None):
    rng = np.random.default_rng(seed)
    d = cfg.ingraph.feature_dim
    maps = [TargetFeature(k, Tensor(rng.normal(size=(4, 4, d))))
            for k in (TargetKind.SCENE, TargetKind.HUMAN, TargetKind.OBJECT)]
    pattern = interaction_pattern(BoxPx(0, 0, 10, 20), BoxPx(6, 4, 18, 12), cfg.pattern_size)
    if labels is None:
        labels = np.array([1.0] + [0.0] * (cfg.num_categories - 1))
    return HOISample(*maps, pattern=pattern, labels=labels)


def model(cfg=SMALL, seed=0):
    return InGraphNet(cfg, np.random.default_rng(seed))


class TestInteractionPattern:
    def test_full_cover(self):
        b = BoxPx(2, 3, 10, 7)
        assert np.all(interaction_pattern(b, b, 16) == 1.0)

    def test_left_half(self):
        pat = interaction_pattern(BoxPx(0, 0, 4, 4), BoxPx(0, 0, 8, 4), 4)
        assert np.all(pat[:, :2, 0] == 1.0)
        assert np.all(pat[:, 2:, 0] == 0.0)
        assert np.all(pat[:, :, 1] == 1.0)

    def test_disjoint_boxes(self):
        pat = interaction_pattern(BoxPx(0, 0, 4, 4), BoxPx(10, 10, 16, 20), 32)
        assert not np.any(pat[:, :, 0] * pat[:, :, 1])
        assert pat[:, :, 0].any() and pat[:, :, 1].any()

    def test_zero_area_rejected(self):
        with pytest.raises(ValidationError):
            interaction_pattern(BoxPx(0, 0, 0, 4), BoxPx(0, 0, 4, 4), 8)


class TestBranches:
    def test_scores_are_k_probabilities(self):
        s = model()(sample())
        for v in (s.S_h, s.S_o, s.S_s):
            assert v.shape == (3,)
            assert np.all((v.data > 0) & (v.data < 1))

    def test_zero_human_head_gives_half(self):
        m = model()
        for p in m.human_head.parameters():
            p.data = np.zeros(p.shape)
        assert np.all(m(sample()).S_h.data == 0.5)

    def test_zero_object_head_gives_half(self):
        m = model()
        for p in m.object_head.parameters():
            p.data = np.zeros(p.shape)
        assert np.all(m(sample()).S_o.data == 0.5)

    def test_empty_pattern_with_zero_biases_gives_half(self):
        m = model()
        s = sample()
        s.pattern = np.zeros_like(s.pattern)
        for p in m.spatial.parameters():
            if p.name.endswith(".bias"):
                p.data = np.zeros(p.shape)
        assert np.all(m(s).S_s.data == 0.5)

    def test_g_ho_feeds_object_branch_only(self):
        m = model()
        s = sample()
        m.graphs["human_object"].A.data = np.random.default_rng(1).normal(size=m.graphs["human_object"].A.shape)
        ref = m(s)
        g_ho = m.reason(s)["g_ho"]
        cut = m(s, replace={"g_ho": Tensor(np.zeros(g_ho.shape))})
        assert np.array_equal(cut.S_h.data, ref.S_h.data)
        assert np.array_equal(cut.S_s.data, ref.S_s.data)
        assert not np.array_equal(cut.S_o.data, ref.S_o.data)

    def test_g_hs_feeds_human_branch(self):
        m = model()
        s = sample()
        g_hs = m.reason(s)["g_hs"]
        cut = m(s, replace={"g_hs": Tensor(np.zeros(g_hs.shape))})
        assert not np.array_equal(cut.S_h.data, m(s).S_h.data)

    def test_replace_unknown_output(self):
        m = InGraphNet(NetConfig(ingraph=SMALL.ingraph, num_categories=3, pattern_size=8,
                                 ablation=ABLATIONS["baseline"]), np.random.default_rng(0))
        with pytest.raises(KeyError):
            m(sample(), replace={"g_ho": Tensor(np.zeros((4, 4, 8)))})

    def test_deterministic(self):
        a, b = model(seed=3)(sample()), model(seed=3)(sample())
        for x, y in ((a.S_h, b.S_h), (a.S_o, b.S_o), (a.S_s, b.S_s)):
            assert x.data.tobytes() == y.data.tobytes()

    @pytest.mark.parametrize("part", ["human", "object", "spatial"])
    def test_branch_gradient_check(self, part):
        m = model()
        s = sample()
        for p in m.parameters():
            if p.name.endswith(".bias"):
                p.data = np.random.default_rng(4).normal(scale=0.1, size=p.shape)
        for g in m.graphs.values():
            g.A.data = np.random.default_rng(5).normal(scale=0.1, size=g.A.shape)
        head = {"human": m.human_head, "object": m.object_head, "spatial": m.spatial}[part]
        params = list(head.parameters())

        def build(_):
            scores = m(s)
            out = {"human": scores.S_h, "object": scores.S_o, "spatial": scores.S_s}[part]
            return T.bce_loss(out, s.labels)

        assert check_function(build, params) <= TOLERANCE


class TestAblations:
    def counts(self):
        out = {}
        for name, ab in ABLATIONS.items():
            cfg = NetConfig(ingraph=SMALL.ingraph, num_categories=3, pattern_size=8, ablation=ab)
            m = InGraphNet(cfg, np.random.default_rng(0))
            out[name] = (m.num_parameters(), sorted(m.graphs))
        return out

    def test_graph_sets(self):
        c = self.counts()
        assert c["baseline"][1] == []
        assert c["concat"][1] == []
        assert c["scene_wide"][1] == ["human_scene", "object_scene"]
        assert c["instance_wide"][1] == ["human_object"]
        assert c["full"][1] == ["human_object", "human_scene", "object_scene"]

    def test_parameter_ordering(self):
        c = {k: v[0] for k, v in self.counts().items()}
        assert c["baseline"] < c["concat"] < c["full"]
        assert c["baseline"] < c["instance_wide"] < c["scene_wide"] < c["full"]

    def test_baseline_ignores_scene(self):
        cfg = NetConfig(ingraph=SMALL.ingraph, num_categories=3, pattern_size=8, ablation=ABLATIONS["baseline"])
        m = InGraphNet(cfg, np.random.default_rng(0))
        s1, s2 = sample(cfg), sample(cfg)
        s2.f_s = TargetFeature(TargetKind.SCENE, Tensor(np.ones((4, 4, 8))))
        a, b = m(s1), m(s2)
        assert np.array_equal(a.S_h.data, b.S_h.data) and np.array_equal(a.S_o.data, b.S_o.data)

    def test_concat_excludes_graphs(self):
        with pytest.raises(ValidationError):
            Ablation(scene_wide=True, instance_wide=False, concat_only=True)

    def test_names(self):
        assert {k: v.name for k, v in ABLATIONS.items()} == {k: k for k in ABLATIONS}

    def test_config_json_round_trip(self):
        for ab in ABLATIONS.values():
            cfg = NetConfig(ingraph=InGraphConfig(16, 8, 4), num_categories=5, ablation=ab)
            assert NetConfig.from_json(cfg.to_json()) == cfg

    def test_config_json_rejects_unknown(self):
        doc = SMALL.to_json() | {"depth": 3}
        with pytest.raises(ValidationError, match="depth"):
            NetConfig.from_json(doc)


class TestLoss:
    def test_three_halves(self):
        half = Tensor([0.5])
        for label in (0.0, 1.0):
            value = loss(BranchScores(half, half, half), np.array([label])).item()
            assert abs(value - 3 * math.log(2)) <= 1e-12
        assert abs(3 * math.log(2) - 2.0794) < 1e-4

    def test_perfect_scores(self):
        y = np.array([1.0, 0.0, 1.0])
        assert loss(BranchScores(Tensor(y), Tensor(y), Tensor(y)), y).item() < 1e-5

    def test_permutation_equivariant(self):
        rng = np.random.default_rng(0)
        scores = [rng.uniform(0.05, 0.95, size=4) for _ in range(3)]
        y = np.array([1.0, 0.0, 0.0, 1.0])
        perm = np.array([2, 0, 3, 1])
        a = loss(BranchScores(*(Tensor(s) for s in scores)), y).item()
        b = loss(BranchScores(*(Tensor(s[perm]) for s in scores)), y[perm]).item()
        assert abs(a - b) <= 1e-12

    def test_every_parameter_receives_gradient(self):
        from ingraphnet.dataset import SynthConfig, generate_synthetic
        from ingraphnet.training import SampleSource, build_pairs

        cfg = NetConfig(ingraph=InGraphConfig(8, 4, 3), num_categories=4, pattern_size=16, head_hidden=8)
        m = InGraphNet(cfg, np.random.default_rng(0))
        images, anns = generate_synthetic(SynthConfig(num_images=1, seed=2))
        items = build_pairs(anns, 4, 16)
        (s,) = SampleSource(m, images, anns).samples(items[:1])
        T.backward(loss(m(s), s.labels))
        missing = [p.name for p in m.parameters() if p.grad is None]
        assert missing == []

    def test_labels_must_be_binary(self):
        with pytest.raises(ValidationError):
            sample(labels=np.array([0.5, 0.0, 0.0]))

    def test_branch_losses_sum(self):
        s = sample()
        scores = model()(s)
        parts = branch_losses(scores, s.labels)
        assert abs(sum(p.item() for p in parts) - loss(scores, s.labels).item()) <= 1e-12


class TestFusion:
    def test_upper_bound(self):
        one = np.ones(2)
        assert np.array_equal(fuse_scores(BranchScores(one, one, one), 1.0, 1.0), [2.0, 2.0])

    def test_worked_example(self):
        out = fuse_scores(BranchScores(np.array([0.6]), np.array([0.2]), np.array([0.5])), 0.9, 0.5)
        assert abs(out[0] - 0.18) <= 1e-12

    def test_spatial_zero_annihilates(self):
        out = fuse_scores(BranchScores(np.array([0.9]), np.array([0.8]), np.array([0.0])), 1.0, 0.7)
        assert out[0] == 0.0

    def test_accepts_tensors(self):
        t = Tensor([0.5])
        assert fuse_scores(BranchScores(t, t, t), 1.0, 1.0)[0] == 0.5


unit = st.floats(0.0, 1.0)


@settings(max_examples=200, deadline=None)
@given(unit, unit, unit, unit, unit, st.integers(0, 4), st.floats(0.0, 0.5))
def test_fusion_monotone_in_every_term(h_pre, o_pre, s_h, s_o, s_s, which, bump):
    terms = [h_pre, o_pre, s_h, s_o, s_s]
    bigger = list(terms)
    bigger[which] = min(1.0, bigger[which] + bump)

    def f(t):
        return fuse_scores(BranchScores(np.array([t[2]]), np.array([t[3]]), np.array([t[4]])), t[0], t[1])[0]

    assert f(bigger) >= f(terms)
    assert 0.0 <= f(terms) <= 2.0
