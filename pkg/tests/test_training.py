import json
import math

import numpy as np
import pytest

from ingraphnet.dataset import SynthConfig, generate_synthetic, write_dataset, write_features, FeatureRecord
from ingraphnet.features import ValidationError
from ingraphnet.gradcheck import NETWORK_GROUPS
from ingraphnet.tensor import Parameter
from ingraphnet.training import (
    NumericError,
    RunConfig,
    SampleSource,
    batch_indices,
    build_pairs,
    clip_grad_norm,
    load_model,
    new_model,
    run_train,
    save_model,
    sidecar_path,
    train,
    trainable_parameters,
)

TINY = dict(feature_dim=8, reduced_dim=4, node_count=3, head_hidden=8, pattern_size=16, batch_size=2)


@pytest.fixture(scope="module")
def data():
    return generate_synthetic(SynthConfig(num_images=6, seed=3))


@pytest.fixture
def data_dir(tmp_path, data):
    write_dataset(tmp_path / "data", *data)
    return tmp_path


class TestRunConfig:
    def test_defaults_follow_reference_recipe(self):
        cfg = RunConfig()
        assert (cfg.learning_rate, cfg.weight_decay, cfg.momentum) == (1e-4, 1e-4, 0.9)
        assert (cfg.feature_dim, cfg.reduced_dim, cfg.node_count, cfg.num_categories) == (32, 16, 8, 4)
        assert cfg.batch_size == 4

    def test_unknown_key(self):
        with pytest.raises(ValidationError, match="learning_rat"):
            RunConfig.from_dict({"learning_rat": 0.1})

    @pytest.mark.parametrize("kw", [{"iterations": 0}, {"batch_size": 0}, {"seed": -1},
                                    {"lr_schedule": "step"}, {"grad_clip": 0.0}, {"learning_rate": -1.0},
                                    {"concat_only": True}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            RunConfig(**kw)

    def test_file_round_trip(self, tmp_path):
        cfg = RunConfig(iterations=7, grad_clip=2.0, node_sweep=[2, 3])
        (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
        assert RunConfig.from_file(tmp_path / "c.json") == cfg

    def test_invalid_json_file(self, tmp_path):
        (tmp_path / "c.json").write_text("{not json")
        with pytest.raises(ValidationError, match="invalid JSON"):
            RunConfig.from_file(tmp_path / "c.json")

    def test_cosine_schedule(self):
        cfg = RunConfig(learning_rate=0.1, iterations=10, lr_schedule="cosine")
        assert cfg.optim_at(0).learning_rate == pytest.approx(0.1)
        assert cfg.optim_at(5).learning_rate == pytest.approx(0.05)
        assert RunConfig(learning_rate=0.1).optim_at(99).learning_rate == 0.1


class TestBatching:
    def test_each_epoch_is_a_permutation(self):
        seen = [i for it in range(5) for i in batch_indices(10, 2, it, seed=1)]
        assert sorted(seen) == list(range(10))

    def test_depends_only_on_position(self):
        cache = {}
        run = [batch_indices(7, 3, it, 4, cache) for it in range(6)]
        assert run[4] == batch_indices(7, 3, 4, 4)


class TestTraining:
    def test_smoke(self, data):
        cfg = RunConfig(iterations=10, learning_rate=0.01, **TINY)
        res = train(cfg, *data)
        assert len(res.history) == 10
        assert all(math.isfinite(r["loss"]) for r in res.history)
        r = res.history[0]
        assert r["loss"] == pytest.approx(r["loss_h"] + r["loss_o"] + r["loss_s"], abs=1e-12)

    def test_non_finite_loss_names_group(self, data):
        cfg = RunConfig(iterations=3, **TINY)
        model = new_model(cfg)
        model.object_head.fc1.weight.data[0, 0] = np.nan
        with pytest.raises(NumericError, match="iteration 1.*parameter group '(" + "|".join(NETWORK_GROUPS) + ")'"):
            train(cfg, *data, model=model)

    def test_clip_grad_norm(self):
        a, b = Parameter("a", np.zeros(2)), Parameter("b", np.zeros(1))
        a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
        assert clip_grad_norm([a, b], 1.0) == 5.0
        assert np.allclose(np.concatenate([a.grad, b.grad]), [0.6, 0.0, 0.8], atol=1e-15)

    def test_feature_bypass_skips_stem(self, data):
        cfg = RunConfig(iterations=2, **TINY)
        model = new_model(cfg)
        images, anns = data
        items = build_pairs(anns, cfg.num_categories, cfg.pattern_size)
        samples = SampleSource(model, images, anns).samples(items)
        recs = [FeatureRecord(anns[it.image_index].image_id, it.pair_index, s.f_s.map.data, s.f_h.map.data,
                              s.f_o.map.data) for it, s in zip(items, samples)]
        stem_before = {p.name: p.data.copy() for p in model.extractor.parameters()}
        source = SampleSource(model, images, anns, recs)
        assert not source.uses_backbone
        assert not any(p.group == "stem" for p in trainable_parameters(model, source))
        calls = model.extractor.stem_calls
        train(cfg, images, anns, model=model, features=recs)
        assert model.extractor.stem_calls == calls
        assert all(np.array_equal(p.data, stem_before[p.name]) for p in model.extractor.parameters())

    def test_missing_feature_record(self, data):
        cfg = RunConfig(iterations=1, **TINY)
        with pytest.raises(ValidationError, match="no record"):
            train(cfg, *data, features=[])


class TestCheckpoints:
    def test_sidecar(self, tmp_path):
        cfg = RunConfig(**TINY)
        save_model(tmp_path / "m.igk", new_model(cfg), 12)
        doc = json.loads(sidecar_path(tmp_path / "m.igk").read_text())
        assert doc["iteration"] == 12
        assert doc["network"]["D"] == 8 and doc["network"]["N"] == 3

    def test_load_round_trip(self, tmp_path):
        cfg = RunConfig(**TINY)
        m = new_model(cfg)
        m.graphs["human_scene"].A.momentum_buffer[:] = 0.5
        save_model(tmp_path / "m.igk", m, 3)
        back, it = load_model(tmp_path / "m.igk", expected=cfg.net)
        assert it == 3
        for p, q in zip(m.parameters(), back.parameters()):
            assert p.name == q.name and p.data.tobytes() == q.data.tobytes()
            assert p.momentum_buffer.tobytes() == q.momentum_buffer.tobytes()

    def test_shape_mismatch_is_descriptive(self, tmp_path):
        save_model(tmp_path / "m.igk", new_model(RunConfig(**TINY)), 0)
        other = RunConfig(**{**TINY, "node_count": 5})
        with pytest.raises(ValidationError, match="does not match"):
            load_model(tmp_path / "m.igk", expected=other.net)

    def test_missing_sidecar(self, tmp_path):
        save_model(tmp_path / "m.igk", new_model(RunConfig(**TINY)), 0)
        sidecar_path(tmp_path / "m.igk").unlink()
        with pytest.raises(ValidationError, match="missing network description"):
            load_model(tmp_path / "m.igk")

    def test_resume_is_bit_exact(self, data_dir):
        base = dict(data_dir=str(data_dir / "data"), learning_rate=0.02, **TINY)
        full = run_train(RunConfig(iterations=6, checkpoint=str(data_dir / "full.igk"), **base))
        run_train(RunConfig(iterations=3, checkpoint=str(data_dir / "part.igk"), **base))
        resumed = run_train(RunConfig(iterations=6, checkpoint=str(data_dir / "part.igk"), resume=True, **base))
        assert resumed.start_iteration == 3
        # first forward after resuming reproduces the uninterrupted run exactly
        assert resumed.history[0] == full.history[3]
        assert (data_dir / "full.igk").read_bytes() == (data_dir / "part.igk").read_bytes()
