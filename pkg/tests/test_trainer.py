import math
import statistics

import numpy as np
import pytest
import torch

from featsharp.data import synthetic_images
from featsharp.featurizer import FeaturizerSpec
from featsharp.numerics import ViewTransform
from featsharp.trainer import (
    AugConfig,
    Checkpoint,
    TrainConfig,
    UpsamplerModel,
    consistency_loss,
    evaluate,
    initial_checkpoint,
    load_checkpoint,
    make_optimizer,
    sample_view_transform,
    save_checkpoint,
    train,
    training_step,
)


def _cfg(**kw):
    base = dict(steps=3, batch_size=2, num_jitters=2, lr=1e-3,
                featurizer=FeaturizerSpec(input_resolution=16, channels=8))
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def images():
    return synthetic_images(6, 32, seed=3)


class TestConfig:
    def test_defaults_match_schedule(self):
        c = TrainConfig()
        assert (c.batch_size, c.lr, c.num_jitters, c.betas, c.eps) == (4, 1e-4, 5, (0.9, 0.999), 1e-8)

    @pytest.mark.parametrize("kw", [{"factor": 1}, {"lr": 0.0}, {"batch_size": 0}, {"steps": -1},
                                    {"upsampler": "nearest"}, {"residual": "tile"}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_dict_round_trip(self):
        c = _cfg(aug=AugConfig(scale_max=1.5))
        assert TrainConfig.from_dict(c.to_dict()) == c

    def test_unknown_keys_rejected(self):
        d = _cfg().to_dict()
        d["learning_rate"] = 0.1
        with pytest.raises(ValueError, match="unknown"):
            TrainConfig.from_dict(d)
        d = _cfg().to_dict()
        d["aug"]["shear"] = 0.1
        with pytest.raises(ValueError, match="unknown"):
            TrainConfig.from_dict(d)

    def test_digest_tracks_content(self):
        assert _cfg().digest() == _cfg().digest()
        assert _cfg().digest() != _cfg(seed=1).digest()


class TestViewSampling:
    def test_zeroed_ranges_identity(self):
        rng = np.random.default_rng(0)
        assert all(sample_view_transform(rng, AugConfig.none()).is_identity for _ in range(50))

    def test_seeded_sequence(self):
        r1, r2 = np.random.default_rng(5), np.random.default_rng(5)
        a = [sample_view_transform(r1, AugConfig()) for _ in range(20)]
        b = [sample_view_transform(r2, AugConfig()) for _ in range(20)]
        assert a == b

    def test_ranges(self):
        rng = np.random.default_rng(1)
        for _ in range(500):
            t = sample_view_transform(rng, AugConfig())
            assert 1.0 <= t.scale <= 1.8
            assert max(abs(s) for s in t.shift) <= 0.2
            assert abs(t.rotation) <= math.radians(15) + 1e-12
            assert max(abs(p) for p in t.perspective) <= 0.05

    def test_hflip_rate(self):
        rng = np.random.default_rng(2024)
        flips = sum(sample_view_transform(rng, AugConfig()).hflip for _ in range(10_000))
        # binomial sd is 0.005 at n=10k, so 0.02 is a 4-sigma band
        assert abs(flips / 10_000 - 0.5) < 0.02


class TestLoss:
    def test_constant_images_identity_views_zero(self):
        cfg = _cfg(upsampler="bilinear", use_debias=False)
        model = UpsamplerModel(cfg)
        imgs = torch.full((2, 32, 32, 3), 0.3, dtype=torch.float64)
        loss = consistency_loss(model, imgs, [ViewTransform()] * 3)
        assert loss.item() < 1e-25

    @pytest.mark.parametrize("kind", ["bilinear", "jbu", "tile", "s2", "featsharp"])
    def test_nonnegative_and_finite(self, kind, images):
        model = UpsamplerModel(_cfg(upsampler=kind))
        rng = np.random.default_rng(0)
        views = [sample_view_transform(rng, AugConfig()) for _ in range(2)]
        loss = consistency_loss(model, images[:2], views)
        assert torch.isfinite(loss) and loss.item() >= 0

    def test_equals_mean_of_per_view_losses(self, images):
        model = UpsamplerModel(_cfg())
        rng = np.random.default_rng(4)
        views = [sample_view_transform(rng, AugConfig()) for _ in range(3)]
        whole = consistency_loss(model, images[:2], views)
        each = [consistency_loss(model, images[:2], [v]) for v in views]
        assert whole.item() == pytest.approx(sum(e.item() for e in each) / 3, rel=1e-12)

    def test_needs_batch_and_views(self, images):
        model = UpsamplerModel(_cfg())
        with pytest.raises(ValueError):
            consistency_loss(model, images[0], [ViewTransform()])
        with pytest.raises(ValueError):
            consistency_loss(model, images[:1], [])


class TestTrain:
    def test_zero_steps_is_initialization(self, images):
        cfg = _cfg(steps=0)
        a, b = train(cfg, images), initial_checkpoint(cfg, images)
        assert a.step == 0 and a.loss_trace == []
        assert a.state.keys() == b.state.keys()
        assert all(torch.equal(a.state[k], b.state[k]) for k in a.state)

    def test_deterministic(self, images):
        a, b = train(_cfg(), images), train(_cfg(), images)
        assert a.loss_trace == b.loss_trace
        assert all(torch.equal(a.state[k], b.state[k]) for k in a.state)

    def test_parameters_move(self, images):
        ck = train(_cfg(steps=2), images)
        assert ck.step == 2 and len(ck.loss_trace) == 2
        assert any(torch.count_nonzero(ck.state[k]) for k in ck.state if k.startswith("sharpen.proj"))

    def test_missing_dataset(self):
        with pytest.raises(ValueError, match="missing dataset"):
            train(_cfg(), torch.zeros(0, 32, 32, 3, dtype=torch.float64))

    def test_wrong_resolution(self, images):
        with pytest.raises(ValueError):
            train(_cfg(), images[:, :16, :16])

    def test_nonfinite_loss_reports_seed(self, images):
        model = UpsamplerModel(_cfg(upsampler="bilinear"))
        with torch.no_grad():
            model.down.salience.fill_(float("nan"))
        opt = make_optimizer(model, model.cfg)
        with pytest.raises(FloatingPointError, match="batch seed 17"):
            training_step(model, images[:2], opt, np.random.default_rng(0), batch_seed=17)

    def test_periodic_checkpoints(self, images, tmp_path):
        train(_cfg(steps=4, checkpoint_every=2, upsampler="bilinear"), images, out_dir=tmp_path)
        names = sorted(p.name for p in tmp_path.iterdir())
        assert names == ["step_000002.fskp", "step_000004.fskp"]
        assert load_checkpoint(tmp_path / names[0]).step == 2


class TestCheckpoint:
    def test_round_trip(self, images, tmp_path):
        ck = train(_cfg(steps=2), images)
        save_checkpoint(ck, tmp_path / "a.fskp")
        back = load_checkpoint(tmp_path / "a.fskp")
        assert back.config == ck.config and back.step == 2 and back.loss_trace == ck.loss_trace
        assert all(torch.equal(back.state[k], ck.state[k]) for k in ck.state)
        assert torch.equal(back.stats.rotation, ck.stats.rotation) and back.stats.scale == ck.stats.scale
        save_checkpoint(back, tmp_path / "b.fskp")
        assert (tmp_path / "a.fskp").read_bytes() == (tmp_path / "b.fskp").read_bytes()

    def test_layout(self, images, tmp_path):
        save_checkpoint(initial_checkpoint(_cfg(), images), tmp_path / "c.fskp")
        raw = (tmp_path / "c.fskp").read_bytes()
        assert raw[:4] == b"FSKP" and int.from_bytes(raw[4:8], "little") == 1

    def test_version_mismatch(self, images, tmp_path):
        path = tmp_path / "c.fskp"
        save_checkpoint(initial_checkpoint(_cfg(), images), path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = (2).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="version"):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.fskp").write_bytes(b"NOPE\x01\x00\x00\x00")
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "x.fskp")

    def test_evaluate_rejects_version(self, images):
        ck = initial_checkpoint(_cfg(), images)
        stale = Checkpoint(ck.config, ck.state, ck.stats, version=0)
        with pytest.raises(ValueError, match="version"):
            evaluate(stale, images)


class TestEvaluate:
    def test_bilinear_smoke(self, images):
        ck = train(_cfg(upsampler="bilinear", steps=1), images)
        r = evaluate(ck, images[:3], num_jitters=2, mmd_samples=50)
        for v in (r.fidelity, r.tv, r.crf, r.mmd2):
            assert math.isfinite(v)
        assert r.fidelity > 0 and r.tv >= 0 and r.crf >= 0
        assert r.metadata["num_images"] == 3 and r.metadata["config_digest"] == ck.config.digest()

    def test_no_gradients(self, images):
        ck = initial_checkpoint(_cfg(), images)
        evaluate(ck, images[:2], num_jitters=1, mmd_samples=20)
        assert all(not v.requires_grad for v in ck.state.values())

    def test_deterministic(self, images):
        ck = initial_checkpoint(_cfg(upsampler="s2"), images)
        a = evaluate(ck, images[:2], num_jitters=2, mmd_samples=30)
        b = evaluate(ck, images[:2], num_jitters=2, mmd_samples=30)
        assert a.to_json() == b.to_json()

    def test_empty(self, images):
        with pytest.raises(ValueError):
            evaluate(initial_checkpoint(_cfg(), images), images[:0])


@pytest.mark.slow
@pytest.mark.parametrize("kind", ["jbu", "tile", "s2"])
def test_loss_decreases_at_desk_scale(kind):
    # bilinear and featsharp are covered by the full-length acceptance run
    cfg = TrainConfig(steps=400, lr=1e-3, upsampler=kind, featurizer=FeaturizerSpec(input_resolution=64))
    trace = train(cfg, synthetic_images(256, cfg.image_resolution, 7)).loss_trace
    k = len(trace) // 10
    assert statistics.median(trace[-k:]) < statistics.median(trace[:k])
