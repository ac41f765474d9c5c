"""Optimizer arithmetic, splits, and training-loop contracts."""

import numpy as np
import pytest

from avva.encoders import LatentWorld, synthetic_providers
from avva.ingest import ClipSegment, CorpusManifest, MediaRef, segment_media
from avva.model import NumericError, default_config, init_params, load_checkpoint, param_shapes
from avva.train import (
    AdamW,
    EpochStats,
    TrainConfig,
    TrainHistory,
    select_best,
    split_train_val,
    train,
)


def make_manifest(n_media=10, clips_per_media=1):
    entries = []
    for m in range(n_media):
        media = MediaRef(media_id=f"m{m:02d}", uri="", duration=3.0 * clips_per_media)
        entries.extend(segment_media(media, seed=0))
    return CorpusManifest(entries=entries, clip_length=3.0, created_with_seed=0)


def tiny_world(**kw):
    defaults = dict(seed=77, latent_dim=6, audio_dim=10, video_dim=8,
                    audio_frames=3, video_frames=2, noise_scale=0.0)
    defaults.update(kw)
    return LatentWorld(**defaults)


def tiny_model():
    return default_config(audio_dim=10, video_dim=8, hidden_dim=12, output_dim=8, heads=2)


class TestTrainConfig:
    def test_defaults_match_contract(self):
        cfg = TrainConfig()
        assert cfg.learning_rate == 1e-4
        assert cfg.weight_decay == 1e-4
        assert cfg.temperature == 0.07
        assert (cfg.beta1, cfg.beta2, cfg.eps) == (0.9, 0.999, 1e-8)

    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(val_fraction=1.0)
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=-1.0)


class TestSplit:
    def test_ten_media_ten_percent(self):
        manifest = make_manifest(10, 1)
        tr, va = split_train_val(manifest, 0.1, seed=4)
        assert len(va) == 1 and len(tr) == 9

    def test_same_seed_same_split(self):
        manifest = make_manifest(12, 3)
        a = split_train_val(manifest, 0.2, seed=9)
        b = split_train_val(manifest, 0.2, seed=9)
        assert a == b

    def test_partition_is_exact(self):
        manifest = make_manifest(8, 4)
        tr, va = split_train_val(manifest, 0.25, seed=1)
        all_ids = {c.clip_id for c in manifest.entries}
        assert {c.clip_id for c in tr} | {c.clip_id for c in va} == all_ids
        assert {c.clip_id for c in tr} & {c.clip_id for c in va} == set()

    def test_media_level_no_leakage(self):
        manifest = make_manifest(6, 5)
        tr, va = split_train_val(manifest, 0.3, seed=2)
        assert {c.media_id for c in tr} & {c.media_id for c in va} == set()

    def test_single_media_rejected(self):
        manifest = make_manifest(1, 5)
        with pytest.raises(ValueError, match="too small"):
            split_train_val(manifest, 0.2, seed=0)


class TestAdamW:
    def test_first_step_matches_hand_computation(self):
        lr, wd, b1, b2, eps = 1e-4, 1e-4, 0.9, 0.999, 1e-8
        theta0 = 0.7
        grad = 0.3  # e.g. derivative of a quadratic at theta0
        params = {"layer.w1": np.array([theta0]), "layer.b1": np.array([theta0])}
        grads = {"layer.w1": np.array([grad]), "layer.b1": np.array([grad])}
        opt = AdamW(params, lr, wd, beta1=b1, beta2=b2, eps=eps)
        opt.step(params, grads)
        mhat = grad  # (1-b1)g / (1-b1)
        vhat = grad * grad
        adam_step = mhat / (np.sqrt(vhat) + eps)
        expected_decayed = theta0 - lr * (adam_step + wd * theta0)
        expected_plain = theta0 - lr * adam_step
        assert params["layer.w1"][0] == pytest.approx(expected_decayed, abs=1e-15)
        assert params["layer.b1"][0] == pytest.approx(expected_plain, abs=1e-15)

    def test_second_step_bias_correction(self):
        lr, b1, b2, eps = 1e-2, 0.9, 0.999, 1e-8
        params = {"x.w1": np.array([1.0])}
        opt = AdamW(params, lr, 0.0, beta1=b1, beta2=b2, eps=eps)
        g1, g2 = 0.5, -0.2
        m = v = 0.0
        theta = 1.0
        for t, g in ((1, g1), (2, g2)):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            theta -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        opt.step(params, {"x.w1": np.array([g1])})
        opt.step(params, {"x.w1": np.array([g2])})
        assert params["x.w1"][0] == pytest.approx(theta, abs=1e-15)

    def test_census_mismatch_rejected(self):
        params = {"a.w1": np.zeros(2)}
        opt = AdamW(params, 1e-3, 0.0)
        with pytest.raises(ValueError, match="census"):
            opt.step(params, {"b.w1": np.zeros(2)})

    def test_census_counts(self):
        params = {"a.w1": np.zeros((2, 3)), "a.b1": np.zeros(3)}
        assert AdamW(params, 1e-3, 0.0).census() == {"a.w1": 6, "a.b1": 3}


@pytest.fixture(scope="module")
def small_corpus():
    manifest = make_manifest(8, 2)
    providers = synthetic_providers(tiny_world())
    tr, va = split_train_val(manifest, 0.2, seed=3)
    return manifest, providers, tr, va


class TestTrainLoop:
    def test_zero_learning_rate_keeps_params_bitwise(self, small_corpus):
        _, providers, tr, va = small_corpus
        model_cfg = tiny_model()
        for wd in (0.0, 1e-4):
            params = init_params(model_cfg, seed=1)
            before = {k: v.copy() for k, v in params.items()}
            cfg = TrainConfig(learning_rate=0.0, weight_decay=wd, batch_size=4,
                              epochs=1, seed=2)
            params, _ = train(params, providers, tr, va, cfg, model_cfg)
            for name in before:
                np.testing.assert_array_equal(params[name], before[name])

    def test_same_seed_identical_history_and_params(self, small_corpus):
        _, providers, tr, va = small_corpus
        model_cfg = tiny_model()
        cfg = TrainConfig(batch_size=4, epochs=2, seed=5)
        runs = []
        for _ in range(2):
            params = init_params(model_cfg, seed=5)
            params, history = train(params, providers, tr, va, cfg, model_cfg)
            runs.append((params, history))
        (p1, h1), (p2, h2) = runs
        assert [(e.train_loss, e.val_loss) for e in h1.epochs] == [
            (e.train_loss, e.val_loss) for e in h2.epochs
        ]
        for name in p1:
            np.testing.assert_array_equal(p1[name], p2[name])

    def test_optimizer_census_is_exactly_model_blocks(self, small_corpus):
        _, providers, _, _ = small_corpus
        model_cfg = tiny_model()
        params = init_params(model_cfg, seed=0)
        opt = AdamW(params, 1e-4, 1e-4)
        assert opt.block_names == sorted(param_shapes(model_cfg))
        for provider in (providers.audio, providers.video):
            assert provider.trainable_parameters() == {}

    def test_unfrozen_provider_rejected(self, small_corpus):
        _, providers, tr, va = small_corpus

        class Leaky(type(providers.audio)):
            def trainable_parameters(self):
                return {"leak.w": np.zeros(3)}

        leaky = Leaky(providers.audio.world, "audio")
        from avva.encoders import ProviderPair

        model_cfg = tiny_model()
        params = init_params(model_cfg, seed=0)
        with pytest.raises(ValueError, match="frozen"):
            train(params, ProviderPair(leaky, providers.video), tr, va,
                  TrainConfig(epochs=1), model_cfg)

    def test_checkpoints_and_history_written(self, small_corpus, tmp_path):
        _, providers, tr, va = small_corpus
        model_cfg = tiny_model()
        params = init_params(model_cfg, seed=1)
        cfg = TrainConfig(batch_size=4, epochs=3, seed=7)
        params, history = train(params, providers, tr, va, cfg, model_cfg, run_dir=tmp_path)
        assert (tmp_path / "history.csv").exists()
        assert len(history.epochs) == 3
        for e in history.epochs:
            assert e.checkpoint is not None
            loaded, cfg_loaded, extra = load_checkpoint(e.checkpoint)
            assert extra["epoch"] == e.epoch
        csv_text = (tmp_path / "history.csv").read_text()
        assert csv_text.splitlines()[0] == "epoch,train_loss,val_loss,wall_time_s,checkpoint"

    def test_non_finite_loss_aborts_with_context(self, small_corpus):
        _, providers, tr, va = small_corpus

        class Poisoned:
            modality = "audio"
            provider_id = "poison"

            def __init__(self, inner):
                self.inner = inner

            def encode(self, clip):
                seq = self.inner.encode(clip)

                class Raw:
                    features = np.full_like(seq.features, np.nan, dtype=np.float64)
                    modality = seq.modality
                    clip_id = seq.clip_id

                return Raw()

            def dim(self):
                return self.inner.dim()

            def trainable_parameters(self):
                return {}

        from avva.encoders import ProviderPair

        model_cfg = tiny_model()
        params = init_params(model_cfg, seed=1)
        bad = ProviderPair(Poisoned(providers.audio), providers.video)
        with pytest.raises(NumericError, match="epoch 0 step 0"):
            train(params, bad, tr, va, TrainConfig(epochs=1, batch_size=4), model_cfg)

    def test_validation_loss_decreases_on_clean_synthetic_corpus(self):
        # 256 clips, zero noise: the alignment task is cleanly learnable
        entries = []
        for m in range(64):
            media = MediaRef(media_id=f"m{m:03d}", uri="", duration=12.0)
            entries.extend(segment_media(media, seed=1))
        assert len(entries) == 256
        world = LatentWorld(seed=42, latent_dim=16, audio_dim=64, video_dim=48,
                            audio_frames=6, video_frames=4, noise_scale=0.0)
        providers = synthetic_providers(world)
        tr, va = split_train_val(entries, 0.1, seed=5)
        model_cfg = default_config(64, 48)
        params = init_params(model_cfg, seed=5)
        cfg = TrainConfig(epochs=5, batch_size=16, seed=5)
        _, history = train(params, providers, tr, va, cfg, model_cfg)
        losses = history.val_losses()
        assert all(a > b for a, b in zip(losses, losses[1:])), losses


class TestSelectBest:
    def _history(self, losses):
        return TrainHistory(epochs=[
            EpochStats(epoch=i, train_loss=0.0, val_loss=v, wall_time_s=0.0)
            for i, v in enumerate(losses)
        ])

    def test_argmin(self):
        assert select_best(self._history([3.0, 2.0, 2.5])) == 1

    def test_tie_breaks_earliest(self):
        assert select_best(self._history([2.0, 2.0, 2.0])) == 0

    def test_single_epoch(self):
        assert select_best(self._history([1.5])) == 0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            select_best(TrainHistory())
