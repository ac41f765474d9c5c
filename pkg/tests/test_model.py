"""Alignment head: forward semantics, closed-form losses, gradient oracles,
and checkpoint round-trips."""

import numpy as np
import pytest
from helpers import finite_difference_check

from avva import kernels
from avva.encoders import FeatureSequence
from avva.model import (
    AlignerConfig,
    CheckpointError,
    CrossModalConfig,
    EmbeddingPair,
    LossConfig,
    ModelConfig,
    NumericError,
    aligner_forward,
    cross_modal_attend,
    default_config,
    embed_pair,
    info_nce,
    init_params,
    is_decayed,
    load_checkpoint,
    loss_and_grad,
    loss_gradient,
    param_shapes,
    pool,
    save_checkpoint,
)
from avva.util import child_rng

TINY = default_config(audio_dim=4, video_dim=5, hidden_dim=6, output_dim=8, heads=2,
                      dropout=0.2, temperature=0.07)


def tiny_params(seed=3):
    return init_params(TINY, seed=seed)


def feature_batch(b=3, ta=2, tv=3, da=4, dv=5, seed=7):
    rng = np.random.default_rng(seed)
    return [(rng.standard_normal((ta, da)), rng.standard_normal((tv, dv))) for _ in range(b)]


class TestConfigs:
    def test_validation(self):
        with pytest.raises(ValueError):
            AlignerConfig(input_dim=0)
        with pytest.raises(ValueError):
            AlignerConfig(input_dim=4, dropout=1.0)
        with pytest.raises(ValueError):
            CrossModalConfig(heads=7, model_dim=768)
        with pytest.raises(ValueError):
            LossConfig(temperature=0.0)
        with pytest.raises(ValueError, match="output_dim"):
            ModelConfig(
                audio_aligner=AlignerConfig(4, 8, 16),
                video_aligner=AlignerConfig(4, 8, 32),
                cross_modal=CrossModalConfig(heads=2, model_dim=16),
            )

    def test_default_heads_and_dims(self):
        cfg = default_config(64, 48)
        assert cfg.cross_modal.heads == 8
        assert cfg.cross_modal.model_dim == 768
        assert cfg.audio_aligner.hidden_dim == 1024
        assert cfg.loss.temperature == 0.07
        assert cfg.audio_aligner.dropout == 0.2
        assert cfg.cross_modal.model_dim // cfg.cross_modal.heads == 96

    def test_roundtrip_dict(self):
        cfg = default_config(12, 10, hidden_dim=6, output_dim=8, heads=4)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestInit:
    def test_shapes_and_values(self):
        params = tiny_params()
        shapes = param_shapes(TINY)
        assert set(params) == set(shapes)
        for name, block in params.items():
            assert block.shape == shapes[name]
        np.testing.assert_array_equal(params["audio_aligner.b1"], 0.0)
        np.testing.assert_array_equal(params["audio_aligner.ln_gain"], 1.0)
        bound = 1.0 / np.sqrt(TINY.audio_aligner.input_dim)
        assert np.abs(params["audio_aligner.w1"]).max() <= bound

    def test_deterministic(self):
        a, b = tiny_params(5), tiny_params(5)
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])

    def test_decay_filter(self):
        assert is_decayed("audio_aligner.w1")
        assert is_decayed("attn_audio2video.wo")
        assert not is_decayed("audio_aligner.b1")
        assert not is_decayed("audio_aligner.ln_gain")
        assert not is_decayed("attn_video2audio.bo")


class TestAligner:
    def test_zero_input_zero_params_gives_zero(self):
        params = {name: np.zeros(shape) for name, shape in param_shapes(TINY).items()}
        x = np.zeros((3, 4))
        out = aligner_forward(x, params, TINY.audio_aligner, modality="audio")
        np.testing.assert_array_equal(out, 0.0)

    def test_eval_mode_deterministic(self):
        params = tiny_params()
        x = np.random.default_rng(0).standard_normal((4, 4))
        a = aligner_forward(x, params, TINY.audio_aligner, modality="audio", training=False)
        b = aligner_forward(x, params, TINY.audio_aligner, modality="audio", training=False)
        np.testing.assert_array_equal(a, b)
        assert a.shape == (4, 8)

    def test_dropout_active_only_in_training(self):
        params = tiny_params()
        x = np.random.default_rng(1).standard_normal((6, 4))
        base = aligner_forward(x, params, TINY.audio_aligner, modality="audio")
        dropped = aligner_forward(x, params, TINY.audio_aligner, modality="audio",
                                  training=True, rng=child_rng(1, "dropout"))
        assert not np.array_equal(base, dropped)

    def test_feature_sequence_input_and_dim_check(self):
        params = tiny_params()
        seq = FeatureSequence("c1", "audio", np.ones((2, 4), dtype=np.float32), "p")
        out = aligner_forward(seq, params, TINY.audio_aligner)
        assert out.shape == (2, 8)
        with pytest.raises(ValueError, match="input_dim"):
            aligner_forward(np.ones((2, 9)), params, TINY.audio_aligner, modality="audio")

    def test_jacobian_matches_finite_differences(self):
        # project the (T=2, D=5) output to a scalar with fixed coefficients;
        # its gradient exercises every Jacobian column
        cfg = AlignerConfig(input_dim=5, hidden_dim=6, output_dim=8, dropout=0.0)
        model_cfg = ModelConfig(
            audio_aligner=cfg,
            video_aligner=AlignerConfig(5, 6, 8, 0.0),
            cross_modal=CrossModalConfig(heads=2, model_dim=8),
        )
        params = init_params(model_cfg, seed=2)
        aligner_blocks = {n: params[n] for n in params if n.startswith("video_aligner")}
        rng = np.random.default_rng(4)
        x = rng.standard_normal((2, 5))
        coeffs = rng.standard_normal((2, 8))

        from avva.model import _aligner_bwd, _aligner_fwd, zero_grads

        def loss_fn(p):
            out, _ = _aligner_fwd(x[None], {**params, **p}, "video_aligner", cfg, False, None)
            return float((out[0] * coeffs).sum())

        out, cache = _aligner_fwd(x[None], params, "video_aligner", cfg, False, None)
        grads = zero_grads(params)
        _aligner_bwd(coeffs[None], cache, params, "video_aligner", grads)
        analytic = {n: grads[n] for n in aligner_blocks}
        finite_difference_check(loss_fn, aligner_blocks, analytic)


class TestCrossModalAttention:
    CFG = CrossModalConfig(heads=2, model_dim=8)

    def test_single_video_frame_attention_is_that_row(self):
        params = tiny_params()
        rng = np.random.default_rng(3)
        audio = rng.standard_normal((4, 8))
        video = rng.standard_normal((1, 8))
        a_ctx, _ = cross_modal_attend(audio, video, params, self.CFG)
        projected_v = video @ params["attn_audio2video.wv"] + params["attn_audio2video.bv"]
        expected = audio + (projected_v @ params["attn_audio2video.wo"]
                            + params["attn_audio2video.bo"])
        np.testing.assert_allclose(a_ctx, expected, atol=1e-12)

    def test_identical_video_rows_make_order_irrelevant(self):
        params = tiny_params()
        rng = np.random.default_rng(4)
        audio = rng.standard_normal((3, 8))
        row = rng.standard_normal(8)
        video = np.tile(row, (5, 1))
        a_ctx1, _ = cross_modal_attend(audio, video, params, self.CFG)
        a_ctx2, _ = cross_modal_attend(audio, video[::-1].copy(), params, self.CFG)
        np.testing.assert_allclose(a_ctx1, a_ctx2, atol=1e-12)

    def test_weights_match_brute_force_softmax_with_identity_projections(self):
        cfg = CrossModalConfig(heads=8, model_dim=768)
        shapes = param_shapes(default_config(4, 4))
        params = {}
        for name, shape in shapes.items():
            if name.endswith(("wq", "wk", "wv", "wo")) and shape == (768, 768):
                params[name] = np.eye(768)
            elif name.endswith("ln_gain"):
                params[name] = np.ones(shape)
            else:
                params[name] = np.zeros(shape)
        rng = np.random.default_rng(5)
        audio = rng.standard_normal((2, 768))
        video = rng.standard_normal((3, 768))
        _, _, w_av, _ = cross_modal_attend(audio, video, params, cfg, return_weights=True)
        dh = 768 // 8
        for h in range(8):
            q = audio[:, h * dh : (h + 1) * dh]
            k = video[:, h * dh : (h + 1) * dh]
            scores = q @ k.T / np.sqrt(96.0)
            e = np.exp(scores - scores.max(axis=1, keepdims=True))
            expected = e / e.sum(axis=1, keepdims=True)
            np.testing.assert_allclose(w_av[h], expected, atol=1e-6)

    def test_rows_are_stochastic(self):
        params = tiny_params()
        rng = np.random.default_rng(6)
        audio = rng.standard_normal((5, 8))
        video = rng.standard_normal((7, 8))
        _, _, w_av, w_va = cross_modal_attend(audio, video, params, self.CFG, return_weights=True)
        np.testing.assert_allclose(w_av.sum(axis=-1), 1.0, atol=1e-6)
        np.testing.assert_allclose(w_va.sum(axis=-1), 1.0, atol=1e-6)

    def test_width_mismatch_rejected(self):
        params = tiny_params()
        with pytest.raises(ValueError, match="model_dim"):
            cross_modal_attend(np.zeros((2, 6)), np.zeros((2, 8)), params, self.CFG)
        with pytest.raises(ValueError, match="non-empty"):
            cross_modal_attend(np.zeros((0, 8)), np.zeros((2, 8)), params, self.CFG)


class TestPool:
    def test_single_row(self):
        row = np.array([[1.0, 2.0, 3.0]])
        np.testing.assert_array_equal(pool(row), row[0])

    def test_opposite_rows_cancel(self):
        v = np.array([1.0, -2.0, 0.5])
        np.testing.assert_allclose(pool(np.stack([v, -v])), 0.0, atol=1e-15)

    def test_three_basis_rows(self):
        rows = np.eye(3)
        np.testing.assert_allclose(pool(rows), np.full(3, 1.0 / 3.0))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            pool(np.zeros((0, 3)))


class TestEmbedPair:
    def test_unit_norms(self):
        params = tiny_params()
        rng = np.random.default_rng(8)
        pair = embed_pair(rng.standard_normal((3, 4)), rng.standard_normal((2, 5)), params, TINY)
        assert abs(np.linalg.norm(pair.audio_embedding) - 1.0) < 1e-6
        assert abs(np.linalg.norm(pair.video_embedding) - 1.0) < 1e-6
        assert pair.normalized

    def test_zero_output_projection_reduces_to_aligner_path(self):
        params = tiny_params()
        for prefix in ("attn_audio2video", "attn_video2audio"):
            params[f"{prefix}.wo"] = np.zeros_like(params[f"{prefix}.wo"])
            params[f"{prefix}.bo"] = np.zeros_like(params[f"{prefix}.bo"])
        rng = np.random.default_rng(9)
        xa, xv = rng.standard_normal((3, 4)), rng.standard_normal((2, 5))
        pair = embed_pair(xa, xv, params, TINY)
        aligned = aligner_forward(xa, params, TINY.audio_aligner, modality="audio")
        expected = aligned.mean(axis=0)
        expected /= np.linalg.norm(expected)
        np.testing.assert_allclose(pair.audio_embedding, expected, atol=1e-12)

    def test_matches_straight_line_reimplementation(self):
        cfg = default_config(audio_dim=6, video_dim=6, hidden_dim=5, output_dim=8,
                             heads=2, dropout=0.0)
        params = init_params(cfg, seed=12)
        rng = np.random.default_rng(13)
        xa = rng.standard_normal((3, 6))
        xv = rng.standard_normal((2, 6))
        got = embed_pair(xa, xv, params, cfg)

        def mlp(x, p):
            h = x @ params[f"{p}.w1"] + params[f"{p}.b1"]
            mu = h.mean(axis=1, keepdims=True)
            var = ((h - mu) ** 2).mean(axis=1, keepdims=True)
            ln = params[f"{p}.ln_gain"] * (h - mu) / np.sqrt(var + 1e-5) + params[f"{p}.ln_bias"]
            return np.maximum(ln, 0.0) @ params[f"{p}.w2"] + params[f"{p}.b2"]

        def attend(q_in, kv_in, p):
            q = q_in @ params[f"{p}.wq"] + params[f"{p}.bq"]
            k = kv_in @ params[f"{p}.wk"] + params[f"{p}.bk"]
            v = kv_in @ params[f"{p}.wv"] + params[f"{p}.bv"]
            out = np.zeros_like(q)
            for h in range(2):
                sl = slice(h * 4, (h + 1) * 4)
                scores = q[:, sl] @ k[:, sl].T / 2.0  # sqrt(4)
                e = np.exp(scores - scores.max(axis=1, keepdims=True))
                w = e / e.sum(axis=1, keepdims=True)
                out[:, sl] = w @ v[:, sl]
            return q_in + out @ params[f"{p}.wo"] + params[f"{p}.bo"]

        a1, v1 = mlp(xa, "audio_aligner"), mlp(xv, "video_aligner")
        a2 = attend(a1, v1, "attn_audio2video")
        v2 = attend(v1, a1, "attn_video2audio")
        ea = a2.mean(axis=0)
        ev = v2.mean(axis=0)
        ea /= np.linalg.norm(ea)
        ev /= np.linalg.norm(ev)
        np.testing.assert_allclose(got.audio_embedding, ea, atol=1e-6)
        np.testing.assert_allclose(got.video_embedding, ev, atol=1e-6)


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def pair_of(a, v, clip_id="c"):
    return EmbeddingPair(clip_id=clip_id, audio_embedding=unit(a), video_embedding=unit(v))


class TestInfoNCE:
    def test_single_pair_loss_exactly_zero(self):
        batch = [pair_of([1, 0, 0], [0, 1, 0])]
        assert info_nce(batch, LossConfig()) == 0.0

    def test_all_equal_similarities_give_log_b(self):
        e = unit([1.0, 2.0, 3.0])
        batch = [EmbeddingPair(clip_id=f"c{i}", audio_embedding=e, video_embedding=e)
                 for i in range(4)]
        assert info_nce(batch, LossConfig()) == pytest.approx(np.log(4.0), abs=1e-9)

    def test_orthogonal_two_pair_closed_form(self):
        batch = [pair_of([1, 0], [1, 0], "c0"), pair_of([0, 1], [0, 1], "c1")]
        expected = np.log(1.0 + np.exp(-1.0 / 0.07))
        assert info_nce(batch, LossConfig(temperature=0.07)) == pytest.approx(expected, abs=1e-9)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(20)
        batch = [pair_of(rng.standard_normal(6), rng.standard_normal(6), f"c{i}")
                 for i in range(5)]
        base = info_nce(batch)
        for _ in range(5):
            order = rng.permutation(5)
            assert info_nce([batch[i] for i in order]) == pytest.approx(base, abs=1e-12)

    def test_loss_decreases_when_matched_similarity_rises(self):
        # rotate v0 toward a0 inside the subspace orthogonal to every other
        # embedding, so only the (0, 0) similarity changes
        basis = np.eye(8)
        a = [basis[0], basis[1], basis[2]]
        v_others = [basis[4], basis[5]]
        losses = []
        for theta in (1.2, 0.8, 0.4, 0.1):
            v0 = np.cos(theta) * basis[0] + np.sin(theta) * basis[6]
            batch = [pair_of(a[0], v0, "c0"), pair_of(a[1], v_others[0], "c1"),
                     pair_of(a[2], v_others[1], "c2")]
            losses.append(info_nce(batch))
        assert all(x > y for x, y in zip(losses, losses[1:]))

    def test_unnormalized_rejected(self):
        bad = EmbeddingPair(clip_id="c", audio_embedding=np.array([2.0, 0.0]),
                            video_embedding=np.array([1.0, 0.0]), normalized=False)
        with pytest.raises(ValueError, match="unit-norm"):
            info_nce([bad])

    def test_asymmetric_matches_manual_row_direction(self):
        rng = np.random.default_rng(21)
        a = np.stack([unit(rng.standard_normal(5)) for _ in range(4)])
        v = np.stack([unit(rng.standard_normal(5)) for _ in range(4)])
        batch = [pair_of(a[i], v[i], f"c{i}") for i in range(4)]
        s = (a @ v.T) / 0.07
        row_ce = []
        for i in range(4):
            row_ce.append(-s[i, i] + np.log(np.exp(s[i] - s[i].max()).sum()) + s[i].max())
        expected = float(np.mean(row_ce))
        assert info_nce(batch, LossConfig(symmetric=False)) == pytest.approx(expected, abs=1e-12)


class TestLossGradient:
    def test_single_pair_gradient_all_zero(self):
        params = tiny_params()
        grads = loss_gradient(feature_batch(b=1), params, TINY)
        for name, g in grads.items():
            np.testing.assert_array_equal(g, 0.0, err_msg=name)

    def test_matches_finite_differences_eval_mode(self):
        params = tiny_params()
        pairs = feature_batch()

        def loss_fn(p):
            loss, _ = loss_and_grad(pairs, p, TINY, training=False)
            return loss

        _, grads = loss_and_grad(pairs, params, TINY, training=False)
        finite_difference_check(loss_fn, params, grads, sample_per_block=12,
                                rng=np.random.default_rng(1))

    def test_matches_finite_differences_with_dropout(self):
        params = tiny_params()
        pairs = feature_batch(seed=8)

        def loss_fn(p):
            loss, _ = loss_and_grad(pairs, p, TINY, training=True, rng=child_rng(33, "dropout"))
            return loss

        _, grads = loss_and_grad(pairs, params, TINY, training=True,
                                 rng=child_rng(33, "dropout"))
        finite_difference_check(loss_fn, params, grads, sample_per_block=8,
                                rng=np.random.default_rng(2))

    def test_mixed_shapes_group_correctly(self):
        params = tiny_params()
        rng = np.random.default_rng(30)
        pairs = [
            (rng.standard_normal((2, 4)), rng.standard_normal((3, 5))),
            (rng.standard_normal((4, 4)), rng.standard_normal((2, 5))),
            (rng.standard_normal((2, 4)), rng.standard_normal((3, 5))),
        ]

        def loss_fn(p):
            loss, _ = loss_and_grad(pairs, p, TINY, training=False)
            return loss

        _, grads = loss_and_grad(pairs, params, TINY, training=False)
        finite_difference_check(loss_fn, params, grads, sample_per_block=6,
                                rng=np.random.default_rng(3))

    def test_duplicated_batch_changes_loss_but_grads_stay_finite(self):
        params = tiny_params()
        pairs = feature_batch(b=3)
        base, _ = loss_and_grad(pairs, params, TINY)
        doubled, grads = loss_and_grad(pairs + pairs, params, TINY)
        assert doubled != pytest.approx(base)
        assert doubled > base  # duplicate counterparts make targets ambiguous
        for g in grads.values():
            assert np.all(np.isfinite(g))

    def test_non_finite_gradient_names_block(self, monkeypatch):
        params = tiny_params()
        pairs = feature_batch()

        original = kernels.softmax_rows_grad

        def poisoned(w, dw):
            return original(w, dw) * np.nan

        monkeypatch.setattr("avva.model.kernels.softmax_rows_grad", poisoned)
        with pytest.raises(NumericError, match="non-finite gradient in block '"):
            loss_and_grad(pairs, params, TINY)

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            loss_and_grad([], tiny_params(), TINY)


class TestCheckpoints:
    def test_roundtrip_at_float32(self, tmp_path):
        params = tiny_params()
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params, TINY, extra={"epoch": 3})
        loaded, cfg, extra = load_checkpoint(path)
        assert cfg == TINY
        assert extra == {"epoch": 3}
        for name in params:
            np.testing.assert_array_equal(loaded[name],
                                          params[name].astype(np.float32).astype(np.float64))

    def test_deterministic_bytes(self, tmp_path):
        params = tiny_params()
        save_checkpoint(tmp_path / "a.ckpt", params, TINY)
        save_checkpoint(tmp_path / "b.ckpt", params, TINY)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 32)
        with pytest.raises(CheckpointError, match="not a checkpoint"):
            load_checkpoint(path)

    def test_shape_mismatch_rejected(self, tmp_path):
        import json as json_mod
        import struct

        path = tmp_path / "model.ckpt"
        save_checkpoint(path, tiny_params(), TINY)
        blob = path.read_bytes()
        version, hlen = struct.unpack("<IQ", blob[8:20])
        header = json_mod.loads(blob[20 : 20 + hlen].decode())
        header["blocks"][0]["shape"] = [1, 1]
        new_header = json_mod.dumps(header, sort_keys=True).encode()
        path.write_bytes(blob[:8] + struct.pack("<IQ", version, len(new_header))
                         + new_header + blob[20 + hlen :])
        with pytest.raises(CheckpointError, match="shape"):
            load_checkpoint(path)

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, tiny_params(), TINY)
        blob = path.read_bytes()
        path.write_bytes(blob[:-20])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)
