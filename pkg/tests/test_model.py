import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_sample
from zsmstm.checkpoint import load_checkpoint, params_hash, save_checkpoint
from zsmstm.errors import AlignmentGap, ConfigError, DimensionMismatch, TooShort
from zsmstm.model import (ModelConfig, ZSMSTM, collate, frame_word_index, param_count, patch_grid, patchify,
                          speech_encode, upsample_content)


def tiny(**kw):
    base = dict(d_model=32, d_text=16, n_mels=32, max_mel_frames=64, speech_layers=1, speech_heads=2,
                ff_mult=2, J=10, T=16)
    base.update(kw)
    return ModelConfig(**base)


def tiny_samples(cfg, n=3, W=3, seed=0):
    return [make_sample(W, cfg.T, cfg.J, cfg.d_text, cfg.n_mels, seed=seed + i, speaker=f"s{i}") for i in range(n)]


@pytest.fixture(scope="module")
def tiny_model():
    torch.manual_seed(0)
    return ZSMSTM(tiny()).eval()


class TestPatchify:
    @pytest.mark.parametrize("frames,stride,t_steps,f_steps", [(16, 10, 1, 12), (64, 10, 5, 12), (32, 16, 2, 8)])
    def test_counts(self, frames, stride, t_steps, f_steps):
        mel = np.random.default_rng(0).normal(size=(frames, 128))
        assert patch_grid(frames, 128, 16, stride) == (t_steps, f_steps)
        assert patchify(mel, 16, stride).shape == (t_steps * f_steps, 256)

    def test_patch_content_time_major(self):
        mel = np.arange(40 * 128, dtype=np.float64).reshape(40, 128)
        p = patchify(mel, 16, 10)
        t_steps, f_steps = patch_grid(40, 128, 16, 10)
        for t in range(t_steps):
            for f in range(f_steps):
                expect = mel[t * 10:t * 10 + 16, f * 10:f * 10 + 16].reshape(-1)
                np.testing.assert_array_equal(p[t * f_steps + f], expect)

    def test_too_short(self):
        with pytest.raises(TooShort):
            patchify(np.zeros((15, 128)))


@pytest.fixture(scope="module")
def full():
    torch.manual_seed(0)
    return ZSMSTM(ModelConfig()).eval()


class TestFullScaleDims:
    def test_derived_widths(self):
        cfg = ModelConfig()
        assert (cfg.d_att, cfg.d_style, cfg.f_steps) == (1536, 2304, 12)
        assert (cfg.decoder_layers, cfg.decoder_heads, cfg.speech_layers, cfg.speech_heads) == (1, 2, 12, 12)

    def test_shapes(self, full):
        samples = tiny_samples(full.cfg, n=1, W=3)
        batch = collate(samples)
        with torch.no_grad():
            hc = full.encode_content(batch)
            hs = full.encode_style(batch)
            assert hc.shape == (1, 3, 1536)
            assert hs.shape == (1, 2304)
            assert full.discriminate(hc).shape == (1, 2304)
            pred = full.generate(hc, hs, batch.frame_word, batch.pose)
            assert pred.shape == (1, 64, 20)
            assert speech_encode(full.content_encoder.speech, samples[0].words[0].mel).shape == (768,)
        assert len(full.generator.decoder.layers) == 1
        assert full.generator.decoder.layers[0].self_attn.num_heads == 2

    def test_single_word(self, full):
        batch = collate(tiny_samples(full.cfg, n=1, W=1))
        with torch.no_grad():
            assert full.encode_content(batch).shape == (1, 1, 1536)


class TestTinyShapes:
    def test_widths(self, tiny_model):
        batch = collate(tiny_samples(tiny_model.cfg))
        with torch.no_grad():
            pred, hc, hs = tiny_model(batch)
        assert hc.shape == (3, 3, 48) and hs.shape == (3, 80) and pred.shape == (3, 16, 20)
        assert tiny_model.discriminate(hc).shape == (3, 80)

    def test_style_dim_independent_of_W_and_T(self):
        torch.manual_seed(0)
        model = ZSMSTM(tiny(T=64)).eval()
        a = collate([make_sample(1, 16, 10, 16, 32)])
        b = collate([make_sample(5, 64, 10, 16, 32)])
        with torch.no_grad():
            assert model.encode_style(a).shape == model.encode_style(b).shape == (1, 80)
            assert model.discriminate(model.encode_content(a)).shape == (1, 80)

    def test_mel_dims_checked(self, tiny_model):
        s = make_sample(2, 16, 10, 16, 24)
        with pytest.raises(DimensionMismatch):
            tiny_model.encode_content(collate([s]))


class TestUpsample:
    def test_repeat_pattern(self):
        idx = torch.as_tensor(frame_word_index([(0, 3), (3, 5)], 5))[None]
        h = torch.tensor([[[1.0], [2.0]]])
        assert upsample_content(h, idx)[0, :, 0].tolist() == [1, 1, 1, 2, 2]

    def test_single_span(self):
        idx = torch.as_tensor(frame_word_index([(0, 7)], 7))[None]
        out = upsample_content(torch.randn(1, 1, 4), idx)
        assert out.shape == (1, 7, 4) and torch.equal(out[0], out[0, :1].expand(7, -1))

    def test_gap(self):
        with pytest.raises(AlignmentGap):
            frame_word_index([(0, 3), (4, 5)], 5)


class TestDecoder:
    def test_causality(self, tiny_model):
        batch = collate(tiny_samples(tiny_model.cfg))
        with torch.no_grad():
            hc, hs = tiny_model.encode_content(batch), tiny_model.encode_style(batch)
            base = tiny_model.generate(hc, hs, batch.frame_word, batch.pose)
            for t in (0, 5, 14):
                pose = batch.pose.clone()
                pose[:, t] += 3.0
                out = tiny_model.generate(hc, hs, batch.frame_word, pose)
                torch.testing.assert_close(out[:, :t + 1], base[:, :t + 1], rtol=0, atol=1e-6)
                assert (out[:, t + 1:] - base[:, t + 1:]).abs().max() > 1e-4

    def test_autoregressive_deterministic(self, tiny_model):
        batch = collate(tiny_samples(tiny_model.cfg), with_pose=False)
        with torch.no_grad():
            hc = tiny_model.encode_content(batch)
            hs = torch.randn(3, 80, generator=torch.Generator().manual_seed(1))
            a = tiny_model.generate(hc, hs, batch.frame_word)
            b = tiny_model.generate(hc, hs, batch.frame_word)
        assert torch.equal(a, b)

    def test_autoregressive_matches_teacher_forcing_on_own_output(self, tiny_model):
        batch = collate(tiny_samples(tiny_model.cfg), with_pose=False)
        with torch.no_grad():
            hc = tiny_model.encode_content(batch)
            hs = torch.randn(3, 80, generator=torch.Generator().manual_seed(2))
            free = tiny_model.generate(hc, hs, batch.frame_word)
            forced = tiny_model.generate(hc, hs, batch.frame_word, free)
        torch.testing.assert_close(forced, free, rtol=1e-5, atol=1e-5)


class TestPurity:
    def test_eval_bitwise(self, tiny_model):
        batch = collate(tiny_samples(tiny_model.cfg))
        with torch.no_grad():
            a = tiny_model(batch)
            b = tiny_model(batch)
        for x, y in zip(a, b):
            assert torch.equal(x, y)

    def test_batch_equivariance(self, tiny_model):
        samples = tiny_samples(tiny_model.cfg, n=4, W=3) + [make_sample(5, 16, 10, 16, 32, seed=9)]
        with torch.no_grad():
            together = tiny_model(collate(samples))
            for i, s in enumerate(samples):
                alone = tiny_model(collate([s]))
                torch.testing.assert_close(alone[0][0], together[0][i], rtol=1e-5, atol=1e-5)
                torch.testing.assert_close(alone[2][0], together[2][i], rtol=1e-5, atol=1e-5)
                torch.testing.assert_close(alone[1][0], together[1][i, :s.W], rtol=1e-5, atol=1e-5)

    def test_trailing_frames_ignored(self, tiny_model):
        mel = np.random.default_rng(0).normal(size=(36, 32)).astype(np.float32)
        enc = tiny_model.content_encoder.speech
        with torch.no_grad():
            # 36 and 39 frames give the same 3 time steps; frames 36..38 are never covered
            a = speech_encode(enc, mel)
            b = speech_encode(enc, np.vstack([mel, np.ones((3, 32), np.float32)]))
        assert torch.equal(a, b)

    def test_separate_speech_encoders(self, tiny_model):
        a = dict(tiny_model.content_encoder.speech.named_parameters())
        b = dict(tiny_model.style_encoder.speech.named_parameters())
        assert all(a[k] is not b[k] for k in a)
        assert any(not torch.equal(a[k], b[k]) for k in a if not k.endswith("bias"))


class TestConfig:
    def test_rejects_bad_heads(self):
        with pytest.raises(ConfigError):
            ZSMSTM(tiny(content_att_heads=5))

    def test_rejects_large_patch(self):
        with pytest.raises(ConfigError):
            tiny(n_mels=8, patch_size=16).validate()

    def test_dict_round_trip(self):
        cfg = tiny()
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


@settings(max_examples=12, deadline=None)
@given(d_model=st.sampled_from([8, 12, 16]), d_text=st.sampled_from([4, 8]), J=st.integers(1, 4),
       T=st.integers(2, 10), W=st.integers(1, 4), heads=st.sampled_from([1, 2, 4]), dec_heads=st.sampled_from([1, 2]),
       layers=st.integers(1, 2), n_mels=st.sampled_from([16, 26]))
def test_shape_lattice(d_model, d_text, J, T, W, heads, dec_heads, layers, n_mels):
    cfg = ModelConfig(d_model=d_model, d_text=d_text, n_mels=n_mels, max_mel_frames=32, speech_layers=1,
                      speech_heads=dec_heads, content_att_heads=heads, style_att_heads=heads,
                      pose_lstm_layers=layers, decoder_layers=layers, decoder_heads=dec_heads, ff_mult=2, J=J, T=T)
    W = min(W, T)
    torch.manual_seed(0)
    model = ZSMSTM(cfg).eval()
    batch = collate([make_sample(W, T, J, d_text, n_mels, seed=i) for i in range(2)])
    with torch.no_grad():
        pred, hc, hs = model(batch)
        free = model.generate(hc, hs, batch.frame_word)
    assert pred.shape == free.shape == (2, T, 2 * J)
    assert hc.shape == (2, W, cfg.d_att) and hs.shape == (2, cfg.d_style)
    assert torch.isfinite(pred).all() and torch.isfinite(free).all()


def test_initialization(tiny_model):
    for name, p in tiny_model.named_parameters():
        if name.endswith("bias"):
            assert torch.all(p == 0), name
    hh = tiny_model.style_encoder.pose.lstm.weight_hh_l0.detach()
    gate = hh[:32]
    torch.testing.assert_close(gate @ gate.T, torch.eye(32), rtol=0, atol=1e-5)


def test_checkpoint_round_trip(tmp_path, tiny_model):
    save_checkpoint(tmp_path / "m.ckpt", tiny_model)
    ckpt = load_checkpoint(tmp_path / "m.ckpt")
    back = ckpt.build_model()
    assert params_hash(back) == params_hash(tiny_model)
    for k, v in tiny_model.state_dict().items():
        assert torch.equal(back.state_dict()[k], v)
    assert param_count(back) == param_count(tiny_model)
    save_checkpoint(tmp_path / "n.ckpt", back)
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "n.ckpt").read_bytes()
