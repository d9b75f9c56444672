import pytest
import torch

from anchorvid.backbone import (
    AUDIO_WINDOW,
    AudioFeatures,
    AudioWindowAttention,
    Conditions,
    DiTModel,
    ModelConfig,
    align_windows,
    reshape_audio_windows,
    text_id,
)
from anchorvid.errors import ConfigError, ShapeError
from anchorvid.latent_world import AnchorSet
from anchorvid.roles import AnchorKind
from anchorvid.rope3d import RopeConfig

from conftest import assert_close, random_video, randomize, tiny_model_config


class TestAudioWindows:
    def test_tail_is_zero_padded(self):
        audio = AudioFeatures(torch.ones(10, 8))
        windows = reshape_audio_windows(audio)
        assert windows.shape == (3, AUDIO_WINDOW, 8)
        assert float(windows[2, 2:].abs().sum()) == 0.0
        assert float(windows[2, :2].sum()) == 16.0

    def test_empty_stream(self):
        with pytest.raises(ShapeError):
            reshape_audio_windows(AudioFeatures(torch.zeros(0, 8)))

    def test_align_pads_and_truncates(self):
        windows = torch.ones(3, AUDIO_WINDOW, 2)
        assert align_windows(windows, 2).shape[0] == 2
        padded = align_windows(windows, 5)
        assert padded.shape[0] == 5
        assert float(padded[3:].abs().sum()) == 0.0


class TestAudioWindowAttention:
    def setup_method(self):
        torch.manual_seed(0)
        self.attn = AudioWindowAttention(dim=8, audio_dim=8, heads=2, head_dim=4).double()
        gen = torch.Generator().manual_seed(1)
        self.x = torch.randn(7, 8, generator=gen, dtype=torch.float64)
        self.windows = torch.randn(3, AUDIO_WINDOW, 8, generator=gen, dtype=torch.float64)
        self.frame_index = torch.tensor([-1, 0, 0, 1, 2, 2, -1])

    def test_inert_at_initialization(self):
        out = self.attn(self.x, self.windows, self.frame_index)
        assert float(out.abs().max()) == 0.0

    def test_mass_stays_inside_own_window(self):
        dense = self.attn.dense_weights(self.x, self.windows, self.frame_index)
        assert dense.shape == (7, 3, AUDIO_WINDOW)
        for row, j in enumerate(self.frame_index.tolist()):
            if j < 0:
                assert float(dense[row].abs().sum()) == 0.0
                continue
            off = torch.cat([dense[row, :j], dense[row, j + 1:]])
            assert float(off.abs().sum()) == 0.0
            assert float(dense[row, j].sum()) == pytest.approx(1.0, abs=1e-12)

    def test_non_video_tokens_get_zero_residual(self):
        randomize(self.attn, seed=2)
        out = self.attn(self.x, self.windows, self.frame_index)
        assert float(out[0].abs().sum()) == 0.0
        assert float(out[-1].abs().sum()) == 0.0
        assert float(out[1].abs().sum()) > 0.0

    def test_too_few_windows(self):
        with pytest.raises(ShapeError):
            self.attn(self.x, self.windows[:2], self.frame_index)


class TestModelConfig:
    def test_head_product(self):
        with pytest.raises(ConfigError):
            ModelConfig(model_dim=60).validate()

    def test_audio_blocks_default_every_other(self):
        assert ModelConfig(blocks=5).audio_blocks == (0, 2, 4)

    def test_rope_head_dim_mismatch(self):
        with pytest.raises(ConfigError):
            DiTModel(tiny_model_config(), RopeConfig(head_dim=16))


class TestDiTModel:
    def test_output_is_video_shaped(self, tiny_model, small_conditions):
        x = random_video(3, seed=5)
        out = tiny_model(x, 0.5, small_conditions, prefix=random_video(4, seed=6))
        assert out.dims == x.dims
        assert out.data.dtype == torch.float64

    def test_fresh_model_predicts_zero(self, small_conditions):
        model = DiTModel(tiny_model_config(), RopeConfig(head_dim=8)).double()
        out = model(random_video(2), 0.3, small_conditions)
        assert float(out.data.abs().max()) == 0.0

    @pytest.mark.parametrize("t", [-0.1, 1.5])
    def test_t_out_of_range(self, tiny_model, small_conditions, t):
        with pytest.raises(ValueError):
            tiny_model(random_video(2), t, small_conditions)

    def test_audio_dim_mismatch(self, tiny_model, small_conditions):
        conds = Conditions(small_conditions.first_frame, audio=AudioFeatures(torch.zeros(8, 3, dtype=torch.float64)))
        with pytest.raises(ShapeError):
            tiny_model(random_video(2), 0.5, conds)

    def test_anchors_change_the_prediction(self, tiny_model, small_conditions):
        x = random_video(2, seed=5)
        with_anchors = tiny_model(x, 0.5, small_conditions)
        without = tiny_model(x, 0.5, small_conditions.with_anchors(AnchorSet()))
        assert float((with_anchors.data - without.data).abs().max()) > 1e-6

    def test_masked_anchor_keys_match_anchor_free_run(self, tiny_model, small_conditions):
        x = random_video(2, seed=5)
        seq = tiny_model.build_sequence(x, small_conditions)
        key_mask = torch.ones(len(seq), dtype=torch.bool)
        for seg in seq.anchor_segments():
            key_mask[seg.start:seg.stop] = False
        masked = tiny_model(x, 0.5, small_conditions, key_mask=key_mask)
        bare = tiny_model(x, 0.5, small_conditions.with_anchors(AnchorSet()))
        assert_close(masked, bare, rtol=1e-10, atol=1e-12)

    def test_audio_window_only_reaches_its_frame(self, small_conditions):
        torch.manual_seed(0)
        model = randomize(DiTModel(tiny_model_config(blocks=1), RopeConfig(head_dim=8)).double(), seed=4)
        x = random_video(2, seed=5)
        base = model(x, 0.5, small_conditions)
        audio = small_conditions.audio.data.clone()
        audio[4:] += 1.0
        bumped = Conditions(small_conditions.first_frame, small_conditions.text_ids, AudioFeatures(audio), small_conditions.anchors)
        moved = model(x, 0.5, bumped)
        assert_close(moved.frame_slice(0, 1), base.frame_slice(0, 1), rtol=0, atol=1e-14)
        assert float((moved.data[1] - base.data[1]).abs().max()) > 1e-6

    def test_text_conditioning(self, tiny_model, small_conditions):
        x = random_video(2, seed=5)
        a = tiny_model(x, 0.5, small_conditions)
        b = tiny_model(x, 0.5, small_conditions.drop_text())
        assert float((a.data - b.data).abs().max()) > 1e-6
        assert text_id("SPEAK") == 2

    def test_record_attention(self, tiny_model, small_conditions):
        x = random_video(2, seed=5)
        out, record = tiny_model.forward_with_attention(x, 0.5, small_conditions)
        assert torch.equal(out.data, tiny_model(x, 0.5, small_conditions).data)
        n = len(record.sequence)
        assert record.weights.shape == (n, n)
        assert_close(record.weights.sum(dim=-1), torch.ones(n, dtype=torch.float64), rtol=0, atol=1e-12)
        kinds = {s.role.anchor.kind for s in record.sequence.anchor_segments()}
        assert kinds == {AnchorKind.GLOBAL, AnchorKind.VIEWPOINT, AnchorKind.EXPRESSION}

    def test_attention_record_is_not_kept_on_the_model(self, tiny_model, small_conditions):
        tiny_model.forward_with_attention(random_video(2, seed=5), 0.5, small_conditions)
        assert not hasattr(tiny_model, "last_attention")

    def test_audio_branch_inert_until_value_projection_trains(self, small_conditions):
        torch.manual_seed(0)
        model = randomize(DiTModel(tiny_model_config(), RopeConfig(head_dim=8)).double(), seed=7)
        with torch.no_grad():
            for block in model.blocks:
                if block.has_audio:
                    block.audio_attn.v.weight.zero_()
                    block.audio_attn.v.bias.zero_()
        x = random_video(2, seed=5)
        base = model(x, 0.5, small_conditions)

        model.audio_enabled = False
        disabled = model(x, 0.5, small_conditions)
        model.audio_enabled = True
        silent = model(x, 0.5, Conditions(
            small_conditions.first_frame,
            small_conditions.text_ids,
            small_conditions.audio.zeros_like(),
            small_conditions.anchors,
        ))
        gen = torch.Generator().manual_seed(21)
        noisy = model(x, 0.5, Conditions(
            small_conditions.first_frame,
            small_conditions.text_ids,
            AudioFeatures(torch.randn(8, 8, generator=gen, dtype=torch.float64)),
            small_conditions.anchors,
        ))
        assert float(base.data.abs().max()) > 0.0
        assert torch.equal(base.data, disabled.data)
        assert torch.equal(base.data, silent.data)
        assert torch.equal(base.data, noisy.data)

    @pytest.mark.parametrize("order", [(2, 1, 0), (1, 0, 2), (0, 2, 1)])
    def test_anchor_order_does_not_change_the_prediction(self, tiny_model, small_conditions, order):
        x, prefix = random_video(2, seed=5), random_video(4, seed=6)
        roles = small_conditions.anchors.roles()
        base = tiny_model(x, 0.5, small_conditions, prefix=prefix)
        permuted = tiny_model(x, 0.5, small_conditions, prefix=prefix, anchor_order=[roles[i] for i in order])
        assert_close(permuted, base, rtol=0, atol=1e-10)
