import os

import numpy as np
import pytest
import torch

from anchorvid.backbone import DiTModel, text_id
from anchorvid.errors import ConfigError, ProbeUnavailableError, SourceTooShortError
from anchorvid.latent_world import LatentVideo
from anchorvid.roles import EXPRESSIONS, GLOBAL_ROLE, VIEWPOINTS
from anchorvid.rope3d import RopeConfig
from anchorvid.synth_world import (
    AUDIO_FRAMES_PER_CLIP,
    BODY_COLS,
    HEAD_COLS,
    HEAD_ROWS,
    REGIONS,
    Command,
    DataConfig,
    anchor_masses,
    attention_probe,
    audio_window,
    background_drift,
    body_weights,
    command_ids,
    episode_plan,
    estimate_yaw_trajectory,
    eval_region_mse,
    gen_character,
    gen_episode,
    load_episode,
    pose_copy_score,
    region_mask,
    render_latent,
    save_episode,
    synthesize_corpus,
)

from conftest import random_video, tiny_model_config


def circular_gap(a: float, b: float) -> float:
    d = abs(a - b) % 360.0
    return min(d, 360.0 - d)


class TestRegions:
    def test_partition_of_full_frame(self):
        masks = [region_mask(r) for r in ("head", "back_texture", "background")]
        total = sum(m.int() for m in masks)
        assert bool((total == 1).all())
        assert bool(region_mask("full").all())

    def test_unknown_region(self):
        with pytest.raises(ConfigError):
            region_mask("hands")


class TestCharacter:
    def test_deterministic(self):
        a, b = gen_character(7), gen_character(7)
        assert torch.equal(a.body, b.body)
        assert torch.equal(a.heads, b.heads)
        assert not torch.equal(a.body, gen_character(8).body)

    def test_body_textures_respect_floor(self):
        body = gen_character(3, floor=0.5).body.double()
        for i in range(len(VIEWPOINTS)):
            for j in range(i + 1, len(VIEWPOINTS)):
                assert float(((body[i] - body[j]) ** 2).mean()) >= 0.5

    def test_unreachable_floor(self):
        with pytest.raises(ConfigError):
            gen_character(3, floor=100.0, max_retries=2)


class TestRender:
    @pytest.mark.parametrize(
        "yaw,view", [(0.0, "front"), (90.0, "left"), (180.0, "back"), (270.0, "right"), (350.0, "front")]
    )
    def test_canonical_yaws(self, yaw, view):
        weights = body_weights(yaw)
        assert weights[VIEWPOINTS.index(view)] == 1.0
        assert weights.sum() == 1.0

    def test_transition_blends_neighbours(self):
        weights = body_weights(45.0)
        assert weights[VIEWPOINTS.index("front")] == pytest.approx(0.5)
        assert weights[VIEWPOINTS.index("left")] == pytest.approx(0.5)

    def test_composition(self):
        c = gen_character(1)
        frame = render_latent(c, 180.0, "sad")
        h0, h1 = HEAD_ROWS
        w0, w1 = HEAD_COLS
        assert torch.equal(frame.head, c.heads[EXPRESSIONS.index("sad")])
        assert torch.equal(frame.full[h0:h1, w0:w1], frame.head)
        body_mask = region_mask("back_texture")[:, BODY_COLS[0]:BODY_COLS[1]]
        assert torch.equal(frame.body[body_mask], c.body_texture("back")[body_mask])
        background = region_mask("background")
        assert torch.equal(frame.full[background], c.background[background])

    def test_yaw_range(self):
        with pytest.raises(ValueError):
            render_latent(gen_character(1), 360.0, "happy")


class TestEpisode:
    def test_rates(self):
        episode = gen_episode(seed=2, duration_s=60.0, scenario="idle")
        assert episode.latent_frames == 360
        assert episode.latents.dims == (360, 8, 8, 4)
        assert episode.body.dims == (360, 8, 6, 4)
        assert episode.head.dims == (360, 4, 4, 4)
        assert episode.audio.shape[1] == 8
        assert abs(episode.audio.shape[0] - 1152) <= 1
        assert episode.latent_time(6) == pytest.approx(1.0)

    def test_turn_around_reaches_the_back(self, turn_episode):
        assert turn_episode.latent_yaw(0) == 0.0
        assert turn_episode.latent_yaw(36) == pytest.approx(180.0)
        assert turn_episode.text_ids(0.0, 5.0) == (text_id("IDLE"), text_id("TURN_AROUND"))

    def test_audio_clip_is_padded(self, turn_episode):
        clip = turn_episode.audio_clip(18.0)
        assert clip.frames == AUDIO_FRAMES_PER_CLIP
        assert float(clip.data[-10:].abs().sum()) == 0.0

    def test_too_short_and_unknown(self):
        with pytest.raises(SourceTooShortError):
            gen_episode(seed=1, duration_s=4.0)
        with pytest.raises(ConfigError):
            gen_episode(seed=1, duration_s=10.0, scenario="dance")

    def test_save_and_load(self, tmp_path, turn_episode):
        container, sidecar = save_episode(turn_episode, str(tmp_path))
        assert os.path.exists(sidecar)
        loaded = load_episode(container)
        assert loaded.source_id == turn_episode.source_id
        assert torch.equal(loaded.latents.data, turn_episode.latents.data)
        assert np.array_equal(loaded.yaw, turn_episode.yaw)
        assert loaded.commands == turn_episode.commands
        assert loaded.latent_expression(10) == turn_episode.latent_expression(10)


class TestCorpus:
    def test_plan_is_fixed_by_seed(self):
        cfg = DataConfig(episodes=4)
        assert episode_plan(cfg, 1) == episode_plan(cfg, 1)
        assert [s for _, s in episode_plan(cfg, 1)] == ["mixed", "turn_around", "expression_cycle", "idle"]

    def test_synthesize(self, tmp_path):
        cfg = DataConfig(episodes=2, duration_s=5.0, scenarios=["idle"])
        results = synthesize_corpus(cfg, seed=0, out_dir=str(tmp_path), max_workers=2)
        assert all(r["success"] for r in results)
        assert all(os.path.exists(r["container"]) for r in results)

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            DataConfig(scenarios=["juggling"]).validate()


class TestMetrics:
    def test_region_mse(self, turn_episode):
        pred = turn_episode.latents.frame_slice(10, 14)
        assert eval_region_mse(pred, turn_episode, "head", start=10) == 0.0
        shifted = LatentVideo(pred.data + 1.0)
        assert eval_region_mse(shifted, turn_episode, "background", start=10) == pytest.approx(1.0)

    def test_pose_copy_score(self):
        assert pose_copy_score(np.full(5, 180.0), 180.0, np.zeros(5)) == pytest.approx(2.0)
        assert pose_copy_score(np.zeros(5), 180.0, np.zeros(5)) == pytest.approx(-2.0)

    def test_background_drift(self, turn_episode):
        ref = turn_episode.latents.frame_slice(0, 1)
        drift = background_drift(turn_episode.latents.frame_slice(0, 60), ref, [(0, 30), (26, 56)])
        assert drift == [0.0, 0.0]

    def test_yaw_estimates_follow_the_body(self, turn_episode):
        ks = [0, 36]
        video = LatentVideo(torch.stack([turn_episode.latents.data[k] for k in ks]))
        estimates = estimate_yaw_trajectory(video, turn_episode.character)
        for k, est in zip(ks, estimates):
            assert circular_gap(est, turn_episode.latent_yaw(k)) < 1.0


class TestAttentionProbe:
    def test_masses_sum_to_one(self, tiny_model, small_conditions):
        masses = attention_probe(tiny_model, random_video(2, seed=3), 0.5, small_conditions)
        assert sum(masses.values()) == pytest.approx(1.0, abs=1e-9)
        anchors = anchor_masses(masses)
        assert set(anchors) == {"global", "viewpoint:back", "expression:happy"}

    def test_masked_role_gets_no_mass(self, tiny_model, small_conditions):
        masses = attention_probe(tiny_model, random_video(2, seed=3), 0.5, small_conditions, masked=[GLOBAL_ROLE])
        assert masses["global"] == 0.0
        assert sum(masses.values()) == pytest.approx(1.0, abs=1e-9)

    def test_model_without_attention_weights(self, small_conditions):
        with pytest.raises(ProbeUnavailableError):
            attention_probe(lambda *a, **k: None, random_video(2), 0.5, small_conditions)

    def test_recording_switched_off(self, small_conditions):
        model = DiTModel(tiny_model_config(probe_block=None), RopeConfig(head_dim=8)).double()
        with pytest.raises(ProbeUnavailableError):
            attention_probe(model, random_video(2), 0.5, small_conditions)
        _, record = model.forward_with_attention(random_video(2), 0.5, small_conditions)
        assert record is None


def test_regions_constant():
    assert REGIONS == ("full", "back_texture", "head", "background")


class TestConditioningSlices:
    def test_audio_window_matches_episode_clip(self, turn_episode):
        window = audio_window(turn_episode.audio, 4.5)
        assert torch.equal(window.data, turn_episode.audio_clip(4.5).data)
        assert window.frames == AUDIO_FRAMES_PER_CLIP
        start = int(round(4.5 * 19.2))
        assert torch.equal(window.data[0], turn_episode.audio[start])

    def test_audio_window_past_the_end_is_silent(self, turn_episode):
        window = audio_window(turn_episode.audio, turn_episode.duration_s - 1.0)
        assert float(window.data[-10:].abs().max()) == 0.0
        assert float(audio_window(turn_episode.audio, 500.0).data.abs().max()) == 0.0

    def test_command_ids_overlap_and_fallback(self):
        commands = [Command(0.0, 2.0, "IDLE"), Command(2.0, 10.0, "TURN_AROUND")]
        assert command_ids(commands, 1.0, 3.0) == (text_id("IDLE"), text_id("TURN_AROUND"))
        assert command_ids(commands, 2.0, 5.0) == (text_id("TURN_AROUND"),)
        assert command_ids(commands, 12.0, 15.0) == (text_id("IDLE"),)
        assert command_ids(commands, 0.0, 10.0, max_tokens=1) == (text_id("IDLE"),)
