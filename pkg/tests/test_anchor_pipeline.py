import math
import os

import numpy as np
import pytest

from anchorvid.anchor_pipeline import (
    AnchorIndex,
    ClipWindow,
    ExpressionSample,
    JudgeConfig,
    JudgeVerdict,
    MockJudgeClient,
    PipelineConfig,
    PipelineRunner,
    PoseSample,
    Verdict,
    anchor_latent,
    build_index,
    classifier_stream,
    classify_viewpoint,
    expression_candidates,
    make_judge,
    pose_from_yaw,
    segment_clips,
    select_expression_clips,
    verify_expressions,
)
from anchorvid.anchor_pipeline.expression import ExpressionCandidate, frame_id
from anchorvid.anchor_pipeline.viewpoint import boundary_margin, viewing_angle
from anchorvid.errors import AnchorUnavailableError, ConfigError, GeometryError, JudgeError, SourceTooShortError
from anchorvid.roles import EXPRESSIONS, VIEWPOINTS, AnchorKind
from anchorvid.synth_world import save_episode


def expected_view(yaw: float) -> str:
    signed = (yaw + 180.0) % 360.0 - 180.0
    if abs(signed) < 45.0:
        return "front"
    if abs(signed) > 135.0:
        return "back"
    return "left" if signed > 0 else "right"


class TestSegmentation:
    def test_one_minute(self):
        windows = segment_clips(60.0)
        assert len(windows) == 12
        assert windows[1] == ClipWindow(5.0, 10.0)
        assert windows[1].latent_range() == (30, 60)

    def test_remainder_dropped(self):
        assert len(segment_clips(12.3)) == 2

    def test_too_short(self):
        with pytest.raises(SourceTooShortError):
            segment_clips(4.9)


class TestViewpoint:
    def test_canonical_directions(self):
        assert classify_viewpoint(pose_from_yaw(0.0, 0.0)) == "front"
        assert classify_viewpoint(pose_from_yaw(0.0, 180.0)) == "back"
        assert classify_viewpoint(pose_from_yaw(0.0, 90.0)) == "left"
        assert classify_viewpoint(pose_from_yaw(0.0, 270.0)) == "right"

    def test_random_poses_away_from_boundaries(self):
        rng = np.random.default_rng(0)
        checked = 0
        while checked < 1000:
            yaw = float(rng.uniform(0.0, 360.0))
            pose = pose_from_yaw(0.0, yaw)
            if boundary_margin(pose) < 1.0:
                continue
            assert classify_viewpoint(pose) == expected_view(yaw), yaw
            checked += 1

    def test_viewing_angle_range(self):
        assert viewing_angle(pose_from_yaw(0.0, 0.0)) == pytest.approx(180.0)
        assert viewing_angle(pose_from_yaw(0.0, 90.0)) == pytest.approx(90.0)

    def test_non_unit_forward(self):
        with pytest.raises(GeometryError):
            PoseSample(0.0, (1.0, 1.0, 0.0))


def stream_of(labels, confidences=None, step=0.5):
    confidences = confidences or [0.9] * len(labels)
    return [ExpressionSample(i * step, label, c) for i, (label, c) in enumerate(zip(labels, confidences))]


class TestExpressionSelection:
    def test_needs_two_confident_labels(self):
        labels = ["happy"] * 5 + ["sad"] * 5 + ["neutral"] * 10 + ["angry"] * 5 + ["fear"] * 5
        confidences = [0.9] * 20 + [0.9] * 5 + [0.2] * 5
        stream = stream_of(labels, confidences)
        windows = [ClipWindow(0.0, 5.0), ClipWindow(5.0, 10.0), ClipWindow(10.0, 15.0)]
        assert select_expression_clips(stream, windows) == [windows[0]]

    def test_empty_stream(self):
        with pytest.raises(SourceTooShortError):
            select_expression_clips([], [ClipWindow(0.0, 5.0)])

    def test_candidates_are_run_middles(self):
        stream = stream_of(["happy"] * 3 + ["sad"] * 4, step=1 / 6)
        cands = expression_candidates(stream, ClipWindow(0.0, 5.0), "src")
        assert [(c.label, c.latent_index) for c in cands] == [("happy", 1), ("sad", 5)]
        assert cands[0].frame_id == frame_id("src", 1)

    def test_low_confidence_breaks_runs(self):
        stream = stream_of(["happy", "happy", "happy", "happy"], [0.9, 0.1, 0.9, 0.9], step=1 / 6)
        cands = expression_candidates(stream, ClipWindow(0.0, 5.0), "src")
        assert [c.latent_index for c in cands] == [0, 3]

    def test_sample_validation(self):
        with pytest.raises(ValueError):
            ExpressionSample(0.0, "bored", 0.9)
        with pytest.raises(ValueError):
            ExpressionSample(0.0, "happy", 1.5)

    def test_corruption_count(self, mixed_episode):
        samples, truth = classifier_stream(mixed_episode, corruption=0.3, seed=1)
        wrong = sum(s.label != t for s, t in zip(samples, truth))
        assert wrong == round(0.3 * mixed_episode.latent_frames)


def candidate(k: int, label: str) -> ExpressionCandidate:
    return ExpressionCandidate(frame_id("src", k), "src", k / 6, k, label)


class TestJudge:
    def test_repairs_every_label(self, mixed_episode):
        stream, truth = classifier_stream(mixed_episode, corruption=0.3, seed=2)
        cands = []
        for window in segment_clips(mixed_episode.duration_s):
            cands.extend(expression_candidates(stream, window, mixed_episode.source_id))
        truth_by_id = {frame_id(mixed_episode.source_id, k): label for k, label in enumerate(truth)}
        verified = verify_expressions(cands, MockJudgeClient(truth=truth_by_id))
        assert len(verified) == len(cands)
        assert all(c.label == truth_by_id[c.frame_id] for c in verified)

    def test_relabel_reject_and_order(self):
        judge = MockJudgeClient(relabel={"fear": "surprise"}, reject={frame_id("src", 2)})
        out = verify_expressions([candidate(1, "fear"), candidate(2, "happy"), candidate(3, "sad")], judge, max_workers=2)
        assert [(c.latent_index, c.label) for c in out] == [(1, "surprise"), (3, "sad")]

    def test_single_failure_is_retried(self):
        judge = MockJudgeClient(failures={frame_id("src", 1): 1})
        out = verify_expressions([candidate(1, "happy")], judge)
        assert len(out) == 1
        assert judge.calls == 2

    def test_repeated_failure_drops_the_candidate(self):
        judge = MockJudgeClient(failures={frame_id("src", 1): 5})
        out = verify_expressions([candidate(1, "happy"), candidate(2, "sad")], judge)
        assert [c.latent_index for c in out] == [2]

    def test_malformed_responses(self):
        with pytest.raises(JudgeError):
            JudgeVerdict.from_json({"label": "happy"})
        with pytest.raises(JudgeError):
            JudgeVerdict.from_json({"verdict": "relabel", "label": "bored"})
        assert JudgeVerdict.from_json({"verdict": "CONFIRM"}).verdict == Verdict.CONFIRM

    def test_make_judge(self):
        assert isinstance(make_judge(JudgeConfig()), MockJudgeClient)
        with pytest.raises(ConfigError):
            make_judge(JudgeConfig(backend="remote"))


class TestIndex:
    def test_mixed_source_covers_every_viewpoint(self, mixed_source):
        index = mixed_source.index
        assert index.present(AnchorKind.VIEWPOINT) == list(range(len(VIEWPOINTS)))
        assert len(index.global_candidates) == 10
        assert index.present(AnchorKind.EXPRESSION)

    def test_viewpoint_entries_match_the_pose(self, mixed_source):
        episode = mixed_source.episode
        for i, entries in mixed_source.index.viewpoints.items():
            for entry in entries:
                assert expected_view(episode.latent_yaw(entry.latent_index)) == VIEWPOINTS[i]

    def test_expression_entries_match_truth(self, mixed_source):
        episode = mixed_source.episode
        for i, entries in mixed_source.index.expressions.items():
            for entry in entries:
                assert episode.latent_expression(entry.latent_index) == EXPRESSIONS[i]

    def test_idle_source_has_no_expressions(self, idle_episode):
        index = build_index(idle_episode)
        assert index.present(AnchorKind.EXPRESSION) == []
        assert index.present(AnchorKind.VIEWPOINT) == [VIEWPOINTS.index("front")]
        with pytest.raises(AnchorUnavailableError):
            index.require(AnchorKind.EXPRESSION)

    def test_anchor_crops(self, mixed_source):
        entry = mixed_source.index.viewpoints[VIEWPOINTS.index("back")][0]
        assert anchor_latent(mixed_source.episode, entry).dims == (1, 8, 6, 4)
        entry = mixed_source.index.global_candidates[0]
        assert anchor_latent(mixed_source.episode, entry).dims == (1, 8, 8, 4)

    def test_manifest_round_trip(self, tmp_path, mixed_source):
        path = str(tmp_path / "m.jsonl")
        mixed_source.index.write_manifest(path)
        loaded = AnchorIndex.read_manifest(path)
        assert loaded.summary() == mixed_source.index.summary()
        assert loaded.entries() == mixed_source.index.entries()

    def test_not_a_manifest(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text('{"type": "entry"}\n')
        with pytest.raises(ConfigError):
            AnchorIndex.read_manifest(str(path))

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            PipelineConfig(corruption=1.5).validate()
        with pytest.raises(ConfigError):
            PipelineConfig(viewpoint_margin_deg=50.0).validate()


class TestRunner:
    def test_process_directory(self, tmp_path, idle_episode, turn_episode):
        episodes = tmp_path / "episodes"
        for episode in (idle_episode, turn_episode):
            save_episode(episode, str(episodes))
        (episodes / "broken.avlt").write_bytes(b"nope")

        runner = PipelineRunner(max_workers=2)
        results = runner.process_directory(str(episodes), str(tmp_path / "index"))
        ok = [r for r in results if r["success"]]
        assert len(results) == 3
        assert {r["source_id"] for r in ok} == {idle_episode.source_id, turn_episode.source_id}
        assert all(os.path.exists(r["manifest"]) for r in ok)

        report = runner.generate_report(results)
        assert "2 successful, 1 failed" in report
        assert "broken.avlt" in report


def test_margin_is_symmetric():
    front = boundary_margin(pose_from_yaw(0.0, 30.0))
    back = boundary_margin(pose_from_yaw(0.0, 150.0))
    assert front == pytest.approx(back)
    assert math.isclose(front, 15.0, abs_tol=1e-9)
