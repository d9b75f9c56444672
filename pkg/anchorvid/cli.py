"""
Command line entry point: python -m anchorvid <verb>.

Verbs: synth, pipeline, train, generate, ablate, export-plots. Every verb loads
and validates the run configuration before it writes anything.
"""
import argparse
import csv
import glob
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import torch

from . import core_math
from .ablations import ARMS, acceptance_checks, compare_arms, format_checks, run_arm
from .anchor_pipeline.index import AnchorIndex, build_index
from .anchor_pipeline.runner import MANIFEST_SUFFIX, PipelineRunner
from .backbone import AudioFeatures, Conditions, DiTModel
from .config import RunConfig, dump_config, load_config
from .errors import AnchorVidError, ConfigError
from .flow_match import Stage, Trainer
from .inference_engine import frames_for_minutes, generate_long
from .latent_world import load_latents, save_latents
from .roles import AnchorKind
from .superset_sampler import ExampleBuilder, SourceVideo, sample_anchors, sample_clip
from .synth_world import load_episode, synthesize_corpus

logger = logging.getLogger(__name__)

STAGE_ORDER = (Stage.I, Stage.II, Stage.III_MIXED, Stage.III_JOINT)
EXIT_ERROR = 2


def setup_logging(cfg: RunConfig) -> None:
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if cfg.log_file:
        os.makedirs(os.path.dirname(os.path.abspath(cfg.log_file)), exist_ok=True)
        handlers.append(logging.FileHandler(cfg.log_file, encoding="utf-8"))
    logging.basicConfig(
        level=getattr(logging, cfg.log_level.upper()),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=handlers,
        force=True,
    )


def _dirs(cfg: RunConfig) -> Dict[str, str]:
    root = cfg.output_dir
    return {
        "root": root,
        "episodes": os.path.join(root, "episodes"),
        "index": os.path.join(root, "index"),
        "checkpoints": os.path.join(root, "checkpoints"),
        "generation": os.path.join(root, "generation"),
        "ablations": os.path.join(root, "ablations"),
        "plots": os.path.join(root, "plots"),
    }


def checkpoint_path(cfg: RunConfig, stage: Stage) -> str:
    return os.path.join(_dirs(cfg)["checkpoints"], f"stage-{stage.value}.avck")


def _write_report(path: str, lines: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    logger.info(f"Report written to {path}")


def load_sources(cfg: RunConfig) -> List[SourceVideo]:
    """Episodes of the run with their manifests (indexed on the fly when missing)."""
    dirs = _dirs(cfg)
    paths = sorted(glob.glob(os.path.join(dirs["episodes"], "*.avlt")))
    if not paths:
        raise ConfigError(f"No episodes under {dirs['episodes']}; run 'synth' first")
    sources = []
    for path in paths:
        episode = load_episode(path)
        manifest = os.path.join(dirs["index"], episode.source_id + MANIFEST_SUFFIX)
        if os.path.exists(manifest):
            index = AnchorIndex.read_manifest(manifest)
        else:
            logger.warning(f"No manifest for {episode.source_id}, indexing in memory")
            index = build_index(episode, cfg=cfg.pipeline, seed=cfg.seed)
        sources.append(SourceVideo(episode, index))
    return sources


def cmd_synth(cfg: RunConfig) -> Dict[str, Any]:
    dirs = _dirs(cfg)
    os.makedirs(dirs["episodes"], exist_ok=True)
    results = synthesize_corpus(cfg.data, cfg.seed, dirs["episodes"], cfg.max_workers)
    with open(os.path.join(dirs["root"], "episodes.jsonl"), "w", encoding="utf-8") as f:
        for r in results:
            f.write(json.dumps(r, sort_keys=True) + "\n")

    successful = [r for r in results if r.get("success")]
    failed = [r for r in results if not r.get("success")]
    report = ["# Episode Synthesis Report"]
    report.append(f"\nSynthesized {len(results)} episodes: {len(successful)} successful, {len(failed)} failed\n")
    if successful:
        report.append("\n## Episodes")
        for idx, r in enumerate(successful):
            report.append(f"{idx+1}. **{r['source_id']}** → {os.path.basename(r['container'])}")
    if failed:
        report.append("\n## Failed Episodes")
        for idx, r in enumerate(failed):
            report.append(f"{idx+1}. **{r['scenario']}-{r['seed']}**: {r.get('error', 'Unknown error')}")
    _write_report(os.path.join(dirs["root"], "synth_report.md"), report)
    return {"episodes": len(successful), "failed": len(failed)}


def cmd_pipeline(cfg: RunConfig) -> Dict[str, Any]:
    dirs = _dirs(cfg)
    runner = PipelineRunner(cfg.pipeline, cfg.judge, cfg.seed, cfg.max_workers)
    results = runner.process_directory(dirs["episodes"], dirs["index"])
    if not results:
        raise ConfigError(f"No episodes under {dirs['episodes']}; run 'synth' first")
    _write_report(os.path.join(dirs["root"], "pipeline_report.md"), [runner.generate_report(results)])
    return {"indexed": sum(1 for r in results if r.get("success")), "failed": sum(1 for r in results if not r.get("success"))}


def _previous_checkpoint(cfg: RunConfig, stage: Stage) -> Optional[str]:
    for earlier in reversed(STAGE_ORDER[: STAGE_ORDER.index(stage)]):
        path = checkpoint_path(cfg, earlier)
        if os.path.exists(path):
            return path
    return None


def cmd_train(cfg: RunConfig, resume_from: Optional[str] = None) -> Dict[str, Any]:
    """Train cfg.train.stage, continuing its own checkpoint or starting from the previous stage's."""
    dirs = _dirs(cfg)
    stage = cfg.train.stage
    sources = load_sources(cfg)
    torch.manual_seed(cfg.seed)
    model = DiTModel(cfg.model, cfg.rope)
    ckpt = checkpoint_path(cfg, stage)
    trainer = Trainer(model, cfg.train, os.path.join(dirs["root"], "metrics.jsonl"), ckpt)

    start_from = resume_from or (ckpt if os.path.exists(ckpt) else _previous_checkpoint(cfg, stage))
    if start_from:
        trainer.resume(start_from)
    builder = ExampleBuilder(sources, cfg.train, cfg.max_workers, max_text_tokens=cfg.model.max_text_tokens)
    history = trainer.fit(builder.batch)
    return {
        "stage": stage.value,
        "step": trainer.step,
        "checkpoint": ckpt,
        "final_loss": history[-1]["loss"] if history else None,
    }


def _latest_checkpoint(cfg: RunConfig) -> str:
    for stage in reversed(STAGE_ORDER):
        path = checkpoint_path(cfg, stage)
        if os.path.exists(path):
            return path
    raise ConfigError(f"No checkpoint under {_dirs(cfg)['checkpoints']}; run 'train' first")


def reference_conditions(cfg: RunConfig, src: SourceVideo, total: int) -> Conditions:
    """Input frame, opening text, the full audio stream and superset anchors of one reference episode."""
    episode = src.episode
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 29]))
    kinds = {k for k in (AnchorKind.VIEWPOINT, AnchorKind.EXPRESSION) if src.index.present(k)}
    anchors, _, _ = sample_anchors(
        src, sample_clip(src, rng), "superset", rng, kinds, cfg.train.viewpoint_anchors, cfg.train.expression_anchors
    )
    end_s = min(episode.duration_s, episode.latent_time(min(total, cfg.sample.chunk_len)))
    return Conditions(
        first_frame=episode.latents.frame_slice(0, 1),
        text_ids=episode.text_ids(0.0, end_s, cfg.model.max_text_tokens),
        audio=AudioFeatures(episode.audio),
        anchors=anchors,
    )


def cmd_generate(cfg: RunConfig, checkpoint: Optional[str], minutes: float) -> Dict[str, Any]:
    dirs = _dirs(cfg)
    total = frames_for_minutes(minutes)
    if total < cfg.sample.chunk_len:
        raise ConfigError(f"{minutes} minutes give {total} latent frames, fewer than one chunk ({cfg.sample.chunk_len})")
    path = checkpoint or _latest_checkpoint(cfg)
    sources = load_sources(cfg)

    model = DiTModel(cfg.model, cfg.rope)
    tensors, meta = core_math.load_checkpoint(path)
    core_math.restore_training_state(model, tensors)
    model.eval()
    logger.info(f"Loaded {path} (stage {meta.get('stage')}, step {meta.get('step')})")

    conds = reference_conditions(cfg, sources[0], total)
    result = generate_long(model, conds, total, cfg.sample, commands=sources[0].episode.commands)
    report = {**result.report, "checkpoint": path, "minutes": minutes, "reference": sources[0].source_id}

    os.makedirs(dirs["generation"], exist_ok=True)
    videos = {"generation": result.video}
    videos.update({f"chunk/{k}": c for k, c in enumerate(result.chunks)})
    latent_path = os.path.join(dirs["generation"], "generation.avlt")
    save_latents(latent_path, videos, {"plan_starts": list(result.plan.starts), "chunk_len": result.plan.chunk_len})
    with open(os.path.join(dirs["generation"], "report.json"), "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    return {"latents": latent_path, "frames": total, "chunks": result.plan.n_chunks}


def cmd_ablate(cfg: RunConfig, arms: Sequence[str]) -> Dict[str, Any]:
    dirs = _dirs(cfg)
    sources = load_sources(cfg)
    os.makedirs(dirs["ablations"], exist_ok=True)
    results = []
    for arm in arms:
        metrics = run_arm(cfg, arm, sources)
        with open(os.path.join(dirs["ablations"], f"{arm}.json"), "w", encoding="utf-8") as f:
            json.dump(metrics, f, indent=2, sort_keys=True)
        results.append(metrics)
    checks = acceptance_checks(results)
    summary = {"arms": [r["arm"] for r in results], "vs_full": compare_arms(results), "checks": checks}
    if len(results) > 1:
        with open(os.path.join(dirs["ablations"], "summary.json"), "w", encoding="utf-8") as f:
            json.dump(summary, f, indent=2, sort_keys=True)
        with open(os.path.join(dirs["ablations"], "ablation_report.md"), "w", encoding="utf-8") as f:
            f.write(format_checks(checks))
    return summary


def _write_csv(path: str, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def cmd_export_plots(cfg: RunConfig, run_dir: Optional[str] = None) -> Dict[str, Any]:
    """Loss curve, per-(chunk, role) attention masses and blend-region values as CSV."""
    root = run_dir or cfg.output_dir
    metrics_path = os.path.join(root, "metrics.jsonl")
    report_path = os.path.join(root, "generation", "report.json")
    latent_path = os.path.join(root, "generation", "generation.avlt")
    if not os.path.exists(metrics_path) and not os.path.exists(report_path):
        raise ConfigError(f"{root} holds neither a metrics log nor a generation report")

    out_dir = os.path.join(root, "plots")
    os.makedirs(out_dir, exist_ok=True)
    written = []
    if os.path.exists(metrics_path):
        with open(metrics_path, "r", encoding="utf-8") as f:
            records = [json.loads(line) for line in f if line.strip()]
        rows = [(r["step"], r["stage"], r["loss"], r["grad_norm"]) for r in records]
        _write_csv(os.path.join(out_dir, "loss_curve.csv"), ("step", "stage", "loss", "grad_norm"), rows)
        written.append("loss_curve.csv")

    if os.path.exists(report_path):
        with open(report_path, "r", encoding="utf-8") as f:
            report = json.load(f)
        rows = [
            (c["index"], role, mass)
            for c in report["chunks"]
            for role, mass in sorted(c["attention"].items())
        ]
        _write_csv(os.path.join(out_dir, "attention_curve.csv"), ("chunk", "role", "mass"), rows)
        written.append("attention_curve.csv")

        if os.path.exists(latent_path):
            videos, _ = load_latents(latent_path)
            video = videos["generation"].data
            weights = report["blend_weights"]
            rows = []
            for c in report["chunks"][1:]:
                for j, w in enumerate(weights):
                    frame = c["start"] + j
                    rows.append((c["index"], frame, w, float(video[frame].double().mean())))
            _write_csv(os.path.join(out_dir, "blend_region.csv"), ("chunk", "frame", "weight", "mean_value"), rows)
            written.append("blend_region.csv")
    return {"plots": out_dir, "files": written}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anchorvid", description="Anchor-conditioned video diffusion at desk scale")
    parser.add_argument("verb", choices=("synth", "pipeline", "train", "generate", "ablate", "export-plots"))
    parser.add_argument("--config", "-c", help="Path to configuration YAML file")
    parser.add_argument("--seed", type=int, help="Override the run seed")
    parser.add_argument("--stage", choices=[s.value for s in Stage], help="Training stage")
    parser.add_argument("--checkpoint", help="Checkpoint to resume (train) or load (generate)")
    parser.add_argument("--minutes", type=float, default=1.0, help="Length of the generated video")
    parser.add_argument("--arm", choices=ARMS, help="Ablation arm (default: all arms)")
    parser.add_argument("--out", "-o", help="Output (run) directory")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.stage is not None:
        overrides["train"] = {"stage": args.stage}
    return overrides


def run(args: argparse.Namespace, environ: Optional[Dict[str, str]] = None) -> Dict[str, Any]:
    cfg = load_config(args.config, _overrides(args), environ)
    if args.out:
        cfg.output_dir = args.out
    setup_logging(cfg)
    if cfg.threads:
        torch.set_num_threads(cfg.threads)

    os.makedirs(cfg.output_dir, exist_ok=True)
    dump_config(cfg, os.path.join(cfg.output_dir, "config.resolved.yaml"))
    if args.verb == "synth":
        return cmd_synth(cfg)
    if args.verb == "pipeline":
        return cmd_pipeline(cfg)
    if args.verb == "train":
        return cmd_train(cfg, args.checkpoint)
    if args.verb == "generate":
        return cmd_generate(cfg, args.checkpoint, args.minutes)
    if args.verb == "ablate":
        return cmd_ablate(cfg, [args.arm] if args.arm else ARMS)
    return cmd_export_plots(cfg)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        summary = run(args)
    except AnchorVidError as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return EXIT_ERROR
    print(json.dumps(summary, sort_keys=True, default=str))
    return 0
