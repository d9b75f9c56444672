"""
Batch driver for the anchor pipeline.
Indexes every episode of a corpus directory in parallel and writes one
manifest per episode plus a Markdown report.
"""
import concurrent.futures
import glob
import logging
import os
import time
from typing import Any, Dict, List, Optional

from ..synth_world import load_episode
from .index import PipelineConfig, build_index, ground_truth_judge
from .judge import JudgeConfig, make_judge

logger = logging.getLogger(__name__)

MANIFEST_SUFFIX = ".manifest.jsonl"


class PipelineRunner:
    """Runs build_index over many episodes."""

    def __init__(
        self,
        cfg: Optional[PipelineConfig] = None,
        judge_cfg: Optional[JudgeConfig] = None,
        seed: int = 0,
        max_workers: int = 4,
    ):
        self.cfg = (cfg or PipelineConfig()).validate()
        self.judge_cfg = (judge_cfg or JudgeConfig()).validate()
        self.seed = seed
        self.max_workers = max_workers

    def process_episode(self, path: str, output_dir: str) -> Dict[str, Any]:
        result = {"episode": path, "success": False, "manifest": None, "counts": None, "error": None}
        try:
            start_time = time.time()
            episode = load_episode(path)
            if self.judge_cfg.backend == "mock":
                judge = ground_truth_judge(episode)
            else:
                judge = make_judge(self.judge_cfg)
            index = build_index(episode, judge, self.cfg, self.seed)

            os.makedirs(output_dir, exist_ok=True)
            manifest = os.path.join(output_dir, episode.source_id + MANIFEST_SUFFIX)
            index.write_manifest(manifest)
            result.update(
                success=True,
                manifest=manifest,
                source_id=episode.source_id,
                counts=index.summary(),
                duration=time.time() - start_time,
            )
            logger.info(f"Indexed {path} in {result['duration']:.2f}s")
        except Exception as e:
            result["error"] = str(e)
            logger.error(f"Exception indexing {path}: {str(e)}", exc_info=True)
        return result

    def process_directory(self, input_dir: str, output_dir: str) -> List[Dict[str, Any]]:
        paths = sorted(glob.glob(os.path.join(input_dir, "*.avlt")))
        logger.info(f"Found {len(paths)} episodes to index")
        results = []
        with concurrent.futures.ThreadPoolExecutor(max_workers=self.max_workers) as executor:
            future_to_path = {executor.submit(self.process_episode, p, output_dir): p for p in paths}
            for future in concurrent.futures.as_completed(future_to_path):
                path = future_to_path[future]
                try:
                    results.append(future.result())
                except Exception as e:
                    logger.error(f"Exception indexing {path}: {str(e)}", exc_info=True)
                    results.append({"episode": path, "success": False, "error": str(e)})
        results.sort(key=lambda r: r["episode"])
        return results

    def generate_report(self, results: List[Dict[str, Any]]) -> str:
        successful = [r for r in results if r.get("success")]
        failed = [r for r in results if not r.get("success")]

        report = ["# Anchor Pipeline Report"]
        report.append(f"\nIndexed {len(results)} episodes: {len(successful)} successful, {len(failed)} failed\n")
        if successful:
            report.append("\n## Indexed Episodes")
            for idx, result in enumerate(successful):
                counts = ", ".join(f"{k}={v}" for k, v in result["counts"].items())
                report.append(
                    f"{idx+1}. **{os.path.basename(result['episode'])}** → "
                    f"{os.path.basename(result['manifest'])} ({counts})"
                )
        if failed:
            report.append("\n## Failed Episodes")
            for idx, result in enumerate(failed):
                report.append(f"{idx+1}. **{os.path.basename(result['episode'])}**: {result.get('error', 'Unknown error')}")
        return "\n".join(report)
