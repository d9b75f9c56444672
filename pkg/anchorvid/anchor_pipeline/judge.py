"""
Expression judge clients.

One request/response schema:
    request  {"frame_id": str, "proposed_label": str}
    response {"verdict": "confirm" | "relabel" | "reject", "label": str | null}
"""
import json
import logging
import threading
from dataclasses import dataclass
from enum import Enum
from typing import Any, Collection, Dict, Mapping, Optional, Protocol

import ollama
import requests

from ..errors import ConfigError, JudgeError
from ..roles import EXPRESSIONS

logger = logging.getLogger(__name__)


class Verdict(str, Enum):
    CONFIRM = "confirm"
    RELABEL = "relabel"
    REJECT = "reject"


@dataclass(frozen=True)
class JudgeVerdict:
    verdict: Verdict
    label: Optional[str] = None

    @classmethod
    def from_json(cls, payload: Mapping[str, Any]) -> "JudgeVerdict":
        try:
            verdict = Verdict(str(payload["verdict"]).lower())
        except (KeyError, ValueError) as e:
            raise JudgeError(f"Malformed judge response: {payload}") from e
        label = payload.get("label")
        if verdict == Verdict.RELABEL and label not in EXPRESSIONS:
            raise JudgeError(f"Relabel verdict with unknown label {label!r}")
        return cls(verdict, label if verdict == Verdict.RELABEL else None)

    def to_json(self) -> Dict[str, Any]:
        return {"verdict": self.verdict.value, "label": self.label}


class JudgeClient(Protocol):
    def judge(self, frame_id: str, proposed_label: str) -> JudgeVerdict:
        ...


class MockJudgeClient:
    """
    Deterministic judge.

    With truth it confirms matching labels, relabels wrong ones and rejects
    frames whose truth is outside the category set. Without truth it applies
    the relabel map and confirms everything else. failures[frame_id] makes
    the next n calls for that frame raise JudgeError.
    """

    def __init__(
        self,
        truth: Optional[Mapping[str, str]] = None,
        relabel: Optional[Mapping[str, str]] = None,
        reject: Collection[str] = (),
        failures: Optional[Mapping[str, int]] = None,
    ):
        self.truth = dict(truth or {})
        self.relabel = dict(relabel or {})
        self.reject = set(reject)
        self._failures = dict(failures or {})
        self._lock = threading.Lock()
        self.calls = 0

    def judge(self, frame_id: str, proposed_label: str) -> JudgeVerdict:
        with self._lock:
            self.calls += 1
            if self._failures.get(frame_id, 0) > 0:
                self._failures[frame_id] -= 1
                raise JudgeError(f"Simulated judge failure for {frame_id}")
        if frame_id in self.reject:
            return JudgeVerdict(Verdict.REJECT)
        if frame_id in self.truth:
            actual = self.truth[frame_id]
            if actual == proposed_label:
                return JudgeVerdict(Verdict.CONFIRM)
            if actual not in EXPRESSIONS:
                return JudgeVerdict(Verdict.REJECT)
            return JudgeVerdict(Verdict.RELABEL, actual)
        if proposed_label in self.relabel:
            return JudgeVerdict(Verdict.RELABEL, self.relabel[proposed_label])
        return JudgeVerdict(Verdict.CONFIRM)


JUDGE_PROMPT = (
    "You verify facial-expression labels of anchor frames. The categories are: "
    + ", ".join(EXPRESSIONS)
    + '. Reply with JSON {"verdict": "confirm"|"relabel"|"reject", "label": <category or null>}.'
)


class OllamaJudgeClient:
    """Judge backed by a multimodal model served by a local Ollama instance."""

    def __init__(self, host: str = "http://localhost:11434", model: str = "llava", timeout: float = 30.0):
        self.host = host.rstrip("/")
        self.model = model
        self.client = ollama.Client(host=self.host, timeout=timeout)

    def is_available(self) -> bool:
        try:
            response = requests.get(f"{self.host}/api/version", timeout=3)
            return response.status_code == 200
        except requests.RequestException:
            return False

    def judge(self, frame_id: str, proposed_label: str) -> JudgeVerdict:
        request = {"frame_id": frame_id, "proposed_label": proposed_label}
        try:
            response = self.client.chat(
                model=self.model,
                messages=[
                    {"role": "system", "content": JUDGE_PROMPT},
                    {"role": "user", "content": json.dumps(request)},
                ],
                format="json",
            )
            payload = json.loads(response["message"]["content"])
        except JudgeError:
            raise
        except Exception as e:
            raise JudgeError(f"Ollama judge call failed for {frame_id}: {e}") from e
        return JudgeVerdict.from_json(payload)


@dataclass
class JudgeConfig:
    backend: str = "mock"
    host: str = "http://localhost:11434"
    model: str = "llava"
    timeout: float = 30.0

    def validate(self) -> "JudgeConfig":
        if self.backend not in ("mock", "ollama"):
            raise ConfigError(f"judge.backend must be 'mock' or 'ollama', got {self.backend!r}")
        return self


def make_judge(cfg: JudgeConfig, truth: Optional[Mapping[str, str]] = None) -> JudgeClient:
    """Build the configured judge; the mock knows truth when given."""
    cfg.validate()
    if cfg.backend == "ollama":
        client = OllamaJudgeClient(cfg.host, cfg.model, cfg.timeout)
        if not client.is_available():
            logger.warning(f"Ollama at {cfg.host} is not responding; judge calls will fail and drop candidates")
        return client
    return MockJudgeClient(truth=truth)
