"""Caption and scoring backends for the reasoning engine.

Two families: deterministic mocks for tests and desk-scale experiments, and
HTTP adapters that talk to an external text-completion service. Real
captioner/judge models are reached only through these adapters; nothing here
hosts a model in-process.
"""

import hashlib
import json
import os
from abc import ABC, abstractmethod

import requests

API_KEY_ENV = "AVVA_API_KEY"


class BackendError(RuntimeError):
    """A backend call failed (transport error, bad status, empty output)."""


class CaptionBackend(ABC):
    """Produces one audio and one video description per clip."""

    #: ids of the (audio, video) captioners, recorded on every CaptionPair
    backend_ids: tuple[str, str] = ("unknown", "unknown")

    @abstractmethod
    def describe_audio(self, clip) -> str: ...

    @abstractmethod
    def describe_video(self, clip) -> str: ...


class ScoringBackend(ABC):
    """Text-completion interface used to judge caption alignment."""

    backend_id: str = "unknown"

    @abstractmethod
    def complete(self, prompt: str) -> str: ...


class MockCaptionBackend(CaptionBackend):
    """Deterministic captions keyed by clip id."""

    backend_ids = ("mock-audio", "mock-video")

    def describe_audio(self, clip) -> str:
        return f"mock audio caption for {clip.clip_id}"

    def describe_video(self, clip) -> str:
        return f"mock video caption for {clip.clip_id}"


def _hash_scores(prompt: str) -> list[float]:
    """Five pseudo-random scores in [0, 10], stable in the prompt text."""
    digest = hashlib.sha256(prompt.encode("utf-8")).digest()
    return [round((digest[i] % 101) / 10.0, 1) for i in range(5)]


class MockScoringBackend(ScoringBackend):
    """Deterministic judge: renders a well-formed five-line score response.

    By default scores are hashed from the prompt text. A ``rule`` callable
    (prompt -> five scores) overrides that, which lets experiments pin
    scores to clip populations (mock captions embed the clip id, so the rule
    can key on it).
    """

    backend_id = "mock-scorer"

    def __init__(self, rule=None):
        self.rule = rule

    def complete(self, prompt: str) -> str:
        from .mre import render_scores_response

        values = list(self.rule(prompt)) if self.rule is not None else _hash_scores(prompt)
        return render_scores_response(values)


def constant_score_rule(values):
    """Rule returning the same five scores for every prompt."""
    vals = [float(v) for v in values]
    if len(vals) != 5:
        raise ValueError("expected exactly five scores")
    return lambda prompt: vals


class HttpCompletionClient:
    """Minimal JSON-over-HTTP text-completion client.

    POSTs ``{"model": ..., "prompt": ...}`` to the endpoint and expects a
    200 response with ``{"text": ...}``. Credentials come from the
    AVVA_API_KEY environment variable (sent as a bearer token), never from
    config files.
    """

    def __init__(self, endpoint: str, model: str = "default", timeout_s: float = 30.0, session=None):
        if not endpoint:
            raise ValueError("endpoint must be a non-empty URL")
        self.endpoint = endpoint
        self.model = model
        self.timeout_s = timeout_s
        self.session = session or requests.Session()

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(API_KEY_ENV)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def post(self, payload: dict) -> str:
        try:
            resp = self.session.post(
                self.endpoint,
                data=json.dumps(payload),
                headers=self._headers(),
                timeout=self.timeout_s,
            )
        except requests.RequestException as exc:
            raise BackendError(f"completion request to {self.endpoint} failed: {exc}") from exc
        if resp.status_code != 200:
            raise BackendError(f"completion endpoint returned HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            body = resp.json()
        except ValueError as exc:
            raise BackendError(f"completion endpoint returned non-JSON body: {exc}") from exc
        text = body.get("text")
        if not isinstance(text, str):
            raise BackendError("completion response missing 'text' field")
        return text


class HttpScoringBackend(ScoringBackend):
    """Scores caption pairs through a text-completion endpoint."""

    def __init__(self, endpoint: str, model: str = "default", timeout_s: float = 30.0, session=None):
        self.client = HttpCompletionClient(endpoint, model=model, timeout_s=timeout_s, session=session)
        self.backend_id = f"http:{model}"

    def complete(self, prompt: str) -> str:
        return self.client.post({"model": self.client.model, "prompt": prompt})


class HttpCaptionBackend(CaptionBackend):
    """Requests clip descriptions from an out-of-process captioning service.

    The service receives the clip coordinates (id, uri, window) plus the
    requested task, and is responsible for decoding the media itself.
    """

    def __init__(self, endpoint: str, audio_model: str = "audio-captioner",
                 video_model: str = "video-captioner", timeout_s: float = 30.0, session=None):
        self.client = HttpCompletionClient(endpoint, model=audio_model, timeout_s=timeout_s, session=session)
        self.audio_model = audio_model
        self.video_model = video_model
        self.backend_ids = (f"http:{audio_model}", f"http:{video_model}")

    def _describe(self, clip, task: str, model: str) -> str:
        return self.client.post(
            {
                "model": model,
                "task": task,
                "clip": {
                    "clip_id": clip.clip_id,
                    "media_id": clip.media_id,
                    "start": clip.start,
                    "end": clip.end,
                },
            }
        )

    def describe_audio(self, clip) -> str:
        return self._describe(clip, "describe_audio", self.audio_model)

    def describe_video(self, clip) -> str:
        return self._describe(clip, "describe_video", self.video_model)
