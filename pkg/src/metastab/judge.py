"""Caption-quality evaluation with an LLM judge.

Each video is captioned by a video-language model, an open-vocabulary
detector lists the objects it contains, and a judge model scores how well
the caption matches those objects on a 0-10 scale. All three roles are
clients behind small protocols: offline mocks for tests and CI, and thin
HTTP clients (JSON over ``httpx``) for real services.

The judge prompt is a reconstruction from the published rubric (accuracy,
relevance, completeness, clarity); the original wording is not available.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable, Protocol, Sequence

import numpy as np

log = logging.getLogger(__name__)

CAPTION_PROMPT = "Describe the video."
HIGH_SCORE = 8
SCORE_RANGE = (0, 10)


# ---------------------------------------------------------------- clients
class CaptionerClient(Protocol):
    def caption(self, frames, prompt: str) -> str: ...


class DetectorClient(Protocol):
    def detect(self, frame, vocabulary: Sequence[str]) -> list[dict]: ...


class JudgeClient(Protocol):
    def complete(self, prompt: str) -> str: ...


class ClientError(RuntimeError):
    """A remote role failed after all retries."""


class JudgeParseError(ValueError):
    """The judge's reply could not be read as a score object."""


def load_vocabulary(name: str = "vocabulary.txt") -> list[str]:
    """Packaged detector label vocabulary, one label per line."""
    text = resources.files("metastab").joinpath("resources", name).read_text(encoding="utf-8")
    return sorted({ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")})


def _video_digest(frames) -> str:
    arr = np.ascontiguousarray(np.asarray(frames))
    return hashlib.sha256(arr.tobytes()).hexdigest()


class MockCaptioner:
    """Deterministic captioner: a transcript lookup with a hash-derived fallback."""

    def __init__(self, transcripts: dict | None = None, words: Sequence[str] = ("scene", "camera", "street", "person", "tree")):
        self.transcripts = dict(transcripts or {})
        self.words = list(words)
        self.calls = 0

    def caption(self, frames, prompt: str = CAPTION_PROMPT) -> str:
        self.calls += 1
        key = _video_digest(frames)
        if key in self.transcripts:
            return self.transcripts[key]
        h = int(key[:8], 16)
        picks = [self.words[(h >> (4 * i)) % len(self.words)] for i in range(3)]
        return "A video showing " + ", ".join(picks) + "."


class MockDetector:
    """Detector returning scripted detections (per call index) or none."""

    def __init__(self, script: Sequence[Sequence[dict]] | Callable | None = None):
        self.script = script
        self.calls = 0

    def detect(self, frame, vocabulary: Sequence[str] = ()) -> list[dict]:
        i = self.calls
        self.calls += 1
        if self.script is None:
            return []
        if callable(self.script):
            return list(self.script(i, frame))
        return list(self.script[i % len(self.script)])


class MockJudge:
    """Judge replying with scripted raw texts, a fixed score, or a score function.

    ``replies`` are returned verbatim in order (useful for malformed-output
    tests); otherwise ``score`` (int or callable of the prompt) is wrapped
    in a JSON object.
    """

    def __init__(self, score: int | Callable = 8, replies: Sequence[str] | None = None):
        self.score = score
        self.replies = list(replies or [])
        self.prompts: list[str] = []

    def complete(self, prompt: str) -> str:
        self.prompts.append(prompt)
        if self.replies:
            return self.replies.pop(0)
        s = self.score(prompt) if callable(self.score) else self.score
        return json.dumps({"score": int(s), "justification": "mock judgement"})


# ----------------------------------------------------------- HTTP clients
class RateLimiter:
    """Minimum interval between calls, shared across threads."""

    def __init__(self, per_second: float = 2.0, clock=time.monotonic, sleep=time.sleep):
        self.interval = 1.0 / per_second if per_second > 0 else 0.0
        self._next = 0.0
        self._lock = threading.Lock()
        self._clock = clock
        self._sleep = sleep

    def wait(self):
        with self._lock:
            now = self._clock()
            delay = self._next - now
            if delay > 0:
                self._sleep(delay)
                now += delay
            self._next = now + self.interval


def with_retry(fn: Callable, attempts: int = 3, base_delay: float = 0.5, sleep=time.sleep,
               exceptions=(Exception,)):
    """Call ``fn`` up to ``attempts`` times with exponential backoff; raise :class:`ClientError`."""
    last = None
    for i in range(attempts):
        try:
            return fn()
        except exceptions as exc:  # noqa: PERF203
            last = exc
            log.warning("attempt %d/%d failed: %s", i + 1, attempts, exc)
            if i + 1 < attempts:
                sleep(base_delay * 2 ** i)
    raise ClientError(f"failed after {attempts} attempts: {last}") from last


def _encode_frames(frames, max_frames: int = 8) -> list[str]:
    import base64
    import io

    from PIL import Image

    arr = np.asarray(frames)
    idx = np.linspace(0, len(arr) - 1, num=min(max_frames, len(arr))).round().astype(int)
    out = []
    for i in idx:
        img = Image.fromarray(np.clip(np.round(arr[i] * 255), 0, 255).astype(np.uint8))
        buf = io.BytesIO()
        img.save(buf, format="PNG")
        out.append(base64.b64encode(buf.getvalue()).decode("ascii"))
    return out


class _HttpRole:
    """Shared plumbing: endpoint/key from the environment, retries, rate limit."""

    env_prefix = ""

    def __init__(self, base_url: str | None = None, api_key: str | None = None, model: str | None = None,
                 timeout: float = 60.0, rate: float = 2.0, attempts: int = 3, transport=None):
        import httpx

        self.base_url = base_url or os.environ.get(f"{self.env_prefix}_API_BASE")
        self.api_key = api_key or os.environ.get(f"{self.env_prefix}_API_KEY")
        self.model = model or os.environ.get(f"{self.env_prefix}_MODEL")
        if not self.base_url:
            raise ClientError(f"{self.env_prefix}_API_BASE is not set")
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        self._http = httpx.Client(base_url=self.base_url, headers=headers, timeout=timeout, transport=transport)
        self.limiter = RateLimiter(rate)
        self.attempts = attempts

    def _post(self, path: str, payload: dict) -> dict:
        def call():
            self.limiter.wait()
            resp = self._http.post(path, json=payload)
            resp.raise_for_status()
            return resp.json()

        return with_retry(call, self.attempts)


class HttpCaptioner(_HttpRole):
    """OpenAI-compatible chat endpoint receiving sampled frames as images."""

    env_prefix = "CAPTIONER"

    def __init__(self, *args, max_frames: int = 8, max_tokens: int = 512, **kwargs):
        super().__init__(*args, **kwargs)
        self.max_frames = max_frames
        self.max_tokens = max_tokens

    def caption(self, frames, prompt: str = CAPTION_PROMPT) -> str:
        content = [{"type": "text", "text": prompt}] + [
            {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{b}"}}
            for b in _encode_frames(frames, self.max_frames)
        ]
        data = self._post("/chat/completions", {
            "model": self.model, "temperature": 0, "max_tokens": self.max_tokens,
            "messages": [{"role": "user", "content": content}],
        })
        return data["choices"][0]["message"]["content"].strip()


class HttpDetector(_HttpRole):
    """Detector service taking one PNG frame and a label list, returning ``detections``."""

    env_prefix = "DETECTOR"

    def detect(self, frame, vocabulary: Sequence[str] = ()) -> list[dict]:
        data = self._post("/detect", {"image": _encode_frames(np.asarray(frame)[None])[0],
                                       "labels": list(vocabulary)})
        return list(data.get("detections", []))


class HttpJudge(_HttpRole):
    """OpenAI-compatible chat endpoint used as the judge (greedy decoding)."""

    env_prefix = "JUDGE"

    def complete(self, prompt: str) -> str:
        data = self._post("/chat/completions", {
            "model": self.model, "temperature": 0,
            "response_format": {"type": "json_object"},
            "messages": [{"role": "user", "content": prompt}],
        })
        return data["choices"][0]["message"]["content"]


# -------------------------------------------------------------- pipeline
def detect_objects(frames, detector: DetectorClient, vocabulary: Sequence[str] = (), stride: int = 10,
                   threshold: float = 0.3, attempts: int = 3, sleep=time.sleep) -> list[str]:
    """Labels detected on every ``stride``-th frame above ``threshold``, deduplicated and sorted."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    labels = set()
    for t in range(0, len(frames), stride):
        dets = with_retry(lambda: detector.detect(frames[t], vocabulary), attempts, sleep=sleep)
        for d in dets:
            if float(d.get("score", 1.0)) >= threshold:
                labels.add(str(d["label"]).strip().lower())
    return sorted(labels)


RUBRIC = (
    "Rate the caption from 0 to 10 by how well it agrees with the detected objects, considering:\n"
    "- accuracy: objects and events it mentions are actually present;\n"
    "- relevance: it focuses on the main content of the video;\n"
    "- completeness: it covers the important detected objects;\n"
    "- clarity: it is fluent and unambiguous.\n"
)


def prompt_template(caption: str, objects: Sequence[str]) -> str:
    """Judge prompt embedding the caption, the canonical object list, the rubric and the output format."""
    objs = sorted({o.strip().lower() for o in objects if o.strip()})
    if objs:
        obj_text = "Detected objects: " + ", ".join(objs) + "."
    else:
        obj_text = ("Detected objects: none (no_objects). Judge the caption on its own plausibility "
                    "and penalize hallucinated objects.")
    return (
        "You are evaluating a video caption against objects detected in the video.\n"
        f"{obj_text}\n"
        f"Caption: {caption.strip()}\n\n"
        f"{RUBRIC}\n"
        'Respond with only a JSON object of the form {"score": <integer 0-10>, '
        '"justification": "<one or two sentences>"}.'
    )


REPAIR_PROMPT = (
    "Your previous reply was not a valid JSON object. Reply again with only "
    '{"score": <integer 0-10>, "justification": "<text>"} and nothing else.\n\nPrevious reply:\n'
)


def parse_judgement(text: str) -> dict:
    """Read ``{"score", "justification"}`` from a judge reply (a bare or fenced JSON object)."""
    candidates = [text.strip()]
    m = re.search(r"\{.*\}", text, flags=re.S)
    if m:
        candidates.append(m.group(0))
    for c in candidates:
        try:
            obj = json.loads(c)
        except json.JSONDecodeError:
            continue
        if not isinstance(obj, dict) or "score" not in obj:
            continue
        score = obj["score"]
        if isinstance(score, bool) or not isinstance(score, (int, float)) or float(score) != int(score):
            raise JudgeParseError(f"score must be an integer, got {score!r}")
        score = int(score)
        if not SCORE_RANGE[0] <= score <= SCORE_RANGE[1]:
            raise JudgeParseError(f"score {score} outside 0-10")
        return {"score": score, "justification": str(obj.get("justification", ""))}
    raise JudgeParseError("no JSON object with a score found")


def score_caption(judge: JudgeClient, caption: str, objects: Sequence[str], attempts: int = 3,
                  sleep=time.sleep) -> tuple[dict, list[str]]:
    """Score one caption; malformed output gets one repair re-prompt. Returns ``(result, raw replies)``."""
    prompt = prompt_template(caption, objects)
    raw = [with_retry(lambda: judge.complete(prompt), attempts, sleep=sleep)]
    try:
        return parse_judgement(raw[0]), raw
    except JudgeParseError:
        raw.append(with_retry(lambda: judge.complete(REPAIR_PROMPT + raw[0]), attempts, sleep=sleep))
        return parse_judgement(raw[1]), raw


@dataclass
class JudgeConfig:
    stride: int = 10
    threshold: float = 0.3
    attempts: int = 3
    prompt: str = CAPTION_PROMPT

    def as_dict(self) -> dict:
        return {"stride": self.stride, "threshold": self.threshold, "attempts": self.attempts,
                "prompt": self.prompt}


@dataclass
class JudgeReport:
    """Per-video results plus Mean Score and HSR over the successfully scored videos."""

    videos: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def scores(self) -> list[int]:
        return [v["score"] for v in self.videos if v.get("score") is not None]

    @property
    def mean_score(self) -> float | None:
        s = self.scores
        return float(sum(s) / len(s)) if s else None

    @property
    def hsr(self) -> float | None:
        s = self.scores
        return float(sum(1 for x in s if x >= HIGH_SCORE) / len(s)) if s else None

    @property
    def failures(self) -> list[str]:
        return [v["video_id"] for v in self.videos if v.get("score") is None]

    def as_dict(self) -> dict:
        return {
            "config": self.config,
            "mean_score": self.mean_score,
            "hsr": self.hsr,
            "n_scored": len(self.scores),
            "n_failed": len(self.failures),
            "failures": self.failures,
            "videos": sorted(self.videos, key=lambda v: v["video_id"]),
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True, indent=2) + "\n"


def judge_run(videos, captioner: CaptionerClient, detector: DetectorClient, judge: JudgeClient,
              cfg: JudgeConfig | None = None, vocabulary: Sequence[str] | None = None,
              sleep=time.sleep) -> JudgeReport:
    """Caption, detect and score every video; failures are recorded, not raised.

    ``videos`` maps a video id to its ``(T, H, W, 3)`` frames (or is a
    sequence of ``(id, frames)`` pairs). Videos are processed in id order.
    """
    cfg = cfg or JudgeConfig()
    vocab = load_vocabulary() if vocabulary is None else list(vocabulary)
    items = sorted(videos.items() if isinstance(videos, dict) else list(videos), key=lambda kv: kv[0])
    report = JudgeReport(config=cfg.as_dict())
    for vid, frames in items:
        entry = {"video_id": str(vid), "caption": None, "objects": None, "no_objects": None,
                 "score": None, "justification": None, "raw": [], "error": None}
        try:
            caption = with_retry(lambda: captioner.caption(frames, cfg.prompt), cfg.attempts, sleep=sleep)
            entry["caption"] = caption
            objects = detect_objects(frames, detector, vocab, cfg.stride, cfg.threshold, cfg.attempts, sleep)
            entry["objects"] = objects
            entry["no_objects"] = not objects
            result, raw = score_caption(judge, caption, objects, cfg.attempts, sleep)
            entry["raw"] = raw
            entry.update(result)
        except (ClientError, JudgeParseError) as exc:
            entry["error"] = f"{type(exc).__name__}: {exc}"
            log.error("video %s failed: %s", vid, exc)
        report.videos.append(entry)
    return report
