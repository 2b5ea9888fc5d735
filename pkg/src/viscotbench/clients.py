"""Wire clients for the answering model, the judge, and the region
proposer, each paired with a deterministic in-process mock.

HTTP clients speak small JSON protocols (images as base64 PNG) and retry
transport failures up to 3 attempts with exponential backoff. Mocks are
pure functions of their script plus the request, so every pipeline test
runs without live services.
"""

from __future__ import annotations

import base64
import hashlib
import io
import re
import string
import threading
import time
from dataclasses import dataclass
from typing import Mapping, Protocol

import httpx
import numpy as np
from PIL import Image as PILImage

from .errors import EndpointError, JudgeError, TransportError
from .imagecore import BBox, as_image, round_half_up

__all__ = [
    "ModelRequest",
    "ModelResponse",
    "RegionProposal",
    "ModelClient",
    "GrounderClient",
    "Judge",
    "HttpModelClient",
    "HttpGrounderClient",
    "RemoteLlmJudge",
    "ExactMatchJudge",
    "ScriptedMockModel",
    "MockJudge",
    "MockGrounder",
    "query_model",
    "judge_answer",
    "propose_regions",
    "parse_bbox_text",
    "encode_image_b64",
    "decode_image_b64",
    "normalize_answer",
    "JUDGE_PROMPT_TEMPLATE",
]

MAX_ATTEMPTS = 3
BACKOFF_BASE_S = 0.5
DEFAULT_INFLIGHT_LIMIT = 4

JUDGE_PROMPT_TEMPLATE = """\
You are grading a visual question answering system.

Question: {question}
Reference answer: {ground_truth}
Candidate answer: {prediction}

Does the candidate answer match the reference answer, accounting for minor
paraphrasing or synonym variations? Reply with exactly one word: YES or NO.
"""


def _prompt_hash(template: str) -> str:
    return hashlib.sha256(template.encode("utf-8")).hexdigest()[:12]


@dataclass(frozen=True)
class ModelRequest:
    """One query to the answering model.

    direct_answer mode may carry several images (original plus patches);
    predict_bbox mode carries exactly one.
    """

    question: str
    images: tuple
    mode: str  # "direct_answer" | "predict_bbox"

    def __post_init__(self):
        if self.mode not in ("direct_answer", "predict_bbox"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if len(self.images) < 1:
            raise ValueError("request needs at least one image")
        if self.mode == "predict_bbox" and len(self.images) != 1:
            raise ValueError("predict_bbox mode carries exactly one image")


@dataclass(frozen=True)
class ModelResponse:
    text: str
    parsed_bbox: BBox | None = None


@dataclass(frozen=True)
class RegionProposal:
    box: BBox
    score: float
    phrase: str = ""

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")


class ModelClient(Protocol):
    def query(self, req: ModelRequest, context: Mapping | None = None) -> ModelResponse: ...


class GrounderClient(Protocol):
    def propose(
        self, img: np.ndarray, text: str, context: Mapping | None = None
    ) -> list[RegionProposal]: ...


class Judge(Protocol):
    @property
    def version(self) -> str: ...

    def judge(self, prediction: str, ground_truth: str, question: str) -> bool: ...


def encode_image_b64(img: np.ndarray) -> str:
    """Quantize to 8-bit and encode as a base64 PNG string."""
    data = round_half_up(np.asarray(img) * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    PILImage.fromarray(data, mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_image_b64(payload: str) -> np.ndarray:
    with PILImage.open(io.BytesIO(base64.b64decode(payload))) as im:
        return as_image(np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0)


_BBOX_RE = re.compile(
    r"\[\s*(-?\d+(?:\.\d+)?)\s*,\s*(-?\d+(?:\.\d+)?)\s*,"
    r"\s*(-?\d+(?:\.\d+)?)\s*,\s*(-?\d+(?:\.\d+)?)\s*\]"
)


def parse_bbox_text(text: str, width: int, height: int) -> BBox | None:
    """Extract `[x1, y1, x2, y2]` from model text; None on a parse miss.

    Values all <= 1.5 are treated as normalized coordinates and scaled by
    (width, height, width, height); anything else is taken as pixels.
    """
    match = _BBOX_RE.search(text)
    if match is None:
        return None
    vals = [float(g) for g in match.groups()]
    if all(v <= 1.5 for v in vals):
        vals = [vals[0] * width, vals[1] * height, vals[2] * width, vals[3] * height]
    try:
        return BBox(*vals)
    except ValueError:
        return None


def _finalize_response(text: str, req: ModelRequest) -> ModelResponse:
    parsed = None
    if req.mode == "predict_bbox":
        h, w = req.images[0].shape[:2]
        parsed = parse_bbox_text(text, w, h)
    return ModelResponse(text=text, parsed_bbox=parsed)


class _HttpBase:
    """Shared POST-with-retries plumbing for the wire clients."""

    def __init__(
        self,
        endpoint: str,
        token: str = "",
        timeout: float = 30.0,
        transport: httpx.BaseTransport | None = None,
        inflight_limit: int = DEFAULT_INFLIGHT_LIMIT,
        sleep=time.sleep,
    ):
        self.endpoint = endpoint.rstrip("/")
        headers = {"Authorization": f"Bearer {token}"} if token else {}
        self._client = httpx.Client(timeout=timeout, transport=transport, headers=headers)
        self._semaphore = threading.BoundedSemaphore(inflight_limit)
        self._sleep = sleep

    def _post(self, payload: dict) -> dict:
        last_exc: Exception | None = None
        for attempt in range(MAX_ATTEMPTS):
            try:
                with self._semaphore:
                    resp = self._client.post(self.endpoint, json=payload)
            except httpx.TransportError as exc:
                last_exc = exc
                if attempt + 1 < MAX_ATTEMPTS:
                    self._sleep(BACKOFF_BASE_S * 2**attempt)
                continue
            if resp.status_code >= 400:
                raise EndpointError(f"{self.endpoint} answered HTTP {resp.status_code}")
            return resp.json()
        raise TransportError(
            f"{self.endpoint} unreachable after {MAX_ATTEMPTS} attempts: {last_exc}"
        )

    def close(self):
        self._client.close()


class HttpModelClient(_HttpBase):
    """Client for the answering model.

    wire="simple" posts {question, images: [b64 png], mode} and reads
    {text}; wire="chat" speaks the common chat-completions shape with
    image parts and reads choices[0].message.content.
    """

    def __init__(self, endpoint: str, token: str = "", wire: str = "simple", **kwargs):
        super().__init__(endpoint, token, **kwargs)
        if wire not in ("simple", "chat"):
            raise ValueError(f"unknown wire format {wire!r}")
        self.wire = wire

    def query(self, req: ModelRequest, context: Mapping | None = None) -> ModelResponse:
        encoded = [encode_image_b64(img) for img in req.images]
        if self.wire == "simple":
            payload = {"question": req.question, "images": encoded, "mode": req.mode}
            body = self._post(payload)
            text = body.get("text", "")
        else:
            content = [{"type": "text", "text": req.question}]
            content += [
                {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{b}"}}
                for b in encoded
            ]
            body = self._post({"messages": [{"role": "user", "content": content}]})
            if "choices" in body:
                text = body["choices"][0]["message"]["content"]
            else:
                text = body.get("text", "")
        return _finalize_response(text, req)


class HttpGrounderClient(_HttpBase):
    """Client for the text-conditioned region proposer.

    Posts {image: b64 png, caption} and reads {boxes, scores, phrases}
    with boxes in pixel coordinates.
    """

    def propose(
        self, img: np.ndarray, text: str, context: Mapping | None = None
    ) -> list[RegionProposal]:
        body = self._post({"image": encode_image_b64(img), "caption": text})
        boxes = body.get("boxes", [])
        scores = body.get("scores", [])
        phrases = body.get("phrases", [""] * len(boxes))
        return [
            RegionProposal(box=BBox(*b), score=float(s), phrase=p)
            for b, s, p in zip(boxes, scores, phrases)
        ]


_PUNCT_TABLE = str.maketrans({c: " " for c in string.punctuation})


def normalize_answer(text: str) -> str:
    """Lowercase, strip punctuation, and collapse whitespace."""
    return " ".join(text.lower().translate(_PUNCT_TABLE).split())


class ExactMatchJudge:
    """Deterministic fallback judge: normalized string equality."""

    version = "exact-match/1"

    def judge(self, prediction: str, ground_truth: str, question: str) -> bool:
        return normalize_answer(prediction) == normalize_answer(ground_truth)


_VERDICT_RE = re.compile(r"\b(YES|NO)\b", re.IGNORECASE)


class RemoteLlmJudge(_HttpBase):
    """LLM-backed judge over the chat-completions wire shape.

    Sends the pinned prompt template and parses a YES/NO verdict; an
    unparseable reply raises JudgeError so the sample can be excluded.
    """

    def __init__(self, endpoint: str, token: str = "", **kwargs):
        super().__init__(endpoint, token, **kwargs)
        self.version = f"llm/{_prompt_hash(JUDGE_PROMPT_TEMPLATE)}"

    def judge(self, prediction: str, ground_truth: str, question: str) -> bool:
        prompt = JUDGE_PROMPT_TEMPLATE.format(
            question=question, ground_truth=ground_truth, prediction=prediction
        )
        body = self._post({"messages": [{"role": "user", "content": prompt}]})
        if "choices" in body:
            text = body["choices"][0]["message"]["content"]
        else:
            text = body.get("text", "")
        match = _VERDICT_RE.search(text)
        if match is None:
            raise JudgeError(f"verdict not parseable as YES/NO: {text!r}")
        return match.group(1).upper() == "YES"


def _stable_unit(*parts) -> float:
    """Deterministic value in [0, 1) from hashable parts."""
    h = hashlib.sha256("|".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "big") / 2**64


class ScriptedMockModel:
    """In-process stand-in for the answering model.

    Script keys (all optional):
      answers            {sample_id: answer text} for direct_answer mode
      echo_ground_truth  answer with the context's ground truth when no
                         scripted answer matches
      default_answer     fallback text (default "unknown")
      wrong_answer       text emitted when a failure rule fires
      bbox_by_sample     {sample_id: bbox text} for predict_bbox mode
      bbox_text          global bbox text fallback
      severity_fail_rate fail a sample when a stable hash of
                         (sample_id, perturbation) falls below
                         rate * severity; failure sets are nested across
                         severities, so accuracy never rises with severity
    """

    def __init__(self, script: Mapping | None = None):
        self.script = dict(script or {})

    def query(self, req: ModelRequest, context: Mapping | None = None) -> ModelResponse:
        context = context or {}
        sample_id = context.get("sample_id", "")
        if req.mode == "predict_bbox":
            text = self.script.get("bbox_by_sample", {}).get(
                sample_id, self.script.get("bbox_text", "[0.25, 0.25, 0.75, 0.75]")
            )
            return _finalize_response(text, req)
        rate = self.script.get("severity_fail_rate")
        severity = context.get("severity") or 0
        if rate and severity > 0:
            u = _stable_unit(sample_id, context.get("perturbation", ""))
            if u < rate * severity:
                return _finalize_response(
                    self.script.get("wrong_answer", "i cannot tell"), req
                )
        answer = self.script.get("answers", {}).get(sample_id)
        if answer is None and self.script.get("echo_ground_truth"):
            answer = context.get("ground_truth")
        if answer is None:
            answer = self.script.get("default_answer", "unknown")
        return _finalize_response(answer, req)


class MockJudge:
    """Exact-match judge with optional scripted overrides.

    Script: {"verdicts": {"<prediction>||<ground_truth>": bool}}.
    """

    def __init__(self, script: Mapping | None = None):
        self.script = dict(script or {})
        self.version = f"mock/{_prompt_hash(repr(sorted(self.script.items())))}"
        self._fallback = ExactMatchJudge()

    def judge(self, prediction: str, ground_truth: str, question: str) -> bool:
        key = f"{prediction}||{ground_truth}"
        verdicts = self.script.get("verdicts", {})
        if key in verdicts:
            return bool(verdicts[key])
        return self._fallback.judge(prediction, ground_truth, question)


class MockGrounder:
    """Scripted region proposer.

    Script: {"proposals": [{"box": [x1,y1,x2,y2], "score": s, "phrase": p}],
    "by_sample": {sample_id: [...]}, "normalized": bool}. Normalized boxes
    are scaled by the image dimensions at call time.
    """

    def __init__(self, script: Mapping | None = None):
        self.script = dict(script or {})

    def propose(
        self, img: np.ndarray, text: str, context: Mapping | None = None
    ) -> list[RegionProposal]:
        context = context or {}
        entries = self.script.get("by_sample", {}).get(
            context.get("sample_id", ""), self.script.get("proposals", [])
        )
        h, w = img.shape[:2]
        out = []
        for entry in entries:
            box = list(entry["box"])
            if self.script.get("normalized"):
                box = [box[0] * w, box[1] * h, box[2] * w, box[3] * h]
            out.append(
                RegionProposal(
                    box=BBox(*box),
                    score=float(entry["score"]),
                    phrase=entry.get("phrase", ""),
                )
            )
        return out


def query_model(
    client: ModelClient, req: ModelRequest, context: Mapping | None = None
) -> ModelResponse:
    return client.query(req, context=context)


def judge_answer(judge: Judge, prediction: str, ground_truth: str, question: str) -> bool:
    return judge.judge(prediction, ground_truth, question)


def propose_regions(
    grounder: GrounderClient,
    img: np.ndarray,
    query_text: str,
    threshold: float = 0.4,
    context: Mapping | None = None,
) -> list[RegionProposal]:
    """Proposals with score >= threshold, sorted by descending score."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    proposals = grounder.propose(img, query_text, context=context)
    kept = [p for p in proposals if p.score >= threshold]
    return sorted(kept, key=lambda p: -p.score)
